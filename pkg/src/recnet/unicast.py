"""The unicast IPC process.

Forwarding over a compound address space, the two-message flow-allocation
protocol, DCTCP-style congestion management driven by the multi-bit ECN
field, link-state dissemination over management flows, enrolment of new
members and the connection-manager exchange that classifies fresh lower
flows as enrolment, management or data transfer.

Internal endpoint ids 0 (flow allocator) and 1 (directory) multiplex the
IPCP's own protocol machines; ids from 64 up are N-flows.
"""

import struct

from .core import (Address, LayerConfig, QosSpec, PacketBuffer, HashAlgo,
                   NameHash, RecnetError, hash_name, DirectoryPolicy,
                   RoutingPolicy)
from .routing import Lsa, Lsdb, build_table, MSG_LSA, INF_DELAY
from .dht import DhtNode, StaticDirectory, RECORD_TTL
from .netsim import TimeoutExpired
from . import irm as irm_mod

EID_FA = 0
EID_DIR = 1
EID_NFLOW_BASE = 64

FA_REQ = 0
FA_REPLY = 1
FA_CWND = 2
FA_DEALLOC = 3

MSG_DIR_UPD = 4
MSG_OFFER = 6
MSG_ENROL_REQ = 7
MSG_ENROL_RESP = 8

FA_VERSION = 1
FA_TIMEOUT = 5000
ENROL_TIMEOUT = 5000

# ECN marking thresholds (packets queued on the outgoing flow)
ECN_LOW = 8
ECN_HIGH = 32

CG_WINDOW = 250         # ms, congestion feedback cadence
CG_G_SHIFT = 4          # alpha gain g = 1/16
CG_IDLE_WINDOWS = 8     # feedback silence before the throttle lifts

WILDCARD = None


class NoRoute(RecnetError):
    pass


class ProtocolMismatch(RecnetError):
    pass


class NoLowerFlow(RecnetError):
    pass


class VersionMismatch(RecnetError):
    pass


def _blob(b: bytes) -> bytes:
    return struct.pack(">H", len(b)) + b


def _unblob(data, off):
    ln, = struct.unpack(">H", data[off:off + 2])
    return data[off + 2:off + 2 + ln], off + 2 + ln


class DtHeader:
    """Data-transfer header: TTL, destination, QoS priority, ECN, EID."""

    __slots__ = ("ttl", "dst", "qos", "ecn", "eid")

    def __init__(self, ttl, dst, qos=0, ecn=0, eid=0):
        self.ttl = ttl
        self.dst = dst
        self.qos = qos
        self.ecn = ecn
        self.eid = eid

    def encode(self, level_count: int) -> bytes:
        return (struct.pack(">B", self.ttl)
                + struct.pack(">%dI" % level_count, *self.dst.levels)
                + struct.pack(">BBQ", self.qos, self.ecn, self.eid))

    @classmethod
    def decode(cls, data: bytes, level_count: int):
        hlen = 1 + 4 * level_count + 10
        if len(data) < hlen:
            raise ValueError("short data-transfer header")
        ttl = data[0]
        levels = struct.unpack(">%dI" % level_count, data[1:1 + 4 * level_count])
        qos, ecn, eid = struct.unpack(">BBQ", data[1 + 4 * level_count:hlen])
        return cls(ttl, Address(levels), qos, ecn, eid), hlen

    def __repr__(self):
        return "DtHeader(ttl=%d, dst=%s, qos=%d, ecn=%d, eid=%d)" % (
            self.ttl, self.dst, self.qos, self.ecn, self.eid)


def dt_decide(self_addr: Address, dst: Address, tables):
    """Forwarding decision after the TTL check.

    Levels are compared most-significant first; the first mismatch picks
    that level's table.  A full match delivers.  Returns
    ("deliver", None) | ("forward", [next hop addresses]) | ("drop", why).
    """
    for lvl in range(len(self_addr.levels)):
        if dst.levels[lvl] == self_addr.levels[lvl]:
            continue
        tbl = tables.get(lvl)
        if not tbl:
            return ("drop", "no-route")
        hops = tbl.get(dst.levels[lvl])
        if not hops:
            hops = tbl.get(WILDCARD)
        if not hops:
            return ("drop", "no-route")
        return ("forward", hops)
    return ("deliver", None)


def build_area_tables(self_addr: Address, areas):
    """Static per-level tables for a hierarchically addressed layer.

    ``areas`` is a list of dicts {level, links, marked}: the routing areas
    with their member adjacencies and the members marked as participating
    at a higher level.  Levels where the node has no area of its own get
    a wildcard route toward the lowest-addressed marked member of its
    nearest area.
    """
    level_count = len(self_addr.levels)
    mine = {}                   # level -> (graph, marked)
    for area in areas:
        graph = {}
        for a, b in area["links"]:
            graph.setdefault(a, {})[b] = 1
            graph.setdefault(b, {})[a] = 1
        if self_addr in graph:
            mine[area["level"]] = (graph, set(area.get("marked", ())))
    tables = {}
    from .routing import spf_compute
    for lvl, (graph, marked) in mine.items():
        nh, _ = spf_compute(graph, self_addr)
        tables[lvl] = {dst.levels[lvl]: [hop] for dst, hop in nh.items()}
    participating = sorted(mine)
    for lvl in range(level_count):
        if lvl in tables:
            continue
        above = [p for p in participating if p > lvl]
        if not above:
            continue
        a = above[0]
        graph, marked = mine[a]
        exits = sorted(m for m in marked if m != self_addr)
        if not exits:
            continue
        target = exits[0]
        nh, _ = spf_compute(graph, self_addr)
        if target in nh:
            tables[lvl] = {WILDCARD: [nh[target]]}
        elif target == self_addr:
            pass
    return tables


def ecn_mark(queue_depth: int, thresholds=(ECN_LOW, ECN_HIGH)) -> int:
    """0 below the low threshold, scaling linearly to 255 at the high."""
    low, high = thresholds
    if queue_depth <= low:
        return 0
    if queue_depth >= high:
        return 255
    return (queue_depth - low) * 255 // (high - low)


class CongestionState:
    """Receiver-side DCTCP-style estimator for one N-flow."""

    def __init__(self, mps=1024, cwnd=None):
        self.alpha = 0.0
        self.mps = mps
        self.cwnd_bytes = cwnd if cwnd is not None else 8 * mps
        self.bytes_acked_window = 0
        self.bytes_marked_window = 0
        self.window_start = None
        self.windows_since_mark = None      # None: never congested


def fecn_update(cs: CongestionState, acked_bytes: int,
                marked_bytes: float) -> int:
    """Fold one window of traffic into alpha and resize the window."""
    if acked_bytes > 0:
        frac = marked_bytes / acked_bytes
        cs.alpha += (frac - cs.alpha) / (1 << CG_G_SHIFT)
    if marked_bytes > 0:
        cs.cwnd_bytes = max(cs.mps, int(cs.cwnd_bytes * (1 - cs.alpha / 2)))
    else:
        cs.cwnd_bytes += cs.mps
    return cs.cwnd_bytes


def qos_priority(qs: QosSpec) -> int:
    """Map a QoS spec onto a forwarding priority (table index)."""
    if qs.in_order and qs.loss > 0 and qs.max_gap > 0:
        return 2        # interactive voice-like
    if qs.in_order and qs.loss > 0 and qs.bandwidth > 0:
        return 1        # streaming video-like
    return 0


class Remote:
    __slots__ = ("addr", "eid", "lower_fd", "alive")

    def __init__(self, addr, eid, lower_fd=None, alive=True):
        self.addr = addr
        self.eid = eid
        self.lower_fd = lower_fd
        self.alive = alive

    def __repr__(self):
        return "Remote(%s, eid=%d, lower=%s%s)" % (
            self.addr, self.eid, self.lower_fd,
            "" if self.alive else " dead")


class FaEntry:
    def __init__(self, eid, ep, qs, allocator):
        self.eid = eid
        self.ep = ep
        self.qs = qs
        self.allocator = allocator
        self.remotes = []
        self.policy = "first"
        self._rr = 0
        # sender side: None means no feedback yet, no throttle
        self.cwnd = None
        self.budget = 0
        self.last_feedback = None
        self.refill_timer = None
        # receiver side
        self.cong = CongestionState()

    def live_remotes(self):
        return [r for r in self.remotes if r.alive]

    def pick_remote(self):
        live = self.live_remotes()
        if not live:
            return None
        if self.policy == "load_balance":
            r = live[self._rr % len(live)]
            self._rr += 1
            return r
        return live[0]


class FlowAllocator:
    """Maps N-flow endpoints to remote (address, eid) pairs and runs the
    request/reply allocation protocol plus congestion feedback."""

    def __init__(self, ipcp):
        self.ipcp = ipcp
        self.entries = {}           # local eid -> FaEntry
        self.pending = {}           # local eid -> Future
        self._eid = EID_NFLOW_BASE
        self.sent_log = []
        self.rcvd_log = []
        self.released = 0           # network-resource releases performed

    def _next_eid(self):
        eid = self._eid
        self._eid += 1
        return eid

    # -- protocol: client side ------------------------------------------

    def alloc(self, ep, nh, qs, dst_addr):
        sim = self.ipcp.sim
        eid = self._next_eid()
        entry = FaEntry(eid, ep, qs, allocator=True)
        entry.cong.mps = self.ipcp.layer.mps
        self.entries[eid] = entry
        fut = sim.future()
        self.pending[eid] = fut
        msg = (bytes([FA_REQ, FA_VERSION])
               + self.ipcp.encode_addr(self.ipcp.addr)
               + struct.pack(">Q", eid) + qs.encode()
               + bytes([list(HashAlgo).index(nh.algo)]) + _blob(nh.digest))
        self.sent_log.append({"type": "req", "src_addr": self.ipcp.addr,
                              "src_eid": eid, "qos": qs.copy(),
                              "dst_hash": nh})
        sim.trace.add(sim.now, "fa-req", str(self.ipcp.addr), eid, nh.short())
        self.ipcp.send_internal(dst_addr, EID_FA, msg)
        try:
            reply = yield from sim.await_(fut, FA_TIMEOUT)
        except TimeoutExpired:
            self.pending.pop(eid, None)
            self.entries.pop(eid, None)
            raise
        if reply["response"] < 0:
            self.entries.pop(eid, None)
            raise irm_mod.AllocationRefused("fa response %d" % reply["response"])
        lower = self.ipcp.adjacency_fd(dst_addr)
        entry.remotes.append(Remote(dst_addr, reply["dst_eid"], lower))
        ep.attach(self, eid)
        return entry

    # -- protocol: both sides -------------------------------------------

    def handle_msg(self, data: bytes):
        kind = data[0]
        sim = self.ipcp.sim
        if kind == FA_REQ:
            version = data[1]
            src_addr, off = self.ipcp.decode_addr(data, 2)
            src_eid, = struct.unpack(">Q", data[off:off + 8])
            off += 8
            qs = QosSpec.decode(data[off:off + QosSpec.WIRE_LEN])
            off += QosSpec.WIRE_LEN
            algo = list(HashAlgo)[data[off]]
            digest, off = _unblob(data, off + 1)
            nh = NameHash(algo, digest)
            self.rcvd_log.append({"type": "req", "version": version,
                                  "src_addr": src_addr, "src_eid": src_eid,
                                  "qos": qs, "dst_hash": nh})
            sim.trace.add(sim.now, "fa-rreq", str(self.ipcp.addr), src_eid,
                          nh.short())
            sim.spawn(self._serve_request(version, src_addr, src_eid, qs, nh),
                      "fa-serve")
        elif kind == FA_REPLY:
            version = data[1]
            src_eid, dst_eid, response = struct.unpack(">QQb", data[2:19])
            reply = {"type": "reply", "version": version, "src_eid": src_eid,
                     "dst_eid": dst_eid, "response": response}
            self.rcvd_log.append(reply)
            sim.trace.add(sim.now, "fa-reply", str(self.ipcp.addr), src_eid,
                          dst_eid, response)
            fut = self.pending.pop(src_eid, None)
            if fut is not None:
                fut.resolve(reply)
        elif kind == FA_CWND:
            eid, cwnd = struct.unpack(">QI", data[1:13])
            entry = self.entries.get(eid)
            if entry is not None:
                entry.cwnd = cwnd
                entry.last_feedback = sim.now
                self._pump(entry)
        elif kind == FA_DEALLOC:
            eid, = struct.unpack(">Q", data[1:9])
            entry = self.entries.pop(eid, None)
            if entry is not None and entry.ep is not None:
                entry.ep.peer_closed()

    def _serve_request(self, version, src_addr, src_eid, qs, nh):
        sim = self.ipcp.sim
        refuse = -1
        endpoint = None
        if version == FA_VERSION:
            try:
                endpoint = yield from self.ipcp.system.irm.deliver_flow(
                    nh, qs, self)
            except RecnetError:
                endpoint = None
        if endpoint is None:
            reply = bytes([FA_REPLY, FA_VERSION]) + struct.pack(
                ">QQb", src_eid, 0, refuse)
            self.sent_log.append({"type": "reply", "src_eid": src_eid,
                                  "dst_eid": 0, "response": refuse})
            self.ipcp.send_internal(src_addr, EID_FA, reply)
            return
        eid = self._next_eid()
        entry = FaEntry(eid, endpoint, qs, allocator=False)
        entry.cong.mps = self.ipcp.layer.mps
        entry.remotes.append(Remote(src_addr, src_eid,
                                    self.ipcp.adjacency_fd(src_addr)))
        self.entries[eid] = entry
        endpoint.attach(self, eid)
        reply = bytes([FA_REPLY, FA_VERSION]) + struct.pack(
            ">QQb", src_eid, eid, 0)
        self.sent_log.append({"type": "reply", "src_eid": src_eid,
                              "dst_eid": eid, "response": 0})
        sim.trace.add(sim.now, "fa-accept", str(self.ipcp.addr), src_eid, eid)
        self.ipcp.send_internal(src_addr, EID_FA, reply)

    # -- endpoint net protocol (called by the IRM) ------------------------

    def on_tx(self, ep, eid):
        entry = self.entries.get(eid)
        if entry is not None:
            self._pump(entry)

    def flow_dealloc(self, ep, eid, allocator_side):
        entry = self.entries.get(eid)
        if entry is None:
            return
        if allocator_side:
            del self.entries[eid]
            self.released += 1
            remote = entry.remotes[0] if entry.remotes else None
            if remote is not None:
                msg = bytes([FA_DEALLOC]) + struct.pack(">Q", remote.eid)
                self.ipcp.send_internal(remote.addr, EID_FA, msg)
            self.ipcp.sim.trace.add(self.ipcp.sim.now, "fa-release",
                                    str(self.ipcp.addr), eid)
        else:
            entry.ep = None     # mapping persists until the allocator acts

    # -- data path ---------------------------------------------------------

    def _pump(self, entry):
        while True:
            if entry.ep is None:
                return
            if entry.cwnd is not None and entry.budget <= 0:
                self._arm_refill(entry)
                return
            pkt = entry.ep.pop_tx()
            if pkt is None:
                return
            remote = entry.pick_remote()
            if remote is None:
                continue        # no path: drop, FRCP recovers if configured
            if entry.cwnd is not None:
                entry.budget -= len(pkt)
            self.ipcp.dt_out(pkt, remote.addr, remote.eid,
                             qos_priority(entry.qs), lower_fd=remote.lower_fd)

    def _arm_refill(self, entry):
        if entry.refill_timer is not None:
            return
        entry.refill_timer = self.ipcp.sim.at(CG_WINDOW, self._refill, entry)

    def _refill(self, entry):
        entry.refill_timer = None
        if entry.cwnd is None:
            return
        if (entry.last_feedback is not None
                and self.ipcp.sim.now - entry.last_feedback
                > CG_IDLE_WINDOWS * CG_WINDOW):
            entry.cwnd = None       # feedback stopped; lift the throttle
        else:
            entry.budget = entry.cwnd
        self._pump(entry)

    def deliver_nflow(self, eid, payload: bytes, ecn: int):
        entry = self.entries.get(eid)
        if entry is None or entry.ep is None:
            return
        entry.ep.push_rx(PacketBuffer.for_payload(payload))
        cs = entry.cong
        now = self.ipcp.sim.now
        if cs.window_start is None:
            cs.window_start = now
        cs.bytes_acked_window += len(payload)
        cs.bytes_marked_window += len(payload) * ecn / 255.0
        if now - cs.window_start >= CG_WINDOW:
            marked = cs.bytes_marked_window
            cwnd = fecn_update(cs, cs.bytes_acked_window, marked)
            cs.bytes_acked_window = 0
            cs.bytes_marked_window = 0
            cs.window_start = now
            if marked > 0:
                cs.windows_since_mark = 0
            elif cs.windows_since_mark is not None:
                cs.windows_since_mark += 1
            if (cs.windows_since_mark is not None
                    and cs.windows_since_mark <= CG_IDLE_WINDOWS):
                remote = entry.pick_remote()
                if remote is not None:
                    msg = bytes([FA_CWND]) + struct.pack(">QI", remote.eid,
                                                         cwnd)
                    self.ipcp.send_internal(remote.addr, EID_FA, msg)

    # -- multipath maintenance ----------------------------------------------

    def add_remote_for_addr(self, peer_addr, lower_fd):
        for entry in self.entries.values():
            if not any(r.addr == peer_addr for r in entry.remotes):
                continue
            if any(r.lower_fd == lower_fd for r in entry.remotes):
                continue        # idempotent
            eid = entry.remotes[0].eid
            entry.remotes.append(Remote(peer_addr, eid, lower_fd))

    def drop_remotes_for_fd(self, lower_fd):
        for entry in self.entries.values():
            before = entry.live_remotes()
            entry.remotes = [r for r in entry.remotes
                             if r.lower_fd != lower_fd]
            if before and not entry.live_remotes() and entry.ep is not None:
                entry.ep.flow_down()

    def census(self):
        return {"fa_entries": len(self.entries)}


class LowerFlow:
    """One lower-layer flow owned by the IPCP, with its classification."""

    def __init__(self, ipcp, ep, fd):
        self.ipcp = ipcp
        self.ep = ep
        self.fd = fd
        self.component = None       # "dt" | "mgmt" | "enrolment"
        self.peer_addr = None
        self.alive = True
        self.inbox = []
        self.waiter = None
        self.peer_name = None
        self.peer_id = 0
        ep.owner_cb = self._on_msg
        ep.owner_link_cb = self._on_link
        ep.owner_closed_cb = self._on_closed

    def _on_msg(self, data: bytes):
        if (self.component is not None and data and data[0] == MSG_OFFER
                and (self.component != "dt" or self.ipcp.kind == "unicast")):
            # a retransmitted handshake: our reply was lost, repeat it.
            # Unambiguous for these flows: unicast dt packets in desk
            # topologies never see their TTL fall this low, management
            # types differ, and stateless broadcast data is never sniffed.
            try:
                _decode_offer(data)
            except Exception:
                pass
            else:
                self.ipcp._re_offer(self)
                return
        if self.component == "dt":
            self.ipcp._dt_rx(self, data)
        elif self.component == "mgmt":
            self.ipcp._mgmt_rx(self, data)
        else:
            self.inbox.append(data)
            if self.waiter is not None:
                w, self.waiter = self.waiter, None
                w.resolve()

    def next_msg(self, timeout=ENROL_TIMEOUT):
        while not self.inbox:
            self.waiter = self.ipcp.sim.future()
            yield from self.ipcp.sim.await_(self.waiter, timeout)
        return self.inbox.pop(0)

    def next_offer(self, attempts=4, timeout=1200, resend=None):
        """Await a decodable handshake offer, resending ours on timeout.
        Messages that are not offers are kept for after classification."""
        stash = []
        for attempt in range(attempts):
            try:
                while True:
                    data = yield from self.next_msg(timeout)
                    try:
                        offer = _decode_offer(data)
                    except Exception:
                        stash.append(data)
                        continue
                    self.inbox = stash + self.inbox
                    return offer
            except TimeoutExpired:
                if resend is not None and attempt < attempts - 1:
                    self.send(resend)
        self.inbox = stash + self.inbox
        raise TimeoutExpired("no handshake reply")

    def set_component(self, component):
        """Classify the flow and replay anything that raced the handshake."""
        self.component = component
        pending, self.inbox = self.inbox, []
        for data in pending:
            self._on_msg(data)

    def _on_link(self, up):
        self.alive = up
        self.ipcp._lower_link_event(self, up)

    def _on_closed(self):
        self.alive = False
        self.ipcp._lower_closed(self)

    def send(self, data: bytes):
        pb = PacketBuffer.for_payload(data) if isinstance(data, bytes) else data
        side = self.ep.sides[0]
        if len(side.tx_fifo) >= irm_mod.FIFO_CAP:
            self.ipcp.drops["queue-overflow"] = \
                self.ipcp.drops.get("queue-overflow", 0) + 1
            return False
        side.tx_fifo.append(pb)
        self.ep.tx_ready(side)
        return True

    def queue_depth(self):
        return len(self.ep.sides[0].tx_fifo)


class UnicastIpcp:
    kind = "unicast"

    def __init__(self, sim, system, name):
        self.sim = sim
        self.system = system
        self.name = name
        self.pid = None
        self.rec = None
        self.layer = None
        self.addr = None
        self.enrolled = False
        self.lsdb = Lsdb()
        self.lsa_seq = {}           # peer addr -> seq
        self.adjacencies = {}       # peer addr -> LowerFlow
        self.mgmt_flows = {}        # fd -> LowerFlow
        self.tables = {0: {}, 1: {}, 2: {}}
        self.fa = FlowAllocator(self)
        self.dht = None
        self.static_dir = None
        self.drops = {}
        self._resolve_cache = {}
        self._pending_lower = []
        system.add_ipcp(self)
        self.rec = system.irm.adopt_ipcp(self)

    # -- identity -----------------------------------------------------------

    @property
    def layer_name(self):
        return self.layer.layer_name.decode() if self.layer else ""

    @property
    def hash_algo(self):
        return self.layer.hash_algo if self.layer else HashAlgo.SHA3_256

    @property
    def mpl(self):
        return self.layer.mpl if self.layer else None

    def encode_addr(self, addr):
        return struct.pack(">B%dI" % len(addr), len(addr), *addr.levels)

    def decode_addr(self, data, off):
        n = data[off]
        levels = struct.unpack(">%dI" % n, data[off + 1:off + 1 + 4 * n])
        return Address(levels), off + 1 + 4 * n

    # -- membership ----------------------------------------------------------

    def bootstrap(self, cfg: LayerConfig, addr=None):
        self.layer = cfg
        self.addr = addr if addr is not None else self._random_addr()
        self.enrolled = True
        self._setup_directory(first_member=True)
        self.sim.trace.add(self.sim.now, "bootstrap", self.system.name,
                           self.name, str(self.addr))

    def _random_addr(self):
        levels = [0] * self.layer.level_count
        levels[0] = self.sim.rng.randrange(1, 2 ** 32)
        return Address(levels)

    def _setup_directory(self, first_member):
        if self.layer.directory_policy is DirectoryPolicy.DHT:
            node_id = hash_name(self.encode_addr(self.addr),
                                self.layer.hash_algo).digest
            self.dht = DhtNode(self.sim, node_id, self.addr,
                               _DhtTransport(self))
            self.dht.joined = first_member
        else:
            self.static_dir = StaticDirectory()

    def enrol(self, dst, addr=None):
        """Join an existing layer via a member accepting flows for dst."""
        lf = yield from self._cm_flow(dst, "enrolment")
        try:
            data = None
            for attempt in range(4):
                lf.send(bytes([MSG_ENROL_REQ, FA_VERSION]))
                try:
                    data = yield from lf.next_msg(timeout=1200)
                    break
                except TimeoutExpired:
                    continue
            if data is None:
                raise NoLowerFlow("enrolment timed out")
            if data[0] != MSG_ENROL_RESP:
                raise ProtocolMismatch("expected enrolment response")
            if data[1] != FA_VERSION:
                raise VersionMismatch(str(data[1]))
            cfg, assigned = _decode_layer_config(data, 2)
        finally:
            self.system.irm.flow_dealloc(self.rec, lf.fd)
        self.layer = cfg
        self.addr = (addr if addr is not None else
                     (Address.single(assigned) if assigned
                      else self._random_addr()))
        self.enrolled = True
        self._setup_directory(first_member=False)
        self.sim.trace.add(self.sim.now, "enrol", self.system.name,
                           self.name, str(self.addr))

    def connect(self, dst, components=("dt", "mgmt"), via=None):
        """Create the adjacency flows to another member (dt and mgmt)."""
        if not self.enrolled:
            raise NoLowerFlow("not enrolled")
        for comp in components:
            lf = yield from self._cm_flow(dst, comp, via=via)
            self._classified(lf)
        yield self.sim.sleep(2)     # let first advertisements propagate

    def disconnect(self, dst):
        for peer_addr, lf in list(self.adjacencies.items()):
            if lf.peer_name == dst:
                self._teardown_adjacency(lf)
        for fd, lf in list(self.mgmt_flows.items()):
            if lf.peer_name == dst:
                del self.mgmt_flows[fd]
                self.system.irm.flow_dealloc(self.rec, fd)

    def _cm_flow(self, dst, component, via=None):
        """Allocate a lower flow and run the connection-manager exchange."""
        irm = self.system.irm
        try:
            fd = yield from irm.flow_alloc_internal(self.rec, dst,
                                                    exclude=self, via=via)
        except RecnetError as err:
            raise NoLowerFlow(str(err))
        ep, _ = irm.rec_fd(self.rec, fd)
        lf = LowerFlow(self, ep, fd)
        lf.peer_name = dst
        inst = str(self.addr) if self.addr is not None else ""
        offer = _encode_offer(component, inst, "v1")
        lf.send(offer)
        try:
            pm_name, instance, protocols = yield from lf.next_offer(
                resend=offer)
        except TimeoutExpired:
            irm.flow_dealloc(self.rec, fd)
            raise NoLowerFlow("handshake timed out")
        if pm_name != component:
            irm.flow_dealloc(self.rec, fd)
            raise ProtocolMismatch("%s vs %s" % (pm_name, component))
        lf.peer_addr = Address.parse(instance) if instance else None
        lf.set_component(component)
        return lf

    def accept_lower_flow(self, ep, qs, fd=None):
        """A fresh lower flow arrived; classify it by its first message."""
        if fd is None:
            fd = self.system.irm._map_fd(self.rec, ep, 0, "accept")
        lf = LowerFlow(self, ep, fd)
        lf.peer_name = None
        self.sim.spawn(self._classify(lf), "cm-classify")

    def _classify(self, lf):
        try:
            pm_name, instance, protocols = yield from lf.next_offer()
        except TimeoutExpired:
            self.system.irm.flow_dealloc(self.rec, lf.fd)
            return
        if pm_name not in ("dt", "mgmt", "enrolment") or not self.enrolled:
            lf.send(_encode_offer("reject", "", ""))
            self.system.irm.flow_dealloc(self.rec, lf.fd)
            return
        lf.peer_addr = Address.parse(instance) if instance else None
        lf.send(_encode_offer(pm_name, str(self.addr), "v1"))
        self._pre_classify(lf, pm_name)

    def _re_offer(self, lf):
        inst = str(self.addr) if self.addr is not None else ""
        lf.send(_encode_offer(lf.component, inst, "v1"))

    def _pre_classify(self, lf, pm_name):
        lf.component = pm_name
        self._classified(lf)
        pending, lf.inbox = lf.inbox, []
        for data in pending:
            lf._on_msg(data)

    def _classified(self, lf):
        if lf.component == "dt":
            self._dt_established(lf)
        elif lf.component == "mgmt":
            self.mgmt_flows[lf.fd] = lf
            self._sync_mgmt_peer(lf)
        elif lf.component == "enrolment":
            self.sim.spawn(self._serve_enrolment(lf), "enrol-serve")

    def _serve_enrolment(self, lf):
        # serve repeated requests: responses may be lost and re-asked for
        while True:
            try:
                data = yield from lf.next_msg()
            except TimeoutExpired:
                return
            if not lf.alive:
                return
            if data and data[0] == MSG_ENROL_REQ:
                lf.send(bytes([MSG_ENROL_RESP, FA_VERSION])
                        + _encode_layer_config(self.layer, 0))

    # -- data transfer adjacencies -------------------------------------------

    def _dt_established(self, lf):
        self.adjacencies[lf.peer_addr] = lf
        self.sim.trace.add(self.sim.now, "adjacency", self.system.name,
                           str(self.addr), str(lf.peer_addr))
        self._originate_lsa(lf.peer_addr, withdraw=False)
        if self.dht is not None and not self.dht.joined:
            self.sim.spawn(self.dht.join(lf.peer_addr), "dht-join")
        self.fa.add_remote_for_addr(lf.peer_addr, lf.fd)

    def _teardown_adjacency(self, lf):
        if self.adjacencies.get(lf.peer_addr) is lf:
            del self.adjacencies[lf.peer_addr]
            self._originate_lsa(lf.peer_addr, withdraw=True)
            self.fa.drop_remotes_for_fd(lf.fd)
        self.system.irm.flow_dealloc(self.rec, lf.fd)

    def _lower_link_event(self, lf, up):
        if lf.component == "dt" and lf.peer_addr is not None:
            if not up:
                self.fa.drop_remotes_for_fd(lf.fd)
                if self.adjacencies.get(lf.peer_addr) is lf:
                    del self.adjacencies[lf.peer_addr]
                self._originate_lsa(lf.peer_addr, withdraw=True)
            else:
                self.adjacencies[lf.peer_addr] = lf
                self._originate_lsa(lf.peer_addr, withdraw=False)
                self.fa.add_remote_for_addr(lf.peer_addr, lf.fd)

    def _lower_closed(self, lf):
        if lf.component == "dt" and self.adjacencies.get(lf.peer_addr) is lf:
            del self.adjacencies[lf.peer_addr]
            self._originate_lsa(lf.peer_addr, withdraw=True)
            self.fa.drop_remotes_for_fd(lf.fd)
        self.mgmt_flows.pop(lf.fd, None)
        try:
            self.system.irm.flow_dealloc(self.rec, lf.fd)
        except RecnetError:
            pass

    def adjacency_fd(self, peer_addr):
        lf = self.adjacencies.get(peer_addr)
        return lf.fd if lf is not None and lf.alive else None

    def _adjacency_by_fd(self, fd):
        for lf in self.adjacencies.values():
            if lf.fd == fd:
                return lf
        return None

    # -- link-state dissemination ---------------------------------------------

    def _originate_lsa(self, peer_addr, withdraw):
        seq = self.lsa_seq.get(peer_addr, 0) + 1
        self.lsa_seq[peer_addr] = seq
        qs = QosSpec(delay=INF_DELAY if withdraw else self._link_delay(peer_addr))
        lsa = Lsa(self.addr, peer_addr, qs, seq,
                  higher_level_participant=False)
        raw = lsa.encode(self.layer.level_count)
        if self.lsdb.merge(lsa):
            self._recompute()
        self._flood(raw, except_fd=None)

    def _link_delay(self, peer_addr):
        lf = self.adjacencies.get(peer_addr)
        if lf is None:
            return 1
        link = getattr(lf.ep.net, "link", None)
        return link.delay if link is not None else 1

    def _flood(self, raw: bytes, except_fd):
        for fd, lf in self.mgmt_flows.items():
            if fd != except_fd and lf.alive:
                lf.send(raw)

    def _sync_mgmt_peer(self, lf):
        for lsa in self.lsdb.all_lsas():
            lf.send(lsa.encode(self.layer.level_count))
        if self.static_dir is not None:
            for upd in self.static_dir.snapshot_updates(self.addr):
                lf.send(bytes([MSG_DIR_UPD]) + upd)

    def _mgmt_rx(self, lf, data: bytes):
        if not data:
            return
        if data[0] == MSG_LSA:
            lsa = Lsa.decode(data, self.layer.level_count)
            if self.lsdb.merge(lsa):
                self._recompute()
                self._flood(data, except_fd=lf.fd)
        elif data[0] == MSG_DIR_UPD and self.static_dir is not None:
            if self.static_dir.apply_update(data[1:]):
                self._flood(data, except_fd=lf.fd)

    def _recompute(self):
        use_lfa = self.layer.routing_policy is RoutingPolicy.LFA
        for prio in (0, 1, 2):
            table = build_table(self.lsdb, self.addr, prio)
            if not use_lfa:
                table = {dst: hops[:1] for dst, hops in table.items()}
            self.tables[prio] = {dst.levels[0]: hops
                                 for dst, hops in table.items()}

    # -- registration and resolution -------------------------------------------

    def reg(self, nh):
        if self.dht is not None:
            yield from self.dht.put(nh.digest, self.addr, RECORD_TTL)
        elif self.static_dir is not None:
            self.static_dir.local_add(nh.digest, self.addr)
            upd = self.static_dir.make_update(self.addr, "add", nh.digest,
                                              self.addr)
            self._flood(bytes([MSG_DIR_UPD]) + upd, except_fd=None)

    def unreg(self, nh):
        if self.dht is not None:
            yield from self.dht.remove(nh.digest, self.addr)
        elif self.static_dir is not None:
            self.static_dir.local_del(nh.digest, self.addr)
            upd = self.static_dir.make_update(self.addr, "del", nh.digest,
                                              self.addr)
            self._flood(bytes([MSG_DIR_UPD]) + upd, except_fd=None)

    def dir_query(self, nh):
        """Resolve a hash to one address (seeded anycast pick)."""
        if not self.enrolled:
            return None
        if self.dht is not None:
            values = yield from self.dht.get(nh.digest)
        else:
            values = self.static_dir.get(nh.digest)
        if not values:
            return None
        values = sorted(values)
        addr = values[0] if len(values) == 1 else \
            self.sim.rng.choice(values)
        self._resolve_cache[nh.digest] = addr
        return addr

    def query(self, nh):
        addr = yield from self.dir_query(nh)
        return addr

    # -- N-flow allocation (called by the IRM) ----------------------------------

    def flow_alloc(self, ep, nh, qs):
        dst_addr = self._resolve_cache.get(nh.digest)
        if dst_addr is None:
            dst_addr = yield from self.dir_query(nh)
        if dst_addr is None:
            raise irm_mod.NameUnresolvable(nh.short())
        yield from self.fa.alloc(ep, nh, qs, dst_addr)
        return qs

    def flow_dealloc(self, ep, eid, allocator_side):
        self.fa.flow_dealloc(ep, eid, allocator_side)

    def on_tx(self, ep, eid):
        self.fa.on_tx(ep, eid)

    # -- the data-transfer pipeline ----------------------------------------------

    def send_internal(self, dst_addr, eid, payload: bytes, prio=0):
        """Messages between IPCP components ride the data-transfer path."""
        pb = PacketBuffer.for_payload(payload)
        self.dt_out(pb, dst_addr, eid, prio)

    def dt_out(self, pb: PacketBuffer, dst_addr, eid, prio, lower_fd=None):
        if dst_addr == self.addr:
            hdr = DtHeader(self.layer.ttl_max, dst_addr, prio, 0, eid)
            self.sim.at(0, self._deliver_local, hdr, pb.payload())
            return
        hdr = DtHeader(self.layer.ttl_max, dst_addr, prio, 0, eid)
        self._transmit(pb, hdr, lower_fd)

    def _transmit(self, pb: PacketBuffer, hdr: DtHeader, lower_fd=None):
        lf = None
        if lower_fd is not None:
            lf = self._adjacency_by_fd(lower_fd)
            if lf is not None and not lf.alive:
                lf = None
        if lf is None:
            lf = self._route(hdr.dst, hdr.qos)
        if lf is None:
            self.drops["no-route"] = self.drops.get("no-route", 0) + 1
            return
        hdr.ecn = max(hdr.ecn, ecn_mark(lf.queue_depth()))
        pb.prepend(hdr.encode(self.layer.level_count))
        lf.send(pb)

    def _route(self, dst_addr, prio):
        action = dt_decide(self.addr, dst_addr, {0: self.tables.get(prio, {})})
        if action[0] != "forward":
            return None
        for hop in action[1]:
            lf = self.adjacencies.get(hop)
            if lf is not None and lf.alive:
                return lf
        return None

    def _dt_rx(self, lf, data: bytes):
        try:
            hdr, hlen = DtHeader.decode(data, self.layer.level_count)
        except Exception:
            self.drops["malformed"] = self.drops.get("malformed", 0) + 1
            return
        hdr.ttl -= 1
        if hdr.ttl == 0:
            self.drops["ttl-expired"] = self.drops.get("ttl-expired", 0) + 1
            return
        action = dt_decide(self.addr, hdr.dst,
                           {0: self.tables.get(hdr.qos, {})})
        if action[0] == "deliver":
            self._deliver_local(hdr, data[hlen:])
        elif action[0] == "forward":
            pb = PacketBuffer.for_payload(data[hlen:])
            self._transmit(pb, hdr)
        else:
            self.drops[action[1]] = self.drops.get(action[1], 0) + 1

    def _deliver_local(self, hdr: DtHeader, payload: bytes):
        if hdr.eid == EID_FA:
            self.fa.handle_msg(payload)
        elif hdr.eid == EID_DIR:
            if self.dht is not None:
                self.dht.handle_message(payload)
        elif hdr.eid >= EID_NFLOW_BASE:
            self.fa.deliver_nflow(hdr.eid, payload, hdr.ecn)
        else:
            self.drops["bad-eid"] = self.drops.get("bad-eid", 0) + 1

    def census(self):
        return self.fa.census()


class _DhtTransport:
    def __init__(self, ipcp):
        self.ipcp = ipcp

    def send(self, dst_addr, payload):
        self.ipcp.send_internal(dst_addr, EID_DIR, payload)


def _encode_offer(pm_name, instance, protocols):
    return (bytes([MSG_OFFER]) + _blob(pm_name.encode())
            + _blob(instance.encode()) + _blob(protocols.encode()))


def _decode_offer(data):
    if data[0] != MSG_OFFER:
        raise ValueError("not a connection offer")
    pm, off = _unblob(data, 1)
    inst, off = _unblob(data, off)
    proto, off = _unblob(data, off)
    return pm.decode(), inst.decode(), proto.decode()


def _encode_layer_config(cfg: LayerConfig, assigned_addr: int) -> bytes:
    return (_blob(cfg.layer_name)
            + bytes([list(HashAlgo).index(cfg.hash_algo),
                     cfg.level_count, cfg.ttl_max])
            + struct.pack(">IIBBI", cfg.mps, cfg.mpl,
                          list(DirectoryPolicy).index(cfg.directory_policy),
                          list(RoutingPolicy).index(cfg.routing_policy),
                          assigned_addr))


def _decode_layer_config(data, off):
    name, off = _unblob(data, off)
    algo = list(HashAlgo)[data[off]]
    level_count = data[off + 1]
    ttl_max = data[off + 2]
    off += 3
    mps, mpl, dp, rp, assigned = struct.unpack(">IIBBI", data[off:off + 14])
    cfg = LayerConfig(name, algo, level_count, ttl_max, mps, mpl,
                      list(DirectoryPolicy)[dp], list(RoutingPolicy)[rp])
    return cfg, assigned
