"""Broadcast layers.

Stateless members forward every packet verbatim on all flows except the
arrival flow, and therefore require a tree-shaped connectivity graph,
enforced at connect time via adjacency gossip.  Stateful members prepend
a (source, sequence) header and drop anything they have already seen, so
any connected graph works.

Join requests succeed only for the layer's own name.  Broadcast N-flows
are raw: no transport runs on top of them here.
"""

import struct

from .core import (Address, PacketBuffer, HashAlgo, hash_name, name_bytes,
                   RecnetError)
from .netsim import TimeoutExpired
from .unicast import (LowerFlow, _encode_offer, _decode_offer, _blob,
                      _unblob, MSG_ENROL_REQ, MSG_ENROL_RESP, FA_VERSION,
                      NoLowerFlow, ProtocolMismatch, VersionMismatch)
from . import irm as irm_mod

BC_HEADER_LEN = 12          # source u32, seqno u64
MSG_BC_EDGE = 9             # adjacency gossip on management flows

DEFAULT_DEDUP_WINDOW = 1024


class CycleRejected(RecnetError):
    pass


class WrongName(RecnetError):
    pass


class BcConfig:
    __slots__ = ("mode", "layer_name", "node_name", "window")

    def __init__(self, layer_name, mode="stateless", node_name=0,
                 window=DEFAULT_DEDUP_WINDOW):
        if mode not in ("stateless", "stateful"):
            raise ValueError(mode)
        self.mode = mode
        self.layer_name = name_bytes(layer_name)
        self.node_name = node_name
        self.window = window


class SeenTable:
    """Per-source duplicate tracking bounded to a window of seqnos."""

    def __init__(self, window=DEFAULT_DEDUP_WINDOW):
        self.window = window
        self.recent = {}        # source -> {seq}
        self.highest = {}       # source -> max seq seen
        self.duplicates = 0

    def check(self, source, seq) -> bool:
        """True when the packet is new; records it. False: duplicate."""
        high = self.highest.get(source, -1)
        seen = self.recent.setdefault(source, set())
        if seq <= high - self.window or seq in seen:
            self.duplicates += 1
            return False
        seen.add(seq)
        if seq > high:
            self.highest[source] = seq
            floor = seq - self.window
            if len(seen) > self.window:
                self.recent[source] = {s for s in seen if s > floor}
        return True

    def size(self):
        return sum(len(s) for s in self.recent.values())


class BroadcastIpcp:
    kind = "broadcast"
    hash_algo = HashAlgo.SHA3_256

    def __init__(self, sim, system, name):
        self.sim = sim
        self.system = system
        self.name = name
        self.pid = None
        self.cfg = None
        self.enrolled = False
        self.dt_flows = {}          # fd -> LowerFlow
        self.mgmt_flows = {}        # fd -> LowerFlow
        self.n_flows = {}           # eid -> endpoint
        self._eid = 64
        self._seq = 0
        self.seen = None
        self.edges = set()          # gossiped adjacency view (node ids)
        self.drops = {}
        system.add_ipcp(self)
        self.rec = system.irm.adopt_ipcp(self)

    @property
    def layer_name(self):
        return self.cfg.layer_name.decode() if self.cfg else ""

    @property
    def addr(self):
        return Address.single(self.cfg.node_name) if self.cfg else None

    # -- membership -----------------------------------------------------

    def bootstrap(self, cfg: BcConfig):
        if not cfg.node_name:
            cfg.node_name = self.sim.rng.randrange(1, 2 ** 32)
        self.cfg = cfg
        self.seen = SeenTable(cfg.window)
        self.enrolled = True
        self.sim.trace.add(self.sim.now, "bc-bootstrap", self.system.name,
                           self.name, cfg.mode)

    def enrol(self, dst):
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
            lname, off = _unblob(data, 2)
            mode = "stateful" if data[off] else "stateless"
            window, = struct.unpack(">I", data[off + 1:off + 5])
        finally:
            self.system.irm.flow_dealloc(self.rec, lf.fd)
        self.cfg = BcConfig(lname, mode,
                            self.sim.rng.randrange(1, 2 ** 32), window)
        self.seen = SeenTable(window)
        self.enrolled = True
        self.sim.trace.add(self.sim.now, "bc-enrol", self.system.name,
                           self.name, mode)

    def connect(self, dst, components=("dt", "mgmt"), via=None):
        if not self.enrolled:
            raise NoLowerFlow("not enrolled")
        for comp in components:
            lf = yield from self._cm_flow(dst, comp, via=via)
            self._classified(lf)
        yield self.sim.sleep(2)

    # -- connection manager (shared shape with the unicast IPCP) ----------

    def _cm_flow(self, dst, component, via=None):
        irm = self.system.irm
        try:
            fd = yield from irm.flow_alloc_internal(self.rec, dst,
                                                    exclude=self, via=via)
        except RecnetError as err:
            raise NoLowerFlow(str(err))
        ep, _ = irm.rec_fd(self.rec, fd)
        lf = LowerFlow(self, ep, fd)
        lf.peer_name = dst
        inst = str(self.cfg.node_name) if self.cfg else ""
        offer = _encode_offer(component, inst, self._view_blob())
        lf.send(offer)
        try:
            pm_name, instance, protocols = yield from lf.next_offer(
                resend=offer)
        except TimeoutExpired:
            irm.flow_dealloc(self.rec, fd)
            raise NoLowerFlow("handshake timed out")
        if pm_name == "reject":
            irm.flow_dealloc(self.rec, fd)
            raise CycleRejected("%s: would close a cycle" % dst)
        if pm_name != component:
            irm.flow_dealloc(self.rec, fd)
            raise ProtocolMismatch("%s vs %s" % (pm_name, component))
        lf.peer_id = int(instance) if instance else 0
        if component == "dt":
            self._merge_view(protocols)
            self._add_edge(self.cfg.node_name, lf.peer_id)
        lf.set_component(component)
        return lf

    def accept_lower_flow(self, ep, qs, fd=None):
        if fd is None:
            fd = self.system.irm._map_fd(self.rec, ep, 0, "accept")
        lf = LowerFlow(self, ep, fd)
        lf.peer_name = None
        self.sim.spawn(self._classify(lf), "bc-classify")

    def _classify(self, lf):
        try:
            pm_name, instance, protocols = yield from lf.next_offer()
        except TimeoutExpired:
            self.system.irm.flow_dealloc(self.rec, lf.fd)
            return
        peer_id = int(instance) if instance else 0
        if pm_name == "dt" and self.cfg.mode == "stateless":
            self._merge_view(protocols)
            if self._reachable(peer_id):
                lf.send(_encode_offer("reject", "", ""))
                self.system.irm.flow_dealloc(self.rec, lf.fd)
                self.sim.trace.add(self.sim.now, "bc-cycle-rejected",
                                   self.system.name, peer_id)
                return
        if pm_name not in ("dt", "mgmt", "enrolment") or not self.enrolled:
            lf.send(_encode_offer("reject", "", ""))
            self.system.irm.flow_dealloc(self.rec, lf.fd)
            return
        lf.peer_id = peer_id
        lf.send(_encode_offer(pm_name, str(self.cfg.node_name),
                              self._view_blob()))
        if pm_name == "dt":
            self._add_edge(self.cfg.node_name, peer_id)
        self._pre_classify(lf, pm_name)

    def _re_offer(self, lf):
        inst = str(self.cfg.node_name) if self.cfg else ""
        lf.send(_encode_offer(lf.component, inst, self._view_blob()))

    def _pre_classify(self, lf, pm_name):
        lf.component = pm_name
        self._classified(lf)
        pending, lf.inbox = lf.inbox, []
        for data in pending:
            lf._on_msg(data)

    def _classified(self, lf):
        if lf.component == "dt":
            self.dt_flows[lf.fd] = lf
        elif lf.component == "mgmt":
            self.mgmt_flows[lf.fd] = lf
            self._flood_view(except_fd=None)
        elif lf.component == "enrolment":
            self.sim.spawn(self._serve_enrolment(lf), "bc-enrol-serve")

    def _serve_enrolment(self, lf):
        while True:
            try:
                data = yield from lf.next_msg()
            except TimeoutExpired:
                return
            if not lf.alive:
                return
            if data and data[0] == MSG_ENROL_REQ:
                lf.send(bytes([MSG_ENROL_RESP, FA_VERSION])
                        + _blob(self.cfg.layer_name)
                        + bytes([1 if self.cfg.mode == "stateful" else 0])
                        + struct.pack(">I", self.cfg.window))

    # -- adjacency view (cycle protection for stateless layers) -----------

    def _view_blob(self):
        return ",".join("%d-%d" % e for e in sorted(self.edges))

    def _merge_view(self, blob):
        if not blob or blob == "v1":
            return
        for part in blob.split(","):
            a, b = part.split("-")
            self.edges.add((min(int(a), int(b)), max(int(a), int(b))))

    def _add_edge(self, a, b):
        self.edges.add((min(a, b), max(a, b)))
        self._flood_view(except_fd=None)

    def _reachable(self, target):
        if target == self.cfg.node_name:
            return True
        adj = {}
        for a, b in self.edges:
            adj.setdefault(a, []).append(b)
            adj.setdefault(b, []).append(a)
        stack, seen = [self.cfg.node_name], {self.cfg.node_name}
        while stack:
            v = stack.pop()
            if v == target:
                return True
            for u in adj.get(v, ()):
                if u not in seen:
                    seen.add(u)
                    stack.append(u)
        return False

    def _flood_view(self, except_fd):
        msg = bytes([MSG_BC_EDGE]) + _blob(self._view_blob().encode())
        for fd, lf in self.mgmt_flows.items():
            if fd != except_fd and lf.alive:
                lf.send(msg)

    def _mgmt_rx(self, lf, data):
        if not data or data[0] != MSG_BC_EDGE:
            return
        blob, _ = _unblob(data, 1)
        before = len(self.edges)
        self._merge_view(blob.decode())
        if len(self.edges) > before:
            self._flood_view(except_fd=lf.fd)

    # -- joins (the flow allocator of a broadcast layer) --------------------

    def query(self, nh):
        return (self.enrolled
                and hash_name(self.cfg.layer_name, nh.algo).digest
                == nh.digest)

    def flow_join(self, ep, nh, qs):
        if not self.query(nh):
            raise WrongName(nh.short())
        eid = self._eid
        self._eid += 1
        self.n_flows[eid] = ep
        ep.attach(self, eid)
        self.sim.trace.add(self.sim.now, "bc-join", self.system.name, eid)
        return qs

    def flow_dealloc(self, ep, eid, allocator_side=True):
        self.n_flows.pop(eid, None)

    # -- the broadcast transfer component ------------------------------------

    def on_tx(self, ep, eid):
        while True:
            pkt = ep.pop_tx()
            if pkt is None:
                return
            data = pkt.payload()
            if self.cfg.mode == "stateful":
                self._seq += 1
                self.seen.check(self.cfg.node_name, self._seq)
                hdr = struct.pack(">IQ", self.cfg.node_name, self._seq)
                out = hdr + data
            else:
                out = data
            self._forward(out, arrival=None, origin_eid=eid)

    def _dt_rx(self, lf, data: bytes):
        if self.cfg.mode == "stateful":
            if len(data) < BC_HEADER_LEN:
                self.drops["malformed"] = self.drops.get("malformed", 0) + 1
                return
            source, seq = struct.unpack(">IQ", data[:BC_HEADER_LEN])
            if not self.seen.check(source, seq):
                return
        self._forward(data, arrival=lf.fd, origin_eid=None)

    def _forward(self, data: bytes, arrival, origin_eid):
        """Write to every flow except the arrival one (exactly the
        outgoing-arcs rule; the source case has no arrival)."""
        for fd, lf in self.dt_flows.items():
            if fd != arrival and lf.alive:
                lf.send(PacketBuffer.for_payload(data))
        payload = data[BC_HEADER_LEN:] if self.cfg.mode == "stateful" else data
        for eid, ep in self.n_flows.items():
            if eid != origin_eid:
                ep.push_rx(PacketBuffer.for_payload(payload))

    def _lower_link_event(self, lf, up):
        lf.alive = up

    def _lower_closed(self, lf):
        self.dt_flows.pop(lf.fd, None)
        self.mgmt_flows.pop(lf.fd, None)

    def census(self):
        return {"bc_nflows": len(self.n_flows)}
