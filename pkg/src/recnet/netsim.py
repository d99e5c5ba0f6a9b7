"""Deterministic discrete-event substrate.

Time is integer milliseconds.  Every run is a pure function of the
scenario and the seed: a single seeded generator supplies all randomness,
same-time events fire in insertion order, and the trace log folds every
observable event into a running hash so replays can be compared.

Blocking behaviour in higher layers is written as generator processes
that yield Futures; the simulator resumes them when the future resolves.
"""

import hashlib
import heapq
import random
import struct
import zlib

from .core import RecnetError

MAX_SIM_MS = 10 ** 9


class TimeoutExpired(RecnetError):
    pass


class LinkDown(RecnetError):
    pass


class NotRegistered(RecnetError):
    pass


class Future:
    __slots__ = ("sim", "done", "value", "exc", "_cbs")

    def __init__(self, sim):
        self.sim = sim
        self.done = False
        self.value = None
        self.exc = None
        self._cbs = []

    def resolve(self, value=None):
        if self.done:
            return
        self.done = True
        self.value = value
        for cb in self._cbs:
            self.sim.at(0, cb, self)
        self._cbs = None

    def fail(self, exc):
        if self.done:
            return
        self.done = True
        self.exc = exc
        for cb in self._cbs:
            self.sim.at(0, cb, self)
        self._cbs = None

    def add_done_callback(self, cb):
        if self.done:
            self.sim.at(0, cb, self)
        else:
            self._cbs.append(cb)


class Process:
    def __init__(self, sim, gen, name):
        self.sim = sim
        self.gen = gen
        self.name = name
        self.done = Future(sim)
        self.output = []

    def _step(self, value=None, exc=None):
        try:
            if exc is not None:
                yielded = self.gen.throw(exc)
            else:
                yielded = self.gen.send(value)
        except StopIteration as stop:
            self.done.resolve(stop.value)
            return
        except RecnetError as err:
            self.done.fail(err)
            return
        if not isinstance(yielded, Future):
            raise TypeError("process %s yielded %r" % (self.name, yielded))
        yielded.add_done_callback(self._resume)

    def _resume(self, fut):
        if fut.exc is not None:
            self._step(exc=fut.exc)
        else:
            self._step(fut.value)


class Timer:
    __slots__ = ("fn", "args", "cancelled")

    def __init__(self, fn, args):
        self.fn = fn
        self.args = args
        self.cancelled = False

    def cancel(self):
        self.cancelled = True


class TraceLog:
    """Running hash plus count of everything observable in a run."""

    def __init__(self, retain=False):
        self._h = hashlib.sha256()
        self.count = 0
        self.lines = [] if retain else None

    def add(self, *fields):
        line = "|".join(str(f) for f in fields)
        self._h.update(line.encode())
        self._h.update(b"\n")
        self.count += 1
        if self.lines is not None:
            self.lines.append(line)

    def digest(self) -> str:
        return self._h.hexdigest()


class System:
    """One simulated host: an IRM plus its IPCPs and wire shims."""

    def __init__(self, sim, name):
        self.sim = sim
        self.name = name
        self.irm = None         # attached by the irm module
        self.ipcps = {}         # name -> ipcp object (shims included)

    def add_ipcp(self, ipcp):
        self.ipcps[ipcp.name] = ipcp

    def ipcps_for_layer(self, layer_name):
        return [p for p in self.ipcps.values() if p.layer_name == layer_name]

    def __repr__(self):
        return "System(%s)" % self.name


class Simulator:
    def __init__(self, seed=0, retain_trace=False):
        self.now = 0
        self.rng = random.Random(seed)
        self.seed = seed
        self.trace = TraceLog(retain=retain_trace)
        self._heap = []
        self._seq = 0
        self.systems = {}
        self.links = {}
        self._next_pid = 1000

    # -- scheduling --------------------------------------------------

    def at(self, delay, fn, *args) -> Timer:
        timer = Timer(fn, args)
        heapq.heappush(self._heap, (self.now + int(delay), self._seq, timer))
        self._seq += 1
        return timer

    def future(self) -> Future:
        return Future(self)

    def sleep(self, ms) -> Future:
        fut = self.future()
        self.at(ms, fut.resolve)
        return fut

    def await_(self, fut, timeout=None):
        """yield-from helper: wait for fut, optionally bounded in time."""
        if timeout is None:
            value = yield fut
            return value
        race = self.future()

        def settle(f):
            if f.exc is not None:
                race.fail(f.exc)
            else:
                race.resolve(f.value)

        fut.add_done_callback(settle)
        timer = self.at(timeout, race.fail, TimeoutExpired())
        try:
            value = yield race
        finally:
            timer.cancel()
        return value

    def spawn(self, gen, name="proc") -> Process:
        proc = Process(self, gen, name)
        self.at(0, proc._step)
        return proc

    def run(self, until=None, max_events=50_000_000) -> int:
        count = 0
        while self._heap and count < max_events:
            t, _, timer = self._heap[0]
            if until is not None and t > until:
                break
            heapq.heappop(self._heap)
            if timer.cancelled:
                continue
            self.now = t
            timer.fn(*timer.args)
            count += 1
        if until is not None and self.now < until:
            self.now = until
        return count

    def call(self, gen, name="call", until=None):
        """Spawn a process and run the clock until it completes."""
        proc = self.spawn(gen, name)
        self.run(until=until)
        if not proc.done.done:
            raise RuntimeError("%s did not complete" % name)
        if proc.done.exc is not None:
            raise proc.done.exc
        return proc.done.value

    def new_pid(self) -> int:
        self._next_pid += 1
        return self._next_pid

    # -- topology ----------------------------------------------------

    def system(self, name) -> System:
        if name not in self.systems:
            self.systems[name] = System(self, name)
        return self.systems[name]

    def add_link(self, name, a, b, **params) -> "Link":
        link = Link(self, name, self.system(a), self.system(b), **params)
        self.links[name] = link
        return link


# -- the wire level ---------------------------------------------------

CTRL_EID = 0xFFFFFFFF
WIRE_REQ = 0
WIRE_RESP = 1
WIRE_DEALLOC = 2

WIRE_ALLOC_TIMEOUT = 5000


class Link:
    """Point-to-point pipe with delay, loss, errors and a serialization
    rate.  Endpoints may be the same system (loopback)."""

    def __init__(self, sim, name, sys_a, sys_b, delay=1, loss_p=0.0, ber=0,
                 dup_p=0.0, reorder_p=0.0, bw_bps=0, layer=None):
        self.sim = sim
        self.name = name
        self.layer_name = layer or name
        self.delay = int(delay)
        self.loss_p = float(loss_p)
        self.ber = int(ber)             # errors per 1e9 bits
        self.dup_p = float(dup_p)
        self.reorder_p = float(reorder_p)
        self.bw_bps = int(bw_bps)       # 0 = infinite
        self.up = True
        self.epoch = 0
        self.shims = (WireShim(sim, sys_a, self, 0),
                      WireShim(sim, sys_b, self, 1))
        sys_a.add_ipcp(self.shims[0])
        sys_b.add_ipcp(self.shims[1])

    def set_param(self, field, value):
        if field == "up":
            want = value in (True, "true", "True", "1", 1)
            if self.up and not want:
                self.up = False
                self.epoch += 1
                self.sim.trace.add(self.sim.now, "link-down", self.name)
                for shim in self.shims:
                    shim.link_down()
            elif not self.up and want:
                self.up = True
                self.sim.trace.add(self.sim.now, "link-up", self.name)
                for shim in self.shims:
                    shim.link_up()
            return
        if field not in ("delay", "loss_p", "ber", "dup_p", "reorder_p",
                         "bw_bps"):
            raise RecnetError("unknown-link-field: %s" % field)
        cast = float if field.endswith("_p") else int
        setattr(self, field, cast(value))

    def tx_time(self, nbytes) -> int:
        if not self.bw_bps:
            return 0
        return (nbytes * 8 * 1000 + self.bw_bps - 1) // self.bw_bps

    def transmit(self, end, frame: bytes):
        """Apply the channel effects and schedule delivery at the far end."""
        sim = self.sim
        sim.trace.add(sim.now, "wtx", self.name, end, len(frame),
                      zlib.crc32(frame))
        far = self.shims[1 - end]
        epoch = self.epoch
        copies = 1
        if self.dup_p and sim.rng.random() < self.dup_p:
            copies = 2
        for c in range(copies):
            if self.loss_p and sim.rng.random() < self.loss_p:
                sim.trace.add(sim.now, "wloss", self.name, end)
                continue
            data = frame
            if self.ber:
                data = self._corrupt(data)
            delay = self.delay + (0 if c == 0 else 1)
            if self.reorder_p and sim.rng.random() < self.reorder_p:
                delay += sim.rng.randint(1, 4)
            sim.at(delay, self._arrive, far, epoch, data)

    def _corrupt(self, frame: bytes) -> bytes:
        # bit flips apply beyond the 4-byte wire eid header
        nbits = max(0, (len(frame) - 4) * 8)
        rng = self.sim.rng
        nflips = sum(1 for _ in range(nbits) if rng.random() < self.ber / 1e9)
        if not nflips:
            return frame
        buf = bytearray(frame)
        for _ in range(nflips):
            bit = rng.randrange(nbits)
            buf[4 + bit // 8] ^= 1 << (bit % 8)
        return bytes(buf)

    def _arrive(self, far, epoch, data):
        if not self.up or epoch != self.epoch:
            return
        self.sim.trace.add(self.sim.now, "wrx", self.name, far.end,
                           len(data), zlib.crc32(data))
        far.deliver_frame(data)


class WireShim:
    """Lowest-layer IPCP: flow allocation over a single link.

    Keeps a local directory of hashes registered at its end; queries
    consult the far end.  Flows exist per-eid with a cross-link mapping.
    """

    kind = "wire"

    def __init__(self, sim, system, link, end):
        self.sim = sim
        self.system = system
        self.link = link
        self.end = end
        self.name = "%s.%d" % (link.name, end)
        self.layer_name = link.layer_name
        self.registry = {}          # digest bytes -> True
        self.flows = {}             # local_eid -> [endpoint, remote_eid]
        self._eid = 64
        self._pending = {}          # local_eid -> Future for WIRE_RESP
        self._busy_until = 0
        self._pump_timer = None

    @property
    def peer(self):
        return self.link.shims[1 - self.end]

    # -- directory ---------------------------------------------------

    def reg(self, nh):
        self.registry[nh.digest] = True

    def unreg(self, nh):
        self.registry.pop(nh.digest, None)

    def query(self, nh) -> bool:
        """Is the hash reachable over this layer (= registered far-side)?"""
        return self.link.up and nh.digest in self.peer.registry

    # -- flow allocation ---------------------------------------------

    def flow_alloc(self, endpoint, nh, qs):
        """Allocate a flow to a hash registered at the far end."""
        if not self.link.up:
            raise LinkDown(self.link.name)
        if nh.digest not in self.peer.registry:
            raise NotRegistered(nh.short())
        eid = self._eid
        self._eid += 1
        self.flows[eid] = [endpoint, None]
        fut = self.sim.future()
        self._pending[eid] = fut
        payload = (bytes([WIRE_REQ]) + struct.pack(">I", eid)
                   + _encode_hash(nh) + qs.encode())
        self._send_ctrl(payload)
        try:
            remote_eid = yield from self.sim.await_(fut, WIRE_ALLOC_TIMEOUT)
        except RecnetError:
            del self.flows[eid]
            self._pending.pop(eid, None)
            raise
        self.flows[eid][1] = remote_eid
        endpoint.attach(self, eid)
        return qs

    def flow_dealloc(self, endpoint, eid, allocator_side=True):
        ent = self.flows.pop(eid, None)
        if ent and ent[1] is not None and self.link.up:
            self._send_ctrl(bytes([WIRE_DEALLOC]) + struct.pack(">I", ent[1]))

    # -- data path ---------------------------------------------------

    def on_tx(self, endpoint, eid):
        self._pump()

    def _pump(self):
        if not self.link.up:
            return
        now = self.sim.now
        if self._busy_until > now:
            if self._pump_timer is None:
                self._pump_timer = self.sim.at(self._busy_until - now,
                                               self._pump_fired)
            return
        # drain one packet, round-robin over flows in creation order
        for eid, (endpoint, remote_eid) in list(self.flows.items()):
            if remote_eid is None or endpoint is None:
                continue
            pkt = endpoint.pop_tx()
            if pkt is None:
                continue
            pkt.prepend(struct.pack(">I", remote_eid))
            frame = pkt.payload()
            t = self.link.tx_time(len(frame))
            self._busy_until = now + t
            self.link.transmit(self.end, frame)
            # rotate so one busy flow cannot starve the others
            self.flows.pop(eid)
            self.flows[eid] = [endpoint, remote_eid]
            if t:
                self._pump_timer = self.sim.at(t, self._pump_fired)
            else:
                self.sim.at(0, self._pump)
            return

    def _pump_fired(self):
        self._pump_timer = None
        self._pump()

    def _send_ctrl(self, payload: bytes):
        frame = struct.pack(">I", CTRL_EID) + payload
        self.link.transmit(self.end, frame)

    def deliver_frame(self, frame: bytes):
        if len(frame) < 4:
            return
        eid, = struct.unpack(">I", frame[:4])
        if eid == CTRL_EID:
            self._handle_ctrl(frame[4:])
            return
        ent = self.flows.get(eid)
        if ent is None or ent[0] is None:
            return
        from .core import PacketBuffer
        ent[0].push_rx(PacketBuffer.for_payload(frame[4:]))

    def _handle_ctrl(self, payload: bytes):
        kind = payload[0]
        if kind == WIRE_REQ:
            remote_eid, = struct.unpack(">I", payload[1:5])
            nh, off = _decode_hash(payload, 5)
            from .core import QosSpec
            qs = QosSpec.decode(payload[off:off + QosSpec.WIRE_LEN])
            self.sim.spawn(self._accept(remote_eid, nh, qs),
                           "wire-accept:%s" % self.name)
        elif kind == WIRE_RESP:
            local_eid, remote_eid, response = struct.unpack(
                ">IIb", payload[1:10])
            fut = self._pending.pop(local_eid, None)
            if fut is None:
                return
            if response < 0:
                from .irm import AllocationRefused
                fut.fail(AllocationRefused("wire"))
            else:
                fut.resolve(remote_eid)
        elif kind == WIRE_DEALLOC:
            local_eid, = struct.unpack(">I", payload[1:5])
            ent = self.flows.pop(local_eid, None)
            if ent and ent[0] is not None:
                ent[0].peer_closed()

    def _accept(self, remote_eid, nh, qs):
        if nh.digest not in self.registry:
            self._send_ctrl(bytes([WIRE_RESP])
                            + struct.pack(">IIb", remote_eid, 0, -1))
            return
        try:
            endpoint = yield from self.system.irm.deliver_flow(nh, qs, self)
        except RecnetError:
            self._send_ctrl(bytes([WIRE_RESP])
                            + struct.pack(">IIb", remote_eid, 0, -1))
            return
        eid = self._eid
        self._eid += 1
        self.flows[eid] = [endpoint, remote_eid]
        endpoint.attach(self, eid)
        self._send_ctrl(bytes([WIRE_RESP])
                        + struct.pack(">IIb", remote_eid, eid, 0))

    # -- fault propagation --------------------------------------------

    def link_down(self):
        self._busy_until = 0
        if self._pump_timer is not None:
            self._pump_timer.cancel()
            self._pump_timer = None
        for eid, (endpoint, remote_eid) in list(self.flows.items()):
            if endpoint is not None:
                endpoint.link_event(up=False)

    def link_up(self):
        for eid, (endpoint, remote_eid) in list(self.flows.items()):
            if endpoint is not None:
                endpoint.link_event(up=True)
        self._pump()

    @property
    def mpl(self) -> int:
        """MPL exported by flows over this link."""
        return self.link.delay * 4 + 100


def _encode_hash(nh) -> bytes:
    from .core import HashAlgo
    algo_idx = list(HashAlgo).index(nh.algo)
    return struct.pack(">BH", algo_idx, len(nh.digest)) + nh.digest


def _decode_hash(data: bytes, off: int):
    from .core import HashAlgo, NameHash
    algo_idx, dlen = struct.unpack(">BH", data[off:off + 3])
    digest = data[off + 3:off + 3 + dlen]
    return NameHash(list(HashAlgo)[algo_idx], digest), off + 3 + dlen
