"""Per-system IPC resource manager.

Owns name bindings and registrations, flow endpoints with their FIFOs,
the application API (alloc/accept/join/read/write/dealloc/fccntl), the
fset/fqueue event system, and super-server instantiation of programs.

The IRM is an in-process object per simulated system; applications are
generator processes whose blocking calls are continuations resumed by
the simulator.
"""

import enum
import inspect
from collections import deque

from .core import (RecnetError, QosSpec, qos_preset, qos_to_frcp_config,
                   hash_name, name_bytes, HashAlgo)
from .frcp import FrcpConn, FlowControlBlocked
from .netsim import TimeoutExpired

FD_BASE = 64            # 0-63 mirror the internal component reservation
FIFO_CAP = 256          # packets per direction


class WouldBlock(RecnetError):
    pass


class FlowDown(RecnetError):
    pass


class AllocationRefused(RecnetError):
    pass


class NameUnresolvable(RecnetError):
    pass


class UnknownFd(RecnetError):
    pass


class UnknownPid(RecnetError):
    pass


class NotApplicable(RecnetError):
    pass


class FdInOtherSet(RecnetError):
    pass


class FlowState(enum.Enum):
    PENDING = "PENDING"
    ALLOCATED = "ALLOCATED"
    DEALLOCATED = "DEALLOCATED"


class FqEvent(enum.IntEnum):
    FLOW_PKT = 0
    FLOW_DOWN = 1
    FLOW_UP = 2
    FLOW_ALLOC = 3
    FLOW_DEALLOC = 4


class FcCmd(enum.Enum):
    NONBLOCK_READ = "nonblock_read"
    NONBLOCK_WRITE = "nonblock_write"
    READ_TIMEOUT = "read_timeout"
    WRITE_TIMEOUT = "write_timeout"
    PARTIAL_READ = "partial_read"
    FRAGMENTATION = "fragmentation"
    REASSEMBLY = "reassembly"
    FLOW_CONTROL = "flow_control"


class FlowSide:
    """Per-descriptor I/O state: one transport instance plus FIFOs."""

    def __init__(self, ep, idx, cfg, mps, gap_timeout):
        self.ep = ep
        self.idx = idx
        self.conn = FrcpConn(cfg, mps, gap_timeout)
        self.rx_msgs = deque()      # bytes, delivered in order
        self.rx_rem = b""           # remainder for partial reads
        self.tx_fifo = deque()
        self.read_waiters = deque()
        self.write_waiters = deque()
        self.blocking_r = True
        self.blocking_w = True
        self.rtimeout = None
        self.wtimeout = None
        self.partial_read = False
        self.closed = False
        self.rx_dropped = 0
        self._tick_timer = None

    # -- outbound ------------------------------------------------------

    def try_write(self, data, now) -> bool:
        if len(self.tx_fifo) >= FIFO_CAP:
            return False
        if not self.conn.can_write(len(data)):
            return False
        try:
            pkts = self.conn.write(data, now)
        except FlowControlBlocked:
            return False
        self.tx_fifo.extend(pkts)
        self.ep.tx_ready(self)
        self.resched_tick()
        return True

    def queue_raw(self, pkts):
        """Acks and probes skip the capacity check; they unblock the peer."""
        self.tx_fifo.extend(pkts)
        if pkts:
            self.ep.tx_ready(self)

    # -- inbound -------------------------------------------------------

    def accept_packet(self, pkt, now):
        msgs, acks = self.conn.receive(pkt, now)
        self.queue_raw(acks)
        for m in msgs:
            self._deliver(m)
        self.resched_tick()
        self.wake_writers()     # window edge may have moved

    def _deliver(self, msg):
        if self.ep.owner_cb is not None:
            self.conn.app_took()
            self.ep.owner_cb(msg)
            return
        if len(self.rx_msgs) >= FIFO_CAP and not self.conn.cfg.flow_control:
            self.rx_dropped += 1
            self.conn.app_took()
            return
        self.rx_msgs.append(msg)
        self.ep.irm.route_event(self.ep.owner_of(self.idx), self.ep.fd_of(self.idx),
                                FqEvent.FLOW_PKT)
        if self.read_waiters:
            self.read_waiters.popleft().resolve()

    def tick(self):
        now = self.ep.irm.sim.now
        pkts, freed = self.conn.tick(now)
        self.queue_raw(pkts)
        for m in freed:
            self._deliver(m)
        self._tick_timer = None
        self.resched_tick()

    def resched_tick(self):
        d = self.conn.next_deadline()
        if self._tick_timer is not None:
            self._tick_timer.cancel()
            self._tick_timer = None
        if d is not None and not self.closed:
            self._tick_timer = self.ep.irm.sim.at(
                max(0, d - self.ep.irm.sim.now), self.tick)

    def wake_writers(self):
        if self.write_waiters:
            self.write_waiters.popleft().resolve()

    def wake_readers_for_close(self):
        while self.read_waiters:
            self.read_waiters.popleft().resolve()

    def close(self):
        self.closed = True
        if self._tick_timer is not None:
            self._tick_timer.cancel()
            self._tick_timer = None
        self.wake_readers_for_close()
        while self.write_waiters:
            self.write_waiters.popleft().fail(FlowDown("deallocated"))


class FlowEndpoint:
    """System-scoped flow endpoint.

    Network flows have one side attached to an IPCP or wire shim; local
    flows have two sides cross-wired so the client's writes become the
    server's reads without any network beneath.
    """

    def __init__(self, irm, fid, qs, cfg, mps, local=False):
        self.irm = irm
        self.fid = fid
        self.qos = qs
        self.state = FlowState.PENDING
        gap = qs.max_gap if qs.max_gap else 0
        nsides = 2 if local else 1
        self.sides = tuple(FlowSide(self, i, cfg, mps, gap)
                           for i in range(nsides))
        self.local = local
        self.owners = [None] * nsides       # pid per side
        self.fds = [None] * nsides
        self.roles = [None] * nsides        # "alloc" | "accept" | "join"
        self.net = None
        self.eid = None
        self.peer_gone = False
        self.is_down = False
        self.allocated_future = irm.sim.future()
        # IPCP-owned flows bypass the application queues via callbacks
        self.owner_cb = None
        self.owner_link_cb = None
        self.owner_closed_cb = None

    # -- wiring --------------------------------------------------------

    def bind_side(self, idx, pid, fd, role):
        self.owners[idx] = pid
        self.fds[idx] = fd
        self.roles[idx] = role

    def owner_of(self, idx):
        return self.owners[idx]

    def fd_of(self, idx):
        return self.fds[idx]

    def attach(self, net, eid):
        self.net = net
        self.eid = eid

    def set_allocated(self):
        if self.state is FlowState.PENDING:
            self.state = FlowState.ALLOCATED
            self.allocated_future.resolve(self)

    # -- net-facing (side 0) --------------------------------------------

    def pop_tx(self):
        side = self.sides[0]
        if side.tx_fifo:
            pkt = side.tx_fifo.popleft()
            side.wake_writers()
            return pkt
        return None

    def push_rx(self, pkt):
        self.sides[0].accept_packet(pkt, self.irm.sim.now)

    def peer_closed(self):
        self.peer_gone = True
        if self.owner_closed_cb is not None:
            self.owner_closed_cb()
            return
        for idx, side in enumerate(self.sides):
            if self.fds[idx] is not None and not side.closed:
                self.irm.route_event(self.owners[idx], self.fds[idx],
                                     FqEvent.FLOW_DEALLOC)
                side.wake_readers_for_close()

    def link_event(self, up):
        self.is_down = not up
        if self.owner_link_cb is not None:
            self.owner_link_cb(up)
            return
        ev = FqEvent.FLOW_UP if up else FqEvent.FLOW_DOWN
        for idx, side in enumerate(self.sides):
            if self.fds[idx] is not None and not side.closed:
                self.irm.route_event(self.owners[idx], self.fds[idx], ev)
                if not up:
                    side.wake_readers_for_close()

    def flow_down(self):
        self.link_event(up=False)

    def flow_up(self):
        self.link_event(up=True)

    def tx_ready(self, side):
        if self.local:
            peer = self.sides[1 - side.idx]
            while side.tx_fifo:
                pkt = side.tx_fifo.popleft()
                self.irm.sim.at(0, peer.accept_packet, pkt, self.irm.sim.now)
            side.wake_writers()
        elif self.net is not None:
            self.net.on_tx(self, self.eid)

    def queue_depth(self) -> int:
        return len(self.sides[0].tx_fifo)


class ProgramEntry:
    def __init__(self, program):
        self.program = program
        self.names = []
        self.auto = False
        self.argv = []


class ProcRecord:
    def __init__(self, pid, name, proc=None, ipcp=None):
        self.pid = pid
        self.name = name            # program name
        self.proc = proc            # netsim.Process for applications
        self.ipcp = ipcp            # ipcp object when this is an IPCP
        self.names = []             # bound names (bytes)
        self.accept_waiters = deque()
        self.pending_flows = deque()
        self.fds = {}               # fd -> (endpoint, side idx)
        self.fsets = []
        self.fd_to_set = {}
        self.next_fd = FD_BASE
        self.alive = True


class Fset:
    def __init__(self, irm, rec):
        self.irm = irm
        self.rec = rec
        self.fds = {}
        self.pending = deque()
        self.wait_fut = None

    def add(self, fd):
        if self.rec.fd_to_set.get(fd) is not None:
            raise FdInOtherSet(str(fd))
        self.fds[fd] = True
        self.rec.fd_to_set[fd] = self
        # packets queued before the add still raise their events
        ent = self.rec.fds.get(fd)
        if ent is not None:
            ep, sidx = ent
            for _ in range(len(ep.sides[sidx].rx_msgs)):
                self.signal(fd, FqEvent.FLOW_PKT)

    def remove(self, fd):
        self.fds.pop(fd, None)
        if self.rec.fd_to_set.get(fd) is self:
            del self.rec.fd_to_set[fd]

    def zero(self):
        for fd in list(self.fds):
            self.remove(fd)

    def has(self, fd) -> bool:
        return fd in self.fds

    def signal(self, fd, ev):
        self.pending.append((fd, ev))
        if self.wait_fut is not None:
            fut, self.wait_fut = self.wait_fut, None
            fut.resolve()

    def destroy(self):
        self.zero()
        if self in self.rec.fsets:
            self.rec.fsets.remove(self)


class Fqueue:
    def __init__(self):
        self._items = []
        self._idx = -1

    def _fill(self, items):
        self._items = list(items)
        self._idx = -1

    def next(self) -> int:
        self._idx += 1
        if self._idx >= len(self._items):
            return -1
        return self._items[self._idx][0]

    def type(self) -> FqEvent:
        return self._items[self._idx][1]

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)


class Irm:
    def __init__(self, sim, system, program_registry=None):
        self.sim = sim
        self.system = system
        system.irm = self
        self.procs = {}             # pid -> ProcRecord
        self.programs = {}          # program name -> ProgramEntry
        self.endpoints = {}         # fid -> FlowEndpoint
        self.registry = {}          # name bytes -> {layer name bytes: NameHash}
        self._next_fid = 1
        self.program_registry = program_registry or {}

    # -- processes and programs ------------------------------------------

    def new_process(self, program, factory=None, argv=()):
        pid = self.sim.new_pid()
        rec = ProcRecord(pid, program)
        self.procs[pid] = rec
        ent = self.programs.get(program)
        if ent is not None:
            for n in ent.names:
                rec.names.append(n)
        if factory is not None:
            api = Api(self, rec)
            rec.proc = self.sim.spawn(factory(api, list(argv)),
                                      "%s@%s" % (program, self.system.name))
            rec.proc.done.add_done_callback(lambda _f: self._reap(rec))
        return rec

    def adopt_ipcp(self, ipcp):
        pid = self.sim.new_pid()
        rec = ProcRecord(pid, ipcp.name, ipcp=ipcp)
        ipcp.pid = pid
        self.procs[pid] = rec
        return rec

    def _reap(self, rec):
        rec.alive = False
        for fd in list(rec.fds):
            try:
                self._dealloc_fd(rec, fd)
            except RecnetError:
                pass
        rec.names = []

    def record_for(self, target):
        """target: pid int, ipcp object, or bound name of an ipcp."""
        if isinstance(target, int):
            rec = self.procs.get(target)
            if rec is None:
                raise UnknownPid(str(target))
            return rec
        for rec in self.procs.values():
            if rec.ipcp is target:
                return rec
        raise UnknownPid(repr(target))

    # -- binding and registration -----------------------------------------

    def bind_process(self, pid, name):
        rec = self.record_for(pid)
        n = name_bytes(name)
        if n not in rec.names:
            rec.names.append(n)
        self.registry.setdefault(n, {})

    def bind_program(self, program, name, auto=False, argv=()):
        ent = self.programs.setdefault(program, ProgramEntry(program))
        n = name_bytes(name)
        if n not in ent.names:
            ent.names.append(n)
        if auto:
            ent.auto = True
            ent.argv = list(argv)
        self.registry.setdefault(n, {})
        # applies to future instances only; running ones keep their binds

    def unbind(self, target, name=None):
        if isinstance(target, str) and target in self.programs:
            ent = self.programs[target]
            ent.names = [] if name is None else \
                [n for n in ent.names if n != name_bytes(name)]
            return
        rec = self.record_for(target)
        if name is None:
            rec.names = []
        else:
            rec.names = [n for n in rec.names if n != name_bytes(name)]

    def bound_names(self, rec):
        return list(rec.names)

    def register(self, name, layer=None, ipcp=None):
        """Register a name in a layer (or one specific IPCP) directory."""
        n = name_bytes(name)
        targets = self._reg_targets(layer, ipcp)
        if not targets:
            raise NameUnresolvable("no-such-layer: %s" % (layer or ipcp))
        for p in targets:
            nh = hash_name(n, getattr(p, "hash_algo", HashAlgo.SHA3_256))
            res = p.reg(nh)
            if inspect.isgenerator(res):
                yield from res
            self.registry.setdefault(n, {})[p.layer_name] = nh

    def unregister(self, name, layer=None, ipcp=None):
        n = name_bytes(name)
        for p in self._reg_targets(layer, ipcp):
            nh = hash_name(n, getattr(p, "hash_algo", HashAlgo.SHA3_256))
            res = p.unreg(nh)
            if inspect.isgenerator(res):
                yield from res
            if n in self.registry:
                self.registry[n].pop(p.layer_name, None)

    def _reg_targets(self, layer, ipcp):
        if ipcp is not None:
            for p in self.system.ipcps.values():
                if p.name == ipcp:
                    return [p]
            raise NameUnresolvable("no-such-ipcp: %s" % ipcp)
        lname = layer if isinstance(layer, str) else layer.decode()
        return [p for p in self.system.ipcps.values()
                if p.layer_name == lname and hasattr(p, "reg")]

    def name_for_hash(self, nh):
        for n in self.registry:
            if hash_name(n, nh.algo).digest == nh.digest:
                return n
        return None

    # -- endpoints ---------------------------------------------------------

    def make_endpoint(self, qs, mpl=None, local=False) -> FlowEndpoint:
        cfg = qos_to_frcp_config(qs)
        if mpl is not None:
            cfg.mpl = mpl
        mps = 1024
        fid = self._next_fid
        self._next_fid += 1
        ep = FlowEndpoint(self, fid, qs, cfg, mps, local=local)
        self.endpoints[fid] = ep
        return ep

    def _map_fd(self, rec, ep, side, role) -> int:
        fd = rec.next_fd
        rec.next_fd += 1
        rec.fds[fd] = (ep, side)
        ep.bind_side(side, rec.pid, fd, role)
        return fd

    def _lookup_fd(self, rec, fd):
        try:
            return rec.fds[fd]
        except KeyError:
            raise UnknownFd(str(fd))

    def _drop_fd(self, rec, fd, ep):
        rec.fds.pop(fd, None)
        ep.state = FlowState.DEALLOCATED
        self.endpoints.pop(ep.fid, None)

    # -- flow allocation ----------------------------------------------------

    def _local_target(self, n, exclude_pid):
        for rec in self.procs.values():
            if rec.pid == exclude_pid or not rec.alive or rec.ipcp:
                continue
            if n in rec.names:
                return rec
        return None

    def _alloc_candidates(self, exclude=None):
        """Deterministic IPCP preference: loopback wires, wires, unicast."""
        loop, wires, unis = [], [], []
        for p in self.system.ipcps.values():
            if p is exclude:
                continue
            if p.kind == "wire":
                if p.link.shims[0].system is p.link.shims[1].system:
                    loop.append(p)
                else:
                    wires.append(p)
            elif p.kind == "unicast":
                if not p.enrolled:
                    continue
                if (exclude is not None
                        and p.layer_name == getattr(exclude, "layer_name", "")):
                    continue    # an IPCP never uses its own layer
                unis.append(p)
        return loop + wires + unis

    def flow_alloc(self, rec, dst, qs=None, timeout=None):
        qs = qs.copy() if qs is not None else qos_preset("raw")
        if timeout == 0:
            gen = self._do_alloc(rec, dst, qs, pre=None)
            pending = self.make_endpoint(qs)
            fd = self._map_fd(rec, pending, 0, "alloc")
            self.sim.spawn(self._alloc_background(rec, fd, pending, dst, qs),
                           "alloc-bg")
            return fd
        if timeout is not None:
            proc = self.sim.spawn(self._do_alloc(rec, dst, qs, pre=None),
                                  "alloc")
            fd = yield from self.sim.await_(proc.done, timeout)
            return fd
        fd = yield from self._do_alloc(rec, dst, qs, pre=None)
        return fd

    def _alloc_background(self, rec, fd, pending, dst, qs):
        try:
            yield from self._do_alloc(rec, dst, qs, pre=(fd, pending))
        except RecnetError:
            pending.state = FlowState.DEALLOCATED
            self.endpoints.pop(pending.fid, None)
            self.route_event(rec.pid, fd, FqEvent.FLOW_DEALLOC)
            return
        self.route_event(rec.pid, fd, FqEvent.FLOW_ALLOC)

    def flow_alloc_internal(self, rec, dst, qs=None, exclude=None, via=None):
        """Lower-flow allocation for IPCP internals (enrolment, adjacencies)."""
        qs = qs.copy() if qs is not None else qos_preset("raw")
        fd = yield from self._do_alloc(rec, dst, qs, pre=None, exclude=exclude,
                                       via=via)
        return fd

    def rec_fd(self, rec, fd):
        return self._lookup_fd(rec, fd)

    def _do_alloc(self, rec, dst, qs, pre, exclude=None, via=None):
        n = name_bytes(dst)
        if via is None:
            local = self._local_target(n, exclude_pid=rec.pid)
            if local is not None:
                fd = yield from self._alloc_local(rec, local, qs, pre)
                return fd
        for ipcp in self._alloc_candidates(exclude):
            if via is not None and ipcp.layer_name != via:
                continue
            nh = hash_name(n, getattr(ipcp, "hash_algo", HashAlgo.SHA3_256))
            hit = ipcp.query(nh)
            if inspect.isgenerator(hit):
                hit = yield from hit
            if not hit:
                continue
            if pre is None:
                ep = self.make_endpoint(qs, mpl=getattr(ipcp, "mpl", None))
                fd = self._map_fd(rec, ep, 0, "alloc")
            else:
                fd, ep = pre
            res = ipcp.flow_alloc(ep, nh, qs)
            if inspect.isgenerator(res):
                try:
                    yield from res
                except RecnetError:
                    self._drop_fd(rec, fd, ep)
                    raise
            ep.set_allocated()
            self.sim.trace.add(self.sim.now, "alloc", self.system.name,
                               str(dst), fd)
            return fd
        raise NameUnresolvable(str(dst))

    def _alloc_local(self, rec, target_rec, qs, pre):
        ep = self.make_endpoint(qs, local=True)
        fd = self._map_fd(rec, ep, 0, "alloc")
        if pre is not None:
            # replace the placeholder endpoint with the real local one
            pfd, pending = pre
            self.endpoints.pop(pending.fid, None)
            rec.fds[pfd] = (ep, 0)
            ep.bind_side(0, rec.pid, pfd, "alloc")
            del rec.fds[fd]
            fd = pfd
        yield from self._offer_to_proc(target_rec, ep, 1, qs)
        ep.set_allocated()
        self.sim.trace.add(self.sim.now, "alloc-local", self.system.name, fd)
        return fd

    def _offer_to_proc(self, target_rec, ep, side, qs):
        """Hand a pending flow to a process; waits until it accepts."""
        target_rec.pending_flows.append((ep, side, qs))
        self._kick_accept(target_rec)
        yield from self.sim.await_(ep.allocated_future, timeout=10_000)

    def _kick_accept(self, rec):
        while rec.accept_waiters and rec.pending_flows:
            fut = rec.accept_waiters.popleft()
            ep, side, qs = rec.pending_flows.popleft()
            fd = self._map_fd(rec, ep, side, "accept")
            ep.set_allocated()
            fut.resolve((fd, qs))

    def flow_accept(self, rec, qs=None, timeout=None):
        if not rec.names:
            raise AllocationRefused("not bound to any name")
        fut = self.sim.future()
        rec.accept_waiters.append(fut)
        self._kick_accept(rec)
        fd, granted = yield from self.sim.await_(fut, timeout)
        self.sim.trace.add(self.sim.now, "accept", self.system.name, fd)
        return fd

    def flow_join(self, rec, layer_name, qs=None, timeout=None):
        qs = qs.copy() if qs is not None else qos_preset("raw")
        n = name_bytes(layer_name)
        for ipcp in self.system.ipcps.values():
            if ipcp.kind != "broadcast":
                continue
            nh = hash_name(n, ipcp.hash_algo)
            if not ipcp.query(nh):
                continue
            ep = self.make_endpoint(qs)
            fd = self._map_fd(rec, ep, 0, "join")
            ipcp.flow_join(ep, nh, qs)
            ep.set_allocated()
            self.sim.trace.add(self.sim.now, "join", self.system.name, fd)
            return fd
        raise NameUnresolvable("wrong-name: %s" % layer_name)
        yield

    def deliver_flow(self, nh, qs, net):
        """Incoming flow request for a hash: find a target and an endpoint.

        Wakes a waiting acceptor, queues on a busy one, or super-serves a
        bound program.  Returns the endpoint once the acceptor has it.
        """
        n = self.name_for_hash(nh)
        if n is None:
            raise AllocationRefused("unknown-hash %s" % nh.short())
        target = None
        for rec in self.procs.values():
            if rec.alive and not rec.ipcp and n in rec.names:
                target = rec
                break
        if target is None:
            target = self.superserver_dispatch(n)
        if target is None:
            # an IPCP bound to the name accepts its own lower flows
            for rec in self.procs.values():
                if rec.ipcp is not None and n in rec.names:
                    ep = self.make_endpoint(qs)
                    rec.ipcp.accept_lower_flow(ep, qs)
                    ep.set_allocated()
                    return ep
            raise AllocationRefused("no process for %s" % nh.short())
        ep = self.make_endpoint(qs)
        yield from self._offer_to_proc(target, ep, 0, qs)
        return ep

    def superserver_dispatch(self, n):
        """Start a bound program for a name if configured to auto-start."""
        for ent in self.programs.values():
            if n in ent.names and ent.auto:
                factory = self.program_registry.get(ent.program)
                if factory is None:
                    return None
                rec = self.new_process(ent.program, factory, ent.argv)
                self.sim.trace.add(self.sim.now, "superserver",
                                   self.system.name, ent.program)
                return rec
        return None

    # -- I/O ------------------------------------------------------------

    def flow_read(self, rec, fd, maxlen=None):
        ep, sidx = self._lookup_fd(rec, fd)
        side = ep.sides[sidx]
        while True:
            if side.rx_rem and side.partial_read:
                take = side.rx_rem[:maxlen] if maxlen else side.rx_rem
                side.rx_rem = side.rx_rem[len(take):]
                return take
            if side.rx_msgs:
                msg = side.rx_msgs.popleft()
                side.conn.app_took()
                if side.partial_read and maxlen and maxlen < len(msg):
                    side.rx_rem = msg[maxlen:]
                    return msg[:maxlen]
                return msg
            if ep.peer_gone or side.closed:
                raise FlowDown("flow deallocated by peer")
            if ep.is_down:
                raise FlowDown("flow is down")
            if not side.blocking_r:
                raise WouldBlock()
            fut = self.sim.future()
            side.read_waiters.append(fut)
            yield from self.sim.await_(fut, side.rtimeout)

    def flow_write(self, rec, fd, data):
        ep, sidx = self._lookup_fd(rec, fd)
        side = ep.sides[sidx]
        if ep.state is not FlowState.ALLOCATED:
            raise FlowDown("not allocated")
        data = bytes(data)
        while True:
            if ep.is_down:
                raise FlowDown("flow is down")
            if side.try_write(data, self.sim.now):
                return len(data)
            if not side.blocking_w:
                raise WouldBlock()
            fut = self.sim.future()
            side.write_waiters.append(fut)
            yield from self.sim.await_(fut, side.wtimeout)

    def flow_dealloc(self, rec, fd):
        self._dealloc_fd(rec, fd)

    def _dealloc_fd(self, rec, fd):
        ep, sidx = self._lookup_fd(rec, fd)
        del rec.fds[fd]
        fset = rec.fd_to_set.get(fd)
        if fset is not None:
            fset.remove(fd)
        side = ep.sides[sidx]
        side.close()
        if ep.local:
            other = ep.sides[1 - sidx]
            if not other.closed:
                ep.peer_gone = True
                self.route_event(ep.owners[1 - sidx], ep.fds[1 - sidx],
                                 FqEvent.FLOW_DEALLOC)
                other.wake_readers_for_close()
            else:
                self.endpoints.pop(ep.fid, None)
            ep.state = FlowState.DEALLOCATED
            return
        allocator = ep.roles[sidx] == "alloc"
        if ep.net is not None:
            ep.net.flow_dealloc(ep, ep.eid, allocator_side=allocator)
        ep.state = FlowState.DEALLOCATED
        self.endpoints.pop(ep.fid, None)
        self.sim.trace.add(self.sim.now, "dealloc", self.system.name, fd)

    def fccntl(self, rec, fd, cmd, *args):
        ep, sidx = self._lookup_fd(rec, fd)
        side = ep.sides[sidx]
        cfg = side.conn.cfg
        if cmd is FcCmd.NONBLOCK_READ:
            side.blocking_r = not args[0]
        elif cmd is FcCmd.NONBLOCK_WRITE:
            side.blocking_w = not args[0]
        elif cmd is FcCmd.READ_TIMEOUT:
            side.rtimeout = args[0]
        elif cmd is FcCmd.WRITE_TIMEOUT:
            side.wtimeout = args[0]
        elif cmd is FcCmd.PARTIAL_READ:
            side.partial_read = bool(args[0])
        elif cmd in (FcCmd.FRAGMENTATION, FcCmd.REASSEMBLY,
                     FcCmd.FLOW_CONTROL):
            if not cfg.enabled:
                raise NotApplicable("transport disabled on this flow")
            flag = bool(args[0])
            if cmd is FcCmd.FRAGMENTATION:
                cfg.fragmentation = flag
            elif cmd is FcCmd.REASSEMBLY:
                cfg.reassembly = flag
            else:
                cfg.flow_control = flag
        else:
            raise NotApplicable("unknown-cmd %r" % (cmd,))

    # -- events -----------------------------------------------------------

    def route_event(self, pid, fd, ev):
        rec = self.procs.get(pid)
        if rec is None:
            return
        fset = rec.fd_to_set.get(fd)
        if fset is not None:
            fset.signal(fd, ev)

    def fevent(self, rec, fset, fq, timeout=None):
        if not fset.pending:
            fset.wait_fut = self.sim.future()
            yield from self.sim.await_(fset.wait_fut, timeout)
        items = []
        while fset.pending:
            fd, ev = fset.pending.popleft()
            if fd in fset.fds:
                items.append((fd, ev))
        fq._fill(items)
        return len(items)

    # -- bookkeeping --------------------------------------------------------

    def census(self):
        counts = {
            "endpoints": len(self.endpoints),
            "fds": sum(len(r.fds) for r in self.procs.values()),
        }
        for p in self.system.ipcps.values():
            extra = getattr(p, "census", None)
            if extra is not None:
                for k, v in extra().items():
                    counts[k] = counts.get(k, 0) + v
        return counts

    def ipcp_rows(self):
        rows = []
        for rec in self.procs.values():
            if rec.ipcp is not None:
                p = rec.ipcp
                rows.append((rec.pid, p.name, p.kind, p.layer_name))
        return rows


class Api:
    """Application-facing calls, scoped to one process."""

    def __init__(self, irm, rec):
        self.irm = irm
        self.rec = rec
        self.pid = rec.pid

    @property
    def now(self):
        return self.irm.sim.now

    def flow_alloc(self, dst, qs=None, timeout=None):
        res = self.irm.flow_alloc(self.rec, dst, qs, timeout)
        if inspect.isgenerator(res):
            fd = yield from res
            return fd
        return res

    def flow_accept(self, qs=None, timeout=None):
        fd = yield from self.irm.flow_accept(self.rec, qs, timeout)
        return fd

    def flow_join(self, layer, qs=None, timeout=None):
        fd = yield from self.irm.flow_join(self.rec, layer, qs, timeout)
        return fd

    def flow_read(self, fd, maxlen=None):
        data = yield from self.irm.flow_read(self.rec, fd, maxlen)
        return data

    def flow_write(self, fd, data):
        n = yield from self.irm.flow_write(self.rec, fd, data)
        return n

    def flow_dealloc(self, fd):
        self.irm.flow_dealloc(self.rec, fd)

    def fccntl(self, fd, cmd, *args):
        self.irm.fccntl(self.rec, fd, cmd, *args)

    def flow_qos(self, fd) -> QosSpec:
        ep, _ = self.irm._lookup_fd(self.rec, fd)
        return ep.qos

    def fset_create(self) -> Fset:
        fset = Fset(self.irm, self.rec)
        self.rec.fsets.append(fset)
        return fset

    def fqueue_create(self) -> Fqueue:
        return Fqueue()

    def fevent(self, fset, fq, timeout=None):
        n = yield from self.irm.fevent(self.rec, fset, fq, timeout)
        return n

    def sleep(self, ms):
        yield self.irm.sim.sleep(ms)

    def publish(self, stats):
        """Expose live statistics so a runner can assert mid-run."""
        if self.rec.proc is not None:
            self.rec.proc.stats = stats

    def print(self, line):
        if self.rec.proc is not None:
            self.rec.proc.output.append(line)
        self.irm.sim.trace.add(self.irm.sim.now, "out", self.irm.system.name,
                               self.rec.name, line)
