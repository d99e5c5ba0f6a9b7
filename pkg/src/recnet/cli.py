"""Management command line, test tools and the scenario runner.

The command grammar mirrors the management toolkit: ipcp
create/destroy/bootstrap/enrol/connect/disconnect/list, bind/unbind,
register/unregister.  Scenarios are line-oriented scripts executed
against a single simulator instance; `seed` fixes all randomness, `on
<system>` prefixes address a system, and `assert` lines turn tool
statistics into an exit code.
"""

import shlex
import struct
import sys

from .core import (Address, LayerConfig, HashAlgo, qos_preset, QosSpec,
                   DirectoryPolicy, RoutingPolicy, RecnetError)
from .netsim import Simulator, TimeoutExpired
from .irm import Irm, Api, FlowDown, FqEvent, FcCmd
from .unicast import UnicastIpcp
from .broadcast import BroadcastIpcp, BcConfig

OPING_PAYLOAD = 64
OPING_DRAIN = 2000


class ParseError(RecnetError):
    pass


class CommandFailed(RecnetError):
    pass


class AssertFailed(RecnetError):
    pass


HASH_NAMES = {
    "sha3-224": HashAlgo.SHA3_224,
    "sha3-256": HashAlgo.SHA3_256,
    "sha3-384": HashAlgo.SHA3_384,
    "sha3-512": HashAlgo.SHA3_512,
    "md5": HashAlgo.MD5,
    "crc32": HashAlgo.CRC32,
}


def _opts(tokens):
    """Parse `key value` pairs plus bare flags into a dict of lists."""
    out = {}
    i = 0
    flags = ("autobind", "auto")
    while i < len(tokens):
        tok = tokens[i]
        if tok == "--":
            out.setdefault("--", []).extend(tokens[i + 1:])
            break
        if tok in flags:
            out.setdefault(tok, []).append("1")
            i += 1
            continue
        if i + 1 >= len(tokens):
            raise ParseError("option %r needs a value" % tok)
        out.setdefault(tok, []).append(tokens[i + 1])
        i += 2
    return out


def _one(opts, key, default=None, required=False):
    vals = opts.get(key)
    if not vals:
        if required:
            raise ParseError("missing %r" % key)
        return default
    return vals[-1]


class Net:
    """A simulator plus the per-system IRMs and the tool registry."""

    def __init__(self, seed=0, retain_trace=False):
        self.sim = Simulator(seed=seed, retain_trace=retain_trace)

    def system(self, name):
        system = self.sim.system(name)
        if system.irm is None:
            Irm(self.sim, system, program_registry=TOOLS)
        return system

    def link(self, name, a, b, **params):
        self.system(a)
        self.system(b)
        return self.sim.add_link(name, a, b, **params)

    def spawn_tool(self, system_name, tool, argv):
        system = self.system(system_name)
        factory = TOOLS[tool]
        rec = system.irm.new_process(tool, factory, argv)
        return rec.proc

    def run_cmd(self, system_name, line):
        """Execute one management command to completion."""
        return self.sim.call(irm_cmd(self, system_name, line), "irm-cmd")


# -- management commands ---------------------------------------------------


def irm_cmd(net, system_name, line):
    """Execute one `irm ...` management command on a system."""
    tokens = shlex.split(line) if isinstance(line, str) else list(line)
    if tokens and tokens[0] == "irm":
        tokens = tokens[1:]
    if not tokens:
        raise ParseError("empty command")
    system = net.system(system_name)
    irm = system.irm
    verb = tokens[0]
    if verb == "ipcp":
        out = yield from _ipcp_cmd(net, system, tokens[1:])
        return out
    if verb == "bind":
        return _bind_cmd(irm, tokens[1:])
    if verb == "unbind":
        return _unbind_cmd(irm, tokens[1:])
    if verb in ("register", "unregister"):
        opts = _opts(tokens[1:])
        name = _one(opts, "name", required=True)
        layers = opts.get("layer", [])
        ipcps = opts.get("ipcp", [])
        if not layers and not ipcps:
            raise ParseError("register needs a layer or ipcp")
        op = irm.register if verb == "register" else irm.unregister
        for layer in layers:
            yield from op(name, layer=layer)
        for ipcp in ipcps:
            yield from op(name, ipcp=ipcp)
        return "ok"
    raise ParseError("unknown verb %r" % verb)


def _ipcp_cmd(net, system, tokens):
    if not tokens:
        raise ParseError("ipcp: missing subcommand")
    sub = tokens[0]
    if sub == "list":
        rows = system.irm.ipcp_rows()
        lines = ["| %7s | %20s | %10s | %20s |" % ("pid", "name", "type",
                                                   "layer")]
        for pid, name, kind, layer in rows:
            lines.append("| %7d | %20s | %10s | %20s |" % (pid, name, kind,
                                                           layer))
        return "\n".join(lines)
    opts = _opts(tokens[1:])
    name = _one(opts, "name", required=True)
    if sub == "create":
        _create_ipcp(net, system, name, _one(opts, "type", required=True))
        return "ok"
    if sub == "destroy":
        ipcp = system.ipcps.pop(name, None)
        if ipcp is None:
            raise CommandFailed("no such ipcp %r" % name)
        rec = system.irm.record_for(ipcp)
        rec.alive = False
        return "ok"
    if sub == "bootstrap":
        ipcp = _get_or_create(net, system, name, opts)
        if ipcp.kind == "unicast":
            ipcp.bootstrap(_layer_config(opts), _addr_opt(opts))
        else:
            ipcp.bootstrap(_bc_config(opts))
        if "autobind" in opts:
            _autobind(system.irm, ipcp)
        return "ok"
    if sub == "enrol":
        ipcp = _get_or_create(net, system, name, opts)
        # the layer name doubles as the enrolment destination (anycast)
        dst = _one(opts, "dst") or _one(opts, "layer")
        if dst is None:
            raise ParseError("enrol needs dst or layer")
        if ipcp.kind == "unicast":
            yield from ipcp.enrol(dst, _addr_opt(opts))
        else:
            yield from ipcp.enrol(dst)
        if "autobind" in opts:
            _autobind(system.irm, ipcp)
        return "ok"
    if sub == "connect":
        ipcp = _require_ipcp(system, name)
        comp = _one(opts, "component")
        components = (comp,) if comp else ("dt", "mgmt")
        yield from ipcp.connect(_one(opts, "dst", required=True), components,
                                via=_one(opts, "via"))
        return "ok"
    if sub == "disconnect":
        ipcp = _require_ipcp(system, name)
        ipcp.disconnect(_one(opts, "dst", required=True))
        return "ok"
    raise ParseError("unknown ipcp subcommand %r" % sub)


def _create_ipcp(net, system, name, kind):
    if name in system.ipcps:
        raise CommandFailed("ipcp %r exists" % name)
    if kind == "unicast":
        return UnicastIpcp(net.sim, system, name)
    if kind == "broadcast":
        return BroadcastIpcp(net.sim, system, name)
    raise ParseError("unknown ipcp type %r" % kind)


def _get_or_create(net, system, name, opts):
    ipcp = system.ipcps.get(name)
    if ipcp is None:
        kind = _one(opts, "type")
        if kind is None:
            raise CommandFailed("no ipcp %r and no type given" % name)
        ipcp = _create_ipcp(net, system, name, kind)
    return ipcp


def _require_ipcp(system, name):
    ipcp = system.ipcps.get(name)
    if ipcp is None:
        raise CommandFailed("no such ipcp %r" % name)
    return ipcp


def _autobind(irm, ipcp):
    irm.bind_process(ipcp.pid, ipcp.name)
    if ipcp.layer_name:
        irm.bind_process(ipcp.pid, ipcp.layer_name)


def _addr_opt(opts):
    addr = _one(opts, "addr")
    return Address.parse(addr) if addr is not None else None


def _layer_config(opts):
    return LayerConfig(
        _one(opts, "layer", required=True),
        hash_algo=HASH_NAMES[_one(opts, "hash", "sha3-256")],
        level_count=int(_one(opts, "levels", 1)),
        ttl_max=int(_one(opts, "ttl", 60)),
        mps=int(_one(opts, "mps", 1024)),
        mpl=int(_one(opts, "mpl", 4000)),
        directory_policy=DirectoryPolicy(_one(opts, "dir", "dht")),
        routing_policy=RoutingPolicy(_one(opts, "routing", "lfa")))


def _bc_config(opts):
    return BcConfig(
        _one(opts, "layer", required=True),
        mode=_one(opts, "mode", "stateless"),
        node_name=int(_one(opts, "nodename", 0)),
        window=int(_one(opts, "window", 1024)))


def _bind_cmd(irm, tokens):
    kind, target = tokens[0], tokens[1]
    opts = _opts(tokens[2:])
    name = _one(opts, "name", required=True)
    if kind == "process":
        irm.bind_process(int(target), name)
    elif kind == "program":
        irm.bind_program(target, name, auto="auto" in opts,
                         argv=opts.get("--", []))
    elif kind == "ipcp":
        ipcp = irm.system.ipcps.get(target)
        if ipcp is None:
            raise CommandFailed("no such ipcp %r" % target)
        irm.bind_process(ipcp.pid, name)
    else:
        raise ParseError("bind %r" % kind)
    return "ok"


def _unbind_cmd(irm, tokens):
    kind, target = tokens[0], tokens[1]
    opts = _opts(tokens[2:]) if len(tokens) > 2 else {}
    name = _one(opts, "name")
    if kind == "process":
        irm.unbind(int(target), name)
    elif kind == "program":
        irm.unbind(target, name)
    elif kind == "ipcp":
        ipcp = irm.system.ipcps.get(target)
        if ipcp is None:
            raise CommandFailed("no such ipcp %r" % target)
        irm.unbind(ipcp.pid, name)
    else:
        raise ParseError("unbind %r" % kind)
    return "ok"


# -- tools ------------------------------------------------------------------


def _tool_args(argv):
    args = {}
    i = 0
    while i < len(argv):
        tok = argv[i]
        if tok in ("-l", "--listen", "-q", "--quiet", "-f", "--flood"):
            args[tok.strip("-")[0]] = True
            i += 1
        else:
            args[tok.lstrip("-")] = argv[i + 1]
            i += 2
    return args


def _qos_for(name):
    return qos_preset(name) if name else None


def oping(api, argv):
    """Round-trip-time measurement: client pings, server echoes."""
    args = _tool_args(argv)
    if args.get("l"):
        yield from _oping_server(api)
        return
    dst = args.get("n") or args.get("server-name") or "oping"
    count = int(args.get("c") or args.get("count", 4))
    interval = int(args.get("i") or args.get("interval", 10))
    size = int(args.get("s", OPING_PAYLOAD))
    qos = _qos_for(args.get("qos")) or qos_preset("raw")
    quiet = bool(args.get("q"))
    drain = int(args.get("drain", OPING_DRAIN))
    stats = {"transmitted": 0, "received": 0, "out_of_order": 0, "lost": 0}
    api.publish(stats)

    fd = yield from api.flow_alloc(dst, qos)
    api.print("Pinging %s with %d bytes of data (%d packets):" %
              (dst, size, count))
    api.print("")
    rtts = []
    state = {"max_seq": -1, "done": api.irm.sim.future()}

    def reader():
        api.fccntl(fd, FcCmd.READ_TIMEOUT, drain)
        while stats["received"] < count:
            try:
                data = yield from api.flow_read(fd)
            except (TimeoutExpired, FlowDown):
                break
            if len(data) < 12:
                continue
            seq, t0 = struct.unpack(">IQ", data[:12])
            rtt = api.now - t0
            stats["received"] += 1
            if seq < state["max_seq"]:
                stats["out_of_order"] += 1
            state["max_seq"] = max(state["max_seq"], seq)
            rtts.append(rtt)
            if not quiet:
                api.print("%d bytes from %s: seq=%d time=%.3f ms"
                          % (len(data), dst, seq, rtt))
        state["done"].resolve()

    api.irm.sim.spawn(reader(), "oping-rx")
    for i in range(count):
        payload = struct.pack(">IQ", i, api.now)
        payload += b"\x00" * max(0, size - len(payload))
        yield from api.flow_write(fd, payload)
        stats["transmitted"] += 1
        if interval:
            yield from api.sleep(interval)
    yield state["done"]
    if stats["received"] < stats["transmitted"]:
        api.print("Server timed out.")
    stats["lost"] = stats["transmitted"] - stats["received"]
    api.print("")
    api.print("--- %s ping statistics ---" % dst)
    api.print("%d packets transmitted, %d received, %d out-of-order, %d"
              % (stats["transmitted"], stats["received"],
                 stats["out_of_order"], stats["lost"]))
    if rtts:
        avg = sum(rtts) / len(rtts)
        mdev = (sum((r - avg) ** 2 for r in rtts) / len(rtts)) ** 0.5
        stats.update(rtt_min=min(rtts), rtt_avg=avg, rtt_max=max(rtts),
                     rtt_mdev=mdev)
        api.print("rtt min/avg/max/mdev = %.3f/%.3f/%.3f/%.3f ms"
                  % (min(rtts), avg, max(rtts), mdev))
    api.flow_dealloc(fd)
    return stats


def _oping_server(api):
    while True:
        fd = yield from api.flow_accept()
        api.irm.sim.spawn(_echo_loop(api, fd), "oping-echo")


def _echo_loop(api, fd):
    while True:
        try:
            data = yield from api.flow_read(fd)
            yield from api.flow_write(fd, data)
        except (FlowDown, TimeoutExpired, RecnetError):
            try:
                api.flow_dealloc(fd)
            except RecnetError:
                pass
            return


def oecho(api, argv):
    """Send one message, get it echoed back."""
    args = _tool_args(argv)
    if args.get("l"):
        while True:
            fd = yield from api.flow_accept()
            try:
                data = yield from api.flow_read(fd)
                api.print("Message from client is %s"
                          % data.rstrip(b"\x00").decode("utf-8", "replace"))
                yield from api.flow_write(fd, data)
            except (FlowDown, RecnetError):
                pass
    dst = args.get("n", "oecho")
    msg = args.get("m", "Hello World!").encode()
    fd = yield from api.flow_alloc(dst, _qos_for(args.get("qos")))
    yield from api.flow_write(fd, msg + b"\x00")
    data = yield from api.flow_read(fd)
    api.print("Server says %s"
              % data.rstrip(b"\x00").decode("utf-8", "replace"))
    api.flow_dealloc(fd)
    return {"echoed": 1}


def ocbr(api, argv):
    """Constant/flood bitrate test traffic with a byte-counting sink."""
    args = _tool_args(argv)
    if args.get("l"):
        stats = {"bytes": 0, "packets": 0, "samples": []}
        api.publish(stats)
        while True:
            fd = yield from api.flow_accept()
            start = api.now
            try:
                while True:
                    data = yield from api.flow_read(fd)
                    stats["bytes"] += len(data)
                    stats["packets"] += 1
                    stats["samples"].append((api.now, len(data)))
            except (FlowDown, RecnetError):
                dur = max(1, api.now - start)
                api.print("%d bytes in %d ms = %.0f bps"
                          % (stats["bytes"], dur, stats["bytes"] * 8000 / dur))
                return stats
    dst = args.get("n", "ocbr")
    duration = int(args.get("d", 1000))
    size = int(args.get("s", 1000))
    interval = int(args.get("i", 0))
    qos = _qos_for(args.get("qos")) or qos_preset("data")
    fd = yield from api.flow_alloc(dst, qos)
    sent = 0
    deadline = api.now + duration
    while api.now < deadline:
        yield from api.flow_write(fd, b"\x55" * size)
        sent += size
        if interval:
            yield from api.sleep(interval)
    api.flow_dealloc(fd)
    api.print("sent %d bytes" % sent)
    return {"sent": sent}


def obc(api, argv):
    """Broadcast reader/writer."""
    args = _tool_args(argv)
    layer = args.get("n", "broadcast")
    if args.get("l") or "m" not in args:
        api.print("Starting a reader.")
        stats = {"count": 0, "last": ""}
        api.publish(stats)
        fd = yield from api.flow_join(layer)
        api.print("New flow.")
        while True:
            try:
                data = yield from api.flow_read(fd)
            except (FlowDown, RecnetError):
                return stats
            text = data.rstrip(b"\x00").decode("utf-8", "replace")
            stats["count"] += 1
            stats["last"] = text
            api.print("Message is %s." % text)
    msg = args["m"].encode()
    fd = yield from api.flow_join(layer)
    yield from api.flow_write(fd, msg)
    api.flow_dealloc(fd)
    return {"written": 1}


TOOLS = {"oping": oping, "oecho": oecho, "ocbr": ocbr, "obc": obc}


# -- scenario runner -----------------------------------------------------------


class ScenarioResult:
    def __init__(self):
        self.exit_code = 0
        self.error = None
        self.stats = {}
        self.outputs = []
        self.trace_digest = None
        self.events = 0

    def __repr__(self):
        return "ScenarioResult(exit=%d, trace=%s)" % (self.exit_code,
                                                      self.trace_digest)


_OPS = {
    "==": lambda a, b: a == b,
    "!=": lambda a, b: a != b,
    "<": lambda a, b: a < b,
    "<=": lambda a, b: a <= b,
    ">": lambda a, b: a > b,
    ">=": lambda a, b: a >= b,
}


def scenario_run(text, seed=None, retain_trace=False) -> ScenarioResult:
    """Execute a scenario script; any failed assert gives exit code 1."""
    res = ScenarioResult()
    lines = text.splitlines()
    net = None
    background = []

    def ensure_net(use_seed=0):
        nonlocal net
        if net is None:
            net = Net(seed=use_seed if seed is None else seed,
                      retain_trace=retain_trace)
        return net

    try:
        for lineno, raw in enumerate(lines, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tokens = shlex.split(line)
            head = tokens[0]
            if head == "seed":
                if net is not None:
                    raise ParseError("seed must come first")
                ensure_net(int(tokens[1]))
            elif head == "system":
                for name in tokens[1:]:
                    ensure_net().system(name)
            elif head == "link":
                _link_cmd(ensure_net(), tokens[1:])
            elif head == "wait":
                n = ensure_net()
                n.sim.run(until=n.sim.now + int(tokens[1]))
            elif head == "run":
                n = ensure_net()
                if len(tokens) > 1:
                    n.sim.run(until=n.sim.now + int(tokens[1]))
                else:
                    n.sim.run()
            elif head == "on":
                _on_cmd(ensure_net(), tokens[1:], res, background)
            elif head == "assert":
                _assert_cmd(tokens[1:], res, background, lineno)
            else:
                raise ParseError("line %d: unknown command %r" % (lineno,
                                                                  head))
        if net is not None:
            net.sim.run()
        for tag, proc in background:
            _collect(res, tag, proc)
    except AssertFailed as err:
        res.exit_code = 1
        res.error = str(err)
    except RecnetError as err:
        res.exit_code = 2
        res.error = "%s: %s" % (type(err).__name__, err)
    if net is not None:
        res.trace_digest = net.sim.trace.digest()
        res.events = net.sim.trace.count
    return res


def _link_cmd(net, tokens):
    sub = tokens[0]
    if sub == "add":
        opts = _opts(tokens[1:])
        name = _one(opts, "name", required=True)
        a = _one(opts, "a", required=True)
        b = _one(opts, "b", required=True)
        net.link(name, a, b,
                 delay=int(_one(opts, "delay", 1)),
                 loss_p=float(_one(opts, "loss", 0)),
                 ber=int(_one(opts, "ber", 0)),
                 dup_p=float(_one(opts, "dup", 0)),
                 reorder_p=float(_one(opts, "reorder", 0)),
                 bw_bps=int(_one(opts, "bw", 0)),
                 layer=_one(opts, "layer"))
    elif sub == "set":
        link = net.sim.links.get(tokens[1])
        if link is None:
            raise CommandFailed("unknown-link: %s" % tokens[1])
        link.set_param(tokens[2], tokens[3])
    else:
        raise ParseError("link %r" % sub)


def _on_cmd(net, tokens, res, background):
    system_name = tokens[0]
    rest = tokens[1:]
    if not rest:
        raise ParseError("on: missing command")
    if rest[0] == "irm":
        out = net.run_cmd(system_name, rest)
        if out and out != "ok":
            for ln in str(out).splitlines():
                res.outputs.append(ln)
        return
    spawned = False
    tag = None
    while rest and rest[0] in ("spawn", "tool", "tag"):
        if rest[0] == "spawn":
            spawned = True
            rest = rest[1:]
        elif rest[0] == "tool":
            rest = rest[1:]
        else:
            tag = rest[1]
            rest = rest[2:]
    tool = rest[0]
    if tool not in TOOLS:
        raise ParseError("unknown tool %r" % tool)
    tag = tag or tool
    proc = net.spawn_tool(system_name, tool, rest[1:])
    if spawned:
        background.append((tag, proc))
        return
    net.sim.run()
    if not proc.done.done:
        raise CommandFailed("tool %s did not finish" % tool)
    _collect(res, tag, proc)
    if proc.done.exc is not None:
        raise CommandFailed("%s: %s" % (tool, proc.done.exc))


def _collect(res, tag, proc):
    res.outputs.extend(proc.output)
    if isinstance(proc.done.value, dict):
        res.stats[tag] = proc.done.value
    elif isinstance(getattr(proc, "stats", None), dict):
        res.stats[tag] = proc.stats


def _assert_cmd(tokens, res, background, lineno):
    if len(tokens) != 3:
        raise ParseError("assert wants: <tag.field> <op> <value>")
    key, op, want = tokens
    tag, _, field = key.partition(".")
    stats = res.stats.get(tag)
    if stats is None:
        for btag, proc in background:
            if btag == tag:
                stats = (proc.done.value
                         if isinstance(proc.done.value, dict)
                         else getattr(proc, "stats", None))
                break
    if stats is None:
        raise AssertFailed("line %d: no stats for %r" % (lineno, tag))
    if field not in stats:
        raise AssertFailed("line %d: no field %r in %r" % (lineno, field, tag))
    have = stats[field]
    if isinstance(have, (int, float)):
        want_v = float(want)
    else:
        want_v = want
    if not _OPS[op](have, want_v):
        raise AssertFailed("line %d: %s is %r, wanted %s %s"
                           % (lineno, key, have, op, want))


def main(argv=None):
    import argparse
    parser = argparse.ArgumentParser(prog="recnet",
                                     description="scenario runner")
    parser.add_argument("scenario", help="scenario file path")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--trace", action="store_true",
                        help="print the event-trace digest")
    opts = parser.parse_args(argv)
    with open(opts.scenario) as fh:
        text = fh.read()
    res = scenario_run(text, seed=opts.seed)
    for line in res.outputs:
        print(line)
    if res.error:
        print("error: %s" % res.error, file=sys.stderr)
    if opts.trace:
        print("trace %s (%d events)" % (res.trace_digest, res.events))
    return res.exit_code


if __name__ == "__main__":
    sys.exit(main())
