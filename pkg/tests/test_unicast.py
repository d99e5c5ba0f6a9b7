import random

import pytest

from recnet.core import Address, QosSpec, qos_preset, hash_name
from recnet.unicast import (DtHeader, dt_decide, build_area_tables, ecn_mark,
                            CongestionState, fecn_update, qos_priority,
                            ECN_LOW, ECN_HIGH, WILDCARD, UnicastIpcp)
from recnet.netsim import Simulator
from recnet.irm import Irm, FlowState, FlowDown
from recnet.cli import Net, scenario_run


class TestDtHeader:
    def test_codec_round_trip(self):
        rng = random.Random(2)
        for _ in range(200):
            lc = rng.randint(1, 4)
            hdr = DtHeader(rng.randint(1, 255),
                           Address(rng.randint(0, 2 ** 32 - 1)
                                   for _ in range(lc)),
                           rng.randint(0, 255), rng.randint(0, 255),
                           rng.randint(0, 2 ** 64 - 1))
            got, hlen = DtHeader.decode(hdr.encode(lc), lc)
            assert hlen == 11 + 4 * lc
            assert (got.ttl, got.dst, got.qos, got.ecn, got.eid) == \
                (hdr.ttl, hdr.dst, hdr.qos, hdr.ecn, hdr.eid)

    def test_wire_len_single_level(self):
        hdr = DtHeader(60, Address.single(1), 0, 0, 64)
        assert len(hdr.encode(1)) == 15

    def test_short_buffer(self):
        with pytest.raises(ValueError):
            DtHeader.decode(b"\x00" * 5, 1)


# The three-level topology from the forwarding example: areas at the
# top (A), middle (B and C) and bottom (D) levels, with the members
# marked that also participate one level up.
AREAS = [
    {"level": 0, "marked": set(), "links": [
        (Address.parse("3.0.0"), Address.parse("1.0.0")),
        (Address.parse("1.0.0"), Address.parse("2.0.0")),
        (Address.parse("3.2.0"), Address.parse("1.0.0")),
    ]},
    {"level": 1, "marked": {Address.parse("3.0.0"), Address.parse("3.2.0")},
     "links": [
        (Address.parse("3.1.0"), Address.parse("3.0.0")),
        (Address.parse("3.6.0"), Address.parse("3.0.0")),
        (Address.parse("3.6.0"), Address.parse("3.8.0")),
        (Address.parse("3.8.0"), Address.parse("3.2.0")),
        (Address.parse("3.3.0"), Address.parse("3.2.0")),
        (Address.parse("3.1.0"), Address.parse("3.3.0")),
    ]},
    {"level": 1, "marked": {Address.parse("2.0.0")}, "links": [
        (Address.parse("2.3.0"), Address.parse("2.0.0")),
        (Address.parse("2.0.0"), Address.parse("2.1.1")),
        (Address.parse("2.1.1"), Address.parse("2.4.1")),
        (Address.parse("2.3.0"), Address.parse("2.4.1")),
    ]},
    {"level": 2, "marked": {Address.parse("2.4.1")}, "links": [
        (Address.parse("2.4.1"), Address.parse("2.4.2")),
        (Address.parse("2.4.2"), Address.parse("2.4.3")),
        (Address.parse("2.4.1"), Address.parse("2.4.7")),
    ]},
]


def hier_route(src: str, dst: str, max_hops=16):
    """Walk a packet through the static hierarchical fixture."""
    here = Address.parse(src)
    target = Address.parse(dst)
    path = [here]
    for _ in range(max_hops):
        if here == target:
            return path
        tables = build_area_tables(here, AREAS)
        action = dt_decide(here, target, tables)
        if action[0] == "deliver":
            return path
        if action[0] == "drop":
            raise AssertionError("dropped at %s: %s" % (here, action[1]))
        here = action[1][0]
        path.append(here)
    raise AssertionError("loop: %s" % path)


class TestHierarchicalForwarding:
    def test_paper_trace(self):
        path = hier_route("3.6.0", "2.4.2")
        assert [str(a) for a in path] == [
            "3.6.0", "3.0.0", "1.0.0", "2.0.0", "2.1.1", "2.4.1", "2.4.2"]

    def test_local_delivery(self):
        tables = build_area_tables(Address.parse("2.4.2"), AREAS)
        action = dt_decide(Address.parse("2.4.2"), Address.parse("2.4.2"),
                           tables)
        assert action[0] == "deliver"

    def test_middle_level_hop(self):
        # at 2.0.0 the top level matches and the middle table routes
        tables = build_area_tables(Address.parse("2.0.0"), AREAS)
        action = dt_decide(Address.parse("2.0.0"), Address.parse("2.4.2"),
                           tables)
        assert action[0] == "forward"
        assert action[1][0] == Address.parse("2.1.1")

    def test_escape_via_marked_participant(self):
        # 3.6.0 does not participate at the top level: the wildcard routes
        # toward the lowest-addressed marked member, 3.0.0
        tables = build_area_tables(Address.parse("3.6.0"), AREAS)
        assert tables[0][WILDCARD] == [Address.parse("3.0.0")]

    def test_reverse_trace_loops_nowhere(self):
        path = hier_route("2.4.7", "3.8.0")
        assert path[-1] == Address.parse("3.8.0")
        assert len(path) == len(set(path))


class TestEcnMark:
    def test_zero_below_low(self):
        assert ecn_mark(0) == 0
        assert ecn_mark(ECN_LOW) == 0

    def test_saturates_at_high(self):
        assert ecn_mark(ECN_HIGH) == 255
        assert ecn_mark(ECN_HIGH + 10) == 255

    def test_monotone(self):
        rng = random.Random(4)
        depths = sorted(rng.randint(0, 2 * ECN_HIGH) for _ in range(200))
        marks = [ecn_mark(d) for d in depths]
        assert marks == sorted(marks)
        assert all(0 <= m <= 255 for m in marks)


class TestFecn:
    def test_additive_increase(self):
        cs = CongestionState(mps=1000, cwnd=10_000)
        for _ in range(10):
            fecn_update(cs, 50_000, 0)
        assert cs.cwnd_bytes == 20_000

    def test_full_marking_halves(self):
        cs = CongestionState(mps=1000, cwnd=64_000)
        for _ in range(200):        # alpha converges to 1
            fecn_update(cs, 10_000, 10_000)
        assert cs.alpha > 0.99
        cs.cwnd_bytes = 64_000
        before = cs.cwnd_bytes
        after = fecn_update(cs, 10_000, 10_000)
        assert after == max(1000, int(before * (1 - cs.alpha / 2)))
        assert abs(after - before / 2) <= before * 0.02

    def test_floor_is_one_mps(self):
        cs = CongestionState(mps=1000, cwnd=1000)
        cs.alpha = 1.0
        assert fecn_update(cs, 100, 100) == 1000

    def test_partial_marking_converges(self):
        cs = CongestionState(mps=1000, cwnd=32_000)
        history = []
        for _ in range(300):
            fecn_update(cs, 10_000, 3_000)
            history.append(cs.cwnd_bytes)
        tail = history[200:]
        assert max(tail) - min(tail) < 0.5 * (sum(tail) / len(tail))

    def test_priority_mapping(self):
        assert qos_priority(qos_preset("raw")) == 0
        assert qos_priority(qos_preset("best_effort")) == 0
        assert qos_priority(qos_preset("data")) == 0
        assert qos_priority(qos_preset("video")) == 1
        assert qos_priority(qos_preset("voice")) == 2


def two_system_layer(seed=3, addr1=1, addr2=2):
    net = Net(seed=seed)
    net.link("w0", "s1", "s2", delay=1)
    net.run_cmd("s1", "irm ipcp bootstrap name u1 layer net type unicast "
                      "autobind addr %d" % addr1)
    net.run_cmd("s1", "irm register name u1 layer w0")
    net.run_cmd("s1", "irm register name net layer w0")
    net.run_cmd("s2", "irm ipcp enrol name u2 dst net type unicast "
                      "autobind addr %d" % addr2)
    net.run_cmd("s2", "irm ipcp connect name u2 dst u1")
    net.sim.run()
    return net


class TestFlowAllocProtocol:
    def test_two_message_exchange(self):
        net = two_system_layer()
        u1 = net.sim.systems["s1"].ipcps["u1"]
        u2 = net.sim.systems["s2"].ipcps["u2"]

        def server(api, argv):
            fd = yield from api.flow_accept()
            data = yield from api.flow_read(fd)
            yield from api.flow_write(fd, data)

        rec = net.sim.systems["s2"].irm.new_process("server", server)
        net.sim.systems["s2"].irm.bind_process(rec.pid, "server")
        net.run_cmd("s2", "irm register name server ipcp u2")
        net.sim.run()

        def client(api, argv):
            fd = yield from api.flow_alloc("server", qos_preset("data"))
            yield from api.flow_write(fd, b"x")
            reply = yield from api.flow_read(fd)
            api.flow_dealloc(fd)
            return reply

        cli = net.sim.systems["s1"].irm.new_process("client", client)
        net.sim.run()
        assert cli.proc.done.value == b"x"
        reqs = [m for m in u1.fa.sent_log if m["type"] == "req"]
        replies = [m for m in u2.fa.sent_log if m["type"] == "reply"]
        assert len(reqs) == 1 and len(replies) == 1
        assert reqs[0]["src_addr"] == Address.single(1)
        assert reqs[0]["dst_hash"] == hash_name("server")
        assert replies[0]["src_eid"] == reqs[0]["src_eid"]
        assert replies[0]["response"] == 0
        assert replies[0]["dst_eid"] >= 64

    def test_refused_for_unknown_process(self):
        net = two_system_layer(seed=4)
        # register a hash in the DHT with nothing behind it on s2
        u2 = net.sim.systems["s2"].ipcps["u2"]
        net.sim.call(u2.reg(hash_name("phantom")))
        net.sim.run()

        def client(api, argv):
            yield from api.flow_alloc("phantom")

        cli = net.sim.systems["s1"].irm.new_process("client", client)
        net.sim.run()
        assert cli.proc.done.exc is not None

    def test_dealloc_asymmetry_network_release_once(self):
        for order in ("client_first", "server_first"):
            net = two_system_layer(seed=5)
            u1 = net.sim.systems["s1"].ipcps["u1"]
            u2 = net.sim.systems["s2"].ipcps["u2"]
            done = {}

            def server(api, argv):
                fd = yield from api.flow_accept()
                yield from api.flow_read(fd)
                if order == "server_first":
                    api.flow_dealloc(fd)
                    done["server"] = api.now
                else:
                    try:
                        yield from api.flow_read(fd)
                    except FlowDown:
                        pass
                    api.flow_dealloc(fd)
                    done["server"] = api.now

            rec = net.sim.systems["s2"].irm.new_process("server", server)
            net.sim.systems["s2"].irm.bind_process(rec.pid, "server")
            net.run_cmd("s2", "irm register name server ipcp u2")
            baseline1 = u1.fa.census()["fa_entries"]
            baseline2 = u2.fa.census()["fa_entries"]

            def client(api, argv):
                fd = yield from api.flow_alloc("server", qos_preset("data"))
                yield from api.flow_write(fd, b"ping")
                yield from api.sleep(50)
                api.flow_dealloc(fd)
                done["client"] = api.now

            net.sim.systems["s1"].irm.new_process("client", client)
            net.sim.run()
            assert "client" in done and "server" in done
            assert u1.fa.census()["fa_entries"] == baseline1, order
            assert u2.fa.census()["fa_entries"] == baseline2, order
            # network release happened exactly once, on the allocator side
            assert u1.fa.released == 1, order
            assert u2.fa.released == 0, order


class TestMobility:
    def test_add_then_drop_remote(self):
        net = Net(seed=9)
        net.link("wifi", "m", "gw", delay=1)
        net.link("cell", "m", "gw", delay=2)
        net.run_cmd("m", "irm ipcp bootstrap name um layer net type unicast "
                         "autobind addr 10")
        net.run_cmd("m", "irm register name um layer wifi layer cell")
        net.run_cmd("m", "irm register name net layer wifi layer cell")
        net.run_cmd("gw", "irm ipcp enrol name ug dst net type unicast "
                          "autobind addr 20")
        # first adjacency over the wifi wire only
        ug = net.sim.systems["gw"].ipcps["ug"]
        um = net.sim.systems["m"].ipcps["um"]
        net.sim.call(ug.connect("um"))
        net.sim.run()

        def server(api, argv):
            fd = yield from api.flow_accept()
            while True:
                try:
                    data = yield from api.flow_read(fd)
                except FlowDown:
                    return
                yield from api.flow_write(fd, data)

        rec = net.sim.systems["gw"].irm.new_process("server", server)
        net.sim.systems["gw"].irm.bind_process(rec.pid, "server")
        net.run_cmd("gw", "irm register name server ipcp ug")
        net.sim.run()

        got = []

        def client(api, argv):
            fd = yield from api.flow_alloc("server", qos_preset("data"))
            for i in range(30):
                yield from api.flow_write(fd, bytes([i]))
                got.append((yield from api.flow_read(fd)))
                if i == 10:
                    # second lower flow comes up (make before break)
                    net.sim.spawn(ug.connect("um", via="cell"), "connect2")
                if i == 20:
                    net.sim.links["wifi"].set_param("up", False)
                yield from api.sleep(5)
            return len(got)

        cli = net.sim.systems["m"].irm.new_process("client", client)
        net.sim.run()
        assert cli.proc.done.exc is None
        assert cli.proc.done.value == 30
        assert got == [bytes([i]) for i in range(30)]

    def test_drop_last_remote_flows_down(self):
        net = two_system_layer(seed=11)

        def server(api, argv):
            fd = yield from api.flow_accept()
            while True:
                try:
                    yield from api.flow_read(fd)
                except FlowDown:
                    return "down"

        rec = net.sim.systems["s2"].irm.new_process("server", server)
        net.sim.systems["s2"].irm.bind_process(rec.pid, "server")
        net.run_cmd("s2", "irm register name server ipcp u2")

        state = {}

        def client(api, argv):
            fd = yield from api.flow_alloc("server", qos_preset("raw"))
            yield from api.flow_write(fd, b"x")
            yield from api.sleep(10)
            net.sim.links["w0"].set_param("up", False)
            yield from api.sleep(10)
            try:
                yield from api.flow_read(fd)
            except FlowDown:
                state["down"] = True

        net.sim.systems["s1"].irm.new_process("client", client)
        net.sim.run()
        assert state.get("down")


class TestTtl:
    def test_expiry_drops(self):
        sim = Simulator(seed=1)
        system = sim.system("x")
        Irm(sim, system)
        ipcp = UnicastIpcp(sim, system, "u")
        from recnet.core import LayerConfig
        ipcp.bootstrap(LayerConfig("net", ttl_max=2), Address.single(5))
        hdr = DtHeader(1, Address.single(99), 0, 0, 64)
        ipcp._dt_rx(type("LF", (), {"fd": 1})(), hdr.encode(1) + b"zz")
        assert ipcp.drops.get("ttl-expired") == 1
