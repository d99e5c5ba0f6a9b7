import pytest

from recnet.broadcast import SeenTable, CycleRejected, BroadcastIpcp
from recnet.cli import Net, scenario_run
from recnet.irm import FlowDown


class TestSeenTable:
    def test_new_then_duplicate(self):
        st = SeenTable()
        assert st.check(7, 1)
        assert not st.check(7, 1)
        assert st.duplicates == 1

    def test_window_expels_ancient(self):
        st = SeenTable(window=10)
        assert st.check(1, 100)
        assert not st.check(1, 50)      # far below the window: duplicate
        assert st.check(1, 95)          # inside the window, unseen

    def test_bounded_size(self):
        st = SeenTable(window=16)
        for src in range(4):
            for seq in range(1000):
                st.check(src, seq)
        assert st.size() <= 4 * (16 + 1)


def bc_pair(seed=3, mode="stateless"):
    net = Net(seed=seed)
    net.link("w0", "x", "y", delay=1)
    net.run_cmd("x", "irm ipcp bootstrap name b1 layer bc type broadcast "
                     "autobind mode %s" % mode)
    net.run_cmd("x", "irm register name b1 layer w0")
    net.run_cmd("x", "irm register name bc layer w0")
    net.run_cmd("y", "irm ipcp enrol name b2 layer bc type broadcast autobind")
    net.run_cmd("y", "irm ipcp connect name b2 dst b1 component dt")
    return net


class TestJoin:
    def test_join_right_name(self):
        net = bc_pair()

        def app(api, argv):
            fd = yield from api.flow_join("bc")
            return fd

        rec = net.sim.systems["x"].irm.new_process("app", app)
        net.sim.run()
        assert rec.proc.done.value >= 64

    def test_join_wrong_name(self):
        net = bc_pair()

        def app(api, argv):
            yield from api.flow_join("other")

        rec = net.sim.systems["x"].irm.new_process("app", app)
        net.sim.run()
        assert rec.proc.done.exc is not None

    def test_two_joins_both_receive(self):
        net = bc_pair(seed=4)
        got = {"r1": [], "r2": []}

        def reader(which):
            def gen(api, argv):
                fd = yield from api.flow_join("bc")
                while True:
                    try:
                        got[which].append((yield from api.flow_read(fd)))
                    except FlowDown:
                        return
            return gen

        net.sim.systems["x"].irm.new_process("r1", reader("r1"))
        net.sim.systems["x"].irm.new_process("r2", reader("r2"))

        def writer(api, argv):
            yield from api.sleep(5)
            fd = yield from api.flow_join("bc")
            yield from api.flow_write(fd, b"fan out")
            api.flow_dealloc(fd)

        net.sim.systems["y"].irm.new_process("w", writer)
        net.sim.run()
        assert got["r1"] == [b"fan out"]
        assert got["r2"] == [b"fan out"]


class TestStatelessCycles:
    def build_chain(self, n=4, seed=5):
        net = Net(seed=seed)
        names = [chr(ord("a") + i) for i in range(n)]
        for i in range(n - 1):
            net.link("w%d" % i, names[i], names[i + 1], delay=1)
        # extra link closing the ring, for the cycle test
        net.link("wx", names[-1], names[0], delay=1)
        net.run_cmd(names[0], "irm ipcp bootstrap name b0 layer bc "
                              "type broadcast autobind")
        for layer in list(net.sim.links):
            sysnames = {net.sim.links[layer].shims[0].system.name,
                        net.sim.links[layer].shims[1].system.name}
            for s in sysnames:
                for nm in ("b0", "bc"):
                    try:
                        net.run_cmd(s, "irm register name %s layer %s"
                                    % (nm, layer))
                    except Exception:
                        pass
        for i in range(1, n):
            s = names[i]
            net.run_cmd(s, "irm ipcp enrol name b%d layer bc type broadcast "
                           "autobind" % i)
            for layer in list(net.sim.links):
                link = net.sim.links[layer]
                if s in (link.shims[0].system.name,
                         link.shims[1].system.name):
                    for nm in ("b%d" % i, "bc"):
                        try:
                            net.run_cmd(s, "irm register name %s layer %s"
                                        % (nm, layer))
                        except Exception:
                            pass
            net.run_cmd(s, "irm ipcp connect name b%d dst b%d via w%d"
                        % (i, i - 1, i - 1))
            net.sim.run()
        return net, names

    def test_closing_edge_rejected(self):
        net, names = self.build_chain()
        last = net.sim.systems[names[-1]].ipcps["b%d" % (len(names) - 1)]
        with pytest.raises(CycleRejected):
            net.sim.call(last.connect("b0", ("dt",), via="wx"))

    def test_stateless_forwards_byte_identical(self):
        net = bc_pair(seed=6)
        b1 = net.sim.systems["x"].ipcps["b1"]
        seen = []
        orig = b1._forward

        def spy(data, arrival, origin_eid):
            seen.append(bytes(data))
            return orig(data, arrival, origin_eid)

        b1._forward = spy

        def writer(api, argv):
            fd = yield from api.flow_join("bc")
            yield from api.flow_write(fd, b"\x00\x01headerless\xff")
            api.flow_dealloc(fd)

        net.sim.systems["x"].irm.new_process("w", writer)
        net.sim.run()
        assert seen == [b"\x00\x01headerless\xff"]


class TestStatefulRing:
    def build_ring(self, n=5, seed=8):
        net = Net(seed=seed)
        names = [chr(ord("a") + i) for i in range(n)]
        for i in range(n):
            net.link("w%d" % i, names[i], names[(i + 1) % n], delay=1)
        net.run_cmd(names[0], "irm ipcp bootstrap name b0 layer bc "
                              "type broadcast autobind mode stateful")
        for i, s in enumerate(names):
            for lname, link in net.sim.links.items():
                if s in (link.shims[0].system.name,
                         link.shims[1].system.name):
                    for nm in ("b%d" % i, "bc"):
                        try:
                            net.run_cmd(s, "irm register name %s layer %s"
                                        % (nm, lname))
                        except Exception:
                            pass
        for i in range(1, n):
            s = names[i]
            net.run_cmd(s, "irm ipcp enrol name b%d layer bc type broadcast "
                           "autobind" % i)
            for lname, link in net.sim.links.items():
                if s in (link.shims[0].system.name,
                         link.shims[1].system.name):
                    for nm in ("b%d" % i, "bc"):
                        try:
                            net.run_cmd(s, "irm register name %s layer %s"
                                        % (nm, lname))
                        except Exception:
                            pass
            net.run_cmd(s, "irm ipcp connect name b%d dst b%d component dt "
                           "via w%d" % (i, i - 1, i - 1))
            net.sim.run()
        # close the ring: stateful layers allow any graph
        net.run_cmd(names[0], "irm ipcp connect name b0 dst b%d component dt "
                              "via w%d" % (n - 1, n - 1))
        net.sim.run()
        return net, names

    def test_ring_accepts_cycle_and_dedups(self):
        net, names = self.build_ring()
        counts = {s: [] for s in names}

        def reader(s):
            def gen(api, argv):
                fd = yield from api.flow_join("bc")
                while True:
                    try:
                        counts[s].append((yield from api.flow_read(fd)))
                    except FlowDown:
                        return
            return gen

        for s in names:
            net.sim.systems[s].irm.new_process("r", reader(s))
        net.sim.run()

        def writer(api, argv):
            fd = yield from api.flow_join("bc")
            for i in range(10):
                yield from api.flow_write(fd, b"m%d" % i)
                yield from api.sleep(20)
            api.flow_dealloc(fd)

        net.sim.systems[names[2]].irm.new_process("w", writer)
        net.sim.run()
        want = [b"m%d" % i for i in range(10)]
        for s in names:
            assert counts[s] == want, s
        dups = sum(net.sim.systems[s].ipcps["b%d" % i].seen.duplicates
                   for i, s in enumerate(names))
        assert dups > 0     # the ring really did loop packets back
