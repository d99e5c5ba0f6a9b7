import random

from recnet.core import Address, QosSpec
from recnet.routing import (Lsa, Lsdb, spf_compute, lfa_compute, build_table,
                            check_routing_solution, dijkstra, link_weight,
                            INF_DELAY)

from graph_oracles import (random_connected_graph, floyd_warshall,
                           exhaustive_min_dist, edges_of, remove_edge,
                           fallback_verdicts, has_lfa_by_inequality)


def line_graph():
    return {"a": {"b": 1}, "b": {"a": 1, "c": 1}, "c": {"b": 1}}


def square_graph():
    return {0: {1: 1, 3: 1}, 1: {0: 1, 2: 1}, 2: {1: 1, 3: 1}, 3: {0: 1, 2: 1}}


class TestLsdb:
    def test_fresh_accepted(self):
        db = Lsdb()
        assert db.merge(Lsa(1, 2, seqno=1))
        assert (1, 2) in db.links

    def test_stale_ignored(self):
        db = Lsdb()
        db.merge(Lsa(1, 2, seqno=5))
        assert not db.merge(Lsa(1, 2, seqno=5))
        assert not db.merge(Lsa(1, 2, seqno=4))
        assert db.merge(Lsa(1, 2, seqno=6))

    def test_withdrawal_removes_from_graph(self):
        db = Lsdb()
        db.merge(Lsa(1, 2, QosSpec(delay=1), seqno=1))
        db.merge(Lsa(1, 2, QosSpec(delay=INF_DELAY), seqno=2))
        assert 2 not in db.graph(0).get(1, {})

    def test_flood_converges_with_bounded_traffic(self):
        # four nodes in a ring, flooding with sequence suppression
        ring = {0: [1, 3], 1: [0, 2], 2: [1, 3], 3: [2, 0]}
        dbs = {v: Lsdb() for v in ring}
        transmissions = 0
        inbox = [(0, None, Lsa(Address.parse("7.0"), Address.parse("8.0"),
                               seqno=1))]
        while inbox:
            node, arrival, lsa = inbox.pop(0)
            if dbs[node].merge(lsa):
                for nb in ring[node]:
                    if nb != arrival:
                        transmissions += 1
                        inbox.append((nb, node, lsa))
        assert all(len(dbs[v]) == 1 for v in ring)
        # |A| * |V| bound from the spec of the dissemination procedure
        assert transmissions <= 8 * 4

    def test_lsa_codec_round_trip(self):
        lsa = Lsa(Address.parse("3.6.0"), Address.parse("3.0.0"),
                  QosSpec(delay=7), seqno=42, higher_level_participant=True)
        got = Lsa.decode(lsa.encode(3), 3)
        assert got.src == lsa.src and got.dst == lsa.dst
        assert got.seqno == 42 and got.higher_level_participant
        assert got.link_qos.delay == 7


class TestSpf:
    def test_three_node_line(self):
        nh, dist = spf_compute(line_graph(), "a")
        assert nh["c"] == "b" and dist["c"] == 2

    def test_tie_break_smallest_neighbor(self):
        g = {0: {1: 1, 2: 1}, 1: {0: 1, 3: 1}, 2: {0: 1, 3: 1},
             3: {1: 1, 2: 1}}
        nh, _ = spf_compute(g, 0)
        assert nh[3] == 1

    def test_distances_match_floyd_warshall(self):
        rng = random.Random(11)
        for _ in range(60):
            g = random_connected_graph(rng, rng.randint(2, 10),
                                       extra=rng.randint(0, 6),
                                       wmax=rng.choice([1, 4]))
            ref = floyd_warshall(g)
            for src in g:
                _, dist = spf_compute(g, src)
                for dst in g:
                    want = ref[src][dst]
                    if want == float("inf"):
                        assert dst not in dist
                    else:
                        assert dist.get(dst, 0 if dst == src else None) == want

    def test_distances_match_exhaustive_paths(self):
        rng = random.Random(13)
        for _ in range(15):
            g = random_connected_graph(rng, rng.randint(2, 6), extra=2,
                                       wmax=3)
            for src in g:
                _, dist = spf_compute(g, src)
                for dst in g:
                    if dst == src:
                        continue
                    assert dist[dst] == exhaustive_min_dist(g, src, dst)

    def test_weight_function(self):
        assert link_weight(QosSpec(delay=0), 0) == 1
        assert link_weight(QosSpec(delay=25), 1) == 25
        assert link_weight(QosSpec(delay=0), 1) == 1


class TestLfa:
    def test_square_topology_alternates_match_inequality(self):
        # on an even ring the inequality only admits an alternate for the
        # diagonal destination; adjacent ones tie and ties are not loop-free
        g = square_graph()
        lfas = lfa_compute(g, 0)
        dists = {v: dijkstra(g, v) for v in g}
        assert lfas[2] == [3]
        assert lfas[1] == [] and lfas[3] == []
        for dst, alts in lfas.items():
            for n in alts:
                assert dists[n][dst] < dists[n][0] + dists[0][dst]

    def test_chorded_topology_every_destination_covered(self):
        g = {a: {b: 1 for b in range(4) if b != a} for a in range(4)}
        for v in g:
            lfas = lfa_compute(g, v)
            assert lfas and all(len(alts) >= 1 for alts in lfas.values())

    def test_line_topology_has_none(self):
        lfas = lfa_compute(line_graph(), "a")
        assert all(alts == [] for alts in lfas.values())

    def test_inequality_is_exact(self):
        rng = random.Random(5)
        for _ in range(40):
            g = random_connected_graph(rng, rng.randint(3, 8), extra=3)
            dists = {v: dijkstra(g, v) for v in g}
            for self_addr in g:
                nh, _ = spf_compute(g, self_addr)
                lfas = lfa_compute(g, self_addr)
                for dst in nh:
                    want = sorted(
                        (n for n in g[self_addr]
                         if n != nh[dst]
                         and dists[n][dst] < dists[n][self_addr]
                         + dists[self_addr][dst]),
                        key=lambda n: (dists[n][dst], n))
                    assert lfas[dst] == want


def spf_next_hop_sets(g, dst):
    """H(v) = {primary next hop toward dst} for every vertex."""
    H = {}
    for v in g:
        nh, _ = spf_compute(g, v)
        if dst in nh:
            H[v] = {nh[dst]}
    return H


class TestRoutingChecker:
    def test_spf_tables_are_routing_solutions(self):
        rng = random.Random(21)
        for _ in range(100):
            g = random_connected_graph(rng, rng.randint(2, 8),
                                       extra=rng.randint(0, 5))
            for src in g:
                for dst in g:
                    if src == dst:
                        continue
                    H = spf_next_hop_sets(g, dst)
                    assert check_routing_solution(g, src, dst, H)

    def test_two_cycle_rejected(self):
        g = {0: {1: 1}, 1: {0: 1, 2: 1}, 2: {1: 1}}
        H = {0: {1}, 1: {0}}
        assert not check_routing_solution(g, 0, 2, H)

    def test_dead_end_rejected(self):
        g = {0: {1: 1, 2: 1}, 1: {0: 1}, 2: {0: 1, 3: 1}, 3: {2: 1}}
        H = {0: {1}}        # 1 is a sink that is not the destination
        assert not check_routing_solution(g, 0, 3, H)

    def test_disconnected_destination_empty_h(self):
        g = {0: {1: 1}, 1: {0: 1}, 2: {}}
        assert check_routing_solution(g, 0, 2, {})

    def test_nonempty_h_for_unreachable_rejected(self):
        g = {0: {1: 1}, 1: {0: 1}, 2: {}}
        assert not check_routing_solution(g, 0, 2, {0: {1}})

    def test_lfa_fallback_after_single_failure(self):
        # fail each link in turn: wherever the fallback table still routes
        # the walk, it must be a valid routing solution; where it dead-ends
        # the stuck node must provably have no loop-free alternate
        rng = random.Random(31)
        graphs = [square_graph(),
                  {a: {b: 1 for b in range(4) if b != a} for a in range(4)}]
        graphs += [random_connected_graph(rng, rng.randint(3, 7), extra=3)
                   for _ in range(20)]
        for g in graphs:
            verdicts = fallback_verdicts(g)
            assert not verdicts["loops"], g
            assert not verdicts["check_fails"], g
            for v, dst, edge in verdicts["dead_ends"]:
                assert not has_lfa_by_inequality(g, v, dst, edge), (v, dst, edge)
