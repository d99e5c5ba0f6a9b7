"""Link-state routing: LSDB, per-QoS shortest paths and loop-free alternates.

The wire unit is the link-state advertisement (LSA), one per link
direction, sequence-numbered per originator.  Withdrawals are LSAs whose
weight is infinite.  Tables are computed per QoS priority; priority 0
routes on hop count, the latency-sensitive priorities on link delay.
"""

import heapq
import struct

from .core import Address, QosSpec, address_encode, address_decode

INF_DELAY = 0xFFFFFFFF      # weight of a withdrawn link

MSG_LSA = 2                 # type byte on management flows


class Lsa:
    __slots__ = ("src", "dst", "link_qos", "seqno", "higher_level_participant")

    def __init__(self, src, dst, link_qos=None, seqno=0,
                 higher_level_participant=False):
        self.src = src
        self.dst = dst
        self.link_qos = link_qos if link_qos is not None else QosSpec()
        self.seqno = seqno
        self.higher_level_participant = higher_level_participant

    @property
    def withdrawn(self):
        return self.link_qos.delay == INF_DELAY

    def encode(self, level_count: int) -> bytes:
        return (bytes([MSG_LSA])
                + address_encode(self.src, level_count)
                + address_encode(self.dst, level_count)
                + self.link_qos.encode()
                + struct.pack(">QB", self.seqno,
                              1 if self.higher_level_participant else 0))

    @classmethod
    def decode(cls, data: bytes, level_count: int) -> "Lsa":
        if data[0] != MSG_LSA:
            raise ValueError("not an LSA")
        off = 1
        alen = 4 * level_count
        src = address_decode(data[off:off + alen], level_count)
        off += alen
        dst = address_decode(data[off:off + alen], level_count)
        off += alen
        qos = QosSpec.decode(data[off:off + QosSpec.WIRE_LEN])
        off += QosSpec.WIRE_LEN
        seqno, part = struct.unpack(">QB", data[off:off + 9])
        return cls(src, dst, qos, seqno, bool(part))

    def __repr__(self):
        return "Lsa(%s->%s seq=%d%s)" % (self.src, self.dst, self.seqno,
                                         " withdrawn" if self.withdrawn else "")


def link_weight(qos: QosSpec, prio: int) -> int:
    """Priority 0 counts hops; latency priorities use the link delay."""
    if prio == 0:
        return 1
    return max(1, qos.delay)


class Lsdb:
    """Latest LSA per directed link, plus the derived graph view."""

    def __init__(self):
        self.links = {}       # (src, dst) -> Lsa

    def merge(self, lsa: Lsa) -> bool:
        """Accept iff strictly newer than what we hold. True means changed."""
        key = (lsa.src, lsa.dst)
        cur = self.links.get(key)
        if cur is not None and lsa.seqno <= cur.seqno:
            return False
        self.links[key] = lsa
        return True

    def graph(self, prio: int = 0):
        """Adjacency map {v: {u: weight}} of live links."""
        g = {}
        for (src, dst), lsa in self.links.items():
            if lsa.withdrawn:
                continue
            g.setdefault(src, {})[dst] = link_weight(lsa.link_qos, prio)
            g.setdefault(dst, {})
        return g

    def participants(self):
        """Vertices marked as also participating at a higher level."""
        marked = set()
        for lsa in self.links.values():
            if lsa.withdrawn:
                continue
            if lsa.higher_level_participant:
                marked.add(lsa.src)
        return marked

    def all_lsas(self):
        return [self.links[k] for k in sorted(self.links,
                                              key=lambda k: (_skey(k[0]), _skey(k[1])))]

    def __len__(self):
        return len(self.links)


def _skey(v):
    return v.levels if isinstance(v, Address) else v


def dijkstra(graph, source):
    """Plain single-source shortest paths; returns {v: dist}."""
    dist = {source: 0}
    heap = [(0, _skey(source), source)]
    done = set()
    while heap:
        d, _, v = heapq.heappop(heap)
        if v in done:
            continue
        done.add(v)
        for u, w in graph.get(v, {}).items():
            nd = d + w
            if u not in dist or nd < dist[u]:
                dist[u] = nd
                heapq.heappush(heap, (nd, _skey(u), u))
    return dist


def spf_compute(db, self_addr, prio: int = 0):
    """Primary next hops from self toward every reachable destination.

    Returns ({dst: next_hop}, {dst: dist}).  Among equal-cost first hops
    the smallest neighbor address wins.
    """
    graph = db.graph(prio) if isinstance(db, Lsdb) else db
    if self_addr not in graph:
        return {}, {}
    dist_self = dijkstra(graph, self_addr)
    neighbors = sorted(graph.get(self_addr, {}), key=_skey)
    dist_from = {n: dijkstra(graph, n) for n in neighbors}
    next_hop = {}
    for dst, d in dist_self.items():
        if dst == self_addr:
            continue
        for n in neighbors:
            w = graph[self_addr][n]
            if dst in dist_from[n] and w + dist_from[n][dst] == d:
                next_hop[dst] = n
                break
    return next_hop, dist_self


def lfa_compute(db, self_addr, prio: int = 0, spf=None):
    """Loop-free alternates per destination, ordered after the primary.

    A neighbor n is an alternate for dst iff
    d(n, dst) < d(n, self) + d(self, dst): its shortest path to dst
    cannot come back through us.
    """
    graph = db.graph(prio) if isinstance(db, Lsdb) else db
    if spf is None:
        spf = spf_compute(graph, self_addr, prio)
    next_hop, dist_self = spf
    neighbors = sorted(graph.get(self_addr, {}), key=_skey)
    dist_from = {n: dijkstra(graph, n) for n in neighbors}
    lfas = {}
    for dst, primary in next_hop.items():
        cands = []
        for n in neighbors:
            if n == primary:
                continue
            dn = dist_from[n]
            if dst not in dn or self_addr not in dn:
                continue
            if dn[dst] < dn[self_addr] + dist_self[dst]:
                cands.append((dn[dst], _skey(n), n))
        lfas[dst] = [n for _, _, n in sorted(cands)]
    return lfas


def build_table(db, self_addr, prio: int = 0):
    """Forwarding entries {dst: [primary, lfa, ...]} for one priority."""
    spf = spf_compute(db, self_addr, prio)
    next_hop, _ = spf
    lfas = lfa_compute(db, self_addr, prio, spf)
    return {dst: [nh] + [a for a in lfas.get(dst, []) if a != nh]
            for dst, nh in next_hop.items()}


def _closure(H, vs):
    """Arcs actually traversable starting from vs under next-hop map H."""
    arcs = set()
    seen = {vs}
    stack = [vs]
    while stack:
        v = stack.pop()
        for u in H.get(v, ()):
            arcs.add((v, u))
            if u not in seen:
                seen.add(u)
                stack.append(u)
    return arcs


def _is_dag(vertices, arcs):
    out = {v: [] for v in vertices}
    indeg = {v: 0 for v in vertices}
    for v, u in arcs:
        out[v].append(u)
        indeg[u] += 1
    queue = [v for v in vertices if indeg[v] == 0]
    seen = 0
    while queue:
        v = queue.pop()
        seen += 1
        for u in out[v]:
            indeg[u] -= 1
            if indeg[u] == 0:
                queue.append(u)
    return seen == len(vertices)


def _reachable(graph, src, dst):
    stack, seen = [src], {src}
    while stack:
        v = stack.pop()
        if v == dst:
            return True
        for u in graph.get(v, {}):
            if u not in seen:
                seen.add(u)
                stack.append(u)
    return False


def check_routing_solution(graph, vs, vd, H) -> bool:
    """Decide whether H is a valid routing solution for (vs, vd) on graph.

    H maps each vertex to the set of neighbors it may hand a packet to.
    Checks, on the subgraph a packet can actually traverse from vs:
    acyclicity, vs as the unique pure source, vd as the unique pure sink,
    arc emptiness exactly when no path exists, and the equivalent
    distance formulation (strict decrease toward vd along every arc,
    with distance taken as longest remaining path).
    """
    if vs == vd:
        return True
    arcs = _closure(H, vs)
    path_exists = _reachable(graph, vs, vd)
    if not arcs:
        return not path_exists
    if not path_exists:
        return False

    vertices = {x for arc in arcs for x in arc}
    if not _is_dag(vertices, arcs):
        return False
    indeg = {v: 0 for v in vertices}
    outdeg = {v: 0 for v in vertices}
    for v, u in arcs:
        outdeg[v] += 1
        indeg[u] += 1
    only_out = {v for v in vertices if outdeg[v] > 0 and indeg[v] == 0}
    only_in = {v for v in vertices if indeg[v] > 0 and outdeg[v] == 0}
    if only_out != {vs} or only_in != {vd}:
        return False

    # distance formulation: longest remaining path to vd, strictly
    # decreasing along every arc (this also rejects dead-end branches)
    order = _topo_order(vertices, arcs)
    longest = {vd: 0}
    for v in reversed(order):
        if v == vd:
            continue
        succ = [longest[u] for (x, u) in arcs if x == v and u in longest]
        if len(succ) != outdeg[v]:
            return False        # some arc leads away from vd for good
        if succ:
            longest[v] = 1 + max(succ)
    return all(u in longest and v in longest and longest[u] < longest[v]
               for v, u in arcs)


def _topo_order(vertices, arcs):
    out = {v: [] for v in vertices}
    indeg = {v: 0 for v in vertices}
    for v, u in arcs:
        out[v].append(u)
        indeg[u] += 1
    queue = sorted((v for v in vertices if indeg[v] == 0), key=_skey)
    order = []
    while queue:
        v = queue.pop()
        order.append(v)
        for u in out[v]:
            indeg[u] -= 1
            if indeg[u] == 0:
                queue.append(u)
    return order
