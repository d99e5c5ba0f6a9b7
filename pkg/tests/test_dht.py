import hashlib
import struct

import pytest

from recnet.core import Address
from recnet.dht import (DhtNode, Contact, xor_distance, StaticDirectory,
                        ContactUnreachable, K)
from recnet.netsim import Simulator


class MeshTransport:
    """Delivers DHT messages between in-memory nodes with 1 ms latency."""

    def __init__(self, sim):
        self.sim = sim
        self.nodes = {}

    def register(self, node):
        self.nodes[node.addr] = node

    def for_node(self, addr):
        outer = self

        class _T:
            def send(self, dst_addr, payload):
                node = outer.nodes.get(dst_addr)
                if node is not None:
                    outer.sim.at(1, node.handle_message, payload)
        return _T()


def node_id_for(addr: Address) -> bytes:
    return hashlib.sha3_256(struct.pack(">I", addr.levels[0])).digest()


def build_mesh(sim, n):
    mesh = MeshTransport(sim)
    nodes = []
    for i in range(n):
        addr = Address.single(1000 + i)
        node = DhtNode(sim, node_id_for(addr), addr, mesh.for_node(addr))
        mesh.register(node)
        nodes.append(node)
    first = nodes[0]
    first.joined = True
    for node in nodes[1:]:
        sim.call(node.join(nodes[0].addr))
    return mesh, nodes


def key_for(text: str) -> bytes:
    return hashlib.sha3_256(text.encode()).digest()


def brute_k_closest(nodes, key, k=K):
    ids = sorted((xor_distance(n.node_id, key), n.node_id) for n in nodes)
    return [i for _, i in ids[:k]]


class TestBuckets:
    def test_bucket_placement(self):
        sim = Simulator()
        addr = Address.single(1)
        node = DhtNode(sim, node_id_for(addr), addr, None)
        other = node_id_for(Address.single(2))
        node.insert_contact(Contact(other, Address.single(2)))
        idx = (xor_distance(node.node_id, other)).bit_length() - 1
        assert [c.node_id for c in node.buckets[idx]] == [other]

    def test_k_closest_matches_brute_force_over_contacts(self):
        sim = Simulator(seed=3)
        _, nodes = build_mesh(sim, 16)
        for node in nodes:
            for probe in ("alpha", "bravo", "charlie"):
                key = key_for(probe)
                mine = [c.node_id for c in node.k_closest(key)]
                known = node.contacts()
                want = sorted((c.node_id for c in known),
                              key=lambda i: (xor_distance(i, key), i))[:K]
                assert mine == want
                assert all(any(c.node_id == i for c in known) for i in mine)


class TestStoreLookup:
    def test_register_then_query_from_any_member(self):
        sim = Simulator(seed=5)
        _, nodes = build_mesh(sim, 8)
        key = key_for("server")
        sim.call(nodes[2].put(key, nodes[2].addr))
        sim.run()
        for node in nodes:
            values = sim.call(node.get(key))
            assert values == {nodes[2].addr}

    def test_anycast_set(self):
        sim = Simulator(seed=6)
        _, nodes = build_mesh(sim, 8)
        key = key_for("any")
        sim.call(nodes[1].put(key, nodes[1].addr))
        sim.call(nodes[5].put(key, nodes[5].addr))
        sim.run()
        values = sim.call(nodes[0].get(key))
        assert values == {nodes[1].addr, nodes[5].addr}

    def test_unregister(self):
        sim = Simulator(seed=7)
        _, nodes = build_mesh(sim, 8)
        key = key_for("gone")
        sim.call(nodes[3].put(key, nodes[3].addr))
        sim.run()
        sim.call(nodes[3].remove(key, nodes[3].addr))
        sim.run()
        assert sim.call(nodes[6].get(key)) == set()

    def test_lookup_contacts_match_brute_force(self):
        sim = Simulator(seed=8)
        _, nodes = build_mesh(sim, 16)
        for probe in range(8):
            key = key_for("probe-%d" % probe)
            node = nodes[probe % len(nodes)]
            _, closest, _ = sim.call(node._lookup(key, False))
            got = [c.node_id for c in closest]
            assert got == brute_k_closest(nodes, key)

    def test_expiry(self):
        sim = Simulator(seed=9)
        _, nodes = build_mesh(sim, 4)
        key = key_for("ttl")
        sim.call(nodes[0].put(key, nodes[0].addr, ttl=100))
        sim.run()
        sim.run(until=sim.now + 200)
        assert sim.call(nodes[1].get(key)) == set()


class TestJoin:
    def test_dead_contact(self):
        sim = Simulator(seed=10)
        mesh = MeshTransport(sim)
        addr = Address.single(1)
        node = DhtNode(sim, node_id_for(addr), addr, mesh.for_node(addr))
        mesh.register(node)
        with pytest.raises(ContactUnreachable):
            sim.call(node.join(Address.single(99)))

    def test_all_pairs_after_enrolment(self):
        sim = Simulator(seed=11)
        _, nodes = build_mesh(sim, 8)
        keys = [key_for("svc-%d" % i) for i in range(8)]
        for i, key in enumerate(keys):
            sim.call(nodes[i].put(key, nodes[i].addr))
        sim.run()
        for node in nodes:
            for i, key in enumerate(keys):
                assert nodes[i].addr in sim.call(node.get(key))


class TestStaticDirectory:
    def test_flood_updates_idempotent(self):
        a, b = StaticDirectory(), StaticDirectory()
        origin = Address.single(7)
        key = key_for("x")
        upd = a.make_update(origin, "add", key, Address.single(7))
        assert b.apply_update(upd)
        assert not b.apply_update(upd)       # same seq: already seen
        assert b.get(key) == [Address.single(7)]

    def test_snapshot_sync(self):
        a, b = StaticDirectory(), StaticDirectory()
        origin = Address.single(9)
        a.local_add(key_for("one"), Address.single(1))
        a.local_add(key_for("two"), Address.single(2))
        for upd in a.snapshot_updates(origin):
            b.apply_update(upd)
        assert b.get(key_for("one")) == [Address.single(1)]
        assert b.get(key_for("two")) == [Address.single(2)]
