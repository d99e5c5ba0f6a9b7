"""Name-hash resolution inside a unicast layer.

Two policies: a Kademlia-style DHT and a flooded static table.  The DHT
keyspace is the digest space of the layer's hash algorithm; node ids are
the hash of the node's address bytes.  All messages carry the sender's
id and address explicitly because the data-transfer header has no
source address field.
"""

import struct

from .core import Address, RecnetError
from .netsim import TimeoutExpired

K = 8                   # replication / bucket size
ALPHA = 3               # lookup parallelism
RECORD_TTL = 600_000    # ms
RPC_TIMEOUT = 2_000     # ms

MSG_FIND_NODE = 0
MSG_FIND_VALUE = 1
MSG_STORE = 2
MSG_PING = 3
MSG_RESPONSE = 4


class StoreUnreachable(RecnetError):
    pass


class ContactUnreachable(RecnetError):
    pass


class NotFound(RecnetError):
    pass


class Contact:
    __slots__ = ("node_id", "addr")

    def __init__(self, node_id: bytes, addr: Address):
        self.node_id = node_id
        self.addr = addr

    def __repr__(self):
        return "Contact(%s, %s)" % (self.node_id.hex()[:8], self.addr)


def xor_distance(a: bytes, b: bytes) -> int:
    return int.from_bytes(a, "big") ^ int.from_bytes(b, "big")


def _encode_addr(addr: Address) -> bytes:
    return struct.pack(">B%dI" % len(addr), len(addr), *addr.levels)


def _decode_addr(data: bytes, off: int):
    n = data[off]
    levels = struct.unpack(">%dI" % n, data[off + 1:off + 1 + 4 * n])
    return Address(levels), off + 1 + 4 * n


def _encode_blob(b: bytes) -> bytes:
    return struct.pack(">H", len(b)) + b


def _decode_blob(data: bytes, off: int):
    ln, = struct.unpack(">H", data[off:off + 2])
    return data[off + 2:off + 2 + ln], off + 2 + ln


class DhtNode:
    """One DHT participant; passive apart from RPCs it is asked to run.

    ``transport.send(dst_addr, payload)`` must deliver ``payload`` to the
    DhtNode at ``dst_addr`` (its ``handle_message`` gets called).
    """

    def __init__(self, sim, node_id: bytes, addr: Address, transport,
                 k: int = K, alpha: int = ALPHA):
        self.sim = sim
        self.node_id = node_id
        self.addr = addr
        self.transport = transport
        self.k = k
        self.alpha = alpha
        self.bits = len(node_id) * 8
        self.buckets = [[] for _ in range(self.bits)]
        self.store = {}             # key -> {addr: expires_at}
        self.joined = False
        self._next_msg = 1
        self._pending = {}          # msg_id -> Future

    # -- routing table --------------------------------------------------

    def _bucket_index(self, other_id: bytes) -> int:
        d = xor_distance(self.node_id, other_id)
        return d.bit_length() - 1

    def insert_contact(self, contact: Contact):
        if contact.node_id == self.node_id:
            return
        idx = self._bucket_index(contact.node_id)
        bucket = self.buckets[idx]
        for i, c in enumerate(bucket):
            if c.node_id == contact.node_id:
                bucket.pop(i)
                bucket.append(contact)
                return
        if len(bucket) < self.k:
            bucket.append(contact)

    def contacts(self):
        out = []
        for bucket in self.buckets:
            out.extend(bucket)
        return out

    def k_closest(self, key: bytes, include_self=False):
        cands = self.contacts()
        if include_self:
            cands = cands + [Contact(self.node_id, self.addr)]
        cands.sort(key=lambda c: (xor_distance(c.node_id, key), c.node_id))
        return cands[:self.k]

    # -- wire ------------------------------------------------------------

    def _head(self, msg_type, msg_id) -> bytes:
        return (bytes([msg_type]) + struct.pack(">I", msg_id)
                + _encode_blob(self.node_id) + _encode_addr(self.addr))

    @staticmethod
    def _parse_head(data):
        msg_type = data[0]
        msg_id, = struct.unpack(">I", data[1:5])
        sender_id, off = _decode_blob(data, 5)
        sender_addr, off = _decode_addr(data, off)
        return msg_type, msg_id, Contact(sender_id, sender_addr), off

    def _rpc(self, contact: Contact, body_type, body: bytes):
        msg_id = self._next_msg
        self._next_msg += 1
        fut = self.sim.future()
        self._pending[msg_id] = fut
        self.transport.send(contact.addr,
                            self._head(body_type, msg_id) + body)
        return msg_id, fut

    def handle_message(self, data: bytes):
        msg_type, msg_id, sender, off = self._parse_head(data)
        self.insert_contact(sender)
        if msg_type == MSG_RESPONSE:
            fut = self._pending.pop(msg_id, None)
            if fut is not None:
                fut.resolve(self._parse_response(data, off))
            return
        if msg_type == MSG_PING:
            self._respond(sender, msg_id, [], [])
        elif msg_type == MSG_FIND_NODE:
            key, _ = _decode_blob(data, off)
            self._respond(sender, msg_id, self.k_closest(key,
                                                         include_self=True), [])
        elif msg_type == MSG_FIND_VALUE:
            key, _ = _decode_blob(data, off)
            values = self._local_values(key)
            self._respond(sender, msg_id,
                          self.k_closest(key, include_self=True), values)
        elif msg_type == MSG_STORE:
            key, off = _decode_blob(data, off)
            value_addr, off = _decode_addr(data, off)
            ttl, = struct.unpack(">I", data[off:off + 4])
            self.store.setdefault(key, {})[value_addr] = self.sim.now + ttl
        else:
            pass    # unknown message types are ignored

    def _respond(self, sender, msg_id, contacts, values):
        body = bytes([1 if values else 0, len(contacts)])
        for c in contacts:
            body += _encode_blob(c.node_id) + _encode_addr(c.addr)
        body += bytes([len(values)])
        for addr in values:
            body += _encode_addr(addr)
        self.transport.send(sender.addr,
                            self._head(MSG_RESPONSE, msg_id) + body)

    @staticmethod
    def _parse_response(data, off):
        has_value = data[off]
        n = data[off + 1]
        off += 2
        contacts = []
        for _ in range(n):
            node_id, off = _decode_blob(data, off)
            addr, off = _decode_addr(data, off)
            contacts.append(Contact(node_id, addr))
        nv = data[off]
        off += 1
        values = []
        for _ in range(nv):
            addr, off = _decode_addr(data, off)
            values.append(addr)
        return has_value, contacts, values

    def _local_values(self, key):
        vals = self.store.get(key, {})
        live = sorted(a for a, exp in vals.items() if exp > self.sim.now)
        return live

    # -- iterative operations ---------------------------------------------

    def _lookup(self, key: bytes, find_value: bool):
        """Iterative lookup; returns (values, k_closest_contacted, all_contacted)."""
        shortlist = {c.node_id: c for c in self.k_closest(key)}
        queried = {self.node_id: Contact(self.node_id, self.addr)}
        values = set(self._local_values(key)) if find_value else set()
        msg = MSG_FIND_VALUE if find_value else MSG_FIND_NODE
        while True:
            best = sorted(shortlist.values(),
                          key=lambda c: (xor_distance(c.node_id, key),
                                         c.node_id))[:self.k]
            cands = [c for c in best if c.node_id not in queried]
            if not cands or (values and find_value):
                break
            round_futs = []
            for c in cands[:self.alpha]:
                queried[c.node_id] = c
                round_futs.append(self._rpc(c, msg, _encode_blob(key)))
            for msg_id, fut in round_futs:
                try:
                    has_value, contacts, vals = yield from \
                        self.sim.await_(fut, RPC_TIMEOUT)
                except TimeoutExpired:
                    self._pending.pop(msg_id, None)
                    continue
                for c in contacts:
                    if c.node_id != self.node_id:
                        shortlist.setdefault(c.node_id, c)
                        self.insert_contact(c)
                values.update(vals)
        closest_queried = sorted(
            (c for c in queried.values()),
            key=lambda c: (xor_distance(c.node_id, key), c.node_id))[:self.k]
        return values, closest_queried, queried

    def join(self, bootstrap_addr: Address):
        """Kademlia JOIN: ping the contact, then look ourselves up."""
        boot = Contact(b"\x00" * len(self.node_id), bootstrap_addr)
        msg_id, fut = self._rpc(boot, MSG_PING, b"")
        try:
            yield from self.sim.await_(fut, RPC_TIMEOUT)
        except TimeoutExpired:
            self._pending.pop(msg_id, None)
            raise ContactUnreachable(str(bootstrap_addr))
        yield from self._lookup(self.node_id, False)
        self.joined = True

    def put(self, key: bytes, addr: Address, ttl: int = RECORD_TTL):
        """Store addr under key at the k closest nodes."""
        _, closest, _ = yield from self._lookup(key, False)
        targets = closest if closest else []
        if not targets and not self.joined:
            # a layer of one: keep it locally
            self.store.setdefault(key, {})[addr] = self.sim.now + ttl
            return
        body = _encode_blob(key) + _encode_addr(addr) + struct.pack(">I", ttl)
        stored_here = False
        for c in targets:
            if c.node_id == self.node_id:
                self.store.setdefault(key, {})[addr] = self.sim.now + ttl
                stored_here = True
            else:
                self._rpc(c, MSG_STORE, body)    # fire and forget
        if self._closer_than_worst(key, targets) and not stored_here:
            self.store.setdefault(key, {})[addr] = self.sim.now + ttl

    def _closer_than_worst(self, key, targets):
        if len(targets) < self.k:
            return True
        worst = max(xor_distance(c.node_id, key) for c in targets)
        return xor_distance(self.node_id, key) < worst

    def remove(self, key: bytes, addr: Address):
        """Unregister: overwrite the record with an expired entry."""
        _, closest, _ = yield from self._lookup(key, False)
        body = _encode_blob(key) + _encode_addr(addr) + struct.pack(">I", 0)
        for c in closest:
            if c.node_id == self.node_id:
                rec = self.store.get(key, {})
                rec.pop(addr, None)
            else:
                self._rpc(c, MSG_STORE, body)
        rec = self.store.get(key, {})
        rec.pop(addr, None)

    def get(self, key: bytes):
        """Resolve a key to its set of addresses."""
        values, _, _ = yield from self._lookup(key, True)
        return values


class StaticDirectory:
    """Flood-synchronised table: every member holds the full mapping."""

    def __init__(self):
        self.table = {}         # key -> {addr: True}
        self.seq = 0            # our own update counter
        self.seen = {}          # origin addr -> last seq applied

    def local_add(self, key, addr):
        self.table.setdefault(key, {})[addr] = True

    def local_del(self, key, addr):
        self.table.get(key, {}).pop(addr, None)

    def get(self, key):
        return sorted(self.table.get(key, {}))

    def make_update(self, origin: Address, op: str, key: bytes,
                    addr: Address) -> bytes:
        self.seq += 1
        return (bytes([1 if op == "add" else 0])
                + _encode_addr(origin) + struct.pack(">Q", self.seq)
                + _encode_blob(key) + _encode_addr(addr))

    def apply_update(self, data: bytes) -> bool:
        """Merge a flooded update; True when it was new (re-flood it)."""
        op = data[0]
        origin, off = _decode_addr(data, 1)
        seq, = struct.unpack(">Q", data[off:off + 8])
        off += 8
        key, off = _decode_blob(data, off)
        addr, _ = _decode_addr(data, off)
        last = self.seen.get(origin, 0)
        if seq <= last:
            return False
        self.seen[origin] = seq
        if op:
            self.local_add(key, addr)
        else:
            self.local_del(key, addr)
        return True

    def snapshot_updates(self, origin: Address):
        """Full-state updates for synchronising a new management peer."""
        out = []
        for key in sorted(self.table):
            for addr in sorted(self.table[key]):
                out.append(self.make_update(origin, "add", key, addr))
        return out
