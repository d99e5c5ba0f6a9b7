"""Shared domain types: names, hashes, addresses, QoS and packet buffers.

Everything in here is a plain value type.  All wire encodings are
big-endian.  The only mutable type is PacketBuffer, which is owned by
exactly one pipeline stage at a time.
"""

import enum
import hashlib
import struct
import zlib


class RecnetError(Exception):
    """Base class for all errors raised by this package."""


class UnsupportedAlgo(RecnetError):
    pass


class LengthMismatch(RecnetError):
    pass


class HashAlgo(enum.Enum):
    SHA3_224 = "SHA3-224"
    SHA3_256 = "SHA3-256"
    SHA3_384 = "SHA3-384"
    SHA3_512 = "SHA3-512"
    MD5 = "MD5"
    CRC32 = "CRC32"


_HASHLIB = {
    HashAlgo.SHA3_224: hashlib.sha3_224,
    HashAlgo.SHA3_256: hashlib.sha3_256,
    HashAlgo.SHA3_384: hashlib.sha3_384,
    HashAlgo.SHA3_512: hashlib.sha3_512,
    HashAlgo.MD5: hashlib.md5,
}

DIGEST_LEN = {
    HashAlgo.SHA3_224: 28,
    HashAlgo.SHA3_256: 32,
    HashAlgo.SHA3_384: 48,
    HashAlgo.SHA3_512: 64,
    HashAlgo.MD5: 16,
    HashAlgo.CRC32: 4,
}


def name_bytes(name) -> bytes:
    """Coerce a name (str or bytes) to its raw bytes. Names are opaque."""
    if isinstance(name, str):
        name = name.encode("utf-8")
    if not isinstance(name, (bytes, bytearray)):
        raise TypeError("name must be str or bytes")
    if len(name) == 0:
        raise ValueError("name must be non-empty")
    return bytes(name)


class NameHash:
    """A hashed name: the only form a layer ever sees a name in."""

    __slots__ = ("algo", "digest")

    def __init__(self, algo: HashAlgo, digest: bytes):
        if len(digest) != DIGEST_LEN[algo]:
            raise ValueError("digest length does not match %s" % algo.value)
        self.algo = algo
        self.digest = bytes(digest)

    def hex(self) -> str:
        return self.digest.hex()

    def short(self) -> str:
        """First 8 hex characters, the conventional display form."""
        return self.digest.hex()[:8]

    def __eq__(self, other):
        return (isinstance(other, NameHash)
                and self.algo == other.algo and self.digest == other.digest)

    def __hash__(self):
        return hash((self.algo, self.digest))

    def __repr__(self):
        return "NameHash(%s, %s)" % (self.algo.value, self.short())


def hash_name(name, algo: HashAlgo = HashAlgo.SHA3_256) -> NameHash:
    """Hash the raw name bytes (no trailing terminator)."""
    raw = name_bytes(name)
    if algo is HashAlgo.CRC32:
        return NameHash(algo, struct.pack(">I", zlib.crc32(raw) & 0xFFFFFFFF))
    try:
        h = _HASHLIB[algo]
    except KeyError:
        raise UnsupportedAlgo(str(algo))
    return NameHash(algo, h(raw).digest())


class Address:
    """Compound name: one unsigned 32-bit level name per address level.

    Level names are ordered most-significant first; a value of 0 at a
    level means the node does not participate below that level.
    """

    __slots__ = ("levels",)

    def __init__(self, levels):
        levels = tuple(int(v) for v in levels)
        for v in levels:
            if not 0 <= v <= 0xFFFFFFFF:
                raise ValueError("level name out of u32 range")
        self.levels = levels

    @classmethod
    def parse(cls, text: str) -> "Address":
        return cls(int(p) for p in text.split("."))

    @classmethod
    def single(cls, value: int) -> "Address":
        return cls((value,))

    def __len__(self):
        return len(self.levels)

    def __eq__(self, other):
        return isinstance(other, Address) and self.levels == other.levels

    def __lt__(self, other):
        return self.levels < other.levels

    def __hash__(self):
        return hash(self.levels)

    def __repr__(self):
        return "Address(%s)" % str(self)

    def __str__(self):
        return ".".join(str(v) for v in self.levels)


def address_encode(addr: Address, level_count: int) -> bytes:
    if len(addr) != level_count:
        raise LengthMismatch("address has %d levels, layer uses %d"
                             % (len(addr), level_count))
    return struct.pack(">%dI" % level_count, *addr.levels)


def address_decode(data: bytes, level_count: int) -> Address:
    if len(data) != 4 * level_count:
        raise LengthMismatch("expected %d bytes, got %d"
                             % (4 * level_count, len(data)))
    return Address(struct.unpack(">%dI" % level_count, data))


class QosSpec:
    """Technology-agnostic QoS request, as the application states it."""

    __slots__ = ("delay", "bandwidth", "availability", "loss", "ber",
                 "in_order", "max_gap")

    def __init__(self, delay=0, bandwidth=0, availability=0,
                 loss=10 ** 9, ber=10 ** 9, in_order=False, max_gap=0):
        if availability > 12:
            raise ValueError("availability class of 9s capped at 12")
        self.delay = int(delay)              # ms
        self.bandwidth = int(bandwidth)      # bits/s
        self.availability = int(availability)
        self.loss = int(loss)                # packets per 10^9
        self.ber = int(ber)                  # bit errors per 10^9 bits
        self.in_order = bool(in_order)
        self.max_gap = int(max_gap)          # ms

    def copy(self) -> "QosSpec":
        return QosSpec(self.delay, self.bandwidth, self.availability,
                       self.loss, self.ber, self.in_order, self.max_gap)

    def encode(self) -> bytes:
        return struct.pack(">IQBIIBI", self.delay, self.bandwidth,
                           self.availability, self.loss, self.ber,
                           1 if self.in_order else 0, self.max_gap)

    WIRE_LEN = struct.calcsize(">IQBIIBI")

    @classmethod
    def decode(cls, data: bytes) -> "QosSpec":
        d, bw, av, loss, ber, ino, gap = struct.unpack(">IQBIIBI", data)
        return cls(d, bw, av, loss, ber, bool(ino), gap)

    def __eq__(self, other):
        return isinstance(other, QosSpec) and all(
            getattr(self, f) == getattr(other, f) for f in self.__slots__)

    def __repr__(self):
        return ("QosSpec(delay=%d, bw=%d, loss=%d, ber=%d, in_order=%s, "
                "max_gap=%d)" % (self.delay, self.bandwidth, self.loss,
                                 self.ber, self.in_order, self.max_gap))


class QosPreset(enum.Enum):
    RAW = "raw"
    RAW_NO_ERRORS = "raw_no_errors"
    BEST_EFFORT = "best_effort"
    VIDEO = "video"
    VOICE = "voice"
    DATA = "data"


def qos_preset(kind) -> QosSpec:
    """Return a fresh copy of one of the predefined QoS specs."""
    if isinstance(kind, str):
        kind = QosPreset(kind)
    return _PRESETS[kind].copy()


_PRESETS = {
    QosPreset.RAW: QosSpec(),
    QosPreset.RAW_NO_ERRORS: QosSpec(ber=0),
    QosPreset.BEST_EFFORT: QosSpec(in_order=True, ber=0),
    QosPreset.VOICE: QosSpec(delay=100, loss=10 ** 5, ber=0, in_order=True,
                             max_gap=100),
    QosPreset.VIDEO: QosSpec(delay=300, bandwidth=4 * 10 ** 6, loss=10 ** 5,
                             ber=0, in_order=True),
    QosPreset.DATA: QosSpec(loss=0, ber=0, in_order=True),
}


class FrcpConfig:
    """Transport configuration derived from a QoS spec and the layer."""

    __slots__ = ("enabled", "arq", "integrity_check", "fragmentation",
                 "reassembly", "flow_control", "mpl", "a_timer", "r_timer")

    def __init__(self, enabled=False, arq=False, integrity_check=False,
                 fragmentation=False, reassembly=False, flow_control=False,
                 mpl=4000, a_timer=200, r_timer=2000):
        if arq and not enabled:
            raise ValueError("arq requires frcp enabled")
        if flow_control and not enabled:
            raise ValueError("flow control requires frcp enabled")
        if a_timer > r_timer:
            raise ValueError("A bound must not exceed R bound")
        self.enabled = enabled
        self.arq = arq
        self.integrity_check = integrity_check
        self.fragmentation = fragmentation
        self.reassembly = reassembly
        self.flow_control = flow_control
        self.mpl = mpl          # ms
        self.a_timer = a_timer  # ms
        self.r_timer = r_timer  # ms

    @property
    def delta_t(self) -> int:
        """Connection-record lifetime bound: MPL + A + R."""
        return self.mpl + self.a_timer + self.r_timer

    def __repr__(self):
        return ("FrcpConfig(enabled=%s, arq=%s, integrity=%s, frag=%s, "
                "fc=%s)" % (self.enabled, self.arq, self.integrity_check,
                            self.fragmentation, self.flow_control))


# Defaults for the simulator timescale.
DEFAULT_A = 200
DEFAULT_R = 2000
DEFAULT_MPL = 4000


def qos_to_frcp_config(qs: QosSpec, layer=None) -> FrcpConfig:
    """Translate a QoS spec into the transport configuration.

    Three rules: in-order delivery gates the whole protocol, zero loss
    gates ARQ, zero bit errors gates the integrity check.  The MPL bound
    comes from the layer the flow runs over.
    """
    mpl = layer.mpl if layer is not None else DEFAULT_MPL
    integrity = qs.ber == 0
    if not qs.in_order:
        return FrcpConfig(enabled=False, integrity_check=integrity, mpl=mpl)
    return FrcpConfig(enabled=True,
                      arq=qs.loss == 0,
                      integrity_check=integrity,
                      fragmentation=True,
                      reassembly=True,
                      flow_control=True,
                      mpl=mpl)


class DirectoryPolicy(enum.Enum):
    DHT = "dht"
    STATIC = "static"


class RoutingPolicy(enum.Enum):
    SPF = "spf"
    LFA = "lfa"


class LayerConfig:
    """Per-layer constants, agreed at bootstrap and copied at enrolment."""

    __slots__ = ("layer_name", "hash_algo", "level_count", "ttl_max", "mps",
                 "mpl", "directory_policy", "routing_policy")

    def __init__(self, layer_name, hash_algo=HashAlgo.SHA3_256,
                 level_count=1, ttl_max=60, mps=1024, mpl=DEFAULT_MPL,
                 directory_policy=DirectoryPolicy.DHT,
                 routing_policy=RoutingPolicy.LFA):
        if ttl_max < 1:
            raise ValueError("ttl_max must be at least 1")
        if mps < 64:
            raise ValueError("mps must be at least 64 bytes")
        self.layer_name = name_bytes(layer_name)
        self.hash_algo = hash_algo
        self.level_count = int(level_count)
        self.ttl_max = int(ttl_max)
        self.mps = int(mps)
        self.mpl = int(mpl)
        self.directory_policy = directory_policy
        self.routing_policy = routing_policy

    def hash(self, name) -> NameHash:
        return hash_name(name, self.hash_algo)


class PacketBuffer:
    """Fixed-capacity byte buffer with reserved head and tail room.

    Prepending a header or appending a trailer never moves the payload
    bytes; the buffer shrinks its reserved rooms instead.
    """

    __slots__ = ("_buf", "_start", "_end")

    def __init__(self, capacity: int, head_room: int, payload: bytes = b""):
        if head_room + len(payload) > capacity:
            raise ValueError("head room plus payload exceeds capacity")
        self._buf = bytearray(capacity)
        self._start = head_room
        self._end = head_room + len(payload)
        self._buf[self._start:self._end] = payload

    @classmethod
    def for_payload(cls, payload: bytes, head_room: int = 64,
                    tail_room: int = 16) -> "PacketBuffer":
        return cls(head_room + len(payload) + tail_room, head_room, payload)

    @property
    def capacity(self) -> int:
        return len(self._buf)

    @property
    def head_room(self) -> int:
        return self._start

    @property
    def tail_room(self) -> int:
        return len(self._buf) - self._end

    def __len__(self):
        return self._end - self._start

    def payload(self) -> bytes:
        return bytes(self._buf[self._start:self._end])

    def prepend(self, header: bytes):
        if len(header) > self._start:
            raise BufferError("not enough head room")
        self._start -= len(header)
        self._buf[self._start:self._start + len(header)] = header

    def append(self, trailer: bytes):
        if len(trailer) > self.tail_room:
            raise BufferError("not enough tail room")
        self._buf[self._end:self._end + len(trailer)] = trailer
        self._end += len(trailer)

    def strip_head(self, n: int) -> bytes:
        if n > len(self):
            raise BufferError("strip beyond payload")
        out = bytes(self._buf[self._start:self._start + n])
        self._start += n
        return out

    def strip_tail(self, n: int) -> bytes:
        if n > len(self):
            raise BufferError("strip beyond payload")
        out = bytes(self._buf[self._end - n:self._end])
        self._end -= n
        return out

    def peek(self, n: int) -> bytes:
        return bytes(self._buf[self._start:self._start + n])

    def copy(self) -> "PacketBuffer":
        pb = PacketBuffer(self.capacity, self._start, b"")
        pb._buf[:] = self._buf
        pb._end = self._end
        return pb

    def __repr__(self):
        return "PacketBuffer(head=%d, len=%d, tail=%d)" % (
            self.head_room, len(self), self.tail_room)


INTEGRITY_TRAILER_LEN = 4


def add_integrity(pkt: PacketBuffer):
    """Append a CRC32 trailer covering the current packet contents."""
    pkt.append(struct.pack(">I", zlib.crc32(pkt.payload()) & 0xFFFFFFFF))


def check_integrity(pkt: PacketBuffer) -> bool:
    """Verify and strip the CRC32 trailer; False means corrupt."""
    if len(pkt) < INTEGRITY_TRAILER_LEN:
        return False
    trailer = pkt.strip_tail(INTEGRITY_TRAILER_LEN)
    want, = struct.unpack(">I", trailer)
    return (zlib.crc32(pkt.payload()) & 0xFFFFFFFF) == want
