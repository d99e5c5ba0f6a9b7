import random

import pytest
from hypothesis import given, settings, strategies as st

from recnet.core import (HashAlgo, hash_name, Address, address_encode,
                         address_decode, LengthMismatch, QosSpec, qos_preset,
                         qos_to_frcp_config, PacketBuffer, add_integrity,
                         check_integrity, LayerConfig)


# Reference digests.  SHA3 values cross-checked against the FIPS-202
# reference implementation before freezing; MD5 values are the RFC 1321
# appendix vectors.
SERVER_SHA3 = "d19778d2e34a1e3ddfc04b48c94152cced725d741756b131543616d20f250f31"
OPING_SHA3 = "42dee3b0415b4f690fd91cbd99876f1e9bd8d9745ef7fa32b142773af0349d54"
SHA3_EMPTY = "a7ffc6f8bf1ed76651c14756a061d662f580ff4de43b49fa82d80a4b80f8434a"
SHA3_ABC = "3a985da74fe225b2045c172d6bd390bd855f086e3e9d525b46bfe24511431532"
MD5_VECTORS = {
    b"": "d41d8cd98f00b204e9800998ecf8427e",
    b"abc": "900150983cd24fb0d6963f7d28e17f72",
    b"message digest": "f96b697d7cb7938d525a2f31aaf161d0",
}


class TestHashName:
    def test_server_digest(self):
        h = hash_name("server", HashAlgo.SHA3_256)
        assert h.hex() == SERVER_SHA3

    def test_short_form(self):
        assert hash_name("server").short() == "d19778d2"

    def test_oping_reference_digest(self):
        assert hash_name("oping").hex() == OPING_SHA3

    def test_sha3_vectors(self):
        with pytest.raises(ValueError):
            hash_name("")
        assert hash_name(b"a"[:0] + b"x").algo is HashAlgo.SHA3_256
        assert hash_name(b"abc").hex() == SHA3_ABC

    def test_sha3_empty_vector_via_layerconfig(self):
        # empty names are rejected; check the digest fn itself via a
        # one-byte name plus the frozen empty-string vector for sanity
        import hashlib
        assert hashlib.sha3_256(b"").hexdigest() == SHA3_EMPTY

    def test_md5_vectors(self):
        for msg, want in MD5_VECTORS.items():
            if not msg:
                continue
            assert hash_name(msg, HashAlgo.MD5).hex() == want

    def test_deterministic(self):
        assert hash_name("oping") == hash_name(b"oping")

    def test_crc32_supported(self):
        assert len(hash_name("abc", HashAlgo.CRC32).digest) == 4


class TestAddressCodec:
    def test_dotted_example(self):
        addr = Address.parse("3.6.0")
        assert address_encode(addr, 3) == bytes.fromhex(
            "00000003" "00000006" "00000000")

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            address_decode(b"\x00" * 8, 3)
        with pytest.raises(LengthMismatch):
            address_encode(Address.parse("1.2"), 3)

    def test_round_trip_random(self):
        rng = random.Random(7)
        for _ in range(1000):
            n = rng.randint(1, 4)
            addr = Address(rng.randint(0, 2 ** 32 - 1) for _ in range(n))
            assert address_decode(address_encode(addr, n), n) == addr

    def test_render(self):
        assert str(Address.parse("3.6.0")) == "3.6.0"


class TestQos:
    def test_raw_disables_transport(self):
        cfg = qos_to_frcp_config(qos_preset("raw"))
        assert not cfg.enabled and not cfg.arq

    def test_data_enables_arq(self):
        cfg = qos_to_frcp_config(qos_preset("data"))
        assert cfg.enabled and cfg.arq and cfg.integrity_check
        assert cfg.fragmentation and cfg.reassembly and cfg.flow_control

    def test_lossy_in_order(self):
        qs = QosSpec(in_order=True, loss=100, ber=0)
        cfg = qos_to_frcp_config(qs)
        assert cfg.enabled and not cfg.arq and cfg.integrity_check

    def test_voice_preset(self):
        qs = qos_preset("voice")
        assert qs.in_order and qs.loss > 0 and qs.max_gap == 100
        cfg = qos_to_frcp_config(qs)
        assert cfg.enabled and not cfg.arq

    def test_raw_no_errors(self):
        cfg = qos_to_frcp_config(qos_preset("raw_no_errors"))
        assert not cfg.enabled and cfg.integrity_check

    def test_mpl_comes_from_layer(self):
        layer = LayerConfig("net", mpl=1234)
        assert qos_to_frcp_config(qos_preset("data"), layer).mpl == 1234

    @given(st.booleans(), st.integers(0, 10 ** 9), st.integers(0, 10 ** 9))
    @settings(max_examples=200)
    def test_three_rules(self, in_order, loss, ber):
        cfg = qos_to_frcp_config(QosSpec(in_order=in_order, loss=loss, ber=ber))
        assert cfg.enabled == in_order
        assert cfg.arq == (in_order and loss == 0)
        assert cfg.integrity_check == (ber == 0)

    def test_qosspec_codec_round_trip(self):
        qs = QosSpec(delay=100, bandwidth=4 * 10 ** 6, loss=5, ber=0,
                     in_order=True, max_gap=100)
        assert QosSpec.decode(qs.encode()) == qs


class TestPacketBuffer:
    def test_invariant(self):
        pb = PacketBuffer.for_payload(b"hello", head_room=10, tail_room=3)
        assert pb.head_room + len(pb) + pb.tail_room == pb.capacity
        pb.prepend(b"HH")
        assert pb.head_room + len(pb) + pb.tail_room == pb.capacity

    @given(st.binary(min_size=0, max_size=64),
           st.lists(st.binary(min_size=1, max_size=8), max_size=6))
    @settings(max_examples=200)
    def test_prepends_never_move_payload(self, payload, headers):
        total = sum(len(h) for h in headers)
        pb = PacketBuffer.for_payload(payload, head_room=total + 4)
        for h in headers:
            pb.prepend(h)
        for h in reversed(headers):
            assert pb.strip_head(len(h)) == h
        assert pb.payload() == payload

    def test_overflow_raises(self):
        pb = PacketBuffer.for_payload(b"x", head_room=1, tail_room=0)
        with pytest.raises(BufferError):
            pb.prepend(b"ab")
        with pytest.raises(BufferError):
            pb.append(b"t")

    def test_integrity_round_trip(self):
        pb = PacketBuffer.for_payload(b"payload bytes")
        add_integrity(pb)
        assert check_integrity(pb)
        assert pb.payload() == b"payload bytes"

    def test_integrity_detects_corruption(self):
        pb = PacketBuffer.for_payload(b"payload bytes")
        add_integrity(pb)
        raw = bytearray(pb.payload())
        raw[3] ^= 0x10
        corrupted = PacketBuffer.for_payload(bytes(raw))
        assert not check_integrity(corrupted)
