from __future__ import annotations

import itertools
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tlora.frame_codec import (
    CHUNK_ACK, HEADER_LEN, L_MAX, MAGIC, OVERHEAD, BadKind, BadMagic, Chunk, Complete, CrcMismatch,
    Delivered, EmitAck, EmptyPayload, Failed, Incomplete, Inconsistent, LengthMismatch, LoRaFrame,
    MessageKind, MessageReady, OrderedInbox, OversizePayload, PayloadMessage, ReassemblyStore,
    RetryPolicy, TooManyChunks, ack_frame, chunk_count, crc16_ccitt_false, decode_frame, encode_frame,
    fragment, on_frame, reassemble, reliable_send,
)


def crc_bitwise(data: bytes) -> int:
    """Textbook MSB-first CRC-16, poly 0x1021, init 0xFFFF."""
    crc = 0xFFFF
    for byte in data:
        crc ^= byte << 8
        for _ in range(8):
            crc = ((crc << 1) ^ 0x1021) if crc & 0x8000 else (crc << 1)
            crc &= 0xFFFF
    return crc


class TestCrc:
    def test_check_value(self):
        assert crc16_ccitt_false(b"123456789") == 0x29B1

    @given(st.binary(max_size=300))
    def test_matches_bitwise_reference(self, data):
        assert crc16_ccitt_false(data) == crc_bitwise(data)


class TestFragment:
    def test_55_bytes_single_chunk(self):
        chunks = fragment(b"a" * 55)
        assert [(c.chunk_index, c.total_chunks, len(c.data)) for c in chunks] == [(1, 1, 55)]

    def test_exact_multiple(self):
        assert [len(c.data) for c in fragment(b"x" * 400, 200)] == [200, 200]

    def test_one_over(self):
        assert [len(c.data) for c in fragment(b"x" * 401, 200)] == [200, 200, 1]

    def test_empty_rejected(self):
        with pytest.raises(EmptyPayload):
            fragment(b"")

    def test_too_many_chunks(self):
        with pytest.raises(TooManyChunks):
            fragment(b"x" * (255 * L_MAX + 1))

    def test_message_carries_its_id(self):
        msg = PayloadMessage(42, MessageKind.TLS_DATA, 3, b"y" * 250)
        assert {c.payload_id for c in fragment(msg)} == {42}

    @given(st.integers(1, 255 * L_MAX), st.integers(1, 255))
    def test_chunk_count_law(self, size, l_max):
        if -(-size // l_max) > 255:
            return
        chunks = fragment(bytes(size), l_max)
        assert len(chunks) == chunk_count(size, l_max) == -(-size // l_max)
        last = size % l_max or l_max
        assert len(chunks[-1].data) == last
        assert all(len(c.data) == l_max for c in chunks[:-1])


class TestReassemble:
    def test_any_order(self):
        data = bytes(range(256)) * 3
        chunks = fragment(data)
        for perm in itertools.permutations(chunks):
            assert reassemble(perm) == Complete(data)

    def test_missing_index(self):
        chunks = fragment(b"z" * 600)
        assert reassemble([chunks[0], chunks[2]]) == Incomplete(frozenset({2}))

    def test_brute_force_duplicates_small_k(self):
        # every multiset of indices with at most one duplicate, in every order, for k <= 4
        for k in range(1, 5):
            data = bytes(random.Random(k).randbytes(50 * k - 7))
            chunks = fragment(data, 50)
            for dup in range(k):
                seq = chunks + [chunks[dup]]
                for perm in itertools.permutations(seq):
                    assert reassemble(perm) == Complete(data)
            for missing in range(k if k > 1 else 0):
                kept = [c for c in chunks if c.chunk_index != missing + 1]
                assert reassemble(kept) == Incomplete(frozenset({missing + 1}))

    def test_conflicting_duplicate(self):
        a, b = fragment(b"q" * 300)
        bad = Chunk(b.payload_id, b.total_chunks, b.chunk_index, b"different")
        assert isinstance(reassemble([a, b, bad]), Inconsistent)

    def test_total_disagrees(self):
        a, b = fragment(b"q" * 300)
        assert isinstance(reassemble([a, Chunk(0, 3, 2, b.data)]), Inconsistent)

    @settings(max_examples=200)
    @given(st.binary(min_size=1, max_size=5000), st.integers(1, 255), st.randoms(use_true_random=False))
    def test_round_trip_shuffled_with_duplicates(self, data, l_max, rnd):
        if chunk_count(len(data), l_max) > 255:
            return
        chunks = fragment(data, l_max)
        seq = chunks + [rnd.choice(chunks) for _ in range(rnd.randrange(4))]
        rnd.shuffle(seq)
        assert reassemble(seq) == Complete(data)


frame_strategy = st.builds(
    LoRaFrame,
    kind=st.sampled_from([int(k) for k in MessageKind] + [CHUNK_ACK]),
    session_id=st.integers(0, 255),
    payload_id=st.integers(0, 0xFFFF),
    total_chunks=st.integers(0, 255),
    chunk_index=st.integers(0, 255),
    payload=st.binary(max_size=L_MAX),
)


class TestWire:
    def test_ack_frame_is_header_only(self):
        raw = ack_frame(1, 7, 3, 2)
        assert len(raw) == 10
        assert raw[0] == MAGIC
        assert raw[HEADER_LEN - 1] == 0          # length field
        f = decode_frame(raw)
        assert f.is_ack and f.payload_id == 7 and f.chunk_index == 2 and f.payload == b""

    def test_full_chunk_frame(self):
        chunk = fragment(b"p" * 200)[0]
        assert len(encode_frame(chunk, MessageKind.TLS_DATA, 1)) == 200 + OVERHEAD == 210

    def test_oversize(self):
        with pytest.raises(OversizePayload):
            encode_frame(LoRaFrame(MessageKind.TLS_DATA, 0, 0, 1, 1, b"x" * 201))

    def test_truncated(self):
        raw = ack_frame(0, 0, 1, 1)
        with pytest.raises(LengthMismatch):
            decode_frame(raw[:9])

    def test_length_field_disagrees(self):
        raw = encode_frame(LoRaFrame(MessageKind.TLS_DATA, 0, 0, 1, 1, b"abc"))
        with pytest.raises(LengthMismatch):
            decode_frame(raw + b"\x00")

    def test_corrupted_crc(self):
        raw = bytearray(encode_frame(LoRaFrame(MessageKind.DNS_QUERY, 2, 5, 1, 1, b"api.test")))
        raw[-1] ^= 0xFF
        with pytest.raises(CrcMismatch):
            decode_frame(bytes(raw))

    def test_bad_magic(self):
        raw = bytearray(ack_frame(0, 0, 1, 1))
        raw[0] = 0x00
        with pytest.raises(BadMagic):
            decode_frame(bytes(raw))

    def test_unknown_kind(self):
        with pytest.raises(BadKind):
            encode_frame(LoRaFrame(0x42, 0, 0, 1, 1, b"x"))

    @given(frame_strategy)
    def test_round_trip(self, frame):
        assert decode_frame(encode_frame(frame)) == frame

    @settings(max_examples=25)
    @given(frame_strategy)
    def test_any_single_bit_flip_rejected(self, frame):
        raw = encode_frame(frame)
        for bit in range(len(raw) * 8):
            buf = bytearray(raw)
            buf[bit // 8] ^= 1 << (bit % 8)
            with pytest.raises(ValueError):
                decode_frame(bytes(buf))


class TestOnFrame:
    def _frames(self, k: int, session: int = 1, pid: int = 9):
        data = bytes(range(200)) * k
        msg = PayloadMessage(pid, MessageKind.TLS_DATA, session, data[: 200 * k - 3])
        return msg, [decode_frame(encode_frame(c, msg.kind, session)) for c in fragment(msg)]

    def test_first_of_five_accumulates(self):
        store = ReassemblyStore()
        _, frames = self._frames(5)
        out = on_frame(frames[0], store)
        assert out == [EmitAck(1, 9, 5, 1)]
        assert store.holding(1, 9) == 1

    def test_completion_then_duplicate(self):
        store = ReassemblyStore()
        msg, frames = self._frames(3)
        on_frame(frames[0], store)
        on_frame(frames[2], store)
        out = on_frame(frames[1], store)
        assert out == [EmitAck(1, 9, 3, 2), MessageReady(msg)]
        assert on_frame(frames[1], store) == [EmitAck(1, 9, 3, 2)]

    def test_ack_frames_ignored(self):
        assert on_frame(decode_frame(ack_frame(1, 2, 3, 1)), ReassemblyStore()) == []

    def test_emit_ack_encodes(self):
        assert decode_frame(EmitAck(4, 5, 6, 2).frame()).is_ack

    def test_completed_id_forgotten_after_linger(self):
        store = ReassemblyStore(linger=1.0)
        msg, frames = self._frames(1)
        assert MessageReady(msg) in on_frame(frames[0], store, now=0.0)
        assert MessageReady(msg) in on_frame(frames[0], store, now=5.0)

    def test_stale_partial_evicted(self):
        store = ReassemblyStore(stale_after=30.0)
        _, frames = self._frames(2)
        on_frame(frames[0], store, now=0.0)
        on_frame(self._frames(1, pid=10)[1][0], store, now=31.0)
        assert store.holding(1, 9) == 0


class TestOrderedInbox:
    def test_reorders(self):
        box = OrderedInbox()
        m = [PayloadMessage(i, MessageKind.TLS_DATA, 1, bytes([i])) for i in range(3)]
        assert box.push(m[1]) == []
        assert box.push(m[2]) == []
        assert box.push(m[0]) == m
        assert box.push(m[1]) == []    # late duplicate

    def test_every_arrival_order(self):
        m = [PayloadMessage(i, MessageKind.TLS_DATA, 1, bytes([i])) for i in range(4)]
        for perm in itertools.permutations(m):
            box = OrderedInbox()
            out = [x for msg in perm for x in box.push(msg)]
            assert out == m

    def test_wraps(self):
        box = OrderedInbox(first_id=0xFFFF)
        a = PayloadMessage(0xFFFF, MessageKind.TLS_DATA, 1, b"a")
        b = PayloadMessage(0, MessageKind.TLS_DATA, 1, b"b")
        assert box.push(b) == []
        assert box.push(a) == [a, b]


class ScriptedPort:
    """Frame port backed by a real receiver; ``drop`` decides per transmission whether it is lost."""

    def __init__(self, drop=lambda n, frame: False):
        self.store = ReassemblyStore()
        self.drop = drop
        self.sent: list[LoRaFrame] = []
        self.delivered: list[PayloadMessage] = []

    def exchange(self, frame: bytes, timeout: float):
        n = len(self.sent)
        self.sent.append(decode_frame(frame))
        if self.drop(n, self.sent[-1]):
            return None
        reply = None
        for action in on_frame(decode_frame(frame), self.store):
            if isinstance(action, EmitAck):
                reply = action.frame()
            else:
                self.delivered.append(action.message)
        return reply


class TestReliableSend:
    msg = PayloadMessage(3, MessageKind.TLS_DATA, 1, b"m" * 517)

    def test_lossless(self):
        port = ScriptedPort()
        assert reliable_send(self.msg, port) == Delivered((1, 1, 1))
        assert port.delivered == [self.msg]

    def test_first_copy_of_chunk_two_lost(self):
        seen = set()

        def drop(n, f):
            first = f.chunk_index not in seen
            seen.add(f.chunk_index)
            return first and f.chunk_index == 2

        port = ScriptedPort(drop)
        assert reliable_send(self.msg, port) == Delivered((1, 2, 1))
        assert [f.chunk_index for f in port.sent] == [1, 2, 2, 3]

    def test_certain_loss(self):
        port = ScriptedPort(lambda n, f: True)
        result = reliable_send(self.msg, port, RetryPolicy(max_retries=3))
        assert isinstance(result, Failed) and result.chunk_index == 1
        assert len(port.sent) == 4

    def test_lost_ack_heals(self):
        store_port = ScriptedPort()
        calls = {"n": 0}

        class LoseFirstAck:
            def exchange(self, frame, timeout):
                reply = store_port.exchange(frame, timeout)
                calls["n"] += 1
                return None if calls["n"] == 1 else reply

        assert reliable_send(self.msg, LoseFirstAck()) == Delivered((2, 1, 1))
        assert store_port.delivered == [self.msg]

    def test_wrong_ack_is_not_an_ack(self):
        class WrongAck:
            def exchange(self, frame, timeout):
                return ack_frame(1, 99, 3, 1)

        assert isinstance(reliable_send(self.msg, WrongAck(), RetryPolicy(max_retries=0)), Failed)

    @settings(max_examples=50)
    @given(st.binary(min_size=1, max_size=3000), st.integers(0, 2 ** 32))
    def test_never_reorders(self, data, seed):
        rnd = random.Random(seed)
        port = ScriptedPort(lambda n, f: rnd.random() < 0.3)
        msg = PayloadMessage(0, MessageKind.TLS_DATA, 0, data)
        result = reliable_send(msg, port, RetryPolicy(max_retries=50))
        indices = [f.chunk_index for f in port.sent]
        assert indices == sorted(indices)
        if isinstance(result, Delivered):
            assert port.delivered == [msg]


class TestRetryPolicy:
    def test_derived_timeout(self):
        p = RetryPolicy.for_airtimes(0.1, 0.01, max_retries=4)
        assert p.max_retries == 4
        assert p.ack_timeout == pytest.approx(2 * 110 + 50)

    def test_validation(self):
        with pytest.raises(ValueError):
            RetryPolicy(max_retries=-1)
        with pytest.raises(ValueError):
            RetryPolicy(ack_timeout=0)
