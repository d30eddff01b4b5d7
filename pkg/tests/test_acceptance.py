"""End-to-end acceptance checks, one test per numbered criterion."""
from __future__ import annotations

import itertools
import math
import random
from pathlib import Path

import pytest

from tlora.end_hub import EH_TABLE, EhAction, EhEvent, EhEventKind, EhState, eh_recover, eh_step
from tlora.frame_codec import (
    L_MAX, Complete, FrameError, LoRaFrame, MessageKind, PayloadMessage, RetryPolicy, chunk_count, decode_frame,
    encode_frame, fragment, reassemble,
)
from tlora.fsm import Action
from tlora.harness import compute_total_delay, load_scenario, run_scenario
from tlora.harness.metrics import MetricsReport, RequestMetrics, aggregate, duty_cycle_pct
from tlora.harness.report import render_table
from tlora.harness.runner import plaintext_hits
from tlora.harness.scenario import Request, ScenarioConfig
from tlora.harness.sentinel_experiment import SentinelExperiment, sentinel_experiment
from tlora.link import LinkEndpoint, default_retry_policy
from tlora.lora_channel import EH, NR, ChannelConfig, LoRaChannel, airtime
from tlora.net_relay import (
    NR_TABLE, HandshakePhase, NatMapping, NrAction, NrEvent, NrEventKind, NrSession, NrState, Success,
    handle_handshake_message, nr_recover, nr_step,
)
from tlora.packet_engine import (
    TcpFlags, checksums_ok, correct_syn_ack_timestamp, parse_packet, syn_options, tcp_packet,
)
from tlora.sentinel import SentinelConfig, SentinelState, admit, refill, release
from tlora.sim import Simulator
from tlora.tls_flows import API_BODY

ROOT = Path(__file__).resolve().parents[1]


@pytest.mark.criterion(1, "fragmentation identity, chunk-count and last-chunk laws on 10^4 payloads")
def test_fragmentation_suite(budget):
    rng = random.Random(20240601)
    with budget(10):
        for i in range(10_000):
            size = rng.randint(1, 255 * L_MAX)
            data = rng.randbytes(size)
            chunks = fragment(PayloadMessage(i % 65536, MessageKind.TLS_DATA, i % 256, data))
            n = math.ceil(size / L_MAX)
            assert len(chunks) == n == chunk_count(size)
            assert [c.chunk_index for c in chunks] == list(range(1, n + 1))
            assert all(len(c.data) == L_MAX for c in chunks[:-1])
            assert len(chunks[-1].data) == size - (n - 1) * L_MAX
            if i % 10 == 0:
                rng.shuffle(chunks)
            assert reassemble(chunks) == Complete(data)


def random_frame(rng: random.Random) -> LoRaFrame:
    kind = rng.choice([int(k) for k in MessageKind] + [0x80])
    if kind == 0x80:
        total = rng.randint(1, 255)
        return LoRaFrame(kind, rng.randrange(256), rng.randrange(65536), total, rng.randint(1, total))
    total = rng.randint(1, 255)
    return LoRaFrame(kind, rng.randrange(256), rng.randrange(65536), total, rng.randint(1, total),
                     rng.randbytes(rng.randint(1, L_MAX)))


@pytest.mark.criterion(2, "frame round-trip on 10^4 frames, every single-bit flip rejected on 100 frames")
def test_wire_suite():
    rng = random.Random(7)
    frames = [random_frame(rng) for _ in range(10_000)]
    for f in frames:
        assert decode_frame(encode_frame(f)) == f
    for f in frames[:100]:
        wire = encode_frame(f)
        for bit in range(len(wire) * 8):
            flipped = bytearray(wire)
            flipped[bit // 8] ^= 1 << (bit % 8)
            with pytest.raises(FrameError):
                decode_frame(bytes(flipped))


def arq_run(max_retries: int, n_messages: int = 1000, loss: float = 0.2, seed: int = 11):
    sim = Simulator()
    ch = LoRaChannel(ChannelConfig(loss_probability=loss, rng_seed=seed))
    policy = RetryPolicy(max_retries, default_retry_policy(ch.config).ack_timeout)
    a, b = LinkEndpoint(sim, ch, EH, policy), LinkEndpoint(sim, ch, NR, policy)
    a.connect(b)
    got, results = [], []
    b.on_message = got.append
    a.on_result = lambda m, r: results.append(r)
    rng = random.Random(seed)
    sent = [PayloadMessage(i % 65536, MessageKind.TLS_DATA, 1, rng.randbytes(rng.randint(1, 600)))
            for i in range(n_messages)]
    for m in sent:
        a.send(m)
    sim.run()
    return sent, got, a, b


@pytest.mark.criterion(3, "ARQ at p=0.2: 100% delivery with 10 retries, 0.80 +/- 0.03 per frame with none")
def test_arq_pdr():
    sent, got, a, _ = arq_run(10)
    assert a.stats.messages_delivered == len(sent) == 1000
    assert got == sent

    _, _, a0, b0 = arq_run(0)
    assert a0.stats.retransmissions == 0
    per_frame = b0.stats.chunks_received / a0.stats.data_transmissions
    assert abs(per_frame - 0.80) <= 0.03, per_frame
    assert a0.stats.messages_failed > 0


EH_EXPECTED = {
    ("C0", "e0"): ("C1", [("send_lora", MessageKind.DNS_QUERY)]),
    ("C1", "e1"): ("C0", [("spoof_dns", None)]),
    ("C0", "e2"): ("C2", [("send_lora", MessageKind.TCP_SYN)]),
    ("C2", "e3"): ("C3", [("forward_to_client", None), ("send_final_ack", MessageKind.TCP_ACK)]),
    ("C2", "e4"): ("C0", [("send_fin_ack_to_client", None), ("log_error", None)]),
    ("C3", "e5"): ("C3", [("chunk_and_send", MessageKind.TLS_DATA)]),
    ("C3", "e6"): ("C3", [("reassemble_and_forward", None)]),
    ("C3", "e8"): ("C4", [("send_fin_ack_to_client", None), ("cleanup", None)]),
}
NR_EXPECTED = {
    ("S0", "e0"): ("S1", [("resolve", None), ("send_lora", MessageKind.DNS_RESP)]),
    ("S0", "e1"): ("S4", [("report_error", None), ("cleanup", None)]),
    ("S1", "e2"): ("S2", [("modify_and_send_syn", None)]),
    ("S2", "e3"): ("S3", [("correct_timestamp", None), ("send_lora", MessageKind.TCP_SYNACK)]),
    ("S2", "e4"): ("S0", [("reset", None), ("report_error", None)]),
    ("S3", "e5"): ("S3", [("forward_ack", None)]),
    ("S3", "e6"): ("S3", [("send_lora_ack", None), ("reassemble", None), ("forward_to_target", None)]),
}


def shape(actions: list[Action]):
    return [(a.kind.value, a.message_kind) for a in actions]


@pytest.mark.criterion(4, "FSM rows of both proxies plus 50 fuzzed undefined pairs land in error then idle")
def test_fsm_conformance():
    rows = 0
    for (s, e), (nxt, acts) in EH_EXPECTED.items():
        state, actions = eh_step(EhState(s), EhEvent(EhEventKind(e), "p"))
        assert (state.value, shape(actions)) == (nxt, acts)
        rows += 1
    # the catch-all row: anything else is cleaned up and reset
    state, actions = eh_step(EhState.C1_WAIT_DNS_RESP, EhEvent(EhEventKind.E5_LOCAL_TLS_OUT))
    assert state is EhState.C4_ERROR and shape(actions) == [("cleanup", None)]
    assert eh_recover(state) is EhState.C0_IDLE
    rows += 1
    assert rows == 9 and set(EH_TABLE) == {(EhState(s), EhEventKind(e)) for s, e in EH_EXPECTED}

    nr_rows = 0
    for (s, e), (nxt, acts) in NR_EXPECTED.items():
        state, actions = nr_step(NrState(s), NrEvent(NrEventKind(e), "p"))
        assert (state.value, shape(actions)) == (nxt, acts)
        nr_rows += 1
    for s in NrState:
        state, actions = nr_step(s, NrEvent(NrEventKind.E7_SESSION_END, "why"))
        assert state is NrState.S0_IDLE_WAIT_DNS
        assert shape(actions) == [("report_error", None), ("cleanup", None)]
    nr_rows += 1
    assert nr_rows == 8

    rng = random.Random(4)
    eh_undefined = [p for p in itertools.product(EhState, EhEventKind) if p not in EH_TABLE]
    nr_undefined = [p for p in itertools.product(NrState, NrEventKind) if p not in NR_TABLE]
    for _ in range(50):
        if rng.random() < 0.5:
            s, e = rng.choice(eh_undefined)
            state, actions = eh_step(s, EhEvent(e))
            assert state is EhState.C4_ERROR and eh_recover(state) is EhState.C0_IDLE
            assert [a.kind for a in actions] == [EhAction.CLEANUP]
        else:
            s, e = rng.choice(nr_undefined)
            state, actions = nr_step(s, NrEvent(e))
            assert state is NrState.S4_ERROR and nr_recover(state) is NrState.S0_IDLE_WAIT_DNS
            assert [a.kind for a in actions] == [NrAction.CLEANUP]


class EchoingServer:
    """Answers every SYN with a SYN-ACK that echoes the relay's TSval, as a real stack would."""

    def __init__(self, rng: random.Random):
        self.rng = rng
        self.last_reply: bytes | None = None

    def syn_to_server_await_response(self, syn: bytes, timeout: float):
        p = parse_packet(syn)
        self.last_reply = tcp_packet(p.dst_ip, p.dst_port, p.src_ip, p.src_port, flags=TcpFlags.SYN | TcpFlags.ACK,
                                     seq=self.rng.getrandbits(32), ack_no=(p.seq + 1) & 0xFFFFFFFF,
                                     options=syn_options(self.rng.getrandbits(32), p.timestamp[0])).raw
        return self.last_reply

    def forward(self, raw: bytes):
        pass


def ts_offset(raw: bytes) -> int:
    """Independent scan for the TSecr field of the timestamp option."""
    ihl = (raw[0] & 0x0F) * 4
    end = ihl + (raw[ihl + 12] >> 4) * 4
    i = ihl + 20
    while i < end:
        if raw[i] == 0:
            break
        if raw[i] == 1:
            i += 1
            continue
        if raw[i] == 8:
            return i + 6
        i += raw[i + 1]
    raise AssertionError("no timestamp option")


@pytest.mark.criterion(5, "SYN-ACK TSecr equals client TSval on 100 random pairs; only TSecr and checksum bytes change")
def test_timestamp_correction():
    rng = random.Random(99)
    for _ in range(100):
        client = (f"192.168.4.{rng.randint(2, 250)}", rng.randint(1024, 65535))
        tsval = rng.getrandbits(32)
        syn = tcp_packet(*client, "10.0.0.1", 443, flags=TcpFlags.SYN, seq=rng.getrandbits(32),
                         options=syn_options(tsval))
        session = NrSession(1, state=NrState.S1_WAIT_SYN, nat=NatMapping(*client, "127.0.0.2", rng.randint(1024, 65535)),
                            relay_tsval=rng.getrandbits(32), target_ip="10.0.0.1")
        server = EchoingServer(rng)
        res = handle_handshake_message(PayloadMessage(0, MessageKind.TCP_SYN, 1, syn.raw), session, server)
        assert isinstance(res, Success) and session.phase is HandshakePhase.WAIT_ACK
        assert res.to_lora.timestamp[1] == tsval

        before = parse_packet(server.last_reply)
        after = correct_syn_ack_timestamp(before, tsval).raw
        assert checksums_ok(after)
        off = ts_offset(after)
        assert int.from_bytes(after[off:off + 4], "big") == tsval
        tcp_csum = (after[0] & 0x0F) * 4 + 16
        allowed = set(range(off, off + 4)) | {tcp_csum, tcp_csum + 1}
        diff = {i for i, (x, y) in enumerate(zip(before.raw, after)) if x != y}
        assert len(before.raw) == len(after)
        assert diff <= allowed, sorted(diff - allowed)
        # a checksum byte can keep its old value by coincidence, so only require that one moved
        tsecr_diff = diff & set(range(off, off + 4))
        old = before.raw[off:off + 4]
        assert tsecr_diff == {off + k for k in range(4) if old[k] != after[off + k]}
        if old != after[off:off + 4]:
            assert diff & {tcp_csum, tcp_csum + 1}


@pytest.mark.criterion(6, "real TLS 1.3 through the tunnel, lossless and at p=0.1, body intact, no plaintext on air")
def test_real_tls_end_to_end(budget):
    with budget(60):
        for loss in (0.0, 0.1):
            cfg = ScenarioConfig(channel=ChannelConfig(loss_probability=loss), mode="real_tls", seed=3,
                                 request=Request(count=1))
            res = run_scenario(cfg)
            (req,) = res.report.requests
            assert req.ok, req.error
            assert req.tls_version == "TLSv1.3"
            assert len(res.bodies_sent[0]) == 55
            assert res.bodies_received == res.bodies_sent == [API_BODY]
            assert plaintext_hits(res.ledger, API_BODY) == 0
            if loss:
                assert res.report.retransmissions > 0


@pytest.mark.criterion(7, "delay arithmetic 14.02 s with 71% TLS share; simulated run lands within 14.02 +/- 4 s")
def test_delay_arithmetic():
    b = compute_total_delay((0.146, 0.3915, 9.9, 3.583))
    assert abs(b.total - 14.02) <= 0.005
    assert abs(b.share["tls"] - 71) <= 1

    res = run_scenario(load_scenario(ROOT / "scenarios" / "reference.yaml"))
    assert res.report.all_completed
    assert abs(res.report.delta_total - 14.02) <= 4, res.report.delta_total


@pytest.mark.criterion(8, "3 kB in 200 B frames at SF7/125 kHz takes 3-5 s on air; 500 kHz is exactly a quarter")
def test_airtime_band():
    narrow = ChannelConfig(spreading_factor=7, bandwidth_hz=125_000)
    wide = ChannelConfig(spreading_factor=7, bandwidth_hz=500_000)
    frames = [encode_frame(c, kind=MessageKind.TLS_DATA, session_id=1) for c in fragment(bytes(3000))]
    assert len(frames) == 15
    total = math.fsum(airtime(len(f), narrow) for f in frames)
    assert 3 <= total <= 5, total
    for length in range(1, 256):
        assert airtime(length, wide) == airtime(length, narrow) / 4


@pytest.mark.criterion(9, "duty cycle 1.17% for 14 s per 1200 s, +/-0.17% for +/-2.05 s")
def test_duty_cycle():
    assert abs(duty_cycle_pct(14, 1200) - 1.17) <= 0.01
    assert round(duty_cycle_pct(14 + 2.05, 1200) - duty_cycle_pct(14, 1200), 2) == 0.17
    assert round(duty_cycle_pct(14, 1200) - duty_cycle_pct(14 - 2.05, 1200), 2) == 0.17

    rep = MetricsReport(mode="simulated_tls", seed=0)
    rep.requests.append(RequestMetrics(0, "dev", True, {"dns": 0.5, "tcp": 0.5, "tls": 10.0, "access": 3.0},
                                       14.0, {}, 55, 14.0))
    aggregate(rep, 1200)
    assert "duty cycle (%): 1.17" in render_table(rep.to_dict())


@pytest.mark.criterion(10, "sentinel admission tallies at low, medium and high arrival rates")
def test_sentinel_reproduction(budget):
    with budget(30):
        low, med, high = (sentinel_experiment(SentinelExperiment(rate=r, clients=20, runs=10, seed=1))
                          for r in (0.05, 0.1, 1.0))
    assert abs(low.mean("admitted") - 13.5) <= 3, low.summary()
    assert abs(med.mean("admitted") - 8.6) <= 3, med.summary()
    assert abs(high.mean("admitted") - 1.3) <= 1.5, high.summary()
    assert high.mean("rejected_rate") <= 2, high.summary()
    for res in (low, med, high):
        assert res.experiment.sentinel.n_max == 1
        assert res.experiment.sentinel.rho == pytest.approx(1 / 15)
        assert res.experiment.hold.mean == 14.02 and res.experiment.hold.stdev == 2.05


@pytest.mark.criterion(11, "10^5 random operation sequences never break the concurrency or token bounds")
def test_sentinel_safety():
    rng = random.Random(5)
    for _ in range(100_000):
        cfg = SentinelConfig(n_max=rng.randint(1, 4), t_max=rng.uniform(1, 6), rho=rng.uniform(0.001, 2))
        s, now = SentinelState.initial(cfg), 0.0
        for _ in range(rng.randint(1, 12)):
            now += rng.expovariate(0.5)
            op = rng.random()
            if op < 0.5:
                _, s = admit(s, now)
            elif op < 0.8 and s.n_active:
                s = release(s)
            else:
                s = refill(s, now)
            assert 0 <= s.n_active <= cfg.n_max
            assert 0 <= s.tokens <= cfg.t_max
