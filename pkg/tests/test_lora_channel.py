from __future__ import annotations

import io
import math
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tlora.lora_channel import (
    EH, NR, AirtimeLedger, ChannelBusy, ChannelConfig, EmptyWindow, InvalidLength, Jammed, LedgerEntry,
    LoRaChannel, Lost, Scheduled, airtime, duty_cycle,
)


def reference_airtime(pl: int, sf: int, bw: int, cr: int = 1, preamble: int = 8,
                      crc: bool = True, implicit: bool = False, ldro: bool = False) -> Fraction:
    """Semtech SX127x datasheet time-on-air, computed exactly with rationals."""
    t_sym = Fraction(2 ** sf, bw)
    t_preamble = (preamble + Fraction(17, 4)) * t_sym
    num = 8 * pl - 4 * sf + 28 + 16 * int(crc) - 20 * int(implicit)
    den = 4 * (sf - 2 * int(ldro))
    n_payload = 8 + max(-(-num // den) * (cr + 4), 0)
    return t_preamble + n_payload * t_sym


def sig12(x: float) -> str:
    return f"{x:.11e}"


class TestAirtime:
    def test_ack_frame_sf7_500k_matches_reference(self):
        got = airtime(10, ChannelConfig(spreading_factor=7, bandwidth_hz=500_000))
        assert sig12(got) == sig12(float(reference_airtime(10, 7, 500_000)))

    @given(st.integers(1, 255), st.integers(7, 12), st.sampled_from([125_000, 250_000, 500_000]),
           st.integers(1, 4), st.booleans())
    def test_matches_reference_everywhere(self, pl, sf, bw, cr, ldro):
        cfg = ChannelConfig(spreading_factor=sf, bandwidth_hz=bw, coding_rate=cr, low_data_rate_optimize=ldro)
        assert sig12(airtime(pl, cfg)) == sig12(float(reference_airtime(pl, sf, bw, cr, ldro=ldro)))

    @given(st.integers(1, 255), st.integers(7, 12))
    def test_doubling_bandwidth_halves(self, pl, sf):
        a = airtime(pl, ChannelConfig(spreading_factor=sf, bandwidth_hz=125_000))
        b = airtime(pl, ChannelConfig(spreading_factor=sf, bandwidth_hz=250_000))
        assert b * 2 == pytest.approx(a, rel=1e-15)

    def test_three_kilobytes_band(self):
        cfg = ChannelConfig(spreading_factor=7, bandwidth_hz=125_000)
        frames = [210] * 15      # 3000 bytes in 200-byte payload frames
        total = math.fsum(airtime(n, cfg) for n in frames)
        assert 3.0 <= total <= 5.0

    @pytest.mark.parametrize("n", [0, 256])
    def test_invalid_length(self, n):
        with pytest.raises(InvalidLength):
            airtime(n, ChannelConfig())

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ChannelConfig(bandwidth_hz=200_000)
        with pytest.raises(ValueError):
            ChannelConfig(loss_probability=1.0)
        with pytest.raises(ValueError):
            ChannelConfig(jam_windows=((0, 2), (1, 3)))


class TestTransmit:
    def test_clean_channel(self):
        ch = LoRaChannel(ChannelConfig(propagation_delay=0.001))
        out = ch.transmit(b"x" * 20, EH, 1.0)
        assert isinstance(out, Scheduled)
        assert out.delivery_time == pytest.approx(1.0 + ch.airtime(20) + 0.001)
        assert out.frame == b"x" * 20

    def test_half_duplex(self):
        ch = LoRaChannel(ChannelConfig())
        ch.transmit(b"x" * 200, EH, 0.0)
        assert isinstance(ch.transmit(b"y", NR, ch.airtime(200) / 2), ChannelBusy)
        assert isinstance(ch.transmit(b"y", NR, ch.airtime(200)), Scheduled)

    def test_jam_window(self):
        ch = LoRaChannel(ChannelConfig(jam_windows=((5.0, 6.0),)))
        assert isinstance(ch.transmit(b"x" * 50, EH, 5.5), Jammed)
        assert ch.ledger.entries[-1].outcome == "jammed"

    def test_overlap_with_jam_start(self):
        ch = LoRaChannel(ChannelConfig(jam_windows=((5.0, 6.0),)))
        assert isinstance(ch.transmit(b"x" * 200, EH, 5.0 - ch.airtime(200) / 2), Jammed)

    def test_loss_rate(self):
        ch = LoRaChannel(ChannelConfig(loss_probability=0.25, rng_seed=3))
        t, lost = 0.0, 0
        for _ in range(4000):
            out = ch.transmit(b"x", EH, t)
            t += 1.0
            lost += isinstance(out, Lost)
        assert abs(lost / 4000 - 0.25) < 0.03

    def test_deterministic(self):
        def run():
            ch = LoRaChannel(ChannelConfig(loss_probability=0.3, rng_seed=11, corrupt_probability=0.1))
            outs = [ch.transmit(bytes([i % 256]) * 30, EH if i % 2 else NR, float(i)) for i in range(300)]
            buf = io.StringIO()
            ch.ledger.write_jsonl(buf)
            return outs, buf.getvalue()
        assert run() == run()

    @settings(max_examples=50)
    @given(st.lists(st.tuples(st.sampled_from([EH, NR]), st.floats(0, 0.05), st.integers(1, 255)), max_size=60))
    def test_busy_exactly_on_overlap(self, ops):
        ch = LoRaChannel(ChannelConfig())
        now, busy_until = 0.0, float("-inf")
        for sender, gap, size in ops:
            now += gap
            out = ch.transmit(bytes(size), sender, now)
            if now < busy_until:
                assert isinstance(out, ChannelBusy)
            else:
                assert not isinstance(out, ChannelBusy)
                busy_until = now + ch.airtime(size)
        entries = ch.ledger.entries
        for a, b in zip(entries, entries[1:]):
            assert b.t >= a.t + a.airtime_s - 1e-12


class TestLedgerAndDutyCycle:
    def test_reference_example(self):
        ledger = AirtimeLedger([LedgerEntry(0.0, EH, b"", 14.0, "scheduled")])
        dc = duty_cycle(ledger, 1200.0, EH)
        assert dc == pytest.approx(14 / 1200 * 100)
        assert round(dc, 2) == 1.17

    def test_empty(self):
        assert duty_cycle(AirtimeLedger(), 60.0) == 0.0

    def test_spread(self):
        hi = duty_cycle(AirtimeLedger([LedgerEntry(0, EH, b"", 14 + 2.05, "scheduled")]), 1200)
        lo = duty_cycle(AirtimeLedger([LedgerEntry(0, EH, b"", 14 - 2.05, "scheduled")]), 1200)
        assert (hi - lo) / 2 == pytest.approx(0.17, abs=0.005)

    def test_window_must_be_positive(self):
        with pytest.raises(EmptyWindow):
            duty_cycle(AirtimeLedger(), 0)

    def test_sender_filter_and_clipping(self):
        ledger = AirtimeLedger([LedgerEntry(0, EH, b"", 1.0, "scheduled"), LedgerEntry(9.5, NR, b"", 1.0, "lost")])
        assert duty_cycle(ledger, 10, EH) == pytest.approx(10.0)
        assert duty_cycle(ledger, 10, NR) == pytest.approx(5.0)

    def test_rejects_overlap(self):
        ledger = AirtimeLedger([LedgerEntry(0, EH, b"", 1.0, "scheduled")])
        with pytest.raises(ValueError):
            ledger.record(LedgerEntry(0.5, NR, b"", 1.0, "scheduled"))

    def test_jsonl_round_trip(self):
        ch = LoRaChannel(ChannelConfig())
        ch.transmit(b"\x01\x02", EH, 0.0)
        ch.transmit(b"\x03", NR, 1.0)
        buf = io.StringIO()
        ch.ledger.write_jsonl(buf)
        assert AirtimeLedger.read_jsonl(buf.getvalue().splitlines()) == ch.ledger
