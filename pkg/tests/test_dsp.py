import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mrrswitch.dsp import (
    FEC_EVM_LIMIT,
    AliasingError,
    DspConfig,
    DspError,
    adaptive_equalize,
    carrier_phase_recover,
    compute_evm,
    deskew,
    estimate_frequency_offset,
    estimate_timing,
    evm_to_ber,
    fec_pass,
    frequency_shift,
    matched_filter,
    process_subchannel,
    pulse_shape,
    qpsk_demap,
    qpsk_map,
    resample,
    resolve_ambiguity,
    rrc_spectrum,
    rrc_taps,
    time_shift,
    wiener_window_variance,
)
from oracles import CMA_REFERENCE_CHANNELS, awgn_evm, equalized_evm


def symbols(n, seed=0):
    return qpsk_map(np.random.default_rng(seed).integers(0, 2, 2 * n))


def cnoise(n, var, seed):
    rng = np.random.default_rng(seed)
    return (rng.standard_normal(n) + 1j * rng.standard_normal(n)) * np.sqrt(var / 2)


class TestQpsk:
    @given(st.lists(st.integers(0, 1), min_size=2, max_size=64).filter(lambda b: len(b) % 2 == 0))
    def test_round_trip(self, bits):
        assert qpsk_demap(qpsk_map(bits)).tolist() == bits

    def test_gray_and_unit_energy(self):
        pts = qpsk_map([0, 0, 0, 1, 1, 1, 1, 0])
        assert np.allclose(np.abs(pts), 1.0)
        # Neighbours differ in one bit.
        assert pts[0] == pytest.approx((1 + 1j) / np.sqrt(2))
        assert pts[1] == pytest.approx((1 - 1j) / np.sqrt(2))


class TestPulseShaping:
    @pytest.mark.parametrize("rolloff", [0.0, 0.001, 0.1, 0.5])
    @pytest.mark.parametrize("sps", [2, 4, 16])
    def test_zero_isi_pair(self, rolloff, sps):
        s = symbols(4096)
        y = matched_filter(pulse_shape(s, sps, rolloff), rolloff, 1.0, float(sps))
        assert np.max(np.abs(y[::sps] - s)) <= 1e-6

    def test_unit_power(self):
        x = pulse_shape(symbols(4096), 16, 0.001)
        assert np.mean(np.abs(x) ** 2) == pytest.approx(1.0, rel=1e-2)

    def test_spectrum_half_power_at_nyquist(self):
        for b in (0.0, 0.001, 0.3):
            assert rrc_spectrum(np.array([0.5]), 1.0, b)[0] ** 2 == pytest.approx(0.5)

    def test_taps_singular_points(self):
        h = rrc_taps(0.25, 8, 16)
        assert np.all(np.isfinite(h))
        assert np.sum(h**2) == pytest.approx(1.0)

    def test_truncated_taps_isi(self):
        # Finite taps only approximate the pair; the error falls with span.
        sps = 8
        isi = []
        for span in (16, 64):
            h = rrc_taps(0.25, sps, span)
            g = np.convolve(h, h)
            c = g.size // 2
            isi.append(np.max(np.abs(np.delete(g[c % sps::sps], c // sps))) / g[c])
        assert isi[1] < isi[0] and isi[1] < 1e-4

    def test_sinc_at_zero_rolloff(self):
        h = rrc_taps(0.0, 4, 8)
        assert h[h.size // 2 + 4] == pytest.approx(0.0, abs=1e-12)

    def test_matched_filter_needs_two_sps(self):
        with pytest.raises(DspError):
            matched_filter(np.ones(8), 0.001, 10.0, 15.0)


class TestResample:
    @pytest.mark.parametrize("method", ["poly", "fft"])
    def test_tone(self, method):
        fs, n = 160.0, 4096
        t = np.arange(n) / fs
        x = np.exp(2j * np.pi * 1.25 * t)
        y = resample(x, fs, 50.0, method=method)
        ref = np.exp(2j * np.pi * 1.25 * np.arange(y.size) / 50.0)
        assert y.size == n * 50 // 160
        assert np.max(np.abs(y - ref)) < 1e-3

    def test_aliasing_guard(self):
        t = np.arange(4096) / 160.0
        with pytest.raises(AliasingError):
            resample(np.exp(2j * np.pi * 40.0 * t), 160.0, 50.0)

    def test_irrational_ratio(self):
        with pytest.raises(DspError):
            resample(np.ones(64), 160.0, 160.0 / np.pi)

    def test_identity(self):
        x = symbols(64)
        assert np.array_equal(resample(x, 20.0, 20.0), x)


class TestFrequencyOffset:
    def test_injected_200_mhz(self):
        fs, s = 160.0, symbols(4096)
        x = frequency_shift(pulse_shape(s, 16, 0.001), -0.2, fs)
        est = estimate_frequency_offset(matched_filter(x, 0.001, 10.0, fs), fs)
        assert abs(est.offset - 0.2) <= est.resolution
        assert est.resolution == pytest.approx(fs / x.size / 4)
        assert not est.low_confidence

    @given(st.floats(-2.0, 2.0))
    @settings(max_examples=20, deadline=None)
    def test_within_resolution(self, off):
        fs = 20.0
        x = frequency_shift(pulse_shape(symbols(1024, 3), 2, 0.001), -off, fs)
        est = estimate_frequency_offset(x, fs)
        assert abs(est.offset - off) <= est.resolution

    def test_zero_padding_refines(self):
        fs = 20.0
        x = frequency_shift(pulse_shape(symbols(1024, 3), 2, 0.001), -0.2003, fs)
        coarse = estimate_frequency_offset(x, fs)
        fine = estimate_frequency_offset(x, fs, nfft=8 * x.size)
        assert fine.resolution == pytest.approx(coarse.resolution / 8)
        assert abs(fine.offset - 0.2003) <= fine.resolution

    def test_noise_only_flagged(self):
        est = estimate_frequency_offset(cnoise(4096, 1.0, 5), 20.0)
        assert est.low_confidence


class TestEqualizer:
    @pytest.mark.parametrize("name", list(CMA_REFERENCE_CHANNELS))
    def test_reference_channels(self, name):
        evm, converged = equalized_evm(CMA_REFERENCE_CHANNELS[name])
        assert converged
        assert evm < 2.0

    def test_zero_step_is_passthrough(self):
        cfg = DspConfig()
        x = matched_filter(pulse_shape(symbols(2048), 2, 0.001), 0.001, 1.0, 2.0)
        eq = adaptive_equalize(x, cfg, mu=0.0)
        assert not eq.converged
        assert np.allclose(eq.output, x[::2])

    def test_short_block(self):
        with pytest.raises(DspError):
            adaptive_equalize(np.ones(200, complex), DspConfig())

    @pytest.mark.parametrize("kw", [{"taps": 14}, {"phase_window": 0}, {"step": 0.0}, {"sps": 1}])
    def test_config_validation(self, kw):
        with pytest.raises(ValueError):
            DspConfig(**kw)


class TestPhaseRecovery:
    def test_constant_phase(self):
        s = symbols(4096)
        out = carrier_phase_recover(s * np.exp(0.3j), 65)
        assert np.allclose(out.phase, 0.3)
        assert out.cycle_slips == 0
        assert np.allclose(out.output, s)

    def test_quarter_ambiguity(self):
        s = symbols(4096)
        out = carrier_phase_recover(s * np.exp(1j * (np.pi / 2 + 0.1)), 33)
        assert np.allclose(out.phase, 0.1)

    def test_slow_drift_tracked(self):
        s = symbols(8192)
        theta = np.linspace(0, 6 * np.pi, s.size)
        out = carrier_phase_recover(s * np.exp(1j * theta), 33)
        err = np.angle(out.output[100:-100] / s[100:-100])
        resid = (err + np.pi / 4) % (np.pi / 2) - np.pi / 4
        assert np.max(np.abs(resid)) < 1e-3
        assert out.cycle_slips == 0

    def test_slip_is_counted(self):
        # A fast quarter turn that the estimator follows is one slip.
        s = symbols(4096)
        theta = np.zeros(s.size)
        theta[2000:2020] = np.linspace(0, np.pi / 2, 20)
        theta[2020:] = np.pi / 2
        out = carrier_phase_recover(s * np.exp(1j * theta), 9)
        assert out.cycle_slips == 1

    def test_abrupt_quarter_turn_is_invisible(self):
        # A step of pi/2 is the constellation symmetry itself.
        s = symbols(2048)
        theta = np.where(np.arange(s.size) < 1024, 0.0, np.pi / 2)
        out = carrier_phase_recover(s * np.exp(1j * theta), 1)
        assert out.cycle_slips == 0

    def test_wiener_window_variance_monte_carlo(self):
        rng = np.random.default_rng(7)
        step, w, trials = 1e-3, 33, 4000
        walks = np.cumsum(rng.standard_normal((trials, w)) * np.sqrt(step), axis=1)
        err = walks.mean(axis=1) - walks[:, w // 2]
        assert np.var(err) == pytest.approx(wiener_window_variance(step, w), rel=0.1)


class TestTimingAndAlignment:
    @pytest.mark.parametrize("delay", [0.0, 0.0131, -0.042, 1.3])
    def test_timing_estimate(self, delay):
        fs, s = 160.0, symbols(1024)
        x = time_shift(pulse_shape(s, 16, 0.001), delay, fs) * np.exp(0.4j)
        x = matched_filter(x, 0.001, 10.0, fs)
        assert estimate_timing(x, fs, s, 10.0, 0.001) == pytest.approx(delay, abs=1e-5)

    def test_timing_length_mismatch(self):
        with pytest.raises(DspError):
            estimate_timing(np.ones(1600, complex), 160.0, symbols(99), 10.0, 0.001)

    @given(st.integers(-500, 500), st.integers(0, 3))
    @settings(max_examples=25)
    def test_deskew(self, lag, rot):
        s = symbols(1024)
        y = np.roll(s, lag) * 1j**rot
        a = deskew(y, s)
        assert a.lag == lag % 1024 and a.rotation == rot
        assert np.allclose(a.aligned, s)

    def test_blockwise_ambiguity(self):
        s = symbols(4096)
        rot = np.repeat([0, 1, 3, 2], 1024)
        y, rots = resolve_ambiguity(s * 1j**rot, s, 1024)
        assert np.allclose(y, s)
        assert list(rots) == [0, 1, 3, 2]


class TestMetrics:
    @pytest.mark.parametrize("target", [5.0, 10.0, 20.0, 30.0, 38.0])
    def test_awgn_formula(self, target):
        s = symbols(2**15)
        sigma = target / 100
        evm = compute_evm(s + cnoise(s.size, sigma**2, 1), s)
        assert evm == pytest.approx(awgn_evm(sigma), rel=0.02)

    def test_blind_matches_data_aided_at_low_noise(self):
        s = symbols(4096)
        r = s + cnoise(s.size, 0.01, 2)
        assert compute_evm(r) == pytest.approx(compute_evm(r, s), rel=1e-9)

    def test_gain_invariance(self):
        s = symbols(4096)
        r = s + cnoise(s.size, 0.01, 2)
        assert compute_evm(3j * r, s) == pytest.approx(compute_evm(r, s), rel=1e-12)

    def test_too_few_symbols(self):
        with pytest.raises(DspError):
            compute_evm(symbols(999))

    def test_ber_formula(self):
        assert evm_to_ber(38.0) == pytest.approx(4.25e-3, rel=0.01)
        assert 3e-3 / 2 <= evm_to_ber(38.0) <= 3e-3 * 2
        assert evm_to_ber(0.0) == 0.0
        assert np.all(np.diff(evm_to_ber(np.linspace(1, 60, 30))) > 0)

    def test_ber_against_counted_errors(self):
        s = symbols(2**17, 4)
        sigma = 0.35
        r = s + cnoise(s.size, sigma**2, 4)
        bits_tx, bits_rx = qpsk_demap(s), qpsk_demap(r)
        counted = np.mean(bits_tx != bits_rx)
        # Without gain correction the raw noise RMS is the EVM.
        assert counted == pytest.approx(evm_to_ber(100 * sigma), rel=0.1)

    def test_fec_limit(self):
        assert FEC_EVM_LIMIT == 38.0
        assert fec_pass(38.0) and not fec_pass(38.01)


class TestChain:
    def test_back_to_back(self):
        fs, s = 160.0, symbols(4096)
        r = process_subchannel(pulse_shape(s, 16, 0.001), fs, s)
        assert r.evm_percent < 0.1
        assert r.fec_pass and r.converged and r.cycle_slips == 0
        assert r.symbols_used == 4096 - 2 * 512

    def test_offset_delay_phase(self):
        fs, s = 160.0, symbols(4096)
        x = pulse_shape(s, 16, 0.001)
        x = np.roll(frequency_shift(time_shift(x, 0.0123, fs), -0.2, fs), 37) * np.exp(1.1j)
        r = process_subchannel(x, fs, s)
        assert abs(r.frequency_offset - 0.2) <= fs / x.size / 4
        assert r.evm_percent < 0.5

    @pytest.mark.parametrize("target", [10.0, 20.0, 30.0])
    def test_awgn_through_chain(self, target):
        fs, s = 160.0, symbols(2**14, 6)
        sigma = target / 100
        # Matched-filter noise bandwidth is the baud rate.
        x = pulse_shape(s, 16, 0.001) + cnoise(s.size * 16, sigma**2 * fs / 10.0, 6)
        r = process_subchannel(x, fs, s)
        assert r.evm_percent == pytest.approx(awgn_evm(sigma), rel=0.02)

    def test_monotone_in_noise(self):
        fs, s = 160.0, symbols(4096, 8)
        x = pulse_shape(s, 16, 0.001)
        n = cnoise(x.size, 1.0, 8)
        evms = [process_subchannel(x + np.sqrt(v) * n, fs, s).evm_percent for v in (0.5, 2.0, 8.0)]
        assert evms[0] < evms[1] < evms[2]

    def test_diagnostics_json(self):
        fs, s = 160.0, symbols(2048)
        r = process_subchannel(pulse_shape(s, 16, 0.001), fs, s)
        doc = json.loads(json.dumps(r.diagnostics()))
        assert len(doc["taps"]) == DspConfig().taps
