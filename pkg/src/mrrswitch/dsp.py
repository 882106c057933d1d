"""Receiver DSP for single-polarization Nyquist QPSK.

Rates are in GSa/s and GBaud, frequencies in GHz, time in ns. Every stage is
a plain function on complex numpy arrays except the adaptive equalizer, which
returns its converged taps alongside the output.

Chain used by :func:`process_subchannel`::

    frequency offset removal -> matched filter -> timing deskew
    -> resample to 2 sps
    -> CMA then decision-directed LMS -> Viterbi-Viterbi phase recovery
    -> symbol alignment and pi/2 resolution against the known payload -> EVM
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from numba import njit
from numpy.typing import NDArray
from scipy import signal
from scipy.optimize import minimize_scalar
from scipy.special import erfc

FEC_EVM_LIMIT = 38.0  # [%] 7% overhead hard-decision FEC for QPSK

QPSK_POINTS = np.array([1 + 1j, -1 + 1j, 1 - 1j, -1 - 1j]) / np.sqrt(2)


class AliasingError(ValueError):
    """Resampling would fold significant power into the output band."""


class DspError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Constellation helpers
# ---------------------------------------------------------------------------


def qpsk_map(bits: NDArray) -> NDArray:
    """Gray-mapped unit-energy QPSK: bit pair (b0, b1) -> ((1-2b0) + j(1-2b1))/sqrt(2)."""
    bits = np.asarray(bits, dtype=np.int8).reshape(-1, 2)
    return ((1 - 2 * bits[:, 0]) + 1j * (1 - 2 * bits[:, 1])) / np.sqrt(2)


def qpsk_demap(symbols: NDArray) -> NDArray:
    s = np.asarray(symbols)
    return np.column_stack([(s.real < 0), (s.imag < 0)]).astype(np.int8).ravel()


def qpsk_decide(symbols: NDArray) -> NDArray:
    s = np.asarray(symbols)
    return (np.sign(s.real) + 1j * np.sign(s.imag)) / np.sqrt(2)


# ---------------------------------------------------------------------------
# Pulse shaping
# ---------------------------------------------------------------------------


def rc_spectrum(freq: NDArray, baud: float, rolloff: float) -> NDArray:
    """Raised-cosine spectrum with unit passband height.

    At ``rolloff == 0`` the band edge takes the value 1/2, which keeps the
    folded spectrum flat on DFT grids that land exactly on ``baud / 2``.
    """
    f = np.abs(np.asarray(freq, dtype=float))
    half = baud / 2
    if rolloff <= 0:
        return np.where(f < half, 1.0, np.where(np.isclose(f, half, rtol=0, atol=1e-12 * baud), 0.5, 0.0))
    f1 = half * (1 - rolloff)
    f2 = half * (1 + rolloff)
    out = np.zeros_like(f)
    out[f <= f1] = 1.0
    mid = (f > f1) & (f < f2)
    out[mid] = 0.5 * (1 + np.cos(np.pi / (baud * rolloff) * (f[mid] - f1)))
    return out


def rrc_spectrum(freq: NDArray, baud: float, rolloff: float) -> NDArray:
    return np.sqrt(rc_spectrum(freq, baud, rolloff))


def rrc_taps(rolloff: float, sps: int, span: int) -> NDArray:
    """Unit-energy root-raised-cosine impulse response over ``span`` symbols.

    Handles the removable singularities at ``t = 0`` and ``|t| = T/(4 rolloff)``,
    and reduces to a sinc at ``rolloff = 0``.
    """
    n = span * sps
    t = np.arange(-n // 2, n // 2 + 1) / sps  # [symbols]
    b = rolloff
    h = np.empty_like(t)
    if b == 0:
        h = np.sinc(t)
    else:
        for i, ti in enumerate(t):
            if ti == 0:
                h[i] = 1 - b + 4 * b / np.pi
            elif np.isclose(abs(ti), 1 / (4 * b)):
                h[i] = b / np.sqrt(2) * (
                    (1 + 2 / np.pi) * np.sin(np.pi / (4 * b))
                    + (1 - 2 / np.pi) * np.cos(np.pi / (4 * b))
                )
            else:
                num = np.sin(np.pi * ti * (1 - b)) + 4 * b * ti * np.cos(np.pi * ti * (1 + b))
                den = np.pi * ti * (1 - (4 * b * ti) ** 2)
                h[i] = num / den
    return h / np.sqrt(np.sum(h**2))


def pulse_shape(symbols: NDArray, sps: int, rolloff: float) -> NDArray:
    """Periodic RRC pulse shaping with unit mean output power.

    Filtering is done on the DFT grid, so the waveform is the circular
    convolution of the symbol train with the infinitely long RRC pulse.
    """
    symbols = np.asarray(symbols, dtype=complex)
    up = np.zeros(symbols.size * sps, dtype=complex)
    up[::sps] = symbols
    f = np.fft.fftfreq(up.size, d=1 / sps)  # in units of the symbol rate
    h = rrc_spectrum(f, 1.0, rolloff) * sps
    return np.fft.ifft(np.fft.fft(up) * h)


def matched_filter(stream: NDArray, rolloff: float, baud: float, sample_rate: float) -> NDArray:
    """Circular RRC matched filter at ``sample_rate``.

    Gain is chosen so that a unit-power pulse-shaped stream comes out with
    unit-energy symbols at the symbol instants.
    """
    if sample_rate < 2 * baud * (1 - 1e-12):
        raise DspError("matched filter needs at least 2 samples per symbol")
    x = np.asarray(stream, dtype=complex)
    f = np.fft.fftfreq(x.size, d=1 / sample_rate)
    return np.fft.ifft(np.fft.fft(x) * rrc_spectrum(f, baud, rolloff))


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------


def _rational(ratio: float) -> Fraction:
    frac = Fraction(ratio).limit_denominator(1000)
    if abs(float(frac) - ratio) > 1e-9 * ratio:
        raise DspError(f"rate ratio {ratio} is not a small rational number")
    return frac


def resample(
    stream: NDArray,
    from_rate: float,
    to_rate: float,
    *,
    method: str = "poly",
    alias_limit_db: float = -40.0,
) -> NDArray:
    """Band-limited rational resampling.

    ``method="poly"`` uses a Kaiser-windowed FIR spanning 20 output-rate
    periods on each side, with circular padding; ``method="fft"`` crops or zero-pads the DFT, which is exact for
    periodic band-limited streams. Downsampling raises
    :class:`AliasingError` when the power above the new Nyquist frequency
    exceeds ``alias_limit_db`` relative to the total.
    """
    if from_rate <= 0 or to_rate <= 0:
        raise DspError("sample rates must be positive")
    x = np.asarray(stream, dtype=complex)
    if from_rate == to_rate:
        return x.copy()
    if to_rate < from_rate:
        spec = np.abs(np.fft.fft(x)) ** 2
        f = np.fft.fftfreq(x.size, d=1 / from_rate)
        out_of_band = spec[np.abs(f) > to_rate / 2].sum()
        if out_of_band > 10 ** (alias_limit_db / 10) * spec.sum():
            raise AliasingError(
                f"{10 * np.log10(out_of_band / spec.sum()):.1f} dB of power above "
                f"{to_rate / 2} GHz would alias"
            )
    frac = _rational(to_rate / from_rate)
    up, down = frac.numerator, frac.denominator
    if method == "fft":
        n_out = x.size * up / down
        if n_out != int(n_out):
            raise DspError("fft resampling needs an integer output length")
        return signal.resample(x, int(n_out))
    if method != "poly":
        raise DspError(f"unknown resampling method {method!r}")
    half_len = 20 * max(up, down)
    h = signal.firwin(2 * half_len + 1, 1 / max(up, down), window=("kaiser", 8.0))
    return signal.resample_poly(x, up, down, window=h, padtype="wrap")


# ---------------------------------------------------------------------------
# Frequency offset
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FrequencyEstimate:
    offset: float  # [GHz]
    resolution: float  # [GHz]
    low_confidence: bool


def estimate_frequency_offset(
    stream: NDArray, sample_rate: float, nfft: int | None = None
) -> FrequencyEstimate:
    """Fourth-power spectral peak: ``offset = argmax |FFT(x**4)| / 4``.

    The estimate wraps into ``[-sample_rate/8, sample_rate/8)``. The result is
    flagged when a non-adjacent bin lies within 3 dB of the peak.
    """
    x = np.asarray(stream, dtype=complex)
    nfft = nfft or x.size
    spec = np.abs(np.fft.fft(x**4, nfft))
    k = int(np.argmax(spec))
    f = np.fft.fftfreq(nfft, d=1 / sample_rate)
    masked = spec.copy()
    masked[[(k + d) % nfft for d in (-2, -1, 0, 1, 2)]] = 0
    low = bool(masked.max() >= spec[k] / np.sqrt(2))
    return FrequencyEstimate(float(f[k] / 4), sample_rate / nfft / 4, low)


def frequency_shift(stream: NDArray, offset: float, sample_rate: float) -> NDArray:
    """Multiply by ``exp(-j 2 pi offset t)``: moves a tone at ``offset`` to DC."""
    n = np.arange(len(stream))
    return np.asarray(stream) * np.exp(-2j * np.pi * offset * n / sample_rate)


# ---------------------------------------------------------------------------
# Adaptive equalizer
# ---------------------------------------------------------------------------


@njit(cache=True)
def _adapt(xp, w, mu, sps, phase, decision_directed):
    """One adaptation pass; returns the running output."""
    ntaps = w.size
    n = phase.size
    y = np.empty(n, dtype=np.complex128)
    inv = 1.0 / np.sqrt(2.0)
    for i in range(n):
        seg = xp[sps * i: sps * i + ntaps]
        acc = 0j
        for k in range(ntaps):
            acc += w[k] * seg[k]
        y[i] = acc
        if decision_directed:
            rot = np.exp(-1j * phase[i])
            z = acc * rot
            re = inv if z.real >= 0 else -inv
            im = inv if z.imag >= 0 else -inv
            err = (z - (re + 1j * im)) / rot
        else:
            err = acc * (acc.real * acc.real + acc.imag * acc.imag - 1.0)
        for k in range(ntaps):
            w[k] -= mu * err * np.conj(seg[k])
    return y


def _fir_output(xp: NDArray, w: NDArray, sps: int, n: int) -> NDArray:
    # Same indexing as _adapt with frozen taps.
    full = np.convolve(xp, w[::-1], mode="valid")
    return full[: sps * n : sps]


def _circular_pad(x: NDArray, ntaps: int) -> NDArray:
    c = ntaps // 2
    return np.concatenate([x[-c:], x, x[: ntaps - c]]) if c else np.concatenate([x, x[:ntaps]])


@dataclass
class EqualizerResult:
    output: NDArray  # one sample per symbol
    taps: NDArray
    converged: bool
    modulus_dispersion: float


def adaptive_equalize(
    stream: NDArray,
    cfg: "DspConfig",
    *,
    mu: float | None = None,
    phase: NDArray | None = None,
    taps: NDArray | None = None,
) -> EqualizerResult:
    """Constant-modulus FIR adaptation followed by decision-directed LMS.

    ``stream`` is at ``cfg.sps`` samples per symbol and unit mean power. CMA
    runs ``cfg.cma_passes`` passes from a centre-spike start. If ``phase``
    (per-symbol carrier phase) is given, a decision-directed pass refines the
    taps. The returned output is the frozen-tap filter over the whole block.
    """
    x = np.asarray(stream, dtype=np.complex128)
    sps = cfg.sps
    n = x.size // sps
    if n < cfg.training_symbols:
        raise DspError(f"need at least {cfg.training_symbols} symbols, got {n}")
    mu = cfg.step if mu is None else mu
    ntaps = cfg.taps
    if taps is None:
        w = np.zeros(ntaps, dtype=np.complex128)
        w[ntaps // 2] = 1.0
    else:
        w = np.array(taps, dtype=np.complex128)
    xp = _circular_pad(x[: n * sps], ntaps)
    zero = np.zeros(n)
    if mu > 0:
        for _ in range(cfg.cma_passes):
            _adapt(xp, w, mu, sps, zero, False)
        if phase is not None:
            _adapt(xp, w, cfg.dd_step, sps, np.asarray(phase, dtype=float), True)
    y = _fir_output(xp, w, sps, n)
    disp = float(np.mean((np.abs(y) ** 2 - 1.0) ** 2))
    return EqualizerResult(y, w, bool(mu > 0 and disp < cfg.modulus_threshold), disp)


# ---------------------------------------------------------------------------
# Carrier phase recovery
# ---------------------------------------------------------------------------


@dataclass
class PhaseRecovery:
    output: NDArray
    phase: NDArray  # [rad] per symbol, unwrapped
    cycle_slips: int


def carrier_phase_recover(symbols: NDArray, window: int) -> PhaseRecovery:
    """Viterbi-Viterbi fourth-power estimator over a centred sliding window.

    The raw estimate ``angle(-sum y**4) / 4`` is unwrapped with period pi/2.
    A cycle slip is counted each time the estimate moves by more than pi/4
    within two window lengths, which laser phase noise of practical
    linewidths never does.
    """
    y = np.asarray(symbols, dtype=complex)
    if window < 1:
        raise DspError("phase window must be >= 1")
    kernel = np.ones(window)
    acc = np.convolve(-(y**4), kernel, mode="same")
    theta = np.unwrap(np.angle(acc), period=2 * np.pi) / 4
    span = 2 * window
    fast = np.abs(theta[span:] - theta[:-span]) > np.pi / 4
    slips = int(np.count_nonzero(fast[1:] & ~fast[:-1]) + (fast.size > 0 and fast[0]))
    return PhaseRecovery(y * np.exp(-1j * theta), theta, slips)


def wiener_window_variance(step_variance: float, window: int) -> float:
    """Phase-error variance of a centred moving average over a Wiener phase.

    For ``window = 2M + 1`` and per-symbol increment variance ``s``, the
    error of the window mean against the centre phase has variance
    ``s M (M + 1) (2M + 1) / (3 window**2)``.
    """
    m = (window - 1) // 2
    return step_variance * m * (m + 1) * (2 * m + 1) / (3 * window**2)


# ---------------------------------------------------------------------------
# Timing deskew
# ---------------------------------------------------------------------------


def _reference_spectrum(tx_symbols: NDArray, n: int, sample_rate: float, baud: float, rolloff: float) -> NDArray:
    # Periodic symbol train on the receiver grid, RC-shaped (TX and RX filters).
    n_sym = len(tx_symbols)
    sym_spec = np.fft.fft(np.asarray(tx_symbols, dtype=complex))
    k = np.rint(np.fft.fftfreq(n, d=1 / n)).astype(int)
    f = np.fft.fftfreq(n, d=1 / sample_rate)
    return sym_spec[k % n_sym] * rc_spectrum(f, baud, rolloff)


def estimate_timing(
    stream: NDArray, sample_rate: float, tx_symbols: NDArray, baud: float, rolloff: float
) -> float:
    """Delay [ns] of a periodic stream against the known payload.

    The integer-sample lag comes from the circular cross-correlation peak; the
    fractional part maximizes the magnitude of the delay-compensated
    cross-spectrum sum, which is insensitive to a common carrier phase.
    """
    x = np.asarray(stream, dtype=complex)
    n = x.size
    if abs(n * baud / sample_rate - len(tx_symbols)) > 1e-9:
        raise DspError("stream duration does not match the payload length")
    cross = np.fft.fft(x) * np.conj(_reference_spectrum(tx_symbols, n, sample_rate, baud, rolloff))
    lag = int(np.argmax(np.abs(np.fft.ifft(cross))))
    if lag > n // 2:
        lag -= n
    f = np.fft.fftfreq(n, d=1 / sample_rate)

    def neg_peak(tau: float) -> float:
        return -abs(np.sum(cross * np.exp(2j * np.pi * f * tau)))

    t0 = lag / sample_rate
    dt = 1 / sample_rate
    res = minimize_scalar(neg_peak, bounds=(t0 - dt, t0 + dt), method="bounded", options={"xatol": 1e-6 * dt})
    return float(res.x)


def time_shift(stream: NDArray, delay: float, sample_rate: float) -> NDArray:
    """Circular delay by ``delay`` ns, exact for periodic band-limited streams."""
    x = np.asarray(stream, dtype=complex)
    f = np.fft.fftfreq(x.size, d=1 / sample_rate)
    return np.fft.ifft(np.fft.fft(x) * np.exp(-2j * np.pi * f * delay))


# ---------------------------------------------------------------------------
# Alignment and metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Alignment:
    lag: int
    rotation: int  # multiples of pi/2
    aligned: NDArray


def deskew(symbols: NDArray, reference: NDArray) -> Alignment:
    """Circular lag and pi/2 rotation that best match ``reference``.

    ``aligned[n]`` corresponds to ``reference[n]``.
    """
    y = np.asarray(symbols, dtype=complex)
    ref = np.asarray(reference, dtype=complex)
    if y.size != ref.size:
        raise DspError("symbols and reference must have equal length")
    xc = np.fft.ifft(np.fft.fft(y) * np.conj(np.fft.fft(ref)))
    lag = int(np.argmax(np.abs(xc)))
    rot = int(np.round(np.angle(xc[lag]) / (np.pi / 2))) % 4
    aligned = np.roll(y, -lag) * np.exp(-1j * rot * np.pi / 2)
    return Alignment(lag, rot, aligned)


def compute_evm(
    received: NDArray, reference: NDArray | None = None, *, min_symbols: int = 1000
) -> float:
    """RMS EVM [%] after the optimal complex gain alignment.

    Normalized to the RMS power of the reference constellation. Without a
    reference the hard QPSK decisions of the aligned symbols are used.
    """
    r = np.asarray(received, dtype=complex)
    if r.size < min_symbols:
        raise DspError(f"EVM needs at least {min_symbols} symbols, got {r.size}")
    if reference is None:
        s = qpsk_decide(r)
        for _ in range(3):
            g = np.vdot(r, s) / np.vdot(r, r)
            s = qpsk_decide(g * r)
    else:
        s = np.asarray(reference, dtype=complex)
        if s.size != r.size:
            raise DspError("received and reference must have equal length")
    g = np.vdot(r, s) / np.vdot(r, r)
    err = g * r - s
    return float(100 * np.sqrt(np.mean(np.abs(err) ** 2) / np.mean(np.abs(s) ** 2)))


def evm_to_ber(evm_percent) -> NDArray | float:
    """Gray QPSK bit error rate for Gaussian noise: ``erfc(1 / (sqrt(2) EVM)) / 2``."""
    evm = np.asarray(evm_percent, dtype=float) / 100
    with np.errstate(divide="ignore"):
        ber = 0.5 * erfc(1 / (np.sqrt(2) * evm))
    return float(ber) if ber.ndim == 0 else ber


def fec_pass(evm_percent: float) -> bool:
    return bool(evm_percent <= FEC_EVM_LIMIT)


# ---------------------------------------------------------------------------
# Full chain
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DspConfig:
    baud: float = 10.0  # [GBaud]
    rolloff: float = 0.001
    sps: int = 2
    taps: int = 15
    step: float = 1e-3
    dd_step: float = 5e-4
    cma_passes: int = 2
    foe_resolution: float = 0.0  # [MHz] offset search step, 0 = set by block length
    training_symbols: int = 1024
    phase_window: int = 65
    modulus_threshold: float = 0.5
    edge_symbols: int = 512  # dropped at both ends of each block
    ambiguity_block: int = 1024  # symbols per pi/2 rotation decision
    min_symbols: int = 1000

    def __post_init__(self) -> None:
        if self.taps % 2 == 0:
            raise ValueError("equalizer tap count must be odd")
        if self.phase_window < 1:
            raise ValueError("phase window must be >= 1")
        if self.step <= 0 or self.dd_step <= 0:
            raise ValueError("step sizes must be positive")
        if self.ambiguity_block < 1:
            raise ValueError("ambiguity block must be >= 1")
        if self.sps < 2:
            raise ValueError("equalizer runs at >= 2 samples per symbol")


@dataclass
class DspResult:
    evm_percent: float
    ber: float
    fec_pass: bool
    symbols_used: int
    frequency_offset: float  # [GHz]
    frequency_low_confidence: bool
    skew: float  # [ns]
    converged: bool
    cycle_slips: int
    lag: int
    rotation: int
    taps: NDArray = field(repr=False)

    def diagnostics(self) -> dict:
        return {
            "evm_percent": self.evm_percent,
            "ber": self.ber,
            "fec_pass": self.fec_pass,
            "symbols_used": self.symbols_used,
            "frequency_offset_ghz": self.frequency_offset,
            "frequency_low_confidence": self.frequency_low_confidence,
            "skew_ns": self.skew,
            "converged": self.converged,
            "cycle_slips": self.cycle_slips,
            "lag": self.lag,
            "rotation": self.rotation,
            "taps": [[float(t.real), float(t.imag)] for t in self.taps],
        }


def resolve_ambiguity(symbols: NDArray, reference: NDArray, block: int) -> tuple[NDArray, NDArray]:
    """Remove the pi/2 ambiguity blockwise against aligned reference symbols.

    Acts like a pilot convention with one rotation decision per ``block``
    symbols, so a cycle slip corrupts at most one block. Returns the rotated
    symbols and the rotation index of each block.
    """
    y = np.asarray(symbols, dtype=complex)
    ref = np.asarray(reference, dtype=complex)
    out = np.empty_like(y)
    starts = range(0, y.size, block)
    rots = np.empty(len(starts), dtype=int)
    for b, i in enumerate(starts):
        seg = slice(i, i + block)
        k = int(np.round(np.angle(np.vdot(ref[seg], y[seg])) / (np.pi / 2))) % 4
        rots[b] = k
        out[seg] = y[seg] * np.exp(-1j * k * np.pi / 2)
    return out, rots


def process_subchannel(
    stream: NDArray,
    sample_rate: float,
    tx_symbols: NDArray,
    cfg: DspConfig = DspConfig(),
) -> DspResult:
    """Run the full receiver chain on one down-converted sub-channel.

    Only the fractional part of the timing skew is removed by interpolation;
    the whole-symbol part is handled by indexing, so carrier phase noise that
    is not periodic over the block keeps its discontinuity at the block edges,
    where ``cfg.edge_symbols`` are discarded.
    """
    x = np.asarray(stream, dtype=complex)
    ref = np.asarray(tx_symbols, dtype=complex)
    n_sym = ref.size

    # Offset estimated on a matched-filtered copy so neighbours do not bias it.
    probe = matched_filter(x, cfg.rolloff, cfg.baud, sample_rate)
    nfft = probe.size
    if cfg.foe_resolution > 0:
        nfft = max(nfft, int(np.ceil(sample_rate * 1e3 / (4 * cfg.foe_resolution))))
    foe = estimate_frequency_offset(probe, sample_rate, nfft)
    x = frequency_shift(x, foe.offset, sample_rate)

    x = matched_filter(x, cfg.rolloff, cfg.baud, sample_rate)
    skew = estimate_timing(x, sample_rate, ref, cfg.baud, cfg.rolloff)
    whole = int(np.round(skew * cfg.baud))
    x = time_shift(x, -(skew - whole / cfg.baud), sample_rate)
    x = resample(x, sample_rate, cfg.baud * cfg.sps, method="fft")
    if x.size != n_sym * cfg.sps:
        raise DspError(f"expected {n_sym * cfg.sps} samples after resampling, got {x.size}")
    x = x / np.sqrt(np.mean(np.abs(x) ** 2))

    eq = adaptive_equalize(x, cfg)
    cpr = carrier_phase_recover(eq.output, cfg.phase_window)
    eq = adaptive_equalize(x, cfg, phase=cpr.phase, taps=eq.taps)
    cpr = carrier_phase_recover(eq.output, cfg.phase_window)

    # Output symbol i carries reference symbol i - lag.
    lag = deskew(cpr.output, ref).lag
    ref_out = np.roll(ref, lag)
    keep = slice(cfg.edge_symbols, n_sym - cfg.edge_symbols)
    y, rots = resolve_ambiguity(cpr.output[keep], ref_out[keep], cfg.ambiguity_block)
    evm = compute_evm(y, ref_out[keep], min_symbols=cfg.min_symbols)
    return DspResult(
        evm_percent=evm,
        ber=evm_to_ber(evm),
        fec_pass=fec_pass(evm),
        symbols_used=int(y.size),
        frequency_offset=foe.offset,
        frequency_low_confidence=foe.low_confidence,
        skew=skew,
        converged=eq.converged,
        cycle_slips=cpr.cycle_slips,
        lag=lag,
        rotation=int(rots[0]),
        taps=eq.taps,
    )
