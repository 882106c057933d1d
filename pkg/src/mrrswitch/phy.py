"""Signal-level model of the transmission chain around the switch.

Fields are complex envelopes on a periodic sample grid. Samples are scaled so
that ``mean(|x|**2)`` is the optical power in mW relative to ``power_ref``
(0 dBm by default). Frequencies are in GHz relative to the field's centre
wavelength and time is in ns.

Filtering stages work on the DFT grid and are therefore circular. Tones and
sub-channel offsets land on DFT bins whenever the symbol count is a multiple
of 8; phase-noise processes are not periodic, so receivers discard the first
and last few hundred symbols of each block.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from numpy.typing import NDArray

from .control import SwitchPlan
from .device import C_LIGHT, DeviceSpec, Direction, device_port_response
from .dsp import pulse_shape, qpsk_map, time_shift

H_PLANCK = 6.62607015e-34  # [J s]
RBW_NM = 1.44e-3  # OCNR reference bandwidth [nm]
BAND_OCNR_DB = {1539.0: 49.0, 1552.0: 52.0, 1563.0: 50.0}
DEFAULT_FLATNESS_DB = (-3.5, -1.0, 0.0, -0.5, -1.5, -3.0)


class PhyError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class OpticalField:
    samples: NDArray
    sample_rate: float  # [GSa/s]
    center_wavelength: float  # [nm]
    power_ref: float = 0.0  # [dBm] of unit mean-square amplitude

    def __post_init__(self) -> None:
        x = np.asarray(self.samples, dtype=complex)
        if x.ndim != 1 or x.size == 0:
            raise PhyError("field samples must be a nonempty 1-D sequence")
        if not np.all(np.isfinite(x)):
            raise PhyError("field samples must be finite")
        if self.sample_rate <= 0:
            raise PhyError("sample rate must be positive")
        object.__setattr__(self, "samples", x)

    @property
    def center_frequency(self) -> float:
        """[THz]"""
        return C_LIGHT / self.center_wavelength * 1e-3

    @property
    def power_mw(self) -> float:
        return float(np.mean(np.abs(self.samples) ** 2)) * 10 ** (self.power_ref / 10)

    @property
    def power_dbm(self) -> float:
        return 10 * np.log10(self.power_mw)

    @property
    def duration(self) -> float:
        """[ns]"""
        return self.samples.size / self.sample_rate

    def freqs(self) -> NDArray:
        return np.fft.fftfreq(self.samples.size, d=1 / self.sample_rate)

    def time(self) -> NDArray:
        return np.arange(self.samples.size) / self.sample_rate

    def with_samples(self, samples: NDArray) -> "OpticalField":
        return replace(self, samples=samples)

    def filtered(self, response: NDArray) -> "OpticalField":
        """Multiply the spectrum by ``response`` sampled on :meth:`freqs`."""
        return self.with_samples(np.fft.ifft(np.fft.fft(self.samples) * response))


@dataclass(frozen=True)
class SuperchannelSpec:
    n_sub: int = 6
    spacing: float = 12.5  # [GHz]
    baud: float = 10.0  # [GBaud]
    rolloff: float = 0.001
    modulation: str = "QPSK"
    center_wavelength: float = 1552.0  # [nm]
    ocnr_db: float | None = None  # [dB in 1.44 pm], None = band table
    flatness_db: tuple[float, ...] = DEFAULT_FLATNESS_DB
    samples_per_symbol: int = 16

    def __post_init__(self) -> None:
        object.__setattr__(self, "flatness_db", tuple(float(v) for v in self.flatness_db))
        if self.n_sub < 1:
            raise PhyError("need at least one sub-channel")
        if self.modulation.upper() != "QPSK":
            raise PhyError(f"unsupported modulation {self.modulation!r}")
        if not 0 <= self.rolloff <= 1:
            raise PhyError("rolloff must be within [0, 1]")
        if len(self.flatness_db) != self.n_sub:
            raise PhyError("flatness profile needs one entry per sub-channel")
        edge = np.max(np.abs(self.offsets)) + self.baud * (1 + self.rolloff) / 2
        if edge >= self.sample_rate / 2:
            raise PhyError(f"grid of {self.sample_rate} GSa/s cannot hold content at {edge:.2f} GHz")

    @property
    def sample_rate(self) -> float:
        return self.baud * self.samples_per_symbol

    @property
    def offsets(self) -> NDArray:
        """Sub-channel frequencies [GHz]; sub-channel 1 is the shortest wavelength."""
        k = np.arange(1, self.n_sub + 1)
        return ((self.n_sub + 1) / 2 - k) * self.spacing

    @property
    def bitrate(self) -> float:
        """Aggregate line rate [Gb/s]."""
        return self.n_sub * self.baud * 2

    @property
    def occupied_bandwidth(self) -> float:
        """Outer-edge to outer-edge spectral extent [GHz]."""
        return (self.n_sub - 1) * self.spacing + self.baud * (1 + self.rolloff)

    @property
    def ocnr(self) -> float:
        if self.ocnr_db is not None:
            return self.ocnr_db
        key = min(BAND_OCNR_DB, key=lambda w: abs(w - self.center_wavelength))
        return BAND_OCNR_DB[key]

    def n_samples(self, n_symbols: int) -> int:
        if n_symbols <= 0 or n_symbols % 8:
            raise PhyError("symbol count must be a positive multiple of 8")
        return n_symbols * self.samples_per_symbol


@dataclass(frozen=True)
class FiberSpec:
    length: float = 50.0  # [km]
    dispersion: float = 17.0  # [ps/(nm km)]
    attenuation: float = 0.2  # [dB/km]
    group_index: float = 1.468

    def __post_init__(self) -> None:
        if self.length < 0 or self.attenuation < 0:
            raise PhyError("fiber length and attenuation must be nonnegative")


@dataclass(frozen=True)
class NoiseSpec:
    master_linewidth: float = 100.0  # [kHz]
    lo_linewidth: float = 80.0  # [kHz]
    booster_nf: float = 5.0  # [dB]
    preamp_nf: float = 5.0  # [dB]
    launch_power: float = 0.0  # [dBm] after the booster
    preamp_power: float = 5.0  # [dBm] after the pre-amplifier
    received_power: float = -25.0  # [dBm] at the receiver input
    rx_noise_psd: float = -70.0  # [dBm/GHz] input-referred, near the h*nu shot-noise floor
    lo_offset: float = 0.2  # [GHz] apparent offset at baseband
    seed: int = 1

    def __post_init__(self) -> None:
        if self.master_linewidth < 0 or self.lo_linewidth < 0:
            raise PhyError("linewidths must be nonnegative")

    def quiet(self) -> "NoiseSpec":
        """Copy with every noise source switched off."""
        return replace(
            self, master_linewidth=0.0, lo_linewidth=0.0, booster_nf=-np.inf,
            preamp_nf=-np.inf, rx_noise_psd=-np.inf,
        )


# ---------------------------------------------------------------------------
# Random streams
# ---------------------------------------------------------------------------

STAGES = {
    "payload": 1, "comb_phase": 2, "comb_noise": 3, "booster": 4,
    "preamp": 5, "lo_phase": 6, "rx_noise": 7,
}


def stream_rng(seed: int, wavelength: float, stage: str, sub: int = 0) -> np.random.Generator:
    """Independent generator for one (seed, band, stage, sub-channel) key.

    Keys deliberately exclude ring, mode and direction, so every switch
    configuration in a band sees the same noise realization.
    """
    key = [int(seed), int(round(wavelength * 1000)), STAGES[stage], int(sub)]
    return np.random.default_rng(np.random.SeedSequence(key))


def wiener_phase(linewidth_khz: float, sample_rate: float, n: int, rng: np.random.Generator) -> NDArray:
    """Wiener phase walk with increment variance ``2 pi linewidth / sample_rate``."""
    if linewidth_khz == 0:
        return np.zeros(n)
    var = 2 * np.pi * linewidth_khz * 1e3 / (sample_rate * 1e9)
    return np.cumsum(rng.normal(0.0, np.sqrt(var), n))


def complex_noise(psd_mw_per_ghz: float, sample_rate: float, n: int, rng: np.random.Generator) -> NDArray:
    """White circular Gaussian noise of two-sided PSD ``psd`` over the grid."""
    var = psd_mw_per_ghz * sample_rate
    return np.sqrt(var / 2) * (rng.standard_normal(n) + 1j * rng.standard_normal(n))


# ---------------------------------------------------------------------------
# Transmitter
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CombTones:
    envelopes: NDArray  # (n_sub, n) complex envelopes of each tone about its offset
    offsets: NDArray  # [GHz]
    sample_rate: float


def rbw_ghz(wavelength: float, rbw_nm: float = RBW_NM) -> float:
    return C_LIGHT * rbw_nm / wavelength**2


def generate_comb(spec: SuperchannelSpec, noise: NoiseSpec, n_symbols: int) -> CombTones:
    """Phase-locked comb tones with a shared master phase walk.

    Tone k has power ``10**(flatness_db[k] / 10)`` mW and carries additive
    noise confined to its own +/- spacing/2 slot, with PSD set so that the
    tone-to-noise ratio in a 1.44 pm bandwidth equals the OCNR.
    """
    n = spec.n_samples(n_symbols)
    fs = spec.sample_rate
    seed, wl = noise.seed, spec.center_wavelength
    phase = wiener_phase(noise.master_linewidth, fs, n, stream_rng(seed, wl, "comb_phase"))
    carrier = np.exp(1j * phase)
    f = np.fft.fftfreq(n, d=1 / fs)
    slot = np.abs(f) < spec.spacing / 2
    env = np.empty((spec.n_sub, n), dtype=complex)
    for k in range(spec.n_sub):
        p_tone = 10 ** (spec.flatness_db[k] / 10)
        env[k] = np.sqrt(p_tone) * carrier
        if np.isfinite(spec.ocnr):
            psd = p_tone / (10 ** (spec.ocnr / 10) * rbw_ghz(wl))
            w = complex_noise(psd, fs, n, stream_rng(seed, wl, "comb_noise", k + 1))
            env[k] += np.fft.ifft(np.fft.fft(w) * slot)
    return CombTones(env, spec.offsets, fs)


def payload_bits(spec: SuperchannelSpec, n_symbols: int, seed: int) -> NDArray:
    """Uniform random bits, shape (n_sub, 2 * n_symbols)."""
    return np.stack([
        stream_rng(seed, spec.center_wavelength, "payload", k + 1).integers(0, 2, 2 * n_symbols, dtype=np.int8)
        for k in range(spec.n_sub)
    ])


def decorrelation_delay(delay_fiber_m: float, group_index: float = 1.468) -> float:
    """Patch-cord delay [ns]: ``L n / c``."""
    return delay_fiber_m * group_index / C_LIGHT * 1e9


def modulate_subchannels(spec: SuperchannelSpec, bits: NDArray) -> tuple[NDArray, NDArray]:
    """Gray QPSK symbols and their RRC baseband waveforms, one row per sub-channel."""
    bits = np.asarray(bits)
    if bits.ndim == 1:
        if bits.size % (2 * spec.n_sub):
            raise PhyError("bit count must be n_sub x n_symbols x 2")
        bits = bits.reshape(spec.n_sub, -1)
    if bits.shape[0] != spec.n_sub or bits.shape[1] % 2:
        raise PhyError(f"expected {spec.n_sub} rows of an even number of bits, got {bits.shape}")
    symbols = np.stack([qpsk_map(b) for b in bits])
    spec.n_samples(symbols.shape[1])
    waves = np.stack([pulse_shape(s, spec.samples_per_symbol, spec.rolloff) for s in symbols])
    return symbols, waves


def decorrelate_odd_even(
    waves: NDArray, sample_rate: float, delay_fiber_m: float = 10.0, group_index: float = 1.468
) -> NDArray:
    """Delay sub-channels 1, 3, 5, ... by the patch-cord delay (circular shift)."""
    if delay_fiber_m < 0:
        raise PhyError("delay must be nonnegative")
    out = np.array(waves, dtype=complex, copy=True)
    if delay_fiber_m == 0:
        return out
    tau = decorrelation_delay(delay_fiber_m, group_index)
    for k in range(0, out.shape[0], 2):
        out[k] = time_shift(out[k], tau, sample_rate)
    return out


def combine(tones: CombTones, waves: NDArray, center_wavelength: float) -> OpticalField:
    n = waves.shape[1]
    t = np.arange(n) / tones.sample_rate
    x = np.zeros(n, dtype=complex)
    for env, w, f in zip(tones.envelopes, waves, tones.offsets):
        x += env * w * np.exp(2j * np.pi * f * t)
    return OpticalField(x, tones.sample_rate, center_wavelength)


def modulate_superchannel(
    tones: CombTones,
    bits: NDArray,
    spec: SuperchannelSpec,
    *,
    delay_fiber_m: float = 10.0,
    group_index: float = 1.468,
) -> tuple[OpticalField, NDArray]:
    """Ideal I/Q modulation of every tone; returns the field and the symbols."""
    symbols, waves = modulate_subchannels(spec, bits)
    if waves.shape[1] != tones.envelopes.shape[1]:
        raise PhyError("payload length does not match the comb block")
    waves = decorrelate_odd_even(waves, spec.sample_rate, delay_fiber_m, group_index)
    return combine(tones, waves, spec.center_wavelength), symbols


# ---------------------------------------------------------------------------
# Channel
# ---------------------------------------------------------------------------


def dispersion_response(field: OpticalField, fiber: FiberSpec) -> NDArray:
    """All-pass ``exp(+j pi D lambda^2 L f^2 / c)`` on the field grid."""
    d = fiber.dispersion * 1e-6  # [s/m^2]
    lam = field.center_wavelength * 1e-9
    length = fiber.length * 1e3
    f = field.freqs() * 1e9
    return np.exp(1j * np.pi * d * lam**2 * length * f**2 / C_LIGHT)


def propagate_fiber(field: OpticalField, fiber: FiberSpec) -> OpticalField:
    """Linear fibre: chromatic dispersion then span loss."""
    out = field.filtered(dispersion_response(field, fiber))
    return out.with_samples(out.samples * 10 ** (-fiber.attenuation * fiber.length / 20))


def ase_psd(gain: float, nf_db: float, wavelength: float) -> float:
    """ASE PSD [mW/GHz] in the signal polarization: ``max(NF G - 1, 0) h nu / 2``."""
    nu = C_LIGHT / (wavelength * 1e-9)
    return max(10 ** (nf_db / 10) * gain - 1, 0.0) * H_PLANCK * nu / 2 * 1e12


def amplify(field: OpticalField, target_power_dbm: float, nf_db: float, rng: np.random.Generator) -> OpticalField:
    """Scale to ``target_power_dbm`` and add ASE over the whole grid."""
    p_in = field.power_mw
    if p_in <= 0:
        raise PhyError("cannot amplify a field with zero power")
    gain = 10 ** (target_power_dbm / 10) / p_in
    x = field.samples * np.sqrt(gain)
    psd = ase_psd(gain, nf_db, field.center_wavelength)
    if psd > 0:
        x = x + complex_noise(psd, field.sample_rate, x.size, rng)
    return field.with_samples(x)


def attenuate(field: OpticalField, loss_db: float) -> OpticalField:
    """Variable optical attenuator."""
    return field.with_samples(field.samples * 10 ** (-loss_db / 20))


def switch_response(
    field: OpticalField, spec: DeviceSpec, plan: SwitchPlan, port: int, direction=Direction.FORWARD
) -> NDArray:
    if port not in plan.ports:
        raise PhyError(f"port {port} is not selected by the plan {plan.request.bitmap_string}")
    return device_port_response(
        spec, plan.states, port, field.freqs(), field.center_wavelength, direction
    ).values


def apply_switch(
    field: OpticalField,
    spec: DeviceSpec | None,
    plan: SwitchPlan | None,
    port: int,
    direction=Direction.FORWARD,
) -> OpticalField:
    """Pass ``field`` through the switch to (FORWARD) or from (REVERSE) ``port``.

    ``spec=None`` selects an all-pass stub with unit response.
    """
    if spec is None:
        return field.with_samples(field.samples.copy())
    return field.filtered(switch_response(field, spec, plan, port, direction))


# ---------------------------------------------------------------------------
# Receiver front end
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Baseband:
    samples: NDArray
    sample_rate: float  # [GSa/s]
    lo_frequency: float  # [GHz] relative to the field centre

    @property
    def power_mw(self) -> float:
        return float(np.mean(np.abs(self.samples) ** 2))


def coherent_receive(
    field: OpticalField,
    lo_frequency: float,
    *,
    lo_linewidth: float = 0.0,
    lo_offset: float = 0.0,
    noise_psd: float = 0.0,
    adc_rate: float = 50.0,
    rng_phase: np.random.Generator | None = None,
    rng_noise: np.random.Generator | None = None,
) -> Baseband:
    """Phase-diverse coherent detection of the content around ``lo_frequency``.

    The LO sits at ``lo_frequency - lo_offset`` so the wanted sub-channel
    appears at ``+lo_offset`` in baseband. ``noise_psd`` [mW/GHz] is the
    receiver's input-referred white noise. A brick-wall anti-alias filter
    precedes decimation to ``adc_rate``.
    """
    fs = field.sample_rate
    if abs(lo_frequency) > fs / 2:
        raise PhyError(f"LO at {lo_frequency} GHz lies outside the +/-{fs / 2} GHz field band")
    if adc_rate > fs:
        raise PhyError("ADC rate exceeds the simulation rate")
    n = field.samples.size
    if (n * adc_rate / fs) % 1:
        raise PhyError("block length does not decimate to an integer ADC sample count")
    t = field.time()
    phase = 2 * np.pi * (lo_frequency - lo_offset) * t
    if lo_linewidth > 0:
        phase = phase + wiener_phase(lo_linewidth, fs, n, rng_phase or np.random.default_rng())
    x = field.samples * np.exp(-1j * phase) * 10 ** (field.power_ref / 20)
    if noise_psd > 0:
        x = x + complex_noise(noise_psd, fs, n, rng_noise or np.random.default_rng())
    spec = np.fft.fft(x)
    m = int(round(n * adc_rate / fs))
    keep = np.fft.fftfreq(m, d=1 / m).astype(int)  # bin indices of the kept band
    y = np.fft.ifft(spec[keep % n]) * (m / n)
    return Baseband(y, adc_rate, lo_frequency)
