"""Cascaded micro-ring resonator (MRR) switch model.

Eight add-drop rings share one bus waveguide. Light enters the input port,
passes each ring's through port in cascade order and is partially dropped at
every ring according to a single-pole Lorentzian response. Heaters red-shift
each ring's resonance following a second-order voltage polynomial.

Frequency conventions
---------------------
All in-band arithmetic is done in GHz. A wavelength difference is converted
with ``df = c * dlam / lam**2`` around a reference wavelength. A positive
frequency offset means a shorter wavelength, so a red-shifted resonance sits
at a negative frequency offset.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import optimize

C_LIGHT = 299_792_458.0  # [m/s]

N_RINGS = 8
THROUGH = "through"
ADMISSIBLE_BW_GHZ = (50.0, 120.0)

DEFAULT_FIRST_RESONANCE_NM = 1553.5
DEFAULT_RING_SPACING_NM = 1.27
DEFAULT_FSR_NM = 13.0
DEFAULT_TUNING_EFFICIENCY = 0.266  # [nm/mW]
DEFAULT_HEATER_RESISTANCE = 600.0  # [ohm]
DEFAULT_MAX_VOLTAGE = 6.0  # [V]

# Per-ring 3-dB bandwidths [GHz], ring 1..8.
DEFAULT_BW_TABLE = (80.0, 85.0, 83.0, 76.0, 85.0, 82.0, 84.0, 86.0)
BAND_BW_TABLES = {
    1539.0: (80.0, 85.0, 83.0, 81.0, 84.0, 82.0, 85.0, 80.0),
    1552.0: (80.0, 85.0, 83.0, 76.0, 85.0, 78.0, 84.0, 77.0),
    1563.0: (84.0, 86.0, 83.0, 82.0, 85.0, 86.0, 84.0, 83.0),
}

# Deterministic per-port weights in [0, 1] for the coupling-ripple knob.
_RIPPLE_PATTERN = (0.0, 0.5, 1.0, 0.25, 0.75, 0.125, 0.875, 0.375)


class DeviceDomainError(ValueError):
    """Raised when an input is outside the modeled device's domain."""


class ThermoFitError(ValueError):
    """Raised when a thermo-optic polynomial cannot be fitted."""


class Direction(str, enum.Enum):
    FORWARD = "forward"
    REVERSE = "reverse"


def nm_to_ghz(delta_nm: ArrayLike, ref_nm: float) -> NDArray | float:
    """Convert a wavelength span [nm] to a frequency span [GHz] at ``ref_nm``."""
    return C_LIGHT * np.asarray(delta_nm) / ref_nm**2


def ghz_to_nm(delta_ghz: ArrayLike, ref_nm: float) -> NDArray | float:
    return np.asarray(delta_ghz) * ref_nm**2 / C_LIGHT


def wrap_symmetric(x: ArrayLike, period: float) -> NDArray:
    """Wrap ``x`` into ``[-period/2, period/2)``."""
    x = np.asarray(x, dtype=float)
    return x - period * np.floor(x / period + 0.5)


@dataclass(frozen=True)
class RingSpec:
    """Static geometry and calibration of one ring.

    Attributes
    ----------
    index : int
        Ring position in the cascade, 1..8.
    zero_bias_resonance : float
        Resonance wavelength with no heater bias [nm].
    fsr : float
        Free spectral range [nm].
    bw_3db : float
        Full 3-dB drop bandwidth [GHz].
    thermo_c2, thermo_c1 : float
        Heater polynomial ``shift = c2 * V**2 + c1 * V`` [nm/V**2, nm/V].
    max_voltage : float
        Heater drive limit [V].
    peak_drop_efficiency : float
        On-resonance drop power fraction.
    through_extinction_floor : float
        Lowest through-port power relative to input [dB].
    """

    index: int
    zero_bias_resonance: float
    fsr: float = DEFAULT_FSR_NM
    bw_3db: float = 80.0
    thermo_c2: float = DEFAULT_TUNING_EFFICIENCY * 1e3 / DEFAULT_HEATER_RESISTANCE
    thermo_c1: float = 0.0
    max_voltage: float = DEFAULT_MAX_VOLTAGE
    peak_drop_efficiency: float = 0.95
    through_extinction_floor: float = -25.0

    def __post_init__(self) -> None:
        if not 1 <= self.index <= N_RINGS:
            raise ValueError(f"ring index must be in 1..{N_RINGS}, got {self.index}")
        if self.fsr <= 0:
            raise ValueError(f"ring {self.index}: fsr must be positive")
        lo, hi = ADMISSIBLE_BW_GHZ
        if not lo <= self.bw_3db <= hi:
            raise ValueError(
                f"ring {self.index}: bw_3db={self.bw_3db} GHz outside [{lo}, {hi}]"
            )
        if self.thermo_c2 < 0 or self.thermo_c1 < 0:
            raise ValueError(f"ring {self.index}: heater coefficients must be >= 0")
        if not 0 < self.peak_drop_efficiency <= 1:
            raise ValueError(f"ring {self.index}: peak_drop_efficiency must be in (0, 1]")
        if self.max_voltage <= 0:
            raise ValueError(f"ring {self.index}: max_voltage must be positive")

    @property
    def floor_linear(self) -> float:
        return 10 ** (self.through_extinction_floor / 10)

    @property
    def max_shift(self) -> float:
        return resonance_shift(self, self.max_voltage)


@dataclass(frozen=True)
class DeviceSpec:
    rings: tuple[RingSpec, ...]
    input_coupling_loss: float = 10.0  # [dB]
    per_port_coupling_loss: float = 10.0  # [dB]
    tuning_efficiency: float = DEFAULT_TUNING_EFFICIENCY  # [nm/mW]
    heater_resistance: float = DEFAULT_HEATER_RESISTANCE  # [ohm]
    port_imbalance_db: float = 0.0
    operating_band: tuple[float, float] = (1528.0, 1568.0)  # [nm]

    def __post_init__(self) -> None:
        object.__setattr__(self, "rings", tuple(self.rings))
        object.__setattr__(self, "operating_band", tuple(self.operating_band))
        if len(self.rings) != N_RINGS:
            raise ValueError(f"device needs exactly {N_RINGS} rings, got {len(self.rings)}")
        for k, ring in enumerate(self.rings, start=1):
            if ring.index != k:
                raise ValueError(f"ring at cascade position {k} has index {ring.index}")
        res = [r.zero_bias_resonance for r in self.rings]
        if any(b <= a for a, b in zip(res, res[1:])):
            raise ValueError("zero-bias resonances must be strictly increasing")
        if self.tuning_efficiency <= 0 or self.heater_resistance <= 0:
            raise ValueError("tuning_efficiency and heater_resistance must be positive")
        if not 0 <= self.port_imbalance_db <= 2.0:
            raise ValueError("port_imbalance_db must be within [0, 2] dB")

    @property
    def total_loss_db(self) -> float:
        return self.input_coupling_loss + self.per_port_coupling_loss

    def ring(self, index: int) -> RingSpec:
        if not 1 <= index <= N_RINGS:
            raise DeviceDomainError(f"unknown port/ring {index!r}")
        return self.rings[index - 1]

    def port_loss_db(self, port: int | str) -> float:
        """Fiber-to-fiber coupling loss for ``port`` including any ripple."""
        loss = self.input_coupling_loss + self.per_port_coupling_loss
        if port != THROUGH:
            loss += self.port_imbalance_db * _RIPPLE_PATTERN[int(port) - 1]
        return loss

    def with_bandwidths(self, table: Sequence[float]) -> "DeviceSpec":
        if len(table) != N_RINGS:
            raise ValueError("bandwidth table needs one entry per ring")
        return replace(
            self, rings=tuple(replace(r, bw_3db=float(bw)) for r, bw in zip(self.rings, table))
        )

    def lossless(self, floor_db: float | None = None) -> "DeviceSpec":
        """Copy with zero coupling losses and, optionally, a new through floor."""
        rings = self.rings
        if floor_db is not None:
            rings = tuple(replace(r, through_extinction_floor=floor_db) for r in rings)
        return replace(
            self, rings=rings, input_coupling_loss=0.0, per_port_coupling_loss=0.0,
            port_imbalance_db=0.0,
        )


def default_device(
    bw_table: Sequence[float] = DEFAULT_BW_TABLE,
    *,
    first_resonance: float = DEFAULT_FIRST_RESONANCE_NM,
    spacing: float = DEFAULT_RING_SPACING_NM,
    fsr: float = DEFAULT_FSR_NM,
    tuning_efficiency: float = DEFAULT_TUNING_EFFICIENCY,
    heater_resistance: float = DEFAULT_HEATER_RESISTANCE,
    peak_drop_efficiency: float = 0.95,
    through_extinction_floor: float = -25.0,
    max_voltage: float = DEFAULT_MAX_VOLTAGE,
    input_coupling_loss: float = 10.0,
    per_port_coupling_loss: float = 10.0,
) -> DeviceSpec:
    """Eight rings spaced ``spacing`` nm apart with heater-limited tuning.

    The heater polynomial is purely quadratic, ``shift = eta * V**2 / R``,
    because the heater dissipates ``V**2 / R`` and the ring shifts ``eta`` nm
    per mW.
    """
    c2 = tuning_efficiency * 1e3 / heater_resistance
    rings = tuple(
        RingSpec(
            index=k + 1,
            zero_bias_resonance=first_resonance + k * spacing,
            fsr=fsr,
            bw_3db=float(bw_table[k]),
            thermo_c2=c2,
            thermo_c1=0.0,
            max_voltage=max_voltage,
            peak_drop_efficiency=peak_drop_efficiency,
            through_extinction_floor=through_extinction_floor,
        )
        for k in range(N_RINGS)
    )
    return DeviceSpec(
        rings=rings,
        input_coupling_loss=input_coupling_loss,
        per_port_coupling_loss=per_port_coupling_loss,
        tuning_efficiency=tuning_efficiency,
        heater_resistance=heater_resistance,
    )


def band_device(center_wavelength: float, base: DeviceSpec | None = None) -> DeviceSpec:
    """Device with the bandwidth table measured closest to ``center_wavelength``."""
    base = base or default_device()
    key = min(BAND_BW_TABLES, key=lambda w: abs(w - center_wavelength))
    return base.with_bandwidths(BAND_BW_TABLES[key])


# ---------------------------------------------------------------------------
# Thermo-optic tuning
# ---------------------------------------------------------------------------


def resonance_shift(spec: RingSpec, voltage: float) -> float:
    """Red shift [nm] of ``spec``'s resonance at heater ``voltage``."""
    if not (0.0 <= voltage <= spec.max_voltage * (1 + 1e-12)):
        raise DeviceDomainError(
            f"ring {spec.index}: voltage {voltage} V outside [0, {spec.max_voltage}] V"
        )
    return spec.thermo_c2 * voltage**2 + spec.thermo_c1 * voltage


@dataclass(frozen=True)
class ThermoFit:
    thermo_c2: float
    thermo_c1: float
    rms_residual: float


def fit_thermo_optic(voltages: ArrayLike, shifts: ArrayLike) -> ThermoFit:
    """Zero-intercept least-squares fit of ``shift = c2 V**2 + c1 V``.

    Both coefficients are constrained to be non-negative, so the fitted
    curve is always a valid monotone heater law.
    """
    v = np.asarray(voltages, dtype=float)
    s = np.asarray(shifts, dtype=float)
    if v.shape != s.shape or v.ndim != 1:
        raise ThermoFitError("voltages and shifts must be 1-D and equal length")
    if v.size < 3:
        raise ThermoFitError(f"need at least 3 samples, got {v.size}")
    if np.unique(v).size != v.size:
        raise ThermoFitError("voltages must be distinct")
    if np.any(s < 0):
        raise ThermoFitError("measured shifts must be non-negative")
    design = np.column_stack([v**2, v])
    if np.linalg.matrix_rank(design) < 2:
        raise ThermoFitError("rank-deficient design matrix")
    coef, _ = optimize.nnls(design, s)
    resid = s - design @ coef
    return ThermoFit(float(coef[0]), float(coef[1]), float(np.sqrt(np.mean(resid**2))))


@dataclass(frozen=True)
class RingState:
    """Applied bias of one ring and the resonance it produces."""

    voltage: float
    effective_resonance: float  # [nm]
    bw_factor: float = 1.0


def apply_bias(spec: RingSpec, voltage: float, bw_factor: float = 1.0) -> RingState:
    return RingState(
        voltage=float(voltage),
        effective_resonance=spec.zero_bias_resonance + resonance_shift(spec, voltage),
        bw_factor=bw_factor,
    )


def zero_bias_states(spec: DeviceSpec) -> tuple[RingState, ...]:
    return tuple(apply_bias(r, 0.0) for r in spec.rings)


# ---------------------------------------------------------------------------
# Single-ring responses
# ---------------------------------------------------------------------------


def _normalized_detuning(state: RingState, spec: RingSpec, freq_offset, ref_nm):
    ref = state.effective_resonance if ref_nm is None else ref_nm
    fsr_ghz = nm_to_ghz(spec.fsr, ref)
    delta = wrap_symmetric(freq_offset, fsr_ghz)
    return 2.0 * delta / (spec.bw_3db * state.bw_factor)


def drop_response(
    state: RingState, spec: RingSpec, freq_offset: ArrayLike, ref_nm: float | None = None
) -> NDArray:
    """Complex drop-port amplitude at ``freq_offset`` GHz from resonance.

    Single-pole Lorentzian: ``sqrt(peak) / (1 + j x)`` with ``x = 2 delta / BW``,
    so the power response is ``peak / (1 + x**2)`` and the phase ``-atan(x)``.
    The offset is wrapped by the FSR expressed in GHz at ``ref_nm``
    (default: the ring's effective resonance).
    """
    x = _normalized_detuning(state, spec, freq_offset, ref_nm)
    return np.sqrt(spec.peak_drop_efficiency) / (1.0 + 1j * x)


def through_response(
    state: RingState, spec: RingSpec, freq_offset: ArrayLike, ref_nm: float | None = None
) -> NDArray:
    """Complex through-port amplitude.

    Power is the energy complement of the drop power, clamped below by the
    extinction floor.
    """
    x = _normalized_detuning(state, spec, freq_offset, ref_nm)
    p = spec.peak_drop_efficiency
    power = np.maximum(1.0 - p / (1.0 + x**2), spec.floor_linear)
    phase = np.angle((1.0 - p) + 1j * x) - np.arctan(x)
    return np.sqrt(power) * np.exp(1j * phase)


# ---------------------------------------------------------------------------
# Whole-device responses
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PortResponse:
    port: int | str
    freq_offset: NDArray  # [GHz] relative to the reference wavelength
    values: NDArray  # complex amplitude

    @property
    def power(self) -> NDArray:
        return np.abs(self.values) ** 2


def _ring_offsets(spec: DeviceSpec, states, freqs, ref_nm):
    """Per-ring detuning [GHz] of every grid frequency, shape (8, n)."""
    out = np.empty((N_RINGS, freqs.size))
    for k, state in enumerate(states):
        ring_offset = nm_to_ghz(ref_nm - state.effective_resonance, ref_nm)
        out[k] = freqs - ring_offset
    return out


def _check_states(states) -> tuple[RingState, ...]:
    states = tuple(states)
    if len(states) != N_RINGS:
        raise DeviceDomainError(f"need {N_RINGS} ring states, got {len(states)}")
    return states


def device_port_response(
    spec: DeviceSpec,
    states: Sequence[RingState],
    port: int | str,
    freq_offset: ArrayLike,
    ref_wavelength: float,
    direction: Direction | str = Direction.FORWARD,
    *,
    include_losses: bool = True,
) -> PortResponse:
    """Input-to-port (FORWARD) or port-to-input (REVERSE) amplitude response.

    ``freq_offset`` is a GHz grid relative to ``ref_wavelength`` [nm]. Port is
    1..8 or :data:`THROUGH`.
    """
    direction = Direction(direction)
    states = _check_states(states)
    if port != THROUGH and port not in range(1, N_RINGS + 1):
        raise DeviceDomainError(f"unknown port {port!r}")
    freqs = np.atleast_1d(np.asarray(freq_offset, dtype=float))
    offsets = _ring_offsets(spec, states, freqs, ref_wavelength)

    last = N_RINGS if port == THROUGH else int(port) - 1
    # A reversed walk visits the same scalars in the opposite order.
    order = range(last) if direction is Direction.FORWARD else reversed(range(last))
    h = np.ones(freqs.size, dtype=complex)
    if direction is Direction.REVERSE and port != THROUGH:
        h = h * drop_response(states[last], spec.rings[last], offsets[last], ref_wavelength)
    for k in order:
        h = h * through_response(states[k], spec.rings[k], offsets[k], ref_wavelength)
    if direction is Direction.FORWARD and port != THROUGH:
        h = h * drop_response(states[last], spec.rings[last], offsets[last], ref_wavelength)
    if include_losses:
        h = h * 10 ** (-spec.port_loss_db(port) / 20)
    return PortResponse(port=port, freq_offset=freqs, values=h)


# ---------------------------------------------------------------------------
# Spectrum dumps
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SpectrumDump:
    wavelength: NDArray  # [nm]
    power_db: dict  # port -> NDArray [dB]
    resolution_pm: float

    def write_csv(self, path: str | Path) -> None:
        path = Path(path)
        try:
            with path.open("w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["wavelength_nm", "port", "power_db"])
                for port, values in self.power_db.items():
                    for wl, p in zip(self.wavelength, values):
                        writer.writerow([f"{wl:.4f}", port, f"{p:.3f}"])
        except OSError as exc:
            raise OSError(f"cannot write spectrum to {path}: {exc}") from exc


def dump_spectrum(
    spec: DeviceSpec,
    states: Sequence[RingState],
    resolution_pm: float = 1.44,
    start_nm: float | None = None,
    stop_nm: float | None = None,
    *,
    include_losses: bool = True,
    isolated: bool = False,
) -> SpectrumDump:
    """Tabulate every drop port and the through port over a wavelength span.

    Each ring's detuning is converted to GHz around its own resonance. With
    ``isolated`` every drop port shows its ring alone, without the upstream
    through-notches that otherwise pull neighbouring peaks by a few pm.
    """
    if resolution_pm <= 0:
        raise ValueError("resolution must be positive")
    states = _check_states(states)
    if start_nm is None or stop_nm is None:
        res = [s.effective_resonance for s in states]
        fsr = spec.rings[0].fsr
        pad = (fsr - (max(res) - min(res))) / 2
        start_nm = min(res) - pad if start_nm is None else start_nm
        stop_nm = start_nm + fsr if stop_nm is None else stop_nm
    step = resolution_pm * 1e-3
    n = int(np.floor((stop_nm - start_nm) / step + 1e-9)) + 1
    wl = start_nm + step * np.arange(n)

    remaining = np.ones(n)
    power: dict = {}
    for k, (state, ring) in enumerate(zip(states, spec.rings)):
        dlam = wrap_symmetric(state.effective_resonance - wl, ring.fsr)
        x = 2 * nm_to_ghz(dlam, state.effective_resonance) / (ring.bw_3db * state.bw_factor)
        drop = ring.peak_drop_efficiency / (1 + x**2)
        through = np.maximum(1 - drop, ring.floor_linear)
        port_power = drop if isolated else remaining * drop
        if include_losses:
            port_power = port_power * 10 ** (-spec.port_loss_db(k + 1) / 10)
        power[k + 1] = 10 * np.log10(port_power)
        remaining = remaining * through
    if include_losses:
        remaining = remaining * 10 ** (-spec.port_loss_db(THROUGH) / 10)
    power[THROUGH] = 10 * np.log10(remaining)
    return SpectrumDump(wavelength=wl, power_db=power, resolution_pm=resolution_pm)


@dataclass(frozen=True)
class PeakMeasurement:
    wavelength: float  # [nm]
    width_ghz: float


def measure_peak(dump: SpectrumDump, port: int) -> PeakMeasurement:
    """Peak wavelength and -3 dB width of the highest peak at ``port``.

    The width counts resolution bins within 3 dB of the peak, so it is
    quantized to one resolution step.
    """
    p = dump.power_db[port]
    i = int(np.argmax(p))
    above = p >= p[i] - 10 * np.log10(2.0)
    lo = i
    while lo > 0 and above[lo - 1]:
        lo -= 1
    hi = i
    while hi < p.size - 1 and above[hi + 1]:
        hi += 1
    peak_wl = float(dump.wavelength[i])
    width_nm = (hi - lo + 1) * dump.resolution_pm * 1e-3
    return PeakMeasurement(peak_wl, float(nm_to_ghz(width_nm, peak_wl)))
