"""Software-defined switching planner for the cascaded MRR device.

A request names the input wavelength and a route bitmap (bit ``k`` set routes
to output port ``k``). The planner turns it into per-ring red shifts and
heater voltages:

* the drop ring is moved onto the input wavelength (unicast) or onto an
  equalizing detuning from it (multicast);
* every unselected ring upstream of the last drop ring is parked outside an
  exclusion zone around the signal, so it cannot steal power; downstream
  rings only see the residual and stay idle unless ``park_policy="all"``;
* among admissible choices the lowest tuning power wins.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .device import (
    N_RINGS,
    THROUGH,
    DeviceSpec,
    RingSpec,
    RingState,
    apply_bias,
    device_port_response,
    ghz_to_nm,
    nm_to_ghz,
    through_response,
    wrap_symmetric,
)

DEFAULT_GUARD_BAND_GHZ = 450.0
# Rings after the last selected one only see the drop ring's residual.
DEFAULT_DOWNSTREAM_GUARD_GHZ = 95.0
DEFAULT_SIGNAL_BANDWIDTH_GHZ = 85.0
SHIFT_RESOLUTION_NM = 1e-3
RESONANCE_TOLERANCE_NM = 1e-4
_EPS_NM = 1e-9


class ContractError(ValueError):
    """Request violates a planner precondition."""


class InfeasiblePlanError(RuntimeError):
    """No admissible ring configuration realizes the request."""


class Role(str, enum.Enum):
    DROP = "drop"
    PARKED = "parked"
    IDLE = "idle"


class ParkPolicy(str, enum.Enum):
    UPSTREAM = "upstream"
    ALL = "all"


@dataclass(frozen=True)
class RouteRequest:
    input_wavelength: float  # [nm]
    route_bitmap: tuple[bool, ...]
    bitrate: float = 120.0  # [Gb/s]
    signal_bandwidth: float = DEFAULT_SIGNAL_BANDWIDTH_GHZ  # [GHz]

    def __post_init__(self) -> None:
        bitmap = tuple(bool(b) for b in self.route_bitmap)
        object.__setattr__(self, "route_bitmap", bitmap)
        if len(bitmap) != N_RINGS:
            raise ContractError(f"route bitmap needs {N_RINGS} entries, got {len(bitmap)}")
        if not 1 <= sum(bitmap) <= 3:
            raise ContractError(f"route bitmap must select 1 to 3 ports, got {sum(bitmap)}")
        if self.bitrate <= 0:
            raise ContractError("bitrate must be positive")
        if self.signal_bandwidth < 0:
            raise ContractError("signal bandwidth must be non-negative")

    @classmethod
    def from_bits(cls, wavelength: float, bits: str | Sequence, **kwargs) -> "RouteRequest":
        if isinstance(bits, str):
            bits = [c == "1" for c in bits.strip()]
        return cls(input_wavelength=wavelength, route_bitmap=tuple(bits), **kwargs)

    @property
    def ports(self) -> tuple[int, ...]:
        return tuple(k + 1 for k, b in enumerate(self.route_bitmap) if b)

    @property
    def bitmap_string(self) -> str:
        return "".join("1" if b else "0" for b in self.route_bitmap)


@dataclass(frozen=True)
class MulticastSolution:
    detunings: tuple[float, ...]  # [GHz] ring resonance minus input frequency
    port_fractions: tuple[float, ...]
    through_fraction: float

    @property
    def imbalance_db(self) -> float:
        f = np.asarray(self.port_fractions)
        return float(10 * np.log10(f.max() / f.min()))


@dataclass(frozen=True)
class SwitchPlan:
    request: RouteRequest
    roles: tuple[Role, ...]
    targets: tuple[float, ...]  # effective resonances [nm]
    shifts: tuple[float, ...]  # [nm]
    voltages: tuple[float, ...]  # [V]
    states: tuple[RingState, ...]
    power_mw: float
    energy_fj_per_bit: float
    multicast: MulticastSolution | None = None

    @property
    def ports(self) -> tuple[int, ...]:
        return self.request.ports

    def to_dict(self) -> dict:
        out = {
            "wavelength_nm": self.request.input_wavelength,
            "bitmap": self.request.bitmap_string,
            "bitrate_gbps": self.request.bitrate,
            "rings": [
                {
                    "ring": k + 1,
                    "role": self.roles[k].value,
                    "target_nm": self.targets[k],
                    "shift_nm": self.shifts[k],
                    "voltage_v": self.voltages[k],
                }
                for k in range(N_RINGS)
            ],
            "power_mw": self.power_mw,
            "fj_per_bit": self.energy_fj_per_bit,
        }
        if self.multicast is not None:
            out["multicast"] = {
                "detunings_ghz": list(self.multicast.detunings),
                "port_fractions": list(self.multicast.port_fractions),
                "through_fraction": self.multicast.through_fraction,
            }
        return out

    def table(self) -> str:
        lines = [f"{'ring':>4} {'role':>6} {'target nm':>11} {'shift nm':>9} {'V':>7}"]
        for k in range(N_RINGS):
            lines.append(
                f"{k + 1:>4} {self.roles[k].value:>6} {self.targets[k]:>11.4f} "
                f"{self.shifts[k]:>9.4f} {self.voltages[k]:>7.4f}"
            )
        lines.append(f"power {self.power_mw:.4f} mW, {self.energy_fj_per_bit:.2f} fJ/bit")
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# Energy and voltage conversion
# ---------------------------------------------------------------------------


def plan_energy(shifts: Iterable[float] | SwitchPlan, spec: DeviceSpec, bitrate: float | None = None):
    """Total heater power [mW] and energy per bit [fJ/bit].

    ``power = sum(shift) / tuning_efficiency``; mW divided by Gb/s is pJ/bit.
    """
    if isinstance(shifts, SwitchPlan):
        bitrate = shifts.request.bitrate if bitrate is None else bitrate
        shifts = shifts.shifts
    if bitrate is None or bitrate <= 0:
        raise ValueError("bitrate must be positive")
    power = 0.0
    for s in shifts:
        power += s / spec.tuning_efficiency
    return power, power / bitrate * 1e3


def shift_to_voltage(ring: RingSpec, shift: float) -> float:
    """Positive root of ``c2 V**2 + c1 V = shift``."""
    if shift < 0:
        raise InfeasiblePlanError(f"ring {ring.index}: negative shift {shift} nm")
    if shift > ring.max_shift * (1 + 1e-12):
        raise InfeasiblePlanError(
            f"ring {ring.index}: shift {shift:.4f} nm exceeds {ring.max_shift:.4f} nm "
            f"reachable at {ring.max_voltage} V"
        )
    if shift == 0:
        return 0.0
    c2, c1 = ring.thermo_c2, ring.thermo_c1
    # Rationalized root; stays accurate when c2 is tiny.
    v = 2.0 * shift / (c1 + math.sqrt(c1 * c1 + 4.0 * c2 * shift))
    return min(v, ring.max_voltage)


def shifts_to_voltages(shifts: Sequence[float], spec: DeviceSpec) -> tuple[float, ...]:
    if len(shifts) != N_RINGS:
        raise ContractError(f"need {N_RINGS} shifts")
    for ring, s in zip(spec.rings, shifts):
        if not 0 <= s < ring.fsr:
            raise InfeasiblePlanError(f"ring {ring.index}: shift {s} nm outside [0, FSR)")
    return tuple(shift_to_voltage(r, s) for r, s in zip(spec.rings, shifts))


def quantize_voltages(voltages: Sequence[float], resolution: float = 1e-3) -> tuple[float, ...]:
    """Round drive voltages to the DAC step (default 1 mV)."""
    return tuple(round(v / resolution) * resolution for v in voltages)


# ---------------------------------------------------------------------------
# Planning
# ---------------------------------------------------------------------------


def _exclusion_half_width(req: RouteRequest, guard_band: float) -> float:
    return float(ghz_to_nm(req.signal_bandwidth / 2 + guard_band, req.input_wavelength))


def _is_clear(resonance: float, wavelength: float, fsr: float, half_width: float) -> bool:
    return abs(float(wrap_symmetric(resonance - wavelength, fsr))) >= half_width - _EPS_NM


def _park_shift(ring: RingSpec, wavelength: float, half_width: float) -> float:
    """Smallest grid shift that takes ``ring`` out of the exclusion zone."""
    if 2 * half_width >= ring.fsr:
        raise InfeasiblePlanError(
            f"ring {ring.index}: exclusion zone {2 * half_width:.3f} nm exceeds the FSR"
        )
    offset = float(wrap_symmetric(ring.zero_bias_resonance - wavelength, ring.fsr))
    if abs(offset) >= half_width - _EPS_NM:
        return 0.0
    k = max(0, math.ceil((half_width - offset) / SHIFT_RESOLUTION_NM - 1e-6))
    while k > 0 and _is_clear(ring.zero_bias_resonance + (k - 1) * SHIFT_RESOLUTION_NM,
                              wavelength, ring.fsr, half_width):
        k -= 1
    while not _is_clear(ring.zero_bias_resonance + k * SHIFT_RESOLUTION_NM,
                        wavelength, ring.fsr, half_width):
        k += 1
    shift = k * SHIFT_RESOLUTION_NM
    if shift > ring.max_shift:
        raise InfeasiblePlanError(f"ring {ring.index}: cannot park within drive range")
    return shift


def _shift_to_target(ring: RingSpec, target: float) -> float:
    """Red shift in ``[0, FSR)`` placing a resonance order on ``target``."""
    s = (target - ring.zero_bias_resonance) % ring.fsr
    if s >= ring.fsr - 1e-12:
        s = 0.0
    return s


def _validate(req: RouteRequest, spec: DeviceSpec) -> None:
    lo, hi = spec.operating_band
    if not lo <= req.input_wavelength <= hi:
        raise ContractError(
            f"wavelength {req.input_wavelength} nm outside operating band [{lo}, {hi}] nm"
        )


def _assemble(req, spec, roles, shifts, multicast=None, bw_factors=None) -> SwitchPlan:
    voltages = shifts_to_voltages(shifts, spec)
    bw_factors = bw_factors or (1.0,) * N_RINGS
    states = tuple(
        apply_bias(r, v, f) for r, v, f in zip(spec.rings, voltages, bw_factors)
    )
    targets = tuple(r.zero_bias_resonance + s for r, s in zip(spec.rings, shifts))
    power, energy = plan_energy(shifts, spec, req.bitrate)
    return SwitchPlan(
        request=req,
        roles=tuple(roles),
        targets=targets,
        shifts=tuple(float(s) for s in shifts),
        voltages=voltages,
        states=states,
        power_mw=power,
        energy_fj_per_bit=energy,
        multicast=multicast,
    )


def _parked_shifts(req, spec, guard_band, park_policy, downstream_guard=DEFAULT_DOWNSTREAM_GUARD_GHZ):
    """Shift per unselected ring (``None`` for selected ones) and its role.

    Under ``UPSTREAM`` a ring after the last selected one stays idle at zero
    bias unless it sits within ``downstream_guard`` of the signal, in which
    case it is parked out of that narrower zone.
    """
    policy = ParkPolicy(park_policy)
    half = _exclusion_half_width(req, guard_band)
    half_down = _exclusion_half_width(req, downstream_guard)
    last = max(req.ports)
    shifts, roles = [], []
    for k, ring in enumerate(spec.rings):
        if req.route_bitmap[k]:
            shifts.append(None)
            roles.append(Role.DROP)
        elif policy is ParkPolicy.ALL or k + 1 < last:
            shifts.append(_park_shift(ring, req.input_wavelength, half))
            roles.append(Role.PARKED)
        else:
            s = _park_shift(ring, req.input_wavelength, half_down)
            shifts.append(s)
            roles.append(Role.PARKED if s > 0 else Role.IDLE)
    return shifts, roles


def plan_unicast(
    req: RouteRequest,
    spec: DeviceSpec,
    *,
    guard_band: float = DEFAULT_GUARD_BAND_GHZ,
    park_policy: ParkPolicy | str = ParkPolicy.UPSTREAM,
    downstream_guard: float = DEFAULT_DOWNSTREAM_GUARD_GHZ,
) -> SwitchPlan:
    """Align the selected ring to the input wavelength and park upstream rings."""
    if len(req.ports) != 1:
        raise ContractError(f"unicast needs exactly one selected port, got {len(req.ports)}")
    _validate(req, spec)
    port = req.ports[0]
    shifts, roles = _parked_shifts(req, spec, guard_band, park_policy, downstream_guard)
    ring = spec.ring(port)
    s = _shift_to_target(ring, req.input_wavelength)
    if s > ring.max_shift:
        raise InfeasiblePlanError(
            f"ring {port}: {req.input_wavelength} nm needs a {s:.4f} nm shift, "
            f"beyond {ring.max_shift:.4f} nm"
        )
    shifts[port - 1] = s
    return _assemble(req, spec, roles, shifts)


def lorentzian_detuning(bw: float, peak: float, fraction: float) -> float:
    """Detuning [GHz] at which a ring drops ``fraction`` of the arriving power."""
    if fraction <= 0 or fraction > peak * (1 + 1e-12):
        raise InfeasiblePlanError(
            f"drop fraction {fraction:.6f} unreachable with peak efficiency {peak:.6f}"
        )
    return 0.5 * bw * math.sqrt(max(peak / fraction - 1.0, 0.0))


def _cw_through(ring: RingSpec, state: RingState, wavelength: float) -> float:
    offset = nm_to_ghz(wavelength - state.effective_resonance, wavelength)
    return float(np.abs(through_response(state, ring, offset, wavelength)) ** 2)


def _equalize(fraction, selected, spec, parked_through):
    """Per-stage drop ratios for equal per-port power ``fraction``.

    Returns ``(ratios, arriving)`` or ``None`` if some stage would need more
    than its ring's peak efficiency.
    """
    arriving = 1.0
    ratios, arrivals = [], []
    sel = set(selected)
    for k in range(N_RINGS):
        ring = spec.rings[k]
        if k + 1 in sel:
            d = fraction / arriving
            if d > ring.peak_drop_efficiency * (1 + 1e-12):
                return None
            d = min(d, ring.peak_drop_efficiency)
            ratios.append(d)
            arrivals.append(arriving)
            arriving *= max(1.0 - d, ring.floor_linear)
        else:
            arriving *= parked_through[k]
    return ratios, arrivals


def solve_multicast(
    req: RouteRequest,
    spec: DeviceSpec,
    parked_through: Sequence[float],
    *,
    bw_factor: float = 1.0,
    target_fraction: float | None = None,
) -> tuple[tuple[float, ...], tuple[float, ...], float]:
    """Unsigned detunings [GHz] that equalize the selected drop powers.

    The largest equal fraction is found by bisection; each stage then
    inverts its Lorentzian in closed form. Returns ``(detunings, fractions,
    through_fraction)``.
    """
    selected = req.ports
    if target_fraction is None:
        lo, hi = 0.0, 1.0
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if _equalize(mid, selected, spec, parked_through) is None:
                hi = mid
            else:
                lo = mid
            if hi - lo < 1e-15:
                break
        fraction = lo
    else:
        fraction = target_fraction
    solved = _equalize(fraction, selected, spec, parked_through)
    if solved is None or fraction <= 0:
        peaks = [spec.ring(p).peak_drop_efficiency for p in selected]
        raise InfeasiblePlanError(
            f"cannot equalize {len(selected)} ports at fraction {fraction:.4f} "
            f"with peak efficiencies {peaks}"
        )
    ratios, arrivals = solved
    detunings = []
    for port, d in zip(selected, ratios):
        ring = spec.ring(port)
        detunings.append(lorentzian_detuning(ring.bw_3db * bw_factor, ring.peak_drop_efficiency, d))
    fractions = tuple(a * d for a, d in zip(arrivals, ratios))
    through = 1.0
    for k in range(N_RINGS):
        if k + 1 in selected:
            d = ratios[selected.index(k + 1)]
            through *= max(1.0 - d, spec.rings[k].floor_linear)
        else:
            through *= parked_through[k]
    return tuple(detunings), fractions, through


def plan_multicast(
    req: RouteRequest,
    spec: DeviceSpec,
    *,
    guard_band: float = DEFAULT_GUARD_BAND_GHZ,
    park_policy: ParkPolicy | str = ParkPolicy.UPSTREAM,
    downstream_guard: float = DEFAULT_DOWNSTREAM_GUARD_GHZ,
    bw_factor: float = 1.0,
    target_fraction: float | None = None,
) -> SwitchPlan:
    """Overlap 2 or 3 passbands so each selected port drops equal power.

    Equalization is solved at the input wavelength in cascade order; the ring
    that can drop least relative to its arriving power ends up on resonance.
    Each detuned ring takes whichever Lorentzian side needs the smaller red
    shift. ``bw_factor`` narrows the selected rings' passbands.
    """
    if not 2 <= len(req.ports) <= 3:
        raise ContractError(f"multicast needs 2 or 3 selected ports, got {len(req.ports)}")
    _validate(req, spec)
    shifts, roles = _parked_shifts(req, spec, guard_band, park_policy, downstream_guard)
    parked_through = []
    for k, ring in enumerate(spec.rings):
        if shifts[k] is None:
            parked_through.append(1.0)
        else:
            state = apply_bias(ring, shift_to_voltage(ring, shifts[k]))
            parked_through.append(_cw_through(ring, state, req.input_wavelength))

    magnitudes, fractions, through = solve_multicast(
        req, spec, parked_through, bw_factor=bw_factor, target_fraction=target_fraction
    )
    signed = []
    for port, delta in zip(req.ports, magnitudes):
        ring = spec.ring(port)
        best = None
        # +delta GHz puts the resonance at a shorter wavelength.
        for sign in (1.0, -1.0):
            target = req.input_wavelength - sign * float(ghz_to_nm(delta, req.input_wavelength))
            s = _shift_to_target(ring, target)
            if best is None or s < best[0]:
                best = (s, sign * delta)
            if delta == 0:
                break
        s, d = best
        if s > ring.max_shift:
            raise InfeasiblePlanError(f"ring {port}: detuned target needs {s:.4f} nm")
        shifts[port - 1] = s
        signed.append(d)

    factors = tuple(bw_factor if b else 1.0 for b in req.route_bitmap)
    solution = MulticastSolution(tuple(signed), fractions, through)
    return _assemble(req, spec, roles, shifts, solution, factors)


def plan_route(req: RouteRequest, spec: DeviceSpec, **kwargs) -> SwitchPlan:
    if len(req.ports) == 1:
        kwargs.pop("bw_factor", None)
        kwargs.pop("target_fraction", None)
        return plan_unicast(req, spec, **kwargs)
    return plan_multicast(req, spec, **kwargs)


# ---------------------------------------------------------------------------
# Verification
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PlanDiagnostics:
    insertion_loss_db: dict  # selected port -> dB, coupling losses included
    port_power_db: dict  # every port -> band-averaged core power [dB]
    worst_crosstalk_db: float
    imbalance_db: float
    crosstalk_violation: bool
    imbalance_violation: bool
    resonance_errors_nm: tuple[float, ...] = field(default=())

    @property
    def ok(self) -> bool:
        return not (self.crosstalk_violation or self.imbalance_violation)


def verify_plan(
    plan: SwitchPlan,
    spec: DeviceSpec,
    band: tuple[float, float] | None = None,
    *,
    n_points: int = 401,
    crosstalk_limit_db: float = -20.0,
    imbalance_limit_db: float = 2.0,
) -> PlanDiagnostics:
    """Apply ``plan`` to the device model and integrate port powers over ``band``.

    ``band`` is a (low, high) GHz span relative to the input wavelength;
    default is the request's signal bandwidth. Crosstalk is the band-averaged
    power at unselected ports relative to the input, before coupling losses.
    """
    req = plan.request
    if band is None:
        band = (-req.signal_bandwidth / 2, req.signal_bandwidth / 2)
    freqs = np.linspace(band[0], band[1], n_points if band[1] > band[0] else 1)
    wl = req.input_wavelength
    core, with_loss = {}, {}
    for port in list(range(1, N_RINGS + 1)) + [THROUGH]:
        r = device_port_response(spec, plan.states, port, freqs, wl, include_losses=False)
        core[port] = float(np.mean(r.power))
        with_loss[port] = core[port] * 10 ** (-spec.port_loss_db(port) / 10)

    selected = set(req.ports)
    unselected = [p for p in range(1, N_RINGS + 1) if p not in selected]
    worst = max(10 * np.log10(max(core[p], 1e-300)) for p in unselected)
    sel_db = [10 * np.log10(with_loss[p]) for p in req.ports]
    imbalance = float(max(sel_db) - min(sel_db))
    errors = tuple(
        float(wrap_symmetric(plan.states[p - 1].effective_resonance - t, spec.ring(p).fsr))
        for p, t in zip(req.ports, (plan.targets[p - 1] for p in req.ports))
    )
    return PlanDiagnostics(
        insertion_loss_db={p: float(-10 * np.log10(with_loss[p])) for p in req.ports},
        port_power_db={p: float(10 * np.log10(max(v, 1e-300))) for p, v in core.items()},
        worst_crosstalk_db=float(worst),
        imbalance_db=imbalance,
        crosstalk_violation=bool(worst > crosstalk_limit_db),
        imbalance_violation=bool(len(selected) > 1 and imbalance > imbalance_limit_db),
        resonance_errors_nm=errors,
    )


# ---------------------------------------------------------------------------
# Surveys
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EnergySurvey:
    min_fj_per_bit: float
    max_fj_per_bit: float
    n_plans: int
    n_infeasible: int
    argmin: tuple[float, str]
    argmax: tuple[float, str]


def all_bitmaps(max_ports: int = 3) -> list[str]:
    out = []
    for n in range(1, max_ports + 1):
        for code in range(1 << N_RINGS):
            bits = [(code >> (N_RINGS - 1 - k)) & 1 for k in range(N_RINGS)]
            if sum(bits) == n:
                out.append("".join(map(str, bits)))
    return out


def energy_survey(
    spec: DeviceSpec,
    wavelengths: Iterable[float],
    *,
    bitrate: float = 120.0,
    max_ports: int = 3,
    **plan_kwargs,
) -> EnergySurvey:
    """Energy per bit over every wavelength and bitmap with up to ``max_ports``."""
    lo, hi = math.inf, -math.inf
    argmin = argmax = (math.nan, "")
    n = bad = 0
    bitmaps = all_bitmaps(max_ports)
    for wl in wavelengths:
        for bits in bitmaps:
            req = RouteRequest.from_bits(float(wl), bits, bitrate=bitrate)
            try:
                plan = plan_route(req, spec, **plan_kwargs)
            except InfeasiblePlanError:
                bad += 1
                continue
            n += 1
            e = plan.energy_fj_per_bit
            if e < lo:
                lo, argmin = e, (float(wl), bits)
            if e > hi:
                hi, argmax = e, (float(wl), bits)
    return EnergySurvey(lo, hi, n, bad, argmin, argmax)


def c_band_grid(step_ghz: float = 50.0, start_nm: float = 1530.0, stop_nm: float = 1565.0):
    """Wavelengths on a uniform frequency grid spanning ``[start_nm, stop_nm]``."""
    c = 299_792_458.0
    f_hi = c / start_nm  # [GHz] since nm and GHz scale together
    f_lo = c / stop_nm
    n = int(math.floor((f_hi - f_lo) / step_ghz)) + 1
    return [c / (f_lo + k * step_ghz) for k in range(n)]
