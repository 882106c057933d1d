"""Sweep runner: plan, transmit, switch, receive and score every sub-channel.

For every band the transmitter, fibre and pre-amplifier are simulated once.
Each switch configuration then filters that shared field, a variable
attenuator restores the operating received power, and each sub-channel goes
through coherent detection and the receiver DSP. Noise streams depend only on
(seed, band, stage, sub-channel), so rows that differ only in ring, mode or
direction see identical noise.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import math
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import partial
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy

from . import __version__
from .config import ExperimentConfig
from .control import (
    ContractError,
    InfeasiblePlanError,
    RouteRequest,
    SwitchPlan,
    plan_energy,
    plan_multicast,
    plan_unicast,
)
from .device import DeviceDomainError, DeviceSpec, Direction, device_port_response
from .dsp import process_subchannel
from .phy import (
    OpticalField,
    amplify,
    apply_switch,
    attenuate,
    coherent_receive,
    generate_comb,
    modulate_superchannel,
    payload_bits,
    propagate_fiber,
    stream_rng,
)


class Mode(str, enum.Enum):
    UNICAST = "unicast"
    MULTICAST = "multicast"
    BIDIRECTIONAL = "bidirectional"
    BASELINE = "baseline"


COLUMNS = (
    "wavelength_nm", "mode", "group", "ring", "direction", "subchannel",
    "evm_percent", "ber", "fec_pass", "power_mw", "fj_per_bit",
    "port_power_dbm", "rx_power_dbm", "status",
)


@dataclass(frozen=True)
class SweepRow:
    wavelength_nm: float
    mode: str
    group: str  # selected rings joined by '+', '-' for baseline
    ring: int  # 0 for baseline
    direction: str
    subchannel: int
    evm_percent: float
    ber: float
    fec_pass: bool
    power_mw: float
    fj_per_bit: float
    port_power_dbm: float  # at the switch output, before the attenuator
    rx_power_dbm: float
    status: str = "ok"

    @property
    def key(self) -> tuple:
        return (self.wavelength_nm, self.mode, self.group, self.ring, self.direction, self.subchannel)

    def formatted(self) -> dict:
        """Canonical, fixed-precision representation used by every writer."""
        return {
            "wavelength_nm": f"{self.wavelength_nm:.3f}",
            "mode": self.mode,
            "group": self.group,
            "ring": str(self.ring),
            "direction": self.direction,
            "subchannel": str(self.subchannel),
            "evm_percent": _fmt(self.evm_percent, ".2f"),
            "ber": _fmt(self.ber, ".2e"),
            "fec_pass": "true" if self.fec_pass else "false",
            "power_mw": _fmt(self.power_mw, ".10g"),
            "fj_per_bit": _fmt(self.fj_per_bit, ".10g"),
            "port_power_dbm": _fmt(self.port_power_dbm, ".3f"),
            "rx_power_dbm": _fmt(self.rx_power_dbm, ".3f"),
            "status": self.status,
        }


def _fmt(x: float, spec: str) -> str:
    return "nan" if x is None or not math.isfinite(x) else format(x, spec)


@dataclass
class SweepResult:
    rows: list[SweepRow]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.rows = sorted(self.rows, key=lambda r: r.key)

    def select(self, **match) -> list[SweepRow]:
        return [r for r in self.rows if all(getattr(r, k) == v for k, v in match.items())]

    def merge(self, other: "SweepResult") -> "SweepResult":
        meta = dict(self.metadata)
        meta["modes"] = sorted(set(self.metadata.get("modes", [])) | set(other.metadata.get("modes", [])))
        return SweepResult(self.rows + other.rows, meta)

    @property
    def all_infeasible(self) -> bool:
        return bool(self.rows) and all(r.status == "infeasible" for r in self.rows)


# ---------------------------------------------------------------------------
# Signal path
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class BandSignal:
    """Shared transmitter output for one band, taken at the switch input."""

    wavelength: float
    field: OpticalField
    symbols: np.ndarray  # (n_sub, n_symbols)


def transmit(cfg: ExperimentConfig, wavelength: float) -> BandSignal:
    sc = replace(cfg.superchannel, center_wavelength=wavelength)
    seed = cfg.sweep.seed
    n_sym = cfg.sweep.symbols
    noise = replace(cfg.noise, seed=seed)
    tones = generate_comb(sc, noise, n_sym)
    bits = payload_bits(sc, n_sym, seed)
    field_, symbols = modulate_superchannel(
        tones, bits, sc, delay_fiber_m=cfg.sweep.delay_fiber_m, group_index=cfg.fiber.group_index
    )
    field_ = amplify(field_, noise.launch_power, noise.booster_nf, stream_rng(seed, wavelength, "booster"))
    field_ = propagate_fiber(field_, cfg.fiber)
    field_ = amplify(field_, noise.preamp_power, noise.preamp_nf, stream_rng(seed, wavelength, "preamp"))
    return BandSignal(wavelength, field_, symbols)


def nominal_loss_db(spec: DeviceSpec | None, plan: SwitchPlan | None, port: int, wavelength: float,
                    direction=Direction.FORWARD) -> float:
    """Port loss for a CW tone at the band centre, which the attenuator compensates."""
    if spec is None:
        return 0.0
    h = device_port_response(spec, plan.states, port, [0.0], wavelength, direction).values[0]
    return -10 * np.log10(abs(h) ** 2)


def receive_rows(
    cfg: ExperimentConfig,
    band: BandSignal,
    spec: DeviceSpec | None,
    plan: SwitchPlan | None,
    port: int,
    *,
    mode: Mode,
    group: str,
    direction: Direction = Direction.FORWARD,
) -> list[SweepRow]:
    """Switch the band's field to ``port`` and score all sub-channels."""
    noise, sc = cfg.noise, cfg.superchannel
    seed, wl = cfg.sweep.seed, band.wavelength
    out = apply_switch(band.field, spec, plan, port, direction)
    port_power = out.power_dbm
    voa = noise.preamp_power - noise.received_power - nominal_loss_db(spec, plan, port, wl, direction)
    out = attenuate(out, voa)
    rx_power = out.power_dbm
    psd = 10 ** (noise.rx_noise_psd / 10) if math.isfinite(noise.rx_noise_psd) else 0.0
    offsets = replace(sc, center_wavelength=wl).offsets
    power_mw = plan.power_mw if plan is not None else 0.0
    fj = plan.energy_fj_per_bit if plan is not None else 0.0
    rows = []
    for k, f_sub in enumerate(offsets, start=1):
        bb = coherent_receive(
            out, f_sub,
            lo_linewidth=noise.lo_linewidth, lo_offset=noise.lo_offset, noise_psd=psd,
            adc_rate=cfg.sweep.adc_rate,
            rng_phase=stream_rng(seed, wl, "lo_phase", k), rng_noise=stream_rng(seed, wl, "rx_noise", k),
        )
        res = process_subchannel(bb.samples, bb.sample_rate, band.symbols[k - 1], cfg.dsp)
        rows.append(SweepRow(
            wavelength_nm=wl, mode=mode.value, group=group, ring=port if spec is not None else 0,
            direction=Direction(direction).value, subchannel=k,
            evm_percent=res.evm_percent, ber=res.ber, fec_pass=res.fec_pass,
            power_mw=power_mw, fj_per_bit=fj, port_power_dbm=port_power, rx_power_dbm=rx_power,
        ))
    return rows


def _infeasible_rows(cfg, wl, mode, group, ring, direction) -> list[SweepRow]:
    nan = float("nan")
    return [
        SweepRow(wl, mode.value, group, ring, Direction(direction).value, k, nan, nan, False,
                 nan, nan, nan, nan, status="infeasible")
        for k in range(1, cfg.superchannel.n_sub + 1)
    ]


def _bitmap(ports: Iterable[int]) -> str:
    sel = set(ports)
    return "".join("1" if k in sel else "0" for k in range(1, 9))


# ---------------------------------------------------------------------------
# Per-band jobs
# ---------------------------------------------------------------------------


def _band_job(cfg: ExperimentConfig, mode: Mode, wavelength: float) -> list[SweepRow]:
    band = transmit(cfg, wavelength)
    spec = cfg.device.for_band(wavelength)
    bitrate = cfg.sweep.bitrate
    rows: list[SweepRow] = []
    if mode is Mode.BASELINE:
        return receive_rows(cfg, band, None, None, 0, mode=mode, group="-")
    if mode is Mode.MULTICAST:
        for wl, rings in cfg.sweep.multicast_groups:
            if wl != wavelength:
                continue
            group = "+".join(map(str, rings))
            try:
                req = RouteRequest.from_bits(wl, _bitmap(rings), bitrate=bitrate)
                plan = plan_multicast(req, spec, bw_factor=cfg.sweep.multicast_bw_factor, **cfg.device.plan_kwargs())
            except (InfeasiblePlanError, ContractError, DeviceDomainError):
                for r in rings:
                    rows += _infeasible_rows(cfg, wl, mode, group, r, Direction.FORWARD)
                continue
            for r in rings:
                rows += receive_rows(cfg, band, spec, plan, r, mode=mode, group=group)
        return rows
    direction = Direction.REVERSE if mode is Mode.BIDIRECTIONAL else Direction.FORWARD
    for ring in cfg.sweep.rings:
        try:
            req = RouteRequest.from_bits(wavelength, _bitmap([ring]), bitrate=bitrate)
            plan = plan_unicast(req, spec, **cfg.device.plan_kwargs())
        except (InfeasiblePlanError, ContractError, DeviceDomainError):
            rows += _infeasible_rows(cfg, wavelength, mode, str(ring), ring, direction)
            continue
        rows += receive_rows(cfg, band, spec, plan, ring, mode=mode, group=str(ring), direction=direction)
    return rows


def _metadata(cfg: ExperimentConfig, modes: Sequence[Mode]) -> dict:
    return {
        "modes": sorted(m.value for m in modes),
        "seed": cfg.sweep.seed,
        "symbols": cfg.sweep.symbols,
        "config_hash": cfg.config_hash(),
        "reconfiguration_latency_us": cfg.sweep.reconfiguration_latency_us,
        "versions": {
            "mrrswitch": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
    }


def _run(cfg: ExperimentConfig, mode: Mode, wavelengths: Sequence[float],
         progress: Callable[[str], None] | None = None) -> SweepResult:
    wavelengths = list(dict.fromkeys(wavelengths))
    job = partial(_band_job, cfg, mode)
    rows: list[SweepRow] = []
    if cfg.sweep.jobs > 1 and len(wavelengths) > 1:
        with ProcessPoolExecutor(max_workers=cfg.sweep.jobs) as pool:
            for wl, part in zip(wavelengths, pool.map(job, wavelengths)):
                rows += part
                if progress:
                    progress(f"{mode.value} {wl} nm done")
    else:
        for wl in wavelengths:
            rows += job(wl)
            if progress:
                progress(f"{mode.value} {wl} nm done")
    return SweepResult(rows, _metadata(cfg, [mode]))


def run_baseline_sweep(cfg: ExperimentConfig, progress=None) -> SweepResult:
    """No switch in the path: the reference for every band."""
    return _run(cfg, Mode.BASELINE, cfg.sweep.wavelengths, progress)


def run_unicast_sweep(cfg: ExperimentConfig, progress=None, *, baseline: bool = True) -> SweepResult:
    """Every configured ring at every band, plus the baseline rows."""
    res = _run(cfg, Mode.UNICAST, cfg.sweep.wavelengths, progress)
    if baseline:
        res = res.merge(run_baseline_sweep(cfg, progress))
    return res


def run_multicast_sweep(cfg: ExperimentConfig, progress=None) -> SweepResult:
    """Each configured group, one row set per member port."""
    return _run(cfg, Mode.MULTICAST, [g[0] for g in cfg.sweep.multicast_groups], progress)


def run_bidirectional_sweep(cfg: ExperimentConfig, progress=None) -> SweepResult:
    """Unicast with the signal entering at the drop port and leaving at the input."""
    return _run(cfg, Mode.BIDIRECTIONAL, cfg.sweep.bidirectional_wavelengths, progress)


SWEEPS = {
    Mode.UNICAST: run_unicast_sweep,
    Mode.MULTICAST: run_multicast_sweep,
    Mode.BIDIRECTIONAL: run_bidirectional_sweep,
    Mode.BASELINE: run_baseline_sweep,
}


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------


def render(result: SweepResult, fmt: str) -> str:
    fmt = fmt.lower()
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in result.rows:
            w.writerow(r.formatted())
        return buf.getvalue()
    if fmt == "json":
        doc = {"metadata": result.metadata, "columns": list(COLUMNS),
               "rows": [r.formatted() for r in result.rows]}
        return json.dumps(doc, indent=1, sort_keys=False) + "\n"
    raise ValueError(f"unknown format {fmt!r}")


def emit_results(result: SweepResult, fmt: str, path: str | Path) -> Path:
    """Write ``result`` as CSV or JSON with fixed decimal formatting.

    CSV columns are :data:`COLUMNS`; the JSON document carries the same rows
    as string-formatted records plus the run metadata.
    """
    text = render(result, fmt)
    path = Path(path)
    try:
        path.write_text(text)
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write results to {path}: {exc.strerror}") from exc
    return path


def _parse_row(d: dict) -> SweepRow:
    return SweepRow(
        wavelength_nm=float(d["wavelength_nm"]), mode=d["mode"], group=d["group"],
        ring=int(d["ring"]), direction=d["direction"], subchannel=int(d["subchannel"]),
        evm_percent=float(d["evm_percent"]), ber=float(d["ber"]),
        fec_pass=d["fec_pass"] == "true", power_mw=float(d["power_mw"]),
        fj_per_bit=float(d["fj_per_bit"]), port_power_dbm=float(d["port_power_dbm"]),
        rx_power_dbm=float(d["rx_power_dbm"]), status=d["status"],
    )


def read_results(path: str | Path) -> SweepResult:
    """Inverse of :func:`emit_results` (values at their written precision)."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise OSError(exc.errno, f"cannot read results from {path}: {exc.strerror}") from exc
    if path.suffix.lower() == ".json":
        doc = json.loads(text)
        return SweepResult([_parse_row(d) for d in doc["rows"]], doc.get("metadata", {}))
    return SweepResult([_parse_row(d) for d in csv.DictReader(io.StringIO(text))])


def row_energy_consistent(row: SweepRow, plan: SwitchPlan, spec: DeviceSpec, bitrate: float) -> bool:
    mw, fj = plan_energy(plan, spec, bitrate)
    return math.isclose(mw, row.power_mw, rel_tol=1e-9, abs_tol=1e-12) and math.isclose(
        fj, row.fj_per_bit, rel_tol=1e-9, abs_tol=1e-12
    )
