"""Experiment configuration loaded from TOML.

Sections ``[device]``, ``[superchannel]``, ``[fiber]``, ``[noise]``, ``[dsp]``
and ``[sweep]`` are all optional; missing keys take the library defaults.
Example::

    [device]
    peak_drop_efficiency = 0.95
    guard_band_ghz = 450.0

    [device.bw_tables]
    1552 = [80, 85, 83, 76, 85, 78, 84, 77]

    [noise]
    rx_noise_psd_dbm_per_ghz = -70.0

    [sweep]
    wavelengths_nm = [1539.0, 1552.0, 1563.0]
    symbols = 32768
    multicast_groups = [
        {wavelength_nm = 1539.0, rings = [1, 2, 3]},
    ]
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .control import DEFAULT_DOWNSTREAM_GUARD_GHZ, DEFAULT_GUARD_BAND_GHZ, ParkPolicy
from .device import (
    BAND_BW_TABLES,
    DeviceSpec,
    N_RINGS,
    default_device,
)
from .dsp import DspConfig
from .phy import FiberSpec, NoiseSpec, SuperchannelSpec

DEFAULT_WAVELENGTHS = (1539.0, 1552.0, 1563.0)
DEFAULT_GROUPS = ((1539.0, (1, 2, 3)), (1552.0, (4, 5)), (1563.0, (6, 7, 8)))


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DeviceConfig:
    base: DeviceSpec = field(default_factory=default_device)
    bw_tables: tuple[tuple[float, tuple[float, ...]], ...] = tuple(
        (w, tuple(t)) for w, t in sorted(BAND_BW_TABLES.items())
    )
    guard_band: float = DEFAULT_GUARD_BAND_GHZ  # [GHz]
    park_policy: ParkPolicy = ParkPolicy.UPSTREAM
    voltage_resolution: float = 1e-3  # [V]
    downstream_guard: float = DEFAULT_DOWNSTREAM_GUARD_GHZ  # [GHz]

    def plan_kwargs(self) -> dict:
        return {"guard_band": self.guard_band, "park_policy": self.park_policy,
                "downstream_guard": self.downstream_guard}

    def for_band(self, wavelength: float) -> DeviceSpec:
        """Base device with the bandwidth table of the nearest band, if any."""
        if not self.bw_tables:
            return self.base
        _, table = min(self.bw_tables, key=lambda kv: abs(kv[0] - wavelength))
        return self.base.with_bandwidths(table)


@dataclass(frozen=True)
class SweepConfig:
    wavelengths: tuple[float, ...] = DEFAULT_WAVELENGTHS  # [nm]
    rings: tuple[int, ...] = tuple(range(1, N_RINGS + 1))
    multicast_groups: tuple[tuple[float, tuple[int, ...]], ...] = DEFAULT_GROUPS
    bidirectional_wavelengths: tuple[float, ...] = (1552.0,)
    symbols: int = 2**15
    seed: int = 1
    multicast_bw_factor: float = 0.93
    reconfiguration_latency_us: float = 10.0
    bitrate: float = 120.0  # [Gb/s]
    delay_fiber_m: float = 10.0
    adc_rate: float = 50.0  # [GSa/s]
    jobs: int = 1

    def __post_init__(self) -> None:
        for wl, rings in self.multicast_groups:
            if not 2 <= len(rings) <= 3:
                raise ConfigError(f"multicast group {rings} at {wl} nm must have 2 or 3 rings")
            if len(set(rings)) != len(rings) or not all(1 <= r <= N_RINGS for r in rings):
                raise ConfigError(f"multicast group {rings} has invalid ring indices")
        if not all(1 <= r <= N_RINGS for r in self.rings):
            raise ConfigError(f"ring indices must be within 1..{N_RINGS}")
        if self.symbols <= 0 or self.symbols % 8:
            raise ConfigError("symbols must be a positive multiple of 8")
        if not 0 < self.multicast_bw_factor <= 1:
            raise ConfigError("multicast_bw_factor must be within (0, 1]")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")


@dataclass(frozen=True)
class ExperimentConfig:
    device: DeviceConfig = field(default_factory=DeviceConfig)
    superchannel: SuperchannelSpec = field(default_factory=SuperchannelSpec)
    fiber: FiberSpec = field(default_factory=FiberSpec)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    dsp: DspConfig = field(default_factory=DspConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def __post_init__(self) -> None:
        lo, hi = self.device.base.operating_band
        for wl in (*self.sweep.wavelengths, *(g[0] for g in self.sweep.multicast_groups),
                   *self.sweep.bidirectional_wavelengths):
            if not lo <= wl <= hi:
                raise ConfigError(f"wavelength {wl} nm outside the device band [{lo}, {hi}] nm")
        if self.dsp.edge_symbols * 2 + self.dsp.min_symbols > self.sweep.symbols:
            raise ConfigError("too few symbols for the DSP edge trim and EVM minimum")

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, sweep=replace(self.sweep, seed=seed),
                       noise=replace(self.noise, seed=seed))

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _plain(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    if hasattr(obj, "value"):  # enums
        return obj.value
    return obj


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------

_DEVICE_KEYS = {
    "first_resonance_nm": "first_resonance",
    "spacing_nm": "spacing",
    "fsr_nm": "fsr",
    "tuning_efficiency": "tuning_efficiency",
    "heater_resistance": "heater_resistance",
    "peak_drop_efficiency": "peak_drop_efficiency",
    "through_extinction_floor_db": "through_extinction_floor",
    "max_voltage": "max_voltage",
    "input_coupling_loss_db": "input_coupling_loss",
    "per_port_coupling_loss_db": "per_port_coupling_loss",
}
_SC_KEYS = {
    "n_sub": "n_sub", "spacing_ghz": "spacing", "baud_gbaud": "baud", "rolloff": "rolloff",
    "modulation": "modulation", "ocnr_db": "ocnr_db", "flatness_db": "flatness_db",
    "samples_per_symbol": "samples_per_symbol",
}
_FIBER_KEYS = {
    "length_km": "length", "dispersion_ps_nm_km": "dispersion",
    "attenuation_db_km": "attenuation", "group_index": "group_index",
}
_NOISE_KEYS = {
    "master_linewidth_khz": "master_linewidth", "lo_linewidth_khz": "lo_linewidth",
    "booster_nf_db": "booster_nf", "preamp_nf_db": "preamp_nf",
    "launch_power_dbm": "launch_power", "preamp_power_dbm": "preamp_power",
    "received_power_dbm": "received_power", "rx_noise_psd_dbm_per_ghz": "rx_noise_psd",
    "lo_offset_ghz": "lo_offset", "seed": "seed",
}
_DSP_KEYS = {f.name: f.name for f in dataclasses.fields(DspConfig)}
_SWEEP_KEYS = {
    "wavelengths_nm": "wavelengths", "rings": "rings", "symbols": "symbols", "seed": "seed",
    "multicast_bw_factor": "multicast_bw_factor",
    "reconfiguration_latency_us": "reconfiguration_latency_us", "bitrate_gbps": "bitrate",
    "delay_fiber_m": "delay_fiber_m", "adc_rate_gsps": "adc_rate", "jobs": "jobs",
    "bidirectional_wavelengths_nm": "bidirectional_wavelengths",
}


def _pick(section: Mapping, keys: Mapping[str, str], name: str, extra: set[str] = frozenset()) -> dict:
    unknown = set(section) - set(keys) - set(extra)
    if unknown:
        raise ConfigError(f"[{name}] unknown keys: {', '.join(sorted(unknown))}")
    out = {}
    for k, attr in keys.items():
        if k in section:
            v = section[k]
            out[attr] = tuple(v) if isinstance(v, list) else v
    return out


def _device_config(sec: Mapping) -> DeviceConfig:
    kw = _pick(sec, _DEVICE_KEYS, "device",
               {"rings", "bw_tables", "guard_band_ghz", "downstream_guard_ghz", "park_policy",
                "voltage_resolution_v", "port_imbalance_db"})
    base = default_device(**kw)
    if "rings" in sec:
        rows = sec["rings"]
        if len(rows) != N_RINGS:
            raise ConfigError(f"[device] rings table needs {N_RINGS} entries")
        rings = []
        for r, ring in zip(rows, base.rings):
            try:
                rings.append(replace(
                    ring,
                    index=int(r.get("index", ring.index)),
                    zero_bias_resonance=float(r.get("zero_bias_resonance_nm", ring.zero_bias_resonance)),
                    bw_3db=float(r.get("bw_3db_ghz", ring.bw_3db)),
                    thermo_c2=float(r.get("thermo_c2", ring.thermo_c2)),
                    thermo_c1=float(r.get("thermo_c1", ring.thermo_c1)),
                ))
            except (TypeError, AttributeError) as exc:
                raise ConfigError(f"[device] bad ring entry {r!r}") from exc
        base = replace(base, rings=tuple(rings))
    if "port_imbalance_db" in sec:
        base = replace(base, port_imbalance_db=float(sec["port_imbalance_db"]))
    kwargs: dict[str, Any] = {"base": base}
    if "bw_tables" in sec:
        tables = []
        for wl, table in sec["bw_tables"].items():
            if len(table) != N_RINGS:
                raise ConfigError(f"[device.bw_tables] {wl} needs {N_RINGS} values")
            tables.append((float(wl), tuple(float(v) for v in table)))
        kwargs["bw_tables"] = tuple(sorted(tables))
    elif "rings" in sec:
        kwargs["bw_tables"] = ()  # an explicit ring table wins over band defaults
    if "guard_band_ghz" in sec:
        kwargs["guard_band"] = float(sec["guard_band_ghz"])
    if "downstream_guard_ghz" in sec:
        kwargs["downstream_guard"] = float(sec["downstream_guard_ghz"])
    if "park_policy" in sec:
        kwargs["park_policy"] = ParkPolicy(sec["park_policy"])
    if "voltage_resolution_v" in sec:
        kwargs["voltage_resolution"] = float(sec["voltage_resolution_v"])
    return DeviceConfig(**kwargs)


def from_mapping(data: Mapping) -> ExperimentConfig:
    """Build a config from parsed TOML (or any nested mapping)."""
    known = {"device", "superchannel", "fiber", "noise", "dsp", "sweep"}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown sections: {', '.join(sorted(unknown))}")
    try:
        device = _device_config(data.get("device", {}))
        sc = SuperchannelSpec(**_pick(data.get("superchannel", {}), _SC_KEYS, "superchannel"))
        fiber = FiberSpec(**_pick(data.get("fiber", {}), _FIBER_KEYS, "fiber"))
        noise = NoiseSpec(**_pick(data.get("noise", {}), _NOISE_KEYS, "noise"))
        dsp = DspConfig(**_pick(data.get("dsp", {}), _DSP_KEYS, "dsp"))
        sweep_sec = dict(data.get("sweep", {}))
        groups = sweep_sec.pop("multicast_groups", None)
        sweep_kw = _pick(sweep_sec, _SWEEP_KEYS, "sweep")
        if groups is not None:
            sweep_kw["multicast_groups"] = tuple(
                (float(g["wavelength_nm"]), tuple(int(r) for r in g["rings"])) for g in groups
            )
        sweep = SweepConfig(**sweep_kw)
        if "seed" in sweep_kw and "seed" not in data.get("noise", {}):
            noise = replace(noise, seed=sweep.seed)
        return ExperimentConfig(device, sc, fiber, noise, dsp, sweep)
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path | None) -> ExperimentConfig:
    """Read a TOML experiment file; ``None`` gives the defaults."""
    if path is None:
        return ExperimentConfig()
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return from_mapping(data)
