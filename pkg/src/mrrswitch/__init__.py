"""Cascaded micro-ring wavelength switch: device model, planner and link simulator."""

__version__ = "0.1.0"

from .control import (
    ContractError,
    InfeasiblePlanError,
    RouteRequest,
    SwitchPlan,
    plan_energy,
    plan_multicast,
    plan_route,
    plan_unicast,
    shifts_to_voltages,
    verify_plan,
)
from .device import (
    DeviceDomainError,
    DeviceSpec,
    Direction,
    RingSpec,
    RingState,
    band_device,
    default_device,
    device_port_response,
    drop_response,
    dump_spectrum,
    fit_thermo_optic,
    resonance_shift,
    through_response,
)

__all__ = [
    "ContractError", "DeviceDomainError", "DeviceSpec", "Direction", "InfeasiblePlanError",
    "RingSpec", "RingState", "RouteRequest", "SwitchPlan", "band_device", "default_device",
    "device_port_response", "drop_response", "dump_spectrum", "fit_thermo_optic",
    "plan_energy", "plan_multicast", "plan_route", "plan_unicast", "resonance_shift",
    "shifts_to_voltages", "through_response", "verify_plan",
]
