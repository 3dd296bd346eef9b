"""Network model: buses, branches, constant-impedance loads, admittance matrix.

Loads are folded into the admittance matrix as constant impedances computed
from their nominal power at 1.0 p.u. voltage, which keeps the network
equations linear in the bus voltages. Voltages are carried as rectangular
complex numbers; magnitude/angle are derived views.

Models are immutable after construction; disturbances return modified
copies, so a model can be shared read-only across parallel runs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .machine import MachineParams
from .util import fingerprint

PRESETS = ("ieee9", "ieee57")
BUS_KINDS = ("generator-terminal", "load", "connection")


class NetworkSchemaError(ValueError):
    """Schema violation; the message names the offending field path."""


@dataclass(frozen=True)
class Bus:
    id: int
    kind: str
    base_voltage: float = 1.0


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    series_impedance: complex
    shunt_susceptance: float = 0.0  # total line charging, half per side


@dataclass(frozen=True)
class Load:
    bus: int
    admittance: complex


@dataclass(frozen=True)
class MachineSpec:
    bus: int
    params: MachineParams


@dataclass(frozen=True)
class Disturbance:
    """A scheduled step change.

    ``mechanical-power-step`` targets a machine by its 1-based machine
    number; ``load-admittance-step`` targets a bus id and adds the complex
    delta to the load admittance there (creating a load if none exists).
    """

    kind: str
    target: int
    magnitude: complex
    time: float

    def __post_init__(self):
        if self.kind not in ("mechanical-power-step", "load-admittance-step"):
            raise NetworkSchemaError(f"disturbance.kind: unknown kind {self.kind!r}")
        if self.time < 0.0:
            raise NetworkSchemaError("disturbance.time: must be >= 0")


@dataclass(frozen=True)
class NetworkModel:
    buses: tuple
    branches: tuple
    loads: tuple
    machines: tuple
    nominal_frequency: float
    ybus: np.ndarray

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_machines(self) -> int:
        return len(self.machines)

    def machine_at(self, number: int) -> MachineSpec:
        """Machine by 1-based machine number."""
        if not 1 <= number <= len(self.machines):
            raise NetworkSchemaError(f"unknown machine number {number}")
        return self.machines[number - 1]

    def content_fingerprint(self) -> str:
        values = {"frequency_hz": self.nominal_frequency, "n_bus": self.n_bus}
        for b in self.branches:
            key = f"branch_{b.from_bus}_{b.to_bus}"
            values[key + "_zre"] = b.series_impedance.real
            values[key + "_zim"] = b.series_impedance.imag
            values[key + "_b"] = b.shunt_susceptance
        for ld in self.loads:
            values[f"load_{ld.bus}_re"] = ld.admittance.real
            values[f"load_{ld.bus}_im"] = ld.admittance.imag
        for i, m in enumerate(self.machines):
            p = m.params
            values[f"m{i}_bus"] = m.bus
            for name in ("H", "D", "X_d", "Xd_p", "X_q", "Xq_p", "R_s", "P_m", "E_fd"):
                values[f"m{i}_{name}"] = getattr(p, name)
            values[f"m{i}_classical"] = p.classical
            if p.e_q_prime_pin is not None:
                values[f"m{i}_pin"] = p.e_q_prime_pin
        return fingerprint(values)


def build_ybus(buses, branches, loads) -> np.ndarray:
    """Dense bus admittance matrix with loads on the diagonal."""
    n = len(buses)
    y = np.zeros((n, n), dtype=complex)
    for k, br in enumerate(branches):
        z = complex(br.series_impedance)
        if z == 0:
            raise NetworkSchemaError(f"branches[{k}].series_impedance: must be nonzero")
        ys = 1.0 / z
        half_shunt = 0.5j * br.shunt_susceptance
        i, j = br.from_bus, br.to_bus
        y[i, i] += ys + half_shunt
        y[j, j] += ys + half_shunt
        y[i, j] -= ys
        y[j, i] -= ys
    for ld in loads:
        y[ld.bus, ld.bus] += ld.admittance
    return y


def _finish(buses, branches, loads, machines, frequency) -> NetworkModel:
    ybus = build_ybus(buses, branches, loads)
    ybus.setflags(write=False)
    return NetworkModel(
        buses=tuple(buses),
        branches=tuple(branches),
        loads=tuple(loads),
        machines=tuple(machines),
        nominal_frequency=float(frequency),
        ybus=ybus,
    )


def _require(mapping, key, path, kind=(int, float)):
    if key not in mapping:
        raise NetworkSchemaError(f"{path}.{key}: missing required field")
    val = mapping[key]
    if kind is not None and not isinstance(val, kind) or isinstance(val, bool):
        raise NetworkSchemaError(f"{path}.{key}: expected number, got {val!r}")
    return val


def _parse_document(doc) -> NetworkModel:
    if not isinstance(doc, dict):
        raise NetworkSchemaError("document: top level must be a mapping")
    frequency = _require(doc, "frequency_hz", "document")
    if frequency <= 0:
        raise NetworkSchemaError("document.frequency_hz: must be positive")

    raw_buses = doc.get("buses")
    if not isinstance(raw_buses, list) or not raw_buses:
        raise NetworkSchemaError("buses: must be a non-empty list")
    buses = []
    seen = set()
    for k, rb in enumerate(raw_buses):
        bid = _require(rb, "id", f"buses[{k}]", kind=int)
        kind = rb.get("kind", "connection")
        if kind not in BUS_KINDS:
            raise NetworkSchemaError(f"buses[{k}].kind: unknown kind {kind!r}")
        if bid in seen:
            raise NetworkSchemaError(f"buses[{k}].id: duplicate id {bid}")
        seen.add(bid)
        buses.append(Bus(id=bid, kind=kind, base_voltage=float(rb.get("base_voltage", 1.0))))
    buses.sort(key=lambda b: b.id)
    if [b.id for b in buses] != list(range(len(buses))):
        raise NetworkSchemaError("buses: ids must be contiguous from 0")
    n = len(buses)

    def check_bus(value, path):
        if not isinstance(value, int) or isinstance(value, bool) or not 0 <= value < n:
            raise NetworkSchemaError(f"{path}: references unknown bus {value!r}")
        return value

    branches = []
    for k, rb in enumerate(doc.get("branches", [])):
        path = f"branches[{k}]"
        i = check_bus(_require(rb, "from", path, kind=int), f"{path}.from")
        j = check_bus(_require(rb, "to", path, kind=int), f"{path}.to")
        if i == j:
            raise NetworkSchemaError(f"{path}: from and to must differ")
        r = float(_require(rb, "r", path))
        x = float(_require(rb, "x", path))
        if r == 0.0 and x == 0.0:
            raise NetworkSchemaError(f"{path}: zero series impedance")
        branches.append(Branch(i, j, complex(r, x), float(rb.get("b_shunt", 0.0))))

    loads = []
    for k, rl in enumerate(doc.get("loads", [])):
        path = f"loads[{k}]"
        bus = check_bus(_require(rl, "bus", path, kind=int), f"{path}.bus")
        p = float(_require(rl, "p", path))
        q = float(_require(rl, "q", path))
        # constant-impedance conversion at 1.0 p.u. voltage
        loads.append(Load(bus=bus, admittance=complex(p, -q)))

    machines = []
    gen_buses = set()
    for k, rm in enumerate(doc.get("machines", [])):
        path = f"machines[{k}]"
        bus = check_bus(_require(rm, "bus", path, kind=int), f"{path}.bus")
        if bus in gen_buses:
            raise NetworkSchemaError(f"{path}.bus: second machine at bus {bus}")
        gen_buses.add(bus)
        two_axis = "x_q" in rm
        try:
            params = MachineParams(
                H=float(_require(rm, "h", path)),
                D=float(_require(rm, "d", path)),
                X_d=float(_require(rm, "x_d", path)),
                Xd_p=float(_require(rm, "x_d_prime", path)),
                R_s=float(rm.get("r_s", 0.0)),
                P_m=float(_require(rm, "p_m", path)),
                E_fd=float(rm.get("e_fd", 1.0)),
                classical=not two_axis,
                X_q=float(rm["x_q"]) if two_axis else None,
                Xq_p=float(rm["x_q_prime"]) if two_axis else None,
                Td0_p=float(rm["t_do_prime"]) if two_axis else None,
                Tq0_p=float(rm["t_qo_prime"]) if two_axis else None,
                e_q_prime_pin=(
                    float(rm["e_q_prime"]) if rm.get("e_q_prime") is not None else None
                ),
                v_setpoint=float(rm.get("v_setpoint", 1.0)),
            )
        except (KeyError, ValueError) as exc:
            raise NetworkSchemaError(f"{path}: {exc}") from exc
        machines.append(MachineSpec(bus=bus, params=params))

    for k, b in enumerate(buses):
        if b.kind == "generator-terminal" and b.id not in gen_buses:
            raise NetworkSchemaError(f"buses[{k}]: generator-terminal bus {b.id} has no machine")

    return _finish(buses, branches, loads, machines, frequency)


def load_network(source) -> NetworkModel:
    """Load a network from a preset name, a JSON file path, or a mapping."""
    if isinstance(source, dict):
        return _parse_document(source)
    if isinstance(source, (str, Path)):
        name = str(source)
        if name in PRESETS:
            text = resources.files("hybrid_dae").joinpath(f"data/{name}.json").read_text()
            return _parse_document(json.loads(text))
        path = Path(source)
        if not path.exists():
            raise NetworkSchemaError(f"network source {name!r}: no such preset or file")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise NetworkSchemaError(f"{name}: invalid JSON ({exc})") from exc
        return _parse_document(doc)
    raise NetworkSchemaError(f"unsupported network source type {type(source)!r}")


def network_residual(model: NetworkModel, machine_currents, v: np.ndarray) -> np.ndarray:
    """Current balance Re/Im stacked: injections minus Y.V, length 2*n_bus."""
    mismatch = -(model.ybus @ v)
    mismatch = np.asarray(mismatch, dtype=complex)
    for spec, inj in zip(model.machines, machine_currents):
        mismatch[spec.bus] += inj
    return np.concatenate([mismatch.real, mismatch.imag])


def apply_disturbance(model: NetworkModel, d: Disturbance) -> NetworkModel:
    """Return a modified copy of the model with the step applied."""
    if d.kind == "mechanical-power-step":
        idx = d.target - 1
        if not 0 <= idx < len(model.machines):
            raise NetworkSchemaError(f"disturbance.target: unknown machine number {d.target}")
        spec = model.machines[idx]
        new_params = replace(spec.params, P_m=spec.params.P_m + float(d.magnitude.real))
        machines = list(model.machines)
        machines[idx] = MachineSpec(bus=spec.bus, params=new_params)
        return _finish(model.buses, model.branches, model.loads, machines, model.nominal_frequency)

    if not 0 <= d.target < model.n_bus:
        raise NetworkSchemaError(f"disturbance.target: unknown bus id {d.target}")
    loads = list(model.loads)
    for k, ld in enumerate(loads):
        if ld.bus == d.target:
            loads[k] = Load(bus=ld.bus, admittance=ld.admittance + complex(d.magnitude))
            break
    else:
        loads.append(Load(bus=d.target, admittance=complex(d.magnitude)))
    return _finish(model.buses, model.branches, loads, model.machines, model.nominal_frequency)
