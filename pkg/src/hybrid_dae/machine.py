"""Two-axis synchronous machine: dynamics, stator currents, partials, equilibrium.

All quantities are per-unit on the system base except angles (rad) and time
constants (s). The rotor speed state ``d_omega`` is the frequency deviation
in per-unit of nominal frequency, so the angle equation reads
``d(delta)/dt = 2*pi*f_nominal*d_omega``.

The classical reduction (X_q = X'_q = X'_d, internal voltages frozen) keeps
the same four-state layout; the internal-voltage rows are identically zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .util import fingerprint, gauss_newton

STATE_NAMES = ("e_q_prime", "e_d_prime", "delta", "d_omega")
N_STATES = 4


class MachineError(ValueError):
    pass


@dataclass(frozen=True)
class MachineParams:
    """Constants and setpoints of one generator (Table-style data).

    ``classical`` freezes the internal voltages; ``e_q_prime_pin`` optionally
    fixes the frozen E'_q instead of back-computing it from E_fd at the
    equilibrium (needed when one trained surrogate is shared across systems).
    """

    H: float
    D: float
    X_d: float
    Xd_p: float
    R_s: float = 0.0
    P_m: float = 0.0
    E_fd: float = 1.0
    classical: bool = True
    X_q: float = None
    Xq_p: float = None
    Td0_p: float = None
    Tq0_p: float = None
    e_q_prime_pin: float = None
    v_setpoint: float = 1.0

    def __post_init__(self):
        if self.classical:
            # Classical reduction: q-axis collapses onto the d-axis transient
            # reactance; time constants are irrelevant.
            object.__setattr__(self, "X_q", self.Xd_p)
            object.__setattr__(self, "Xq_p", self.Xd_p)
        else:
            for name in ("X_q", "Xq_p", "Td0_p", "Tq0_p"):
                if getattr(self, name) is None:
                    raise MachineError(f"two-axis machine requires {name}")
            if self.e_q_prime_pin is not None:
                raise MachineError("e_q_prime_pin only applies to classical machines")
        if not (self.H > 0.0):
            raise MachineError(f"H must be positive, got {self.H}")
        if not (self.Xd_p > 0.0):
            raise MachineError(f"Xd_p must be positive, got {self.Xd_p}")
        if self.R_s**2 + self.Xd_p * self.Xq_p <= 0.0:
            raise MachineError("singular stator matrix: R_s^2 + Xd_p*Xq_p = 0")

    def dynamics_fingerprint(self, f_hz: float, e_q_prime: float, e_d_prime: float) -> str:
        """Digest of everything the state derivative depends on (frozen E' included)."""
        return fingerprint(
            {
                "H": self.H,
                "D": self.D,
                "Xd_p": self.Xd_p,
                "Xq_p": self.Xq_p,
                "X_d": self.X_d,
                "X_q": self.X_q,
                "R_s": self.R_s,
                "P_m": self.P_m,
                "classical": self.classical,
                "f_hz": f_hz,
                "e_q_prime": e_q_prime,
                "e_d_prime": e_d_prime,
            }
        )


@dataclass(frozen=True)
class MachineState:
    e_q_prime: float
    e_d_prime: float
    delta: float
    d_omega: float

    def as_array(self) -> np.ndarray:
        return np.array([self.e_q_prime, self.e_d_prime, self.delta, self.d_omega])

    @staticmethod
    def from_array(x) -> "MachineState":
        return MachineState(float(x[0]), float(x[1]), float(x[2]), float(x[3]))


class DqCurrents(NamedTuple):
    i_d: float
    i_q: float


def machine_currents(p: MachineParams, s: MachineState, V: float, theta: float) -> DqCurrents:
    """Stator currents from the 2x2 algebraic relation (closed-form inverse)."""
    det = p.R_s**2 + p.Xd_p * p.Xq_p
    if det == 0.0:
        raise MachineError("singular stator matrix (det = 0)")
    phi = s.delta - theta
    rd = s.e_d_prime - V * math.sin(phi)
    rq = s.e_q_prime - V * math.cos(phi)
    i_d = (p.R_s * rd + p.Xq_p * rq) / det
    i_q = (-p.Xd_p * rd + p.R_s * rq) / det
    return DqCurrents(i_d, i_q)


def machine_f(p: MachineParams, s: MachineState, V: float, theta: float, f_hz: float) -> np.ndarray:
    """State derivative [dE'_q, dE'_d, ddelta, d(d_omega)]/dt."""
    i_d, i_q = machine_currents(p, s, V, theta)
    if p.classical:
        f1 = 0.0
        f2 = 0.0
    else:
        f1 = (-s.e_q_prime - (p.X_d - p.Xd_p) * i_d + p.E_fd) / p.Td0_p
        f2 = (-s.e_d_prime + (p.X_q - p.Xq_p) * i_q) / p.Tq0_p
    f3 = 2.0 * math.pi * f_hz * s.d_omega
    f4 = (
        p.P_m
        - s.e_d_prime * i_d
        - s.e_q_prime * i_q
        - (p.Xq_p - p.Xd_p) * i_d * i_q
        - p.D * s.d_omega
    ) / (2.0 * p.H)
    return np.array([f1, f2, f3, f4])


def machine_f_batch(p: MachineParams, x: np.ndarray, V: np.ndarray, theta: np.ndarray, f_hz: float) -> np.ndarray:
    """Vectorized ``machine_f`` over rows of x (B,4) with per-row V, theta."""
    eq, ed, delta, dom = x[:, 0], x[:, 1], x[:, 2], x[:, 3]
    det = p.R_s**2 + p.Xd_p * p.Xq_p
    phi = delta - theta
    rd = ed - V * np.sin(phi)
    rq = eq - V * np.cos(phi)
    i_d = (p.R_s * rd + p.Xq_p * rq) / det
    i_q = (-p.Xd_p * rd + p.R_s * rq) / det
    out = np.empty_like(x)
    if p.classical:
        out[:, 0] = 0.0
        out[:, 1] = 0.0
    else:
        out[:, 0] = (-eq - (p.X_d - p.Xd_p) * i_d + p.E_fd) / p.Td0_p
        out[:, 1] = (-ed + (p.X_q - p.Xq_p) * i_q) / p.Tq0_p
    out[:, 2] = 2.0 * np.pi * f_hz * dom
    out[:, 3] = (
        p.P_m - ed * i_d - eq * i_q - (p.Xq_p - p.Xd_p) * i_d * i_q - p.D * dom
    ) / (2.0 * p.H)
    return out


def network_injection(p: MachineParams, s: MachineState, V: float, theta: float) -> complex:
    """Machine current in the network frame: (i_d + j i_q) * e^{j(delta - pi/2)}."""
    i_d, i_q = machine_currents(p, s, V, theta)
    sd, cd = math.sin(s.delta), math.cos(s.delta)
    return complex(i_d * sd + i_q * cd, -i_d * cd + i_q * sd)


class _CurrentPartials(NamedTuple):
    i_d: float
    i_q: float
    did: np.ndarray  # d i_d / d (e_q', e_d', delta, V, theta)
    diq: np.ndarray


def _current_partials(p: MachineParams, eq: float, ed: float, delta: float, V: float, theta: float) -> _CurrentPartials:
    det = p.R_s**2 + p.Xd_p * p.Xq_p
    phi = delta - theta
    sphi, cphi = math.sin(phi), math.cos(phi)
    rd = ed - V * sphi
    rq = eq - V * cphi
    i_d = (p.R_s * rd + p.Xq_p * rq) / det
    i_q = (-p.Xd_p * rd + p.R_s * rq) / det
    # rhs partials, then through the constant 2x2 inverse
    drd = np.array([0.0, 1.0, -V * cphi, -sphi, V * cphi])
    drq = np.array([1.0, 0.0, V * sphi, -cphi, -V * sphi])
    did = (p.R_s * drd + p.Xq_p * drq) / det
    diq = (-p.Xd_p * drd + p.R_s * drq) / det
    return _CurrentPartials(i_d, i_q, did, diq)


@dataclass
class MachineJacobians:
    """Analytic partials at one operating point.

    ``df_dx``/``dinj_dx`` are w.r.t. the state order of ``STATE_NAMES``;
    voltage partials are w.r.t. the rectangular pair (V_re, V_im). ``dinj``
    rows are (Re, Im) of the network-frame injection.
    """

    f: np.ndarray
    df_dx: np.ndarray      # (4, 4)
    df_dv: np.ndarray      # (4, 2) rect
    inj: complex
    dinj_dx: np.ndarray    # (2, 4)
    dinj_dv: np.ndarray    # (2, 2) rect
    i_d: float
    i_q: float


def _polar_to_rect_chain(V: float, theta: float) -> np.ndarray:
    """Rows: d(V, theta) / d(V_re, V_im)."""
    st, ct = math.sin(theta), math.cos(theta)
    return np.array([[ct, st], [-st / V, ct / V]])


def machine_jacobians(p: MachineParams, s: MachineState, V: float, theta: float, f_hz: float) -> MachineJacobians:
    # scalar arithmetic throughout: this sits on the per-iteration hot path
    eq, ed, delta, dom = s.e_q_prime, s.e_d_prime, s.delta, s.d_omega
    det = p.R_s**2 + p.Xd_p * p.Xq_p
    phi = delta - theta
    sphi, cphi = math.sin(phi), math.cos(phi)
    rd = ed - V * sphi
    rq = eq - V * cphi
    i_d = (p.R_s * rd + p.Xq_p * rq) / det
    i_q = (-p.Xd_p * rd + p.R_s * rq) / det
    # current partials w.r.t. (eq, ed, delta, V, theta)
    rs_det, xq_det, xd_det = p.R_s / det, p.Xq_p / det, p.Xd_p / det
    did0, diq0 = xq_det, rs_det                      # d/d eq
    did1, diq1 = rs_det, -xd_det                     # d/d ed
    drd2, drq2 = -V * cphi, V * sphi                 # d/d delta
    did2 = rs_det * drd2 + xq_det * drq2
    diq2 = -xd_det * drd2 + rs_det * drq2
    did3 = rs_det * (-sphi) + xq_det * (-cphi)       # d/d V
    diq3 = -xd_det * (-sphi) + rs_det * (-cphi)
    did4, diq4 = -did2, -diq2                        # d/d theta

    two_h = 2.0 * p.H
    omega_c = 2.0 * math.pi * f_hz
    c = p.Xq_p - p.Xd_p
    f4 = (p.P_m - ed * i_d - eq * i_q - c * i_d * i_q - p.D * dom) / two_h

    def df4(didk, diqk):
        return (-ed * didk - eq * diqk - c * (didk * i_q + i_d * diqk)) / two_h

    d40 = df4(did0, diq0) - i_q / two_h
    d41 = df4(did1, diq1) - i_d / two_h
    d42 = df4(did2, diq2)
    d43 = df4(did3, diq3)
    d44 = df4(did4, diq4)

    if p.classical:
        f1 = f2 = 0.0
        d10 = d11 = d12 = d13 = d14 = 0.0
        d20 = d21 = d22 = d23 = d24 = 0.0
    else:
        kd = (p.X_d - p.Xd_p) / p.Td0_p
        kq = (p.X_q - p.Xq_p) / p.Tq0_p
        f1 = (-eq + p.E_fd) / p.Td0_p - kd * i_d
        f2 = -ed / p.Tq0_p + kq * i_q
        d10 = -1.0 / p.Td0_p - kd * did0
        d11 = -kd * did1
        d12 = -kd * did2
        d13 = -kd * did3
        d14 = -kd * did4
        d20 = kq * diq0
        d21 = -1.0 / p.Tq0_p + kq * diq1
        d22 = kq * diq2
        d23 = kq * diq3
        d24 = kq * diq4

    f = np.array([f1, f2, omega_c * dom, f4])
    df_dx = np.array(
        [
            [d10, d11, d12, 0.0],
            [d20, d21, d22, 0.0],
            [0.0, 0.0, 0.0, omega_c],
            [d40, d41, d42, -p.D / two_h],
        ]
    )

    # polar -> rectangular chain
    st, ct = math.sin(theta), math.cos(theta)
    tv_re, tv_im = -st / V, ct / V
    df_dv = np.array(
        [
            [d13 * ct + d14 * tv_re, d13 * st + d14 * tv_im],
            [d23 * ct + d24 * tv_re, d23 * st + d24 * tv_im],
            [0.0, 0.0],
            [d43 * ct + d44 * tv_re, d43 * st + d44 * tv_im],
        ]
    )

    # injection I_net = (i_d + j i_q) e^{j(delta - pi/2)} and partials
    sd, cd = math.sin(delta), math.cos(delta)
    ire = i_d * sd + i_q * cd
    iim = -i_d * cd + i_q * sd

    def rot(didk, diqk):
        return didk * sd + diqk * cd, -didk * cd + diqk * sd

    dre0, dim0 = rot(did0, diq0)
    dre1, dim1 = rot(did1, diq1)
    dre2, dim2 = rot(did2, diq2)
    dre3, dim3 = rot(did3, diq3)
    dre4, dim4 = rot(did4, diq4)
    dre2 += i_d * cd - i_q * sd
    dim2 += i_d * sd + i_q * cd

    dinj_dx = np.array([[dre0, dre1, dre2, 0.0], [dim0, dim1, dim2, 0.0]])
    dinj_dv = np.array(
        [
            [dre3 * ct + dre4 * tv_re, dre3 * st + dre4 * tv_im],
            [dim3 * ct + dim4 * tv_re, dim3 * st + dim4 * tv_im],
        ]
    )

    return MachineJacobians(
        f=f,
        df_dx=df_dx,
        df_dv=df_dv,
        inj=complex(ire, iim),
        dinj_dx=dinj_dx,
        dinj_dv=dinj_dv,
        i_d=i_d,
        i_q=i_q,
    )


class EquilibriumError(RuntimeError):
    pass


@dataclass
class Equilibrium:
    states: list
    v: np.ndarray           # complex bus voltages
    iterations: int
    residual_inf: float
    model: object = None    # input model with the reference machine's P_m balanced


def equilibrium_residual(model, states, v) -> np.ndarray:
    """Stacked [machine f rows; network mismatch] at a candidate point."""
    from .netmodel import network_residual

    f_rows = []
    inj = []
    for spec, s in zip(model.machines, states):
        vb = v[spec.bus]
        V, theta = abs(vb), math.atan2(vb.imag, vb.real)
        f_rows.append(machine_f(spec.params, s, V, theta, model.nominal_frequency))
        inj.append(network_injection(spec.params, s, V, theta))
    g = network_residual(model, inj, v)
    return np.concatenate([np.concatenate(f_rows) if f_rows else np.zeros(0), g])


def init_equilibrium(model, tol: float = 1e-12, k_max: int = 60) -> Equilibrium:
    """Solve [f; g] = 0 by Newton from a flat start.

    Machine 1's rotor angle is pinned to zero as the angle reference, which
    makes the system overdetermined by one consistent equation (the global
    rotation symmetry); a least-squares Newton handles that.

    Classical machines fix E'_d at zero and back-compute the frozen E'_q so
    that electrical power equals P_m with the terminal voltage magnitude at
    the machine's ``v_setpoint`` (E_fd is unused in classical mode). A pinned
    E'_q removes both the setpoint row and the excitation unknown, so the
    terminal voltage floats instead. Two-axis machines keep their E_fd-based
    internal-voltage rows.

    Constant-impedance loads leave no slack for an arbitrary total
    generation, so machine 1 acts as the balancing reference: its power
    row is dropped and its P_m is back-computed from the solution. The
    returned ``model`` carries the balanced setpoint.
    """
    machines = model.machines
    n_bus = len(model.buses)
    n_mach = len(machines)
    if n_mach == 0:
        raise EquilibriumError("model has no machines")

    # Unknown layout per machine: [eq?, ed?, delta?, d_omega], then vre, vim.
    slots = []  # (machine index, name)
    for i, spec in enumerate(machines):
        p = spec.params
        if p.e_q_prime_pin is None:
            slots.append((i, "eq"))
        if not p.classical:
            slots.append((i, "ed"))
        if i != 0:
            slots.append((i, "delta"))
        slots.append((i, "dom"))
    n_state_unknowns = len(slots)
    n_unknowns = n_state_unknowns + 2 * n_bus

    gbus = model.ybus.real
    bbus = model.ybus.imag

    def unpack(u):
        eq = np.empty(n_mach)
        ed = np.zeros(n_mach)
        delta = np.zeros(n_mach)
        dom = np.zeros(n_mach)
        for i, spec in enumerate(machines):
            p = spec.params
            eq[i] = p.e_q_prime_pin if p.e_q_prime_pin is not None else 0.0
        for k, (i, name) in enumerate(slots):
            val = u[k]
            if name == "eq":
                eq[i] = val
            elif name == "ed":
                ed[i] = val
            elif name == "delta":
                delta[i] = val
            else:
                dom[i] = val
        vre = u[n_state_unknowns : n_state_unknowns + n_bus]
        vim = u[n_state_unknowns + n_bus :]
        return eq, ed, delta, dom, vre, vim

    # Equation layout per machine, then g. Classical machines with a free
    # E'_q are anchored by their terminal-voltage setpoint; two-axis machines
    # by the E_fd balance of the internal-voltage rows.
    rows = []
    for i, spec in enumerate(machines):
        p = spec.params
        if not p.classical:
            rows.append((i, "eq"))
            rows.append((i, "ed"))
        elif p.e_q_prime_pin is None:
            rows.append((i, "vset"))
        rows.append((i, "ddelta"))
        if i != 0:
            rows.append((i, "dom"))
    n_state_rows = len(rows)

    col_of = {key: k for k, key in enumerate(slots)}
    two_pi_f = 2.0 * math.pi * model.nominal_frequency

    def assemble(u):
        eq, ed, delta, dom, vre, vim = unpack(u)
        F = np.zeros(n_state_rows + 2 * n_bus)
        J = np.zeros((n_state_rows + 2 * n_bus, n_unknowns))

        inj_re = np.zeros(n_bus)
        inj_im = np.zeros(n_bus)
        for r, (i, name) in enumerate(rows):
            p = machines[i].params
            b = machines[i].bus
            V = math.hypot(vre[b], vim[b])
            theta = math.atan2(vim[b], vre[b])
            cp = _current_partials(p, eq[i], ed[i], delta[i], V, theta)
            chain = _polar_to_rect_chain(V, theta)

            def put(row, dvec):
                # dvec: partials w.r.t. (eq, ed, delta, V, theta)
                for name2, idx in (("eq", 0), ("ed", 1), ("delta", 2)):
                    key = (i, name2)
                    if key in col_of:
                        J[row, col_of[key]] += dvec[idx]
                rect = dvec[3:5] @ chain
                J[row, n_state_unknowns + b] += rect[0]
                J[row, n_state_unknowns + n_bus + b] += rect[1]

            if name == "vset":
                F[r] = V - p.v_setpoint
                J[r, n_state_unknowns + b] += vre[b] / V
                J[r, n_state_unknowns + n_bus + b] += vim[b] / V
            elif name == "eq":
                F[r] = -eq[i] - (p.X_d - p.Xd_p) * cp.i_d + p.E_fd
                d = -(p.X_d - p.Xd_p) * cp.did
                d = d.copy()
                d[0] += -1.0
                put(r, d)
            elif name == "ed":
                F[r] = -ed[i] + (p.X_q - p.Xq_p) * cp.i_q
                d = (p.X_q - p.Xq_p) * cp.diq
                d = d.copy()
                d[1] += -1.0
                put(r, d)
            elif name == "ddelta":
                F[r] = two_pi_f * dom[i]
                J[r, col_of[(i, "dom")]] = two_pi_f
            else:  # domega row
                c = p.Xq_p - p.Xd_p
                F[r] = (
                    p.P_m
                    - ed[i] * cp.i_d
                    - eq[i] * cp.i_q
                    - c * cp.i_d * cp.i_q
                    - p.D * dom[i]
                )
                d = -ed[i] * cp.did - eq[i] * cp.diq - c * (cp.did * cp.i_q + cp.i_d * cp.diq)
                d = d.copy()
                d[0] += -cp.i_q
                d[1] += -cp.i_d
                put(r, d)
                J[r, col_of[(i, "dom")]] += -p.D

        # network rows: injections minus Y V, split re/im
        for i, spec in enumerate(machines):
            p = spec.params
            b = spec.bus
            V = math.hypot(vre[b], vim[b])
            theta = math.atan2(vim[b], vre[b])
            cp = _current_partials(p, eq[i], ed[i], delta[i], V, theta)
            sd, cd = math.sin(delta[i]), math.cos(delta[i])
            ire = cp.i_d * sd + cp.i_q * cd
            iim = -cp.i_d * cd + cp.i_q * sd
            inj_re[b] += ire
            inj_im[b] += iim
            dire = cp.did * sd + cp.diq * cd
            diim = -cp.did * cd + cp.diq * sd
            dire[2] += cp.i_d * cd - cp.i_q * sd
            diim[2] += cp.i_d * sd + cp.i_q * cd
            chain = _polar_to_rect_chain(V, theta)
            for dvec, row in ((dire, n_state_rows + b), (diim, n_state_rows + n_bus + b)):
                for name2, idx in (("eq", 0), ("ed", 1), ("delta", 2)):
                    key = (i, name2)
                    if key in col_of:
                        J[row, col_of[key]] += dvec[idx]
                rect = dvec[3:5] @ chain
                J[row, n_state_unknowns + b] += rect[0]
                J[row, n_state_unknowns + n_bus + b] += rect[1]

        yv = model.ybus @ (vre + 1j * vim)
        F[n_state_rows : n_state_rows + n_bus] = inj_re - yv.real
        F[n_state_rows + n_bus :] = inj_im - yv.imag
        J[n_state_rows : n_state_rows + n_bus, n_state_unknowns : n_state_unknowns + n_bus] -= gbus
        J[n_state_rows : n_state_rows + n_bus, n_state_unknowns + n_bus :] -= -bbus
        J[n_state_rows + n_bus :, n_state_unknowns : n_state_unknowns + n_bus] -= bbus
        J[n_state_rows + n_bus :, n_state_unknowns + n_bus :] -= gbus
        return F, J

    u0 = np.zeros(n_unknowns)
    for k, (i, name) in enumerate(slots):
        p = machines[i].params
        if name == "eq":
            u0[k] = p.E_fd
        elif name == "dom" or name == "delta" or name == "ed":
            u0[k] = 0.0
    u0[n_state_unknowns : n_state_unknowns + n_bus] = 1.0

    try:
        u, iters = gauss_newton(
            lambda u: assemble(u)[0], lambda u: assemble(u)[1], u0, eps=tol, k_max=k_max
        )
    except Exception as exc:
        raise EquilibriumError(f"equilibrium Newton failed: {exc}") from exc

    eq, ed, delta, dom, vre, vim = unpack(u)
    states = [
        MachineState(float(eq[i]), float(ed[i]), float(delta[i]), float(dom[i]))
        for i in range(n_mach)
    ]
    v = vre + 1j * vim

    # Balance the reference machine: P_m := electrical power at the solution.
    from dataclasses import replace as dc_replace

    from .netmodel import MachineSpec, _finish

    ref = machines[0]
    s0 = states[0]
    vb = v[ref.bus]
    i_d, i_q = machine_currents(ref.params, s0, abs(vb), math.atan2(vb.imag, vb.real))
    p_e = (
        s0.e_d_prime * i_d
        + s0.e_q_prime * i_q
        + (ref.params.Xq_p - ref.params.Xd_p) * i_d * i_q
        + ref.params.D * s0.d_omega
    )
    new_machines = list(machines)
    new_machines[0] = MachineSpec(bus=ref.bus, params=dc_replace(ref.params, P_m=p_e))
    balanced = _finish(
        model.buses, model.branches, model.loads, new_machines, model.nominal_frequency
    )

    res = float(np.max(np.abs(equilibrium_residual(balanced, states, v))))
    if not np.isfinite(res) or res > 1e-8:
        raise EquilibriumError(f"equilibrium residual too large: {res:.3e}")
    return Equilibrium(states=states, v=v, iterations=iters, residual_inf=res, model=balanced)
