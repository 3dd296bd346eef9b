"""Simultaneous solution of the per-step algebraic system.

Unknowns X = [component end-of-step states; Re V; Im V]. Component rows come
from each machine's algebraizer; network rows are the current balance at the
end of the step. The Jacobian carries the block structure of a networked
system: no direct differential coupling between components, everything tied
together through the bus voltages.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import netmodel
from .algebraizer import (
    MachineComponent,
    StepContext,
    SurrogateRule,
    TrapezoidalRule,
    make_rule,
)
from .machine import init_equilibrium
from .util import NewtonError, newton_core, write_csv

log = logging.getLogger("hybrid_dae.stepper")


@dataclass
class SolverConfig:
    """Step size, Newton controls, and the per-machine rule assignment.

    ``rules`` maps 1-based machine numbers to algebraizer rule objects;
    machines without an entry use the trapezoidal rule.
    """

    h: float
    epsilon: float = 1e-8
    k_max: int = 20
    rules: dict = field(default_factory=dict)
    label: str = "pure"

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError("h must be positive")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.k_max < 1:
            raise ValueError("k_max must be at least 1")

    def rule_for(self, number: int):
        return self.rules.get(number, TrapezoidalRule())


def pure_config(h, **kw) -> SolverConfig:
    return SolverConfig(h=h, label="pure", **kw)


def hybrid_config(h, evaluators: dict, **kw) -> SolverConfig:
    """Hybrid solver: listed machines (1-based) run their surrogate evaluator."""
    rules = {num: SurrogateRule(ev) for num, ev in evaluators.items()}
    return SolverConfig(h=h, rules=rules, label="hybrid", **kw)


@dataclass
class SystemState:
    t: float
    x: np.ndarray            # stacked component states
    v: np.ndarray            # complex bus voltages


@dataclass
class ResidualSystem:
    F: np.ndarray
    J: np.ndarray


class Stepper:
    """Bound assembly of one model + config; reusable across steps.

    ``components`` normally derive from the model's machines; tests may pass
    replacement components (e.g. linear ones) sharing the same interface.
    """

    def __init__(self, model: netmodel.NetworkModel, cfg: SolverConfig, components=None):
        self.model = model
        self.cfg = cfg
        self.components = components if components is not None else [
            MachineComponent(spec.params, spec.bus, model.nominal_frequency)
            for spec in model.machines
        ]
        self.rules = [cfg.rule_for(i + 1) for i in range(len(self.components))]
        self.offsets = []
        off = 0
        for c in self.components:
            self.offsets.append(off)
            off += c.n_states
        self.dim_x = off
        self.n_bus = model.n_bus
        self.dim = self.dim_x + 2 * self.n_bus
        g = np.asarray(model.ybus.real)
        b = np.asarray(model.ybus.imag)
        self._y_block = np.block([[g, -b], [b, g]])

    # -- packing ------------------------------------------------------------

    def pack(self, x, v) -> np.ndarray:
        return np.concatenate([x, v.real, v.imag])

    def unpack(self, X):
        x = X[: self.dim_x]
        vre = X[self.dim_x : self.dim_x + self.n_bus]
        vim = X[self.dim_x + self.n_bus :]
        return x, vre + 1j * vim

    def component_state(self, x, idx) -> np.ndarray:
        off = self.offsets[idx]
        return x[off : off + self.components[idx].n_states]

    # -- assembly -----------------------------------------------------------

    def assemble(self, state_n: SystemState, X: np.ndarray, f_n_cache=None) -> ResidualSystem:
        """Residual and Jacobian of the step equations at iterate X."""
        x1, v1 = self.unpack(X)
        vre1 = v1.real
        vim1 = v1.imag
        F = np.zeros(self.dim)
        J = np.zeros((self.dim, self.dim))
        nb = self.n_bus
        inj_total = np.zeros(self.n_bus, dtype=complex)

        for idx, (comp, rule) in enumerate(zip(self.components, self.rules)):
            off = self.offsets[idx]
            n = comp.n_states
            b = comp.bus
            y_n = np.array([state_n.v[b].real, state_n.v[b].imag])
            y_1 = np.array([vre1[b], vim1[b]])
            x_n_c = self.component_state(state_n.x, idx)
            x_1_c = self.component_state(x1, idx)
            ctx = StepContext(
                h=self.cfg.h,
                x_n=x_n_c,
                y_n=y_n,
                y_np1=y_1,
                x_np1=x_1_c,
                f_n=f_n_cache[idx] if f_n_cache is not None else comp.f(x_n_c, y_n),
            )
            ev = comp.evaluate(x_1_c, y_1)
            res = rule.residual_from(ctx, ev)
            rows = slice(off, off + n)
            F[rows] = res.r
            J[rows, rows] = res.dr_dx
            J[rows, self.dim_x + b] = res.dr_dy[:, 0]
            J[rows, self.dim_x + nb + b] = res.dr_dy[:, 1]

            inj_total[b] += ev.inj
            J[self.dim_x + b, rows] += ev.dinj_dx[0]
            J[self.dim_x + nb + b, rows] += ev.dinj_dx[1]
            J[self.dim_x + b, self.dim_x + b] += ev.dinj_dv[0, 0]
            J[self.dim_x + b, self.dim_x + nb + b] += ev.dinj_dv[0, 1]
            J[self.dim_x + nb + b, self.dim_x + b] += ev.dinj_dv[1, 0]
            J[self.dim_x + nb + b, self.dim_x + nb + b] += ev.dinj_dv[1, 1]

        yv = self.model.ybus @ v1
        F[self.dim_x : self.dim_x + nb] = inj_total.real - yv.real
        F[self.dim_x + nb :] = inj_total.imag - yv.imag
        J[self.dim_x :, self.dim_x :] -= self._y_block
        return ResidualSystem(F=F, J=J)

    def _f_n_cache(self, state_n: SystemState):
        cache = []
        for idx, comp in enumerate(self.components):
            b = comp.bus
            y_n = np.array([state_n.v[b].real, state_n.v[b].imag])
            cache.append(comp.f(self.component_state(state_n.x, idx), y_n))
        return cache

    # -- Newton -------------------------------------------------------------

    def newton_solve(self, state_n: SystemState):
        """Advance one step; returns (state, iterations, update_norms)."""
        cfg = self.cfg
        f_n_cache = self._f_n_cache(state_n)

        def fun_jac(X):
            sys_ = self.assemble(state_n, X, f_n_cache)
            return sys_.F, sys_.J

        try:
            X, k, update_norms = newton_core(
                fun_jac, self.pack(state_n.x, state_n.v), eps=cfg.epsilon, k_max=cfg.k_max
            )
        except NewtonError as exc:
            raise NewtonError(
                f"step to t={state_n.t + cfg.h:.6f}s: {exc}",
                residual_norm=exc.residual_norm,
                iterations=exc.iterations,
            ) from exc
        x1, v1 = self.unpack(X)
        # frozen rows solve x1 = x0 exactly; drop the linear-solve roundoff
        for idx, comp in enumerate(self.components):
            for row in getattr(comp, "frozen_rows", ()):
                x1[self.offsets[idx] + row] = state_n.x[self.offsets[idx] + row]
        # converged step: enforce the surrogate domain policy
        for idx, (comp, rule) in enumerate(zip(self.components, self.rules)):
            b = comp.bus
            ctx = StepContext(
                h=cfg.h,
                x_n=self.component_state(state_n.x, idx),
                y_n=np.array([state_n.v[b].real, state_n.v[b].imag]),
                y_np1=np.array([v1[b].real, v1[b].imag]),
                x_np1=self.component_state(x1, idx),
            )
            rule.validate_step(comp, ctx)
        return SystemState(t=state_n.t + cfg.h, x=x1, v=v1), k, update_norms


def project_algebraic(model: netmodel.NetworkModel, x: np.ndarray, v_guess: np.ndarray,
                      eps: float = 1e-12, k_max: int = 30) -> np.ndarray:
    """Solve the network equations for v with the machine states held fixed."""
    components = [
        MachineComponent(spec.params, spec.bus, model.nominal_frequency)
        for spec in model.machines
    ]
    offsets = np.cumsum([0] + [c.n_states for c in components])
    nb = model.n_bus
    g = np.asarray(model.ybus.real)
    b = np.asarray(model.ybus.imag)
    y_block = np.block([[g, -b], [b, g]])

    v = np.array(v_guess, dtype=complex)
    for k in range(1, k_max + 1):
        F = np.zeros(2 * nb)
        J = -y_block.copy()
        inj_total = np.zeros(nb, dtype=complex)
        for idx, comp in enumerate(components):
            bus = comp.bus
            y = np.array([v[bus].real, v[bus].imag])
            inj, _, dinj_dv = comp.injection_jac(x[offsets[idx] : offsets[idx + 1]], y)
            inj_total[bus] += inj
            J[bus, bus] += dinj_dv[0, 0]
            J[bus, nb + bus] += dinj_dv[0, 1]
            J[nb + bus, bus] += dinj_dv[1, 0]
            J[nb + bus, nb + bus] += dinj_dv[1, 1]
        yv = model.ybus @ v
        F[:nb] = inj_total.real - yv.real
        F[nb:] = inj_total.imag - yv.imag
        dv = np.linalg.solve(J, F)
        v = v - (dv[:nb] + 1j * dv[nb:])
        if float(np.max(np.abs(dv))) < eps:
            return v
    raise NewtonError(f"algebraic projection did not converge in {k_max} iterations")


@dataclass
class TrajectoryResult:
    model: netmodel.NetworkModel
    cfg: SolverConfig
    t: np.ndarray
    x: np.ndarray            # (K+1, dim_x)
    v: np.ndarray            # (K+1, n_bus) complex
    newton_iters: np.ndarray
    update_tail: list        # last two Newton update norms per step
    completed: bool = True
    failure: Optional[str] = None
    self_check_deviation: Optional[float] = None  # set on reference runs

    @property
    def n_machines(self) -> int:
        return self.model.n_machines

    def delta(self, number: int) -> np.ndarray:
        return self.x[:, 4 * (number - 1) + 2]

    def domega(self, number: int) -> np.ndarray:
        return self.x[:, 4 * (number - 1) + 3]

    def vmag(self, bus: int) -> np.ndarray:
        return np.abs(self.v[:, bus])

    def theta(self, bus: int) -> np.ndarray:
        return np.angle(self.v[:, bus])

    def delta_rel(self, number: int) -> np.ndarray:
        """Load angle of a machine: rotor angle minus its terminal angle."""
        bus = self.model.machines[number - 1].bus
        return self.delta(number) - np.angle(self.v[:, bus])

    def variable(self, name: str) -> np.ndarray:
        """Series by report name: delta_i, domega_i, delta_rel_i, V_j, theta_j."""
        kind, _, idx = name.rpartition("_")
        idx = int(idx)
        if kind == "delta":
            return self.delta(idx)
        if kind == "domega":
            return self.domega(idx)
        if kind == "delta_rel":
            return self.delta_rel(idx)
        if kind == "V":
            return self.vmag(idx)
        if kind == "theta":
            return self.theta(idx)
        raise KeyError(f"unknown trajectory variable {name!r}")

    def variable_names(self) -> list:
        names = []
        m = self.n_machines
        names += [f"delta_{i}" for i in range(1, m + 1)]
        names += [f"domega_{i}" for i in range(1, m + 1)]
        names += [f"delta_rel_{i}" for i in range(1, m + 1)]
        names += [f"V_{j}" for j in range(self.model.n_bus)]
        names += [f"theta_{j}" for j in range(self.model.n_bus)]
        return names

    def to_csv(self, path) -> None:
        m = self.n_machines
        nb = self.model.n_bus
        header = (
            ["t"]
            + [f"delta_{i}" for i in range(1, m + 1)]
            + [f"domega_{i}" for i in range(1, m + 1)]
            + [f"V_{j}" for j in range(nb)]
            + [f"theta_{j}" for j in range(nb)]
            + ["newton_iters"]
        )
        rows = []
        iters = np.concatenate([[0], self.newton_iters])
        for k in range(len(self.t)):
            row = [self.t[k]]
            row += [self.delta(i)[k] for i in range(1, m + 1)]
            row += [self.domega(i)[k] for i in range(1, m + 1)]
            row += list(np.abs(self.v[k]))
            row += list(np.angle(self.v[k]))
            row += [int(iters[k])]
            rows.append(row)
        write_csv(path, header, rows)


def simulate(model: netmodel.NetworkModel, cfg: SolverConfig, t_end: float,
             disturbances=(), initial: Optional[SystemState] = None) -> TrajectoryResult:
    """Fixed-step march; disturbances land on their nearest step boundary.

    A Newton failure aborts with the partial trajectory and diagnostics in
    ``failure``; the algebraic equations are re-solved after each applied
    disturbance so every step starts consistent.
    """
    if not t_end > 0:
        raise ValueError("t_end must be positive")
    if initial is None:
        eq = init_equilibrium(model)
        model = eq.model
        x0 = np.concatenate([s.as_array() for s in eq.states])
        state = SystemState(t=0.0, x=x0, v=eq.v.copy())
    else:
        state = SystemState(t=initial.t, x=initial.x.copy(), v=initial.v.copy())

    n_steps = int(round(t_end / cfg.h))
    schedule = {}
    for d in disturbances:
        k = int(round(d.time / cfg.h))
        schedule.setdefault(min(max(k, 0), n_steps), []).append(d)

    stepper = Stepper(model, cfg)
    t_arr = [state.t]
    x_arr = [state.x.copy()]
    v_arr = [state.v.copy()]
    iters = []
    tails = []
    completed = True
    failure = None

    for k in range(n_steps):
        if k in schedule:
            for d in schedule[k]:
                model = netmodel.apply_disturbance(model, d)
            # the algebraic variables jump at the discontinuity
            state = SystemState(
                t=state.t, x=state.x, v=project_algebraic(model, state.x, state.v)
            )
            x_arr[-1] = state.x.copy()
            v_arr[-1] = state.v.copy()
            stepper = Stepper(model, cfg)
        try:
            state, n_iter, norms = stepper.newton_solve(state)
        except NewtonError as exc:
            completed = False
            failure = str(exc)
            log.error("simulation aborted at t=%.6f s: %s", state.t, exc)
            break
        t_arr.append(state.t)
        x_arr.append(state.x.copy())
        v_arr.append(state.v.copy())
        iters.append(n_iter)
        tails.append(tuple(norms[-2:]))

    return TrajectoryResult(
        model=model,
        cfg=cfg,
        t=np.array(t_arr),
        x=np.array(x_arr),
        v=np.array(v_arr),
        newton_iters=np.array(iters, dtype=int),
        update_tail=tails,
        completed=completed,
        failure=failure,
    )


def equilibrium_state(model: netmodel.NetworkModel):
    """Convenience: balanced model plus its steady state."""
    eq = init_equilibrium(model)
    x0 = np.concatenate([s.as_array() for s in eq.states])
    return eq.model, SystemState(t=0.0, x=x0, v=eq.v.copy())
