"""Error studies: global trajectories, step sweeps, one-step distributions,
Monte-Carlo fans, and accuracy-boost aggregation.

Reports compare solver runs against the fine-step reference on the coarse
grid (grids are nested, so truth is read at exact fine indices, never
interpolated). Angle-typed variables are compared on wrapped differences.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import netmodel, oracle, stepper
from .algebraizer import (
    NeuralSurrogateEvaluator,
    SurrogateRule,
    TrapezoidalRule,
    solve_component_step,
)
from .machine import MachineState, init_equilibrium
from .util import gauss_newton, wrap_angle

log = logging.getLogger("hybrid_dae.harness")

ANGLE_PREFIXES = ("delta", "theta", "delta_rel")


@dataclass
class ErrorReport:
    """Per-variable |prediction - truth| series on the solver's time grid."""

    label: str
    t: np.ndarray
    errors: dict
    failed: str = None

    def summary(self) -> dict:
        out = {}
        for name, series in self.errors.items():
            out[name] = boxplot_stats(series)
        return out

    def max_error(self, name: str) -> float:
        return float(np.max(self.errors[name]))

    def end_error(self, name: str) -> float:
        return float(self.errors[name][-1])


def boxplot_stats(values) -> dict:
    values = np.asarray(values, dtype=float)
    q1, med, q3 = np.percentile(values, [25.0, 50.0, 75.0])
    whisker = min(float(values.max()), q3 + 1.5 * (q3 - q1))
    return {
        "max": float(values.max()),
        "median": float(med),
        "q1": float(q1),
        "q3": float(q3),
        "upper_whisker": float(whisker),
    }


def _is_angle(name: str) -> bool:
    return name.rpartition("_")[0] in ANGLE_PREFIXES


def error_report(label, traj: stepper.TrajectoryResult, ref: stepper.TrajectoryResult,
                 variables=None) -> ErrorReport:
    """Errors of a coarse run against a fine reference at the coarse times."""
    ratio = traj.cfg.h / ref.cfg.h
    stride = int(round(ratio))
    if abs(ratio - stride) > 1e-9 or stride < 1:
        raise ValueError(
            f"coarse step {traj.cfg.h} is not a multiple of the reference step {ref.cfg.h}"
        )
    n = len(traj.t)
    if variables is None:
        variables = traj.variable_names()
    errors = {}
    for name in variables:
        sol = traj.variable(name)
        truth = ref.variable(name)[::stride][:n]
        diff = sol[: len(truth)] - truth
        if _is_angle(name):
            diff = wrap_angle(diff)
        errors[name] = np.abs(diff)
    return ErrorReport(label=label, t=traj.t[:n].copy(), errors=errors)


def zero_report(label, ref: stepper.TrajectoryResult, variables=None) -> ErrorReport:
    return error_report(label, ref, ref, variables)


# ---------------------------------------------------------------------------
# solver specs


@dataclass
class SolverSpec:
    """Recipe for building a SolverConfig at any step size.

    ``surrogates`` maps 1-based machine numbers to weight-file nets (or any
    evaluator-compatible object); listed machines run the neural surrogate,
    everything else the trapezoidal rule.
    """

    label: str
    surrogates: dict = field(default_factory=dict)
    clamp: bool = True
    epsilon: float = 1e-8
    k_max: int = 20

    def config(self, h: float) -> stepper.SolverConfig:
        rules = {}
        for num, net in self.surrogates.items():
            ev = net if hasattr(net, "rate_and_boundary_jacobian") else (
                NeuralSurrogateEvaluator(net, clamp=self.clamp)
            )
            rules[num] = SurrogateRule(ev)
        return stepper.SolverConfig(
            h=h, epsilon=self.epsilon, k_max=self.k_max, rules=rules, label=self.label
        )


def pure_spec(label="pure", **kw) -> SolverSpec:
    return SolverSpec(label=label, **kw)


def hybrid_spec(nets: dict, label="hybrid", **kw) -> SolverSpec:
    return SolverSpec(label=label, surrogates=dict(nets), **kw)


# ---------------------------------------------------------------------------
# scenario and studies


@dataclass
class Scenario:
    """One comparison setup: network, disturbances, horizon, solver list."""

    model: netmodel.NetworkModel
    t_end: float
    disturbances: tuple = ()
    solvers: tuple = ()
    h_ref: float = oracle.H_REF
    check_tol: float = oracle.RICHARDSON_TOL
    cache_dir: object = None

    def reference(self, t_end=None, initial=None):
        return oracle.reference_trajectory(
            self.model,
            self.t_end if t_end is None else t_end,
            self.disturbances,
            initial=initial,
            h_ref=self.h_ref,
            check_tol=self.check_tol,
            cache_dir=self.cache_dir,
        )


def global_error_study(scenario: Scenario, h: float, variables=None) -> dict:
    """Run every solver at step h against the fine reference."""
    ref = scenario.reference()
    reports = {}
    for spec in scenario.solvers:
        cfg = spec.config(h)
        try:
            traj = stepper.simulate(scenario.model, cfg, scenario.t_end, scenario.disturbances)
            if not traj.completed:
                raise RuntimeError(traj.failure)
            reports[spec.label] = error_report(spec.label, traj, ref, variables)
        except Exception as exc:  # solver failure is a data point, not an abort
            log.warning("solver %s failed at h=%g: %s", spec.label, h, exc)
            reports[spec.label] = ErrorReport(
                label=spec.label, t=np.zeros(0), errors={}, failed=str(exc)
            )
    return reports


def step_sweep(scenario: Scenario, h_list, variables=None) -> list:
    """Max |error| over the horizon per variable per step size per solver."""
    rows = []
    for h in h_list:
        reports = global_error_study(scenario, h, variables)
        for label, report in reports.items():
            if report.failed is not None:
                rows.append({"solver": label, "h_s": h, "variable": "-",
                             "max_abs_error": math.nan, "failed": report.failed})
                continue
            for name, series in report.errors.items():
                rows.append({
                    "solver": label, "h_s": h, "variable": name,
                    "max_abs_error": float(np.max(series)), "failed": "",
                })
    return rows


def local_error_study(setup: oracle.MachineSetup, domain: dict, n_ic: int,
                      h_list, rules: dict, seed: int = 0) -> list:
    """One-step error distributions of a single component.

    For each sampled initial condition and boundary-value pair, every rule
    solves its own implicit step; errors are measured against the component
    truth under the same linear boundary profile. Returns stat rows per
    (solver, h, variable); failed solves are excluded and counted.
    """
    rng = np.random.default_rng(seed)
    lo = np.array([domain[k][0] for k in ("delta_rel_n", "domega_n", "v_n", "v_np1", "dtheta")])
    hi = np.array([domain[k][1] for k in ("delta_rel_n", "domega_n", "v_n", "v_np1", "dtheta")])
    samples = rng.uniform(lo, hi, size=(n_ic, 5))
    rows = []
    var_names = ("delta", "domega")
    for h in h_list:
        x_n = np.column_stack(
            [
                np.full(n_ic, setup.e_q_prime),
                np.full(n_ic, setup.e_d_prime),
                samples[:, 0],
                samples[:, 1],
            ]
        )
        truth = oracle.component_truth_batch(
            setup, np.full(n_ic, h), x_n,
            (samples[:, 2], np.zeros(n_ic)), (samples[:, 3], samples[:, 4]),
        )
        for label, rule in rules.items():
            errs = {v: [] for v in var_names}
            failed = 0
            comp = _component_for(setup)
            for k in range(n_ic):
                y_n = _rect(samples[k, 2], 0.0)
                y_p = _rect(samples[k, 3], samples[k, 4])
                try:
                    root, _ = solve_component_step(
                        rule, comp, h, x_n[k], y_n, y_p, eps=1e-12
                    )
                except Exception as exc:
                    failed += 1
                    log.debug("component step failed (%s, h=%g): %s", label, h, exc)
                    continue
                errs["delta"].append(abs(wrap_angle(root[2] - truth[k, 2])))
                errs["domega"].append(abs(root[3] - truth[k, 3]))
            for v in var_names:
                stats = boxplot_stats(errs[v]) if errs[v] else {}
                rows.append({
                    "solver": label, "h_s": h, "variable": v,
                    "n_failed": failed, **stats,
                })
    return rows


def _component_for(setup: oracle.MachineSetup):
    from .algebraizer import MachineComponent

    return MachineComponent(setup.params, 0, setup.f_hz)


def _rect(vmag, theta):
    return np.array([vmag * math.cos(theta), vmag * math.sin(theta)])


# ---------------------------------------------------------------------------
# sampled system initial conditions


def sample_system_ics(model, domain: dict, n_ic: int, seed: int,
                      machines=None, scale: float = 1.0):
    """Consistent system states with sampled rotor displacements.

    The own-terminal relative angles of classical machines cannot all be
    prescribed independently (the network's current-divider algebra ties
    them to an (M-1)-dimensional manifold), so the sampler displaces the
    rotor angles directly: each listed machine (1-based; default all) gets
    ``delta += sample(delta_rel range) - delta_rel_equilibrium`` and a
    sampled d_omega, optionally range-scaled toward the equilibrium. The
    algebraic equations are then re-solved, which always succeeds because
    fixed rotor angles make the network subproblem well posed.
    """
    eq = init_equilibrium(model)
    model = eq.model
    rng = np.random.default_rng(seed)
    targets = list(range(1, model.n_machines + 1)) if machines is None else list(machines)
    th_eq = np.angle(eq.v)
    x_eq = np.concatenate([s.as_array() for s in eq.states])
    states = []
    for _ in range(n_ic):
        x = x_eq.copy()
        for num in targets:
            i = num - 1
            r_eq = eq.states[i].delta - th_eq[model.machines[i].bus]
            lo, hi = domain["delta_rel_n"]
            x[4 * i + 2] += scale * (rng.uniform(lo, hi) - r_eq)
            lo, hi = domain["domega_n"]
            x[4 * i + 3] = scale * rng.uniform(lo, hi)
        v = stepper.project_algebraic(model, x, eq.v)
        states.append(stepper.SystemState(t=0.0, x=x, v=v))
    return model, states


def local_error_study_system(scenario: Scenario, number: int, domain: dict,
                             n_ic: int, h_list, seed: int = 0,
                             variables=None, ic_scale: float = 1.0) -> list:
    """One full-system step from perturbed states of one machine.

    Both solvers take a single step from each sampled consistent state; the
    truth is the fine reference over that step. Reports the same boxplot
    statistics as the component study for the chosen variables (default: the
    studied machine's load angle, speed deviation, and terminal voltage).
    """
    model, states = sample_system_ics(
        scenario.model, domain, n_ic, seed, machines=[number], scale=ic_scale
    )
    bus = model.machines[number - 1].bus
    if variables is None:
        variables = (f"delta_rel_{number}", f"domega_{number}", f"V_{bus}")
    rows = []
    for h in h_list:
        per_solver = {spec.label: {v: [] for v in variables} for spec in scenario.solvers}
        failures = {spec.label: 0 for spec in scenario.solvers}
        for state in states:
            ref = oracle.reference_trajectory(
                model, h, (), initial=state, h_ref=scenario.h_ref,
                check_tol=scenario.check_tol, cache_dir=scenario.cache_dir,
            )
            for spec in scenario.solvers:
                cfg = spec.config(h)
                try:
                    traj = stepper.simulate(model, cfg, h, (), initial=state)
                    if not traj.completed:
                        raise RuntimeError(traj.failure)
                    rep = error_report(spec.label, traj, ref, variables)
                except Exception as exc:
                    failures[spec.label] += 1
                    log.debug("system step failed (%s, h=%g): %s", spec.label, h, exc)
                    continue
                for v in variables:
                    per_solver[spec.label][v].append(rep.errors[v][-1])
        for label, errs in per_solver.items():
            for v in variables:
                stats = boxplot_stats(errs[v]) if errs[v] else {}
                rows.append({
                    "solver": label, "h_s": h, "variable": v,
                    "n_failed": failures[label], **stats,
                })
    return rows


def monte_carlo_fan(scenario: Scenario, domain: dict, n_ic: int, h: float,
                    seed: int = 0, variables=None, machines=None,
                    ic_scale: float = 1.0) -> list:
    """Per-IC error trajectories: N runs per solver from sampled projected states."""
    model, states = sample_system_ics(
        scenario.model, domain, n_ic, seed, machines=machines, scale=ic_scale
    )
    if variables is None:
        variables = tuple(
            f"delta_rel_{i}" for i in range(1, model.n_machines + 1)
        ) + tuple(f"V_{m.bus}" for m in model.machines)
    runs = []
    for k, state in enumerate(states):
        ref = oracle.reference_trajectory(
            model, scenario.t_end, (), initial=state, h_ref=scenario.h_ref,
            check_tol=scenario.check_tol, cache_dir=scenario.cache_dir,
        )
        for spec in scenario.solvers:
            cfg = spec.config(h)
            try:
                traj = stepper.simulate(model, cfg, scenario.t_end, (), initial=state)
                if not traj.completed:
                    raise RuntimeError(traj.failure)
                rep = error_report(spec.label, traj, ref, variables)
            except Exception as exc:
                log.warning("fan run %d (%s) failed: %s", k, spec.label, exc)
                rep = ErrorReport(label=spec.label, t=np.zeros(0), errors={}, failed=str(exc))
            runs.append({"run": k, "solver": spec.label, "report": rep})
    return runs


def accuracy_boost(report_pure: ErrorReport, report_hybrid: ErrorReport,
                   variables) -> dict:
    """Percentage improvement 100*(1 - err_hybrid/err_pure), mean over the set.

    ``err`` is the max-over-time error per variable; both reports must share
    the time grid.
    """
    if len(report_pure.t) != len(report_hybrid.t) or not np.allclose(
        report_pure.t, report_hybrid.t
    ):
        raise ValueError("reports are on different time grids")
    per_variable = {}
    ratios = []
    for name in variables:
        err_p = report_pure.max_error(name)
        err_h = report_hybrid.max_error(name)
        boost = 100.0 * (1.0 - err_h / err_p) if err_p > 0 else 0.0
        per_variable[name] = {"err_pure": err_p, "err_hybrid": err_h, "boost_pct": boost}
        ratios.append(boost)
    return {"per_variable": per_variable, "boost_pct": float(np.mean(ratios))}
