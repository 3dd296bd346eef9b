"""Per-component step rules: implicit equations over one time step.

Each rule turns the state integral across a step into residual equations
r(x_np1) = 0 with analytic Jacobian blocks w.r.t. x_np1 and the end-of-step
boundary values. Rules are stateless; a component supplies the update
function f, its partials, and the network-frame current injection.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg

from . import machine as machine_mod
from . import mlp
from .util import wrap_angle

log = logging.getLogger("hybrid_dae.algebraizer")


class SurrogateDomainError(ValueError):
    """Inputs left the trained domain under the reject policy."""


@dataclass
class StepContext:
    """One component's view of a time step.

    Boundary values y are the component's terminal pair (V_re, V_im); f_n
    optionally caches f(x_n, y_n), constant during the Newton iteration.
    """

    h: float
    x_n: np.ndarray
    y_n: np.ndarray
    y_np1: np.ndarray
    x_np1: np.ndarray
    f_n: Optional[np.ndarray] = None

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError("step size must be positive")


@dataclass
class AlgebraizerResult:
    r: np.ndarray
    dr_dx: np.ndarray      # w.r.t. x_np1
    dr_dy: np.ndarray      # w.r.t. (V_re, V_im) at n+1


def linear_profile(y_n, y_np1, t, h, angular=False):
    """Assumed in-step boundary evolution: linear between the step endpoints.

    Angular values interpolate along the wrapped (shortest-arc) difference.
    Scalars or arrays; t may be an array for vectorized evaluation.
    """
    t = np.asarray(t, dtype=float)
    if np.any(t < 0.0) or np.any(t > h):
        raise ValueError(f"profile time outside [0, {h}]")
    y_n = np.asarray(y_n, dtype=float)
    y_np1 = np.asarray(y_np1, dtype=float)
    dy = wrap_angle(y_np1 - y_n) if angular else (y_np1 - y_n)
    return y_n + dy * (t / h)


def trapezoidal_residual(ctx: StepContext, f, f_jac) -> AlgebraizerResult:
    """r = x1 - x0 - h/2 (f(x0, y0) + f(x1, y1)) with Jacobian blocks."""
    f_n = ctx.f_n if ctx.f_n is not None else f(ctx.x_n, ctx.y_n)
    f_1, df_dx, df_dy = f_jac(ctx.x_np1, ctx.y_np1)
    n = len(ctx.x_n)
    r = ctx.x_np1 - ctx.x_n - 0.5 * ctx.h * (f_n + f_1)
    return AlgebraizerResult(
        r=r,
        dr_dx=np.eye(n) - 0.5 * ctx.h * df_dx,
        dr_dy=-0.5 * ctx.h * df_dy,
    )


def backward_euler_residual(ctx: StepContext, f, f_jac) -> AlgebraizerResult:
    """r = x1 - x0 - h f(x1, y1) with Jacobian blocks."""
    f_1, df_dx, df_dy = f_jac(ctx.x_np1, ctx.y_np1)
    n = len(ctx.x_n)
    return AlgebraizerResult(
        r=ctx.x_np1 - ctx.x_n - ctx.h * f_1,
        dr_dx=np.eye(n) - ctx.h * df_dx,
        dr_dy=-ctx.h * df_dy,
    )


def surrogate_residual(ctx: StepContext, evaluator) -> AlgebraizerResult:
    """r = x1 - x0 - h * EVAL(h, x0, y0, y1).

    The evaluator's rate does not depend on x_np1, so dr/dx_np1 is the
    identity; the boundary coupling enters through dr/dy_np1 only.
    """
    n = len(ctx.x_n)
    g, dg_dy = evaluator.rate_and_boundary_jacobian(ctx.h, ctx.x_n, ctx.y_n, ctx.y_np1)
    return AlgebraizerResult(
        r=ctx.x_np1 - ctx.x_n - ctx.h * g,
        dr_dx=np.eye(n),
        dr_dy=-ctx.h * dg_dy,
    )


# ---------------------------------------------------------------------------
# components

from typing import NamedTuple


class _Eval(NamedTuple):
    f: np.ndarray
    df_dx: np.ndarray
    df_dv: np.ndarray
    inj: complex
    dinj_dx: np.ndarray
    dinj_dv: np.ndarray


class MachineComponent:
    """Adapts a machine at a bus to the stepper's rectangular-voltage view."""

    n_states = machine_mod.N_STATES

    def __init__(self, params, bus, f_hz):
        self.params = params
        self.bus = bus
        self.f_hz = f_hz
        # classical internal voltages are constants of the simulation
        self.frozen_rows = (0, 1) if params.classical else ()

    def _polar(self, y):
        return math.hypot(y[0], y[1]), math.atan2(y[1], y[0])

    def f(self, x, y):
        V, theta = self._polar(y)
        s = machine_mod.MachineState.from_array(x)
        return machine_mod.machine_f(self.params, s, V, theta, self.f_hz)

    def evaluate(self, x, y) -> machine_mod.MachineJacobians:
        """All step-relevant blocks in one pass (the assembly hot path)."""
        V, theta = self._polar(y)
        s = machine_mod.MachineState.from_array(x)
        return machine_mod.machine_jacobians(self.params, s, V, theta, self.f_hz)

    def f_jac(self, x, y):
        jac = self.evaluate(x, y)
        return jac.f, jac.df_dx, jac.df_dv

    def injection_jac(self, x, y):
        jac = self.evaluate(x, y)
        return jac.inj, jac.dinj_dx, jac.dinj_dv


class LinearComponent:
    """Linear test component: dx/dt = A x + B y, injection = C x + D y.

    y is the rectangular terminal-voltage pair; the injection rows map to
    (Re, Im). Used to validate the solver plug-in path against closed forms.
    """

    def __init__(self, A, B, C, D, bus):
        self.A = np.asarray(A, dtype=float)
        self.B = np.asarray(B, dtype=float)
        self.C = np.asarray(C, dtype=float)
        self.D = np.asarray(D, dtype=float)
        self.bus = bus
        self.n_states = self.A.shape[0]

    def f(self, x, y):
        return self.A @ x + self.B @ y

    def f_jac(self, x, y):
        return self.f(x, y), self.A, self.B

    def injection_jac(self, x, y):
        vec = self.C @ x + self.D @ y
        return complex(vec[0], vec[1]), self.C, self.D

    def evaluate(self, x, y):
        f = self.A @ x + self.B @ y
        vec = self.C @ x + self.D @ y
        return _Eval(f, self.A, self.B, complex(vec[0], vec[1]), self.C, self.D)


# ---------------------------------------------------------------------------
# rules


class TrapezoidalRule:
    name = "trapezoidal"

    def residual(self, component, ctx: StepContext) -> AlgebraizerResult:
        return trapezoidal_residual(ctx, component.f, component.f_jac)

    def residual_from(self, ctx: StepContext, ev: _Eval) -> AlgebraizerResult:
        f_n = ctx.f_n if ctx.f_n is not None else None
        if f_n is None:
            raise ValueError("trapezoidal residual_from requires a cached f_n")
        n = len(ctx.x_n)
        return AlgebraizerResult(
            r=ctx.x_np1 - ctx.x_n - 0.5 * ctx.h * (f_n + ev.f),
            dr_dx=np.eye(n) - 0.5 * ctx.h * ev.df_dx,
            dr_dy=-0.5 * ctx.h * ev.df_dv,
        )

    def validate_step(self, component, ctx):
        pass


class BackwardEulerRule:
    name = "backward-euler"

    def residual(self, component, ctx: StepContext) -> AlgebraizerResult:
        return backward_euler_residual(ctx, component.f, component.f_jac)

    def residual_from(self, ctx: StepContext, ev: _Eval) -> AlgebraizerResult:
        n = len(ctx.x_n)
        return AlgebraizerResult(
            r=ctx.x_np1 - ctx.x_n - ctx.h * ev.f,
            dr_dx=np.eye(n) - ctx.h * ev.df_dx,
            dr_dy=-ctx.h * ev.df_dv,
        )

    def validate_step(self, component, ctx):
        pass


class SurrogateRule:
    """Neural (or exact test) surrogate for the rows it integrates.

    Rows outside ``evaluator.state_slice`` (frozen classical internal
    voltages) reduce to hold-identity equations.
    """

    name = "neural-surrogate"

    def __init__(self, evaluator):
        self.evaluator = evaluator

    def residual(self, component, ctx: StepContext) -> AlgebraizerResult:
        ev = self.evaluator
        sl = ev.state_slice
        n = len(ctx.x_n)
        if sl == slice(0, n):
            return surrogate_residual(ctx, ev)
        sub = StepContext(
            h=ctx.h, x_n=ctx.x_n[sl], y_n=ctx.y_n, y_np1=ctx.y_np1, x_np1=ctx.x_np1[sl]
        )
        part = surrogate_residual(sub, ev)
        r = ctx.x_np1 - ctx.x_n
        r[sl] = part.r
        dr_dy = np.zeros((n, 2))
        dr_dy[sl] = part.dr_dy
        return AlgebraizerResult(r=r, dr_dx=np.eye(n), dr_dy=dr_dy)

    def residual_from(self, ctx: StepContext, ev_blocks) -> AlgebraizerResult:
        return self.residual(None, ctx)

    def validate_step(self, component, ctx):
        self.evaluator.validate(ctx.h, ctx.x_n, ctx.y_n, ctx.y_np1)


class NeuralSurrogateEvaluator:
    """Wires a SurrogateNet to a classical machine component.

    The net integrates (delta, d_omega); boundary voltages are converted to
    polar form. Out-of-domain inputs are clamped for evaluation during Newton
    iterations; ``validate`` enforces the policy on the converged step
    (reject by default, warn-and-clamp when ``clamp=True``).
    """

    state_slice = slice(2, 4)

    def __init__(self, net: mlp.SurrogateNet, clamp: bool = False):
        self.net = net
        self.clamp = clamp
        self.clamp_events = 0
        self._lo = np.array([s.lo for s in net.input_spec])
        self._hi = np.array([s.hi for s in net.input_spec])

    def _features(self, h, x_n, y_n, y_np1):
        v_n, th_n = math.hypot(y_n[0], y_n[1]), math.atan2(y_n[1], y_n[0])
        v_p, th_p = math.hypot(y_np1[0], y_np1[1]), math.atan2(y_np1[1], y_np1[0])
        feats = mlp.encode_features(
            self.net, h, np.asarray(x_n, dtype=float), (v_n, th_n), (v_p, th_p)
        )
        return feats, (v_n, th_n, v_p, th_p)

    def rate_and_boundary_jacobian(self, h, x_n, y_n, y_np1):
        if h > self.net.h_max * (1 + 1e-12):
            raise SurrogateDomainError(
                f"step {h} s exceeds the trained h_max {self.net.h_max} s"
            )
        feats, (v_n, th_n, v_p, th_p) = self._features(h, x_n, y_n, y_np1)
        clamped = np.clip(feats, self._lo, self._hi)
        g, jac_feat = mlp.rate_jacobian(self.net, clamped)
        # boundary chain: features -> (V_np1, theta_np1) -> rect, zeroed where clamped
        active = ((feats >= self._lo) & (feats <= self._hi)).astype(float)
        jac_feat = jac_feat * active[None, :]
        dfeat_dpol = np.zeros((len(feats), 2))
        for k, spec in enumerate(self.net.input_spec):
            if spec.name == "v_np1":
                dfeat_dpol[k, 0] = 1.0
            elif spec.name == "dtheta":
                dfeat_dpol[k, 1] = 1.0
        v = max(v_p, 1e-12)
        st, ct = math.sin(th_p), math.cos(th_p)
        pol_to_rect = np.array([[ct, st], [-st / v, ct / v]])
        dg_dy = jac_feat @ dfeat_dpol @ pol_to_rect
        return g, dg_dy

    def validate(self, h, x_n, y_n, y_np1):
        feats, _ = self._features(h, x_n, y_n, y_np1)
        low = feats < self._lo - 1e-12
        high = feats > self._hi + 1e-12
        if not (low.any() or high.any()):
            return
        names = [s.name for s in self.net.input_spec]
        offending = [
            f"{names[k]}={feats[k]:.6g} outside [{self._lo[k]:.6g}, {self._hi[k]:.6g}]"
            for k in np.nonzero(low | high)[0]
        ]
        msg = "surrogate inputs outside trained domain: " + "; ".join(offending)
        if not self.clamp:
            raise SurrogateDomainError(msg)
        if self.clamp_events == 0:
            log.warning("%s (clamping; further events counted silently)", msg)
        self.clamp_events += 1


class ExactLinearEvaluator:
    """Exact increment map for dx/dt = A x + B y(t) under the linear profile.

    A drop-in stand-in for a trained surrogate: same residual shape, exact
    input-Jacobians, no trained domain. Validates the hybrid plug-in path
    without any training.
    """

    def __init__(self, A, B, h_max=np.inf):
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        self.B = np.atleast_2d(np.asarray(B, dtype=float))
        self.n = self.A.shape[0]
        self.m = self.B.shape[1]
        self.h_max = h_max
        self.state_slice = slice(0, self.n)
        self._cache = {}

    def _maps(self, h):
        """Phi, P1B, P2B such that x(h) = Phi x_n + P1B y_n + (P2B/h)(y_np1 - y_n)."""
        if h in self._cache:
            return self._cache[h]
        n, m = self.n, self.m
        aug = np.zeros((n + 2, n + 2))
        aug[:n, :n] = self.A
        aug[n + 1, n] = 1.0  # d(t)/dt = 1 driven by the constant state
        phi = np.zeros((n, n))
        p1b = np.zeros((n, m))
        p2b = np.zeros((n, m))
        for j in range(n):
            z0 = np.zeros(n + 2)
            z0[j] = 1.0
            phi[:, j] = (scipy.linalg.expm(aug * h) @ z0)[:n]
        for j in range(m):
            a2 = aug.copy()
            a2[:n, n] = self.B[:, j]  # constant drive: y = e_j
            z0 = np.zeros(n + 2)
            z0[n] = 1.0
            p1b[:, j] = (scipy.linalg.expm(a2 * h) @ z0)[:n]
            a3 = aug.copy()
            a3[:n, n + 1] = self.B[:, j]  # ramp drive: y = e_j * t
            p2b[:, j] = (scipy.linalg.expm(a3 * h) @ z0)[:n]
        self._cache[h] = (phi, p1b, p2b)
        return phi, p1b, p2b

    def increment(self, h, x_n, y_n, y_np1):
        """(x(h) - x_n) / h, the exact mean rate across the step."""
        x_n = np.asarray(x_n, dtype=float)
        phi, p1b, p2b = self._maps(h)
        slope = (np.asarray(y_np1, dtype=float) - np.asarray(y_n, dtype=float)) / h
        x_h = phi @ x_n + p1b @ np.asarray(y_n, dtype=float) + p2b @ slope
        return (x_h - x_n) / h

    def rate_and_boundary_jacobian(self, h, x_n, y_n, y_np1):
        phi, p1b, p2b = self._maps(h)
        x_n = np.asarray(x_n, dtype=float)
        y_n = np.asarray(y_n, dtype=float)
        y_np1 = np.asarray(y_np1, dtype=float)
        x_h = phi @ x_n + p1b @ y_n + p2b @ (y_np1 - y_n) / h
        g = (x_h - x_n) / h
        dg_dy = p2b / (h * h)
        return g, dg_dy

    def jacobians(self, h, x_n, y_n, y_np1):
        """Exact partials of the rate w.r.t. x_n, y_n, y_np1."""
        phi, p1b, p2b = self._maps(h)
        dg_dx = (phi - np.eye(self.n)) / h
        dg_dyn = (p1b - p2b / h) / h
        dg_dynp1 = p2b / (h * h)
        return dg_dx, dg_dyn, dg_dynp1

    def validate(self, h, x_n, y_n, y_np1):
        pass


def solve_component_step(rule, component, h, x_n, y_n, y_np1, eps=1e-12, k_max=30):
    """One implicit component step with prescribed boundary values.

    Solves the rule's residual for x_np1 by Newton on the component block
    alone (no network equations). Returns (x_np1, iterations).
    """
    from .util import newton_core

    x_n = np.asarray(x_n, dtype=float)
    y_n = np.asarray(y_n, dtype=float)
    y_np1 = np.asarray(y_np1, dtype=float)
    f_n = component.f(x_n, y_n) if hasattr(component, "f") else None

    def fun_jac(x):
        ctx = StepContext(h=h, x_n=x_n, y_n=y_n, y_np1=y_np1, x_np1=x, f_n=f_n)
        res = rule.residual(component, ctx)
        return res.r, res.dr_dx

    x, iters, _ = newton_core(fun_jac, x_n, eps=eps, k_max=k_max)
    return x, iters


def make_rule(kind: str, evaluator=None):
    """AlgebraizerKind factory: trapezoidal | backward-euler | neural-surrogate."""
    if kind == "trapezoidal":
        return TrapezoidalRule()
    if kind == "backward-euler":
        return BackwardEulerRule()
    if kind == "neural-surrogate":
        if evaluator is None:
            raise ValueError("neural-surrogate rule needs an evaluator")
        return SurrogateRule(evaluator)
    raise ValueError(f"unknown algebraizer kind {kind!r}")
