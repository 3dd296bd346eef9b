"""Ground truth: fine-step system references, component truth, datasets.

The whole-system reference is a trapezoidal run at a very small step with a
halving self-check; the single-component truth integrates one machine under
the assumed linear boundary profile with classical RK4, vectorized over
records so dataset labeling stays fast.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import mlp, stepper
from .machine import MachineParams, machine_f_batch
from .util import fingerprint, wrap_angle, write_csv

log = logging.getLogger("hybrid_dae.oracle")

H_REF = 5e-5            # s, reference step
RICHARDSON_TOL = 1e-8
RK4_SUBSTEPS = 1000
RK4_CHECK_TOL = 1e-10


class OracleError(RuntimeError):
    pass


@dataclass(frozen=True)
class MachineSetup:
    """A machine plus its frozen internal voltages: the surrogate's target."""

    params: MachineParams
    e_q_prime: float
    e_d_prime: float
    f_hz: float = 60.0

    def fingerprint(self) -> str:
        return self.params.dynamics_fingerprint(self.f_hz, self.e_q_prime, self.e_d_prime)

    @staticmethod
    def from_equilibrium(model, number: int) -> "MachineSetup":
        from .machine import init_equilibrium

        eq = init_equilibrium(model)
        spec = eq.model.machines[number - 1]
        s = eq.states[number - 1]
        return MachineSetup(
            params=spec.params,
            e_q_prime=s.e_q_prime,
            e_d_prime=s.e_d_prime,
            f_hz=model.nominal_frequency,
        )


def table_domain(h_max: float = 0.040) -> dict:
    """Sampled input domain, keyed by weight-file input names."""
    return {s.name: (s.lo, s.hi) for s in mlp.default_input_spec(h_max)}


# ---------------------------------------------------------------------------
# component truth


def _profile_arrays(y_n, y_np1, tau):
    """V and theta along the linear profile at fractions tau of the step."""
    v_n, th_n = y_n
    v_p, th_p = y_np1
    v = v_n + (v_p - v_n) * tau
    th = th_n + wrap_angle(th_p - th_n) * tau
    return v, th


def _rk4_batch(setup: MachineSetup, h, x0, y_n, y_np1, n_sub: int):
    """Vectorized RK4 over records; y follows the linear profile."""
    p = setup.params
    x = np.array(x0, dtype=float)
    h = np.asarray(h, dtype=float)
    dt = h / n_sub
    v_n, th_n = y_n
    v_p, th_p = y_np1
    dv = v_p - v_n
    dth = wrap_angle(th_p - th_n)

    def f_at(x_, tau):
        v = v_n + dv * tau
        th = th_n + dth * tau
        return machine_f_batch(p, x_, v, th, setup.f_hz)

    for k in range(n_sub):
        t0 = k / n_sub
        tm = (k + 0.5) / n_sub
        t1 = (k + 1) / n_sub
        k1 = f_at(x, t0)
        k2 = f_at(x + 0.5 * dt[:, None] * k1, tm)
        k3 = f_at(x + 0.5 * dt[:, None] * k2, tm)
        k4 = f_at(x + dt[:, None] * k3, t1)
        x = x + (dt / 6.0)[:, None] * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return x


def component_truth_batch(setup: MachineSetup, h, x_n, y_n, y_np1,
                          n_sub: int = RK4_SUBSTEPS, check_tol: float = RK4_CHECK_TOL):
    """End-of-step states for records of (h, x_n, boundary pair).

    x_n is (B, 4); y_n and y_np1 are (V, theta) column pairs of shape (B,).
    A halving self-check compares n_sub against n_sub/2 and must stay below
    ``check_tol`` in every state.
    """
    fine = _rk4_batch(setup, h, x_n, y_n, y_np1, n_sub)
    coarse = _rk4_batch(setup, h, x_n, y_n, y_np1, max(n_sub // 2, 1))
    dev = float(np.max(np.abs(fine - coarse))) if len(fine) else 0.0
    if dev > check_tol:
        raise OracleError(
            f"component-truth self-check failed: deviation {dev:.3e} > {check_tol:g}"
        )
    return fine


def component_truth(setup: MachineSetup, h, x_n, y_n, y_np1,
                    n_sub: int = RK4_SUBSTEPS, check_tol: float = RK4_CHECK_TOL):
    """Single-record convenience wrapper around the batch integrator."""
    x = np.asarray(x_n, dtype=float)[None, :]
    yn = (np.array([y_n[0]]), np.array([y_n[1]]))
    yp = (np.array([y_np1[0]]), np.array([y_np1[1]]))
    return component_truth_batch(
        setup, np.array([h]), x, yn, yp, n_sub=n_sub, check_tol=check_tol
    )[0]


# ---------------------------------------------------------------------------
# whole-system reference


def _scenario_key(model, t_end, disturbances, h_ref, initial):
    values = {
        "model": model.content_fingerprint(),
        "t_end": t_end,
        "h_ref": h_ref,
    }
    for k, d in enumerate(disturbances):
        values[f"d{k}"] = f"{d.kind}:{d.target}:{d.magnitude}:{d.time}"
    if initial is not None:
        values["x0"] = hashlib.sha256(np.ascontiguousarray(initial.x).tobytes()).hexdigest()
        values["v0"] = hashlib.sha256(np.ascontiguousarray(initial.v).tobytes()).hexdigest()
    return fingerprint(values)


def reference_trajectory(model, t_end, disturbances=(), initial=None,
                         h_ref: float = H_REF, check_tol: float = RICHARDSON_TOL,
                         cache_dir=None) -> stepper.TrajectoryResult:
    """Trapezoidal run at h_ref with a step-halving self-check.

    The run is repeated at h_ref/2; the two must agree within ``check_tol``
    at the shared grid points and the finer run is returned as the truth.
    """
    key = None
    if cache_dir is not None:
        cache_dir = Path(cache_dir)
        cache_dir.mkdir(parents=True, exist_ok=True)
        key = _scenario_key(model, t_end, disturbances, h_ref, initial)
        path = cache_dir / f"ref_{key}.npz"
        if path.exists():
            data = np.load(path, allow_pickle=False)
            log.info("reference trajectory loaded from cache %s", path.name)
            return stepper.TrajectoryResult(
                model=model,
                cfg=stepper.SolverConfig(h=float(data["h"]), label="reference"),
                t=data["t"],
                x=data["x"],
                v=data["v"],
                newton_iters=data["iters"],
                update_tail=[],
                self_check_deviation=float(data["dev"]),
            )

    runs = {}
    for h in (h_ref, h_ref / 2.0):
        cfg = stepper.SolverConfig(h=h, label="reference")
        runs[h] = stepper.simulate(model, cfg, t_end, disturbances, initial=initial)
        if not runs[h].completed:
            raise OracleError(f"reference run at h={h} failed: {runs[h].failure}")
    coarse = runs[h_ref]
    fine = runs[h_ref / 2.0]
    dev_x = float(np.max(np.abs(coarse.x - fine.x[::2])))
    dev_v = float(np.max(np.abs(coarse.v - fine.v[::2])))
    dev = max(dev_x, dev_v)
    if dev > check_tol:
        raise OracleError(
            f"reference self-check failed: h_ref vs h_ref/2 deviate by {dev:.3e} "
            f"(> {check_tol:g}); decrease h_ref"
        )
    log.info("reference self-check deviation %.3e (tol %g)", dev, check_tol)
    fine.self_check_deviation = dev
    if key is not None:
        tmp = cache_dir / f"ref_{key}.tmp.npz"
        np.savez_compressed(
            tmp, t=fine.t, x=fine.x, v=fine.v, iters=fine.newton_iters, h=fine.cfg.h,
            dev=dev,
        )
        tmp.replace(cache_dir / f"ref_{key}.npz")
    return fine


# ---------------------------------------------------------------------------
# datasets


INPUT_COLUMNS = list(mlp.INPUT_NAMES)
LABEL_COLUMNS = ["x_np1_delta", "x_np1_domega"]


def _sample_inputs(domain: dict, n: int, seed: int) -> dict:
    rng = np.random.default_rng(seed)
    cols = {}
    for name in INPUT_COLUMNS:
        lo, hi = domain[name]
        cols[name] = rng.uniform(lo, hi, size=n)
    return cols


def output_scale_bounds(setup: MachineSetup, domain: dict, n_probe: int = 8192,
                        seed: int = 987654321, margin: float = 1.2) -> np.ndarray:
    """Per-output bound on |increment rate| over the domain, from a seeded probe.

    The realized per-step mean rates (not just the pointwise |f|) matter
    because the state can drift inside a long step; a margin covers the gap
    between the probe maximum and the true supremum.
    """
    cols = _sample_inputs(domain, n_probe, seed)
    x_n = np.column_stack(
        [
            np.full(n_probe, setup.e_q_prime),
            np.full(n_probe, setup.e_d_prime),
            cols["delta_rel_n"],
            cols["domega_n"],
        ]
    )
    y_n = (cols["v_n"], np.zeros(n_probe))
    y_p = (cols["v_np1"], cols["dtheta"])
    x_end = component_truth_batch(setup, cols["h_s"], x_n, y_n, y_p, n_sub=64, check_tol=1e-6)
    rates = (x_end[:, 2:4] - x_n[:, 2:4]) / cols["h_s"][:, None]
    # pointwise rates at the sampled start points, too
    f0 = machine_f_batch(setup.params, x_n, cols["v_n"], np.zeros(n_probe), setup.f_hz)
    bound = np.maximum(np.max(np.abs(rates), axis=0), np.max(np.abs(f0[:, 2:4]), axis=0))
    return margin * bound


def generate_dataset_x(setup: MachineSetup, domain: dict, n: int, seed: int,
                       path=None, n_sub: int = RK4_SUBSTEPS,
                       check_tol: float = RK4_CHECK_TOL):
    """Labeled records: sampled inputs plus the component-truth end state."""
    cols = _sample_inputs(domain, n, seed)
    x_n = np.column_stack(
        [
            np.full(n, setup.e_q_prime),
            np.full(n, setup.e_d_prime),
            cols["delta_rel_n"],
            cols["domega_n"],
        ]
    )
    if n:
        labels = component_truth_batch(
            setup, cols["h_s"], x_n,
            (cols["v_n"], np.zeros(n)), (cols["v_np1"], cols["dtheta"]),
            n_sub=n_sub, check_tol=check_tol,
        )[:, 2:4]
    else:
        labels = np.zeros((0, 2))
    data = np.column_stack([cols[name] for name in INPUT_COLUMNS] + [labels])
    if path is not None:
        write_csv(path, INPUT_COLUMNS + LABEL_COLUMNS, data)
    return data


def generate_dataset_c(domain: dict, n: int, seed: int, path=None):
    """Collocation records: sampled inputs only, no simulated labels."""
    cols = _sample_inputs(domain, n, seed)
    data = np.column_stack([cols[name] for name in INPUT_COLUMNS]) if n else np.zeros((0, 6))
    if path is not None:
        write_csv(path, INPUT_COLUMNS, data)
    return data


def export_machine_setup(setup: MachineSetup, domain: dict, path,
                         output_scale=None) -> dict:
    """Sidecar consumed by the trainer: dynamics constants, domain, scales."""
    if output_scale is None:
        output_scale = output_scale_bounds(setup, domain)
    p = setup.params
    doc = {
        "params": {
            "H": p.H, "D": p.D, "X_d": p.X_d, "Xd_p": p.Xd_p, "X_q": p.X_q,
            "Xq_p": p.Xq_p, "R_s": p.R_s, "P_m": p.P_m, "classical": p.classical,
        },
        "e_q_prime": setup.e_q_prime,
        "e_d_prime": setup.e_d_prime,
        "f_hz": setup.f_hz,
        "domain": {name: list(domain[name]) for name in INPUT_COLUMNS},
        "h_max_s": domain["h_s"][1],
        "output_scale": [float(v) for v in output_scale],
        "outputs": LABEL_COLUMNS,
        "machine_params_hash": setup.fingerprint(),
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")
    return doc
