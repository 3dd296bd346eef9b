"""Command-line interface: simulate, studies, datasets, weight validation.

Conventions: machine numbers are 1-based (as in the bundled system tables),
bus ids 0-based. Times on flags are in milliseconds where the flag name says
so. Every study is seeded and reproduces its output files byte-for-byte.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import harness, mlp, netmodel, oracle, stepper
from .machine import init_equilibrium
from .netmodel import Disturbance
from .util import fmt, write_csv

log = logging.getLogger("hybrid_dae.cli")

MACHINE_PRESETS = {"m1": ("ieee9", 1), "m2": ("ieee9", 2), "m3": ("ieee9", 3)}


class CliError(Exception):
    pass


def parse_disturbance(spec: str) -> Disturbance:
    """pm:NUM:MAG@T or yload:BUS:ADMITTANCE@T (admittance may be complex)."""
    try:
        head, time_s = spec.rsplit("@", 1)
        kind, target, mag = head.split(":")
        time = float(time_s)
        if kind == "pm":
            return Disturbance(
                "mechanical-power-step", int(target), float(mag), time
            )
        if kind == "yload":
            return Disturbance("load-admittance-step", int(target), complex(mag), time)
    except (ValueError, TypeError) as exc:
        raise CliError(f"bad --disturb spec {spec!r}: {exc}") from exc
    raise CliError(f"bad --disturb spec {spec!r}: unknown kind {kind!r}")


def _load_model(name: str):
    return netmodel.load_network(name)


def _resolve_surrogates(model, eq, net, explicit, allow_mismatch=False):
    """Attach a net to machines: explicit 1-based list or fingerprint match."""
    want = net.provenance.get("machine_params_hash")
    matches = []
    for i, spec in enumerate(model.machines):
        s = eq.states[i]
        fp = spec.params.dynamics_fingerprint(
            model.nominal_frequency, s.e_q_prime, s.e_d_prime
        )
        if fp == want:
            matches.append(i + 1)
    if explicit:
        bad = [n for n in explicit if n not in matches]
        if bad and not allow_mismatch:
            raise CliError(
                f"weight file fingerprint does not match machine(s) {bad}; "
                "pass --allow-mismatch to override"
            )
        return list(explicit)
    if not matches:
        raise CliError(
            "no machine matches the weight file's dynamics fingerprint; "
            "pass --surrogate-machines explicitly (with --allow-mismatch if intended)"
        )
    return matches


def _solver_specs(args, model, eq):
    """Solver list for studies: pure, hybrid, or both."""
    specs = []
    wants = args.solver.split(",") if "," in args.solver else [args.solver]
    for want in wants:
        if want == "pure":
            specs.append(harness.pure_spec(epsilon=args.epsilon, k_max=args.k_max))
        elif want == "hybrid":
            if not args.weights:
                raise CliError("--solver hybrid requires --weights")
            net = mlp.load_weights(args.weights)
            numbers = _resolve_surrogates(
                model, eq, net, args.surrogate_machines, args.allow_mismatch
            )
            log.info("surrogate attached to machine(s) %s", numbers)
            specs.append(
                harness.hybrid_spec(
                    {n: net for n in numbers},
                    clamp=not args.strict_domain,
                    epsilon=args.epsilon,
                    k_max=args.k_max,
                )
            )
        else:
            raise CliError(f"unknown solver {want!r}")
    return specs


def _scenario(args, model):
    disturbances = tuple(parse_disturbance(s) for s in (args.disturb or []))
    cache = Path(args.cache_dir) if args.cache_dir else None
    eq = init_equilibrium(model)
    specs = _solver_specs(args, eq.model, eq)
    return harness.Scenario(
        model=model,
        t_end=args.t_end,
        disturbances=disturbances,
        solvers=tuple(specs),
        cache_dir=cache,
    ), eq


def _write_report_csvs(reports: dict, out_dir: Path, stem: str, long_format: bool):
    out_dir.mkdir(parents=True, exist_ok=True)
    labels = [lab for lab, r in reports.items() if r.failed is None]
    if long_format:
        rows = []
        for lab in labels:
            r = reports[lab]
            for name, series in r.errors.items():
                for t, e in zip(r.t, series):
                    rows.append([lab, name, t, e])
        path = out_dir / f"{stem}.csv"
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("solver,variable,t,abs_error\n")
            for lab, name, t, e in rows:
                fh.write(f"{lab},{name},{fmt(t)},{fmt(e)}\n")
    else:
        first = reports[labels[0]]
        names = list(first.errors)
        header = ["t"] + [f"err_{n}__{lab}" for lab in labels for n in names]
        rows = []
        for k, t in enumerate(first.t):
            row = [t]
            for lab in labels:
                row += [reports[lab].errors[n][k] for n in names]
            rows.append(row)
        write_csv(out_dir / f"{stem}.csv", header, rows)
    # summary stats always emitted
    srows = []
    for lab in labels:
        for name, stats in reports[lab].summary().items():
            srows.append(
                [lab, name, stats["max"], stats["median"], stats["q1"], stats["q3"],
                 stats["upper_whisker"]]
            )
    with open(out_dir / f"{stem}_summary.csv", "w", encoding="utf-8") as fh:
        fh.write("solver,variable,max,median,q1,q3,upper_whisker\n")
        for row in srows:
            fh.write(",".join([row[0], row[1]] + [fmt(v) for v in row[2:]]) + "\n")
    for lab, r in reports.items():
        if r.failed is not None:
            (out_dir / f"{stem}_{lab}_FAILED.txt").write_text(r.failed + "\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args):
    model = _load_model(args.network)
    eq = init_equilibrium(model)
    specs = _solver_specs(args, eq.model, eq)
    if len(specs) != 1:
        raise CliError("simulate takes exactly one --solver")
    cfg = specs[0].config(args.h_ms / 1000.0)
    disturbances = [parse_disturbance(s) for s in (args.disturb or [])]
    traj = stepper.simulate(model, cfg, args.t_end, disturbances)
    traj.to_csv(args.out)
    if not traj.completed:
        log.error("simulation aborted: %s (partial trajectory written)", traj.failure)
        return 2
    log.info("wrote %s (%d steps, max %d Newton iters)",
             args.out, len(traj.t) - 1, int(traj.newton_iters.max(initial=0)))
    return 0


def cmd_equilibrium(args):
    model = _load_model(args.network)
    eq = init_equilibrium(model)
    v = np.abs(eq.v)
    th = np.angle(eq.v)
    rows = []
    for i, (spec, s) in enumerate(zip(eq.model.machines, eq.states), start=1):
        rows.append([i, spec.bus, s.e_q_prime, s.e_d_prime, s.delta,
                     s.delta - th[spec.bus], spec.params.P_m])
    if args.out:
        write_csv(
            args.out,
            ["machine", "bus", "e_q_prime", "e_d_prime", "delta", "delta_rel", "p_m"],
            rows,
        )
    print(f"equilibrium: residual {eq.residual_inf:.3e} after {eq.iterations} iterations")
    for row in rows:
        print(
            f"  machine {row[0]} @ bus {row[1]}: Eq'={row[2]:.6f} "
            f"delta-theta={row[5]:+.6f} P_m={row[6]:.6f} V={v[row[1]]:.5f}"
        )
    return 0


def cmd_gen_dataset(args):
    if args.machine_preset:
        network, number = MACHINE_PRESETS[args.machine_preset]
    else:
        network, number = args.network, args.machine
    model = _load_model(network)
    setup = oracle.MachineSetup.from_equilibrium(model, number)
    domain = oracle.table_domain(args.h_max_ms / 1000.0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    oracle.export_machine_setup(setup, domain, out / "machine.json")
    oracle.generate_dataset_x(setup, domain, args.n_x, seed=args.seed, path=out / "dataset_x.csv")
    oracle.generate_dataset_c(domain, args.n_c, seed=args.seed + 1, path=out / "dataset_c.csv")
    log.info("wrote %s: machine.json, dataset_x.csv (%d), dataset_c.csv (%d)",
             out, args.n_x, args.n_c)
    return 0


def cmd_validate_weights(args):
    net = mlp.load_weights(args.weights)
    rng = np.random.default_rng(2024)
    lo = np.array([s.lo for s in net.input_spec])
    hi = np.array([s.hi for s in net.input_spec])
    # hard constraint at h = 0
    for _ in range(100):
        x_n = rng.normal(size=net.n_out)
        out = mlp.forward(net, 0.0, x_n, (1.0, 0.0), (1.0, 0.1))
        if not np.array_equal(out, x_n):
            print("FAIL hard-constraint: forward(h=0) != x_n")
            return 1
    # Jacobian vs central differences on in-domain points
    worst = 0.0
    for _ in range(20):
        u = rng.uniform(lo, hi)
        h, dr, dm, v0, v1, dth = u
        x_n = np.array([dr, dm])
        jac = mlp.input_jacobian(net, h, x_n, (v0, 0.0), (v1, dth))
        eps = 1e-6
        fd = (
            mlp.forward(net, h + eps, x_n, (v0, 0.0), (v1, dth))
            - mlp.forward(net, h - eps, x_n, (v0, 0.0), (v1, dth))
        ) / (2 * eps)
        worst = max(worst, float(np.max(np.abs(fd - jac.dh) / (1 + np.abs(fd)))))
    if worst > 1e-6:
        print(f"FAIL jacobian self-check: relative deviation {worst:.2e}")
        return 1
    # Lipschitz bound of the increment
    for _ in range(50):
        u = rng.uniform(lo, hi)
        h, dr, dm, v0, v1, dth = u
        out = mlp.forward(net, h, np.array([dr, dm]), (v0, 0.0), (v1, dth))
        if np.any(np.abs(out - [dr, dm]) > h * np.max(np.asarray(net.output_scale)) * (1 + 1e-12)):
            print("FAIL increment bound exceeds h * max(output_scale)")
            return 1
    if args.machine_preset:
        network, number = MACHINE_PRESETS[args.machine_preset]
        setup = oracle.MachineSetup.from_equilibrium(_load_model(network), number)
        if net.provenance.get("machine_params_hash") != setup.fingerprint():
            print("FAIL fingerprint does not match machine preset "
                  f"{args.machine_preset}")
            return 1
    print(f"OK {args.weights}: {len(net.layers)} layers, h_max {net.h_max} s, "
          f"scales {np.asarray(net.output_scale)}")
    return 0


def cmd_global_error(args):
    model = _load_model(args.network)
    scenario, _ = _scenario(args, model)
    reports = harness.global_error_study(scenario, args.h_ms / 1000.0, args.variables)
    _write_report_csvs(reports, Path(args.out), "global_error", args.long)
    for lab, r in reports.items():
        if r.failed is None and args.variables:
            for v in args.variables:
                print(f"{lab} {v}: max={r.max_error(v):.3e} end={r.end_error(v):.3e}")
    return 0


def cmd_sweep(args):
    model = _load_model(args.network)
    scenario, _ = _scenario(args, model)
    h_list = [v / 1000.0 for v in args.h_list_ms]
    rows = harness.step_sweep(scenario, h_list, args.variables)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep.csv", "w", encoding="utf-8") as fh:
        fh.write("solver,variable,h_s,max_abs_error,failed\n")
        for r in rows:
            fh.write(
                f"{r['solver']},{r['variable']},{fmt(r['h_s'])},"
                f"{fmt(r['max_abs_error'])},{r['failed']}\n"
            )
    return 0


def cmd_local_error(args):
    if args.machine_preset:
        network, number = MACHINE_PRESETS[args.machine_preset]
    else:
        network, number = args.network, args.machine
    model = _load_model(network)
    setup = oracle.MachineSetup.from_equilibrium(model, number)
    domain = oracle.table_domain()
    h_list = [v / 1000.0 for v in args.h_list_ms]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.mode == "component":
        from .algebraizer import NeuralSurrogateEvaluator, SurrogateRule, TrapezoidalRule

        rules = {"pure": TrapezoidalRule()}
        if args.weights:
            net = mlp.load_weights(args.weights)
            rules["hybrid"] = SurrogateRule(NeuralSurrogateEvaluator(net, clamp=not args.strict_domain))
        rows = harness.local_error_study(setup, domain, args.n_ic, h_list, rules, seed=args.seed)
    else:
        scenario, _ = _scenario(args, model)
        rows = harness.local_error_study_system(
            scenario, number, domain, args.n_ic, h_list, seed=args.seed,
            ic_scale=args.ic_scale,
        )
    with open(out / "local_error.csv", "w", encoding="utf-8") as fh:
        fh.write("solver,variable,h_s,median,q1,q3,upper_whisker,max,n_failed\n")
        for r in rows:
            fh.write(
                f"{r['solver']},{r['variable']},{fmt(r['h_s'])},"
                f"{fmt(r.get('median', float('nan')))},{fmt(r.get('q1', float('nan')))},"
                f"{fmt(r.get('q3', float('nan')))},{fmt(r.get('upper_whisker', float('nan')))},"
                f"{fmt(r.get('max', float('nan')))},{r['n_failed']}\n"
            )
    return 0


def cmd_fan(args):
    model = _load_model(args.network)
    scenario, _ = _scenario(args, model)
    domain = oracle.table_domain()
    runs = harness.monte_carlo_fan(
        scenario, domain, args.n_ic, args.h_ms / 1000.0, seed=args.seed,
        machines=args.ic_machines, ic_scale=args.ic_scale,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "fan.csv", "w", encoding="utf-8") as fh:
        fh.write("run,solver,variable,t,abs_error\n")
        for entry in runs:
            rep = entry["report"]
            if rep.failed is not None:
                continue
            for name, series in rep.errors.items():
                for t, e in zip(rep.t, series):
                    fh.write(f"{entry['run']},{rep.label},{name},{fmt(t)},{fmt(e)}\n")
    return 0


def cmd_boost(args):
    model = _load_model(args.network)
    scenario, eq = _scenario(args, model)
    if len(scenario.solvers) != 2:
        raise CliError("boost expects --solver pure,hybrid")
    reports = harness.global_error_study(scenario, args.h_ms / 1000.0)
    pure = reports[scenario.solvers[0].label]
    hybrid = reports[scenario.solvers[1].label]
    for r in (pure, hybrid):
        if r.failed is not None:
            raise CliError(f"{r.label} run failed: {r.failed}")
    # variable sets: surrogate-machine rotor angles, and all bus voltages
    surro = sorted(scenario.solvers[1].surrogates)
    pinn_vars = [f"delta_{n}" for n in surro]
    v_vars = [f"V_{j}" for j in range(model.n_bus)]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    results = {}
    for set_name, variables in (("pinn_rotor_angles", pinn_vars), ("bus_voltages", v_vars)):
        res = harness.accuracy_boost(pure, hybrid, variables)
        results[set_name] = res["boost_pct"]
        rows.append([set_name, "-", float("nan"), float("nan"), res["boost_pct"]])
        for name, d in res["per_variable"].items():
            rows.append([set_name, name, d["err_pure"], d["err_hybrid"], d["boost_pct"]])
    with open(out / "boost.csv", "w", encoding="utf-8") as fh:
        fh.write("variable_set,variable,err_pure,err_hybrid,boost_pct\n")
        for r in rows:
            fh.write(f"{r[0]},{r[1]},{fmt(r[2])},{fmt(r[3])},{fmt(r[4])}\n")
    for set_name, pct in results.items():
        print(f"boost {set_name}: {pct:.2f} %")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hybrid-dae",
        description="Transient simulation with pluggable per-machine integrators.",
    )
    parser.add_argument("--config", help="JSON file with default values for flags")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, solver=True):
        p.add_argument("--network", default="ieee9")
        p.add_argument("--epsilon", type=float, default=1e-8)
        p.add_argument("--k-max", type=int, default=20)
        p.add_argument("--cache-dir", default=None)
        if solver:
            p.add_argument("--solver", default="pure")
            p.add_argument("--weights", default=None)
            p.add_argument("--surrogate-machines", type=int, nargs="*", default=None)
            p.add_argument("--allow-mismatch", action="store_true")
            p.add_argument("--strict-domain", action="store_true",
                           help="reject out-of-domain surrogate inputs instead of clamping")

    p = sub.add_parser("simulate", help="run one trajectory, write CSV")
    common(p)
    p.add_argument("--h-ms", type=float, required=True)
    p.add_argument("--t-end", type=float, required=True)
    p.add_argument("--disturb", action="append", default=None,
                   help="pm:NUM:MAG@T or yload:BUS:Y@T (repeatable)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("equilibrium", help="solve and print the steady state")
    common(p, solver=False)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_equilibrium)

    p = sub.add_parser("gen-dataset", help="sample training/collocation datasets")
    p.add_argument("--machine-preset", choices=sorted(MACHINE_PRESETS))
    p.add_argument("--network", default="ieee9")
    p.add_argument("--machine", type=int, default=3)
    p.add_argument("--n-x", type=int, default=100000)
    p.add_argument("--n-c", type=int, default=100000)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--h-max-ms", type=float, default=40.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_dataset)

    p = sub.add_parser("validate-weights", help="self-check a weight file")
    p.add_argument("weights")
    p.add_argument("--machine-preset", choices=sorted(MACHINE_PRESETS))
    p.set_defaults(func=cmd_validate_weights)

    p = sub.add_parser("global-error", help="trajectory error study vs fine reference")
    common(p)
    p.add_argument("--h-ms", type=float, required=True)
    p.add_argument("--t-end", type=float, required=True)
    p.add_argument("--disturb", action="append", default=None)
    p.add_argument("--variables", nargs="*", default=None)
    p.add_argument("--long", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_global_error)

    p = sub.add_parser("sweep", help="max error vs step size")
    common(p)
    p.add_argument("--h-list-ms", type=float, nargs="+", default=[1, 2, 4, 8])
    p.add_argument("--t-end", type=float, default=2.0)
    p.add_argument("--disturb", action="append", default=None)
    p.add_argument("--variables", nargs="*", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("local-error", help="one-step error distributions")
    common(p)
    p.add_argument("--machine-preset", choices=sorted(MACHINE_PRESETS))
    p.add_argument("--machine", type=int, default=3)
    p.add_argument("--mode", choices=("component", "system"), default="component")
    p.add_argument("--h-list-ms", type=float, nargs="+", default=[5, 10, 20, 40])
    p.add_argument("--n-ic", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ic-scale", type=float, default=1.0)
    p.add_argument("--t-end", type=float, default=0.0)
    p.add_argument("--disturb", action="append", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_local_error)

    p = sub.add_parser("fan", help="Monte-Carlo error fans from random states")
    common(p)
    p.add_argument("--h-ms", type=float, default=10.0)
    p.add_argument("--t-end", type=float, default=2.0)
    p.add_argument("--n-ic", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ic-scale", type=float, default=0.25)
    p.add_argument("--ic-machines", type=int, nargs="*", default=None)
    p.add_argument("--disturb", action="append", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fan)

    p = sub.add_parser("boost", help="pure vs hybrid accuracy improvement")
    common(p)
    p.add_argument("--h-ms", type=float, required=True)
    p.add_argument("--t-end", type=float, required=True)
    p.add_argument("--disturb", action="append", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_boost)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("HYBRID_DAE_LOG", "INFO").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    args, remaining = parser.parse_known_args(argv)
    if remaining:
        parser.error(f"unrecognized arguments: {' '.join(remaining)}")
    if args.config:
        overlay = json.loads(Path(args.config).read_text())
        parser.set_defaults(**overlay)
        args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, netmodel.NetworkSchemaError, mlp.WeightFileError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
