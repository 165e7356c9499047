"""Configuration-driven command line for the delay-HJB pipeline.

Subcommands::

    simulate         integrate sample paths, export CSV
    solve            run value iteration, persist the value field
    synthesize       closed-loop simulation under the greedy feedback policy
    verify           statistical optimality certificate (JSON report)
    regularize       envelope / mollification audits (CSV tables)
    audit-operators  weak-norm operator identity checks

Configs are TOML (JSON accepted as a fallback); unknown keys are rejected
with a list of the offenders.  Exit codes: 0 = success / all audits passed,
2 = an audit or verification failed, 1 = configuration or usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .advertising import AdvertisingConfig, build_problem_spec, initial_state
from .envelopes import (
    envelope_convergence_audit,
    lag_gram_matrices,
    lag_subspace_spectrum,
    partial_mollify,
    semiconvexity_probe,
)
from .errors import ConfigurationError, DelayHJBError
from .feedback import ChallengerConfig, FeedbackPolicy, closed_loop_simulate, verify_optimality
from .hilbert import (
    a_inverse_matrix,
    build_B,
    check_weak_B,
    norm_minus1,
    operator_to_csv,
)
from .sdde import integrate
from .value import ValueField, build_lag_mdp, lipschitz_minus1_probe, value_iteration

_SCHEMA = {
    "model": {"a0", "c0", "sigma0", "alpha", "d", "u_bar", "kappa", "gamma",
              "rho", "lipschitz_c", "control_cap"},
    "initial": {"x0", "x1"},
    "discretization": {"segment_nodes", "lags", "grid_points", "control_points",
                       "gh_order", "dt", "grid_lo", "grid_hi"},
    "solver": {"tol", "max_iter", "cost_rule"},
    "simulate": {"T", "paths", "control"},
    "verify": {"paths", "random_challengers", "constant_challengers", "pieces",
               "tail_tol", "probes", "include_oracle"},
    "regularize": {"epsilons", "eta", "k", "queries", "samples"},
    "run": {"seed", "threads", "plots"},
}

_DEFAULTS = {
    "model": {},
    "initial": {"x0": 0.0},
    "discretization": {"segment_nodes": 21, "lags": 3, "grid_points": 41,
                       "control_points": 13, "gh_order": 7, "dt": 1.0 / 60.0},
    "solver": {"tol": 1e-4, "max_iter": 500, "cost_rule": "refined"},
    "simulate": {"T": 6.0, "paths": 200, "control": 0.0},
    "verify": {"paths": 2000, "random_challengers": 50,
               "constant_challengers": 5, "pieces": 5, "tail_tol": 1e-3,
               "probes": [0.0], "include_oracle": False},
    "regularize": {"epsilons": [0.1, 0.05, 0.01], "eta": 0.3, "k": 2,
                   "samples": 2000},
    "run": {"seed": 0, "threads": 0, "plots": False},
}


def load_config(path) -> dict:
    """Parse and validate a TOML (or JSON) config; apply defaults."""
    with open(path, "rb") as fh:
        blob = fh.read()
    try:
        import tomllib as toml_mod  # Python >= 3.11
    except ImportError:
        import tomli as toml_mod
    try:
        raw = toml_mod.loads(blob.decode())
    except Exception:
        try:
            raw = json.loads(blob.decode())
        except Exception as exc:
            raise ConfigurationError(f"config {path} is neither TOML nor JSON: {exc}")
    if not isinstance(raw, dict):
        raise ConfigurationError("config root must be a table/object")

    unknown = []
    for section, body in raw.items():
        if section not in _SCHEMA:
            unknown.append(section)
            continue
        if not isinstance(body, dict):
            raise ConfigurationError(f"section [{section}] must be a table")
        for key in body:
            if key not in _SCHEMA[section]:
                unknown.append(f"{section}.{key}")
    if unknown:
        raise ConfigurationError(
            "unknown configuration keys: " + ", ".join(sorted(unknown)))

    cfg = {}
    for section in _SCHEMA:
        cfg[section] = dict(_DEFAULTS[section])
        cfg[section].update(raw.get(section, {}))
    return cfg


def _threads(args, cfg) -> int:
    if args.threads is not None:
        n = args.threads
    elif os.environ.get("DELAY_HJB_THREADS"):
        try:
            n = int(os.environ["DELAY_HJB_THREADS"])
        except ValueError:
            raise ConfigurationError("DELAY_HJB_THREADS must be an integer")
    else:
        n = int(cfg["run"].get("threads", 0))
    if n <= 0:
        n = os.cpu_count() or 1
    try:
        import numba
        numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))
    except ImportError:
        pass
    return n


def _build(cfg):
    model = AdvertisingConfig(
        segment_nodes=int(cfg["discretization"]["segment_nodes"]),
        **cfg["model"])
    spec = build_problem_spec(model)
    x = initial_state(model, cfg["initial"]["x0"], cfg["initial"].get("x1"))
    return model, spec, x


def _solve(cfg, spec, seed):
    dz = cfg["discretization"]
    bounds = None
    if "grid_lo" in dz and "grid_hi" in dz:
        bounds = (dz["grid_lo"], dz["grid_hi"])
    mdp = build_lag_mdp(
        spec, int(dz["lags"]), grid_bounds=bounds,
        grid_points=int(dz["grid_points"]),
        control_points=int(dz["control_points"]),
        gh_order=int(dz["gh_order"]), seed=seed)
    sv = cfg["solver"]
    return value_iteration(mdp, tol=float(sv["tol"]),
                           max_iter=int(sv["max_iter"]),
                           cost_rule=sv["cost_rule"])


def _maybe_plot(csv_path, out_dir, stem, cfg):
    if not cfg["run"].get("plots"):
        return
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        print("plots requested but matplotlib is unavailable; skipping",
              file=sys.stderr)
        return
    data = np.genfromtxt(csv_path, delimiter=",", names=True)
    fig, ax = plt.subplots(figsize=(7, 3.2))
    for name in data.dtype.names[1:]:
        ax.plot(data["t"], data[name], label=name)
    ax.set_xlabel("t")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(os.path.join(out_dir, stem + ".svg"))
    plt.close(fig)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _cmd_audit_operators(args, cfg, out_dir) -> int:
    m = int(cfg["discretization"]["segment_nodes"])
    d = float(cfg["model"].get("d", 1.0))
    from .hilbert import LiftedState, SegmentGrid, inner_X, state_to_vector
    grid = SegmentGrid.uniform(d, m)
    B = build_B(grid, 1)
    rng = np.random.default_rng(int(cfg["run"]["seed"]))
    worst = 0.0
    for _ in range(200):
        x = LiftedState(rng.standard_normal(1), rng.standard_normal((m, 1)))
        v = state_to_vector(x)
        lhs = norm_minus1(x, grid) ** 2
        rhs = float(v @ (B.weight_metric * (B.entries @ v)))
        worst = max(worst, abs(lhs - rhs) / max(abs(lhs), 1e-300))
    print(f"identity |x|_-1^2 = <Bx,x>_X : max rel err {worst:.3e} "
          f"({'ok' if worst <= 1e-10 else 'FAIL'})")
    rep = check_weak_B(B, samples=1000, seed=int(cfg["run"]["seed"]),
                       grid=grid, n=1)
    print(f"weak B-condition: max ratio {rep.max_ratio:.3e} "
          f"({'ok' if rep.passed else 'FAIL'})")
    if args.dump_operators:
        operator_to_csv(a_inverse_matrix(grid, 1), os.path.join(out_dir, "a_inverse.csv"))
        operator_to_csv(B, os.path.join(out_dir, "b_operator.csv"))
        print(f"operator matrices written to {out_dir}")
    return 0 if (worst <= 1e-10 and rep.passed) else 2


def _cmd_simulate(args, cfg, out_dir) -> int:
    model, spec, x = _build(cfg)
    sim = cfg["simulate"]
    u = np.atleast_1d(np.asarray(sim["control"], dtype=float))
    path = integrate(spec, x, u, float(sim["T"]),
                     float(cfg["discretization"]["dt"]),
                     seed=int(cfg["run"]["seed"]))
    csv_path = os.path.join(out_dir, "sample_path.csv")
    path.to_csv(csv_path)
    print(f"sample path ({len(path.times)} steps) written to {csv_path}")
    _maybe_plot(csv_path, out_dir, "sample_path", cfg)
    return 0


def _cmd_solve(args, cfg, out_dir) -> int:
    model, spec, x = _build(cfg)
    fld = _solve(cfg, spec, int(cfg["run"]["seed"]))
    out = os.path.join(out_dir, "value_field.csv")
    fld.save(out)
    print(f"value field: {fld.iterations} iterations, residual "
          f"{fld.residual:.3e}, saved to {out}")
    return 0


def _cmd_synthesize(args, cfg, out_dir) -> int:
    model, spec, x = _build(cfg)
    fld = _solve(cfg, spec, int(cfg["run"]["seed"]))
    policy = FeedbackPolicy(field=fld)
    sim = cfg["simulate"]
    est, sample = closed_loop_simulate(
        spec, policy, x, float(sim["T"]), float(cfg["discretization"]["dt"]),
        paths=int(sim["paths"]), seed=int(cfg["run"]["seed"]))
    csv_path = os.path.join(out_dir, "closed_loop.csv")
    sample.to_csv(csv_path)
    print(f"closed-loop cost {est.mean:+.6f} +- {est.std_error:.2g} "
          f"({est.paths} paths, T={est.horizon}); sample path in {csv_path}")
    _maybe_plot(csv_path, out_dir, "closed_loop", cfg)
    return 0


def _cmd_verify(args, cfg, out_dir) -> int:
    model, spec, _ = _build(cfg)
    fld = _solve(cfg, spec, int(cfg["run"]["seed"]))
    policy = FeedbackPolicy(field=fld)
    vc = cfg["verify"]
    challengers = ChallengerConfig(
        random_count=int(vc["random_challengers"]),
        constant_count=int(vc["constant_challengers"]),
        pieces=int(vc["pieces"]),
        include_oracle=bool(vc["include_oracle"]))
    reports = []
    all_pass = True
    for i, x0 in enumerate(vc["probes"]):
        x = initial_state(model, float(x0))
        rep = verify_optimality(
            spec, policy, x, challengers=challengers, paths=int(vc["paths"]),
            dt=float(cfg["discretization"]["dt"]), tail_tol=float(vc["tail_tol"]),
            seed=int(cfg["run"]["seed"]) + i)
        print(rep.table())
        reports.append(json.loads(rep.to_json()))
        all_pass = all_pass and rep.passed
    out = os.path.join(out_dir, "verification_report.json")
    with open(out, "w") as fh:
        json.dump({"schema": "v1", "reports": reports}, fh, sort_keys=True,
                  indent=2)
        fh.write("\n")
    print(f"report written to {out}")
    return 0 if all_pass else 2


def _cmd_regularize(args, cfg, out_dir) -> int:
    model, spec, _ = _build(cfg)
    fld = _solve(cfg, spec, int(cfg["run"]["seed"]))
    rz = cfg["regularize"]
    mdp = fld.mdp
    rng = np.random.default_rng(int(cfg["run"]["seed"]))
    span = mdp.nodes[-1] - mdp.nodes[0]
    lo = mdp.nodes[0] + 0.25 * span
    hi = mdp.nodes[-1] - 0.25 * span
    queries = rng.uniform(lo, hi, size=(8, mdp.lags + 1))

    probe = lipschitz_minus1_probe(fld, spec.grid, samples=200,
                                   seed=int(cfg["run"]["seed"]))
    from .value import _interpolation_error_estimate
    slack = 2.0 * _interpolation_error_estimate(fld) + 1e-6
    audit = envelope_convergence_audit(
        fld, K=probe.fitted, epsilons=rz["epsilons"], queries=queries,
        slack=slack, csv_path=os.path.join(out_dir, "envelope_audit.csv"))
    print(f"envelope audit (K = {probe.fitted:.4g}): "
          f"{'ok' if audit.passed else 'FAIL'}")

    semi = semiconvexity_probe(fld, C=0.0, samples=int(rz["samples"]),
                               seed=int(cfg["run"]["seed"]))
    print(f"semiconvexity probe (C = 0): {semi.violations} violations "
          f"({'ok' if semi.passed else 'FAIL'})")

    spectrum = lag_subspace_spectrum(spec.grid, mdp.lags, mdp.delta)
    mol = partial_mollify(fld, eta=float(rz["eta"]), k=int(rz["k"]),
                          spectrum=spectrum)
    gaps = np.abs(mol(queries) - fld(queries))
    bound = probe.fitted * mol.width_sum
    rows = ["query_id,gap,bound,pass"]
    mol_ok = True
    for i, gap in enumerate(gaps):
        ok = gap <= bound + 1e-9
        mol_ok = mol_ok and ok
        rows.append(f"{i},{gap!r},{bound!r},{str(bool(ok)).lower()}")
    with open(os.path.join(out_dir, "mollify_audit.csv"), "w") as fh:
        fh.write("\n".join(rows) + "\n")
    print(f"mollification audit (k = {mol.k}): max gap {gaps.max():.3e} "
          f"<= {bound:.3e}: {'ok' if mol_ok else 'FAIL'}")
    return 0 if (audit.passed and semi.passed and mol_ok) else 2


_COMMANDS = {
    "simulate": _cmd_simulate,
    "solve": _cmd_solve,
    "synthesize": _cmd_synthesize,
    "verify": _cmd_verify,
    "regularize": _cmd_regularize,
    "audit-operators": _cmd_audit_operators,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="delay-hjb",
        description="dynamic programming for stochastic delay control")
    parser.add_argument("command", choices=sorted(_COMMANDS))
    parser.add_argument("--config", required=True, help="TOML/JSON config file")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker threads (default: DELAY_HJB_THREADS or cores)")
    parser.add_argument("--out", default=".", help="artifact output directory")
    parser.add_argument("--dump-operators", action="store_true",
                        help="write operator matrices as CSV (audit-operators)")
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg["run"]["seed"] = args.seed
        _threads(args, cfg)
        os.makedirs(args.out, exist_ok=True)
        return _COMMANDS[args.command](args, cfg, args.out)
    except DelayHJBError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
