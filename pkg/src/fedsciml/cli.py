"""fedsciml command line: partition, train, sweep, divergence, W1, DeepONet.

Every training command writes a CSV of results (first line is a schema
comment) and a JSON manifest that ``fedsciml replay`` can re-execute.
"""
from __future__ import annotations

import argparse
import csv
import datetime as dt
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from . import experiments as X
from . import federation as fed
from . import heterogeneity as het
from . import nn, operators, problems, solvers, transport

SCHEMA = "fedsciml-results v1"
EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("fedsciml")


class UsageError(ValueError):
    pass


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# {SCHEMA}\n")
        w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def decided_defaults() -> dict:
    """Every default the implementation had to choose, recorded verbatim."""
    return {
        "float": "float64",
        "init": "glorot-uniform weights, zero biases, Philox stream per (seed, name)",
        "adam": {"beta1": nn.ADAM_BETA1, "beta2": nn.ADAM_BETA2, "eps": nn.ADAM_EPS},
        "lr": nn.DEFAULT_LR,
        "epoch": "one full-batch gradient step",
        "participation": 1.0,
        "aggregation": "N_k/N weighted average of local models, ascending client order",
        "adam_state_across_rounds": "persist (reset with --reset-optimizer)",
        "n_semantics": "total number of subdomains",
        "block_remainder": "trailing blocks absorb the remainder",
        "xy_partition_owner": "(row + col) mod K",
        "w1_weights": "uniform empirical",
        "w1_point_cap": transport.DEFAULT_POINT_CAP,
        "w1_mean_pairwise": "sum over pairs / ((K-2)(K-1)); plain W1 for K = 2",
        "chebyshev_terms": het.CHEBYSHEV_TERMS,
        "chebyshev_windows": "n terms: forward [0,n-1], middle from floor((M-n)/2), inverse [M-n,M-1]",
        "deeponet_sensors": operators.SENSORS,
        "deeponet_p": "last hidden width",
        "burgers_inputs": "p(cos 2 pi x)",
        "hard_constraints": {
            "poisson1d": "x + x(pi - x) N",
            "helmholtz2d": "x(1-x)y(1-y) N",
            "allen-cahn": "x^2 cos(pi x) + t(1 - x^2) N",
            "inverse-dr": "u = x(1-x) N_u, k = softplus(N_k)",
        },
        "inverse_dr_residual_points": "10 interior points replicated on every client",
        "schaffer_grid": "40 x 40 uniform",
        "allen_cahn_reference": {"nodes": problems.AC_NODES, "dt": 1e-4},
        "helmholtz_k0": solvers.HELMHOLTZ_K0,
        "dr_lambda": solvers.DR_LAMBDA,
    }


def write_manifest(out: Path, name: str, argv: list[str], config: dict, artifacts: list[str]) -> None:
    body = {"experiment": name, "argv": argv, "config": config, "defaults": decided_defaults(),
            "version": __version__}
    digest = hashlib.sha256(json.dumps(body, sort_keys=True, default=str).encode()).hexdigest()
    body.update(input_hash=digest, created=dt.datetime.now(dt.timezone.utc).isoformat(),
                artifacts=artifacts)
    (out / "manifest.json").write_text(json.dumps(body, indent=2, sort_keys=True, default=str))


def save_params(params, path: Path) -> list[str]:
    """MLP blobs for every network in the container; DeepONet bias as raw float64."""
    written = []
    if isinstance(params, nn.MlpParams):
        path.with_suffix(".bin").write_bytes(params.to_bytes())
        return [path.with_suffix(".bin").name]
    if isinstance(params, nn.CompositeParams):
        for name, p in params.parts:
            written += save_params(p, path.with_name(f"{path.name}_{name}"))
        return written
    if isinstance(params, operators.DeepOnetParams):
        written += save_params(params.branch, path.with_name(f"{path.name}_branch"))
        written += save_params(params.trunk, path.with_name(f"{path.name}_trunk"))
        b0 = path.with_name(f"{path.name}_b0.bin")
        b0.write_bytes(np.array([params.b0], dtype="<f8").tobytes())
        return written + [b0.name]
    raise TypeError(f"cannot checkpoint {type(params).__name__}")


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _cfg_dict(args, keys) -> dict:
    return {k: getattr(args, k) for k in keys}


# ---- subcommands ---------------------------------------------------------------

def cmd_partition(args, argv):
    out = _outdir(args)
    pb = problems.get_problem(args.problem)
    shards = pb.shards(args.n, args.clients)
    files = []
    for s in shards:
        name = f"shard_{s.client_id}.csv"
        het.shards_to_csv([s], out / name)
        files.append(name)
    w1 = transport.shard_heterogeneity([s.points for s in shards], seed=args.seed) if args.clients > 1 else 0.0
    report = {"problem": args.problem, "n": args.n, "clients": args.clients,
              "sizes": [len(s) for s in shards], "w1": w1}
    (out / "w1.json").write_text(json.dumps(report, indent=2))
    print(f"W1 = {w1!r}  sizes = {report['sizes']}")
    write_manifest(out, "partition", argv, _cfg_dict(args, ["problem", "n", "clients", "seed"]),
                   files + ["w1.json"])


def _run_keys():
    return ["problem", "n", "clients", "local_epochs", "rounds", "lr", "client_opt", "seed", "reset_optimizer"]


def cmd_run(args, argv):
    out = _outdir(args)
    st = X.setup(args.problem, args.n, args.clients, args.seed)
    cfg = X.config_for(st.problem.defaults, args.clients, args.local_epochs, args.rounds, args.lr,
                       args.client_opt, args.seed, args.reset_optimizer)
    rows, finals = X.run_mode(st, args.mode, cfg, args.n)
    write_csv(out / "results.csv", X.RESULT_COLUMNS, rows)
    files = ["results.csv"]
    for i, p in enumerate(finals):
        stem = "params" if len(finals) == 1 else f"params_client{i}"
        files += save_params(p, out / stem)
    for r in rows:
        print(f"{r['mode']:>13} client={r['client']!s:<11} W1={r['w1']:.4g} L2={r['l2_rel_error']:.4g}")
    config = _cfg_dict(args, _run_keys() + ["mode"])
    config.update(local_epochs=cfg.local_epochs, rounds=cfg.rounds, lr=cfg.lr)
    write_manifest(out, "run", argv, config, files)


def cmd_sweep(args, argv):
    out = _outdir(args)
    pb = problems.get_problem(args.problem)
    n_list = args.n_list or list(pb.n_list)
    rows = X.sweep(args.problem, n_list, args.clients, modes=args.modes, seed=args.seed,
                   local_epochs=args.local_epochs, rounds=args.rounds, lr=args.lr,
                   client_opt=args.client_opt, reset_optimizer=args.reset_optimizer)
    write_csv(out / "sweep.csv", X.RESULT_COLUMNS, rows)
    for r in rows:
        print(f"n={r['n']:<4} {r['mode']:>13} client={r['client']!s:<11} W1={r['w1']:.4g} L2={r['l2_rel_error']:.4g}")
    config = _cfg_dict(args, [k for k in _run_keys() if k != "n"] + ["modes"])
    config["n_list"] = n_list
    write_manifest(out, "sweep", argv, config, ["sweep.csv"])


def cmd_comm_sweep(args, argv):
    out = _outdir(args)
    st = operators.setup_operator_task(args.problem, args.n, args.clients, args.seed,
                                       args.train_functions, args.test_functions)
    errs = operators.communication_sweep(st, args.e_list, args.total_iters, args.lr)
    rows = [{"E": e, "rounds": args.total_iters // e, "operator_error": v} for e, v in errs.items()]
    write_csv(out / "comm_sweep.csv", ["E", "rounds", "operator_error"], rows)
    for r in rows:
        print(f"E={r['E']:<6} rounds={r['rounds']:<6} error={r['operator_error']:.4g}")
    write_manifest(out, "comm-sweep", argv,
                   _cfg_dict(args, ["problem", "n", "clients", "e_list", "total_iters", "lr", "seed",
                                    "train_functions", "test_functions"]), ["comm_sweep.csv"])


def cmd_divergence(args, argv):
    out = _outdir(args)
    trace, report = X.divergence_experiment(args.problem, args.n, args.clients, args.seed,
                                            args.local_epochs, args.rounds, args.lr, args.client_opt)
    cols, rows = X.divergence_rows(trace, report)
    write_csv(out / "divergence.csv", cols, rows)
    summary = {"satisfied": report.satisfied, "m_hat": report.m_hat,
               "min_margin": min(report.margins) if report.margins else None,
               "rounds": len(report.rounds) - 1}
    (out / "bound_report.json").write_text(json.dumps(summary, indent=2))
    print(f"bound {'satisfied' if report.satisfied else 'VIOLATED'}: M-hat={report.m_hat:.4g} "
          f"final divergence={report.observed[-1]:.4g} bound={report.bound[-1]:.4g}")
    write_manifest(out, "divergence", argv, _cfg_dict(args, _run_keys()),
                   ["divergence.csv", "bound_report.json"])
    if not report.satisfied:
        raise FloatingPointError("observed divergence exceeds the bound")


def cmd_w1(args, argv):
    a = np.vstack([s.points for s in het.shards_from_csv(args.a)])
    b = np.vstack([s.points for s in het.shards_from_csv(args.b)])
    mu = transport.DiscreteDistribution.empirical(a, args.cap, args.seed)
    nu = transport.DiscreteDistribution.empirical(b, args.cap, args.seed + 1)
    value, plan = transport.emd_w1(mu, nu)
    print(repr(value))
    if args.plan:
        i, j = np.nonzero(plan.coupling)
        with open(args.plan, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["i", "j", "mass"])
            for r, c in zip(i, j):
                w.writerow([int(r), int(c), repr(float(plan.coupling[r, c]))])


def cmd_train_deeponet(args, argv):
    out = _outdir(args)
    rows, params = X.train_deeponet(args.problem, args.n, args.clients, args.mode, args.seed,
                                    args.local_epochs, args.rounds, args.lr,
                                    args.train_functions, args.test_functions)
    write_csv(out / "results.csv", X.OPERATOR_COLUMNS, rows)
    finals = params if isinstance(params, list) else [params]
    files = ["results.csv"]
    for i, p in enumerate(finals):
        files += save_params(p, out / ("params" if len(finals) == 1 else f"params_client{i}"))
    for r in rows:
        print(f"{r['mode']:>13} client={r['client']!s:<11} W1(coeff)={r['w1_coeff']:.4g} "
              f"error={r['operator_error']:.4g}")
    write_manifest(out, "train-deeponet", argv,
                   _cfg_dict(args, ["problem", "n", "clients", "mode", "local_epochs", "rounds", "lr",
                                    "seed", "train_functions", "test_functions"]), files)


def cmd_reference(args, argv):
    out = _outdir(args)
    if args.problem == "allen-cahn":
        rep = solvers.solve_allen_cahn(nx=args.nodes or problems.AC_NODES)
        tt, xx = np.meshgrid(rep.t, rep.x, indexing="ij")
        grid = np.column_stack([xx.ravel(), tt.ravel(), rep.u.ravel()])
        cols = ["x", "t", "u"]
    elif args.problem == "inverse-dr":
        rep = solvers.solve_dr_bvp(solvers.inverse_dr_k, nodes=args.nodes or 1001)
        grid = np.column_stack([rep.x, rep.u, solvers.inverse_dr_k(rep.x)])
        cols = ["x", "u", "k"]
    else:
        pb = problems.get_problem(args.problem)
        pts = pb.test_points()
        grid = np.column_stack([pts, pb.reference(pts)])
        cols = [f"x{i}" for i in range(pts.shape[1])] + ["u"]
    with open(out / "reference.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in grid:
            w.writerow([repr(float(v)) for v in row])
    print(f"wrote {len(grid)} rows to {out / 'reference.csv'}")


def cmd_replay(args, argv):
    manifest = json.loads(Path(args.manifest).read_text())
    old = list(manifest["argv"])
    if "--out" in old:
        old[old.index("--out") + 1] = args.out
    else:
        old += ["--out", args.out]
    return main(old)


# ---- parser --------------------------------------------------------------------

def _add_train_flags(p, with_mode=True):
    p.add_argument("--problem", required=True, choices=sorted(problems.PROBLEMS))
    if with_mode:
        p.add_argument("--mode", required=True, choices=X.MODES)
    p.add_argument("--clients", type=int, default=2)
    p.add_argument("--local-epochs", type=int, default=None, help="default: the problem's table value")
    p.add_argument("--rounds", type=int, default=None, help="global epochs; default: table value")
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--client-opt", choices=("adam", "sgd"), default="adam")
    p.add_argument("--reset-optimizer", action="store_true", help="zero Adam moments at each broadcast")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fedsciml", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("partition", help="write client shards and their W1")
    p.add_argument("--problem", required=True, choices=sorted(problems.PROBLEMS))
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--clients", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("run", help="train one centralized / extrapolation / federated model")
    _add_train_flags(p)
    p.add_argument("--n", type=int, required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="all modes over a list of n")
    _add_train_flags(p, with_mode=False)
    p.add_argument("--n-list", type=_int_list, default=None)
    p.add_argument("--modes", nargs="+", choices=X.MODES, default=list(X.MODES))
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("divergence", help="weight divergence against a centralized twin")
    _add_train_flags(p, with_mode=False)
    p.set_defaults(client_opt="sgd")
    p.add_argument("--n", type=int, required=True)
    p.set_defaults(func=cmd_divergence)

    p = sub.add_parser("comm-sweep", help="DeepONet error against local epochs at fixed total steps")
    p.add_argument("--problem", choices=sorted(operators.TASKS), default="antiderivative")
    p.add_argument("--e-list", "--E-list", dest="e_list", type=_int_list, default=[1, 10, 100, 1000])
    p.add_argument("--total-iters", type=int, default=50000)
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--clients", type=int, default=2)
    p.add_argument("--lr", type=float, default=nn.DEFAULT_LR)
    p.add_argument("--train-functions", type=int, default=None)
    p.add_argument("--test-functions", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_comm_sweep)

    p = sub.add_parser("w1", help="W1 between two shard CSVs")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--plan", default=None, help="write the nonzero transport plan entries here")
    p.add_argument("--cap", type=int, default=transport.DEFAULT_POINT_CAP)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_w1)

    p = sub.add_parser("train-deeponet", help="DeepONet on Chebyshev-space shards")
    p.add_argument("--problem", required=True, choices=sorted(operators.TASKS))
    p.add_argument("--mode", choices=X.MODES, default="federated")
    p.add_argument("--n", type=int, required=True, help="active Chebyshev terms per client")
    p.add_argument("--clients", type=int, default=2)
    p.add_argument("--local-epochs", type=int, default=None)
    p.add_argument("--rounds", type=int, default=None)
    p.add_argument("--lr", type=float, default=nn.DEFAULT_LR)
    p.add_argument("--train-functions", type=int, default=None)
    p.add_argument("--test-functions", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_deeponet)

    p = sub.add_parser("reference", help="export a reference solution grid as CSV")
    p.add_argument("--problem", required=True, choices=sorted(problems.PROBLEMS))
    p.add_argument("--nodes", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_reference)

    p = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_replay)
    return ap


NUMERIC_ERRORS = (FloatingPointError, solvers.SolverError, ad.NonFiniteError)
USAGE_ERRORS = (ValueError, KeyError, UsageError)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = args.func(args, argv)
    except fed.BoundHypothesisError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NUMERIC_ERRORS as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except USAGE_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    return rc or EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
