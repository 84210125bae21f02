"""Command-line front end: mesh, train, query, bench, constants.

Exit codes: 0 success, 2 usage error, 3 numerical failure, 4 training did
not converge within its iteration budget (partial artifacts are kept).
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import constants as constants_mod
from . import estimation, geometry, sampling, truth, workbench
from .assembly import dump_affine_operators
from .persistence import PersistenceError, load_database
from .reduced import RBStabilityError, UsageError as RBUsageError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERICAL = 3
EXIT_NONCONVERGED = 4

_USAGE_ERRORS = (
    workbench.UsageError,
    RBUsageError,
    estimation.UsageError,
    constants_mod.UsageError,
    geometry.ConfigurationError,
    geometry.DomainError,
    sampling.SamplingError,
    truth.UsageError,
    PersistenceError,
)
_NUMERICAL_ERRORS = (
    estimation.NumericalError,
    constants_mod.NumericalError,
    truth.SolverError,
    RBStabilityError,
)


def _parse_mu(text: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in text.split(",")])
    except ValueError as exc:
        raise workbench.UsageError(f"cannot parse parameter value {text!r}") from exc


def _load_config(args) -> workbench.RunConfig:
    config = workbench.RunConfig.from_file(args.config) if args.config else workbench.RunConfig()
    overrides = {}
    for key in ("resolution", "K", "sigma_size", "seed", "max_outer", "bench_samples"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    for key in ("eps", "tol", "stab_tol", "kappa_tol", "with_basis"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    if overrides:
        merged = {**{k: v for k, v in workbench.asdict(config).items()}, **overrides}
        config = workbench.RunConfig(**merged)
    return config


def cmd_mesh(args) -> int:
    mesh = geometry.generate_reference_mesh(args.resolution)
    geometry.export_mesh(mesh, args.out)
    print(
        f"wrote {args.out}: {mesh.n_vertices} vertices, {mesh.n_triangles} triangles, "
        f"{mesh.boundary_edges.shape[0]} boundary edges"
    )
    if args.operators_out:
        from .assembly import assemble_affine_operators, build_truth_spaces

        spaces = build_truth_spaces(mesh)
        ops = assemble_affine_operators(mesh, spaces)
        written = dump_affine_operators(ops, args.operators_out)
        print(f"wrote {len(written)} affine operator terms to {args.operators_out}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _load_config(args)
    print(f"training: eps={config.eps} tol={config.tol} resolution={config.resolution} "
          f"|Sigma|={config.sigma_size} seed={config.seed}")
    db, trace, _ = workbench.train_database(config)
    workbench.write_training_artifacts(args.out, config, db, trace)
    print(
        f"finished: converged={trace.converged} outer={len(trace.records)} "
        f"N_X={db.n_x} N_Y={db.n_y} final max relative bound={trace.final_bound:.3e}"
    )
    print(f"artifacts in {args.out}")
    if not trace.converged:
        print("training did NOT reach the requested tolerance", file=sys.stderr)
        return EXIT_NONCONVERGED
    return EXIT_OK


def cmd_query(args) -> int:
    db = load_database(os.path.join(args.db, "db") if os.path.isdir(os.path.join(args.db, "db")) else args.db)
    mu = _parse_mu(args.mu)
    eps = db.eps if args.eps_check is None else args.eps_check
    setup = None
    if args.with_truth:
        config = workbench.RunConfig.from_file(os.path.join(args.db, "config.txt")) \
            if os.path.exists(os.path.join(args.db, "config.txt")) else workbench.RunConfig()
        setup = workbench.build_truth_setup(config, with_bounds=False)
    ks = None
    if args.k is not None:
        ks = [args.k]
    result = workbench.query_database(db, mu, bound_kind=args.bound, eps=eps, ks=ks, setup=setup)
    print(f"mu = {mu.tolist()}  eps = {result.eps}  bound = {result.bound_kind}  "
          f"constants_mode = {result.constants_mode}")
    print(f"online solve: {result.online_solve_seconds * 1e3:.3f} ms, "
          f"bound evaluation: {result.online_bound_seconds * 1e3:.3f} ms")
    if result.truth_solve_seconds is not None:
        print(f"truth solve: {result.truth_solve_seconds * 1e3:.1f} ms")
    header = "k,bound" + (",true_error,effectivity" if result.errors is not None else "")
    print(header)
    for i, k in enumerate(result.ks):
        line = f"{k},{result.bounds[i]:.6e}"
        if result.errors is not None:
            line += f",{result.errors[i]:.6e},{result.effectivities[i]:.4f}"
        print(line)
    if args.export_truth and setup is not None:
        traj = truth.solve_truth(setup.ops, setup.spaces, setup.grid, mu, eps)
        truth.export_trajectory(traj, setup.grid, args.export_truth)
        print(f"exported truth trajectory to {args.export_truth}")
    return EXIT_OK


def cmd_bench(args) -> int:
    base = args.db
    db = load_database(os.path.join(base, "db") if os.path.isdir(os.path.join(base, "db")) else base)
    config_path = os.path.join(base, "config.txt")
    config = workbench.RunConfig.from_file(config_path) if os.path.exists(config_path) \
        else workbench.RunConfig()
    setup = workbench.build_truth_setup(config, with_bounds=False)
    samples = args.samples if args.samples is not None else config.bench_samples
    seed = args.seed if args.seed is not None else config.seed
    report = workbench.run_benchmark(db, setup, samples=samples, seed=seed)
    report.to_csv(args.out)
    with open(os.path.join(args.out, "manifest.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"config_digest = {config.digest()}\n")
        fh.write(f"geometry_digest = {db.geometry_digest}\n")
        fh.write(f"samples = {samples}\nseed = {seed}\n")
        fh.write(f"eps = {db.eps:.17g}\nconstants_mode = {db.constants_mode}\n")
    print(
        f"benchmark over {samples} parameters: truth {report.truth_seconds * 1e3:.1f} ms, "
        f"online {(report.online_solve_seconds + report.online_bound_seconds) * 1e3:.2f} ms, "
        f"speedup x{report.speedup:.1f}"
    )
    print(f"tables in {args.out}")
    return EXIT_OK


def cmd_constants(args) -> int:
    config = workbench.RunConfig(resolution=args.resolution,
                                 constants_axis=args.grid, constants_tol=args.tol)
    setup = workbench.build_truth_setup(config, with_bounds=True)
    bounds = setup.bounds
    print("certified relative gaps on the validation sample:")
    for kind, gap in bounds.certified_gaps.items():
        flag = " (heuristic)" if kind in bounds.heuristic_kinds else ""
        print(f"  {kind}: {gap:.4f}{flag}" if gap == gap else f"  {kind}: n/a{flag}")
    if args.check:
        rng = np.random.default_rng(config.seed + 1)
        bad = 0
        for mu in setup.ops.domain.sample(args.check, rng):
            pack = bounds.at(mu, setup.ops)
            for kind in constants_mod.BOUND_KINDS:
                lo, hi = pack.pair(kind)
                exact = constants_mod.exact_constant(kind, mu, setup.ops, setup.spaces)
                if not (lo <= exact <= hi):
                    bad += 1
                    print(f"  VIOLATION {kind.value} at mu={mu}: {lo} <= {exact} <= {hi}")
        print(f"rigor check on {args.check} samples: {bad} violations")
        if bad:
            return EXIT_NUMERICAL
    if args.out:
        constants_mod.save_constant_bounds(bounds, args.out)
        print(f"wrote trained bounds to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stokes-rb",
        description="Certified reduced-basis workbench for the time-dependent Stokes channel",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_mesh = sub.add_parser("mesh", help="generate and export the reference mesh")
    p_mesh.add_argument("--resolution", type=int, default=4)
    p_mesh.add_argument("--out", required=True)
    p_mesh.add_argument("--operators-out", default=None,
                        help="also dump the affine operator terms (MatrixMarket)")
    p_mesh.set_defaults(func=cmd_mesh)

    p_train = sub.add_parser("train", help="run the POD-greedy training")
    p_train.add_argument("--config", default=None, help="key = value config file")
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--eps", type=float, default=None)
    p_train.add_argument("--tol", type=float, default=None)
    p_train.add_argument("--stab-tol", dest="stab_tol", type=float, default=None)
    p_train.add_argument("--kappa-tol", dest="kappa_tol", type=float, default=None)
    p_train.add_argument("--resolution", type=int, default=None)
    p_train.add_argument("--K", type=int, default=None)
    p_train.add_argument("--sigma-size", dest="sigma_size", type=int, default=None)
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--max-outer", dest="max_outer", type=int, default=None)
    p_train.add_argument("--with-basis", dest="with_basis", action="store_true", default=None,
                         help="store basis matrices in the database (default: on)")
    p_train.add_argument("--without-basis", dest="with_basis", action="store_false",
                         help="omit basis matrices from the stored database")
    p_train.set_defaults(func=cmd_train)

    p_query = sub.add_parser("query", help="certified online query against a database")
    p_query.add_argument("--db", required=True, help="training output directory (or db/ inside)")
    p_query.add_argument("--mu", required=True, help="comma-separated parameter value")
    p_query.add_argument("--bound", choices=("sym", "nonsym", "penalty"), default="sym")
    p_query.add_argument("--eps-check", dest="eps_check", type=float, default=None,
                         help="query at this penalty parameter instead of the trained one")
    p_query.add_argument("--k", type=int, default=None, help="report only this time level")
    p_query.add_argument("--with-truth", dest="with_truth", action="store_true")
    p_query.add_argument("--export-truth", dest="export_truth", default=None)
    p_query.set_defaults(func=cmd_query)

    p_bench = sub.add_parser("bench", help="desk-scale benchmark suite")
    p_bench.add_argument("--db", required=True)
    p_bench.add_argument("--samples", type=int, default=None)
    p_bench.add_argument("--seed", type=int, default=None)
    p_bench.add_argument("--out", required=True)
    p_bench.set_defaults(func=cmd_bench)

    p_const = sub.add_parser("constants", help="train/inspect stability-constant bounds")
    p_const.add_argument("--resolution", type=int, default=4)
    p_const.add_argument("--grid", type=int, default=4, help="training grid points per axis")
    p_const.add_argument("--tol", type=float, default=0.1)
    p_const.add_argument("--check", type=int, default=0, help="rigor-check on this many samples")
    p_const.add_argument("--out", default=None, help="write the trained bound tables (npz)")
    p_const.set_defaults(func=cmd_constants)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _USAGE_ERRORS as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except _NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
