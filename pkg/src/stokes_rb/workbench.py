"""Run configuration and the train/query/bench orchestration layer.

Every run is reproducible from (config, seed): the training sample, the
benchmark parameters, and all tolerances derive from the RunConfig, whose
resolved values and digest are recorded in each output manifest.
"""

from __future__ import annotations

import hashlib
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import geometry
from .assembly import TimeGrid, assemble_affine_operators, build_truth_spaces
from .constants import TrainedConstantBounds, train_constant_bounds
from .estimation import (
    bound_nonsym,
    bound_penalty,
    bound_sym,
    effectivity,
    residual_norms_online,
)
from .persistence import geometry_digest, save_database
from .reduced import RBDatabase, reconstruct_trajectory, solve_rb_online
from .sampling import GreedyConfig, GreedyTrace, TrainingContext, pod_greedy_eps0, pod_greedy_penalty
from .truth import Trajectory, energy_norms, solve_truth


class UsageError(ValueError):
    pass


@dataclass
class RunConfig:
    """Desk-scale defaults; every field lands in the output manifests."""

    resolution: int = 4
    T: float = 1.0
    K: int = 100
    eps: float = 0.0
    tol: float = 1e-3
    stab_tol: float = 0.1
    kappa_tol: float = 5e4
    pod_rank: int = 2
    sigma_size: int = 512
    bench_samples: int = 25
    seed: int = 0
    max_outer: int = 60
    max_inner: int = 40
    constants_axis: int = 4
    constants_tol: float = 0.1
    with_basis: bool = True

    _FLOATS = ("T", "eps", "tol", "stab_tol", "kappa_tol", "constants_tol")
    _INTS = (
        "resolution",
        "K",
        "pod_rank",
        "sigma_size",
        "bench_samples",
        "seed",
        "max_outer",
        "max_inner",
        "constants_axis",
    )

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        values = {}
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise UsageError(f"malformed config line: {line!r}")
                key, _, value = line.partition("=")
                values[key.strip()] = value.strip()
        return cls.from_mapping(values)

    @classmethod
    def from_mapping(cls, values: dict) -> "RunConfig":
        kwargs = {}
        for key, value in values.items():
            if key in cls._FLOATS:
                kwargs[key] = float(value)
            elif key in cls._INTS:
                kwargs[key] = int(value)
            elif key == "with_basis":
                kwargs[key] = str(value).lower() in ("1", "true", "yes")
            else:
                raise UsageError(f"unknown config key {key!r}")
        return cls(**kwargs)

    def to_text(self) -> str:
        parts = []
        for key, value in asdict(self).items():
            if isinstance(value, float):
                parts.append(f"{key} = {value:.17g}")
            else:
                parts.append(f"{key} = {value}")
        return "\n".join(parts) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]


@dataclass
class TruthSetup:
    """Truth-side objects built once per configuration."""

    config: RunConfig
    mesh: object
    spaces: object
    ops: object
    grid: TimeGrid
    bounds: TrainedConstantBounds | None = None


def build_truth_setup(config: RunConfig, with_bounds: bool = True) -> TruthSetup:
    mesh = geometry.generate_reference_mesh(config.resolution)
    spaces = build_truth_spaces(mesh)
    ops = assemble_affine_operators(mesh, spaces)
    grid = TimeGrid(T=config.T, K=config.K)
    bounds = None
    if with_bounds:
        bounds = train_constant_bounds(
            ops,
            spaces,
            points_per_axis=config.constants_axis,
            tolerance=config.constants_tol,
            seed=config.seed + 7919,
        )
    return TruthSetup(config=config, mesh=mesh, spaces=spaces, ops=ops, grid=grid, bounds=bounds)


def training_sample(config: RunConfig, domain) -> np.ndarray:
    rng = np.random.default_rng(config.seed)
    return domain.sample(config.sigma_size, rng)


def train_database(config: RunConfig, setup: TruthSetup | None = None):
    """Run the matching greedy procedure; returns (db, trace, setup)."""
    setup = setup or build_truth_setup(config)
    sigma = training_sample(config, setup.ops.domain)
    greedy_config = GreedyConfig(
        training_sample=sigma,
        tol=config.tol,
        stab_tol=config.stab_tol,
        kappa_tol=config.kappa_tol,
        pod_rank=config.pod_rank,
        max_outer=config.max_outer,
        max_inner=config.max_inner,
        eps=config.eps,
    )
    ctx = TrainingContext(setup.spaces, setup.ops, setup.grid, setup.bounds)
    if config.eps == 0.0:
        pair, db, trace = pod_greedy_eps0(greedy_config, ctx)
    else:
        pair, db, trace = pod_greedy_penalty(greedy_config, ctx)
    db.geometry_digest = geometry_digest(config.resolution, setup.ops.domain)
    return db, trace, setup


def write_training_artifacts(
    out_dir, config: RunConfig, db: RBDatabase, trace: GreedyTrace
) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(config.to_text())
    trace.to_csv(os.path.join(out_dir, "trace.csv"))
    save_database(db, os.path.join(out_dir, "db"), with_basis=config.with_basis)
    with open(os.path.join(out_dir, "manifest.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"config_digest = {config.digest()}\n")
        fh.write(f"geometry_digest = {db.geometry_digest}\n")
        fh.write(f"converged = {trace.converged}\n")
        fh.write(f"final_max_rel_bound = {trace.final_bound:.17g}\n")
        fh.write(f"outer_iterations = {len(trace.records)}\n")
        fh.write(f"n_x = {db.n_x}\nn_y = {db.n_y}\n")
        fh.write(f"eps = {config.eps:.17g}\n")
        fh.write(f"supremizer_events = {trace.supremizer_events()}\n")
        fh.write(f"stabilization_events = {trace.stabilization_events()}\n")


# ---------------------------------------------------------------------------
# query


@dataclass
class QueryResult:
    mu: np.ndarray
    eps: float
    bound_kind: str
    ks: np.ndarray
    bounds: np.ndarray
    errors: np.ndarray | None
    effectivities: np.ndarray | None
    online_solve_seconds: float
    online_bound_seconds: float
    truth_solve_seconds: float | None
    constants_mode: str


def _median_time(fn, repeats: int = 5):
    fn()  # warm once
    times = []
    result = None
    for _ in range(repeats):
        start = time.perf_counter()
        result = fn()
        times.append(time.perf_counter() - start)
    return result, float(np.median(times))


def query_database(
    db: RBDatabase,
    mu,
    bound_kind: str = "sym",
    eps: float | None = None,
    ks=None,
    setup: TruthSetup | None = None,
) -> QueryResult:
    """Online solve plus certified bound, optionally with truth errors."""
    eps = db.eps if eps is None else float(eps)
    if bound_kind == "penalty" and not eps > 0:
        raise UsageError("penalty bound requested on an eps = 0 database/query")
    if bound_kind in ("sym", "nonsym") and eps > 0:
        raise UsageError(f"{bound_kind} bound is for eps = 0 queries, got eps = {eps}")
    mu = db.domain.require(mu)
    if db.bounds is not None:
        consts = db.bounds.at(mu, db)
    else:
        raise UsageError("database carries no trained constant bounds")

    rtraj, solve_seconds = _median_time(lambda: solve_rb_online(db, mu, eps))

    def bound_eval():
        norms = residual_norms_online(db, rtraj, mu, eps)
        if bound_kind == "sym":
            return bound_sym(norms, consts, db.grid)
        if bound_kind == "nonsym":
            return bound_nonsym(norms, consts, db.grid)
        return bound_penalty(norms, consts, db.grid, eps)

    series, bound_seconds = _median_time(bound_eval)
    ks = np.asarray(ks if ks is not None else np.arange(1, db.grid.K + 1), dtype=int)

    errors = effectivities = None
    truth_seconds = None
    if setup is not None:
        truth, truth_seconds = _median_time(
            lambda: solve_truth(setup.ops, setup.spaces, setup.grid, mu, eps), repeats=5
        )
        rec = reconstruct_trajectory(db, rtraj)
        diff = Trajectory(
            eps=eps, mu=mu, velocity=truth.velocity - rec.velocity,
            pressure=truth.pressure - rec.pressure,
        )
        report = energy_norms(diff, setup.ops, grid=setup.grid)
        err_series = report.l2z if bound_kind == "penalty" else report.l2x
        errors = err_series[ks]
        effectivities = np.array([effectivity(series.values[k], errors[i]) for i, k in enumerate(ks)])

    return QueryResult(
        mu=mu,
        eps=eps,
        bound_kind=bound_kind,
        ks=ks,
        bounds=series.values[ks],
        errors=errors,
        effectivities=effectivities,
        online_solve_seconds=solve_seconds,
        online_bound_seconds=bound_seconds,
        truth_solve_seconds=truth_seconds,
        constants_mode=consts.mode,
    )


# ---------------------------------------------------------------------------
# benchmark


@dataclass
class BenchReport:
    """Per-(N, k) maxima over the benchmark sample plus the timing table."""

    eps: float
    bound_kind: str
    n_cuts: list  # [(outer_n, n_x, n_y)]
    k_cuts: np.ndarray
    max_rel_error: np.ndarray  # (n_cuts, k_cuts)
    max_rel_bound: np.ndarray
    max_effectivity: np.ndarray
    max_effectivity_secondary: np.ndarray | None  # nonsym for eps = 0
    truth_seconds: float
    online_solve_seconds: float
    online_bound_seconds: float
    speedup: float
    constants_mode: str
    rows: list = field(default_factory=list)  # raw per-(mu, N, k) rows

    def to_csv(self, out_dir) -> None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "bench_tables.csv"), "w", encoding="utf-8") as fh:
            fh.write(
                "outer_n,N_X,N_Y,k,max_rel_error,max_rel_bound,max_effectivity,"
                "max_effectivity_nonsym,bound_kind,constants_mode,normalization\n"
            )
            for i, (outer_n, n_x, n_y) in enumerate(self.n_cuts):
                for j, k in enumerate(self.k_cuts):
                    secondary = (
                        "" if self.max_effectivity_secondary is None
                        else f"{self.max_effectivity_secondary[i, j]:.17g}"
                    )
                    fh.write(
                        f"{outer_n},{n_x},{n_y},{k},{self.max_rel_error[i, j]:.17g},"
                        f"{self.max_rel_bound[i, j]:.17g},{self.max_effectivity[i, j]:.17g},"
                        f"{secondary},{self.bound_kind},{self.constants_mode},truth\n"
                    )
        with open(os.path.join(out_dir, "bench_timing.csv"), "w", encoding="utf-8") as fh:
            fh.write("truth_seconds,online_solve_seconds,online_bound_seconds,speedup\n")
            fh.write(
                f"{self.truth_seconds:.17g},{self.online_solve_seconds:.17g},"
                f"{self.online_bound_seconds:.17g},{self.speedup:.17g}\n"
            )
        with open(os.path.join(out_dir, "bench_raw.csv"), "w", encoding="utf-8") as fh:
            fh.write(
                "mu0,mu1,outer_n,N_X,N_Y,k,rel_error,rel_bound,effectivity,"
                "bound_kind,constants_mode,normalization\n"
            )
            for row in self.rows:
                fh.write(
                    f"{row['mu'][0]:.17g},{row['mu'][1]:.17g},{row['outer_n']},{row['n_x']},"
                    f"{row['n_y']},{row['k']},{row['rel_error']:.17g},{row['rel_bound']:.17g},"
                    f"{row['effectivity']:.17g},{row['bound_kind']},{row['constants_mode']},truth\n"
                )


def default_k_cuts(K: int) -> np.ndarray:
    cuts = np.array([10, 20, 40, 60, 80, 100])
    return cuts[(cuts >= 1) & (cuts <= K)] if K >= 10 else np.array([K])


def default_n_cuts(db: RBDatabase, count: int = 5) -> list:
    history = db.dim_history or [(0, db.n_x, db.n_y)]
    if len(history) <= count:
        return list(history)
    idx = np.unique(np.linspace(0, len(history) - 1, count).round().astype(int))
    return [history[i] for i in idx]


def run_benchmark(
    db: RBDatabase,
    setup: TruthSetup,
    samples: int = 25,
    seed: int = 0,
    n_cuts: list | None = None,
    k_cuts=None,
    eps: float | None = None,
) -> BenchReport:
    """Truth-vs-online comparison over a random parameter sample."""
    eps = db.eps if eps is None else float(eps)
    bound_kind = "penalty" if eps > 0 else "sym"
    rng = np.random.default_rng(seed)
    mus = setup.ops.domain.sample(samples, rng)
    k_cuts = np.asarray(k_cuts if k_cuts is not None else default_k_cuts(db.grid.K), dtype=int)
    n_cuts = n_cuts if n_cuts is not None else default_n_cuts(db)

    shape = (len(n_cuts), len(k_cuts))
    max_err = np.zeros(shape)
    max_bound = np.zeros(shape)
    max_eff = np.zeros(shape)
    max_eff2 = np.zeros(shape) if eps == 0.0 else None
    rows = []

    sliced = [db.slice_to(nx, ny) for (_, nx, ny) in n_cuts]
    for mu in mus:
        truth = solve_truth(setup.ops, setup.spaces, setup.grid, mu, eps)
        truth_report = energy_norms(truth, setup.ops, grid=setup.grid)
        truth_norm = truth_report.l2z if eps > 0 else truth_report.l2x
        consts = db.bounds.at(mu, db)
        for i, sub in enumerate(sliced):
            rtraj = solve_rb_online(sub, mu, eps)
            norms = residual_norms_online(sub, rtraj, mu, eps)
            if eps > 0:
                series = bound_penalty(norms, consts, sub.grid, eps)
                series2 = None
            else:
                series = bound_sym(norms, consts, sub.grid)
                series2 = bound_nonsym(norms, consts, sub.grid)
            rec = reconstruct_trajectory(sub, rtraj)
            diff = Trajectory(
                eps=eps, mu=mu, velocity=truth.velocity - rec.velocity,
                pressure=truth.pressure - rec.pressure,
            )
            err_report = energy_norms(diff, setup.ops, grid=setup.grid)
            err_series = err_report.l2z if eps > 0 else err_report.l2x
            for j, k in enumerate(k_cuts):
                denom = truth_norm[k]
                rel_err = err_series[k] / denom if denom > 0 else float("inf")
                rel_bnd = series.values[k] / denom if denom > 0 else float("inf")
                eff = effectivity(series.values[k], err_series[k])
                max_err[i, j] = max(max_err[i, j], rel_err)
                max_bound[i, j] = max(max_bound[i, j], rel_bnd)
                if np.isfinite(eff):
                    max_eff[i, j] = max(max_eff[i, j], eff)
                row = {
                    "mu": mu,
                    "outer_n": n_cuts[i][0],
                    "n_x": n_cuts[i][1],
                    "n_y": n_cuts[i][2],
                    "k": int(k),
                    "rel_error": rel_err,
                    "rel_bound": rel_bnd,
                    "effectivity": eff,
                    "bound_kind": bound_kind,
                    "constants_mode": consts.mode,
                }
                if series2 is not None:
                    eff2 = effectivity(series2.values[k], err_series[k])
                    if np.isfinite(eff2):
                        max_eff2[i, j] = max(max_eff2[i, j], eff2)
                    row["bound_nonsym"] = float(series2.values[k])
                    row["bound_sym"] = float(series.values[k])
                rows.append(row)

    # timing at the full dimension, median of 5 with warm start
    mu_t = mus[0]
    _, truth_seconds = _median_time(
        lambda: solve_truth(setup.ops, setup.spaces, setup.grid, mu_t, eps)
    )
    rtraj, online_solve_seconds = _median_time(lambda: solve_rb_online(db, mu_t, eps))
    consts_t = db.bounds.at(mu_t, db)

    def bound_eval():
        norms = residual_norms_online(db, rtraj, mu_t, eps)
        if eps > 0:
            return bound_penalty(norms, consts_t, db.grid, eps)
        return bound_sym(norms, consts_t, db.grid)

    _, online_bound_seconds = _median_time(bound_eval)
    online_total = online_solve_seconds + online_bound_seconds
    speedup = truth_seconds / online_total if online_total > 0 else float("inf")

    return BenchReport(
        eps=eps,
        bound_kind=bound_kind,
        n_cuts=list(n_cuts),
        k_cuts=k_cuts,
        max_rel_error=max_err,
        max_rel_bound=max_bound,
        max_effectivity=max_eff,
        max_effectivity_secondary=max_eff2,
        truth_seconds=truth_seconds,
        online_solve_seconds=online_solve_seconds,
        online_bound_seconds=online_bound_seconds,
        speedup=speedup,
        constants_mode=db.constants_mode,
        rows=rows,
    )
