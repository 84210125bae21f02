"""POD compression and the two adaptive POD-greedy training procedures.

Each outer iteration appends rank-DeltaN POD modes of the selected
parameter's projection-error snapshots (pressure always, velocity for
fresh parameters), then runs a stabilization loop over the training
sample: the relative error bound picks the next parameter while a
stability indicator decides whether the velocity space needs enrichment
first.  For eps = 0 the indicator is the relative distance of the reduced
inf-sup constant to its truth upper bound; for eps > 0 it is the condition
number of the reduced time-step block matrix.  Velocity enrichment uses
POD modes of the worst-bounded parameter when it is parametrically fresh
(relative distance at least 0.1% from all previous picks) and a single
supremizer vector otherwise.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .assembly import AffineOperatorSet, TimeGrid, TruthDiscretization
from .constants import TrainedConstantBounds
from .estimation import (
    bound_penalty,
    bound_sym,
    reduced_trajectory_norms,
    residual_norms_online,
)
from .reduced import (
    BasisRecord,
    OfflineCompressor,
    RBDatabase,
    RBSpacePair,
    RBStabilityError,
    append_basis,
    rb_infsup_from_db,
    solve_rb_online,
    supremizer,
)
from .truth import solve_truth

PROXIMITY_THRESHOLD = 1e-3  # 0.1% relative parameter distance rule


class SamplingError(ValueError):
    pass


def pod_basis(snapshots, rank: int, inner) -> tuple[np.ndarray, np.ndarray]:
    """Leading rank-M POD modes of the snapshot set in the given inner product.

    Solves the snapshot Gram eigenproblem; modes are orthonormal in the
    inner product.  Returns (modes, all Gram eigenvalues in descending
    order); the mean squared best-approximation error of the discarded
    complement equals the sum of the discarded eigenvalues divided by the
    snapshot count.
    """
    s = np.asarray(snapshots, dtype=float)
    if s.ndim != 2:
        s = np.stack(list(snapshots), axis=1)
    gram = s.T @ (inner @ s)
    gram = 0.5 * (gram + gram.T)
    vals, vecs = np.linalg.eigh(gram)
    order = np.argsort(-vals, kind="stable")
    vals = vals[order]
    vecs = vecs[:, order]
    positive = np.clip(vals, 0.0, None)
    numerical_rank = int(np.count_nonzero(positive > 1e-12 * max(positive[0], 1e-300)))
    if rank > numerical_rank:
        raise SamplingError(
            f"requested POD rank {rank} exceeds numerical snapshot rank {numerical_rank}"
        )
    modes = s @ (vecs[:, :rank] / np.sqrt(positive[:rank]))
    return modes, vals


def beta_distance(beta_n: float, beta_ub: float) -> float:
    """Relative distance of the reduced inf-sup constant to its upper bound."""
    if not beta_ub > 0:
        raise SamplingError(f"beta upper bound must be positive, got {beta_ub}")
    if not np.isfinite(beta_n):
        return 0.0  # empty pressure space: vacuously stable
    return max((beta_ub - beta_n) / beta_ub, 0.0)


def beta_indicator(pair: RBSpacePair, ops: AffineOperatorSet, mu, beta_ub: float) -> float:
    from .reduced import rb_infsup

    return beta_distance(rb_infsup(pair, ops, mu), beta_ub)


def kappa_indicator(reduced_block: np.ndarray) -> float:
    """Spectral condition number of the reduced time-step block matrix."""
    svals = np.linalg.svd(np.asarray(reduced_block), compute_uv=False)
    if svals.size == 0 or svals[-1] < 1e-300:
        return float("inf")
    return float(svals[0] / svals[-1])


@dataclass
class GreedyConfig:
    """Knobs of the adaptive sampling procedures."""

    training_sample: np.ndarray  # (n, dim) exhaustive sample Sigma
    tol: float = 1e-3  # relative-bound stopping tolerance
    stab_tol: float = 0.1  # beta-distance tolerance (eps = 0)
    kappa_tol: float = 1e5  # condition-number tolerance (eps > 0)
    pod_rank: int = 2  # DeltaN
    mu_1: np.ndarray | None = None  # starting parameter (default: first sample)
    max_outer: int = 60
    max_inner: int = 40  # stabilization passes per outer iteration (safety cap)
    eps: float = 0.0

    def __post_init__(self):
        self.training_sample = np.atleast_2d(np.asarray(self.training_sample, dtype=float))
        if len(self.training_sample) == 0:
            raise SamplingError("training sample must be nonempty")
        if not (0.0 < self.tol < 1.0):
            raise SamplingError(f"tol must lie in (0, 1), got {self.tol}")
        if self.pod_rank < 1:
            raise SamplingError(f"pod_rank must be >= 1, got {self.pod_rank}")
        if self.mu_1 is None:
            self.mu_1 = self.training_sample[0]
        self.mu_1 = np.asarray(self.mu_1, dtype=float)


@dataclass
class StabilizationEvent:
    mu_star: tuple
    indicator: float
    action: str  # "pod_enrich" | "supremizer_enrich" | "enrichment_rejected"


@dataclass
class OuterRecord:
    iteration: int
    mu: tuple
    max_rel_bound: float
    exit_indicator: float
    n_x: int
    n_y: int
    events: list = field(default_factory=list)
    sweep_seconds: float = 0.0


@dataclass
class GreedyTrace:
    eps: float
    records: list = field(default_factory=list)
    converged: bool = False
    final_bound: float = float("inf")
    fresh_parameters: list = field(default_factory=list)  # velocity-POD source set D'

    def supremizer_events(self) -> int:
        return sum(
            1 for r in self.records for e in r.events if e.action == "supremizer_enrich"
        )

    def stabilization_events(self) -> int:
        return sum(len(r.events) for r in self.records)

    def max_bound_after(self, iteration: int) -> float:
        for r in self.records:
            if r.iteration == iteration:
                return r.max_rel_bound
        raise KeyError(f"no outer iteration {iteration} in trace")

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("iteration,mu0,mu1,bound,indicator,action,N_X,N_Y\n")
            for r in self.records:
                for e in r.events:
                    fh.write(
                        f"{r.iteration},{e.mu_star[0]:.17g},{e.mu_star[1]:.17g},"
                        f"nan,{e.indicator:.17g},{e.action},,\n"
                    )
                fh.write(
                    f"{r.iteration},{r.mu[0]:.17g},{r.mu[1]:.17g},"
                    f"{r.max_rel_bound:.17g},{r.exit_indicator:.17g},select,"
                    f"{r.n_x},{r.n_y}\n"
                )


@dataclass
class TrainingContext:
    """Truth-side collaborators shared by both greedy procedures."""

    spaces: TruthDiscretization
    ops: AffineOperatorSet
    grid: TimeGrid
    bounds: TrainedConstantBounds


class _GreedyEngine:
    def __init__(self, config: GreedyConfig, ctx: TrainingContext):
        self.config = config
        self.ctx = ctx
        self.pair = RBSpacePair(ctx.spaces)
        self.compressor = OfflineCompressor(
            ctx.spaces, ctx.ops, ctx.grid, bounds=ctx.bounds, eps=config.eps
        )
        self.sigma = config.training_sample
        self.selected: list[np.ndarray] = []  # D_N
        self.fresh: list[np.ndarray] = []  # D'
        self._truth_cache: dict = {}
        # parameter-independent per-sample data
        self.consts = [ctx.bounds.at(mu, ctx.ops) for mu in self.sigma]
        self.beta_ubs = np.array([c.beta_ub for c in self.consts])

    # -- truth snapshots ----------------------------------------------------

    def _truth(self, mu):
        key = tuple(np.asarray(mu, dtype=float))
        if key not in self._truth_cache:
            self._truth_cache[key] = solve_truth(
                self.ctx.ops, self.ctx.spaces, self.ctx.grid, mu, self.config.eps
            )
        return self._truth_cache[key]

    # -- enrichment helpers ---------------------------------------------------

    def _projection_errors(self, snapshots: np.ndarray, which: str) -> np.ndarray:
        if which == "velocity":
            basis, inner = self.pair.velocity, self.ctx.spaces.X_inner
        else:
            basis, inner = self.pair.pressure, self.ctx.spaces.Y_inner
        s = snapshots.T  # (n, K)
        if basis.shape[1] == 0:
            return s
        return s - basis @ (basis.T @ (inner @ s))

    def _pod_append(self, mu, snapshots: np.ndarray, which: str) -> int:
        errors = self._projection_errors(snapshots, which)
        inner = self.ctx.spaces.X_inner if which == "velocity" else self.ctx.spaces.Y_inner
        gram = errors.T @ (inner @ errors)
        positive = np.clip(np.linalg.eigvalsh(0.5 * (gram + gram.T)), 0.0, None)
        numerical_rank = int(np.count_nonzero(positive > 1e-12 * max(positive[-1], 1e-300)))
        rank = min(self.config.pod_rank, numerical_rank)
        if rank == 0:
            return 0
        modes, _ = pod_basis(errors, rank, inner)
        records = [
            BasisRecord(kind=f"pod_{which}", source_mu=tuple(np.asarray(mu)), rank=r)
            for r in range(rank)
        ]
        accepted, flags = append_basis(self.pair, modes, which, records=records)
        if accepted.shape[1]:
            if which == "velocity":
                self.compressor.append_velocity(accepted)
            else:
                self.compressor.append_pressure(accepted)
        return accepted.shape[1]

    def _append_supremizer(self, mu_star) -> bool:
        db = self.compressor.database()
        try:
            rtraj = solve_rb_online(db, mu_star, self.config.eps)
            rho = rtraj.pressure[-1]
        except RBStabilityError:
            rho = np.ones(db.n_y)  # unstable solve: fall back to a generic direction
        pressure_vec = self.pair.pressure @ rho
        y_norm = float(np.sqrt(max(pressure_vec @ (self.ctx.spaces.Y_inner @ pressure_vec), 0.0)))
        if y_norm <= 0.0:
            return False
        t = supremizer(mu_star, pressure_vec / y_norm, self.ctx.ops, self.ctx.spaces)
        record = BasisRecord(kind="supremizer", source_mu=tuple(np.asarray(mu_star)), rank=0)
        accepted, _ = append_basis(self.pair, t[:, None], "velocity", records=[record])
        if accepted.shape[1]:
            self.compressor.append_velocity(accepted)
            return True
        return False

    # -- the sweep ------------------------------------------------------------

    def _sweep(self, use_beta: bool):
        """Evaluate the relative bound and the stability indicator over Sigma."""
        db = self.compressor.database()
        eps = self.config.eps
        k_final = self.ctx.grid.K
        rel_bounds = np.empty(len(self.sigma))
        indicators = np.empty(len(self.sigma))
        for i, mu in enumerate(self.sigma):
            try:
                rtraj = solve_rb_online(db, mu, eps)
            except RBStabilityError:
                rel_bounds[i] = float("inf")
                indicators[i] = 1.0 if use_beta else float("inf")
                continue
            norms = residual_norms_online(db, rtraj, mu, eps)
            consts = self.consts[i]
            if eps == 0.0:
                series = bound_sym(norms, consts, self.ctx.grid)
                denom = reduced_trajectory_norms(db, rtraj, mu)[0][k_final]
            else:
                series = bound_penalty(norms, consts, self.ctx.grid, eps)
                denom = reduced_trajectory_norms(db, rtraj, mu)[1][k_final]
            bound_k = series.values[k_final]
            rel_bounds[i] = bound_k / denom if denom > 0 else float("inf")
            if use_beta:
                indicators[i] = beta_distance(rb_infsup_from_db(db, mu), self.beta_ubs[i])
            else:
                indicators[i] = kappa_indicator(db.block_matrix(mu, eps))
        return rel_bounds, indicators

    # -- main loop --------------------------------------------------------------

    def run(self) -> tuple[RBSpacePair, RBDatabase, GreedyTrace]:
        cfg = self.config
        use_beta = cfg.eps == 0.0
        stab_tol = cfg.stab_tol if use_beta else cfg.kappa_tol
        trace = GreedyTrace(eps=cfg.eps)
        mu_next = cfg.mu_1

        for iteration in range(1, cfg.max_outer + 1):
            mu_n = np.asarray(mu_next, dtype=float)
            self.selected.append(mu_n)
            traj = self._truth(mu_n)
            self._pod_append(mu_n, traj.pressure[1:], "pressure")
            if not any(np.array_equal(mu_n, m) for m in self.fresh):
                self._pod_append(mu_n, traj.velocity[1:], "velocity")

            events: list[StabilizationEvent] = []
            t_sweep = time.perf_counter()
            while True:
                rel_bounds, indicators = self._sweep(use_beta)
                i_prime = int(np.argmax(rel_bounds))
                i_star = int(np.argmax(indicators))
                mu_prime = self.sigma[i_prime]
                mu_star = self.sigma[i_star]
                if indicators[i_star] < stab_tol:
                    mu_next = mu_prime
                    break
                if len(events) >= cfg.max_inner:
                    mu_next = mu_prime
                    break
                distances = [
                    np.linalg.norm(mu_prime - m) / np.linalg.norm(m)
                    for m in (self.fresh + self.selected)
                ]
                if min(distances) >= PROXIMITY_THRESHOLD:
                    self.fresh.append(mu_prime.copy())
                    traj_prime = self._truth(mu_prime)
                    added = self._pod_append(mu_prime, traj_prime.velocity[1:], "velocity")
                    action = "pod_enrich" if added else "enrichment_rejected"
                else:
                    ok = self._append_supremizer(mu_star)
                    action = "supremizer_enrich" if ok else "enrichment_rejected"
                events.append(
                    StabilizationEvent(
                        mu_star=tuple(mu_star), indicator=float(indicators[i_star]), action=action
                    )
                )
                if action == "enrichment_rejected":
                    mu_next = mu_prime
                    break

            max_bound = float(rel_bounds[i_prime])
            self.compressor.record_dimensions(iteration)
            trace.records.append(
                OuterRecord(
                    iteration=iteration,
                    mu=tuple(mu_n),
                    max_rel_bound=max_bound,
                    exit_indicator=float(indicators[i_star]),
                    n_x=self.pair.n_x,
                    n_y=self.pair.n_y,
                    events=events,
                    sweep_seconds=time.perf_counter() - t_sweep,
                )
            )
            trace.final_bound = max_bound
            trace.fresh_parameters = [tuple(m) for m in self.fresh]
            if max_bound < cfg.tol:
                trace.converged = True
                break

        return self.pair, self.compressor.database(copy=True), trace


def pod_greedy_eps0(config: GreedyConfig, ctx: TrainingContext):
    """Adaptive sampling with inf-sup stabilization (eps = 0)."""
    if config.eps != 0.0:
        raise SamplingError(f"eps must be 0 for this procedure, got {config.eps}")
    if not (0.0 < config.stab_tol < 1.0):
        raise SamplingError(f"stab_tol must lie in (0, 1), got {config.stab_tol}")
    return _GreedyEngine(config, ctx).run()


def pod_greedy_penalty(config: GreedyConfig, ctx: TrainingContext):
    """Adaptive sampling with condition-number stabilization (eps > 0)."""
    if not config.eps > 0.0:
        raise SamplingError(f"eps must be positive for this procedure, got {config.eps}")
    if not config.kappa_tol > 0.0:
        raise SamplingError(f"kappa_tol must be positive, got {config.kappa_tol}")
    return _GreedyEngine(config, ctx).run()
