"""Residual dual norms and rigorous a posteriori error bounds.

The online path expands each squared residual dual norm as a quadratic form
in the reduced solution coefficients and the affine/ramp coefficients; the
parameter-independent Riesz Gram blocks live in the database.  Small
negative squared norms produced by cancellation are clamped to zero within
a recorded tolerance (clamping can only enlarge the bound, never break its
rigor); anything more negative raises a numerical error.

Three bound families are provided for the accumulated space-time energy
error: the general saddle-point bound, its sharpened variant for symmetric
diffusion forms, and the penalty bound (eps > 0) that avoids inf-sup
constants entirely at an O(1/sqrt(eps)) price.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .assembly import (
    AffineOperatorSet,
    TimeGrid,
    TruthDiscretization,
    ramp,
    ramp_rate,
    time_functionals,
    x_solver,
    y_solver,
)
from .constants import BoundConstants
from .reduced import RBDatabase, ReducedTrajectory

CLAMP_ABS = 1e-12  # absolute clamp window for negative squared norms
CLAMP_REL = 1e-14  # additional scale-aware window (times the term magnitude)


class NumericalError(RuntimeError):
    pass


class UsageError(ValueError):
    pass


@dataclass
class ResidualNorms:
    """Per-step dual norms of the two residuals (index 0 unused, zero)."""

    r1: np.ndarray  # ||r^{1,k}||_{X'}
    r2: np.ndarray  # ||r^{2,k}||_{Y'}
    clamped_steps: int = 0
    clamp_tolerance: float = CLAMP_ABS


def riesz_representer(spaces: TruthDiscretization, functional: np.ndarray, which_space: str):
    """Solve Inner * w = functional; the dual norm is sqrt(w . functional)."""
    functional = np.asarray(functional, dtype=float)
    if which_space == "X":
        w = x_solver(spaces).solve(functional)
    elif which_space == "Y":
        w = y_solver(spaces).solve(functional)
    else:
        raise UsageError(f"which_space must be 'X' or 'Y', got {which_space!r}")
    return w


def dual_norm(spaces: TruthDiscretization, functional: np.ndarray, which_space: str) -> float:
    w = riesz_representer(spaces, functional, which_space)
    return float(np.sqrt(max(w @ np.asarray(functional, dtype=float), 0.0)))


def _pair_block(gram: dict, gi, gj):
    if (gi, gj) in gram:
        return gram[(gi, gj)]
    return np.transpose(gram[(gj, gi)], (2, 3, 0, 1))


def _contract2(block, left, right):
    """theta-contract a (Qi, Ni, Qj, Nj) Gram block to (Ni, Nj)."""
    t = np.tensordot(left, block, axes=(0, 0))  # (Ni, Qj, Nj)
    return np.tensordot(t, right, axes=(1, 0))  # (Ni, Nj)


def _quadratic_matrix_x(db: RBDatabase, mu) -> np.ndarray:
    """Momentum-residual quadratic form over z = [h', h, w, c, d]."""
    tm, ta, tb = db.theta("m", mu), db.theta("a", mu), db.theta("b", mu)
    nx, ny = db.n_x, db.n_y
    dim = 2 + 2 * nx + ny
    s = np.zeros((dim, dim))
    sl = {
        "f": slice(0, 2),
        "w": slice(2, 2 + nx),
        "c": slice(2 + nx, 2 + 2 * nx),
        "d": slice(2 + 2 * nx, dim),
    }
    weights = {"w": ("m", tm), "c": ("a", ta), "d": ("b", tb)}
    gx = db.gram_x

    s[sl["f"], sl["f"]] = _pair_block(gx, "f", "f")[:, 0, :, 0]
    for zkey, (group, theta) in weights.items():
        blk = _pair_block(gx, "f", group)  # (2, 1, Q, N)
        s[sl["f"], sl[zkey]] = np.tensordot(blk, theta, axes=(2, 0))[:, 0, :]
        s[sl[zkey], sl["f"]] = s[sl["f"], sl[zkey]].T
    order = ["w", "c", "d"]
    for i, zi in enumerate(order):
        gi, ti = weights[zi]
        for zj in order[i:]:
            gj, tj = weights[zj]
            blk = _pair_block(gx, gi, gj)
            s[sl[zi], sl[zj]] = _contract2(blk, ti, tj)
            if zi != zj:
                s[sl[zj], sl[zi]] = s[sl[zi], sl[zj]].T
    return 0.5 * (s + s.T)


def _quadratic_matrix_y(db: RBDatabase, mu, eps: float) -> np.ndarray:
    """Continuity-residual quadratic form over z = [h, c, d]."""
    tb = -db.theta("b", mu)
    tc = eps * db.theta("c", mu)
    nx, ny = db.n_x, db.n_y
    dim = 1 + nx + ny
    s = np.zeros((dim, dim))
    sl = {"g": slice(0, 1), "c": slice(1, 1 + nx), "d": slice(1 + nx, dim)}
    weights = {"c": ("bv", tb), "d": ("cp", tc)}
    gy = db.gram_y

    s[sl["g"], sl["g"]] = _pair_block(gy, "g", "g")[:, 0, :, 0]
    for zkey, (group, theta) in weights.items():
        blk = _pair_block(gy, "g", group)  # (1, 1, Q, N)
        s[sl["g"], sl[zkey]] = np.tensordot(blk, theta, axes=(2, 0))[:, 0, :]
        s[sl[zkey], sl["g"]] = s[sl["g"], sl[zkey]].T
    order = ["c", "d"]
    for i, zi in enumerate(order):
        gi, ti = weights[zi]
        for zj in order[i:]:
            gj, tj = weights[zj]
            blk = _pair_block(gy, gi, gj)
            s[sl[zi], sl[zj]] = _contract2(blk, ti, tj)
            if zi != zj:
                s[sl[zj], sl[zi]] = s[sl[zi], sl[zj]].T
    return 0.5 * (s + s.T)


def _clamped_sqrt(squares: np.ndarray, scales):
    """Square roots with the negative-roundoff clamp; scales may be lazy."""
    negative = squares < 0
    if np.any(negative):
        scales = scales() if callable(scales) else scales
        tol = np.maximum(CLAMP_ABS, CLAMP_REL * np.asarray(scales))
        bad = squares < -tol
        if np.any(bad):
            worst = float(squares[bad].min())
            raise NumericalError(
                f"squared residual norm {worst:.3e} below the clamp window; "
                "the offline Gram data are inconsistent with the reduced solution"
            )
    clamped = int(np.count_nonzero(negative))
    return np.sqrt(np.clip(squares, 0.0, None)), clamped


def residual_norms_online(
    db: RBDatabase, rtraj: ReducedTrajectory, mu, eps: float | None = None
) -> ResidualNorms:
    """Dual norms of both residuals for every step, truth-dimension free."""
    if eps is None:
        eps = rtraj.eps
    mu = db.domain.require(mu)
    grid = db.grid
    k_all = np.arange(1, grid.K + 1)
    t = grid.times()[k_all]

    c = rtraj.velocity[k_all]
    c_prev = rtraj.velocity[k_all - 1]
    d = rtraj.pressure[k_all]
    w = (c - c_prev) / grid.dt

    z1 = np.concatenate(
        [ramp_rate(t)[:, None], ramp(t)[:, None], w, c, d], axis=1
    )
    s1 = _quadratic_matrix_x(db, mu)
    sq1 = ((z1 @ s1) * z1).sum(axis=1)

    z2 = np.concatenate([ramp(t)[:, None], c, d], axis=1)
    s2 = _quadratic_matrix_y(db, mu, eps)
    sq2 = ((z2 @ s2) * z2).sum(axis=1)

    r1, n1 = _clamped_sqrt(sq1, lambda: ((np.abs(z1) @ np.abs(s1)) * np.abs(z1)).sum(axis=1))
    r2, n2 = _clamped_sqrt(sq2, lambda: ((np.abs(z2) @ np.abs(s2)) * np.abs(z2)).sum(axis=1))
    out1 = np.zeros(grid.K + 1)
    out2 = np.zeros(grid.K + 1)
    out1[1:] = r1
    out2[1:] = r2
    return ResidualNorms(r1=out1, r2=out2, clamped_steps=n1 + n2)


def residual_norms_direct(
    spaces: TruthDiscretization,
    ops: AffineOperatorSet,
    grid: TimeGrid,
    velocity: np.ndarray,
    pressure: np.ndarray,
    mu,
    eps: float,
) -> ResidualNorms:
    """Truth-side oracle: assemble each residual vector and Riesz-solve it.

    velocity/pressure are the reconstructed reduced solution in truth
    coordinates, shaped like a Trajectory's arrays.
    """
    m = ops.assemble("m", mu)
    a = ops.assemble("a", mu)
    b = ops.assemble("b", mu)
    c = ops.assemble("c", mu)
    f, g = time_functionals(ops, grid)
    r1 = np.zeros(grid.K + 1)
    r2 = np.zeros(grid.K + 1)
    for k in range(1, grid.K + 1):
        du = (velocity[k] - velocity[k - 1]) / grid.dt
        res1 = f[k] - m @ du - a @ velocity[k] - b.T @ pressure[k]
        res2 = g[k] - b @ velocity[k] + eps * (c @ pressure[k])
        r1[k] = dual_norm(spaces, res1, "X")
        r2[k] = dual_norm(spaces, res2, "Y")
    return ResidualNorms(r1=r1, r2=r2)


@dataclass
class BoundSeries:
    """Cumulative error bound per time step (index 0 is zero)."""

    kind: str  # "nonsym" | "sym" | "penalty"
    values: np.ndarray  # (K+1,)
    constants: BoundConstants
    eps: float = 0.0

    def at(self, k: int) -> float:
        return float(self.values[k])


def _check_positive(**named):
    for name, value in named.items():
        if not value > 0:
            raise UsageError(f"bound formula needs {name} > 0, got {value}")


def _accumulate(per_step: np.ndarray, dt: float, kind: str, consts, eps=0.0) -> BoundSeries:
    values = np.zeros(per_step.shape[0] + 1)
    values[1:] = np.sqrt(dt * np.cumsum(per_step))
    return BoundSeries(kind=kind, values=values, constants=consts, eps=eps)


def bound_nonsym(
    norms: ResidualNorms, consts: BoundConstants, grid: TimeGrid, up_to_k: int | None = None
) -> BoundSeries:
    """Velocity energy-error bound for the general (nonsymmetric) form."""
    _check_positive(alpha_a_lb=consts.alpha_a_lb, beta_lb=consts.beta_lb)
    r1, r2 = norms.r1[1:], norms.r2[1:]
    al, gu, bl, gm = consts.alpha_a_lb, consts.gamma_a_ub, consts.beta_lb, consts.gamma_m_ub
    per_step = (
        r1**2 / al
        + (2.0 / bl) * (1.0 + gu / al) * r1 * r2
        + (gm / grid.dt + gu**2 / al) * r2**2 / bl**2
    )
    series = _accumulate(per_step, grid.dt, "nonsym", consts)
    return series if up_to_k is None else BoundSeries(
        "nonsym", series.values[: up_to_k + 1], consts
    )


def bound_sym(
    norms: ResidualNorms, consts: BoundConstants, grid: TimeGrid, up_to_k: int | None = None
) -> BoundSeries:
    """Sharpened bound valid when the diffusion form is symmetric."""
    _check_positive(alpha_a_lb=consts.alpha_a_lb, beta_lb=consts.beta_lb)
    r1, r2 = norms.r1[1:], norms.r2[1:]
    al, gu, bl, gm = consts.alpha_a_lb, consts.gamma_a_ub, consts.beta_lb, consts.gamma_m_ub
    per_step = (
        r1**2 / al
        + (2.0 / bl) * (1.0 + np.sqrt(gu / al)) * r1 * r2
        + (gm / grid.dt + gu) * r2**2 / bl**2
    )
    series = _accumulate(per_step, grid.dt, "sym", consts)
    return series if up_to_k is None else BoundSeries("sym", series.values[: up_to_k + 1], consts)


def bound_penalty(
    norms: ResidualNorms,
    consts: BoundConstants,
    grid: TimeGrid,
    eps: float,
    up_to_k: int | None = None,
) -> BoundSeries:
    """Velocity-pressure energy-error bound for the penalty formulation."""
    if not eps > 0:
        raise UsageError(f"penalty bound is defined for eps > 0 only, got {eps}")
    _check_positive(alpha_a_lb=consts.alpha_a_lb, alpha_c_lb=consts.alpha_c_lb)
    r1, r2 = norms.r1[1:], norms.r2[1:]
    per_step = r1**2 / consts.alpha_a_lb + r2**2 / (eps * consts.alpha_c_lb)
    series = _accumulate(per_step, grid.dt, "penalty", consts, eps=eps)
    return series if up_to_k is None else BoundSeries(
        "penalty", series.values[: up_to_k + 1], consts, eps=eps
    )


def effectivity(bound_value: float, true_error: float) -> float:
    """Bound over error; +inf sentinel when the error vanishes."""
    if true_error <= 0.0:
        return float("inf")
    return float(bound_value) / float(true_error)


def reduced_trajectory_norms(db: RBDatabase, rtraj: ReducedTrajectory, mu):
    """Space-time energy norms of a reduced trajectory (reduced-operator cost).

    Returns (l2x, l2z) arrays over k = 0..K; l2z uses the trajectory's eps.
    """
    m, a, _, c = db.reduced_operators(mu)
    u = rtraj.velocity
    p = rtraj.pressure
    dt = db.grid.dt
    m_sq = np.maximum(((u @ m) * u).sum(axis=1), 0.0)
    x_sq = np.maximum(((u @ a) * u).sum(axis=1), 0.0)
    y_sq = np.maximum(((p @ c) * p).sum(axis=1), 0.0)
    x_run = np.concatenate([[0.0], np.cumsum(x_sq[1:])])
    z_run = np.concatenate([[0.0], np.cumsum(x_sq[1:] + rtraj.eps * y_sq[1:])])
    return np.sqrt(m_sq + dt * x_run), np.sqrt(m_sq + dt * z_run)
