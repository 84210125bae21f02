"""Backward-Euler truth solves of the saddle-point system and energy norms.

For each time step the pair (u^k, p^k) solves the block system

    [ M(mu)/dt + A(mu)   B(mu)^T ] [u]   [ f^k + M(mu) u^{k-1} / dt ]
    [ B(mu)              -eps*C  ] [p] = [ g^k                      ]

starting from u^0 = 0.  The block matrix is factorized once per (mu, eps)
and reused across all K steps; at eps = 0 the system is the exactly
incompressible one (no regularization is ever added).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .assembly import AffineOperatorSet, TimeGrid, TruthDiscretization, time_functionals


class SolverError(RuntimeError):
    """Singular or numerically failed truth solve."""


class UsageError(ValueError):
    """Operation called with inconsistent arguments."""


@dataclass
class Trajectory:
    """Time-indexed coefficient vectors of one truth (or reconstructed) solve.

    velocity has K+1 rows (k = 0..K, row 0 is the zero initial state);
    pressure also has K+1 rows with row 0 unused (kept zero) so that row k
    matches time level k for k >= 1.
    """

    eps: float
    mu: np.ndarray
    velocity: np.ndarray  # (K+1, n_velocity)
    pressure: np.ndarray  # (K+1, n_pressure)

    @property
    def n_steps(self) -> int:
        return self.velocity.shape[0] - 1


def assemble_block_system(ops: AffineOperatorSet, grid: TimeGrid, mu, eps: float):
    """Parameter matrices and the time-step block matrix (CSC)."""
    m = ops.assemble("m", mu)
    a = ops.assemble("a", mu)
    b = ops.assemble("b", mu)
    c = ops.assemble("c", mu)
    block = sp.bmat([[m / grid.dt + a, b.T], [b, -eps * c]], format="csc")
    return m, a, b, c, block


def solve_truth(
    ops: AffineOperatorSet,
    spaces: TruthDiscretization,
    grid: TimeGrid,
    mu,
    eps: float = 0.0,
) -> Trajectory:
    """March the truth system over k = 1..K with one factorization."""
    mu = ops.domain.require(mu)
    if eps < 0:
        raise UsageError(f"penalty parameter must be >= 0, got {eps}")
    n_u = spaces.n_velocity
    n_p = spaces.n_pressure
    m, _, _, _, block = assemble_block_system(ops, grid, mu, eps)
    try:
        lu = spla.splu(block)
    except RuntimeError as exc:
        raise SolverError(
            f"time-step block matrix is singular at mu={mu}, eps={eps}; "
            "for eps = 0 this indicates an inf-sup (LBB) failure of the spaces"
        ) from exc

    f, g = time_functionals(ops, grid)
    velocity = np.zeros((grid.K + 1, n_u))
    pressure = np.zeros((grid.K + 1, n_p))
    rhs = np.empty(n_u + n_p)
    for k in range(1, grid.K + 1):
        rhs[:n_u] = f[k] + (m @ velocity[k - 1]) / grid.dt
        rhs[n_u:] = g[k]
        sol = lu.solve(rhs)
        if not np.all(np.isfinite(sol)):
            raise SolverError(f"non-finite truth solution at step {k}, mu={mu}, eps={eps}")
        velocity[k] = sol[:n_u]
        pressure[k] = sol[n_u:]
    return Trajectory(eps=float(eps), mu=mu, velocity=velocity, pressure=pressure)


@dataclass
class EnergyReport:
    """Per-step energy norms and their cumulative space-time combinations.

    l2x[k] = sqrt(m-norm(v^k)^2 + dt * sum_{j<=k} x-energy(v^j)^2) and l2z
    additionally accumulates eps * y-energy(q^j)^2.
    """

    mu: np.ndarray
    eps: float
    m_norms: np.ndarray  # ||v^k||_mu
    x_energies: np.ndarray  # ||v^k||_{X,mu}
    y_energies: np.ndarray  # ||q^k||_{Y,mu}
    l2x: np.ndarray
    l2z: np.ndarray


def energy_norms(
    traj: Trajectory,
    ops: AffineOperatorSet,
    mu=None,
    up_to_k: int | None = None,
    grid: TimeGrid | None = None,
    dt: float | None = None,
) -> EnergyReport:
    """Spatio-temporal energy norms of a trajectory.

    The time-step size is taken from grid or dt, defaulting to T = 1
    spread over the trajectory's own step count.
    """
    mu = traj.mu if mu is None else np.asarray(mu, dtype=float)
    if dt is None:
        dt = grid.dt if grid is not None else 1.0 / traj.n_steps
    kmax = traj.n_steps if up_to_k is None else int(up_to_k)
    if kmax > traj.n_steps:
        raise UsageError(f"up_to_k={kmax} exceeds trajectory length {traj.n_steps}")

    m = ops.assemble("m", mu)
    a = ops.assemble("a", mu)
    c = ops.assemble("c", mu)
    u = traj.velocity[: kmax + 1]
    p = traj.pressure[: kmax + 1]
    m_sq = np.einsum("ki,ki->k", u, (m @ u.T).T)
    x_sq = np.einsum("ki,ki->k", u, (a @ u.T).T)
    y_sq = np.einsum("ki,ki->k", p, (c @ p.T).T)
    # roundoff guard: quadratic forms of SPD operators
    m_sq = np.maximum(m_sq, 0.0)
    x_sq = np.maximum(x_sq, 0.0)
    y_sq = np.maximum(y_sq, 0.0)

    x_run = np.concatenate([[0.0], np.cumsum(x_sq[1:])])
    z_run = np.concatenate([[0.0], np.cumsum(x_sq[1:] + traj.eps * y_sq[1:])])
    l2x = np.sqrt(m_sq + dt * x_run)
    l2z = np.sqrt(m_sq + dt * z_run)
    return EnergyReport(
        mu=mu,
        eps=traj.eps,
        m_norms=np.sqrt(m_sq),
        x_energies=np.sqrt(x_sq),
        y_energies=np.sqrt(y_sq),
        l2x=l2x,
        l2z=l2z,
    )


def trajectory_error(truth: Trajectory, approx: Trajectory):
    """Componentwise per-step differences truth - approx (in truth coordinates)."""
    if truth.velocity.shape != approx.velocity.shape or truth.pressure.shape != approx.pressure.shape:
        raise UsageError(
            f"trajectory shapes differ: {truth.velocity.shape}/{truth.pressure.shape} vs "
            f"{approx.velocity.shape}/{approx.pressure.shape}"
        )
    if truth.eps != approx.eps or not np.array_equal(truth.mu, approx.mu):
        raise UsageError("trajectories belong to different (mu, eps)")
    return truth.velocity - approx.velocity, truth.pressure - approx.pressure


def error_trajectory(truth: Trajectory, approx: Trajectory) -> Trajectory:
    e_u, e_p = trajectory_error(truth, approx)
    return Trajectory(eps=truth.eps, mu=truth.mu, velocity=e_u, pressure=e_p)


def export_trajectory(traj: Trajectory, grid: TimeGrid, directory) -> None:
    """Per-step coefficient vectors in MatrixMarket array format plus manifest."""
    import os

    from scipy.io import mmwrite

    os.makedirs(directory, exist_ok=True)
    mu_txt = " ".join(f"{v:.17g}" for v in np.atleast_1d(traj.mu))
    with open(os.path.join(directory, "manifest.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"mu = {mu_txt}\neps = {traj.eps:.17g}\nT = {grid.T:.17g}\nK = {grid.K}\n")
    for k in range(traj.n_steps + 1):
        mmwrite(os.path.join(directory, f"velocity_{k:04d}.mtx"), traj.velocity[k][:, None], precision=17)
        if k >= 1:
            mmwrite(os.path.join(directory, f"pressure_{k:04d}.mtx"), traj.pressure[k][:, None], precision=17)
