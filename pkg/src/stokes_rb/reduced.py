"""Reduced-basis spaces, offline compression, and the online solver.

The velocity/pressure bases are nested and append-only; every appended
vector is orthonormalized against its space's inner product.  Compression
projects each affine operator term onto the bases and maintains the
residual Riesz Gram blocks incrementally, so the greedy training loop pays
only for the newly added vectors.  The resulting RBDatabase is
self-sufficient for online solves and error bounds: it carries the reduced
operators, right-hand-side reductions, residual Gram data, trained constant
bounds, the time grid, and bookkeeping metadata.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse.linalg as spla

from .assembly import AffineOperatorSet, TimeGrid, TruthDiscretization, ramp, ramp_rate
from .geometry import ParameterDomain, evaluate_affine_maps

SCHEMA_VERSION = 1

ORTH_TOL = 1e-10  # post-orthogonalization norm below which vectors are rejected

# residual generator groups: momentum side lives in X', continuity side in Y'
X_GROUPS = ("f", "m", "a", "b")
Y_GROUPS = ("g", "bv", "cp")


class RBStabilityError(RuntimeError):
    """Singular reduced system (unstable space pair at eps = 0)."""


class UsageError(ValueError):
    pass


@dataclass(frozen=True)
class BasisRecord:
    kind: str  # "pod_velocity" | "pod_pressure" | "supremizer"
    source_mu: tuple
    rank: int  # POD rank within its enrichment (or 0 for supremizers)


@dataclass
class RBSpacePair:
    """Nested velocity/pressure bases with provenance, orthonormal columns."""

    spaces: TruthDiscretization
    velocity: np.ndarray = None  # (n_free, N_X)
    pressure: np.ndarray = None  # (n_pressure, N_Y)
    velocity_provenance: list = field(default_factory=list)
    pressure_provenance: list = field(default_factory=list)
    version: int = 0

    def __post_init__(self):
        if self.velocity is None:
            self.velocity = np.zeros((self.spaces.n_velocity, 0))
        if self.pressure is None:
            self.pressure = np.zeros((self.spaces.n_pressure, 0))

    @property
    def n_x(self) -> int:
        return self.velocity.shape[1]

    @property
    def n_y(self) -> int:
        return self.pressure.shape[1]

    @property
    def n_z(self) -> int:
        return self.n_x + self.n_y


def _orthonormal_append(basis: np.ndarray, inner, vectors: np.ndarray, tol: float):
    """Two-pass Gram-Schmidt of vectors against basis (and each other).

    Returns (accepted_matrix, accepted_flags); vectors whose residual norm
    after orthogonalization falls below tol are rejected.
    """
    accepted = []
    flags = []
    for vec in np.atleast_2d(vectors.T):
        v = vec.astype(float).copy()
        for _ in range(2):
            if basis.shape[1]:
                v -= basis @ (basis.T @ (inner @ v))
            for w in accepted:
                v -= w * (w @ (inner @ v))
        norm = float(np.sqrt(max(v @ (inner @ v), 0.0)))
        if norm < tol:
            flags.append(False)
            continue
        accepted.append(v / norm)
        flags.append(True)
    mat = np.stack(accepted, axis=1) if accepted else np.zeros((basis.shape[0], 0))
    return mat, flags


def append_basis(
    pair: RBSpacePair,
    new_vectors: np.ndarray,
    which: str,
    records=None,
    tol: float = ORTH_TOL,
):
    """Orthonormalize and append vectors to one of the bases.

    Vectors already in the span (post-orthogonalization norm < tol) are
    rejected and reported through the returned flag list; accepted vectors
    bump the pair's version counter.
    """
    if which == "velocity":
        inner = pair.spaces.X_inner
        basis = pair.velocity
    elif which == "pressure":
        inner = pair.spaces.Y_inner
        basis = pair.pressure
    else:
        raise UsageError(f"which must be 'velocity' or 'pressure', got {which!r}")
    new_vectors = np.atleast_2d(np.asarray(new_vectors, dtype=float))
    if new_vectors.shape[0] != basis.shape[0]:
        new_vectors = new_vectors.T
    if new_vectors.shape[0] != basis.shape[0]:
        raise UsageError(
            f"vector length {new_vectors.shape} does not match truth dimension {basis.shape[0]}"
        )
    mat, flags = _orthonormal_append(basis, inner, new_vectors, tol)
    if records is None:
        records = [BasisRecord(kind=f"pod_{which}", source_mu=(), rank=i) for i in range(len(flags))]
    kept_records = [r for r, ok in zip(records, flags) if ok]
    if mat.shape[1]:
        if which == "velocity":
            pair.velocity = np.concatenate([pair.velocity, mat], axis=1)
            pair.velocity_provenance.extend(kept_records)
        else:
            pair.pressure = np.concatenate([pair.pressure, mat], axis=1)
            pair.pressure_provenance.extend(kept_records)
        pair.version += 1
    return mat, flags


# ---------------------------------------------------------------------------
# residual Gram bookkeeping


class _GramSide:
    """Representers and Gram blocks of one residual side (X' or Y').

    Generators are grouped; each group g holds Q_g affine terms times N_g
    basis vectors (fixed groups f/g have N = 1).  Block (gi, gj) stores the
    Riesz Gram r_i^T Inner^-1 r_j with shape (Q_i, N_i, Q_j, N_j).
    """

    FIXED = ("f", "g")

    def __init__(self, n_truth: int, groups, q_of: dict, solver):
        self.groups = list(groups)
        self.solver = solver
        self.reps = {
            g: np.zeros((n_truth, q_of[g], 1 if g in self.FIXED else 0)) for g in groups
        }
        self.blocks = {}
        for i, gi in enumerate(groups):
            for gj in groups[i:]:
                self.blocks[(gi, gj)] = np.einsum(
                    "npi,nqj->piqj", self.reps[gi], self.reps[gj]
                )

    def block(self, gi, gj):
        """Gram block in requested order (transposing the stored one if needed)."""
        if (gi, gj) in self.blocks:
            return self.blocks[(gi, gj)]
        return np.transpose(self.blocks[(gj, gi)], (2, 3, 0, 1))

    def set_fixed(self, group, raw):
        """Install the generators of a fixed-size group (f or g).

        Gram entries pair a representer with a raw generator (W^T R), never
        two representers.
        """
        n_truth = raw.shape[0]
        reps = self.solver(raw.reshape(n_truth, -1)).reshape(raw.shape)
        self.reps[group] = reps
        for other in self.groups:
            if other == group:
                blk = np.einsum("npi,nqj->piqj", reps, raw, optimize=True)
                self.blocks[(group, group)] = 0.5 * (blk + np.transpose(blk, (2, 3, 0, 1)))
            else:
                cross = np.einsum("npi,nqj->piqj", self.reps[other], raw, optimize=True)
                if self.groups.index(other) < self.groups.index(group):
                    self.blocks[(other, group)] = cross
                else:
                    self.blocks[(group, other)] = np.transpose(cross, (2, 3, 0, 1))

    def append(self, group, raw_new):
        """Append generators (n, Q, k) to a growable group; update all blocks."""
        n_truth, q, k = raw_new.shape
        if k == 0:
            return
        reps_new = self.solver(raw_new.reshape(n_truth, -1)).reshape(raw_new.shape)
        for other in self.groups:
            if other == group:
                continue
            w_other = self.reps[other]
            cross = np.einsum("npi,nqj->piqj", w_other, raw_new, optimize=True)
            if self.groups.index(other) <= self.groups.index(group):
                old = self.blocks[(other, group)]
                self.blocks[(other, group)] = np.concatenate([old, cross], axis=3)
            else:
                old = self.blocks[(group, other)]
                self.blocks[(group, other)] = np.concatenate(
                    [old, np.transpose(cross, (2, 3, 0, 1))], axis=1
                )
        # diagonal block
        cross = np.einsum("npi,nqj->piqj", self.reps[group], raw_new, optimize=True)
        corner = np.einsum("npi,nqj->piqj", reps_new, raw_new, optimize=True)
        corner = 0.5 * (corner + np.transpose(corner, (2, 3, 0, 1)))
        old = self.blocks[(group, group)]
        top = np.concatenate([old, cross], axis=3)
        bottom = np.concatenate([np.transpose(cross, (2, 3, 0, 1)), corner], axis=3)
        self.blocks[(group, group)] = np.concatenate([top, bottom], axis=1)
        self.reps[group] = np.concatenate([self.reps[group], reps_new], axis=2)


@dataclass
class RBDatabase:
    """Everything the online stage needs, independent of the truth objects."""

    domain: ParameterDomain
    grid: TimeGrid
    eps: float
    q_counts: dict
    m_red: np.ndarray  # (Qm, N_X, N_X)
    a_red: np.ndarray
    b_red: np.ndarray  # (Qb, N_Y, N_X)
    c_red: np.ndarray  # (Qc, N_Y, N_Y)
    f_mass_red: np.ndarray
    f_stiff_red: np.ndarray
    g_red: np.ndarray
    gram_x: dict  # blocks keyed by ordered group pairs
    gram_y: dict
    bounds: object  # TrainedConstantBounds or None (exact mode handled upstream)
    velocity_basis: np.ndarray | None
    pressure_basis: np.ndarray | None
    dim_history: list  # [(outer_iteration, N_X, N_Y)]
    version: int = 0
    schema_version: int = SCHEMA_VERSION
    geometry_digest: str = ""
    constants_mode: str = "trained"

    @property
    def n_x(self) -> int:
        return self.m_red.shape[1]

    @property
    def n_y(self) -> int:
        return self.c_red.shape[1]

    def theta(self, form: str, mu) -> np.ndarray:
        maps = evaluate_affine_maps(mu, self.domain)
        dx = np.array([m.matrix[0, 0] for m in maps])
        dy = np.array([m.matrix[1, 1] for m in maps])
        if form == "m" or form == "c":
            return dx * dy
        if form == "a":
            return np.stack([dy / dx, dx / dy], axis=1).ravel()
        if form == "b":
            return np.stack([-dy, -dx], axis=1).ravel()
        raise UsageError(f"unknown form {form!r}")

    def reduced_operators(self, mu):
        tm = self.theta("m", mu)
        ta = self.theta("a", mu)
        tb = self.theta("b", mu)
        tc = self.theta("c", mu)
        m = np.tensordot(tm, self.m_red, axes=(0, 0))
        a = np.tensordot(ta, self.a_red, axes=(0, 0))
        b = np.tensordot(tb, self.b_red, axes=(0, 0))
        c = np.tensordot(tc, self.c_red, axes=(0, 0))
        return m, a, b, c

    def block_matrix(self, mu, eps: float) -> np.ndarray:
        """Dense time-step block matrix [[M/dt + A, B^T], [B, -eps C]]."""
        m, a, b, c = self.reduced_operators(mu)
        nx, ny = self.n_x, self.n_y
        s = np.zeros((nx + ny, nx + ny))
        s[:nx, :nx] = m / self.grid.dt + a
        s[:nx, nx:] = b.T
        s[nx:, :nx] = b
        s[nx:, nx:] = -eps * c
        return s

    def slice_to(self, n_x: int, n_y: int) -> "RBDatabase":
        """Sub-database on the leading (n_x, n_y) basis vectors (nestedness)."""
        if n_x > self.n_x or n_y > self.n_y:
            raise UsageError(f"cannot slice to ({n_x},{n_y}) from ({self.n_x},{self.n_y})")

        dims = {"m": n_x, "a": n_x, "b": n_y, "bv": n_x, "cp": n_y}

        def cut(block, gi, gj):
            out = block
            if gi in dims:
                out = out[:, : dims[gi]]
            if gj in dims:
                out = out[:, :, :, : dims[gj]]
            return out

        gx = {k: cut(v, *k) for k, v in self.gram_x.items()}
        gy = {k: cut(v, *k) for k, v in self.gram_y.items()}
        return RBDatabase(
            domain=self.domain,
            grid=self.grid,
            eps=self.eps,
            q_counts=self.q_counts,
            m_red=self.m_red[:, :n_x, :n_x],
            a_red=self.a_red[:, :n_x, :n_x],
            b_red=self.b_red[:, :n_y, :n_x],
            c_red=self.c_red[:, :n_y, :n_y],
            f_mass_red=self.f_mass_red[:n_x],
            f_stiff_red=self.f_stiff_red[:n_x],
            g_red=self.g_red[:n_y],
            gram_x=gx,
            gram_y=gy,
            bounds=self.bounds,
            velocity_basis=None if self.velocity_basis is None else self.velocity_basis[:, :n_x],
            pressure_basis=None if self.pressure_basis is None else self.pressure_basis[:, :n_y],
            dim_history=[h for h in self.dim_history if h[1] <= n_x and h[2] <= n_y],
            version=self.version,
            geometry_digest=self.geometry_digest,
            constants_mode=self.constants_mode,
        )


class OfflineCompressor:
    """Incrementally projects operators and residual Gram data onto the bases."""

    def __init__(
        self,
        spaces: TruthDiscretization,
        ops: AffineOperatorSet,
        grid: TimeGrid,
        bounds=None,
        eps: float = 0.0,
        keep_basis: bool = True,
    ):
        self.spaces = spaces
        self.ops = ops
        self.grid = grid
        self.bounds = bounds
        self.eps = float(eps)
        self.keep_basis = keep_basis
        self.q = ops.q_counts()
        self._x_lu = spla.splu(spaces.X_inner.tocsc())
        self._y_lu = spla.splu(spaces.Y_inner.tocsc())

        nx = ny = 0
        self.velocity = np.zeros((spaces.n_velocity, 0))
        self.pressure = np.zeros((spaces.n_pressure, 0))
        qm, qa, qb, qc = self.q["m"], self.q["a"], self.q["b"], self.q["c"]
        self.m_red = np.zeros((qm, nx, nx))
        self.a_red = np.zeros((qa, nx, nx))
        self.b_red = np.zeros((qb, ny, nx))
        self.c_red = np.zeros((qc, ny, ny))
        self.f_mass_red = np.zeros(0)
        self.f_stiff_red = np.zeros(0)
        self.g_red = np.zeros(0)

        q_of = {"f": 2, "m": qm, "a": qa, "b": qb, "g": 1, "bv": qb, "cp": qc}
        self.gram_x = _GramSide(
            spaces.n_velocity, X_GROUPS, q_of, lambda r: self._x_lu.solve(r)
        )
        self.gram_y = _GramSide(
            spaces.n_pressure, Y_GROUPS, q_of, lambda r: self._y_lu.solve(r)
        )
        self.gram_x.set_fixed("f", np.stack([ops.f_mass, ops.f_stiff], axis=1)[:, :, None])
        self.gram_y.set_fixed("g", ops.g_base[:, None, None])
        self.dim_history: list = []
        self.version = 0

    # -- basis growth ------------------------------------------------------

    def append_velocity(self, vectors: np.ndarray):
        """Extend all velocity-dependent reductions by the new (orthonormal) columns."""
        v = np.atleast_2d(vectors)
        if v.shape[0] != self.spaces.n_velocity:
            v = v.T
        k = v.shape[1]
        if k == 0:
            return
        mv = np.stack([mat @ v for mat in self.ops.m_terms], axis=1)  # (n, Qm, k)
        av = np.stack([mat @ v for mat in self.ops.a_terms], axis=1)
        bv = np.stack([mat @ v for mat in self.ops.b_terms], axis=1)  # (np, Qb, k)

        phi = self.velocity
        self.m_red = _grow_square(self.m_red, np.einsum("ni,nqj->qij", phi, mv),
                                  np.einsum("ni,nqj->qij", v, mv))
        self.a_red = _grow_square(self.a_red, np.einsum("ni,nqj->qij", phi, av),
                                  np.einsum("ni,nqj->qij", v, av))
        self.b_red = np.concatenate(
            [self.b_red, np.einsum("ni,nqj->qij", self.pressure, bv)], axis=2
        )
        self.f_mass_red = np.concatenate([self.f_mass_red, v.T @ self.ops.f_mass])
        self.f_stiff_red = np.concatenate([self.f_stiff_red, v.T @ self.ops.f_stiff])

        self.gram_x.append("m", mv)
        self.gram_x.append("a", av)
        self.gram_y.append("bv", bv)
        self.velocity = np.concatenate([self.velocity, v], axis=1)
        self.version += 1

    def append_pressure(self, vectors: np.ndarray):
        p = np.atleast_2d(vectors)
        if p.shape[0] != self.spaces.n_pressure:
            p = p.T
        k = p.shape[1]
        if k == 0:
            return
        btp = np.stack([mat.T @ p for mat in self.ops.b_terms], axis=1)  # (n, Qb, k)
        cp = np.stack([mat @ p for mat in self.ops.c_terms], axis=1)  # (np, Qc, k)

        self.b_red = np.concatenate(
            [self.b_red, np.einsum("nqi,nj->qij", btp, self.velocity)], axis=1
        )
        self.c_red = _grow_square(self.c_red, np.einsum("ni,nqj->qij", self.pressure, cp),
                                  np.einsum("ni,nqj->qij", p, cp))
        self.g_red = np.concatenate([self.g_red, p.T @ self.ops.g_base])

        self.gram_x.append("b", btp)
        self.gram_y.append("cp", cp)
        self.pressure = np.concatenate([self.pressure, p], axis=1)
        self.version += 1

    def record_dimensions(self, outer_iteration: int):
        self.dim_history.append(
            (outer_iteration, self.velocity.shape[1], self.pressure.shape[1])
        )

    # -- snapshot ----------------------------------------------------------

    def database(self, copy: bool = False) -> RBDatabase:
        take = (lambda x: x.copy()) if copy else (lambda x: x)
        return RBDatabase(
            domain=self.ops.domain,
            grid=self.grid,
            eps=self.eps,
            q_counts=dict(self.q),
            m_red=take(self.m_red),
            a_red=take(self.a_red),
            b_red=take(self.b_red),
            c_red=take(self.c_red),
            f_mass_red=take(self.f_mass_red),
            f_stiff_red=take(self.f_stiff_red),
            g_red=take(self.g_red),
            gram_x={k: take(v) for k, v in self.gram_x.blocks.items()},
            gram_y={k: take(v) for k, v in self.gram_y.blocks.items()},
            bounds=self.bounds,
            velocity_basis=take(self.velocity) if self.keep_basis else None,
            pressure_basis=take(self.pressure) if self.keep_basis else None,
            dim_history=list(self.dim_history),
            version=self.version,
            constants_mode="trained" if self.bounds is not None else "exact",
        )


def _grow_square(stack: np.ndarray, cross: np.ndarray, corner: np.ndarray) -> np.ndarray:
    """Grow (Q, n, n) symmetric projections by cross (Q, n, k) and corner (Q, k, k)."""
    corner = 0.5 * (corner + np.transpose(corner, (0, 2, 1)))
    top = np.concatenate([stack, cross], axis=2)
    bottom = np.concatenate([np.transpose(cross, (0, 2, 1)), corner], axis=2)
    return np.concatenate([top, bottom], axis=1)


def compress_offline(
    pair: RBSpacePair,
    ops: AffineOperatorSet,
    grid: TimeGrid,
    bounds=None,
    eps: float = 0.0,
    keep_basis: bool = True,
) -> RBDatabase:
    """One-shot compression of an existing space pair (fresh compressor)."""
    comp = OfflineCompressor(pair.spaces, ops, grid, bounds=bounds, eps=eps, keep_basis=keep_basis)
    comp.append_velocity(pair.velocity)
    comp.append_pressure(pair.pressure)
    comp.record_dimensions(0)
    return comp.database()


@dataclass
class ReducedTrajectory:
    """Online solution in basis coordinates."""

    eps: float
    mu: np.ndarray
    velocity: np.ndarray  # (K+1, N_X)
    pressure: np.ndarray  # (K+1, N_Y), row 0 unused

    @property
    def n_steps(self) -> int:
        return self.velocity.shape[0] - 1


def solve_rb_online(db: RBDatabase, mu, eps: float | None = None) -> ReducedTrajectory:
    """Reduced backward-Euler sweep; cost independent of the truth dimension."""
    if eps is None:
        eps = db.eps
    if eps < 0:
        raise UsageError(f"penalty parameter must be >= 0, got {eps}")
    mu = db.domain.require(mu)
    grid = db.grid
    nx, ny = db.n_x, db.n_y
    m_hat = np.tensordot(db.theta("m", mu), db.m_red, axes=(0, 0))
    block = db.block_matrix(mu, eps)
    try:
        lu, piv = sla.lu_factor(block)
    except sla.LinAlgError as exc:
        raise RBStabilityError(
            f"reduced block system is singular at mu={mu}, eps={eps}; the space pair is "
            f"unstable (reduced inf-sup beta_N ~ 0 for this parameter)"
        ) from exc

    t = grid.times()
    h, hp = ramp(t), ramp_rate(t)
    velocity = np.zeros((grid.K + 1, nx))
    pressure = np.zeros((grid.K + 1, ny))
    rhs = np.empty(nx + ny)
    for k in range(1, grid.K + 1):
        rhs[:nx] = -hp[k] * db.f_mass_red - h[k] * db.f_stiff_red
        rhs[:nx] += (m_hat @ velocity[k - 1]) / grid.dt
        rhs[nx:] = h[k] * db.g_red
        sol = sla.lu_solve((lu, piv), rhs)
        if not np.all(np.isfinite(sol)):
            raise RBStabilityError(
                f"non-finite reduced solution at step {k}, mu={mu}, eps={eps}; "
                "the space pair is unstable (reduced inf-sup beta_N ~ 0)"
            )
        velocity[k] = sol[:nx]
        pressure[k] = sol[nx:]
    return ReducedTrajectory(eps=float(eps), mu=mu, velocity=velocity, pressure=pressure)


def reconstruct_trajectory(db: RBDatabase, rtraj: ReducedTrajectory):
    """Lift a reduced trajectory back to truth coordinates (basis required)."""
    from .truth import Trajectory

    if db.velocity_basis is None or db.pressure_basis is None:
        raise UsageError("database was built without basis matrices; cannot reconstruct")
    return Trajectory(
        eps=rtraj.eps,
        mu=rtraj.mu,
        velocity=rtraj.velocity @ db.velocity_basis.T,
        pressure=rtraj.pressure @ db.pressure_basis.T,
    )


def rb_infsup(pair: RBSpacePair, ops: AffineOperatorSet, mu) -> float:
    """Reduced inf-sup constant of the pair at mu (dense, size N_Y problem)."""
    if pair.n_y == 0:
        return float("inf")  # vacuous infimum over an empty pressure space
    b = ops.assemble("b", mu)
    b_hat = pair.pressure.T @ (b @ pair.velocity)  # (N_Y, N_X)
    gx = pair.velocity.T @ (pair.spaces.X_inner @ pair.velocity)
    gy = pair.pressure.T @ (pair.spaces.Y_inner @ pair.pressure)
    if pair.n_x == 0:
        return 0.0
    schur = b_hat @ np.linalg.solve(gx, b_hat.T)
    vals = sla.eigh(0.5 * (schur + schur.T), gy, eigvals_only=True)
    return float(np.sqrt(max(vals[0], 0.0)))


def rb_infsup_from_db(db: RBDatabase, mu) -> float:
    """Fast reduced inf-sup using the orthonormality of the stored bases."""
    if db.n_y == 0:
        return float("inf")
    if db.n_x == 0:
        return 0.0
    b_hat = np.tensordot(db.theta("b", mu), db.b_red, axes=(0, 0))
    vals = np.linalg.eigvalsh(b_hat @ b_hat.T)
    return float(np.sqrt(max(vals[0], 0.0)))


def supremizer(mu, pressure_vector: np.ndarray, ops: AffineOperatorSet, spaces: TruthDiscretization):
    """X-Riesz representer of v -> b(v, q; mu): solve X t = B(mu)^T q."""
    from .assembly import x_solver

    rhs = ops.assemble("b", mu).T @ np.asarray(pressure_vector, dtype=float)
    return x_solver(spaces).solve(rhs)
