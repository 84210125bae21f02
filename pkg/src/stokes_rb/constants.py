"""Truth stability constants and online-cheap lower/upper bounds.

Exact constants are generalized eigenvalues of the assembled operators
against the X / Y inner products; the inf-sup constant comes from the
pressure Schur complement.  Online bounds exploit the affine expansions:
for the parametrically coercive forms (m, a, c have positive coefficients
and positive-semidefinite terms) the classic min/max coefficient-ratio
bounds anchored at training-point eigenvalues are rigorous.  That argument
fails for the indefinite constraint form, so the inf-sup bounds fall back
to a piecewise-constant cell bound over the training grid with a 0.9
safety factor, flagged as heuristic in every report.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .assembly import AffineOperatorSet, TruthDiscretization
from .geometry import ParameterDomain

# relative slack absorbing eigensolver/floating-point noise in the bounds
_FLOAT_SLACK = 1e-10

_DENSE_CUTOFF = 1200  # below this dimension eigenproblems go dense


class NumericalError(RuntimeError):
    pass


class UsageError(ValueError):
    pass


class ConstantKind(enum.Enum):
    ALPHA_A = "alpha_a"
    GAMMA_A = "gamma_a"
    GAMMA_M = "gamma_m"
    GAMMA_B = "gamma_b"
    GAMMA_C = "gamma_c"
    ALPHA_C = "alpha_c"
    BETA = "beta"


# kinds consumed by the error-bound formulas (gamma_b / gamma_c are computed
# on request but carry no runtime role)
BOUND_KINDS = (
    ConstantKind.ALPHA_A,
    ConstantKind.GAMMA_A,
    ConstantKind.GAMMA_M,
    ConstantKind.BETA,
    ConstantKind.ALPHA_C,
)

_MIN_THETA_KINDS = {
    ConstantKind.ALPHA_A: ("a", "min"),
    ConstantKind.GAMMA_A: ("a", "max"),
    ConstantKind.GAMMA_M: ("m", "max"),
    ConstantKind.ALPHA_C: ("c", "min"),
    ConstantKind.GAMMA_C: ("c", "max"),
}


@dataclass(frozen=True)
class BoundConstants:
    """Per-parameter bound pack consumed by the error-bound formulas."""

    alpha_a_lb: float
    alpha_a_ub: float
    gamma_a_lb: float
    gamma_a_ub: float
    gamma_m_lb: float
    gamma_m_ub: float
    beta_lb: float
    beta_ub: float
    alpha_c_lb: float
    alpha_c_ub: float
    mode: str = "trained"  # "exact" | "trained"
    heuristic_kinds: tuple = ()

    def pair(self, kind: ConstantKind):
        name = kind.value
        return getattr(self, f"{name}_lb"), getattr(self, f"{name}_ub")


def _sym(mat: sp.spmatrix) -> sp.csr_matrix:
    return ((mat + mat.T) * 0.5).tocsr()


def _extreme_eig(op: sp.spmatrix, metric: sp.spmatrix, which: str,
                 sigma_ub: float | None = None) -> float:
    """Largest or smallest generalized eigenvalue of (op, metric), both SPD.

    Smallest: shift-invert at zero (factorizes op).  Largest: shift-invert
    at a strict upper shift sigma_ub when supplied -- the pencil top can be
    a dense cluster (the diffusion-versus-H1 spectrum accumulates at its
    largest coefficient), where plain Lanczos stagnates but a nearby shift
    separates cleanly.  Without a shift the largest eigenvalue falls back
    to the reciprocal of the smallest eigenvalue of the swapped pencil.
    """
    n = op.shape[0]
    if n <= _DENSE_CUTOFF:
        vals = sla.eigh(op.toarray(), metric.toarray(), eigvals_only=True)
        return float(vals[0] if which == "min" else vals[-1])
    try:
        if which == "min":
            vals = spla.eigsh(
                op.tocsc(), k=1, M=metric.tocsc(), sigma=0, which="LM",
                return_eigenvectors=False, maxiter=10000,
            )
            return float(vals[0])
        if sigma_ub is not None:
            vals = spla.eigsh(
                op.tocsc(), k=1, M=metric.tocsc(), sigma=sigma_ub, which="LM",
                return_eigenvectors=False, maxiter=10000,
            )
            return float(vals[0])
        vals = spla.eigsh(
            metric.tocsc(), k=1, M=op.tocsc(), sigma=0, which="LM",
            return_eigenvectors=False, maxiter=10000,
        )
    except (spla.ArpackNoConvergence, RuntimeError) as exc:
        raise NumericalError(f"eigenvalue solve failed ({which}): {exc}") from exc
    lam = float(vals[0])
    if lam <= 0:
        raise NumericalError(f"swapped-pencil eigenvalue not positive: {lam}")
    return 1.0 / lam


def _schur_eig(ops: AffineOperatorSet, spaces: TruthDiscretization, mu, which: str) -> float:
    """Extreme eigenvalue of B X^-1 B^T against Y; sqrt gives beta or gamma_b."""
    b = ops.assemble("b", mu).tocsr()
    x = spaces.X_inner.tocsc()
    lu = spla.splu(x)
    w = lu.solve(np.asarray(b.T.todense()))
    schur = b @ w
    schur = 0.5 * (schur + schur.T)
    y = spaces.Y_inner.toarray()
    vals = sla.eigh(schur, y, eigvals_only=True)
    lam = vals[0] if which == "min" else vals[-1]
    return float(np.sqrt(max(lam, 0.0)))


def exact_constant(
    kind: ConstantKind,
    mu,
    ops: AffineOperatorSet,
    spaces: TruthDiscretization,
) -> float:
    """Exact truth constant at mu via a generalized eigenproblem."""
    mu = ops.domain.require(mu)
    # strict spectral upper shifts from the affine coefficients: each form is
    # a positive combination of pieces dominated by the inner-product matrix
    def shift(form):
        return float(np.max(ops.theta(form, mu))) * (1.0 + 1e-6)

    if kind is ConstantKind.ALPHA_A:
        return _extreme_eig(_sym(ops.assemble("a", mu)), spaces.X_inner, "min")
    if kind is ConstantKind.GAMMA_A:
        return _extreme_eig(_sym(ops.assemble("a", mu)), spaces.X_inner, "max", shift("a"))
    if kind is ConstantKind.GAMMA_M:
        return _extreme_eig(ops.assemble("m", mu), spaces.X_inner, "max", shift("m"))
    if kind is ConstantKind.ALPHA_C:
        return _extreme_eig(_sym(ops.assemble("c", mu)), spaces.Y_inner, "min")
    if kind is ConstantKind.GAMMA_C:
        return _extreme_eig(_sym(ops.assemble("c", mu)), spaces.Y_inner, "max", shift("c"))
    if kind is ConstantKind.BETA:
        return _schur_eig(ops, spaces, mu, "min")
    if kind is ConstantKind.GAMMA_B:
        return _schur_eig(ops, spaces, mu, "max")
    raise UsageError(f"unknown constant kind {kind}")


def exact_bound_constants(mu, ops, spaces) -> BoundConstants:
    """Degenerate bounds lb = ub = exact (oracle mode, offline cost)."""
    vals = {k: exact_constant(k, mu, ops, spaces) for k in BOUND_KINDS}
    lo = 1.0 - _FLOAT_SLACK
    hi = 1.0 + _FLOAT_SLACK
    return BoundConstants(
        alpha_a_lb=vals[ConstantKind.ALPHA_A] * lo,
        alpha_a_ub=vals[ConstantKind.ALPHA_A] * hi,
        gamma_a_lb=vals[ConstantKind.GAMMA_A] * lo,
        gamma_a_ub=vals[ConstantKind.GAMMA_A] * hi,
        gamma_m_lb=vals[ConstantKind.GAMMA_M] * lo,
        gamma_m_ub=vals[ConstantKind.GAMMA_M] * hi,
        beta_lb=vals[ConstantKind.BETA] * lo,
        beta_ub=vals[ConstantKind.BETA] * hi,
        alpha_c_lb=vals[ConstantKind.ALPHA_C] * lo,
        alpha_c_ub=vals[ConstantKind.ALPHA_C] * hi,
        mode="exact",
    )


@dataclass
class _MinThetaTable:
    thetas: np.ndarray  # (n_train, Q) coefficient snapshots, all positive
    values: np.ndarray  # (n_train,) exact constants

    def lower(self, theta_mu: np.ndarray) -> float:
        ratios = theta_mu[None, :] / self.thetas
        return float(np.max(ratios.min(axis=1) * self.values))

    def upper(self, theta_mu: np.ndarray) -> float:
        ratios = theta_mu[None, :] / self.thetas
        return float(np.min(ratios.max(axis=1) * self.values))


@dataclass
class _CellTable:
    """Grid-based inf-sup bounds (heuristic, no min-theta structure).

    Lower bound: 0.9 times the smallest corner value of the training cell
    containing mu (piecewise constant, Lipschitz-style safety factor).
    Upper bound: multilinear interpolation of the corner values inflated by
    a small margin; the constant is monotone and nearly multilinear on the
    training cells, which keeps this tight without an SCM machinery.
    """

    axes: list  # per-dimension sorted break points
    values: np.ndarray  # exact values on the tensor grid
    safety: float = 0.9
    ub_margin: float = 0.02
    points: np.ndarray = None  # (n_train, dim) flattened grid
    flat_values: np.ndarray = None

    def bounds(self, mu: np.ndarray):
        # exact interpolation when mu coincides with a training node
        hit = np.all(np.abs(self.points - mu[None, :]) < 1e-12, axis=1)
        if np.any(hit):
            v = float(self.flat_values[np.argmax(hit)])
            return v, v
        corners = self.values
        weights = []
        for d, ax in enumerate(self.axes):
            i = int(np.clip(np.searchsorted(ax, mu[d], side="right") - 1, 0, len(ax) - 2))
            corners = corners.take([i, i + 1], axis=d)
            weights.append((mu[d] - ax[i]) / (ax[i + 1] - ax[i]))
        interp = corners.astype(float)
        for w in weights:
            interp = (1.0 - w) * interp[0] + w * interp[1]
        lo = self.safety * float(corners.min())
        hi = (1.0 + self.ub_margin) * float(interp)
        return lo, hi


@dataclass
class TrainedConstantBounds:
    """Online-cheap bounds for every constant used by the error bounds.

    Certification data record the worst relative gap (ub - lb)/ub observed
    on the validation sample; kinds whose gap target was unreachable keep a
    heuristic flag instead of a certificate.
    """

    domain: ParameterDomain
    tables: dict  # ConstantKind -> _MinThetaTable | _CellTable
    theta_forms: dict  # ConstantKind -> form letter for min-theta kinds
    tolerance: float
    certified_gaps: dict = field(default_factory=dict)
    heuristic_kinds: tuple = ()
    training_points: np.ndarray = None

    def _bounds_for(self, kind: ConstantKind, mu: np.ndarray, ops: AffineOperatorSet):
        table = self.tables[kind]
        if isinstance(table, _CellTable):
            lo, hi = table.bounds(mu)
        else:
            theta = ops.theta(self.theta_forms[kind], mu)
            lo, hi = table.lower(theta), table.upper(theta)
        return lo * (1.0 - _FLOAT_SLACK), hi * (1.0 + _FLOAT_SLACK)

    def at(self, mu, ops: AffineOperatorSet) -> BoundConstants:
        """All lower/upper bounds at mu; cost independent of truth dimension."""
        mu = self.domain.require(mu)
        out = {}
        for kind in BOUND_KINDS:
            lo, hi = self._bounds_for(kind, mu, ops)
            out[f"{kind.value}_lb"] = lo
            out[f"{kind.value}_ub"] = hi
        return BoundConstants(mode="trained", heuristic_kinds=self.heuristic_kinds, **out)

    def beta_ub_many(self, mus, ops) -> np.ndarray:
        return np.array([self.at(mu, ops).beta_ub for mu in mus])


def train_constant_bounds(
    ops: AffineOperatorSet,
    spaces: TruthDiscretization,
    training_set=None,
    tolerance: float = 0.1,
    points_per_axis: int = 4,
    max_enrichment: int = 20,
    validation_size: int = 200,
    seed: int = 1234,
) -> TrainedConstantBounds:
    """Train the parametric bound tables on a tensor grid of exact solves.

    The min-theta kinds are enriched greedily (largest validation gap first)
    until the relative gap tolerance is met or the budget is exhausted, in
    which case the affected kind is reported with its achieved gap.  The
    inf-sup bounds always stay on the initial grid and are flagged heuristic.
    """
    domain = ops.domain
    if training_set is None:
        training_set = domain.grid(points_per_axis)
    training_set = np.atleast_2d(np.asarray(training_set, dtype=float))

    # tensor-grid axes recovered from the training set (used by the cell table)
    axes = [np.unique(training_set[:, d]) for d in range(domain.dim)]
    grid_complete = len(training_set) == int(np.prod([len(a) for a in axes]))

    rng = np.random.default_rng(seed)
    validation = domain.sample(validation_size, rng)
    if grid_complete and all(len(a) > 1 for a in axes):
        mids = [0.5 * (a[1:] + a[:-1]) for a in axes]
        mesh = np.meshgrid(*mids, indexing="ij")
        validation = np.vstack([validation, np.stack([m.ravel() for m in mesh], axis=1)])

    theta_forms = {k: _MIN_THETA_KINDS[k][0] for k in _MIN_THETA_KINDS if k in BOUND_KINDS}
    tables: dict = {}
    certified: dict = {}

    # --- min-theta kinds, with greedy enrichment -------------------------
    for kind in (k for k in BOUND_KINDS if k in theta_forms):
        form = theta_forms[kind]
        pts = [np.asarray(p) for p in training_set]
        thetas = [ops.theta(form, p) for p in pts]
        values = [exact_constant(kind, p, ops, spaces) for p in pts]
        table = _MinThetaTable(np.array(thetas), np.array(values))
        for _ in range(max_enrichment):
            gaps = []
            for v in validation:
                th = ops.theta(form, v)
                lo, hi = table.lower(th), table.upper(th)
                gaps.append((hi - lo) / hi)
            worst = int(np.argmax(gaps))
            if gaps[worst] <= tolerance:
                break
            extra = validation[worst]
            thetas.append(ops.theta(form, extra))
            values.append(exact_constant(kind, extra, ops, spaces))
            table = _MinThetaTable(np.array(thetas), np.array(values))
        final_gap = max(
            (table.upper(ops.theta(form, v)) - table.lower(ops.theta(form, v)))
            / table.upper(ops.theta(form, v))
            for v in validation
        )
        certified[kind] = final_gap
        tables[kind] = table

    # --- inf-sup: cell bounds on the initial grid (heuristic) -------------
    if not grid_complete:
        raise UsageError("inf-sup cell bounds require a full tensor training grid")
    beta_list = np.array(
        [exact_constant(ConstantKind.BETA, p, ops, spaces) for p in training_set]
    )
    beta_grid = np.empty([len(a) for a in axes])
    for point, value in zip(training_set, beta_list):
        idx = tuple(int(np.searchsorted(axes[d], point[d])) for d in range(domain.dim))
        beta_grid[idx] = value
    tables[ConstantKind.BETA] = _CellTable(
        axes=axes,
        values=beta_grid,
        points=training_set,
        flat_values=beta_list,
    )
    certified[ConstantKind.BETA] = float("nan")  # heuristic, no gap certificate

    return TrainedConstantBounds(
        domain=domain,
        tables=tables,
        theta_forms=theta_forms,
        tolerance=tolerance,
        certified_gaps={k.value: v for k, v in certified.items()},
        heuristic_kinds=(ConstantKind.BETA.value,),
        training_points=training_set,
    )


def _savez_deterministic(path, payload: dict) -> None:
    """npz writer with fixed zip metadata so identical data give identical bytes."""
    import io
    import zipfile

    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(payload):
            buffer = io.BytesIO()
            np.lib.format.write_array(buffer, np.asarray(payload[name]))
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, buffer.getvalue())


def save_constant_bounds(bounds: TrainedConstantBounds, path) -> None:
    """Binary table dump: per kind the training thetas/values or grid data."""
    payload = {
        "tolerance": np.array([bounds.tolerance]),
        "lower": bounds.domain.lower.astype("<f8"),
        "upper": bounds.domain.upper.astype("<f8"),
        "training_points": bounds.training_points.astype("<f8"),
        "heuristic_kinds": np.array(bounds.heuristic_kinds, dtype="U16"),
    }
    for kind, table in bounds.tables.items():
        key = kind.value
        if isinstance(table, _MinThetaTable):
            payload[f"{key}_thetas"] = table.thetas.astype("<f8")
            payload[f"{key}_values"] = table.values.astype("<f8")
            payload[f"{key}_form"] = np.array([bounds.theta_forms[kind]], dtype="U1")
        else:
            for d, ax in enumerate(table.axes):
                payload[f"{key}_axis{d}"] = ax.astype("<f8")
            payload[f"{key}_grid"] = table.values.astype("<f8")
        payload[f"{key}_gap"] = np.array([bounds.certified_gaps.get(key, np.nan)])
    _savez_deterministic(path, payload)


def load_constant_bounds(path) -> TrainedConstantBounds:
    data = np.load(path, allow_pickle=False)
    domain = ParameterDomain(len(data["lower"]), data["lower"], data["upper"])
    tables: dict = {}
    theta_forms: dict = {}
    gaps: dict = {}
    for kind in BOUND_KINDS:
        key = kind.value
        gaps[key] = float(data[f"{key}_gap"][0])
        if f"{key}_thetas" in data:
            tables[kind] = _MinThetaTable(data[f"{key}_thetas"], data[f"{key}_values"])
            theta_forms[kind] = str(data[f"{key}_form"][0])
        else:
            axes = []
            d = 0
            while f"{key}_axis{d}" in data:
                axes.append(data[f"{key}_axis{d}"])
                d += 1
            grid = data[f"{key}_grid"]
            mesh = np.meshgrid(*axes, indexing="ij")
            points = np.stack([m.ravel() for m in mesh], axis=1)
            tables[kind] = _CellTable(
                axes=axes, values=grid, points=points, flat_values=grid.ravel()
            )
    return TrainedConstantBounds(
        domain=domain,
        tables=tables,
        theta_forms=theta_forms,
        tolerance=float(data["tolerance"][0]),
        certified_gaps=gaps,
        heuristic_kinds=tuple(str(s) for s in data["heuristic_kinds"]),
        training_points=data["training_points"],
    )
