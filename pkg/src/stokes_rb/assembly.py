"""Taylor-Hood truth spaces and affine operator assembly.

Velocity uses vector P2 elements (scalar dofs blocked as [all x | all y]),
pressure uses P1.  Velocity dofs on the inflow and on the walls are
eliminated; the inhomogeneous inflow profile enters only through the lifting
vector and the induced right-hand-side functionals.

Every bilinear form of the problem is assembled in affine parameter
expansion: parameter-independent sparse matrices per subdomain paired with
coefficient functions of the diagonal subdomain maps diag(dx, dy),

    m:  dx*dy * integral(u . v)           one term per subdomain
    a:  dy/dx * int(du/dx1 dv/dx1) + dx/dy * int(du/dx2 dv/dx2)
    b: -dy * int(q dv1/dx1) - dx * int(q dv2/dx2)
    c:  dx*dy * integral(p q)

which is the exact change of variables of the physical forms under the
piecewise-diagonal geometry map.  Quadrature is the symmetric 6-point
triangle rule (exact through degree 4), so P2 x P2 products are integrated
exactly and affine reassembly matches direct assembly on the mapped mesh to
roundoff.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .geometry import (
    LIFTING_CUTOFF,
    N_SUBDOMAINS,
    ParameterDomain,
    ReferenceMesh,
    SubdomainMap,
    TAG_OUTFLOW,
    default_parameter_domain,
    evaluate_affine_maps,
)

FORMS = ("m", "a", "b", "c")

# Symmetric 6-point rule, exact for polynomials of degree 4; barycentric
# points with weights summing to one (scale by triangle area).
_QW = np.array(
    [0.223381589678011] * 3 + [0.109951743655322] * 3
)
_QBARY = np.array(
    [
        [0.108103018168070, 0.445948490915965, 0.445948490915965],
        [0.445948490915965, 0.108103018168070, 0.445948490915965],
        [0.445948490915965, 0.445948490915965, 0.108103018168070],
        [0.816847572980459, 0.091576213509771, 0.091576213509771],
        [0.091576213509771, 0.816847572980459, 0.091576213509771],
        [0.091576213509771, 0.091576213509771, 0.816847572980459],
    ]
)


def _p2_values(bary):
    l1, l2, l3 = bary[:, 0], bary[:, 1], bary[:, 2]
    return np.stack(
        [
            l1 * (2 * l1 - 1),
            l2 * (2 * l2 - 1),
            l3 * (2 * l3 - 1),
            4 * l1 * l2,
            4 * l2 * l3,
            4 * l3 * l1,
        ],
        axis=1,
    )  # (nq, 6)


def _p2_ref_gradients(bary):
    # reference coordinates (xi, eta) with l1 = 1-xi-eta, l2 = xi, l3 = eta
    l1, l2, l3 = bary[:, 0], bary[:, 1], bary[:, 2]
    dl = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])  # dl_i/d(xi,eta)
    nq = bary.shape[0]
    grads = np.zeros((nq, 6, 2))
    grads[:, 0] = (4 * l1 - 1)[:, None] * dl[0]
    grads[:, 1] = (4 * l2 - 1)[:, None] * dl[1]
    grads[:, 2] = (4 * l3 - 1)[:, None] * dl[2]
    grads[:, 3] = 4 * (l2[:, None] * dl[0] + l1[:, None] * dl[1])
    grads[:, 4] = 4 * (l3[:, None] * dl[1] + l2[:, None] * dl[2])
    grads[:, 5] = 4 * (l1[:, None] * dl[2] + l3[:, None] * dl[0])
    return grads  # (nq, 6, 2)


_P2V = _p2_values(_QBARY)
_P2G = _p2_ref_gradients(_QBARY)
_P1V = _QBARY.copy()  # P1 shape values are the barycentric coordinates

_M2_UNIT = np.einsum("q,qi,qj->ij", _QW, _P2V, _P2V)
_M1_UNIT = np.einsum("q,qi,qj->ij", _QW, _P1V, _P1V)
# bitwise symmetry of the unit mass blocks (multiplication-order roundoff)
_M2_UNIT = 0.5 * (_M2_UNIT + _M2_UNIT.T)
_M1_UNIT = 0.5 * (_M1_UNIT + _M1_UNIT.T)


class AssemblyError(RuntimeError):
    pass


@dataclass
class TruthDiscretization:
    """Taylor-Hood spaces with inner products, constraints, and lifting."""

    mesh: ReferenceMesh
    n_velocity: int  # free velocity dofs
    n_pressure: int
    n_p2: int  # scalar P2 nodes (vertices + edge midpoints)
    p2_coords: np.ndarray  # (n_p2, 2)
    p2_triangles: np.ndarray  # (nt, 6) global P2 node ids per triangle
    X_inner: sp.csr_matrix  # H1 vector inner product, free x free
    Y_inner: sp.csr_matrix  # L2 pressure inner product
    dirichlet_dofs: np.ndarray  # constrained velocity dofs (full numbering)
    free_dofs: np.ndarray
    lifting: np.ndarray  # full-space velocity coefficients of u_L
    _x_factor: object = field(default=None, repr=False)
    _y_factor: object = field(default=None, repr=False)

    @property
    def n_velocity_full(self) -> int:
        return 2 * self.n_p2

    def restrict_velocity(self, full: np.ndarray) -> np.ndarray:
        return np.asarray(full)[..., self.free_dofs]

    def prolong_velocity(self, free: np.ndarray) -> np.ndarray:
        free = np.asarray(free)
        full = np.zeros(free.shape[:-1] + (self.n_velocity_full,))
        full[..., self.free_dofs] = free
        return full


def _p2_numbering(mesh: ReferenceMesh):
    edges = mesh.edges()
    edge_index = {(int(a), int(b)): i for i, (a, b) in enumerate(edges)}
    nv = mesh.n_vertices
    t = mesh.triangles
    p2t = np.empty((t.shape[0], 6), dtype=np.int64)
    p2t[:, :3] = t
    for local, (i, j) in enumerate([(0, 1), (1, 2), (2, 0)]):
        keys = np.sort(t[:, [i, j]], axis=1)
        p2t[:, 3 + local] = [nv + edge_index[(int(a), int(b))] for a, b in keys]
    coords = np.vstack([mesh.vertices, 0.5 * (mesh.vertices[edges[:, 0]] + mesh.vertices[edges[:, 1]])])
    return p2t, coords, edges, edge_index


def _element_geometry(vertices: np.ndarray, triangles: np.ndarray):
    v0 = vertices[triangles[:, 0]]
    j = np.stack(
        [vertices[triangles[:, 1]] - v0, vertices[triangles[:, 2]] - v0], axis=2
    )  # (nt, 2, 2), columns are edge vectors
    det = j[:, 0, 0] * j[:, 1, 1] - j[:, 0, 1] * j[:, 1, 0]
    if np.any(det <= 0):
        raise AssemblyError("inverted or degenerate triangle in mesh")
    inv = np.empty_like(j)
    inv[:, 0, 0] = j[:, 1, 1] / det
    inv[:, 0, 1] = -j[:, 0, 1] / det
    inv[:, 1, 0] = -j[:, 1, 0] / det
    inv[:, 1, 1] = j[:, 0, 0] / det
    area = 0.5 * det
    return inv, area


def _scatter(rows_nodes, cols_nodes, blocks, shape):
    nt, nr, nc = blocks.shape
    rows = np.repeat(rows_nodes, nc, axis=1).ravel()
    cols = np.tile(cols_nodes, (1, nr)).ravel()
    mat = sp.coo_matrix((blocks.ravel(), (rows, cols)), shape=shape)
    return mat.tocsr()


def _scalar_pieces(vertices, p2t, p1t, mask):
    """Element-family matrices on the selected triangles.

    Returns mass (P2), d11, d22 (P2 grad-grad), div1, div2 (P1 x P2 grad),
    and P1 mass, all as dense per-element blocks plus node index arrays.
    """
    tri = p2t[mask]
    tri1 = p1t[mask]
    inv, area = _element_geometry(vertices, tri1)
    # physical gradients of P2 shapes: (nq, nt, 6, 2)
    gp = np.einsum("qie,ted->qtid", _P2G, inv)
    mass = area[:, None, None] * _M2_UNIT[None, :, :]
    d11 = np.einsum("q,qti,qtj,t->tij", _QW, gp[..., 0], gp[..., 0], area)
    d22 = np.einsum("q,qti,qtj,t->tij", _QW, gp[..., 1], gp[..., 1], area)
    div1 = np.einsum("q,qp,qtj,t->tpj", _QW, _P1V, gp[..., 0], area)
    div2 = np.einsum("q,qp,qtj,t->tpj", _QW, _P1V, gp[..., 1], area)
    pmass = area[:, None, None] * _M1_UNIT[None, :, :]
    # enforce bitwise symmetry of the symmetric element families so the
    # assembled m/a/c operators are structurally symmetric, not just up to
    # multiplication-order roundoff
    d11 = 0.5 * (d11 + d11.transpose(0, 2, 1))
    d22 = 0.5 * (d22 + d22.transpose(0, 2, 1))
    return tri, tri1, mass, d11, d22, div1, div2, pmass


@dataclass
class _Pieces:
    """Per-subdomain scalar building blocks (full, unconstrained numbering)."""

    mass: list  # P2 mass per subdomain
    d11: list
    d22: list
    div1: list  # (np x n_p2)
    div2: list
    pmass: list


def _assemble_pieces(mesh: ReferenceMesh, p2t, n_p2: int) -> _Pieces:
    nv = mesh.n_vertices
    pieces = _Pieces([], [], [], [], [], [])
    for s in range(N_SUBDOMAINS):
        mask = mesh.subdomain_of == s
        tri, tri1, mass, d11, d22, div1, div2, pmass = _scalar_pieces(
            mesh.vertices, p2t, mesh.triangles, mask
        )
        pieces.mass.append(_scatter(tri, tri, mass, (n_p2, n_p2)))
        pieces.d11.append(_scatter(tri, tri, d11, (n_p2, n_p2)))
        pieces.d22.append(_scatter(tri, tri, d22, (n_p2, n_p2)))
        pieces.div1.append(_scatter(tri1, tri, div1, (nv, n_p2)))
        pieces.div2.append(_scatter(tri1, tri, div2, (nv, n_p2)))
        pieces.pmass.append(_scatter(tri1, tri1, pmass, (nv, nv)))
    return pieces


def _vector_block(scalar: sp.spmatrix) -> sp.csr_matrix:
    """Same scalar operator acting on both velocity components."""
    return sp.block_diag([scalar, scalar], format="csr")


def lifting_profile(coords: np.ndarray) -> np.ndarray:
    """Nodal values of the lifting x-component: parabolic inflow profile
    4*y*(1-y) faded out linearly over the strip x <= LIFTING_CUTOFF."""
    x, y = coords[:, 0], coords[:, 1]
    chi = np.clip(1.0 - x / LIFTING_CUTOFF, 0.0, None)
    return 4.0 * y * (1.0 - y) * chi


def build_truth_spaces(mesh: ReferenceMesh) -> TruthDiscretization:
    """Taylor-Hood P2-P1 spaces over the reference mesh.

    X_inner is the full H1 vector inner product on the reference domain,
    Y_inner the pressure L2 inner product; both are parameter independent.
    """
    p2t, coords, edges, edge_index = _p2_numbering(mesh)
    n_p2 = coords.shape[0]
    nv = mesh.n_vertices

    pieces = _assemble_pieces(mesh, p2t, n_p2)

    mass_ref = sum(pieces.mass[1:], pieces.mass[0])
    stiff_ref = sum(pieces.d11) + sum(pieces.d22)
    pmass_ref = sum(pieces.pmass[1:], pieces.pmass[0])

    # constrained scalar nodes: endpoints and midpoints of every inflow/wall edge
    constrained_nodes = set()
    for (a, b), tag in zip(mesh.boundary_edges, mesh.boundary_tags):
        if tag == TAG_OUTFLOW:
            continue
        constrained_nodes.add(int(a))
        constrained_nodes.add(int(b))
        constrained_nodes.add(nv + edge_index[(int(min(a, b)), int(max(a, b)))])
    constrained_nodes = np.array(sorted(constrained_nodes), dtype=np.int64)
    dirichlet = np.concatenate([constrained_nodes, constrained_nodes + n_p2])
    free = np.setdiff1d(np.arange(2 * n_p2), dirichlet)

    x_inner_full = _vector_block(mass_ref + stiff_ref)
    x_inner = x_inner_full[free][:, free].tocsr()
    y_inner = pmass_ref.tocsr()

    lift = np.zeros(2 * n_p2)
    lift[:n_p2] = lifting_profile(coords)

    spaces = TruthDiscretization(
        mesh=mesh,
        n_velocity=free.size,
        n_pressure=nv,
        n_p2=n_p2,
        p2_coords=coords,
        p2_triangles=p2t,
        X_inner=x_inner,
        Y_inner=y_inner,
        dirichlet_dofs=dirichlet,
        free_dofs=free,
        lifting=lift,
    )
    spaces._pieces = pieces  # reused by the affine operator assembly
    spaces._ref_matrices = (mass_ref, stiff_ref)
    return spaces


@dataclass
class TimeGrid:
    """Uniform partition of [0, T] into K backward-Euler steps."""

    T: float
    K: int

    def __post_init__(self):
        if self.T <= 0 or self.K < 1:
            raise ValueError(f"need T > 0 and K >= 1, got T={self.T}, K={self.K}")

    @property
    def dt(self) -> float:
        return self.T / self.K

    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.K + 1)


def ramp(t):
    """Inflow modulation H(t) = t*(sin(2*pi*t) + 1)."""
    t = np.asarray(t, dtype=float)
    return t * (np.sin(2 * np.pi * t) + 1.0)


def ramp_rate(t):
    """Exact derivative H'(t) = sin(2*pi*t) + 1 + 2*pi*t*cos(2*pi*t)."""
    t = np.asarray(t, dtype=float)
    return np.sin(2 * np.pi * t) + 1.0 + 2 * np.pi * t * np.cos(2 * np.pi * t)


@dataclass
class AffineOperatorSet:
    """Parameter-independent operators plus coefficient functions.

    Matrices for m/a/c are restricted to free velocity (resp. pressure)
    dofs; b matrices map free velocity to pressure.  The right-hand-side
    data (f_mass, f_stiff, g_base) are the lifting functionals; their time
    dependence is carried by ramp()/ramp_rate().
    """

    domain: ParameterDomain
    m_terms: list  # S matrices
    a_terms: list  # 2S matrices, per subdomain (x1x1, x2x2)
    b_terms: list  # 2S matrices (np x n_free)
    c_terms: list  # S matrices
    f_mass: np.ndarray  # integral(u_L . v) for free v
    f_stiff: np.ndarray  # integral(grad u_L : grad v)
    g_base: np.ndarray  # integral(q div u_L)

    def maps_at(self, mu) -> list[SubdomainMap]:
        return evaluate_affine_maps(mu, self.domain)

    def _diags(self, mu):
        maps = self.maps_at(mu)
        dx = np.array([m.matrix[0, 0] for m in maps])
        dy = np.array([m.matrix[1, 1] for m in maps])
        return dx, dy

    def theta(self, form: str, mu) -> np.ndarray:
        dx, dy = self._diags(mu)
        if form == "m":
            return dx * dy
        if form == "a":
            return np.stack([dy / dx, dx / dy], axis=1).ravel()
        if form == "b":
            return np.stack([-dy, -dx], axis=1).ravel()
        if form == "c":
            return dx * dy
        raise ValueError(f"unknown form {form!r}")

    def matrices(self, form: str) -> list:
        return {"m": self.m_terms, "a": self.a_terms, "b": self.b_terms, "c": self.c_terms}[form]

    def assemble(self, form: str, mu) -> sp.csr_matrix:
        """Sum of theta_q(mu) * M_q for the requested form."""
        theta = self.theta(form, mu)
        mats = self.matrices(form)
        out = theta[0] * mats[0]
        for coeff, mat in zip(theta[1:], mats[1:]):
            out = out + coeff * mat
        return out.tocsr()

    def q_counts(self) -> dict:
        return {f: len(self.matrices(f)) for f in FORMS}


def assemble_affine_operators(
    mesh: ReferenceMesh,
    spaces: TruthDiscretization,
    domain: ParameterDomain | None = None,
) -> AffineOperatorSet:
    """Affine expansion of m, a, b, c plus the lifting functionals."""
    domain = domain if domain is not None else default_parameter_domain()
    pieces: _Pieces = spaces._pieces
    free = spaces.free_dofs
    n_p2 = spaces.n_p2

    def vec_free(scalar):
        return _vector_block(scalar)[free][:, free].tocsr()

    m_terms = [vec_free(m) for m in pieces.mass]
    a_terms = []
    b_terms = []
    for s in range(N_SUBDOMAINS):
        a_terms.append(vec_free(pieces.d11[s]))
        a_terms.append(vec_free(pieces.d22[s]))
        b1 = sp.hstack([pieces.div1[s], sp.csr_matrix((spaces.n_pressure, n_p2))], format="csr")
        b2 = sp.hstack([sp.csr_matrix((spaces.n_pressure, n_p2)), pieces.div2[s]], format="csr")
        b_terms.append(b1[:, free].tocsr())
        b_terms.append(b2[:, free].tocsr())
    c_terms = [c.tocsr() for c in pieces.pmass]

    mass_ref, stiff_ref = spaces._ref_matrices
    lift = spaces.lifting
    f_mass = (_vector_block(mass_ref) @ lift)[free]
    f_stiff = (_vector_block(stiff_ref) @ lift)[free]
    div_full = sp.hstack([sum(pieces.div1), sum(pieces.div2)], format="csr")
    g_base = div_full @ lift

    return AffineOperatorSet(
        domain=domain,
        m_terms=m_terms,
        a_terms=a_terms,
        b_terms=b_terms,
        c_terms=c_terms,
        f_mass=f_mass,
        f_stiff=f_stiff,
        g_base=g_base,
    )


def time_functionals(ops: AffineOperatorSet, grid: TimeGrid):
    """Right-hand-side vectors f^k, g^k for k = 0..K.

    f^k = -H'(t_k) * f_mass - H(t_k) * f_stiff and g^k = H(t_k) * g_base,
    with both ramp factors evaluated analytically.
    """
    t = grid.times()
    h = ramp(t)
    hp = ramp_rate(t)
    f = -hp[:, None] * ops.f_mass[None, :] - h[:, None] * ops.f_stiff[None, :]
    g = h[:, None] * ops.g_base[None, :]
    return f, g


def assemble_forms_direct(
    mesh: ReferenceMesh,
    spaces: TruthDiscretization,
    mu,
    domain: ParameterDomain | None = None,
) -> dict:
    """Independent oracle: assemble m, a, b, c on the mapped mesh.

    The subdomain maps are applied to the vertex coordinates and the plain
    (unparametrized) forms are assembled over the deformed triangulation.
    Because the global map is piecewise affine and mesh-conforming, the
    result must agree with the affine expansion at mu to roundoff.
    """
    domain = domain if domain is not None else default_parameter_domain()
    from .geometry import map_mesh_vertices

    maps = evaluate_affine_maps(mu, domain)
    mapped = map_mesh_vertices(mesh, maps)
    p2t = spaces.p2_triangles
    n_p2 = spaces.n_p2
    nv = mesh.n_vertices
    free = spaces.free_dofs

    mask = np.ones(mesh.n_triangles, dtype=bool)
    tri, tri1, mass, d11, d22, div1, div2, pmass = _scalar_pieces(mapped, p2t, mesh.triangles, mask)
    mass_g = _scatter(tri, tri, mass, (n_p2, n_p2))
    stiff_g = _scatter(tri, tri, d11 + d22, (n_p2, n_p2))
    div_g = sp.hstack(
        [_scatter(tri1, tri, div1, (nv, n_p2)), _scatter(tri1, tri, div2, (nv, n_p2))],
        format="csr",
    )
    pmass_g = _scatter(tri1, tri1, pmass, (nv, nv))

    return {
        "m": _vector_block(mass_g)[free][:, free].tocsr(),
        "a": _vector_block(stiff_g)[free][:, free].tocsr(),
        "b": (-div_g[:, free]).tocsr(),
        "c": pmass_g.tocsr(),
    }


def x_solver(spaces: TruthDiscretization):
    """Cached sparse factorization of the X inner product."""
    if spaces._x_factor is None:
        import scipy.sparse.linalg as spla

        spaces._x_factor = spla.splu(spaces.X_inner.tocsc())
    return spaces._x_factor


def y_solver(spaces: TruthDiscretization):
    """Cached sparse factorization of the Y inner product."""
    if spaces._y_factor is None:
        import scipy.sparse.linalg as spla

        spaces._y_factor = spla.splu(spaces.Y_inner.tocsc())
    return spaces._y_factor


def dump_affine_operators(ops: AffineOperatorSet, directory) -> list:
    """MatrixMarket coordinate dump, one file per affine term."""
    import os

    from scipy.io import mmwrite

    os.makedirs(directory, exist_ok=True)
    written = []
    for form in FORMS:
        for q, mat in enumerate(ops.matrices(form)):
            name = f"{form}_{q}.mtx"
            mmwrite(os.path.join(directory, name), mat.tocoo(), precision=17)
            written.append(name)
    return written
