"""Parametrized channel-with-obstacle geometry and reference triangulation.

The reference configuration is the channel [0,5] x [0,1] with a rectangular
obstacle [2, 2.5] x [0, 0.5] attached to the bottom wall.  The fluid region is
partitioned into S = 9 axis-aligned rectangular subdomains (a 5-column by
2-row grid with the obstacle cell removed).  A parameter mu = (mu1, mu2)
scales the obstacle width and height; every subdomain carries a diagonal
affine map x -> A x + b chosen so that the piecewise-affine global map is
continuous across all subdomain interfaces and reduces to the identity at
mu_ref = (1, 1).

Column layout (x-breaks): 0 | 1 | 2 | 2.5 | 3.5 | 5.  The two leftmost
columns (x <= 2) are mapped by the identity in x; this strip is the support
of the boundary lifting and its image is parameter independent.
Row layout (y-breaks): 0 | 0.5 | 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

X_BREAKS = (0.0, 1.0, 2.0, 2.5, 3.5, 5.0)
Y_BREAKS = (0.0, 0.5, 1.0)
OBSTACLE_CELL = (2, 0)  # (column, row) removed from the fluid region
CHANNEL_LENGTH = X_BREAKS[-1]
CHANNEL_HEIGHT = Y_BREAKS[-1]
LIFTING_CUTOFF = 2.0  # right edge of the lifting-support strip
BASE_H = 0.5  # mesh pitch at resolution 1; divides every cell width/height
MU_REF = (1.0, 1.0)

N_COLS = len(X_BREAKS) - 1
N_ROWS = len(Y_BREAKS) - 1

TAG_INFLOW = "inflow"
TAG_OUTFLOW = "outflow"
TAG_WALL = "wall"


class ConfigurationError(ValueError):
    """Inconsistent construction input (bad bounds, malformed config)."""


class DomainError(ValueError):
    """Parameter value outside the admissible box."""


@dataclass(frozen=True)
class ParameterDomain:
    """Compact box of admissible parameters."""

    dim: int
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lower = np.asarray(self.lower, dtype=float)
        upper = np.asarray(self.upper, dtype=float)
        if lower.shape != (self.dim,) or upper.shape != (self.dim,):
            raise ConfigurationError(
                f"bounds must have shape ({self.dim},), got {lower.shape} and {upper.shape}"
            )
        if not np.all(lower < upper):
            raise ConfigurationError(
                f"degenerate parameter box: lower={lower} not strictly below upper={upper}"
            )
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    def contains(self, mu) -> bool:
        mu = np.asarray(mu, dtype=float)
        if mu.shape != (self.dim,):
            return False
        return bool(np.all(mu >= self.lower) and np.all(mu <= self.upper))

    def require(self, mu) -> np.ndarray:
        mu = np.asarray(mu, dtype=float)
        if not self.contains(mu):
            raise DomainError(f"parameter {mu} outside the box [{self.lower}, {self.upper}]")
        return mu

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        """Uniform random sample of shape (count, dim)."""
        return rng.uniform(self.lower, self.upper, size=(count, self.dim))

    def grid(self, points_per_axis: int) -> np.ndarray:
        """Tensor grid including the box corners, shape (points^dim, dim)."""
        axes = [np.linspace(self.lower[i], self.upper[i], points_per_axis) for i in range(self.dim)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)


def default_parameter_domain() -> ParameterDomain:
    return ParameterDomain(2, np.array([0.5, 0.5]), np.array([1.5, 1.5]))


def build_parameter_domain(config: dict) -> ParameterDomain:
    """Build a validated parameter box from a key/value map (keys n, lower, upper)."""
    try:
        n = int(config["n"])
        lower = np.asarray(config["lower"], dtype=float)
        upper = np.asarray(config["upper"], dtype=float)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigurationError(f"parameter domain config incomplete or malformed: {exc}") from exc
    return ParameterDomain(n, lower, upper)


@dataclass(frozen=True)
class SubdomainMap:
    """Diagonal affine map x -> matrix @ x + offset for one subdomain."""

    subdomain_id: int
    matrix: np.ndarray  # (2, 2)
    offset: np.ndarray  # (2,)

    def __post_init__(self):
        matrix = np.asarray(self.matrix, dtype=float).reshape(2, 2)
        offset = np.asarray(self.offset, dtype=float).reshape(2)
        if abs(np.linalg.det(matrix)) == 0.0:
            raise DomainError(f"singular affine map for subdomain {self.subdomain_id}")
        object.__setattr__(self, "matrix", matrix)
        object.__setattr__(self, "offset", offset)

    @property
    def det(self) -> float:
        return float(np.linalg.det(self.matrix))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.matrix.T + self.offset


def _fluid_cells():
    """Fluid (column, row) cells in subdomain-id order (row-major, bottom first)."""
    cells = []
    for row in range(N_ROWS):
        for col in range(N_COLS):
            if (col, row) != OBSTACLE_CELL:
                cells.append((col, row))
    return cells


FLUID_CELLS = tuple(_fluid_cells())
N_SUBDOMAINS = len(FLUID_CELLS)


def _column_map(col: int, mu1: float):
    """1-D affine map (scale, shift) for a column of the layout."""
    if col <= 1:
        return 1.0, 0.0
    if col == 2:
        # obstacle column [2, 2.5] -> [2, 2 + 0.5*mu1]
        return mu1, 2.0 * (1.0 - mu1)
    # right block [2.5, 5] -> [2 + 0.5*mu1, 5], anchored at the outflow
    scale = (CHANNEL_LENGTH - 2.0 - 0.5 * mu1) / (CHANNEL_LENGTH - 2.5)
    return scale, CHANNEL_LENGTH * (1.0 - scale)


def _row_map(row: int, mu2: float):
    if row == 0:
        # obstacle band [0, 0.5] -> [0, 0.5*mu2]
        return mu2, 0.0
    # top band [0.5, 1] -> [0.5*mu2, 1], anchored at the top wall
    scale = (CHANNEL_HEIGHT - 0.5 * mu2) / (CHANNEL_HEIGHT - 0.5)
    return scale, CHANNEL_HEIGHT * (1.0 - scale)


def evaluate_affine_maps(mu, domain: ParameterDomain | None = None) -> list[SubdomainMap]:
    """One diagonal affine map per fluid subdomain at parameter mu.

    The maps agree on shared subdomain interfaces, so the global
    piecewise-affine map is continuous; at mu = (1, 1) all maps are the
    identity.
    """
    domain = domain if domain is not None else default_parameter_domain()
    mu = domain.require(mu)
    mu1, mu2 = float(mu[0]), float(mu[1])
    maps = []
    for sid, (col, row) in enumerate(FLUID_CELLS):
        sx, ox = _column_map(col, mu1)
        sy, oy = _row_map(row, mu2)
        maps.append(SubdomainMap(sid, np.diag([sx, sy]), np.array([ox, oy])))
    return maps


def physical_area(mu) -> float:
    """Area of the mapped fluid region: channel minus the scaled obstacle."""
    mu1, mu2 = float(mu[0]), float(mu[1])
    return CHANNEL_LENGTH * CHANNEL_HEIGHT - (0.5 * mu1) * (0.5 * mu2)


REFERENCE_AREA = physical_area(MU_REF)

_TAG_ORDER = (TAG_INFLOW, TAG_OUTFLOW, TAG_WALL)


@dataclass(frozen=True)
class ReferenceMesh:
    """Conforming crossed-triangle mesh of the reference fluid region."""

    resolution: int
    vertices: np.ndarray  # (nv, 2)
    triangles: np.ndarray  # (nt, 3) vertex indices, counterclockwise
    subdomain_of: np.ndarray  # (nt,) fluid subdomain id
    boundary_edges: np.ndarray  # (nb, 2) vertex index pairs
    boundary_tags: np.ndarray = field(repr=False)  # (nb,) strings from _TAG_ORDER

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    def edges(self) -> np.ndarray:
        """Unique undirected edges (ne, 2), endpoints sorted."""
        t = self.triangles
        pairs = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        pairs = np.sort(pairs, axis=1)
        return np.unique(pairs, axis=0)


def generate_reference_mesh(resolution: int) -> ReferenceMesh:
    """Structured crossed-triangle mesh of the reference channel.

    Every rectangular subdomain is covered by square cells of pitch
    BASE_H / resolution, each split into four triangles through its center,
    so the element count grows like resolution**2 and meshes at different
    resolutions share all subdomain interfaces.
    """
    if resolution < 1 or int(resolution) != resolution:
        raise ConfigurationError(f"resolution must be a positive integer, got {resolution}")
    resolution = int(resolution)
    h = BASE_H / resolution
    nx = round(CHANNEL_LENGTH / h)
    ny = round(CHANNEL_HEIGHT / h)

    col_edges = np.rint(np.asarray(X_BREAKS) / h).astype(int)
    row_edges = np.rint(np.asarray(Y_BREAKS) / h).astype(int)
    cell_to_sid = {cell: sid for sid, cell in enumerate(FLUID_CELLS)}

    def quad_cell(i: int, j: int):
        col = int(np.searchsorted(col_edges, i, side="right")) - 1
        row = int(np.searchsorted(row_edges, j, side="right")) - 1
        return col, row

    # Lattice vertices get ids first, then quad centers; only referenced
    # vertices are emitted.
    vert_id: dict[tuple, int] = {}
    coords: list[tuple] = []

    def vid(key, x, y):
        idx = vert_id.get(key)
        if idx is None:
            idx = len(coords)
            vert_id[key] = idx
            coords.append((x, y))
        return idx

    triangles = []
    subdomains = []
    for j in range(ny):
        for i in range(nx):
            cell = quad_cell(i, j)
            sid = cell_to_sid.get(cell)
            if sid is None:
                continue  # obstacle
            bl = vid(("g", i, j), i * h, j * h)
            br = vid(("g", i + 1, j), (i + 1) * h, j * h)
            tr = vid(("g", i + 1, j + 1), (i + 1) * h, (j + 1) * h)
            tl = vid(("g", i, j + 1), i * h, (j + 1) * h)
            c = vid(("c", i, j), (i + 0.5) * h, (j + 0.5) * h)
            triangles.extend([(bl, br, c), (br, tr, c), (tr, tl, c), (tl, bl, c)])
            subdomains.extend([sid] * 4)

    vertices = np.array(coords, dtype=float)
    triangles = np.array(triangles, dtype=np.int64)
    subdomain_of = np.array(subdomains, dtype=np.int64)

    tri_pairs = np.concatenate(
        [triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]]
    )
    tri_pairs = np.sort(tri_pairs, axis=1)
    uniq, counts = np.unique(tri_pairs, axis=0, return_counts=True)
    boundary_edges = uniq[counts == 1]

    mid = 0.5 * (vertices[boundary_edges[:, 0]] + vertices[boundary_edges[:, 1]])
    tags = np.full(boundary_edges.shape[0], TAG_WALL, dtype=object)
    tags[np.abs(mid[:, 0]) < 1e-12] = TAG_INFLOW
    tags[np.abs(mid[:, 0] - CHANNEL_LENGTH) < 1e-12] = TAG_OUTFLOW

    return ReferenceMesh(
        resolution=resolution,
        vertices=vertices,
        triangles=triangles,
        subdomain_of=subdomain_of,
        boundary_edges=boundary_edges,
        boundary_tags=tags,
    )


def map_mesh_vertices(mesh: ReferenceMesh, maps: list[SubdomainMap]) -> np.ndarray:
    """Vertex coordinates under the global piecewise-affine map.

    Each vertex is mapped through the map of one triangle containing it;
    continuity of the global map makes the choice immaterial (asserted in
    the geometry tests).
    """
    mapped = np.zeros_like(mesh.vertices)
    seen = np.zeros(mesh.n_vertices, dtype=bool)
    for tri, sid in zip(mesh.triangles, mesh.subdomain_of):
        m = maps[sid]
        for v in tri:
            if not seen[v]:
                mapped[v] = m.apply(mesh.vertices[v])
                seen[v] = True
    return mapped


def export_mesh(mesh: ReferenceMesh, path) -> None:
    """Plain-text mesh dump: header with counts, then one section per field."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(
            f"# channel-mesh resolution={mesh.resolution} "
            f"vertices={mesh.n_vertices} triangles={mesh.n_triangles} "
            f"boundary_edges={mesh.boundary_edges.shape[0]}\n"
        )
        fh.write(f"vertices {mesh.n_vertices}\n")
        for x, y in mesh.vertices:
            fh.write(f"{x:.17g} {y:.17g}\n")
        fh.write(f"triangles {mesh.n_triangles}\n")
        for a, b, c in mesh.triangles:
            fh.write(f"{a} {b} {c}\n")
        fh.write(f"subdomains {mesh.n_triangles}\n")
        for s in mesh.subdomain_of:
            fh.write(f"{s}\n")
        fh.write(f"boundary {mesh.boundary_edges.shape[0]}\n")
        for (a, b), tag in zip(mesh.boundary_edges, mesh.boundary_tags):
            fh.write(f"{a} {b} {tag}\n")
