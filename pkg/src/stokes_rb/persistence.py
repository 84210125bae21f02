"""On-disk format of a trained database.

A database is a directory: a plain-text manifest plus one MatrixMarket
array file per reduced array and Gram block (text, endianness independent,
17 significant digits so float64 values round-trip exactly), and the
trained constant bounds as a .npz table.  Loading verifies the schema
version and reports the first missing or malformed field by name.
"""

from __future__ import annotations

import hashlib
import os

import numpy as np
from scipy.io import mmread, mmwrite

from .assembly import TimeGrid
from .constants import load_constant_bounds, save_constant_bounds
from .geometry import ParameterDomain, X_BREAKS, Y_BREAKS
from .reduced import RBDatabase, SCHEMA_VERSION

_PRECISION = 17


class PersistenceError(RuntimeError):
    pass


class MigrationError(PersistenceError):
    """Schema version of the stored database does not match this code."""


def geometry_digest(resolution: int, domain: ParameterDomain) -> str:
    text = (
        f"x={','.join(f'{v:.17g}' for v in X_BREAKS)};"
        f"y={','.join(f'{v:.17g}' for v in Y_BREAKS)};"
        f"resolution={resolution};"
        f"lower={','.join(f'{v:.17g}' for v in domain.lower)};"
        f"upper={','.join(f'{v:.17g}' for v in domain.upper)}"
    )
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _write_array(path, array: np.ndarray) -> None:
    arr = np.asarray(array, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    mmwrite(path, arr, precision=_PRECISION)


def _read_array(path) -> np.ndarray:
    return np.asarray(mmread(path), dtype=float)


def _block_file(side: str, key) -> str:
    return f"gram_{side}__{key[0]}_{key[1]}.mtx"


def save_database(db: RBDatabase, path, with_basis: bool = False) -> None:
    """Write the database directory (manifest, arrays, constants)."""
    os.makedirs(path, exist_ok=True)
    lines = {
        "schema_version": str(db.schema_version),
        "n_x": str(db.n_x),
        "n_y": str(db.n_y),
        "q_m": str(db.q_counts["m"]),
        "q_a": str(db.q_counts["a"]),
        "q_b": str(db.q_counts["b"]),
        "q_c": str(db.q_counts["c"]),
        "T": f"{db.grid.T:.17g}",
        "K": str(db.grid.K),
        "eps": f"{db.eps:.17g}",
        "domain_lower": ",".join(f"{v:.17g}" for v in db.domain.lower),
        "domain_upper": ",".join(f"{v:.17g}" for v in db.domain.upper),
        "dim_history": ";".join(f"{n},{nx},{ny}" for n, nx, ny in db.dim_history),
        "version": str(db.version),
        "geometry_digest": db.geometry_digest,
        "constants_mode": db.constants_mode,
        "with_basis": str(bool(with_basis and db.velocity_basis is not None)),
    }
    with open(os.path.join(path, "manifest.txt"), "w", encoding="utf-8") as fh:
        for key, value in lines.items():
            fh.write(f"{key} = {value}\n")

    stacked = {
        "m_red": db.m_red.reshape(-1, db.n_x) if db.n_x else db.m_red.reshape(0, 1),
        "a_red": db.a_red.reshape(-1, db.n_x) if db.n_x else db.a_red.reshape(0, 1),
        "b_red": db.b_red.reshape(-1, db.n_x) if db.n_x else db.b_red.reshape(0, 1),
        "c_red": db.c_red.reshape(-1, db.n_y) if db.n_y else db.c_red.reshape(0, 1),
        "f_mass_red": db.f_mass_red,
        "f_stiff_red": db.f_stiff_red,
        "g_red": db.g_red,
    }
    for name, arr in stacked.items():
        _write_array(os.path.join(path, f"{name}.mtx"), arr)
    for side, blocks in (("x", db.gram_x), ("y", db.gram_y)):
        for key, block in blocks.items():
            qi, ni, qj, nj = block.shape
            _write_array(os.path.join(path, _block_file(side, key)), block.reshape(qi * ni, qj * nj))
    if db.bounds is not None:
        save_constant_bounds(db.bounds, os.path.join(path, "constants.npz"))
    if with_basis and db.velocity_basis is not None:
        _write_array(os.path.join(path, "velocity_basis.mtx"), db.velocity_basis)
        _write_array(os.path.join(path, "pressure_basis.mtx"), db.pressure_basis)


def _parse_manifest(path) -> dict:
    manifest = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise PersistenceError(f"malformed manifest line: {line!r}")
                key, _, value = line.partition("=")
                manifest[key.strip()] = value.strip()
    except FileNotFoundError as exc:
        raise PersistenceError(f"database manifest not found: {path}") from exc
    return manifest


def _need(manifest: dict, key: str) -> str:
    if key not in manifest:
        raise PersistenceError(f"manifest is missing required field {key!r}")
    return manifest[key]


def load_database(path) -> RBDatabase:
    manifest = _parse_manifest(os.path.join(path, "manifest.txt"))
    version = int(_need(manifest, "schema_version"))
    if version != SCHEMA_VERSION:
        raise MigrationError(
            f"database schema version {version} does not match supported {SCHEMA_VERSION}"
        )
    n_x = int(_need(manifest, "n_x"))
    n_y = int(_need(manifest, "n_y"))
    q = {k: int(_need(manifest, f"q_{k}")) for k in ("m", "a", "b", "c")}
    grid = TimeGrid(T=float(_need(manifest, "T")), K=int(_need(manifest, "K")))
    lower = np.array([float(v) for v in _need(manifest, "domain_lower").split(",")])
    upper = np.array([float(v) for v in _need(manifest, "domain_upper").split(",")])
    domain = ParameterDomain(len(lower), lower, upper)
    history = []
    raw_history = _need(manifest, "dim_history")
    if raw_history:
        for chunk in raw_history.split(";"):
            n, nx, ny = chunk.split(",")
            history.append((int(n), int(nx), int(ny)))

    def read(name):
        file_path = os.path.join(path, f"{name}.mtx")
        if not os.path.exists(file_path):
            raise PersistenceError(f"database array file missing: {name}.mtx")
        return _read_array(file_path)

    m_red = read("m_red").reshape(q["m"], n_x, n_x)
    a_red = read("a_red").reshape(q["a"], n_x, n_x)
    b_red = read("b_red").reshape(q["b"], n_y, n_x)
    c_red = read("c_red").reshape(q["c"], n_y, n_y)
    f_mass_red = read("f_mass_red").ravel()
    f_stiff_red = read("f_stiff_red").ravel()
    g_red = read("g_red").ravel()

    dims = {"f": (2, 1), "m": (q["m"], n_x), "a": (q["a"], n_x), "b": (q["b"], n_y),
            "g": (1, 1), "bv": (q["b"], n_x), "cp": (q["c"], n_y)}
    gram_x = {}
    gram_y = {}
    from .reduced import X_GROUPS, Y_GROUPS

    for side, groups, target in (("x", X_GROUPS, gram_x), ("y", Y_GROUPS, gram_y)):
        for i, gi in enumerate(groups):
            for gj in groups[i:]:
                file_path = os.path.join(path, _block_file(side, (gi, gj)))
                if not os.path.exists(file_path):
                    raise PersistenceError(f"database gram block missing: {os.path.basename(file_path)}")
                qi, ni = dims[gi]
                qj, nj = dims[gj]
                target[(gi, gj)] = _read_array(file_path).reshape(qi, ni, qj, nj)

    bounds = None
    constants_path = os.path.join(path, "constants.npz")
    if os.path.exists(constants_path):
        bounds = load_constant_bounds(constants_path)

    velocity_basis = pressure_basis = None
    if manifest.get("with_basis", "False") == "True":
        velocity_basis = read("velocity_basis")
        pressure_basis = read("pressure_basis")

    return RBDatabase(
        domain=domain,
        grid=grid,
        eps=float(_need(manifest, "eps")),
        q_counts=q,
        m_red=m_red,
        a_red=a_red,
        b_red=b_red,
        c_red=c_red,
        f_mass_red=f_mass_red,
        f_stiff_red=f_stiff_red,
        g_red=g_red,
        gram_x=gram_x,
        gram_y=gram_y,
        bounds=bounds,
        velocity_basis=velocity_basis,
        pressure_basis=pressure_basis,
        dim_history=history,
        version=int(_need(manifest, "version")),
        geometry_digest=manifest.get("geometry_digest", ""),
        constants_mode=manifest.get("constants_mode", "trained"),
    )
