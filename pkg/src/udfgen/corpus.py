"""Procedural shape corpus: parametric open and closed surfaces.

Six families span closed genus-0/genus-1 surfaces and open sheets, three of
them with closed-form unsigned distance available as a test oracle.  Family
index doubles as the category label for conditional generation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dataclass_field

import numpy as np

from .geometry import Mesh, normalize_mesh

Array = np.ndarray

FAMILIES = ("sphere", "torus", "open-disk", "open-cylinder", "wavy-sheet", "box-frame")
OPEN_FAMILIES = frozenset({"open-disk", "open-cylinder", "wavy-sheet"})
ANALYTIC_FAMILIES = frozenset({"sphere", "torus", "open-disk"})


@dataclass(frozen=True)
class ShapeSpec:
    family: str
    parameters: dict = dataclass_field(default_factory=dict)
    category: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")


def category_of(family: str) -> int:
    return FAMILIES.index(family)


# ---------------------------------------------------------------------------
# triangulation helpers


def _grid_triangles(nu: int, nv: int, wrap_u: bool = False, wrap_v: bool = False) -> Array:
    """Two triangles per quad over an (nu, nv) vertex grid."""
    mu = nu if wrap_u else nu - 1
    mv = nv if wrap_v else nv - 1
    tris = []
    for i in range(mu):
        i1 = (i + 1) % nu
        for j in range(mv):
            j1 = (j + 1) % nv
            a = i * nv + j
            b = i1 * nv + j
            c = i1 * nv + j1
            d = i * nv + j1
            tris.append((a, b, c))
            tris.append((a, c, d))
    return np.asarray(tris, dtype=np.int64)


def _sphere(radius: float, n_lat: int = 24, n_lon: int = 32) -> Mesh:
    thetas = np.linspace(0.0, np.pi, n_lat + 1)[1:-1]
    phis = np.linspace(0.0, 2.0 * np.pi, n_lon, endpoint=False)
    tt, pp = np.meshgrid(thetas, phis, indexing="ij")
    ring = radius * np.stack(
        [np.sin(tt) * np.cos(pp), np.sin(tt) * np.sin(pp), np.cos(tt)], axis=-1
    ).reshape(-1, 3)
    top = np.array([[0.0, 0.0, radius]])
    bottom = np.array([[0.0, 0.0, -radius]])
    vertices = np.concatenate([top, bottom, ring])

    tris = list(_grid_triangles(n_lat - 1, n_lon, wrap_v=True) + 2)
    for j in range(n_lon):
        j1 = (j + 1) % n_lon
        tris.append((0, 2 + j, 2 + j1))  # top fan
        base = 2 + (n_lat - 2) * n_lon
        tris.append((1, base + j1, base + j))  # bottom fan
    return Mesh(vertices, np.asarray(tris, dtype=np.int64))


def _torus(major: float, minor: float, n_u: int = 32, n_v: int = 24) -> Mesh:
    us = np.linspace(0.0, 2.0 * np.pi, n_u, endpoint=False)
    vs = np.linspace(0.0, 2.0 * np.pi, n_v, endpoint=False)
    uu, vv = np.meshgrid(us, vs, indexing="ij")
    r = major + minor * np.cos(vv)
    vertices = np.stack([r * np.cos(uu), r * np.sin(uu), minor * np.sin(vv)], axis=-1)
    return Mesh(vertices.reshape(-1, 3), _grid_triangles(n_u, n_v, wrap_u=True, wrap_v=True))


def _open_disk(radius: float, n_r: int = 12, n_phi: int = 48) -> Mesh:
    phis = np.linspace(0.0, 2.0 * np.pi, n_phi, endpoint=False)
    radii = np.linspace(0.0, radius, n_r + 1)[1:]
    rr, pp = np.meshgrid(radii, phis, indexing="ij")
    rings = np.stack([rr * np.cos(pp), rr * np.sin(pp), np.zeros_like(rr)], axis=-1)
    vertices = np.concatenate([np.zeros((1, 3)), rings.reshape(-1, 3)])

    tris = list(_grid_triangles(n_r, n_phi, wrap_v=True) + 1)
    for j in range(n_phi):
        tris.append((0, 1 + j, 1 + (j + 1) % n_phi))
    return Mesh(vertices, np.asarray(tris, dtype=np.int64))


def _open_cylinder(radius: float, height: float, n_z: int = 24, n_phi: int = 32) -> Mesh:
    zs = np.linspace(-height / 2.0, height / 2.0, n_z + 1)
    phis = np.linspace(0.0, 2.0 * np.pi, n_phi, endpoint=False)
    zz, pp = np.meshgrid(zs, phis, indexing="ij")
    vertices = np.stack([radius * np.cos(pp), radius * np.sin(pp), zz], axis=-1)
    return Mesh(vertices.reshape(-1, 3), _grid_triangles(n_z + 1, n_phi, wrap_v=True))


def _wavy_sheet(amplitude: float, frequency: float, extent: float = 0.9, n: int = 32) -> Mesh:
    xs = np.linspace(-extent, extent, n + 1)
    xx, yy = np.meshgrid(xs, xs, indexing="ij")
    zz = amplitude * np.sin(frequency * xx) * np.sin(frequency * yy)
    vertices = np.stack([xx, yy, zz], axis=-1)
    return Mesh(vertices.reshape(-1, 3), _grid_triangles(n + 1, n + 1))


def _box_frame(outer: float, inner: float, height: float) -> Mesh:
    # square annulus cross-section extruded along z: closed genus-1 surface
    if not 0 < inner < outer:
        raise ValueError("box-frame needs 0 < inner < outer")
    corners = np.array([(-1, -1), (1, -1), (1, 1), (-1, 1)], dtype=np.float64)
    h = height / 2.0
    vertices = []
    for z in (-h, h):
        for scale in (outer, inner):
            for cx, cy in corners:
                vertices.append((scale * cx, scale * cy, z))
    vertices = np.asarray(vertices)
    # ring index helpers: [z][ring][corner] -> flat id
    def vid(zi: int, ring: int, corner: int) -> int:
        return zi * 8 + ring * 4 + corner % 4

    quads = []
    for c in range(4):
        quads.append((vid(0, 0, c), vid(0, 0, c + 1), vid(1, 0, c + 1), vid(1, 0, c)))  # outer wall
        quads.append((vid(0, 1, c + 1), vid(0, 1, c), vid(1, 1, c), vid(1, 1, c + 1)))  # inner wall
        quads.append((vid(1, 0, c), vid(1, 0, c + 1), vid(1, 1, c + 1), vid(1, 1, c)))  # top ring
        quads.append((vid(0, 0, c + 1), vid(0, 0, c), vid(0, 1, c), vid(0, 1, c + 1)))  # bottom ring
    tris = []
    for a, b, c, d in quads:
        tris.append((a, b, c))
        tris.append((a, c, d))
    return Mesh(vertices, np.asarray(tris, dtype=np.int64))


_DEFAULTS = {
    "sphere": {"radius": 0.6},
    "torus": {"major": 0.55, "minor": 0.22},
    "open-disk": {"radius": 0.8},
    "open-cylinder": {"radius": 0.45, "height": 1.1},
    "wavy-sheet": {"amplitude": 0.25, "frequency": 4.0},
    "box-frame": {"outer": 0.7, "inner": 0.4, "height": 0.5},
}


def generate_shape(spec: ShapeSpec) -> Mesh:
    """Triangulate the parametric surface at natural scale (inside [-1,1]^3).

    Open families carry boundary edges, closed families have none.
    Deterministic given the spec.
    """
    p = {**_DEFAULTS[spec.family], **spec.parameters}
    if spec.family == "sphere":
        if p["radius"] <= 0:
            raise ValueError("sphere radius must be positive")
        return _sphere(p["radius"], int(p.get("n_lat", 24)), int(p.get("n_lon", 32)))
    if spec.family == "torus":
        if not 0 < p["minor"] < p["major"]:
            raise ValueError("torus needs 0 < minor < major")
        return _torus(p["major"], p["minor"], int(p.get("n_u", 32)), int(p.get("n_v", 24)))
    if spec.family == "open-disk":
        if p["radius"] <= 0:
            raise ValueError("disk radius must be positive")
        return _open_disk(p["radius"], int(p.get("n_r", 12)), int(p.get("n_phi", 48)))
    if spec.family == "open-cylinder":
        if p["radius"] <= 0 or p["height"] <= 0:
            raise ValueError("cylinder needs positive radius and height")
        return _open_cylinder(
            p["radius"], p["height"], int(p.get("n_z", 24)), int(p.get("n_phi", 32))
        )
    if spec.family == "wavy-sheet":
        return _wavy_sheet(
            p["amplitude"], p["frequency"], p.get("extent", 0.9), int(p.get("n", 32))
        )
    if spec.family == "box-frame":
        return _box_frame(p["outer"], p["inner"], p["height"])
    raise ValueError(f"unknown family {spec.family!r}")


def analytic_udf(spec: ShapeSpec, points) -> Array:
    """Exact unsigned distance to the ideal surface; sphere, torus and
    open-disk only."""
    if spec.family not in ANALYTIC_FAMILIES:
        raise ValueError(f"{spec.family!r} has no closed-form distance")
    p = {**_DEFAULTS[spec.family], **spec.parameters}
    x = np.asarray(points, dtype=np.float64)
    single = x.ndim == 1
    x = x.reshape(-1, 3)
    if spec.family == "sphere":
        d = np.abs(np.linalg.norm(x, axis=1) - p["radius"])
    elif spec.family == "torus":
        rho = np.hypot(x[:, 0], x[:, 1])
        d = np.abs(np.hypot(rho - p["major"], x[:, 2]) - p["minor"])
    else:  # open-disk in the z=0 plane
        rho = np.hypot(x[:, 0], x[:, 1])
        outside = np.maximum(rho - p["radius"], 0.0)
        d = np.hypot(outside, x[:, 2])
    return float(d[0]) if single else d


# ---------------------------------------------------------------------------
# corpus generation


@dataclass
class CorpusShape:
    shape_id: str
    spec: ShapeSpec
    mesh: Mesh  # normalized into [-1, 1]^3


def _random_parameters(family: str, rng: np.random.Generator) -> dict:
    if family == "sphere":
        return {"radius": float(rng.uniform(0.35, 0.75))}
    if family == "torus":
        major = float(rng.uniform(0.45, 0.65))
        return {"major": major, "minor": float(rng.uniform(0.1, 0.45) * major)}
    if family == "open-disk":
        return {"radius": float(rng.uniform(0.5, 0.9))}
    if family == "open-cylinder":
        return {
            "radius": float(rng.uniform(0.3, 0.6)),
            "height": float(rng.uniform(0.6, 1.6)),
        }
    if family == "wavy-sheet":
        return {
            "amplitude": float(rng.uniform(0.1, 0.35)),
            "frequency": float(rng.uniform(2.0, 6.0)),
        }
    if family == "box-frame":
        outer = float(rng.uniform(0.5, 0.8))
        return {
            "outer": outer,
            "inner": float(rng.uniform(0.4, 0.65) * outer),
            "height": float(rng.uniform(0.3, 0.9)),
        }
    raise ValueError(family)


def build_corpus(count: int, families=FAMILIES, seed: int = 0) -> list[CorpusShape]:
    """Parameter-randomized corpus, balanced round-robin across families.

    Meshes are normalized so the longest bounding-box axis spans [-1, 1],
    matching the loader contract.  Deterministic given the seed.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    shapes = []
    for i in range(count):
        family = families[i % len(families)]
        spec = ShapeSpec(
            family=family,
            parameters=_random_parameters(family, rng),
            category=category_of(family),
            seed=int(rng.integers(2**31)),
        )
        mesh = normalize_mesh(generate_shape(spec))
        shapes.append(CorpusShape(shape_id=f"{family}_{i:03d}", spec=spec, mesh=mesh))
    return shapes


def write_manifest(shapes: list[CorpusShape], obj_paths: dict[str, str], path) -> None:
    entries = [
        {
            "shape_id": s.shape_id,
            "family": s.spec.family,
            "parameters": s.spec.parameters,
            "seed": s.spec.seed,
            "category": s.spec.category,
            "obj_path": obj_paths[s.shape_id],
        }
        for s in shapes
    ]
    with open(path, "w", encoding="utf-8") as f:
        json.dump(entries, f, indent=2, sort_keys=True)
        f.write("\n")


def read_manifest(path) -> list[dict]:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)
