"""Ground-truth unsigned distance supervision for triangle meshes.

Meshes are loaded from OBJ, normalized into [-1, 1]^3, and indexed by a BVH
for exact point-to-surface distance and gradient queries.  The query sampler
builds the supervision sets used to train the field decoder: a near-surface
biased mix of exact surface points, two Gaussian noise shells, and uniform
box samples.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

Array = np.ndarray

# below this distance the closest point coincides with the query and the
# gradient direction is undefined
SURFACE_EPSILON = 1e-7

DEGENERATE_AREA = 1e-12

SAMPLE_MAGIC = b"UDFS"
SAMPLE_VERSION = 1

_SAMPLE_RECORD = np.dtype(
    [("x", "<f8", (3,)), ("y", "<f8"), ("g", "<f8", (3,)), ("near_surface", "u1")]
)


class MeshError(ValueError):
    pass


@dataclass
class Mesh:
    """Indexed triangle surface: vertices (V,3) float64, triangles (T,3) int64."""

    vertices: Array
    triangles: Array

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and self.triangles.max(initial=-1) >= len(self.vertices):
            raise MeshError("triangle index out of range")

    @property
    def triangle_corners(self) -> Array:
        """(T,3,3) corner positions."""
        return self.vertices[self.triangles]

    def triangle_areas(self) -> Array:
        c = self.triangle_corners
        cross = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
        return 0.5 * np.linalg.norm(cross, axis=1)

    def boundary_edge_count(self) -> int:
        """Edges used by exactly one triangle."""
        t = self.triangles
        edges = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        edges.sort(axis=1)
        _, counts = np.unique(edges, axis=0, return_counts=True)
        return int((counts == 1).sum())


# ---------------------------------------------------------------------------
# OBJ / PLY io and normalization


def parse_obj(text: str) -> tuple[Array, list[list[int]]]:
    vertices: list[list[float]] = []
    faces: list[list[int]] = []
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if parts[0] == "v":
            if len(parts) < 4:
                raise MeshError(f"malformed vertex line: {raw!r}")
            vertices.append([float(p) for p in parts[1:4]])
        elif parts[0] == "f":
            idx = []
            for token in parts[1:]:
                head = token.split("/")[0]
                if not head:
                    raise MeshError(f"malformed face token: {token!r}")
                i = int(head)
                idx.append(i - 1 if i > 0 else len(vertices) + i)
            if len(idx) < 3:
                raise MeshError(f"face with fewer than 3 vertices: {raw!r}")
            faces.append(idx)
    return np.asarray(vertices, dtype=np.float64).reshape(-1, 3), faces


def fan_triangulate(faces: list[list[int]]) -> Array:
    tris = []
    for face in faces:
        for i in range(1, len(face) - 1):
            tris.append((face[0], face[i], face[i + 1]))
    return np.asarray(tris, dtype=np.int64).reshape(-1, 3)


def drop_degenerate(vertices: Array, triangles: Array) -> tuple[Array, int]:
    """Remove zero-area triangles; returns (kept, dropped count)."""
    c = vertices[triangles]
    cross = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
    areas = 0.5 * np.linalg.norm(cross, axis=1)
    keep = areas > DEGENERATE_AREA
    return triangles[keep], int((~keep).sum())


def normalize_mesh(mesh: Mesh) -> Mesh:
    """Center the tight bounding box at the origin and scale uniformly so the
    longest axis spans exactly [-1, 1]."""
    lo = mesh.vertices.min(axis=0)
    hi = mesh.vertices.max(axis=0)
    center = 0.5 * (lo + hi)
    extent = float((hi - lo).max())
    if extent <= 0:
        raise MeshError("mesh has zero extent")
    return Mesh((mesh.vertices - center) * (2.0 / extent), mesh.triangles.copy())


def load_mesh(path) -> Mesh:
    """Load an OBJ (quads and polygons fan-triangulated), drop degenerate
    faces, and normalize into [-1, 1]^3.  Dropped-face count is stashed on the
    returned mesh as ``dropped_faces``."""
    with open(path, "r", encoding="utf-8") as f:
        vertices, faces = parse_obj(f.read())
    if not faces:
        raise MeshError(f"{path}: no faces")
    if len(vertices) == 0:
        raise MeshError(f"{path}: no vertices")
    triangles = fan_triangulate(faces)
    triangles, dropped = drop_degenerate(vertices, triangles)
    if len(triangles) == 0:
        raise MeshError(f"{path}: all faces degenerate")
    mesh = normalize_mesh(Mesh(vertices, triangles))
    mesh.dropped_faces = dropped
    return mesh


def save_obj(mesh: Mesh, path) -> None:
    lines = [f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}" for v in mesh.vertices]
    lines += [f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}" for t in mesh.triangles]
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def save_ply(mesh: Mesh, path) -> None:
    """Binary little-endian PLY."""
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {len(mesh.vertices)}\n"
        "property double x\nproperty double y\nproperty double z\n"
        f"element face {len(mesh.triangles)}\n"
        "property list uchar int vertex_indices\nend_header\n"
    )
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(mesh.vertices.astype("<f8").tobytes())
        face_dtype = np.dtype([("n", "u1"), ("idx", "<i4", (3,))])
        faces = np.empty(len(mesh.triangles), dtype=face_dtype)
        faces["n"] = 3
        faces["idx"] = mesh.triangles
        f.write(faces.tobytes())


# ---------------------------------------------------------------------------
# surface sampling


def sample_surface(mesh: Mesh, count: int, seed: int) -> Array:
    """Area-weighted uniform surface samples, (count, 3).  Deterministic."""
    if count < 1:
        raise ValueError("count must be >= 1")
    areas = mesh.triangle_areas()
    total = areas.sum()
    if total <= 0:
        raise MeshError("mesh has no area to sample")
    rng = np.random.default_rng(seed)
    tri = rng.choice(len(areas), size=count, p=areas / total)
    u = rng.random(count)
    v = rng.random(count)
    flip = u + v > 1.0
    u[flip] = 1.0 - u[flip]
    v[flip] = 1.0 - v[flip]
    c = mesh.triangle_corners[tri]
    return c[:, 0] + u[:, None] * (c[:, 1] - c[:, 0]) + v[:, None] * (c[:, 2] - c[:, 0])


# ---------------------------------------------------------------------------
# exact point-triangle distance (Ericson's 7-region classification, vectorized
# over triangles)


def closest_point_on_triangles(q: Array, corners: Array) -> Array:
    """Closest point to ``q`` on each triangle; corners (T,3,3) -> (T,3)."""
    a, b, c = corners[:, 0], corners[:, 1], corners[:, 2]
    ab = b - a
    ac = c - a
    ap = q - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = q - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = q - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    with np.errstate(divide="ignore", invalid="ignore"):
        t_ab = d1 / (d1 - d3)
        t_ac = d2 / (d2 - d6)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        denom = va + vb + vc
        v_in = vb / denom
        w_in = vc / denom
    t_ab = np.nan_to_num(t_ab)[:, None]
    t_ac = np.nan_to_num(t_ac)[:, None]
    t_bc = np.nan_to_num(t_bc)[:, None]
    v_in = np.nan_to_num(v_in)[:, None]
    w_in = np.nan_to_num(w_in)[:, None]

    conds = [
        (d1 <= 0) & (d2 <= 0),                      # vertex a
        (d3 >= 0) & (d4 <= d3),                     # vertex b
        (d6 >= 0) & (d5 <= d6),                     # vertex c
        (vc <= 0) & (d1 >= 0) & (d3 <= 0),          # edge ab
        (vb <= 0) & (d2 >= 0) & (d6 <= 0),          # edge ac
        (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0),  # edge bc
    ]
    choices = [
        a,
        b,
        c,
        a + t_ab * ab,
        a + t_ac * ac,
        b + t_bc * (c - b),
    ]
    interior = a + v_in * ab + w_in * ac
    out = interior.copy()
    assigned = np.zeros(len(corners), dtype=bool)
    for cond, choice in zip(conds, choices):
        pick = cond & ~assigned
        out[pick] = choice[pick]
        assigned |= cond
    return out


def point_triangle_distances(q: Array, corners: Array) -> tuple[Array, Array]:
    cp = closest_point_on_triangles(q, corners)
    return np.linalg.norm(cp - q, axis=1), cp


# ---------------------------------------------------------------------------
# BVH distance index


@dataclass
class _BvhNodes:
    lo: Array
    hi: Array
    left: Array
    right: Array
    start: Array
    count: Array


class DistanceIndex:
    """BVH over triangles for exact unsigned distance queries.

    Immutable after construction; queries are re-entrant.  Equidistant
    triangles resolve to the lowest original triangle index (affects the
    closest point only, never the distance).
    """

    LEAF_SIZE = 8

    def __init__(self, mesh: Mesh):
        if len(mesh.triangles) == 0:
            raise MeshError("cannot index an empty mesh")
        self.mesh = mesh
        corners = mesh.triangle_corners
        tri_lo = corners.min(axis=1)
        tri_hi = corners.max(axis=1)
        centroids = corners.mean(axis=1)

        order = np.arange(len(corners))
        lo, hi, left, right, start, count = [], [], [], [], [], []

        def build(lo_i: int, hi_i: int) -> int:
            idx = len(lo)
            sel = order[lo_i:hi_i]
            lo.append(tri_lo[sel].min(axis=0))
            hi.append(tri_hi[sel].max(axis=0))
            left.append(-1)
            right.append(-1)
            if hi_i - lo_i <= self.LEAF_SIZE:
                start.append(lo_i)
                count.append(hi_i - lo_i)
                return idx
            start.append(0)
            count.append(0)
            cen = centroids[sel]
            axis = int(np.argmax(cen.max(axis=0) - cen.min(axis=0)))
            mid = (hi_i - lo_i) // 2
            part = np.argpartition(cen[:, axis], mid)
            order[lo_i:hi_i] = sel[part]
            left[idx] = build(lo_i, lo_i + mid)
            right[idx] = build(lo_i + mid, hi_i)
            return idx

        # median split keeps the recursion depth at ~log2(T)
        build(0, len(corners))

        self.order = order
        self.nodes = _BvhNodes(
            np.asarray(lo), np.asarray(hi),
            np.asarray(left), np.asarray(right),
            np.asarray(start), np.asarray(count),
        )
        self._corners = corners[order]

    def _aabb_distance(self, node: int, x: Array) -> float:
        d = np.maximum(self.nodes.lo[node] - x, 0.0)
        d = np.maximum(d, x - self.nodes.hi[node])
        return float(np.sqrt(d @ d))

    def query(self, x) -> tuple[float, Array, int]:
        """Exact unsigned distance: (y, closest point, triangle index)."""
        x = np.asarray(x, dtype=np.float64).reshape(3)
        nodes = self.nodes
        best = np.inf
        best_cp = x
        best_tri = -1

        stack = [(self._aabb_distance(0, x), 0)]
        while stack:
            dist, node = stack.pop()
            if dist > best:
                continue
            if nodes.count[node] > 0:
                s = nodes.start[node]
                e = s + nodes.count[node]
                d, cp = point_triangle_distances(x, self._corners[s:e])
                tri_ids = self.order[s:e]
                for j in range(len(d)):
                    if d[j] < best or (d[j] == best and tri_ids[j] < best_tri):
                        best, best_cp, best_tri = float(d[j]), cp[j], int(tri_ids[j])
                continue
            l, r = nodes.left[node], nodes.right[node]
            dl = self._aabb_distance(l, x)
            dr = self._aabb_distance(r, x)
            # push farther child first so the nearer one is processed next
            if dl <= dr:
                if dr <= best:
                    stack.append((dr, r))
                if dl <= best:
                    stack.append((dl, l))
            else:
                if dl <= best:
                    stack.append((dl, l))
                if dr <= best:
                    stack.append((dr, r))
        return best, best_cp, best_tri

    def query_many(self, xs: Array) -> tuple[Array, Array]:
        xs = np.asarray(xs, dtype=np.float64).reshape(-1, 3)
        ys = np.empty(len(xs))
        cps = np.empty((len(xs), 3))
        for i, x in enumerate(xs):
            ys[i], cps[i], _ = self.query(x)
        return ys, cps


def unsigned_distance(index: DistanceIndex, x) -> tuple[float, Array]:
    """Exact distance from x to the indexed surface and the realizing point."""
    y, cp, _ = index.query(x)
    return y, cp


def udf_gradient(index: DistanceIndex, x) -> tuple[Array, bool]:
    """Unit gradient (x - closest)/y; zero vector + flag within SURFACE_EPSILON."""
    x = np.asarray(x, dtype=np.float64).reshape(3)
    y, cp, _ = index.query(x)
    if y <= SURFACE_EPSILON:
        return np.zeros(3), True
    return (x - cp) / y, False


def normalize_distance(y, clip_distance: float):
    """Clip at ``clip_distance`` and scale linearly into [0, 1]."""
    if clip_distance <= 0:
        raise ValueError("clip_distance must be positive")
    y = np.asarray(y, dtype=np.float64)
    if np.any(y < 0):
        raise ValueError("distances must be non-negative")
    return np.minimum(y, clip_distance) / clip_distance


# ---------------------------------------------------------------------------
# query-point sampling


@dataclass
class UdfSampleSet:
    """Query points with ground-truth distances and gradients for one shape.

    Sample order is surface block, then the two noise shells, then uniform
    box samples; ``stratum_counts`` records the block lengths.
    """

    shape_id: str
    x: Array
    y: Array
    g: Array
    near_surface: Array
    clip_distance: float
    seed: int
    stratum_counts: tuple[int, int, int, int] = (0, 0, 0, 0)

    def __len__(self):
        return len(self.x)

    @property
    def y_normalized(self) -> Array:
        return normalize_distance(self.y, self.clip_distance)


def stratum_sizes(total: int) -> tuple[int, int, int, int]:
    """30/30/30/10 split with floor allocation; remainder goes to uniform."""
    base = int(np.floor(0.3 * total))
    return base, base, base, total - 3 * base


def sample_queries(
    mesh: Mesh,
    index: DistanceIndex,
    count: int,
    seed: int,
    *,
    noise_std: float = 0.003,
    clip_distance: float = 0.1,
    box_half_extent: float = 1.1,
    shape_id: str = "",
) -> UdfSampleSet:
    """Build a supervision set: 30% exact surface points, 30% surface points
    with per-axis Gaussian noise of sigma ``noise_std``, 30% with sigma
    3*noise_std, and the remainder uniform in the padded bounding box."""
    if count < 10:
        raise ValueError("count must be >= 10")
    n_surf, n_near, n_far, n_uniform = stratum_sizes(count)
    rng = np.random.default_rng(seed)

    surf = sample_surface(mesh, n_surf + n_near + n_far, seed=int(rng.integers(2**63)))
    xs = np.empty((count, 3))
    xs[:n_surf] = surf[:n_surf]
    xs[n_surf : n_surf + n_near] = surf[n_surf : n_surf + n_near] + rng.normal(
        scale=noise_std, size=(n_near, 3)
    )
    a = n_surf + n_near
    xs[a : a + n_far] = surf[a : a + n_far] + rng.normal(scale=3.0 * noise_std, size=(n_far, 3))
    xs[a + n_far :] = rng.uniform(-box_half_extent, box_half_extent, size=(n_uniform, 3))

    ys = np.empty(count)
    gs = np.zeros((count, 3))
    flags = np.zeros(count, dtype=bool)
    for i in range(count):
        y, cp, _ = index.query(xs[i])
        ys[i] = y
        if y <= SURFACE_EPSILON:
            flags[i] = True
        else:
            gs[i] = (xs[i] - cp) / y
    return UdfSampleSet(
        shape_id=shape_id,
        x=xs,
        y=ys,
        g=gs,
        near_surface=flags,
        clip_distance=clip_distance,
        seed=seed,
        stratum_counts=(n_surf, n_near, n_far, n_uniform),
    )


def save_sample_set(sample_set: UdfSampleSet, path) -> None:
    sid = sample_set.shape_id.encode("utf-8")
    records = np.empty(len(sample_set), dtype=_SAMPLE_RECORD)
    records["x"] = sample_set.x
    records["y"] = sample_set.y
    records["g"] = sample_set.g
    records["near_surface"] = sample_set.near_surface
    with open(path, "wb") as f:
        f.write(SAMPLE_MAGIC)
        f.write(struct.pack("<I", SAMPLE_VERSION))
        f.write(struct.pack("<I", len(sid)))
        f.write(sid)
        f.write(struct.pack("<IdQ", len(sample_set), sample_set.clip_distance, sample_set.seed))
        f.write(records.tobytes())


def load_sample_set(path) -> UdfSampleSet:
    with open(path, "rb") as f:
        if f.read(4) != SAMPLE_MAGIC:
            raise ValueError(f"{path}: not a UDF sample file")
        (version,) = struct.unpack("<I", f.read(4))
        if version != SAMPLE_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        (sid_len,) = struct.unpack("<I", f.read(4))
        shape_id = f.read(sid_len).decode("utf-8")
        count, clip_distance, seed = struct.unpack("<IdQ", f.read(20))
        records = np.frombuffer(f.read(count * _SAMPLE_RECORD.itemsize), dtype=_SAMPLE_RECORD)
    return UdfSampleSet(
        shape_id=shape_id,
        x=records["x"].astype(np.float64),
        y=records["y"].astype(np.float64),
        g=records["g"].astype(np.float64),
        near_surface=records["near_surface"].astype(bool),
        clip_distance=clip_distance,
        seed=seed,
        stratum_counts=stratum_sizes(count),
    )
