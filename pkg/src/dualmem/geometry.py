"""Mesh / point-cloud metrics: voxel IoU, Chamfer and Hausdorff distance.

Both inputs are normalized before comparison (centroid to origin, longest
bounding-box edge scaled to 1). Nearest neighbours are exact (k-d tree).
Voxel occupancy is decided by x-axis ray parity at voxel centres, so meshes
need to be closed; rays with an odd crossing count are treated as evidence
of holes.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from dualmem.errors import (
    DegenerateGeometryError,
    InvalidInputError,
    NonWatertightError,
    ParseError,
)

DEGENERATE_AREA = 1e-12
DEFAULT_POINTS = 2048
DEFAULT_RESOLUTION = 64
GRID_PAD = 1.1
MAX_BAD_RAY_FRACTION = 0.01


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (n, 3)
    triangles: np.ndarray  # (m, 3) int
    dropped_degenerate: int = 0

    def triangle_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


@dataclass
class PointCloud:
    points: np.ndarray  # (n, 3)


@dataclass
class VerificationChecklist:
    script_executed: bool
    entity_generated: bool
    topology_valid: bool
    dimensions_within_tolerance: bool
    stats_in_range: bool


def binary_reward(c: VerificationChecklist) -> int:
    checks = (
        c.script_executed,
        c.entity_generated,
        c.topology_valid,
        c.dimensions_within_tolerance,
        c.stats_in_range,
    )
    if any(not isinstance(v, bool) for v in checks):
        raise InvalidInputError("every checklist item must be set to True or False")
    return int(all(checks))


def make_mesh(vertices, triangles) -> TriangleMesh:
    """Validate indices and drop zero-area triangles."""
    v = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    t = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    if len(v) == 0 or len(t) == 0:
        raise InvalidInputError("mesh needs vertices and triangles")
    if t.min() < 0 or t.max() >= len(v):
        raise InvalidInputError("triangle index out of range")
    mesh = TriangleMesh(v, t)
    keep = mesh.triangle_areas() > DEGENERATE_AREA
    dropped = int((~keep).sum())
    if dropped == len(t):
        raise InvalidInputError("mesh has no non-degenerate triangles")
    return TriangleMesh(v, t[keep], dropped)


def box_mesh(lo=(-0.5, -0.5, -0.5), hi=(0.5, 0.5, 0.5)) -> TriangleMesh:
    """Closed axis-aligned box, 8 vertices and 12 outward-wound triangles."""
    (x0, y0, z0), (x1, y1, z1) = lo, hi
    v = [
        (x0, y0, z0), (x1, y0, z0), (x1, y1, z0), (x0, y1, z0),
        (x0, y0, z1), (x1, y0, z1), (x1, y1, z1), (x0, y1, z1),
    ]
    f = [
        (0, 2, 1), (0, 3, 2),  # z0
        (4, 5, 6), (4, 6, 7),  # z1
        (0, 1, 5), (0, 5, 4),  # y0
        (3, 7, 6), (3, 6, 2),  # y1
        (0, 4, 7), (0, 7, 3),  # x0
        (1, 2, 6), (1, 6, 5),  # x1
    ]
    return make_mesh(v, f)


def _parse_obj(path: Path) -> TriangleMesh:
    verts = []
    tris = []
    ignored = {"vn", "vt", "vp", "o", "g", "s", "usemtl", "mtllib", "l"}
    face_lines = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            head, *rest = line.split()
            if head == "v":
                if len(rest) < 3:
                    raise ParseError("vertex needs three coordinates", path, lineno)
                try:
                    verts.append(tuple(float(x) for x in rest[:3]))
                except ValueError:
                    raise ParseError("non-numeric vertex coordinate", path, lineno) from None
            elif head == "f":
                if len(rest) < 3:
                    raise ParseError("face needs at least three vertices", path, lineno)
                try:
                    idx = [int(tok.split("/")[0]) for tok in rest]
                except ValueError:
                    raise ParseError("bad face index", path, lineno) from None
                face_lines.append((lineno, idx, len(verts)))
            elif head in ignored:
                continue
            else:
                raise ParseError(f"unsupported OBJ statement {head!r}", path, lineno)
    n = len(verts)
    for lineno, idx, seen in face_lines:
        resolved = []
        for i in idx:
            # negative indices are relative to the vertices defined so far
            j = i - 1 if i > 0 else seen + i
            if i == 0 or not 0 <= j < n:
                raise ParseError(f"face index {i} out of range", path, lineno)
            resolved.append(j)
        for a in range(1, len(resolved) - 1):
            tris.append((resolved[0], resolved[a], resolved[a + 1]))
    if not verts or not tris:
        raise InvalidInputError(f"{path}: no triangles found")
    return make_mesh(verts, tris)


def _parse_xyz(path: Path) -> PointCloud:
    pts = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.replace(",", " ").split()
            if len(parts) != 3:
                raise ParseError("expected three coordinates", path, lineno)
            try:
                pts.append(tuple(float(x) for x in parts))
            except ValueError:
                raise ParseError("non-numeric coordinate", path, lineno) from None
    if not pts:
        raise InvalidInputError(f"{path}: empty point list")
    return PointCloud(np.array(pts, dtype=np.float64))


def load_geometry(path):
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".obj":
        return _parse_obj(path)
    if suffix == ".xyz":
        return _parse_xyz(path)
    raise InvalidInputError(f"unsupported geometry format {suffix!r}")


def save_obj(mesh: TriangleMesh, path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for x, y, z in mesh.vertices:
            fh.write(f"v {float(x)!r} {float(y)!r} {float(z)!r}\n")
        for a, b, c in mesh.triangles:
            fh.write(f"f {a + 1} {b + 1} {c + 1}\n")


def _points_of(g) -> np.ndarray:
    return g.vertices if isinstance(g, TriangleMesh) else g.points


def normalize(g):
    """Centre on the point/vertex mean and scale the longest bbox edge to 1."""
    pts = _points_of(g)
    if len(pts) == 0:
        raise InvalidInputError("cannot normalize empty geometry")
    extent = float((pts.max(axis=0) - pts.min(axis=0)).max())
    if extent == 0.0:
        raise DegenerateGeometryError("all points coincide")
    out = (pts - pts.mean(axis=0)) / extent
    if isinstance(g, TriangleMesh):
        return TriangleMesh(out, g.triangles.copy(), g.dropped_degenerate)
    return PointCloud(out)


def sample_surface(m: TriangleMesh, n: int, rng) -> PointCloud:
    if n < 1:
        raise InvalidInputError("need at least one sample")
    areas = m.triangle_areas()
    total = areas.sum()
    if not total > 0.0:
        raise DegenerateGeometryError("mesh has zero surface area")
    tri = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    a, b, c = (m.vertices[m.triangles[tri, i]] for i in range(3))
    pts = (1.0 - r1)[:, None] * a + (r1 * (1.0 - r2))[:, None] * b + (r1 * r2)[:, None] * c
    return PointCloud(pts)


def _as_points(x) -> np.ndarray:
    pts = x.points if isinstance(x, PointCloud) else np.asarray(x, dtype=np.float64)
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise InvalidInputError("point cloud is empty")
    return pts


def _directed(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance from each point of ``a`` to its nearest neighbour in ``b``."""
    dist, _ = cKDTree(b).query(a, k=1)
    return np.asarray(dist, dtype=np.float64)


def chamfer(A, B) -> float:
    a, b = _as_points(A), _as_points(B)
    return 0.5 * (float(_directed(a, b).mean()) + float(_directed(b, a).mean()))


def hausdorff(A, B) -> float:
    a, b = _as_points(A), _as_points(B)
    return max(float(_directed(a, b).max()), float(_directed(b, a).max()))


def voxelize(mesh: TriangleMesh, origin, side: float, resolution: int):
    """Boolean occupancy ``[ix, iy, iz]`` on a cubic grid, plus bad-ray count.

    Rays run along +x through every (y, z) voxel-centre column; a centre is
    inside when an odd number of surface crossings lie below it. Ray
    positions are offset by a tiny irrational amount so they do not pass
    exactly through mesh edges or vertices.
    """
    res = resolution
    h = side / res
    origin = np.asarray(origin, dtype=np.float64)
    centres = (np.arange(res) + 0.5) * h
    xs = origin[0] + centres
    jitter = h * np.array([1.0e-6 * np.sqrt(2.0), 1.0e-6 * np.sqrt(3.0)])
    ys = origin[1] + centres + jitter[0]
    zs = origin[2] + centres + jitter[1]

    hits = [[] for _ in range(res * res)]
    V = mesh.vertices
    for t in mesh.triangles:
        p0, p1, p2 = V[t[0]], V[t[1]], V[t[2]]
        # project onto (y, z)
        e1 = p1[1:] - p0[1:]
        e2 = p2[1:] - p0[1:]
        det = e1[0] * e2[1] - e1[1] * e2[0]
        if det == 0.0:
            continue  # triangle is parallel to the rays
        ymin, ymax = min(p0[1], p1[1], p2[1]), max(p0[1], p1[1], p2[1])
        zmin, zmax = min(p0[2], p1[2], p2[2]), max(p0[2], p1[2], p2[2])
        j0 = max(0, int(np.searchsorted(ys, ymin)))
        j1 = min(res, int(np.searchsorted(ys, ymax, side="right")))
        k0 = max(0, int(np.searchsorted(zs, zmin)))
        k1 = min(res, int(np.searchsorted(zs, zmax, side="right")))
        if j0 >= j1 or k0 >= k1:
            continue
        J, K = np.meshgrid(np.arange(j0, j1), np.arange(k0, k1), indexing="ij")
        dy = ys[J] - p0[1]
        dz = zs[K] - p0[2]
        u = (dy * e2[1] - dz * e2[0]) / det
        v = (e1[0] * dz - e1[1] * dy) / det
        inside = (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0)
        if not inside.any():
            continue
        xhit = p0[0] + u * (p1[0] - p0[0]) + v * (p2[0] - p0[0])
        for j, k, x in zip(J[inside], K[inside], xhit[inside]):
            hits[j * res + k].append(x)

    occ = np.zeros((res, res, res), dtype=bool)
    bad = 0
    for ray, xh in enumerate(hits):
        if not xh:
            continue
        if len(xh) % 2:
            bad += 1
            continue
        xh = np.sort(np.asarray(xh))
        below = np.searchsorted(xh, xs, side="left")
        j, k = divmod(ray, res)
        occ[:, j, k] = (below % 2) == 1
    return occ, bad


def voxel_iou(mA: TriangleMesh, mB: TriangleMesh, resolution: int = DEFAULT_RESOLUTION) -> float:
    """Occupancy IoU on a shared cubic grid.

    The grid cube is centred on the union bounding box of both meshes with
    side ``1.1 x`` its longest edge; for two normalized meshes filling the
    unit cube this is ``[-0.55, 0.55]^3``.
    """
    if resolution < 8:
        raise InvalidInputError("voxel resolution must be >= 8")
    pts = np.vstack([mA.vertices, mB.vertices])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    extent = float((hi - lo).max())
    if extent == 0.0:
        raise DegenerateGeometryError("meshes collapse to a point")
    side = GRID_PAD * extent
    origin = 0.5 * (lo + hi) - 0.5 * side
    rays = resolution * resolution
    occ = []
    for m in (mA, mB):
        grid, bad = voxelize(m, origin, side, resolution)
        if bad > MAX_BAD_RAY_FRACTION * rays:
            raise NonWatertightError(f"{bad} of {rays} rays have odd crossing counts")
        occ.append(grid)
    union = np.logical_or(*occ).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(*occ).sum() / union)


def compare(gen, ref, n_points: int = DEFAULT_POINTS, resolution: int = DEFAULT_RESOLUTION, rng=None):
    """``(iou, cd, hd)`` after normalizing both inputs.

    IoU is NaN unless both inputs are meshes. Point clouds are used as-is;
    meshes are surface-sampled with ``n_points`` points.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    g, r = normalize(gen), normalize(ref)
    iou = float("nan")
    if isinstance(g, TriangleMesh) and isinstance(r, TriangleMesh):
        iou = voxel_iou(g, r, resolution)
    pg = sample_surface(g, n_points, rng) if isinstance(g, TriangleMesh) else g
    pr = sample_surface(r, n_points, rng) if isinstance(r, TriangleMesh) else r
    return iou, chamfer(pg, pr), hausdorff(pg, pr)
