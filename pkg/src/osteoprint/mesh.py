"""Triangle-mesh extraction, alignment and distance evaluation.

Surfaces are extracted from voxel volumes by marching cubes, rigidly
aligned by principal axes plus point-to-point ICP, and compared with
sampled (Metro-style) RMS and Hausdorff distances, reported both in mm and
relative to the combined bounding-box diagonal.  Point-to-mesh distances
are exact (interior/edge/vertex cases) and accelerated by an AABB
bounding-volume hierarchy whose results match brute force.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from skimage import measure

from .phantom import VoxelVolume

DEGENERATE_AREA = 1e-12


class SurfaceError(ValueError):
    """Iso-surface extraction cannot produce a surface."""


class SamplingError(ValueError):
    """Surface sampling on an empty or degenerate mesh."""


class AlignmentError(RuntimeError):
    """ICP failed to converge (residual increased repeatedly)."""


class MeshIOError(IOError):
    """Malformed STL data; message carries the failing byte offset."""


@dataclass
class TriMesh:
    """Indexed triangle surface: ``vertices`` (V, 3) mm, ``triangles`` (T, 3)."""

    vertices: np.ndarray
    triangles: np.ndarray

    def validate(self) -> None:
        v = np.asarray(self.vertices)
        t = np.asarray(self.triangles)
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValueError(f"vertices must be (V, 3), got {v.shape}")
        if t.ndim != 2 or t.shape[1] != 3:
            raise ValueError(f"triangles must be (T, 3), got {t.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("non-finite vertex coordinates")
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise ValueError("triangle index out of range")

    @property
    def corners(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        v, t = self.vertices, self.triangles
        return v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]

    def triangle_areas(self) -> np.ndarray:
        a, b, c = self.corners
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def transformed(self, rotation: np.ndarray, translation: np.ndarray) -> "TriMesh":
        return TriMesh(self.vertices @ np.asarray(rotation).T + translation,
                       self.triangles.copy())


@dataclass
class DistanceReport:
    rms_mm: float
    hausdorff_mm: float
    rms_relative: float
    hausdorff_relative: float
    sample_count: int
    bbox_diagonal_mm: float

    def validate(self) -> None:
        if self.rms_mm > self.hausdorff_mm + 1e-12:
            raise ValueError("rms_mm exceeds hausdorff_mm")

    def to_dict(self) -> dict:
        return {
            "rms_mm": self.rms_mm,
            "hausdorff_mm": self.hausdorff_mm,
            "rms_relative": self.rms_relative,
            "hausdorff_relative": self.hausdorff_relative,
            "sample_count": self.sample_count,
            "bbox_diagonal_mm": self.bbox_diagonal_mm,
        }

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)
            f.write("\n")


# ---------------------------------------------------------------------------
# Iso-surface extraction
# ---------------------------------------------------------------------------

def extract_isosurface(volume: VoxelVolume, iso: float) -> TriMesh:
    """Marching-cubes surface of the ``iso`` density level.

    Vertices are in the volume's grid-centered mm frame.  Triangles are
    consistently outward-oriented; degenerate triangles and unreferenced
    vertices are removed.
    """
    volume.validate()
    lo, hi = float(volume.data.min()), float(volume.data.max())
    if not (lo < iso < hi):
        raise SurfaceError(
            f"iso value {iso} not strictly inside the data range [{lo}, {hi}]"
        )
    verts, faces, _, _ = measure.marching_cubes(
        volume.data.astype(np.float64), level=iso, spacing=volume.spacing
    )
    # skimage places voxel (0,0,0) at the origin; re-center to the grid frame.
    offset = (np.array(volume.dims, dtype=np.float64) - 1.0) / 2.0 * np.array(volume.spacing)
    mesh = TriMesh(verts - offset, faces.astype(np.int64))
    mesh = _cleanup(mesh)
    mesh = _orient_outward(mesh)
    mesh.validate()
    return mesh


def _cleanup(mesh: TriMesh) -> TriMesh:
    areas = mesh.triangle_areas()
    tris = mesh.triangles[areas > DEGENERATE_AREA]
    used = np.unique(tris)
    remap = np.full(len(mesh.vertices), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return TriMesh(mesh.vertices[used], remap[tris])


def _orient_outward(mesh: TriMesh) -> TriMesh:
    a, b, c = mesh.corners
    signed = np.einsum("ij,ij->i", a, np.cross(b - a, c - a)).sum() / 6.0
    if signed < 0:
        return TriMesh(mesh.vertices, mesh.triangles[:, ::-1].copy())
    return mesh


# ---------------------------------------------------------------------------
# Surface sampling
# ---------------------------------------------------------------------------

def surface_sample(mesh: TriMesh, n: int, seed: int) -> np.ndarray:
    """``n`` area-uniform surface points, deterministic per seed."""
    if n < 1:
        raise SamplingError(f"sample count must be >= 1, got {n}")
    if len(mesh.triangles) == 0:
        raise SamplingError("cannot sample an empty mesh")
    areas = mesh.triangle_areas()
    total = areas.sum()
    if total <= 0:
        raise SamplingError("mesh has zero total area")
    rng = np.random.Generator(np.random.PCG64(seed))
    tri_idx = rng.choice(len(areas), size=n, p=areas / total)
    u = rng.random(n)
    v = rng.random(n)
    flip = u + v > 1.0
    u[flip] = 1.0 - u[flip]
    v[flip] = 1.0 - v[flip]
    a, b, c = mesh.corners
    a, b, c = a[tri_idx], b[tri_idx], c[tri_idx]
    return a + u[:, None] * (b - a) + v[:, None] * (c - a)


# ---------------------------------------------------------------------------
# Exact point-triangle distance (Ericson's region scheme, vectorized)
# ---------------------------------------------------------------------------

def _point_triangle_dist_sq(points: np.ndarray, a, b, c) -> np.ndarray:
    """Squared distances, shape (n_points, n_triangles)."""
    p = points[:, None, :]
    ab = (b - a)[None, :, :]
    ac = (c - a)[None, :, :]
    ap = p - a[None, :, :]

    d1 = np.sum(ab * ap, axis=2)
    d2 = np.sum(ac * ap, axis=2)

    bp = p - b[None, :, :]
    d3 = np.sum(ab * bp, axis=2)
    d4 = np.sum(ac * bp, axis=2)

    cp = p - c[None, :, :]
    d5 = np.sum(ab * cp, axis=2)
    d6 = np.sum(ac * cp, axis=2)

    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    with np.errstate(divide="ignore", invalid="ignore"):
        t_ab = np.where(d1 - d3 != 0, d1 / (d1 - d3), 0.0)
        t_ac = np.where(d2 - d6 != 0, d2 / (d2 - d6), 0.0)
        den_bc = (d4 - d3) + (d5 - d6)
        t_bc = np.where(den_bc != 0, (d4 - d3) / den_bc, 0.0)
        den_f = va + vb + vc
        v_f = np.where(den_f != 0, vb / den_f, 1.0 / 3.0)
        w_f = np.where(den_f != 0, vc / den_f, 1.0 / 3.0)

    # Barycentric candidates per region, selected by the standard tests.
    in_a = (d1 <= 0) & (d2 <= 0)
    in_b = (d3 >= 0) & (d4 <= d3)
    in_c = (d6 >= 0) & (d5 <= d6)
    on_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    on_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    on_bc = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)

    v_sel = np.clip(v_f, 0.0, 1.0)
    w_sel = np.clip(w_f, 0.0, 1.0)

    for cond, vv, ww in (
        (on_bc, 1.0 - t_bc, t_bc),
        (on_ac, np.zeros_like(t_ac), t_ac),
        (on_ab, t_ab, np.zeros_like(t_ab)),
        (in_c, np.zeros_like(t_ab), np.ones_like(t_ab)),
        (in_b, np.ones_like(t_ab), np.zeros_like(t_ab)),
        (in_a, np.zeros_like(t_ab), np.zeros_like(t_ab)),
    ):
        v_sel = np.where(cond, vv, v_sel)
        w_sel = np.where(cond, ww, w_sel)

    closest = a[None, :, :] + v_sel[..., None] * ab + w_sel[..., None] * ac
    diff = p - closest
    return np.einsum("pti,pti->pt", diff, diff)


def point_mesh_distance_brute(points: np.ndarray, mesh: TriMesh) -> np.ndarray:
    """Exact minimum distances by scanning every triangle."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if len(mesh.triangles) == 0:
        raise SamplingError("mesh has no triangles")
    a, b, c = (x.astype(np.float64) for x in mesh.corners)
    out = np.empty(len(points))
    chunk = max(1, int(4e6) // max(1, len(a)))
    for start in range(0, len(points), chunk):
        sl = slice(start, start + chunk)
        out[sl] = np.sqrt(_point_triangle_dist_sq(points[sl], a, b, c).min(axis=1))
    return out


class MeshBVH:
    """Axis-aligned-box hierarchy over triangles for exact nearest queries."""

    LEAF_SIZE = 8

    def __init__(self, mesh: TriMesh):
        if len(mesh.triangles) == 0:
            raise SamplingError("mesh has no triangles")
        self.a, self.b, self.c = (x.astype(np.float64) for x in mesh.corners)
        self.vertices = mesh.vertices.astype(np.float64)
        tri_min = np.minimum(np.minimum(self.a, self.b), self.c)
        tri_max = np.maximum(np.maximum(self.a, self.b), self.c)
        centroids = (self.a + self.b + self.c) / 3.0

        self.order = np.arange(len(self.a))
        # node arrays: bbox lo/hi, children (-1 for leaf), triangle range
        self.lo, self.hi = [], []
        self.left, self.right = [], []
        self.start, self.count = [], []
        self._build(0, len(self.a), tri_min, tri_max, centroids)
        self.lo = np.array(self.lo)
        self.hi = np.array(self.hi)
        self._vertex_tree = cKDTree(self.vertices)

    def _build(self, beg, end, tri_min, tri_max, centroids) -> int:
        idx = self.order[beg:end]
        node = len(self.lo)
        self.lo.append(tri_min[idx].min(axis=0))
        self.hi.append(tri_max[idx].max(axis=0))
        self.left.append(-1)
        self.right.append(-1)
        self.start.append(beg)
        self.count.append(end - beg)
        if end - beg <= self.LEAF_SIZE:
            return node
        cent = centroids[idx]
        axis = int(np.argmax(cent.max(axis=0) - cent.min(axis=0)))
        mid = (end - beg) // 2
        part = np.argpartition(cent[:, axis], mid)
        self.order[beg:end] = idx[part]
        self.left[node] = self._build(beg, beg + mid, tri_min, tri_max, centroids)
        self.right[node] = self._build(beg + mid, end, tri_min, tri_max, centroids)
        return node

    def _box_dist_sq(self, node, points):
        d = np.maximum(self.lo[node] - points, 0.0) + np.maximum(points - self.hi[node], 0.0)
        return np.einsum("ij,ij->i", d, d)

    def query(self, points: np.ndarray) -> np.ndarray:
        """Exact minimum distance from each point to the mesh surface."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        # Nearest-vertex distances are an attained upper bound, which makes
        # pruning with >= comparisons exact.
        best_sq = self._vertex_tree.query(points)[0] ** 2
        self._descend(0, np.arange(len(points)), points, best_sq)
        return np.sqrt(best_sq)

    def _descend(self, node, active, points, best_sq):
        box = self._box_dist_sq(node, points[active])
        keep = box < best_sq[active]
        active = active[keep]
        if active.size == 0:
            return
        if self.left[node] < 0:
            idx = self.order[self.start[node]:self.start[node] + self.count[node]]
            d = _point_triangle_dist_sq(points[active], self.a[idx], self.b[idx],
                                        self.c[idx]).min(axis=1)
            np.minimum.at(best_sq, active, d)
            return
        l, r = self.left[node], self.right[node]
        dl = self._box_dist_sq(l, points[active]).mean()
        dr = self._box_dist_sq(r, points[active]).mean()
        first, second = (l, r) if dl <= dr else (r, l)
        self._descend(first, active, points, best_sq)
        self._descend(second, active, points, best_sq)


def point_mesh_distance(point, mesh: TriMesh) -> float:
    """Exact distance from one point to the mesh (BVH-accelerated)."""
    return float(MeshBVH(mesh).query(np.asarray(point, dtype=np.float64)[None, :])[0])


# ---------------------------------------------------------------------------
# Rigid alignment: principal axes then point-to-point ICP
# ---------------------------------------------------------------------------

@dataclass
class AlignResult:
    rotation: np.ndarray
    translation: np.ndarray
    aligned: TriMesh
    rms: float
    iterations: int


_SIGN_COMBOS = (
    (1.0, 1.0, 1.0),
    (1.0, -1.0, -1.0),
    (-1.0, 1.0, -1.0),
    (-1.0, -1.0, 1.0),
)


def _principal_axes(points: np.ndarray) -> np.ndarray:
    centered = points - points.mean(axis=0)
    cov = centered.T @ centered / len(points)
    eigvals, eigvecs = np.linalg.eigh(cov)
    axes = eigvecs[:, ::-1]  # descending variance
    if np.linalg.det(axes) < 0:
        axes[:, 2] = -axes[:, 2]
    return axes


def _kabsch(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    src_c = src.mean(axis=0)
    dst_c = dst.mean(axis=0)
    h = (src - src_c).T @ (dst - dst_c)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return r, dst_c - r @ src_c


def rigid_align(
    moving: TriMesh,
    fixed: TriMesh,
    samples: int = 2000,
    seed: int = 0,
    max_iterations: int = 100,
    tolerance: float = 1e-6,
) -> AlignResult:
    """Rigidly align ``moving`` onto ``fixed``.

    Initialization is centroid + principal-axes with 4-way axis-sign
    disambiguation by lowest residual; refinement is point-to-point ICP on
    area-uniform samples until the RMS improvement drops below
    ``tolerance`` mm or ``max_iterations`` is reached.
    """
    if len(moving.triangles) == 0 or len(fixed.triangles) == 0:
        raise SamplingError("cannot align empty meshes")
    pts_m = surface_sample(moving, samples, seed)
    pts_f = surface_sample(fixed, samples, seed)
    tree = cKDTree(pts_f)

    axes_m = _principal_axes(pts_m)
    axes_f = _principal_axes(pts_f)
    cm = pts_m.mean(axis=0)
    cf = pts_f.mean(axis=0)

    best = None
    for signs in _SIGN_COMBOS:
        r0 = axes_f @ np.diag(signs) @ axes_m.T
        t0 = cf - r0 @ cm
        rms0 = math.sqrt(np.mean(tree.query(pts_m @ r0.T + t0)[0] ** 2))
        if best is None or rms0 < best[2]:
            best = (r0, t0, rms0)
    rotation, translation, rms = best

    worse_streak = 0
    iterations = 0
    for iterations in range(1, max_iterations + 1):
        current = pts_m @ rotation.T + translation
        dist, nn = tree.query(current)
        rotation, translation = _kabsch(pts_m, pts_f[nn])
        new_rms = math.sqrt(
            np.mean(np.sum((pts_m @ rotation.T + translation - pts_f[nn]) ** 2, axis=1))
        )
        if new_rms > rms + 1e-15:
            worse_streak += 1
            if worse_streak >= 5:
                raise AlignmentError(
                    f"ICP residual increased for {worse_streak} consecutive iterations"
                )
        else:
            worse_streak = 0
        improvement = rms - new_rms
        rms = new_rms
        if 0 <= improvement < tolerance:
            break

    aligned = moving.transformed(rotation, translation)
    return AlignResult(rotation, translation, aligned, rms, iterations)


# ---------------------------------------------------------------------------
# Sampled symmetric distances
# ---------------------------------------------------------------------------

def mesh_distance(a: TriMesh, b: TriMesh, n: int = 100_000, seed: int = 0) -> DistanceReport:
    """Symmetric sampled RMS and Hausdorff distances between two meshes.

    ``n`` points are sampled on each mesh and measured to the other; RMS
    pools the squared distances of both directions, Hausdorff takes the
    larger directed maximum.  Relative values divide by the diagonal of the
    combined axis-aligned bounding box.
    """
    d_ab = MeshBVH(b).query(surface_sample(a, n, seed))
    d_ba = MeshBVH(a).query(surface_sample(b, n, seed + 1))
    mean_sq = math.fsum((float(np.dot(d_ab, d_ab)), float(np.dot(d_ba, d_ba)))) / (2 * n)
    rms = math.sqrt(mean_sq)
    hausdorff = max(float(d_ab.max()), float(d_ba.max()))

    lo = np.minimum(a.bounding_box()[0], b.bounding_box()[0])
    hi = np.maximum(a.bounding_box()[1], b.bounding_box()[1])
    diagonal = float(np.linalg.norm(hi - lo))

    report = DistanceReport(
        rms_mm=rms,
        hausdorff_mm=hausdorff,
        rms_relative=rms / diagonal,
        hausdorff_relative=hausdorff / diagonal,
        sample_count=2 * n,
        bbox_diagonal_mm=diagonal,
    )
    report.validate()
    return report


# ---------------------------------------------------------------------------
# Binary STL
# ---------------------------------------------------------------------------

def save_stl(mesh: TriMesh, path) -> None:
    """Write little-endian binary STL (80-byte header, 50-byte records)."""
    mesh.validate()
    a, b, c = mesh.corners
    normals = np.cross(b - a, c - a)
    lengths = np.linalg.norm(normals, axis=1)
    safe = lengths > 0
    normals[safe] /= lengths[safe, None]
    normals[~safe] = 0.0

    record = np.zeros(len(a), dtype=[("n", "<3f4"), ("a", "<3f4"), ("b", "<3f4"),
                                     ("c", "<3f4"), ("attr", "<u2")])
    record["n"], record["a"], record["b"], record["c"] = normals, a, b, c
    with open(path, "wb") as f:
        f.write(b"osteoprint binary STL".ljust(80, b"\x00"))
        f.write(struct.pack("<I", len(a)))
        f.write(record.tobytes())


def load_stl(path) -> TriMesh:
    """Read binary STL, merging exactly coincident vertices back to indices."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 84:
        raise MeshIOError(f"{path}: truncated header at byte {len(raw)}")
    (count,) = struct.unpack_from("<I", raw, 80)
    expected = 84 + 50 * count
    if len(raw) != expected:
        raise MeshIOError(
            f"{path}: expected {expected} bytes for {count} triangles, "
            f"got {len(raw)} (mismatch at byte {min(len(raw), expected)})"
        )
    record = np.frombuffer(raw, dtype=[("n", "<3f4"), ("a", "<3f4"), ("b", "<3f4"),
                                       ("c", "<3f4"), ("attr", "<u2")],
                           count=count, offset=84)
    corners = np.stack([record["a"], record["b"], record["c"]], axis=1).reshape(-1, 3)
    vertices, inverse = np.unique(corners.astype(np.float64), axis=0, return_inverse=True)
    mesh = TriMesh(vertices, inverse.reshape(-1, 3).astype(np.int64))
    mesh.validate()
    return mesh
