"""Triangle meshes: OBJ subset I/O, BVH ray queries, and surface sampling.

The OBJ subset is `v`, `vn`, and `f` records (polygons fan-triangulated,
`v//vn` and `v/vt/vn` index forms accepted, texture indices ignored,
negative indices relative to the current count). Missing normals are
replaced by area-weighted vertex normals. Zero-area triangles are dropped
at load.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ObjParseError
from .sampling import RngStream, _as_rng

_DET_EPS = 1e-9  # Moller-Trumbore determinant cutoff


@dataclass
class Material:
    """Constant surface material: linear albedo, metalness, roughness."""

    albedo: np.ndarray
    metalness: float = 0.0
    roughness: float = 0.5

    def __post_init__(self):
        self.albedo = np.asarray(self.albedo, dtype=np.float64).reshape(3)
        if np.any(self.albedo < 0) or np.any(self.albedo > 1):
            raise ValueError("albedo must be in [0, 1]")
        if not 0.0 <= self.metalness <= 1.0:
            raise ValueError("metalness must be in [0, 1]")
        if not 0.0 <= self.roughness <= 1.0:
            raise ValueError("roughness must be in [0, 1]")


@dataclass
class MaterialTable:
    """Per-vertex material attributes, interpolated at hit points."""

    albedo: np.ndarray  # (n_vertices, 3)
    metalness: np.ndarray  # (n_vertices,)
    roughness: np.ndarray  # (n_vertices,)


@dataclass
class SurfacePoint:
    position: np.ndarray
    normal: np.ndarray
    material: Material


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_min: float = 1e-6
    t_max: float = np.inf


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (n, 3) float64
    normals: np.ndarray  # (n, 3) float64, unit
    triangles: np.ndarray  # (m, 3) int32 vertex indices

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int32).reshape(-1, 3)
        if len(self.vertices) == 0 or len(self.triangles) == 0:
            raise ValueError("mesh has no geometry")
        if len(self.normals) != len(self.vertices):
            raise ValueError("one normal per vertex required")
        if self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices):
            raise ValueError("triangle index out of range")
        norms = np.linalg.norm(self.normals, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-4):
            raise ValueError("normals must be unit length")

    def triangle_areas(self) -> np.ndarray:
        v0, v1, v2 = (self.vertices[self.triangles[:, k]] for k in range(3))
        return 0.5 * np.linalg.norm(np.cross(v1 - v0, v2 - v0), axis=1)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def diagonal(self) -> float:
        lo, hi = self.bounds()
        return float(np.linalg.norm(hi - lo))

    def default_t_min(self) -> float:
        """Shadow/secondary ray offset: 1e-3 of the scene diagonal."""
        return 1e-3 * self.diagonal()


def _area_weighted_normals(vertices, triangles) -> np.ndarray:
    normals = np.zeros_like(vertices)
    v0, v1, v2 = (vertices[triangles[:, k]] for k in range(3))
    face = np.cross(v1 - v0, v2 - v0)  # length = 2 * area
    for k in range(3):
        np.add.at(normals, triangles[:, k], face)
    lens = np.linalg.norm(normals, axis=1, keepdims=True)
    lens[lens == 0] = 1.0
    return normals / lens


def _drop_degenerate(vertices, triangles) -> np.ndarray:
    v0, v1, v2 = (vertices[triangles[:, k]] for k in range(3))
    area2 = np.linalg.norm(np.cross(v1 - v0, v2 - v0), axis=1)
    scale = max(float(np.abs(vertices).max()), 1.0)
    keep = area2 > 1e-12 * scale * scale
    return triangles[keep]


def load_obj(path) -> TriangleMesh:
    """Parse the OBJ subset; raises ObjParseError with a line number."""
    vertices: list[list[float]] = []
    normals: list[list[float]] = []
    faces: list[tuple[int, int, int]] = []
    face_normals: list[tuple[int, int, int] | None] = []

    def vertex_index(token: str, lineno: int) -> tuple[int, int | None]:
        parts = token.split("/")
        try:
            vi = int(parts[0])
            ni = int(parts[2]) if len(parts) >= 3 and parts[2] else None
        except ValueError:
            raise ObjParseError(f"line {lineno}: bad face token {token!r}") from None
        vi = vi - 1 if vi > 0 else len(vertices) + vi
        if ni is not None:
            ni = ni - 1 if ni > 0 else len(normals) + ni
        if not 0 <= vi < len(vertices):
            raise ObjParseError(f"line {lineno}: vertex index {parts[0]} out of range")
        if ni is not None and not 0 <= ni < len(normals):
            raise ObjParseError(f"line {lineno}: normal index out of range")
        return vi, ni

    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            tag, *rest = line.split()
            if tag == "v":
                if len(rest) < 3:
                    raise ObjParseError(f"line {lineno}: vertex needs 3 coordinates")
                try:
                    vertices.append([float(x) for x in rest[:3]])
                except ValueError:
                    raise ObjParseError(f"line {lineno}: bad vertex coordinate") from None
            elif tag == "vn":
                if len(rest) < 3:
                    raise ObjParseError(f"line {lineno}: normal needs 3 coordinates")
                try:
                    normals.append([float(x) for x in rest[:3]])
                except ValueError:
                    raise ObjParseError(f"line {lineno}: bad normal coordinate") from None
            elif tag == "f":
                if len(rest) < 3:
                    raise ObjParseError(f"line {lineno}: face needs >= 3 vertices")
                idx = [vertex_index(tok, lineno) for tok in rest]
                for a, b in zip(idx[1:-1], idx[2:]):  # fan triangulation
                    faces.append((idx[0][0], a[0], b[0]))
                    if idx[0][1] is not None and a[1] is not None and b[1] is not None:
                        face_normals.append((idx[0][1], a[1], b[1]))
                    else:
                        face_normals.append(None)
            # other tags (vt, o, g, s, usemtl, mtllib) are ignored

    if not vertices or not faces:
        raise ObjParseError("no geometry in file")
    verts = np.asarray(vertices, dtype=np.float64)
    tris = np.asarray(faces, dtype=np.int32)

    if normals and all(fn is not None for fn in face_normals):
        # Re-index so vertex i carries the normal the faces reference for it.
        # Conflicting references keep the last one seen; fine for the subset.
        vert_norm = np.zeros_like(verts)
        seen = np.zeros(len(verts), dtype=bool)
        nrm = np.asarray(normals, dtype=np.float64)
        for tri, fn in zip(tris, face_normals):
            for vi, ni in zip(tri, fn):
                vert_norm[vi] = nrm[ni]
                seen[vi] = True
        if not seen.all():
            vert_norm[~seen] = _area_weighted_normals(verts, tris)[~seen]
        lens = np.linalg.norm(vert_norm, axis=1, keepdims=True)
        lens[lens == 0] = 1.0
        vert_norm = vert_norm / lens
    else:
        vert_norm = _area_weighted_normals(verts, tris)

    tris = _drop_degenerate(verts, tris)
    if len(tris) == 0:
        raise ObjParseError("mesh is empty after degenerate-triangle cleanup")
    return TriangleMesh(verts, vert_norm, tris)


def save_obj(mesh: TriangleMesh, path) -> None:
    """Write vertices, normals, and v//vn faces."""
    with open(path, "w") as f:
        for v in mesh.vertices:
            f.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for n in mesh.normals:
            f.write(f"vn {n[0]:.9g} {n[1]:.9g} {n[2]:.9g}\n")
        for t in mesh.triangles:
            f.write(f"f {t[0]+1}//{t[0]+1} {t[1]+1}//{t[1]+1} {t[2]+1}//{t[2]+1}\n")


# ---------------------------------------------------------------------------
# Primitive constructors (test fixtures and demo scenes)

def uv_sphere(center=(0, 0, 0), radius=1.0, n_theta=32, n_phi=64) -> TriangleMesh:
    center = np.asarray(center, dtype=np.float64)
    thetas = np.linspace(0.0, np.pi, n_theta + 1)
    phis = np.linspace(0.0, 2.0 * np.pi, n_phi, endpoint=False)
    verts = []
    for t in thetas:
        for p in phis:
            verts.append(
                [np.sin(t) * np.cos(p), np.cos(t), np.sin(t) * np.sin(p)]
            )
    verts = np.asarray(verts)
    tris = []
    for i in range(n_theta):
        for j in range(n_phi):
            a = i * n_phi + j
            b = i * n_phi + (j + 1) % n_phi
            c = (i + 1) * n_phi + j
            d = (i + 1) * n_phi + (j + 1) % n_phi
            if i > 0:
                tris.append((a, b, c))
            if i < n_theta - 1:
                tris.append((b, d, c))
    normals = verts.copy()  # exact sphere normals
    tris = _drop_degenerate(center + radius * verts, np.asarray(tris, np.int32))
    return TriangleMesh(center + radius * verts, normals, tris)


def cuboid(lo=(-1, -1, -1), hi=(1, 1, 1)) -> TriangleMesh:
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    corners = np.array(
        [[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])]
    )
    quads = [  # outward CCW winding
        (0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1),
        (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3),
    ]
    tris = []
    for a, b, c, d in quads:
        tris.append((a, b, c))
        tris.append((a, c, d))
    normals = _area_weighted_normals(corners, np.asarray(tris, np.int32))
    return TriangleMesh(corners, normals, np.asarray(tris, np.int32))


def quad(p0, p1, p2, p3) -> TriangleMesh:
    """Two-triangle quad with corners in CCW order."""
    verts = np.asarray([p0, p1, p2, p3], dtype=np.float64)
    tris = np.asarray([(0, 1, 2), (0, 2, 3)], np.int32)
    return TriangleMesh(verts, _area_weighted_normals(verts, tris), tris)


# ---------------------------------------------------------------------------
# Intersection

@dataclass
class Hit:
    t: float
    tri_index: int
    position: np.ndarray
    normal: np.ndarray  # interpolated vertex normal, unit
    bary: np.ndarray  # (w0, w1, w2)


def _mt_intersect(origin, direction, v0, e1, e2, t_min, t_max):
    """Moller-Trumbore over packed triangles. Returns (t, u, v) arrays with
    t = inf where there is no valid hit in (t_min, t_max)."""
    p = np.cross(direction[None, :], e2)
    det = np.einsum("ij,ij->i", e1, p)
    valid = np.abs(det) > _DET_EPS
    inv = np.where(valid, 1.0 / np.where(valid, det, 1.0), 0.0)
    tvec = origin[None, :] - v0
    u = np.einsum("ij,ij->i", tvec, p) * inv
    q = np.cross(tvec, e1)
    v = np.dot(q, direction) * inv
    t = np.einsum("ij,ij->i", e2, q) * inv
    ok = valid & (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0) & (t > t_min) & (t < t_max)
    return np.where(ok, t, np.inf), u, v


class Bvh:
    """Median-split BVH over triangle bounds; leaves hold up to 8 triangles."""

    LEAF_SIZE = 8

    def __init__(self, mesh: TriangleMesh):
        self.mesh = mesh
        tris = mesh.triangles
        self._v0 = mesh.vertices[tris[:, 0]]
        self._e1 = mesh.vertices[tris[:, 1]] - self._v0
        self._e2 = mesh.vertices[tris[:, 2]] - self._v0

        corners = mesh.vertices[tris]  # (m, 3, 3)
        tri_lo = corners.min(axis=1)
        tri_hi = corners.max(axis=1)
        centroids = 0.5 * (tri_lo + tri_hi)
        pad = 1e-9 * max(mesh.diagonal(), 1.0) + 1e-12

        order = np.arange(len(tris))
        nodes_lo, nodes_hi, nodes_left, nodes_right = [], [], [], []
        nodes_start, nodes_count = [], []

        def new_node():
            for lst in (nodes_lo, nodes_hi):
                lst.append(None)
            for lst in (nodes_left, nodes_right, nodes_start, nodes_count):
                lst.append(-1)
            return len(nodes_lo) - 1

        stack = [(new_node(), 0, len(tris))]
        while stack:
            node, lo, hi = stack.pop()
            idx = order[lo:hi]
            bmin = tri_lo[idx].min(axis=0) - pad
            bmax = tri_hi[idx].max(axis=0) + pad
            nodes_lo[node] = bmin
            nodes_hi[node] = bmax
            if hi - lo <= self.LEAF_SIZE:
                nodes_start[node] = lo
                nodes_count[node] = hi - lo
                continue
            axis = int(np.argmax(bmax - bmin))
            mid = (hi - lo) // 2
            sel = np.argpartition(centroids[idx, axis], mid)
            order[lo:hi] = idx[sel]
            left, right = new_node(), new_node()
            nodes_left[node] = left
            nodes_right[node] = right
            stack.append((left, lo, lo + mid))
            stack.append((right, lo + mid, hi))

        self._order = order
        self._lo = np.asarray(nodes_lo)
        self._hi = np.asarray(nodes_hi)
        self._left = np.asarray(nodes_left)
        self._right = np.asarray(nodes_right)
        self._start = np.asarray(nodes_start)
        self._count = np.asarray(nodes_count)
        # pack leaf triangle data in traversal order for contiguous tests
        self._pv0 = self._v0[order]
        self._pe1 = self._e1[order]
        self._pe2 = self._e2[order]

    def _slab_hit(self, node, o, inv, parallel, t_min, t_max) -> bool:
        lo = self._lo[node]
        hi = self._hi[node]
        tn, tf = t_min, t_max
        for k in range(3):
            if parallel[k]:
                if o[k] < lo[k] or o[k] > hi[k]:
                    return False
            else:
                a = (lo[k] - o[k]) * inv[k]
                b = (hi[k] - o[k]) * inv[k]
                if a > b:
                    a, b = b, a
                if a > tn:
                    tn = a
                if b < tf:
                    tf = b
                if tn > tf:
                    return False
        return True

    def _traverse(self, origin, direction, t_min, t_max, any_hit=False):
        o = np.asarray(origin, dtype=np.float64)
        d = np.asarray(direction, dtype=np.float64)
        parallel = np.abs(d) < 1e-300
        with np.errstate(divide="ignore"):
            inv = np.where(parallel, 0.0, 1.0 / np.where(parallel, 1.0, d))
        best_t = t_max
        best_j = -1
        best_uv = (0.0, 0.0)
        stack = [0]
        while stack:
            node = stack.pop()
            if not self._slab_hit(node, o, inv, parallel, t_min, best_t):
                continue
            cnt = self._count[node]
            if cnt >= 0 and self._left[node] < 0:
                s = self._start[node]
                ts, us, vs = _mt_intersect(
                    o, d, self._pv0[s : s + cnt], self._pe1[s : s + cnt],
                    self._pe2[s : s + cnt], t_min, best_t,
                )
                j = int(np.argmin(ts))
                if ts[j] < best_t:
                    best_t = float(ts[j])
                    best_j = s + j
                    best_uv = (float(us[j]), float(vs[j]))
                    if any_hit:
                        return best_t, best_j, best_uv
            else:
                stack.append(self._right[node])
                stack.append(self._left[node])
        return best_t, best_j, best_uv

    def intersect(self, origin, direction, t_min=1e-6, t_max=np.inf) -> Hit | None:
        """Nearest hit along the ray, or None."""
        t, packed_j, (u, v) = self._traverse(origin, direction, t_min, t_max)
        if packed_j < 0:
            return None
        tri_index = int(self._order[packed_j])
        tri = self.mesh.triangles[tri_index]
        w = np.array([1.0 - u - v, u, v])
        normal = (self.mesh.normals[tri] * w[:, None]).sum(axis=0)
        normal = normal / np.linalg.norm(normal)
        position = np.asarray(origin, dtype=np.float64) + t * np.asarray(
            direction, dtype=np.float64
        )
        return Hit(t=float(t), tri_index=tri_index, position=position, normal=normal, bary=w)


def build_bvh(mesh: TriangleMesh) -> Bvh:
    return Bvh(mesh)


def occluded(bvh: Bvh | None, origin, direction, t_min=1e-6, t_max=np.inf) -> bool:
    """Any-hit query; an empty scene (bvh None) is never occluded."""
    if bvh is None:
        return False
    _, j, _ = bvh._traverse(origin, direction, t_min, t_max, any_hit=True)
    return j >= 0


def occluded_many(bvh: Bvh | None, origin, directions, t_min=1e-6) -> np.ndarray:
    """Vectorized-call convenience: visibility of many rays from one origin."""
    directions = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    if bvh is None:
        return np.zeros(len(directions), dtype=bool)
    return np.array([occluded(bvh, origin, d, t_min) for d in directions])


def intersect_brute_force(mesh: TriangleMesh, origin, direction, t_min=1e-6, t_max=np.inf) -> Hit | None:
    """All-triangles nearest hit; the independent oracle for BVH parity."""
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    v0 = mesh.vertices[mesh.triangles[:, 0]]
    e1 = mesh.vertices[mesh.triangles[:, 1]] - v0
    e2 = mesh.vertices[mesh.triangles[:, 2]] - v0
    ts, us, vs = _mt_intersect(o, d, v0, e1, e2, t_min, t_max)
    j = int(np.argmin(ts))
    if not np.isfinite(ts[j]):
        return None
    tri = mesh.triangles[j]
    w = np.array([1.0 - us[j] - vs[j], us[j], vs[j]])
    normal = (mesh.normals[tri] * w[:, None]).sum(axis=0)
    normal = normal / np.linalg.norm(normal)
    return Hit(t=float(ts[j]), tri_index=j, position=o + ts[j] * d, normal=normal, bary=w)


# ---------------------------------------------------------------------------
# Surface sampling

def sample_surface(mesh: TriangleMesh, count: int, rng, material: Material | MaterialTable | None = None) -> list[SurfacePoint]:
    """Area-weighted uniform surface samples with interpolated unit normals.

    `material` is a constant Material (default mid-gray) or a per-vertex
    MaterialTable interpolated barycentrically.
    """
    gen = _as_rng(rng)
    areas = mesh.triangle_areas()
    p = areas / areas.sum()
    tri_idx = gen.choice(len(areas), size=count, p=p)
    r1 = gen.random(count)
    r2 = gen.random(count)
    su = np.sqrt(r1)
    w0 = 1.0 - su
    w1 = su * (1.0 - r2)
    w2 = su * r2
    w = np.stack([w0, w1, w2], axis=1)

    tris = mesh.triangles[tri_idx]
    pos = np.einsum("nk,nkj->nj", w, mesh.vertices[tris])
    nrm = np.einsum("nk,nkj->nj", w, mesh.normals[tris])
    nrm = nrm / np.linalg.norm(nrm, axis=1, keepdims=True)

    if material is None:
        material = Material(albedo=np.array([0.5, 0.5, 0.5]))
    points = []
    for i in range(count):
        if isinstance(material, MaterialTable):
            vi = tris[i]
            mat = Material(
                albedo=np.clip(w[i] @ material.albedo[vi], 0.0, 1.0),
                metalness=float(np.clip(w[i] @ material.metalness[vi], 0.0, 1.0)),
                roughness=float(np.clip(w[i] @ material.roughness[vi], 0.0, 1.0)),
            )
        else:
            mat = material
        points.append(SurfacePoint(position=pos[i], normal=nrm[i], material=mat))
    return points
