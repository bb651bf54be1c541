"""Triangle meshes, point clouds, ray casting and mesh validity checks.

Coordinates are right-handed with Z up and the ground plane at z=0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

import numba
import numpy as np

RAY_EPS = 1e-6
MIN_FACE_AREA = 1e-12
DEFAULT_ALBEDO = 0.8


class MeshError(ValueError):
    pass


class MeshFormatError(MeshError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class UnsupportedFaceError(MeshFormatError):
    pass


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray
    face_albedo: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.face_albedo is None:
            alb = np.full(len(f), DEFAULT_ALBEDO)
        else:
            alb = np.asarray(self.face_albedo, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(v)):
            raise MeshError("non-finite vertex coordinates")
        if len(f) and (f.min() < 0 or f.max() >= len(v)):
            raise MeshError(f"face index out of range for {len(v)} vertices")
        if len(alb) != len(f):
            raise MeshError(f"face_albedo has {len(alb)} entries for {len(f)} faces")
        if len(alb) and (alb.min() < 0.0 or alb.max() > 1.0):
            raise MeshError("face_albedo must lie in [0, 1]")
        if len(f):
            areas = _face_areas(v, f)
            bad = np.flatnonzero(areas <= MIN_FACE_AREA)
            if len(bad):
                raise MeshError(f"zero-area face {int(bad[0])} (area {areas[bad[0]]:.3g})")
        object.__setattr__(self, "vertices", _frozen(v))
        object.__setattr__(self, "faces", _frozen(f))
        object.__setattr__(self, "face_albedo", _frozen(alb))

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def face_areas(self) -> np.ndarray:
        return _face_areas(self.vertices, self.faces)

    def face_normals(self) -> np.ndarray:
        tri = self.vertices[self.faces]
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    def surface_area(self) -> float:
        return float(self.face_areas().sum())

    def signed_volume(self) -> float:
        tri = self.vertices[self.faces]
        return float(np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])).sum() / 6.0)

    def translated(self, offset) -> "Mesh":
        return Mesh(self.vertices + np.asarray(offset, dtype=np.float64), self.faces, self.face_albedo)

    def with_albedo(self, albedo) -> "Mesh":
        return Mesh(self.vertices, self.faces, albedo)


def _face_areas(v: np.ndarray, f: np.ndarray) -> np.ndarray:
    tri = v[f]
    return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)


def merge_meshes(meshes: list[Mesh]) -> Mesh:
    """Concatenate meshes without welding vertices (shells stay separate)."""
    verts, faces, albedo = [], [], []
    offset = 0
    for m in meshes:
        verts.append(m.vertices)
        faces.append(m.faces + offset)
        albedo.append(m.face_albedo)
        offset += m.n_vertices
    return Mesh(np.concatenate(verts), np.concatenate(faces), np.concatenate(albedo))


_BOX_FACES = np.array([[0, 2, 1], [0, 3, 2], [4, 5, 6], [4, 6, 7], [0, 1, 5], [0, 5, 4],
                       [2, 3, 7], [2, 7, 6], [1, 2, 6], [1, 6, 5], [3, 0, 4], [3, 4, 7]])


def box_mesh(lo, hi, albedo: float = 0.8) -> Mesh:
    """Closed axis-aligned box with outward faces."""
    (x0, y0, z0), (x1, y1, z1) = lo, hi
    v = np.array([[x0, y0, z0], [x1, y0, z0], [x1, y1, z0], [x0, y1, z0],
                  [x0, y0, z1], [x1, y0, z1], [x1, y1, z1], [x0, y1, z1]], dtype=np.float64)
    return Mesh(v, _BOX_FACES.copy(), np.full(12, float(albedo)))


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    normals: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(p)):
            raise ValueError("point cloud contains non-finite coordinates")
        object.__setattr__(self, "points", _frozen(p))
        if self.normals is not None:
            n = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(n) != len(p):
                raise ValueError("normals must match points")
            object.__setattr__(self, "normals", _frozen(n))

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class Aabb:
    min: tuple[float, float, float]
    max: tuple[float, float, float]

    def __post_init__(self):
        lo = tuple(float(x) for x in self.min)
        hi = tuple(float(x) for x in self.max)
        if any(a > b for a, b in zip(lo, hi)):
            raise ValueError(f"Aabb min {lo} exceeds max {hi}")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (np.array(self.min) + np.array(self.max))

    @property
    def extent(self) -> np.ndarray:
        return np.array(self.max) - np.array(self.min)

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.extent))


def bounding_box(mesh: Mesh) -> Aabb:
    if mesh.n_vertices == 0 or mesh.n_faces == 0:
        raise MeshError("empty mesh has no bounding box")
    return Aabb(tuple(mesh.vertices.min(axis=0)), tuple(mesh.vertices.max(axis=0)))


# --------------------------------------------------------------------------
# Mesh text format
# --------------------------------------------------------------------------

def load_mesh(path) -> Mesh:
    """Read the Wavefront-style triangle format (``v``/``f`` lines, 1-based)."""
    verts: list[tuple[float, float, float]] = []
    faces: list[tuple[int, int, int]] = []
    albedo: list[float] = []
    current = DEFAULT_ALBEDO
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                tokens = line[1:].split()
                if tokens and tokens[0] == "albedo":
                    try:
                        current = float(tokens[1])
                    except (IndexError, ValueError):
                        raise MeshFormatError("malformed albedo comment", lineno) from None
                    if not 0.0 <= current <= 1.0:
                        raise MeshFormatError(f"albedo {current} outside [0, 1]", lineno)
                continue
            tokens = line.split()
            tag = tokens[0]
            if tag == "v":
                if len(tokens) < 4:
                    raise MeshFormatError("vertex needs three coordinates", lineno)
                try:
                    verts.append((float(tokens[1]), float(tokens[2]), float(tokens[3])))
                except ValueError:
                    raise MeshFormatError(f"bad vertex coordinate in {line!r}", lineno) from None
            elif tag == "f":
                if len(tokens) != 4:
                    raise UnsupportedFaceError(f"only triangles are supported, got {len(tokens) - 1} vertices", lineno)
                try:
                    idx = tuple(int(t.split("/")[0]) for t in tokens[1:])
                except ValueError:
                    raise MeshFormatError(f"bad face index in {line!r}", lineno) from None
                for i in idx:
                    if i < 1 or i > len(verts):
                        raise MeshFormatError(f"face references vertex {i} but only {len(verts)} defined", lineno)
                faces.append(tuple(i - 1 for i in idx))
                albedo.append(current)
            elif tag in ("vn", "vt", "o", "g", "s", "usemtl", "mtllib"):
                continue
            else:
                raise MeshFormatError(f"unknown record {tag!r}", lineno)
    if not faces:
        raise MeshFormatError("no faces in file")
    try:
        return Mesh(np.array(verts), np.array(faces), np.array(albedo))
    except MeshError as exc:
        raise MeshFormatError(str(exc)) from exc


def save_mesh(mesh: Mesh, path) -> None:
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    current = None
    for (a, b, c), alb in zip(mesh.faces.tolist(), mesh.face_albedo.tolist()):
        if alb != current:
            lines.append(f"# albedo {alb!r}")
            current = alb
        lines.append(f"f {a + 1} {b + 1} {c + 1}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_ply(cloud: PointCloud, path) -> None:
    header = ["ply", "format ascii 1.0", f"element vertex {len(cloud)}",
              "property float x", "property float y", "property float z", "end_header"]
    body = [f"{x:.6f} {y:.6f} {z:.6f}" for x, y, z in cloud.points.tolist()]
    Path(path).write_text("\n".join(header + body) + "\n", encoding="ascii")


def read_ply(path) -> PointCloud:
    with open(path, encoding="ascii") as fh:
        if fh.readline().strip() != "ply":
            raise MeshFormatError("not a PLY file", 1)
        n = None
        lineno = 1
        for line in fh:
            lineno += 1
            tokens = line.split()
            if tokens[:1] == ["format"] and tokens[1:2] != ["ascii"]:
                raise MeshFormatError("only ASCII PLY is supported", lineno)
            if tokens[:2] == ["element", "vertex"]:
                n = int(tokens[2])
            if tokens[:1] == ["end_header"]:
                break
        if n is None:
            raise MeshFormatError("PLY header lacks a vertex element")
        pts = np.loadtxt(fh, dtype=np.float64, max_rows=n, ndmin=2) if n else np.zeros((0, 3))
    if len(pts) != n:
        raise MeshFormatError(f"expected {n} vertices, found {len(pts)}")
    return PointCloud(pts[:, :3])


# --------------------------------------------------------------------------
# Surface sampling
# --------------------------------------------------------------------------

def sample_surface(mesh: Mesh, n: int, seed: int, face_mask: np.ndarray | None = None) -> PointCloud:
    """Draw ``n`` points uniformly by area; normals are the face normals."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if mesh.n_faces == 0:
        raise MeshError("cannot sample an empty mesh")
    rng = np.random.default_rng(seed)
    areas = mesh.face_areas()
    if face_mask is not None:
        areas = np.where(face_mask, areas, 0.0)
        if areas.sum() <= 0:
            raise MeshError("face mask selects no surface")
    face = rng.choice(mesh.n_faces, size=n, p=areas / areas.sum())
    pts = _barycentric_points(mesh, face, rng.random((n, 2)))
    return PointCloud(pts, mesh.face_normals()[face])


def _barycentric_points(mesh: Mesh, face: np.ndarray, r: np.ndarray) -> np.ndarray:
    s = np.sqrt(r[:, 0])
    w0 = 1.0 - s
    w1 = s * (1.0 - r[:, 1])
    w2 = s * r[:, 1]
    tri = mesh.vertices[mesh.faces[face]]
    return w0[:, None] * tri[:, 0] + w1[:, None] * tri[:, 1] + w2[:, None] * tri[:, 2]


def hemisphere_directions(count: int) -> np.ndarray:
    """Fibonacci-spiral unit vectors covering the +z hemisphere."""
    i = np.arange(count) + 0.5
    z = 1.0 - i / count
    r = np.sqrt(1.0 - z * z)
    ang = math.pi * (3.0 - math.sqrt(5.0)) * i
    return np.stack([r * np.cos(ang), r * np.sin(ang), z], axis=1)


def _tangent_frames(normals: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    helper = np.where(np.abs(normals[:, 2:3]) < 0.9, [[0.0, 0.0, 1.0]], [[1.0, 0.0, 0.0]])
    t1 = np.cross(helper, normals)
    t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
    return t1, np.cross(normals, t1)


def exposed_mask(accel: "RayAccel", points: np.ndarray, normals: np.ndarray,
                 n_dirs: int = 48, ground_z: float = 0.0) -> np.ndarray:
    """True for surface points from which some ray reaches open space.

    A ray counts as escaping when it misses the mesh and leaves the mesh's
    bounding sphere above the ground plane. Faces resting on the ground and
    faces buried inside overlapping shells come out False.
    """
    box = accel.bounds
    center = box.center
    radius = 0.5 * box.diagonal * 1.05
    dirs_local = hemisphere_directions(n_dirs)
    t1, t2 = _tangent_frames(normals)
    exposed = np.zeros(len(points), dtype=bool)
    origins = points + normals * 1e-4
    for d in dirs_local:
        todo = ~exposed
        if not todo.any():
            break
        o = origins[todo]
        dirs = d[0] * t1[todo] + d[1] * t2[todo] + d[2] * normals[todo]
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        t, _ = raycast_batch(accel, o, dirs)
        # parameter where the ray leaves the bounding sphere
        oc = o - center
        b = np.einsum("ij,ij->i", oc, dirs)
        c = np.einsum("ij,ij->i", oc, oc) - radius * radius
        t_exit = -b + np.sqrt(np.maximum(b * b - c, 0.0))
        z_exit = o[:, 2] + t_exit * dirs[:, 2]
        ok = np.isinf(t) & (z_exit >= ground_z)
        idx = np.flatnonzero(todo)
        exposed[idx[ok]] = True
    return exposed


def sample_exposed_surface(mesh: Mesh, n: int, seed: int, accel: "RayAccel | None" = None,
                           n_dirs: int = 48, max_rounds: int = 50) -> PointCloud:
    """Area-uniform samples restricted to the externally reachable surface."""
    accel = accel if accel is not None else build_accel(mesh)
    rng = np.random.default_rng(seed)
    areas = mesh.face_areas()
    p = areas / areas.sum()
    normals_all = mesh.face_normals()
    kept_p, kept_n = [], []
    have = 0
    for _ in range(max_rounds):
        batch = max(n - have, 256) * 2
        face = rng.choice(mesh.n_faces, size=batch, p=p)
        pts = _barycentric_points(mesh, face, rng.random((batch, 2)))
        nrm = normals_all[face]
        keep = exposed_mask(accel, pts, nrm, n_dirs=n_dirs)
        kept_p.append(pts[keep])
        kept_n.append(nrm[keep])
        have += int(keep.sum())
        if have >= n:
            break
    else:
        raise MeshError("could not find enough exposed surface samples")
    return PointCloud(np.concatenate(kept_p)[:n], np.concatenate(kept_n)[:n])


# --------------------------------------------------------------------------
# Ray casting
# --------------------------------------------------------------------------

class Hit(NamedTuple):
    t: float
    face: int
    normal: np.ndarray


@dataclass(frozen=True, eq=False)
class RayAccel:
    """Flattened bounding-volume hierarchy over a mesh (read-only)."""

    mesh: Mesh
    bounds: Aabb
    node_lo: np.ndarray
    node_hi: np.ndarray
    node_left: np.ndarray    # child index, -1 for leaves
    node_right: np.ndarray
    node_start: np.ndarray   # leaves: first slot in tri_* arrays
    node_count: np.ndarray
    tri_v0: np.ndarray
    tri_e1: np.ndarray
    tri_e2: np.ndarray
    tri_face: np.ndarray
    face_normals: np.ndarray


LEAF_SIZE = 4


def build_accel(mesh: Mesh) -> RayAccel:
    """Median-split BVH; answers match a brute-force scan of all faces."""
    if mesh.n_faces == 0:
        raise MeshError("cannot build an accelerator for an empty mesh")
    tri = mesh.vertices[mesh.faces]
    lo_t = tri.min(axis=1)
    hi_t = tri.max(axis=1)
    cen = tri.mean(axis=1)

    node_lo, node_hi, left, right, start, count = [], [], [], [], [], []
    order: list[int] = []

    def new_node() -> int:
        node_lo.append(None); node_hi.append(None)
        left.append(-1); right.append(-1); start.append(0); count.append(0)
        return len(left) - 1

    root = new_node()
    stack = [(root, np.arange(mesh.n_faces))]
    while stack:
        node, ids = stack.pop()
        node_lo[node] = lo_t[ids].min(axis=0)
        node_hi[node] = hi_t[ids].max(axis=0)
        if len(ids) <= LEAF_SIZE:
            start[node] = len(order)
            count[node] = len(ids)
            order.extend(ids.tolist())
            continue
        c = cen[ids]
        axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
        srt = ids[np.argsort(c[:, axis], kind="stable")]
        half = len(srt) // 2
        l_node, r_node = new_node(), new_node()
        left[node], right[node] = l_node, r_node
        stack.append((r_node, srt[half:]))
        stack.append((l_node, srt[:half]))

    order_a = np.array(order, dtype=np.int64)
    t = tri[order_a]
    return RayAccel(
        mesh=mesh,
        bounds=bounding_box(mesh),
        node_lo=_frozen(np.array(node_lo, dtype=np.float64)),
        node_hi=_frozen(np.array(node_hi, dtype=np.float64)),
        node_left=_frozen(np.array(left, dtype=np.int64)),
        node_right=_frozen(np.array(right, dtype=np.int64)),
        node_start=_frozen(np.array(start, dtype=np.int64)),
        node_count=_frozen(np.array(count, dtype=np.int64)),
        tri_v0=_frozen(t[:, 0].copy()),
        tri_e1=_frozen(t[:, 1] - t[:, 0]),
        tri_e2=_frozen(t[:, 2] - t[:, 0]),
        tri_face=_frozen(order_a),
        face_normals=_frozen(mesh.face_normals()),
    )


@numba.njit(cache=True, error_model="numpy")
def _intersect_tri(ox, oy, oz, dx, dy, dz, v0, e1, e2):
    px = dy * e2[2] - dz * e2[1]
    py = dz * e2[0] - dx * e2[2]
    pz = dx * e2[1] - dy * e2[0]
    det = e1[0] * px + e1[1] * py + e1[2] * pz
    if abs(det) < 1e-14:
        return np.inf
    inv = 1.0 / det
    tx = ox - v0[0]
    ty = oy - v0[1]
    tz = oz - v0[2]
    u = (tx * px + ty * py + tz * pz) * inv
    if u < 0.0 or u > 1.0:
        return np.inf
    qx = ty * e1[2] - tz * e1[1]
    qy = tz * e1[0] - tx * e1[2]
    qz = tx * e1[1] - ty * e1[0]
    v = (dx * qx + dy * qy + dz * qz) * inv
    if v < 0.0 or u + v > 1.0:
        return np.inf
    return (e2[0] * qx + e2[1] * qy + e2[2] * qz) * inv


@numba.njit(cache=True, error_model="numpy")
def _traverse(origins, dirs, node_lo, node_hi, node_left, node_right, node_start,
              node_count, tri_v0, tri_e1, tri_e2, tri_face, eps, t_out, f_out):
    stack = np.empty(128, dtype=np.int64)
    for r in range(origins.shape[0]):
        ox, oy, oz = origins[r, 0], origins[r, 1], origins[r, 2]
        dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        ix = 1.0 / dx if dx != 0.0 else 1e300
        iy = 1.0 / dy if dy != 0.0 else 1e300
        iz = 1.0 / dz if dz != 0.0 else 1e300
        best = np.inf
        best_face = -1
        sp = 0
        stack[sp] = 0
        sp += 1
        while sp > 0:
            sp -= 1
            node = stack[sp]
            t0 = (node_lo[node, 0] - ox) * ix
            t1 = (node_hi[node, 0] - ox) * ix
            tmin = min(t0, t1)
            tmax = max(t0, t1)
            t0 = (node_lo[node, 1] - oy) * iy
            t1 = (node_hi[node, 1] - oy) * iy
            tmin = max(tmin, min(t0, t1))
            tmax = min(tmax, max(t0, t1))
            t0 = (node_lo[node, 2] - oz) * iz
            t1 = (node_hi[node, 2] - oz) * iz
            tmin = max(tmin, min(t0, t1))
            tmax = min(tmax, max(t0, t1))
            # slack keeps flat boxes and boundary-grazing rays conservative
            slack = 1e-9 * (1.0 + abs(tmax))
            if tmax + slack < max(tmin, 0.0) or tmin > best + slack:
                continue
            if node_left[node] < 0:
                s = node_start[node]
                for k in range(s, s + node_count[node]):
                    t = _intersect_tri(ox, oy, oz, dx, dy, dz, tri_v0[k], tri_e1[k], tri_e2[k])
                    if t > eps and (t < best or (t == best and tri_face[k] < best_face)):
                        best = t
                        best_face = tri_face[k]
            else:
                stack[sp] = node_left[node]
                sp += 1
                stack[sp] = node_right[node]
                sp += 1
        t_out[r] = best
        f_out[r] = best_face


def raycast_batch(accel: RayAccel, origins: np.ndarray, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest hits for many rays: distances (inf on miss) and face ids (-1)."""
    o = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
    t = np.empty(len(o))
    f = np.empty(len(o), dtype=np.int64)
    _traverse(o, d, accel.node_lo, accel.node_hi, accel.node_left, accel.node_right,
              accel.node_start, accel.node_count, accel.tri_v0, accel.tri_e1, accel.tri_e2,
              accel.tri_face, RAY_EPS, t, f)
    return t, f


def facing_normals(accel: RayAccel, faces: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    n = accel.face_normals[np.maximum(faces, 0)].copy()
    flip = np.einsum("ij,ij->i", n, dirs) > 0
    n[flip] *= -1.0
    n[faces < 0] = 0.0
    return n


def raycast(accel: RayAccel, origin, direction) -> Optional[Hit]:
    d = np.asarray(direction, dtype=np.float64)
    if abs(np.linalg.norm(d) - 1.0) > 1e-9:
        raise ValueError("ray direction must be a unit vector")
    t, f = raycast_batch(accel, np.asarray(origin, dtype=np.float64)[None], d[None])
    if not np.isfinite(t[0]):
        return None
    return Hit(float(t[0]), int(f[0]), facing_normals(accel, f, d[None])[0])


# --------------------------------------------------------------------------
# Validity
# --------------------------------------------------------------------------

class WatertightReport(NamedTuple):
    is_watertight: bool
    boundary_edges: int
    nonmanifold_edges: int
    inconsistent_edges: int


def watertight_check(mesh: Mesh) -> WatertightReport:
    """Every undirected edge must bound exactly two faces traversing it in opposite directions."""
    f = mesh.faces
    directed = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    undirected = np.sort(directed, axis=1)
    keys, inverse, counts = np.unique(undirected, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    boundary = int((counts == 1).sum())
    nonmanifold = int((counts > 2).sum())
    # for manifold edges, the two uses must run in opposite directions
    forward = (directed[:, 0] < directed[:, 1]).astype(np.int64)
    fwd_count = np.bincount(inverse, weights=forward, minlength=len(keys))
    inconsistent = int(((counts == 2) & (fwd_count != 1)).sum())
    ok = boundary == 0 and nonmanifold == 0 and inconsistent == 0 and mesh.n_faces > 0
    return WatertightReport(ok, boundary, nonmanifold, inconsistent)
