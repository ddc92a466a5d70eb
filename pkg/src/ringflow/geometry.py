"""Triangle meshes on the canonical sphere and diagnostics of their deformed images."""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from . import autodiff as ad
from .autodiff import Tensor

MAX_LEVEL = 8


class MeshError(ValueError):
    pass


@dataclass
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray
    attributes: dict = field(default_factory=dict)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def edges(self) -> np.ndarray:
        return unique_edges(self.faces)

    def euler_characteristic(self) -> int:
        return self.n_vertices - len(self.edges()) + self.n_faces

    def bbox_diagonal(self) -> float:
        return float(np.linalg.norm(self.vertices.max(axis=0) - self.vertices.min(axis=0)))


def unique_edges(faces: np.ndarray) -> np.ndarray:
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    return np.unique(np.sort(e, axis=1), axis=0)


def is_watertight(faces: np.ndarray) -> bool:
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    _, counts = np.unique(np.sort(e, axis=1), axis=0, return_counts=True)
    return bool(np.all(counts == 2))


def is_consistently_oriented(faces: np.ndarray) -> bool:
    """Every directed edge occurs once and its reverse occurs once."""
    d = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    uniq = np.unique(d, axis=0)
    if len(uniq) != len(d):
        return False
    fwd = {tuple(r) for r in d.tolist()}
    return all((b, a) in fwd for a, b in fwd)


def check_mesh(m: Mesh) -> None:
    if not is_watertight(m.faces):
        raise MeshError("mesh is not watertight")
    if not is_consistently_oriented(m.faces):
        raise MeshError("mesh faces are not consistently oriented")


_ICO_T = (1.0 + 5.0 ** 0.5) / 2.0
_ICO_VERTS = np.array([
    [-1, _ICO_T, 0], [1, _ICO_T, 0], [-1, -_ICO_T, 0], [1, -_ICO_T, 0],
    [0, -1, _ICO_T], [0, 1, _ICO_T], [0, -1, -_ICO_T], [0, 1, -_ICO_T],
    [_ICO_T, 0, -1], [_ICO_T, 0, 1], [-_ICO_T, 0, -1], [-_ICO_T, 0, 1],
], dtype=np.float64)
_ICO_FACES = np.array([
    [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
    [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
    [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
    [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
], dtype=np.int64)


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.sqrt(np.sum(v * v, axis=-1, keepdims=True))


def _subdivide(verts: np.ndarray, faces: np.ndarray):
    """Split every triangle in four; existing vertices keep their indices."""
    n = len(verts)
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    key = np.sort(e, axis=1)
    uniq, inverse = np.unique(key, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    mids = _unit(0.5 * (verts[uniq[:, 0]] + verts[uniq[:, 1]]))
    f = len(faces)
    a, b, c = faces[:, 0], faces[:, 1], faces[:, 2]
    ab, bc, ca = n + inverse[:f], n + inverse[f:2 * f], n + inverse[2 * f:]
    new_faces = np.concatenate([
        np.stack([a, ab, ca], 1), np.stack([b, bc, ab], 1),
        np.stack([c, ca, bc], 1), np.stack([ab, bc, ca], 1)])
    return np.concatenate([verts, mids]), new_faces


def random_rotation(seed: int) -> np.ndarray:
    return Rotation.random(random_state=np.random.default_rng(seed)).as_matrix()


def icosphere(level: int, rotation_seed: int | None = None) -> Mesh:
    """Subdivided icosahedron on the unit sphere.

    Vertices of level k are the first 10*4^k+2 vertices of level k+1 (bitwise),
    so meshes at different levels share their coarse vertices.
    """
    if not 0 <= level <= MAX_LEVEL:
        raise MeshError(f"icosphere level must be in [0, {MAX_LEVEL}], got {level}")
    verts, faces = _unit(_ICO_VERTS), _ICO_FACES.copy()
    for _ in range(level):
        verts, faces = _subdivide(verts, faces)
    if rotation_seed is not None:
        verts = _unit(verts @ random_rotation(rotation_seed).T)
    return Mesh(verts, faces)


def canonical_face_order(faces: np.ndarray) -> np.ndarray:
    """Rotate each face so its smallest index leads (orientation kept), then sort rows."""
    faces = np.asarray(faces)
    shift = np.argmin(faces, axis=1)
    idx = (shift[:, None] + np.arange(3)[None, :]) % 3
    rolled = np.take_along_axis(faces, idx, axis=1)
    order = np.lexsort((rolled[:, 2], rolled[:, 1], rolled[:, 0]))
    return rolled[order]


def deform_mesh(net, domain: Mesh) -> Mesh:
    """Push every vertex of ``domain`` through the flow; connectivity is shared."""
    verts = net.evaluate(domain.vertices)
    attrs = dict(domain.attributes)
    attrs["canonical"] = domain.vertices.copy()
    return Mesh(verts, domain.faces.copy(), attrs)


def face_normals_t(verts: Tensor, faces: np.ndarray) -> Tensor:
    """Unnormalized face normals (length = twice the face area)."""
    a, b, c = (ad.take(verts, faces[:, k]) for k in range(3))
    return ad.cross(b - a, c - a)


def vertex_normals_t(verts: Tensor, faces: np.ndarray) -> Tensor:
    """Vertex normals on the tape: unit face normals averaged with corner-angle weights."""
    fn = ad.normalize(face_normals_t(verts, faces), eps=1e-30)
    corners = [ad.take(verts, faces[:, k]) for k in range(3)]
    weighted = []
    for k in range(3):
        a = ad.normalize(corners[(k + 1) % 3] - corners[k], eps=1e-30)
        b = ad.normalize(corners[(k + 2) % 3] - corners[k], eps=1e-30)
        angle = ad.arccos(ad.clamp(ad.dot(a, b), -1.0 + 1e-15, 1.0 - 1e-15))
        weighted.append(ad.mul_rows(fn, angle))
    acc = ad.segment_sum(ad.concat(weighted, axis=0), faces.T.reshape(-1), verts.shape[0])
    return ad.normalize(acc, eps=1e-30)


def vertex_normals(m: Mesh) -> np.ndarray:
    """Unit vertex normals (angle-weighted) of a watertight, oriented mesh."""
    check_mesh(m)
    v = m.vertices
    fn = np.cross(v[m.faces[:, 1]] - v[m.faces[:, 0]], v[m.faces[:, 2]] - v[m.faces[:, 0]])
    area = 0.5 * np.linalg.norm(fn, axis=1)
    bad = np.flatnonzero(area < 1e-12)
    if len(bad):
        raise MeshError(f"degenerate faces (area < 1e-12): {bad.tolist()[:20]}")
    with ad.no_grad():
        return vertex_normals_t(Tensor(v), m.faces).data


# ------------------------------------------------------------ exact predicates

# Shewchuk's static error bound for the 3x3 orientation determinant.
_O3D_ERRBOUND = (7.0 + 56.0 * 2.0 ** -53) * 2.0 ** -53


def _orient3d_float(a, b, c, d):
    """det[b-a, c-a, d-a] and a bound on its rounding error (rows of points)."""
    ad_, bd, cd = a - d, b - d, c - d
    m1 = bd[:, 1] * cd[:, 2] - bd[:, 2] * cd[:, 1]
    m2 = cd[:, 1] * ad_[:, 2] - cd[:, 2] * ad_[:, 1]
    m3 = ad_[:, 1] * bd[:, 2] - ad_[:, 2] * bd[:, 1]
    det = ad_[:, 0] * m1 + bd[:, 0] * m2 + cd[:, 0] * m3
    perm = (np.abs(ad_[:, 0]) * (np.abs(bd[:, 1] * cd[:, 2]) + np.abs(bd[:, 2] * cd[:, 1]))
            + np.abs(bd[:, 0]) * (np.abs(cd[:, 1] * ad_[:, 2]) + np.abs(cd[:, 2] * ad_[:, 1]))
            + np.abs(cd[:, 0]) * (np.abs(ad_[:, 1] * bd[:, 2]) + np.abs(ad_[:, 2] * bd[:, 1])))
    return -det, _O3D_ERRBOUND * perm


def _orient3d_exact(a, b, c, d) -> int:
    a, b, c, d = ([Fraction(float(x)) for x in p] for p in (a, b, c, d))
    u = [b[k] - a[k] for k in range(3)]
    v = [c[k] - a[k] for k in range(3)]
    w = [d[k] - a[k] for k in range(3)]
    det = (u[0] * (v[1] * w[2] - v[2] * w[1]) - u[1] * (v[0] * w[2] - v[2] * w[0])
           + u[2] * (v[0] * w[1] - v[1] * w[0]))
    return (det > 0) - (det < 0)


def orient3d(a, b, c, d) -> int:
    """Exact sign of det[b-a, c-a, d-a] (float filter, rational fallback)."""
    det, err = _orient3d_float(*(np.asarray(p, dtype=np.float64).reshape(1, 3) for p in (a, b, c, d)))
    if abs(det[0]) > err[0]:
        return int(np.sign(det[0]))
    return _orient3d_exact(a, b, c, d)


def _orient2d_exact(a, b, c) -> int:
    a, b, c = ([Fraction(float(x)) for x in p] for p in (a, b, c))
    det = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
    return (det > 0) - (det < 0)


def _segments_intersect_2d(p1, p2, q1, q2) -> bool:
    d1 = _orient2d_exact(q1, q2, p1)
    d2 = _orient2d_exact(q1, q2, p2)
    d3 = _orient2d_exact(p1, p2, q1)
    d4 = _orient2d_exact(p1, p2, q2)
    if d1 * d2 < 0 and d3 * d4 < 0:
        return True

    def on_seg(a, b, p):
        return (min(a[0], b[0]) <= p[0] <= max(a[0], b[0])) and (min(a[1], b[1]) <= p[1] <= max(a[1], b[1]))

    return ((d1 == 0 and on_seg(q1, q2, p1)) or (d2 == 0 and on_seg(q1, q2, p2))
            or (d3 == 0 and on_seg(p1, p2, q1)) or (d4 == 0 and on_seg(p1, p2, q2)))


def _point_in_tri_2d(p, a, b, c) -> bool:
    s = [_orient2d_exact(a, b, p), _orient2d_exact(b, c, p), _orient2d_exact(c, a, p)]
    return all(v >= 0 for v in s) or all(v <= 0 for v in s)


def _drop_axis(t1, t2):
    n = np.cross(t1[1] - t1[0], t1[2] - t1[0])
    keep = [k for k in range(3) if k != int(np.argmax(np.abs(n)))]
    return t1[:, keep], t2[:, keep]


def _coplanar_tris_intersect(t1, t2) -> bool:
    a, b = _drop_axis(t1, t2)
    for i in range(3):
        for j in range(3):
            if _segments_intersect_2d(a[i], a[(i + 1) % 3], b[j], b[(j + 1) % 3]):
                return True
    return _point_in_tri_2d(a[0], *b) or _point_in_tri_2d(b[0], *a)


def _segment_hits_triangle(p, q, tri) -> bool:
    sp = orient3d(tri[0], tri[1], tri[2], p)
    sq = orient3d(tri[0], tri[1], tri[2], q)
    if sp * sq > 0:
        return False
    if sp == 0 and sq == 0:
        a, b = _drop_axis(tri, np.array([p, q]))
        if _point_in_tri_2d(b[0], *a) or _point_in_tri_2d(b[1], *a):
            return True
        return any(_segments_intersect_2d(b[0], b[1], a[k], a[(k + 1) % 3]) for k in range(3))
    s = [orient3d(p, q, tri[0], tri[1]), orient3d(p, q, tri[1], tri[2]), orient3d(p, q, tri[2], tri[0])]
    return all(v >= 0 for v in s) or all(v <= 0 for v in s)


def triangles_intersect(t1: np.ndarray, t2: np.ndarray) -> bool:
    """Exact closed-set intersection test of two 3x3 vertex arrays."""
    t1, t2 = np.asarray(t1, dtype=np.float64), np.asarray(t2, dtype=np.float64)
    s1 = [orient3d(t2[0], t2[1], t2[2], p) for p in t1]
    if all(v > 0 for v in s1) or all(v < 0 for v in s1):
        return False
    s2 = [orient3d(t1[0], t1[1], t1[2], p) for p in t2]
    if all(v > 0 for v in s2) or all(v < 0 for v in s2):
        return False
    if all(v == 0 for v in s1):
        return _coplanar_tris_intersect(t1, t2)
    for a, b in ((0, 1), (1, 2), (2, 0)):
        if _segment_hits_triangle(t1[a], t1[b], t2) or _segment_hits_triangle(t2[a], t2[b], t1):
            return True
    return False


@dataclass
class IntersectionReport:
    count: int
    pairs: list[tuple[int, int]]


def _candidate_pairs(v: np.ndarray, faces: np.ndarray) -> np.ndarray:
    tri = v[faces]
    cen = tri.mean(axis=1)
    rad = np.sqrt(np.max(np.sum((tri - cen[:, None]) ** 2, axis=2), axis=1))
    if len(faces) < 2:
        return np.zeros((0, 2), dtype=np.int64)
    pairs = cKDTree(cen).query_pairs(2.0 * rad.max() * (1 + 1e-9), output_type="ndarray")
    if len(pairs) == 0:
        return pairs.reshape(0, 2)
    i, j = pairs[:, 0], pairs[:, 1]
    lo, hi = tri.min(axis=1), tri.max(axis=1)
    overlap = np.all((lo[i] <= hi[j]) & (lo[j] <= hi[i]), axis=1)
    shared = np.zeros(len(i), dtype=bool)
    for a in range(3):
        for b in range(3):
            shared |= faces[i, a] == faces[j, b]
    pairs = pairs[overlap & ~shared]
    return np.sort(pairs, axis=1)


def count_self_intersections(m: Mesh) -> IntersectionReport:
    """Count non-adjacent (no shared vertex) face pairs that intersect.

    Broad phase: k-d tree on face centroids plus AABB overlap.  Narrow phase:
    orientation predicates, evaluated exactly.
    """
    v, faces = m.vertices, m.faces
    cand = _candidate_pairs(v, faces)
    if len(cand) == 0:
        return IntersectionReport(0, [])
    t1, t2 = v[faces[cand[:, 0]]], v[faces[cand[:, 1]]]
    # Certain separations: one triangle strictly on one side of the other's plane.
    maybe = np.ones(len(cand), dtype=bool)
    for ta, tb in ((t1, t2), (t2, t1)):
        signs = []
        for k in range(3):
            det, err = _orient3d_float(tb[:, 0], tb[:, 1], tb[:, 2], ta[:, k])
            signs.append(np.where(det > err, 1, np.where(det < -err, -1, 0)))
        s = np.stack(signs, 1)
        maybe &= ~(np.all(s == 1, axis=1) | np.all(s == -1, axis=1))
    hits = [tuple(int(x) for x in cand[k]) for k in np.flatnonzero(maybe)
            if triangles_intersect(t1[k], t2[k])]
    hits.sort()
    return IntersectionReport(len(hits), hits)


@dataclass
class FlipReport:
    count: int
    faces: np.ndarray
    reference_point: np.ndarray


def count_flipped_faces(m: Mesh, reference_interior_point=(0.0, 0.0, 0.0)) -> FlipReport:
    """Faces whose outward normal points back toward the reference point.

    A diagnostic assuming a star-shaped surface around the reference point;
    valid but strongly non-star-shaped surfaces can also trip it.
    """
    ref = np.asarray(reference_interior_point, dtype=np.float64)
    v, f = m.vertices, m.faces
    fn = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    cen = v[f].mean(axis=1)
    flipped = np.flatnonzero(np.sum(fn * (cen - ref), axis=1) < 0)
    return FlipReport(len(flipped), flipped, ref)


# ------------------------------------------------------------------ file I/O

def export_obj(m: Mesh, path, comment: str | None = None) -> None:
    path = Path(path)
    lines = [f"# {line}" for line in comment.splitlines()] if comment else []
    lines += [f"v {x!r} {y!r} {z!r}" for x, y, z in m.vertices.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in m.faces.tolist()]
    try:
        path.write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write OBJ to {path}: {exc}") from exc


def import_obj(path) -> Mesh:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise OSError(f"cannot read OBJ {path}: {exc}") from exc
    verts, faces = [], []
    for line in text.splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(p) for p in parts[1:4]])
        elif parts[0] == "f":
            faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return Mesh(np.array(verts), np.array(faces, dtype=np.int64))


def quantize_colors(rho_rgb: np.ndarray) -> np.ndarray:
    """round(255 * rho) with halves rounded up, as uint8."""
    return np.floor(255.0 * np.clip(rho_rgb, 0.0, 1.0) + 0.5).astype(np.uint8)


def export_ply(m: Mesh, path, comment: str | None = None) -> None:
    """Binary little-endian PLY; per-vertex colour from the ``theta`` attribute if present."""
    path = Path(path)
    theta = m.attributes.get("theta")
    colors = quantize_colors(np.asarray(theta)[:, :3]) if theta is not None else None
    header = ["ply", "format binary_little_endian 1.0"]
    header += [f"comment {line}" for line in comment.splitlines()] if comment else []
    header += [f"element vertex {m.n_vertices}",
              "property double x", "property double y", "property double z"]
    if colors is not None:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header += [f"element face {m.n_faces}", "property list uchar int vertex_indices", "end_header"]
    if colors is not None:
        vdt = np.dtype([("p", "<f8", 3), ("c", "u1", 3)])
        vrec = np.empty(m.n_vertices, dtype=vdt)
        vrec["c"] = colors
    else:
        vdt = np.dtype([("p", "<f8", 3)])
        vrec = np.empty(m.n_vertices, dtype=vdt)
    vrec["p"] = m.vertices
    frec = np.empty(m.n_faces, dtype=np.dtype([("n", "u1"), ("i", "<i4", 3)]))
    frec["n"] = 3
    frec["i"] = m.faces
    try:
        with open(path, "wb") as fh:
            fh.write(("\n".join(header) + "\n").encode("ascii"))
            fh.write(vrec.tobytes())
            fh.write(frec.tobytes())
    except OSError as exc:
        raise OSError(f"cannot write PLY to {path}: {exc}") from exc


def import_ply(path) -> Mesh:
    """Read the binary PLY layout written by :func:`export_ply`."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read PLY {path}: {exc}") from exc
    end = raw.index(b"end_header\n") + len(b"end_header\n")
    header = raw[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in header:
        raise MeshError(f"{path}: only binary little-endian PLY is supported")
    nv = int(next(h for h in header if h.startswith("element vertex")).split()[-1])
    nf = int(next(h for h in header if h.startswith("element face")).split()[-1])
    has_color = "property uchar red" in header
    vdt = np.dtype([("p", "<f8", 3), ("c", "u1", 3)]) if has_color else np.dtype([("p", "<f8", 3)])
    vrec = np.frombuffer(raw, dtype=vdt, count=nv, offset=end)
    off = end + nv * vdt.itemsize
    frec = np.frombuffer(raw, dtype=np.dtype([("n", "u1"), ("i", "<i4", 3)]), count=nf, offset=off)
    if np.any(frec["n"] != 3):
        raise MeshError(f"{path}: non-triangular faces")
    attrs = {"color": vrec["c"].copy()} if has_color else {}
    return Mesh(vrec["p"].copy(), frec["i"].astype(np.int64), attrs)


__all__ = [
    "Mesh", "MeshError", "icosphere", "deform_mesh", "vertex_normals", "vertex_normals_t",
    "count_self_intersections", "count_flipped_faces", "export_obj", "import_obj", "export_ply",
    "import_ply", "triangles_intersect", "orient3d", "canonical_face_order", "is_watertight",
    "is_consistently_oriented", "check_mesh", "unique_edges", "random_rotation",
]
