"""Soft rasterization of shaded triangle meshes, plus a hard z-buffer reference.

Soft coverage and aggregation, for pixel p and front-facing triangle j::

    D_j(p)  = sigmoid(s_j d_j(p)^2 / sigma)      s_j = +1 inside, -1 outside
    z~_j(p) = (far - z_j(p)) / (far - near)      perspective-correct depth
    w_j(p)  = D_j exp((z~_j - max_k z~_k) / gamma)
    A(p)    = min(1, sum_j D_j(p))                soft silhouette
    I(p)    = A(p) * sum_j w_j C_j / sum_j w_j + (1 - A(p)) * background

d is the distance from the pixel centre to the projected triangle measured in
normalized screen units (pixel size = 2 / max(W, H)).  Pairs farther than
``sqrt(cutoff * sigma)`` outside a triangle are dropped (their coverage is
below sigmoid(-cutoff)).  C_j is the shaded colour at the perspective-correct
interpolation (barycentrics clipped to the triangle) of position, normal and
theta.  Per-pixel sums run in canonical triangle order, so the output does
not depend on the order faces are submitted in.

A sums coverages rather than taking the probabilistic union: across an edge
shared by two triangles the inside and outside sigmoids add up to at least
one, so the mesh interior stays fully opaque while the outline keeps a smooth
falloff.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import Mesh, canonical_face_order, vertex_normals_t
from .reflectance import shade


class RenderError(RuntimeError):
    pass


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


@dataclass
class Camera:
    """Pinhole camera; ``rotation``/``translation`` map world to camera (x_c = R x + t).

    Camera axes: +x right, +y down, +z forward.  Either extrinsic may be a
    Tensor so gradients reach it.
    """
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: object
    translation: object
    width: int
    height: int
    # exact centre a camera was built from; -R^T t can differ from it in the last bit
    origin: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not isinstance(self.rotation, Tensor):
            self.rotation = np.asarray(self.rotation, dtype=np.float64)
            check_rotation(self.rotation)
        if not isinstance(self.translation, Tensor):
            self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    @property
    def R(self) -> np.ndarray:
        return _data(self.rotation)

    @property
    def t(self) -> np.ndarray:
        return _data(self.translation)

    def center(self):
        """Camera centre in world coordinates, -R^T t (a Tensor if an extrinsic is one)."""
        if isinstance(self.rotation, Tensor) or isinstance(self.translation, Tensor):
            return -ad.matmul(ad.transpose(ad.as_tensor(self.rotation)), ad.as_tensor(self.translation))
        c = -self.R.T @ self.t
        if self.origin is not None and np.allclose(c, self.origin, rtol=0, atol=1e-12):
            return self.origin.copy()
        return c

    def camera_to_world(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.R.T
        m[:3, 3] = self.center()
        return m

    @classmethod
    def from_camera_to_world(cls, c2w, fx, fy, cx, cy, width, height) -> Camera:
        c2w = np.asarray(c2w, dtype=np.float64)
        r = c2w[:3, :3].T
        return cls(fx, fy, cx, cy, r, -r @ c2w[:3, 3], int(width), int(height), c2w[:3, 3].copy())

    @classmethod
    def look_at(cls, eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0), fov_deg: float = 60.0,
                width: int = 64, height: int = 64) -> Camera:
        eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
        fwd = target - eye
        fwd /= np.linalg.norm(fwd)
        if abs(np.dot(fwd, up / np.linalg.norm(up))) > 0.999:
            up = np.array([0.0, 1.0, 0.0]) if abs(fwd[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        r = np.stack([right, down, fwd])
        f = 0.5 * max(width, height) / math.tan(math.radians(fov_deg) / 2.0)
        return cls(f, f, width / 2.0, height / 2.0, r, -r @ eye, width, height, eye.copy())

    def scaled(self, factor: float) -> Camera:
        """Same pose, image resolution scaled by ``factor``."""
        return replace(self, fx=self.fx * factor, fy=self.fy * factor, cx=self.cx * factor,
                       cy=self.cy * factor, width=int(round(self.width * factor)),
                       height=int(round(self.height * factor)))

    def detached(self) -> Camera:
        return replace(self, rotation=self.R.copy(), translation=self.t.copy())


def check_rotation(r: np.ndarray, tol: float = 1e-9) -> None:
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (3, 3):
        raise ValueError(f"rotation must be 3x3, got {r.shape}")
    if np.max(np.abs(r.T @ r - np.eye(3))) > tol or abs(np.linalg.det(r) - 1.0) > tol:
        raise ValueError("rotation is not orthonormal with determinant +1")


@dataclass
class Light:
    """``near``: point light at ``position``; ``collocated``: point light at the
    camera centre; ``distant``: parallel light travelling opposite ``direction``
    (``direction`` points from the surface towards the light)."""
    mode: str = "collocated"
    position: object = None
    direction: object = None

    def __post_init__(self):
        if self.mode not in ("near", "distant", "collocated"):
            raise ValueError(f"unknown light mode {self.mode!r}")
        if self.mode == "near" and self.position is None:
            raise ValueError("near light needs a position")
        if self.mode == "distant":
            if self.direction is None:
                raise ValueError("distant light needs a direction")
            d = _data(self.direction)
            if abs(np.linalg.norm(d) - 1.0) > 1e-9:
                raise ValueError("distant light direction must be unit length")

    def resolve_position(self, cam: Camera):
        return cam.center() if self.mode == "collocated" else self.position


@dataclass(frozen=True)
class SoftRasterConfig:
    sigma: float = 1e-4
    gamma: float = 1e-4
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    near: float = 0.1
    far: float = 10.0
    cutoff: float = 30.0
    cull_backfaces: bool = True

    def __post_init__(self):
        if self.sigma <= 0 or self.gamma <= 0:
            raise ValueError("sigma and gamma must be positive")
        if not 0 < self.near < self.far:
            raise ValueError("need 0 < near < far")


@dataclass
class RenderOutput:
    image: Tensor
    silhouette: Tensor
    n_pairs: int = 0
    clipped_faces: int = 0


@dataclass
class Projection:
    uv: object
    depth: object
    valid: np.ndarray


def to_camera(cam: Camera, x):
    """World points (N, 3) to camera coordinates."""
    if isinstance(x, Tensor) or isinstance(cam.rotation, Tensor) or isinstance(cam.translation, Tensor):
        x = ad.as_tensor(x)
        n = x.shape[0]
        xc = ad.matmul(x, ad.transpose(ad.as_tensor(cam.rotation)))
        return xc + ad.expand(ad.reshape(ad.as_tensor(cam.translation), (1, 3)), (n, 3))
    return np.asarray(x, dtype=np.float64) @ cam.R.T + cam.t


def project(cam: Camera, x, near: float = 0.0) -> Projection:
    """Pixel coordinates u = fx X/Z + cx, v = fy Y/Z + cy and depth Z.

    Points with depth <= ``near`` are flagged invalid rather than raising.
    """
    single = not isinstance(x, Tensor) and np.asarray(x).ndim == 1
    if single:
        x = np.asarray(x, dtype=np.float64).reshape(1, 3)
    xc = to_camera(cam, x)
    if isinstance(xc, Tensor):
        z = xc[:, 2]
        u = xc[:, 0] / z * cam.fx + cam.cx
        v = xc[:, 1] / z * cam.fy + cam.cy
        uv = ad.stack([u, v], axis=1)
        valid = z.data > near
    else:
        z = xc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = np.stack([xc[:, 0] / z * cam.fx + cam.cx, xc[:, 1] / z * cam.fy + cam.cy], axis=1)
        valid = z > near
    if single:
        return Projection(uv[0] if not isinstance(uv, Tensor) else uv, z[0] if not isinstance(z, Tensor) else z,
                          valid)
    return Projection(uv, z, valid)


# ------------------------------------------------------------------ pairs

def enumerate_pairs(uv: np.ndarray, faces: np.ndarray, tri_ids: np.ndarray, margin: float,
                    width: int, height: int):
    """(triangle, pixel) candidates whose pixel centre lies in the triangle's
    pixel-space bounding box grown by ``margin`` pixels.  Triangle-major order."""
    tri = uv[faces[tri_ids]]
    lo = tri.min(axis=1) - margin
    hi = tri.max(axis=1) + margin
    x0 = np.clip(np.ceil(lo[:, 0] - 0.5), 0, width).astype(np.int64)
    x1 = np.clip(np.floor(hi[:, 0] - 0.5), -1, width - 1).astype(np.int64)
    y0 = np.clip(np.ceil(lo[:, 1] - 0.5), 0, height).astype(np.int64)
    y1 = np.clip(np.floor(hi[:, 1] - 0.5), -1, height - 1).astype(np.int64)
    nx = np.maximum(x1 - x0 + 1, 0)
    ny = np.maximum(y1 - y0 + 1, 0)
    cnt = nx * ny
    total = int(cnt.sum())
    k = np.repeat(np.arange(len(tri_ids)), cnt)
    local = np.arange(total) - np.repeat(np.cumsum(cnt) - cnt, cnt)
    jx = x0[k] + local % np.maximum(nx[k], 1)
    jy = y0[k] + local // np.maximum(nx[k], 1)
    return tri_ids[k], jy * width + jx


def _pixel_centers(pix: np.ndarray, width: int) -> np.ndarray:
    return np.stack([pix % width + 0.5, pix // width + 0.5], axis=1).astype(np.float64)


def _cross2(u, v):
    return u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0]


def _barycentric_np(p, a, b, c):
    w0 = _cross2(b - p, c - p)
    w1 = _cross2(c - p, a - p)
    w2 = _cross2(a - p, b - p)
    area = w0 + w1 + w2
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.stack([w0, w1, w2], axis=1) / area[:, None]


def _seg_dist2_np(p, a, b):
    e = b - a
    pa = p - a
    t = np.clip(np.einsum("ij,ij->i", pa, e) / np.maximum(np.einsum("ij,ij->i", e, e), 1e-300), 0.0, 1.0)
    r = pa - t[:, None] * e
    return np.einsum("ij,ij->i", r, r)


def _tri_dist2_np(p, a, b, c):
    return np.minimum(np.minimum(_seg_dist2_np(p, a, b), _seg_dist2_np(p, b, c)), _seg_dist2_np(p, c, a))


def _visible_faces(verts: np.ndarray, faces: np.ndarray, cam: Camera, near: float, cull: bool):
    xc = verts @ cam.R.T + cam.t
    in_front = np.all(xc[faces, 2] > near, axis=1)
    keep = in_front.copy()
    if cull:
        a, b, c = (verts[faces[:, k]] for k in range(3))
        fn = np.cross(b - a, c - a)
        keep &= np.sum(fn * (_data(cam.center()) - a), axis=1) > 0
    return np.flatnonzero(keep), int(np.sum(~in_front))


# ------------------------------------------------------------------ soft path

def _seg_dist2(p: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    e = b - a
    pa = ad.Tensor(p) - a
    t = ad.clamp(ad.dot(pa, e) / ad.maximum(ad.dot(e, e), 1e-300), 0.0, 1.0)
    r = pa - ad.mul_rows(e, t)
    return ad.dot(r, r)


def _t_cross2(u: Tensor, v: Tensor) -> Tensor:
    return u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0]


def render(mesh: Mesh, theta, cam: Camera, light: Light, cfg: SoftRasterConfig = SoftRasterConfig(),
           vertices=None, normals=None) -> RenderOutput:
    """Soft-rasterize ``mesh`` shaded with per-vertex ``theta`` (V, 5).

    ``vertices``/``normals`` optionally override the mesh positions / vertex
    normals with tape-connected tensors (training path).  Gradients reach
    vertices, theta, normals and any Tensor camera or light parameters.
    """
    faces = canonical_face_order(mesh.faces)
    if len(faces) == 0:
        raise RenderError("cannot render an empty mesh")
    verts = ad.as_tensor(mesh.vertices if vertices is None else vertices)
    theta = ad.as_tensor(theta)
    if theta.shape != (verts.shape[0], 5):
        raise RenderError(f"theta must be (V, 5), got {theta.shape}")
    if normals is None:
        normals = vertex_normals_t(verts, faces)
    normals = ad.as_tensor(normals)
    w, h = cam.width, cam.height
    n_pix = w * h
    scale = 2.0 / max(w, h)
    bg = np.asarray(cfg.background, dtype=np.float64)

    tri_ids, clipped = _visible_faces(verts.data, faces, cam, cfg.near, cfg.cull_backfaces)
    proj = project(cam, verts)
    uv_np = _data(proj.uv)
    margin = math.sqrt(cfg.cutoff * cfg.sigma) / scale
    tri_k, pix = enumerate_pairs(uv_np, faces, tri_ids, margin, w, h) if len(tri_ids) else (
        np.zeros(0, np.int64), np.zeros(0, np.int64))

    # Untaped prefilter: keep pairs inside the triangle or within the cutoff band.
    if len(pix):
        p_px = _pixel_centers(pix, w)
        qa, qb, qc = (uv_np[faces[tri_k, k]] for k in range(3))
        bary = _barycentric_np(p_px, qa, qb, qc)
        inside = np.all(bary >= 0, axis=1)
        d2 = _tri_dist2_np(p_px * scale, qa * scale, qb * scale, qc * scale)
        keep = inside | (d2 / cfg.sigma < cfg.cutoff)
        tri_k, pix, inside = tri_k[keep], pix[keep], inside[keep]

    def _flat_bg() -> Tensor:
        return Tensor(np.broadcast_to(bg, (h, w, 3)).copy())

    if len(pix) == 0:
        return RenderOutput(_flat_bg(), Tensor(np.zeros((h, w))), 0, clipped)

    q = proj.uv * scale
    fa, fb, fc = (faces[tri_k, k] for k in range(3))
    pa, pb, pc = ad.take(q, fa), ad.take(q, fb), ad.take(q, fc)
    p = _pixel_centers(pix, w) * scale

    # screen-space barycentrics and signed coverage
    pt = Tensor(p)
    w0 = _t_cross2(pb - pt, pc - pt)
    w1 = _t_cross2(pc - pt, pa - pt)
    w2 = _t_cross2(pa - pt, pb - pt)
    area = w0 + w1 + w2
    d2 = ad.minimum(ad.minimum(_seg_dist2(p, pa, pb), _seg_dist2(p, pb, pc)), _seg_dist2(p, pc, pa))
    sign = np.where(inside, 1.0, -1.0)
    arg = d2 * Tensor(sign / cfg.sigma)
    cover = ad.sigmoid(arg)

    # perspective-correct interpolation weights on the clipped barycentrics
    bc = [ad.clamp(wk / area, 0.0, 1.0) for wk in (w0, w1, w2)]
    bsum = bc[0] + bc[1] + bc[2]
    z = proj.depth
    persp = [bc[k] / bsum / ad.take(z, f) for k, f in enumerate((fa, fb, fc))]
    zinv = persp[0] + persp[1] + persp[2]
    wts = [pk / zinv for pk in persp]
    depth = 1.0 / zinv
    zn = (cfg.far - depth) * (1.0 / (cfg.far - cfg.near))

    def interp(attr: Tensor) -> Tensor:
        return (ad.mul_rows(ad.take(attr, fa), wts[0]) + ad.mul_rows(ad.take(attr, fb), wts[1])
                + ad.mul_rows(ad.take(attr, fc), wts[2]))

    x = interp(verts)
    nrm = ad.normalize(interp(normals), eps=1e-30)
    th = interp(theta)
    n_pairs = len(pix)

    cam_pos = cam.center()
    o = ad.normalize(ad.expand(ad.reshape(ad.as_tensor(cam_pos), (1, 3)), (n_pairs, 3)) - x, eps=1e-30)
    if light.mode == "distant":
        li = ad.expand(ad.reshape(ad.as_tensor(light.direction), (1, 3)), (n_pairs, 3))
        color = shade(nrm, li, o, None, th, "distant")
    else:
        lpos = ad.as_tensor(light.resolve_position(cam))
        to_l = ad.expand(ad.reshape(lpos, (1, 3)), (n_pairs, 3)) - x
        dist = ad.l2_norm(to_l)
        color = shade(nrm, ad.normalize(to_l, eps=1e-30), o, dist, th, "near")

    # depth-softmax over the pairs of each pixel
    upix, local = np.unique(pix, return_inverse=True)
    local = local.reshape(-1)
    n_u = len(upix)
    zmax = np.full(n_u, -np.inf)
    np.maximum.at(zmax, local, zn.data)
    e = cover * ad.exp((zn - Tensor(zmax[local])) * (1.0 / cfg.gamma))
    denom = ad.segment_sum(e, local, n_u)
    # all coverages at a pixel can underflow to 0 when the cutoff band is wide;
    # the numerator is then 0 too and the pixel falls back to the background
    mix = ad.mul_rows(ad.segment_sum(ad.mul_rows(color, e), local, n_u), 1.0 / ad.maximum(denom, 1e-300))
    alpha = ad.clamp(ad.segment_sum(cover, local, n_u), None, 1.0)
    delta = ad.mul_rows(mix - Tensor(np.broadcast_to(bg, (n_u, 3)).copy()), alpha)
    img = ad.segment_sum(delta, upix, n_pix) + Tensor(np.broadcast_to(bg, (n_pix, 3)).copy())
    img = ad.clamp(img, None, 1.0)
    sil = ad.segment_sum(alpha, upix, n_pix)
    if not np.all(np.isfinite(img.data)):
        bad = np.flatnonzero(~np.isfinite(img.data).all(axis=1))
        raise RenderError(f"non-finite pixels {bad[:10].tolist()} (first triangles "
                          f"{tri_k[np.isin(pix, bad)][:10].tolist()})")
    return RenderOutput(ad.reshape(img, (h, w, 3)), ad.reshape(sil, (h, w)), n_pairs, clipped)


def silhouette_loss(soft_sil, mask) -> Tensor:
    """Mean squared difference between soft silhouette and a binary mask (0 best, 1 worst)."""
    soft_sil = ad.as_tensor(soft_sil)
    mask = np.asarray(mask, dtype=np.float64)
    if soft_sil.shape != mask.shape:
        raise ad.ShapeError("silhouette_loss", soft_sil.shape, mask.shape)
    diff = soft_sil - Tensor(mask)
    return ad.mean(diff * diff)


# ------------------------------------------------------------------ hard path

@dataclass
class HardRaster:
    """Per-pixel visible face, perspective-correct barycentrics and depth."""
    face: np.ndarray          # (H, W) int, -1 where empty
    bary: np.ndarray          # (H, W, 3)
    depth: np.ndarray         # (H, W), 0 where empty
    faces: np.ndarray = field(repr=False)

    @property
    def mask(self) -> np.ndarray:
        return self.face >= 0

    def interpolate(self, attr: np.ndarray) -> np.ndarray:
        """Interpolate a per-vertex (V, k) attribute; zeros where empty."""
        attr = np.asarray(attr, dtype=np.float64)
        out = np.zeros(self.face.shape + attr.shape[1:])
        m = self.mask
        f = self.faces[self.face[m]]
        b = self.bary[m]
        out[m] = sum(attr[f[:, k]] * b[:, k:k + 1] for k in range(3))
        return out


def rasterize_hard(verts: np.ndarray, faces: np.ndarray, cam: Camera, near: float = 0.1,
                   cull_backfaces: bool = True) -> HardRaster:
    """Z-buffer rasterization with one sample at each pixel centre."""
    verts = np.asarray(verts, dtype=np.float64)
    faces = canonical_face_order(faces)
    w, h = cam.width, cam.height
    tri_ids, _ = _visible_faces(verts, faces, cam, near, cull_backfaces)
    face_map = np.full(h * w, -1, dtype=np.int64)
    bary_map = np.zeros((h * w, 3))
    depth_map = np.zeros(h * w)
    if len(tri_ids):
        proj = project(cam, verts)
        uv, z = proj.uv, proj.depth
        tri_k, pix = enumerate_pairs(uv, faces, tri_ids, 0.0, w, h)
        if len(pix):
            p = _pixel_centers(pix, w)
            b = _barycentric_np(p, *(uv[faces[tri_k, k]] for k in range(3)))
            ok = np.all(b >= 0, axis=1) & np.all(np.isfinite(b), axis=1)
            tri_k, pix, b = tri_k[ok], pix[ok], b[ok]
            zk = z[faces[tri_k]]
            persp = b / zk
            zinv = persp.sum(axis=1)
            dz = 1.0 / zinv
            order = np.lexsort((tri_k, dz, pix))
            first = np.ones(len(order), dtype=bool)
            first[1:] = pix[order][1:] != pix[order][:-1]
            sel = order[first]
            face_map[pix[sel]] = tri_k[sel]
            bary_map[pix[sel]] = persp[sel] / zinv[sel, None]
            depth_map[pix[sel]] = dz[sel]
    return HardRaster(face_map.reshape(h, w), bary_map.reshape(h, w, 3), depth_map.reshape(h, w), faces)


@dataclass
class HardRender:
    image: np.ndarray
    depth: np.ndarray
    normals: np.ndarray
    mask: np.ndarray


def render_hard(mesh: Mesh, cam: Camera, light: Light, theta=None, theta_fn=None, normals=None,
                background=(0.0, 0.0, 0.0), near: float = 0.1, supersample: int = 1,
                cull_backfaces: bool = True) -> HardRender:
    """Reference render: z-buffer visibility with per-pixel shading.

    Reflectance comes from per-vertex ``theta`` or from ``theta_fn`` applied to
    the interpolated ``canonical`` attribute of the mesh.  Depth and normal
    maps use the base resolution; with ``supersample`` k the image is the
    box-filtered average of a k-times finer render.
    """
    if normals is None:
        from .geometry import vertex_normals
        normals = vertex_normals(mesh)
    ras = rasterize_hard(mesh.vertices, mesh.faces, cam, near, cull_backfaces)
    nmap = ras.interpolate(normals)
    nn = np.linalg.norm(nmap, axis=-1, keepdims=True)
    nmap = np.where(nn > 0, nmap / np.where(nn > 0, nn, 1.0), 0.0)
    if supersample > 1:
        fine = render_hard(mesh, cam.scaled(supersample), light, theta, theta_fn, normals, background, near, 1,
                           cull_backfaces)
        k = supersample
        img = fine.image.reshape(cam.height, k, cam.width, k, 3).mean(axis=(1, 3))
        return HardRender(img, ras.depth, nmap, ras.mask)
    img = np.broadcast_to(np.asarray(background, dtype=np.float64), (cam.height, cam.width, 3)).copy()
    m = ras.mask
    if m.any():
        x = ras.interpolate(mesh.vertices)[m]
        n = nmap[m]
        if theta_fn is not None:
            th = theta_fn(ras.interpolate(mesh.attributes["canonical"])[m])
        else:
            th = ras.interpolate(theta)[m]
        cpos = cam.center()
        o = cpos - x
        o /= np.linalg.norm(o, axis=1, keepdims=True)
        with ad.no_grad():
            if light.mode == "distant":
                li = np.broadcast_to(_data(light.direction), x.shape)
                col = shade(n, li, o, None, th, "distant").data
            else:
                lpos = _data(light.resolve_position(cam))
                to_l = lpos - x
                dist = np.linalg.norm(to_l, axis=1)
                col = shade(n, to_l / dist[:, None], o, dist, th, "near").data
        img[m] = np.minimum(col, 1.0)
    return HardRender(img, ras.depth, nmap, m)
