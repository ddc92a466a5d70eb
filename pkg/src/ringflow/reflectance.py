"""Cook-Torrance microfacet BRDF and the point-light shading equation.

The specular lobe uses the GGX (Trowbridge-Reitz) distribution and the
height-correlated Smith masking-shadowing term, with alpha = roughness::

    D(h)   = a^2 / (pi * ((n.h)^2 (a^2 - 1) + 1)^2)
    L(c)   = (sqrt(1 + a^2 (1 - c^2) / c^2) - 1) / 2
    G(i,o) = 1 / (1 + L(n.i) + L(n.o))
    B      = rho_rgb + rho_spec * D * G / (pi (n.i)(n.o))

The Fresnel factor is a constant absorbed into rho_spec.  Shading at a point
lit by a point source at distance d is ``max(0, n.i) * B / d^2``.

All batched functions take (N, 3) direction tensors and (N, 5) parameter
rows ``(rho_r, rho_g, rho_b, rho_spec, roughness)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

COS_EPS = 1e-9


class PreconditionError(ValueError):
    pass


@dataclass(frozen=True)
class BrdfSample:
    rho_rgb: tuple[float, float, float]
    rho_spec: float
    roughness: float

    def __post_init__(self):
        if not all(0.0 <= c <= 1.0 for c in self.rho_rgb) or not 0.0 <= self.rho_spec <= 1.0:
            raise ValueError("albedos must lie in [0, 1]")
        if not 0.0 < self.roughness < 1.0:
            raise ValueError("roughness must lie in (0, 1)")

    def as_array(self) -> np.ndarray:
        return np.array([*self.rho_rgb, self.rho_spec, self.roughness], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> BrdfSample:
        a = [float(v) for v in np.asarray(a).reshape(-1)]
        return cls(tuple(a[:3]), a[3], a[4])


@dataclass(frozen=True)
class ShadePoint:
    position: np.ndarray
    normal: np.ndarray
    to_light: np.ndarray
    to_camera: np.ndarray
    light_distance: float = 1.0

    def __post_init__(self):
        for name in ("normal", "to_light", "to_camera"):
            v = np.asarray(getattr(self, name), dtype=np.float64)
            if abs(np.linalg.norm(v) - 1.0) > 1e-9:
                raise ValueError(f"{name} must be unit length")
        if self.light_distance <= 0:
            raise ValueError("light distance must be positive")

    @classmethod
    def from_positions(cls, x, normal, light_pos, camera_pos) -> ShadePoint:
        x = np.asarray(x, dtype=np.float64)
        li = np.asarray(light_pos, dtype=np.float64) - x
        co = np.asarray(camera_pos, dtype=np.float64) - x
        n = np.asarray(normal, dtype=np.float64)
        return cls(x, n / np.linalg.norm(n), li / np.linalg.norm(li), co / np.linalg.norm(co),
                   float(np.linalg.norm(li)))


def ggx_distribution(cos_h: Tensor, alpha: Tensor) -> Tensor:
    a2 = alpha * alpha
    t = cos_h * cos_h * (a2 - 1.0) + 1.0
    return a2 / (math.pi * t * t)


def smith_lambda(cos_v: Tensor, alpha: Tensor) -> Tensor:
    c2 = cos_v * cos_v
    tan2 = (1.0 - c2) / c2
    return (ad.sqrt(ad.maximum(1.0 + alpha * alpha * tan2, 0.0)) - 1.0) * 0.5


def smith_g2(cos_i: Tensor, cos_o: Tensor, alpha: Tensor) -> Tensor:
    return 1.0 / (1.0 + smith_lambda(cos_i, alpha) + smith_lambda(cos_o, alpha))


def _rows(x) -> Tensor:
    x = ad.as_tensor(x)
    return ad.reshape(x, (1, x.shape[0])) if x.ndim == 1 else x


def eval_brdf(n, i, o, theta, guard: bool = False) -> Tensor:
    """Cook-Torrance value B(n, i, o; theta) as (N, 3).

    Without ``guard`` the caller must ensure ``(n.i)(n.o) >= 1e-9``; otherwise
    :class:`PreconditionError` is raised.  With ``guard`` both cosines are
    clamped to [1e-9, 1] inside the specular quotient (used by the renderer at
    grazing and back-facing samples).
    """
    n, i, o, theta = _rows(n), _rows(i), _rows(o), _rows(theta)
    cos_i = ad.dot(n, i)
    cos_o = ad.dot(n, o)
    if guard:
        cos_i = ad.clamp(cos_i, COS_EPS, 1.0)
        cos_o = ad.clamp(cos_o, COS_EPS, 1.0)
    else:
        bad = (cos_i.data * cos_o.data < COS_EPS) | (cos_i.data <= 0) | (cos_o.data <= 0)
        if bad.any():
            raise PreconditionError(f"eval_brdf: n.i and n.o must be positive with product >= {COS_EPS:g} "
                                    f"({int(bad.sum())} sample(s) violate it)")
        cos_i = ad.clamp(cos_i, None, 1.0)
        cos_o = ad.clamp(cos_o, None, 1.0)
    h = ad.normalize(i + o, eps=1e-12)
    cos_h = ad.clamp(ad.dot(n, h), 0.0, 1.0)
    alpha = theta[:, 4]
    d = ggx_distribution(cos_h, alpha)
    g = smith_g2(cos_i, cos_o, alpha)
    spec = theta[:, 3] * d * g / (math.pi * cos_i * cos_o)
    return theta[:, 0:3] + ad.column(spec, 3)


def shade(n, i, o, dist, theta, light_mode: str = "near") -> Tensor:
    """Radiance max(0, n.i) B / d^2 as (N, 3); ``distant`` mode uses d = 1."""
    n, i, o, theta = _rows(n), _rows(i), _rows(o), _rows(theta)
    b = eval_brdf(n, i, o, theta, guard=True)
    cos_i = ad.maximum(ad.dot(n, i), 0.0)
    if light_mode == "distant":
        scale = cos_i
    else:
        dist = ad.as_tensor(dist)
        dist = ad.reshape(dist, (n.shape[0],)) if dist.size == n.shape[0] else dist
        scale = cos_i / (dist * dist)
    return ad.mul_rows(b, scale)


def shade_point(p: ShadePoint, theta: BrdfSample, light_mode: str = "near") -> np.ndarray:
    """Single-point convenience wrapper returning an rgb array."""
    with ad.no_grad():
        out = shade(p.normal, p.to_light, p.to_camera, np.array([p.light_distance]), theta.as_array(),
                    light_mode)
    return out.data[0]


def eval_brdf_point(p: ShadePoint, theta: BrdfSample) -> np.ndarray:
    with ad.no_grad():
        return eval_brdf(p.normal, p.to_light, p.to_camera, theta.as_array()).data[0]
