"""Positional encoding, MLPs, the recurrent Shape-Net and the BRDF-Net."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

# Inference batches are zero-padded to this many rows so that a given point is
# always evaluated by an identically shaped GEMM.  That makes the output for a
# canonical point bitwise independent of how many other points share the batch.
INFERENCE_CHUNK = 256

ROUGHNESS_MIN = 1e-3
ROUGHNESS_MAX = 1.0 - 1e-3


class FlowError(FloatingPointError):
    def __init__(self, step: int, count: int):
        self.step = step
        super().__init__(f"non-finite position after Euler step {step} ({count} value(s))")


@dataclass(frozen=True)
class PosEncConfig:
    frequencies: tuple[int, ...] = tuple(range(1, 17))
    input_dim: int = 3

    def __post_init__(self):
        f = list(self.frequencies)
        if any(b <= a for a, b in zip(f, f[1:])):
            raise ValueError("frequencies must be strictly increasing")

    @property
    def output_dim(self) -> int:
        return 2 * len(self.frequencies) * self.input_dim

    def frequency_matrix(self) -> np.ndarray:
        """(input_dim, |w|*input_dim) matrix whose column w*D + c holds w in row c."""
        d = self.input_dim
        m = np.zeros((d, len(self.frequencies) * d))
        for k, w in enumerate(self.frequencies):
            for c in range(d):
                m[c, k * d + c] = float(w)
        return m

    def to_dict(self) -> dict:
        return {"frequencies": list(self.frequencies), "input_dim": self.input_dim}

    @classmethod
    def from_dict(cls, d: dict) -> PosEncConfig:
        return cls(tuple(int(w) for w in d["frequencies"]), int(d["input_dim"]))


def pos_encode(x, cfg: PosEncConfig = PosEncConfig()):
    """Lift (N, 3) points to [cos(w x); sin(w x)].

    Layout along the feature axis: the cos block first, then the sin block;
    inside each block frequency-major, coordinate-minor, i.e.
    ``cos(w1 x), cos(w1 y), cos(w1 z), cos(w2 x), ...``.

    Accepts a Tensor (taped) or an array (returns an array).
    """
    if isinstance(x, Tensor):
        wx = ad.matmul(x, cfg.frequency_matrix())
        return ad.concat([ad.cos(wx), ad.sin(wx)], axis=1)
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    wx = np.atleast_2d(x) @ cfg.frequency_matrix()
    out = np.concatenate([np.cos(wx), np.sin(wx)], axis=1)
    return out[0] if squeeze else out


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "elu": ad.elu,
    "relu": ad.relu,
    "tanh": ad.tanh,
    "identity": lambda t: t,
}


class Mlp:
    """Dense layers ``h <- act(h W + b)``; the last layer uses ``out_activation``."""

    def __init__(self, dims: list[int], activation: str = "elu", out_activation: str = "identity"):
        if len(dims) < 2:
            raise ValueError("an MLP needs at least input and output dims")
        self.dims = list(dims)
        self.activation = activation
        self.out_activation = out_activation
        self.layers = [(Tensor(np.zeros((a, b)), requires_grad=True), Tensor(np.zeros(b), requires_grad=True))
                       for a, b in zip(dims[:-1], dims[1:])]

    @property
    def neuron_count(self) -> int:
        return sum(self.dims[1:])

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer]

    def __call__(self, h: Tensor) -> Tensor:
        n = h.shape[0]
        last = len(self.layers) - 1
        for k, (w, b) in enumerate(self.layers):
            h = ad.matmul(h, w) + ad.expand(ad.reshape(b, (1, b.shape[0])), (n, b.shape[0]))
            h = ACTIVATIONS[self.out_activation if k == last else self.activation](h)
        return h


def _chunked(fn: Callable[[np.ndarray], np.ndarray], pts: np.ndarray, out_dim: int) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64)
    out = np.empty((len(pts), out_dim))
    buf = np.zeros((INFERENCE_CHUNK, pts.shape[1]))
    with ad.no_grad():
        for start in range(0, len(pts), INFERENCE_CHUNK):
            block = pts[start:start + INFERENCE_CHUNK]
            buf[:] = 0.0
            buf[:len(block)] = block
            out[start:start + len(block)] = fn(buf.copy())[:len(block)]
    return out


class ShapeNet:
    """Recurrent residual block: T Euler steps ``x <- x + V(x)/T`` of one shared MLP."""

    def __init__(self, hidden: tuple[int, ...] = (256, 256, 256), steps: int = 20,
                 posenc: PosEncConfig = PosEncConfig(), activation: str = "elu"):
        if steps < 1:
            raise ValueError("steps must be positive")
        self.posenc = posenc
        self.steps = int(steps)
        self.hidden = tuple(hidden)
        self.mlp = Mlp([posenc.output_dim, *hidden, 3], activation=activation)

    def parameters(self) -> list[Tensor]:
        return self.mlp.parameters()

    def velocity(self, x: Tensor) -> Tensor:
        return self.mlp(pos_encode(x, self.posenc))

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        """Untaped flow of (N, 3) points; bitwise independent of batch composition."""
        return _chunked(lambda p: shapenet_forward(self, p)[0].data, points, 3)


@dataclass
class FlowRecord:
    """Per-step positions x_k and velocities V(x_k), k = 0..T-1."""
    positions: list[Tensor] = field(default_factory=list)
    velocities: list[Tensor] = field(default_factory=list)


def shapenet_forward(net: ShapeNet, s, record_trajectory: bool = False,
                     field: Callable[[Tensor], Tensor] | None = None):
    """Integrate the learned field from canonical points ``s`` (N, 3).

    ``field`` replaces the MLP velocity (test hook for analytic fields).
    Returns ``(x, record)`` where ``record`` is None unless requested.
    """
    x = s if isinstance(s, Tensor) else Tensor(np.atleast_2d(np.asarray(s, dtype=np.float64)))
    v_fn = field or net.velocity
    steps = net.steps
    record = FlowRecord() if record_trajectory else None
    for k in range(steps):
        v = v_fn(x)
        if record is not None:
            record.positions.append(x)
            record.velocities.append(v)
        x = x + v * (1.0 / steps)
        bad = ~np.isfinite(x.data)
        if bad.any():
            raise FlowError(k, int(bad.sum()))
    return x, record


class BrdfNet:
    """Position on the canonical sphere -> squashed Cook-Torrance parameters."""

    def __init__(self, hidden: tuple[int, ...] = (256, 256, 256, 256, 256),
                 posenc: PosEncConfig = PosEncConfig(), activation: str = "elu"):
        self.posenc = posenc
        self.hidden = tuple(hidden)
        self.mlp = Mlp([posenc.output_dim, *hidden, 5], activation=activation)

    def parameters(self) -> list[Tensor]:
        return self.mlp.parameters()

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        return _chunked(lambda p: brdfnet_forward(self, p).data, points, 5)


def squash_brdf(raw: Tensor) -> Tensor:
    """Sigmoid every channel to [0, 1]; roughness is further clamped away from 0 and 1."""
    sq = ad.sigmoid(raw)
    return ad.concat([sq[:, :4], ad.clamp(sq[:, 4:5], ROUGHNESS_MIN, ROUGHNESS_MAX)], axis=1)


def brdfnet_forward(net: BrdfNet, s) -> Tensor:
    """theta(s) as (N, 5): rho_r, rho_g, rho_b, rho_spec, roughness."""
    x = s if isinstance(s, Tensor) else Tensor(np.atleast_2d(np.asarray(s, dtype=np.float64)))
    return squash_brdf(net.mlp(pos_encode(x, net.posenc)))


def init_weights(net, seed: int, final_scale: float | None = None) -> None:
    """Reproducible LeCun-normal init with zero biases.

    For a ShapeNet the final layer is additionally scaled (default 1e-2) so
    the initial flow stays close to the identity.
    """
    rng = np.random.default_rng(seed)
    if final_scale is None:
        final_scale = 1e-2 if isinstance(net, ShapeNet) else 1.0
    layers = net.mlp.layers
    for k, (w, b) in enumerate(layers):
        fan_in = w.shape[0]
        w.data = rng.standard_normal(w.shape) / np.sqrt(fan_in)
        if k == len(layers) - 1:
            w.data *= final_scale
        b.data = np.zeros(b.shape)
        w.grad = None
        b.grad = None
