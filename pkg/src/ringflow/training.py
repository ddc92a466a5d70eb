"""Losses, Adam, checkpoints and the multi-view training loop.

One epoch runs in two stages so the tape never holds more than one view:

1. On the network tape, flow the icosphere vertices (recording the
   trajectory), evaluate theta at the canonical vertices and build vertex
   normals.
2. Render each view on its own short tape from detached copies of those
   tensors, backpropagate that view's loss and accumulate the copies'
   gradients in view order.

The accumulated gradients are then pushed through the network tape with the
surrogate ``sum(x * dL/dx) + sum(n * dL/dn) + sum(theta * dL/dtheta) + lam*reg``,
whose parameter gradients equal those of the full loss.
"""

from __future__ import annotations

import copy
import csv
import json
import math
import os
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import Mesh, count_flipped_faces, count_self_intersections, icosphere, unique_edges, vertex_normals_t
from .nets import (BrdfNet, FlowRecord, PosEncConfig, ShapeNet, brdfnet_forward, init_weights,
                   shapenet_forward)
from .renderer import Camera, Light, RenderError, SoftRasterConfig, render, silhouette_loss
from .scene import SceneDataset


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch: int, what: str, checkpoint: Path | None):
        self.epoch = epoch
        self.checkpoint = checkpoint
        where = f"; last good checkpoint: {checkpoint}" if checkpoint else ""
        super().__init__(f"non-finite {what} at epoch {epoch}{where}")


# ------------------------------------------------------------------ losses

@dataclass(frozen=True)
class LossConfig:
    lambda_reg: float = 0.01
    alpha: float = 0.5
    mask_weight: float = 0.0
    rgb_normalization: str = "mean"

    def __post_init__(self):
        if self.lambda_reg < 0:
            raise ValueError("lambda_reg must be non-negative")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.mask_weight < 0:
            raise ValueError("mask_weight must be non-negative")
        if self.rgb_normalization not in ("mean", "sum"):
            raise ValueError("rgb_normalization is 'mean' or 'sum'")


def rgb_view_loss(pred, obs, normalization: str = "mean") -> Tensor:
    """Squared rgb distance of one view, averaged (or summed) over pixels."""
    pred = ad.as_tensor(pred)
    obs = np.asarray(obs, dtype=np.float64)
    if pred.shape != obs.shape:
        raise ad.ShapeError("rgb_loss", pred.shape, obs.shape)
    diff = pred - Tensor(obs)
    total = ad.sum_(diff * diff)
    if normalization == "mean":
        return total * (1.0 / (obs.size // obs.shape[-1]))
    return total


def rgb_loss(pred, obs, normalization: str = "mean") -> Tensor:
    """Sum over views of the per-view squared rgb error (mean over pixels by default)."""
    if isinstance(pred, Tensor) or (isinstance(pred, np.ndarray) and pred.ndim == 3):
        pred, obs = [pred], [obs]
    if len(pred) != len(obs):
        raise ad.ShapeError("rgb_loss (view count)", (len(pred),), (len(obs),))
    terms = [rgb_view_loss(p, o, normalization) for p, o in zip(pred, obs)]
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


def umbrella_laplacian(faces: np.ndarray, n: int) -> sp.csr_matrix:
    """Uniform graph Laplacian: (L v)_s = mean of v over the neighbours of s, minus v_s."""
    e = unique_edges(faces)
    rows = np.concatenate([e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 1], e[:, 0]])
    adj = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    deg = np.asarray(adj.sum(axis=1)).reshape(-1)
    if np.any(deg == 0):
        raise ValueError("umbrella_laplacian: isolated vertex")
    return (sp.diags(1.0 / deg) @ adj - sp.identity(n)).tocsr()


def reg_loss(record: FlowRecord | None, laplacian, alpha: float = 0.5) -> Tensor:
    """Mean over vertices s and steps t of |V(x_t(s)) - alpha * L V(x_t(s))|^2."""
    if record is None or not record.velocities:
        raise ValueError("reg_loss needs the recorded flow trajectory")
    n = record.velocities[0].shape[0]
    if laplacian.shape != (n, n):
        raise ad.ShapeError("reg_loss (laplacian)", laplacian.shape, (n, n))
    total = None
    for v in record.velocities:
        r = v - ad.sparse_matmul(laplacian, v) * alpha if alpha else v
        term = ad.sum_(r * r)
        total = term if total is None else total + term
    return total * (1.0 / (n * len(record.velocities)))


def total_loss(rgb, reg, cfg: LossConfig = LossConfig(), sil=None) -> Tensor:
    out = ad.as_tensor(rgb) + ad.as_tensor(reg) * cfg.lambda_reg
    if sil is not None and cfg.mask_weight > 0:
        out = out + ad.as_tensor(sil) * cfg.mask_weight
    return out


# ------------------------------------------------------------------ optimizer

@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, **kw) -> AdamState:
        return cls(m=[np.zeros_like(p.data) for p in params], v=[np.zeros_like(p.data) for p in params], **kw)


def adam_step(params, state: AdamState, names: list[str] | None = None) -> None:
    """In-place Adam update with bias correction; parameters without a grad count as zero grad."""
    if len(state.m) != len(params):
        raise ValueError(f"optimizer holds {len(state.m)} moment buffers for {len(params)} parameters")
    grads = []
    for k, p in enumerate(params):
        g = np.zeros_like(p.data) if p.grad is None else p.grad
        if state.m[k].shape != p.data.shape:
            raise ad.ShapeError("adam_step", state.m[k].shape, p.data.shape)
        if not np.all(np.isfinite(g)):
            name = names[k] if names else f"#{k}"
            raise FloatingPointError(f"adam_step: non-finite gradient in parameter {name}")
        grads.append(g)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ------------------------------------------------------------------ schedule

@dataclass(frozen=True)
class Stage:
    level: int
    downsample: int
    epochs: int


@dataclass(frozen=True)
class TrainSchedule:
    """Either a single stage (``epochs`` at ``level``, full resolution) or an
    explicit coarse-to-fine ``stages`` list."""
    epochs: int = 2000
    level: int = 3
    stages: tuple = ()
    checkpoint_every: int = 0
    rotate_domain: bool = True

    def __post_init__(self):
        st = self.resolved()
        for a, b in zip(st, st[1:]):
            finer = b.level >= a.level and b.downsample <= a.downsample
            if not finer or (b.level, b.downsample) == (a.level, a.downsample):
                raise ValueError("stages must strictly increase in resolution")
        if any(s.epochs < 0 or s.downsample < 1 for s in st):
            raise ValueError("stage epochs must be >= 0 and downsample >= 1")

    def resolved(self) -> list[Stage]:
        if self.stages:
            return [s if isinstance(s, Stage) else Stage(*s) for s in self.stages]
        return [Stage(self.level, 1, self.epochs)]

    @property
    def total_epochs(self) -> int:
        return sum(s.epochs for s in self.resolved())

    def stage_at(self, epoch: int) -> Stage:
        acc = 0
        for s in self.resolved():
            acc += s.epochs
            if epoch < acc:
                return s
        return self.resolved()[-1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = [list(asdict(s).values()) for s in self.resolved()] if self.stages else []
        return d


def domain_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def epoch_domain(level: int, seed: int, epoch: int, rotate: bool = True) -> Mesh:
    """Training samples for ``epoch``: the icosphere under a rotation derived from (seed, epoch)."""
    return icosphere(level, rotation_seed=domain_seed(seed, epoch) if rotate else None)


# ------------------------------------------------------------------ poses

def rodrigues(omega: Tensor) -> Tensor:
    """Rotation matrix exp([omega]_x) on the tape; smooth through omega = 0."""
    omega = ad.as_tensor(omega)
    th2 = ad.dot(omega, omega, axis=0)
    th = ad.sqrt(th2 + 1e-30)
    a = ad.sin(th) / th
    half = ad.sin(th * 0.5) / th
    b = half * half * 2.0
    wx, wy, wz = omega[0], omega[1], omega[2]
    zero = Tensor(np.zeros(()))
    k = ad.reshape(ad.stack([zero, -wz, wy, wz, zero, -wx, -wy, wx, zero]), (3, 3))
    return Tensor(np.eye(3)) + k * a + ad.matmul(k, k) * b


def rotation_error_deg(ra: np.ndarray, rb: np.ndarray) -> float:
    c = (np.trace(np.asarray(ra) @ np.asarray(rb).T) - 1.0) / 2.0
    return math.degrees(math.acos(min(1.0, max(-1.0, c))))


# ------------------------------------------------------------------ model

@dataclass(frozen=True)
class ModelConfig:
    steps: int = 20
    shape_hidden: tuple = (256, 256, 256)
    brdf_hidden: tuple = (256, 256, 256, 256, 256)
    frequencies: tuple = tuple(range(1, 17))
    activation: str = "elu"
    lr: float = 1e-4
    brdf_lr: float | None = None  # None: same as lr
    pose_lr: float | None = None

    @property
    def posenc(self) -> PosEncConfig:
        return PosEncConfig(tuple(self.frequencies))

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


class ModelState:
    """Both networks, their optimizer state, per-view pose corrections and provenance."""

    def __init__(self, config: ModelConfig = ModelConfig(), seed: int = 0, n_views: int = 0,
                 run_config: dict | None = None):
        self.config = config
        self.seed = int(seed)
        self.epoch = 0
        self.run_config = dict(run_config or {})
        self.shape_net = ShapeNet(config.shape_hidden, config.steps, config.posenc, config.activation)
        self.brdf_net = BrdfNet(config.brdf_hidden, config.posenc, config.activation)
        ss = np.random.SeedSequence(self.seed).generate_state(2)
        init_weights(self.shape_net, int(ss[0]))
        init_weights(self.brdf_net, int(ss[1]))
        self.shape_adam = AdamState.for_params(self.shape_net.parameters(), lr=config.lr)
        self.brdf_adam = AdamState.for_params(self.brdf_net.parameters(),
                                             lr=config.lr if config.brdf_lr is None else config.brdf_lr)
        self.resize_poses(n_views)

    def resize_poses(self, n_views: int) -> None:
        self.cam_omega = Tensor(np.zeros((n_views, 3)), requires_grad=True, name="cam_omega")
        self.cam_shift = Tensor(np.zeros((n_views, 3)), requires_grad=True, name="cam_shift")
        self.light_shift = Tensor(np.zeros((n_views, 3)), requires_grad=True, name="light_shift")
        pose_lr = self.config.lr if self.config.pose_lr is None else self.config.pose_lr
        self.pose_adam = AdamState.for_params(self.pose_parameters(), lr=pose_lr)

    @property
    def n_views(self) -> int:
        return self.cam_omega.shape[0]

    def pose_parameters(self) -> list[Tensor]:
        return [self.cam_omega, self.cam_shift, self.light_shift]

    def _named(self):
        for tag, net in (("shape", self.shape_net), ("brdf", self.brdf_net)):
            for k, (w, b) in enumerate(net.mlp.layers):
                yield f"{tag}.w{k}", w
                yield f"{tag}.b{k}", b

    def parameter_names(self, which: str) -> list[str]:
        return [n for n, _ in self._named() if n.startswith(which)]

    # ---- camera / light with the learned corrections applied
    def camera(self, k: int, base: Camera, taped: bool = False) -> Camera:
        if taped:
            om = self.cam_omega[k]
            rot = ad.matmul(rodrigues(om), Tensor(base.R))
            trans = Tensor(base.t) + self.cam_shift[k]
            return Camera(base.fx, base.fy, base.cx, base.cy, rot, trans, base.width, base.height)
        if not (self.cam_omega.data[k].any() or self.cam_shift.data[k].any()):
            return base
        with ad.no_grad():
            rot = rodrigues(Tensor(self.cam_omega.data[k])).data @ base.R
        return Camera(base.fx, base.fy, base.cx, base.cy, rot, base.t + self.cam_shift.data[k], base.width,
                      base.height)

    def light(self, k: int, base: Light, taped: bool = False) -> Light:
        if base.mode != "near":
            return base
        if taped:
            return Light("near", position=Tensor(np.asarray(base.position, dtype=np.float64)) + self.light_shift[k])
        return Light("near", position=np.asarray(base.position, dtype=np.float64) + self.light_shift.data[k])

    # ---- serialization
    def arrays(self) -> dict[str, np.ndarray]:
        out = {name: p.data for name, p in self._named()}
        for tag, st in (("shape", self.shape_adam), ("brdf", self.brdf_adam), ("pose", self.pose_adam)):
            for k, (m, v) in enumerate(zip(st.m, st.v)):
                out[f"adam.{tag}.m{k}"] = m
                out[f"adam.{tag}.v{k}"] = v
        for p in self.pose_parameters():
            out[f"pose.{p.name}"] = p.data
        return out

    def meta(self) -> dict:
        adam = {tag: {"lr": st.lr, "beta1": st.beta1, "beta2": st.beta2, "eps": st.eps, "step": st.step}
                for tag, st in (("shape", self.shape_adam), ("brdf", self.brdf_adam), ("pose", self.pose_adam))}
        return {"model": self.config.to_dict(), "seed": self.seed, "epoch": self.epoch, "n_views": self.n_views,
                "adam": adam, "run_config": self.run_config}

    @classmethod
    def from_parts(cls, meta: dict, arrays: dict[str, np.ndarray]) -> ModelState:
        m = cls(ModelConfig.from_dict(meta["model"]), meta["seed"], meta["n_views"], meta.get("run_config"))
        m.epoch = int(meta["epoch"])
        for name, p in m._named():
            if arrays[name].shape != p.shape:
                raise ValueError(f"checkpoint array {name} has shape {arrays[name].shape}, expected {p.shape}")
            p.data = arrays[name].copy()
        for tag, st in (("shape", m.shape_adam), ("brdf", m.brdf_adam), ("pose", m.pose_adam)):
            info = meta["adam"][tag]
            st.lr, st.beta1, st.beta2, st.eps, st.step = (info["lr"], info["beta1"], info["beta2"], info["eps"],
                                                          int(info["step"]))
            st.m = [arrays[f"adam.{tag}.m{k}"].copy() for k in range(len(st.m))]
            st.v = [arrays[f"adam.{tag}.v{k}"].copy() for k in range(len(st.v))]
        for p in m.pose_parameters():
            p.data = arrays[f"pose.{p.name}"].copy()
        return m

    def save(self, path) -> Path:
        return save_checkpoint(path, self.meta(), self.arrays())

    @classmethod
    def load(cls, path) -> ModelState:
        meta, arrays = load_checkpoint(path)
        return cls.from_parts(meta, arrays)

    def clone(self) -> ModelState:
        return ModelState.from_parts(copy.deepcopy(self.meta()), self.arrays())


# Checkpoint layout: magic, uint32 version, uint64 header length, UTF-8 JSON
# header (sorted keys), then raw little-endian float64 arrays at the offsets the
# header lists.  No timestamps, so equal states give equal bytes.
CKPT_MAGIC = b"RINGFLOW"
CKPT_VERSION = 1


def save_checkpoint(path, meta: dict, arrays: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    index, offset, blobs = [], 0, []
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        index.append({"name": name, "shape": list(a.shape), "offset": offset})
        blobs.append(a.tobytes())
        offset += a.nbytes
    header = json.dumps({"meta": meta, "arrays": index}, sort_keys=True, separators=(",", ":")).encode()
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<IQ", CKPT_VERSION, len(header)) + header)
        for b in blobs:
            fh.write(b)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[20:20 + hlen])
    base = 20 + hlen
    arrays = {}
    for e in header["arrays"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        arrays[e["name"]] = np.frombuffer(raw, "<f8", n, base + e["offset"]).reshape(e["shape"]).copy()
    return header["meta"], arrays


# ------------------------------------------------------------------ prediction

def predict_mesh(model: ModelState, level: int, rotation_seed: int | None = None) -> Mesh:
    """Deformed icosphere with per-vertex theta, untaped (batch-independent inference)."""
    dom = icosphere(level, rotation_seed)
    verts = model.shape_net.evaluate(dom.vertices)
    theta = model.brdf_net.evaluate(dom.vertices)
    return Mesh(verts, dom.faces, {"canonical": dom.vertices, "theta": theta})


def mesh_diagnostics(model: ModelState, level: int) -> tuple[int, int]:
    """(self-intersecting face pairs, flipped faces) of the predicted mesh.

    Flips are judged against the flow image of the sphere centre, which stays
    inside the surface for any diffeomorphic deformation.
    """
    mesh = predict_mesh(model, level)
    centre = model.shape_net.evaluate(np.zeros((1, 3)))[0]
    return count_self_intersections(mesh).count, count_flipped_faces(mesh, centre).count


def swap_brdf(shape_model: ModelState, brdf_model: ModelState) -> ModelState:
    """Composite with the shape network of ``shape_model`` and the BRDF network of ``brdf_model``."""
    a, b = shape_model.config, brdf_model.config
    if tuple(a.frequencies) != tuple(b.frequencies):
        raise ValueError("swap_brdf: positional encodings differ; the canonical domains are incompatible")
    out = shape_model.clone()
    out.config = ModelConfig(a.steps, a.shape_hidden, b.brdf_hidden, a.frequencies, a.activation, a.lr, b.brdf_lr,
                             a.pose_lr)
    out.brdf_net = BrdfNet(b.brdf_hidden, b.posenc, b.activation)
    for (w, bias), (w2, b2) in zip(out.brdf_net.mlp.layers, brdf_model.brdf_net.mlp.layers):
        w.data = w2.data.copy()
        bias.data = b2.data.copy()
    out.brdf_adam = copy.deepcopy(brdf_model.brdf_adam)
    out.run_config = dict(out.run_config, brdf_source=brdf_model.run_config.get("name", "other"))
    return out


# ------------------------------------------------------------------ training

@dataclass
class TrainResult:
    model: ModelState
    metrics: list[dict]
    checkpoint: Path | None = None


METRIC_FIELDS = ("epoch", "loss_rgb", "loss_reg", "loss_mask", "loss_total")


def _downsample(img: np.ndarray, k: int) -> np.ndarray:
    if k == 1:
        return img
    h, w = img.shape[0] // k, img.shape[1] // k
    return img[:h * k, :w * k].reshape(h, k, w, k, *img.shape[2:]).mean(axis=(1, 3))


class _Observations:
    def __init__(self, scene: SceneDataset):
        self.scene = scene
        self._cache: dict = {}

    def get(self, k: int, factor: int):
        key = (k, factor)
        if key not in self._cache:
            img = _downsample(self.scene.image(k), factor)
            mask = self.scene.mask(k)
            if mask is not None:
                mask = _downsample(mask.astype(np.float64), factor)
            self._cache[key] = (img, mask)
        return self._cache[key]


def forward_views(model: ModelState, scene: SceneDataset, domain: Mesh, raster: SoftRasterConfig,
                  factor: int = 1, views=None) -> list[np.ndarray]:
    """Render views through the taped training path (used to log predictions)."""
    with ad.Tape():
        s = Tensor(domain.vertices)
        x, _ = shapenet_forward(model.shape_net, s)
        theta = brdfnet_forward(model.brdf_net, s)
        normals = vertex_normals_t(x, domain.faces)
    out = []
    for k in (range(len(scene)) if views is None else views):
        v = scene.views[k]
        cam = model.camera(k, v.camera).scaled(1.0 / factor) if factor > 1 else model.camera(k, v.camera)
        with ad.no_grad():
            r = render(domain, theta.data, cam, model.light(k, v.light), raster, vertices=x.data, normals=normals.data)
        out.append(r.image.data)
    return out


def epoch_gradients(model: ModelState, scene: SceneDataset, domain: Mesh, laplacian, downsample: int = 1,
                    loss_cfg: LossConfig = LossConfig(), raster: SoftRasterConfig = SoftRasterConfig(),
                    obs: _Observations | None = None, refine_cams: bool = False, refine_lights: bool = False,
                    networks: bool = True) -> tuple[float, float, float]:
    """One epoch's loss over all views, leaving its gradient in ``.grad`` of every
    network (when ``networks``) and pose parameter.  Returns (rgb, reg, mask) values."""
    obs = obs or _Observations(scene)
    ad.zero_grad(model.shape_net.parameters() + model.brdf_net.parameters() + model.pose_parameters())
    net_tape = ad.Tape()
    with net_tape:
        s = Tensor(domain.vertices)
        x, rec = shapenet_forward(model.shape_net, s, record_trajectory=True)
        theta = brdfnet_forward(model.brdf_net, s)
        normals = vertex_normals_t(x, domain.faces)
        reg = reg_loss(rec, laplacian, loss_cfg.alpha) if loss_cfg.lambda_reg > 0 else Tensor(0.0)

    xd = Tensor(x.data, requires_grad=True)
    nd = Tensor(normals.data, requires_grad=True)
    td = Tensor(theta.data, requires_grad=True)
    rgb_sum, mask_sum = 0.0, 0.0
    for k, view in enumerate(scene.views):
        img, mask = obs.get(k, downsample)
        base = view.camera.scaled(1.0 / downsample) if downsample > 1 else view.camera
        with ad.Tape():
            cam = model.camera(k, base, taped=refine_cams)
            light = model.light(k, view.light, taped=refine_lights)
            r = render(domain, td, cam, light, raster, vertices=xd, normals=nd)
            loss = rgb_view_loss(r.image, img, loss_cfg.rgb_normalization)
            rgb_sum += loss.item()
            if loss_cfg.mask_weight > 0 and mask is not None:
                sl = silhouette_loss(r.silhouette, mask)
                mask_sum += sl.item()
                loss = loss + sl * loss_cfg.mask_weight
            ad.backward(loss)

    if networks:
        with net_tape:
            surrogate = reg * loss_cfg.lambda_reg
            for t, tg in ((x, xd.grad), (normals, nd.grad), (theta, td.grad)):
                if tg is not None:
                    surrogate = surrogate + ad.sum_(t * Tensor(tg))
        if surrogate.requires_grad:
            ad.backward(surrogate)
    net_tape.clear()
    return rgb_sum, reg.item(), mask_sum


def _check_finite(value: float, epoch: int, what: str, ckpt: Path | None):
    if not math.isfinite(value):
        raise TrainingDiverged(epoch, what, ckpt)


def train(scene: SceneDataset, model: ModelState, schedule: TrainSchedule = TrainSchedule(),
          loss_cfg: LossConfig = LossConfig(), raster: SoftRasterConfig = SoftRasterConfig(),
          out_dir=None, refine: str | None = None, train_networks: bool = True,
          save_predictions: bool = False, progress: Callable[[dict], None] | None = None) -> TrainResult:
    """Train ``model`` on ``scene`` from ``model.epoch`` up to ``schedule.total_epochs``.

    ``refine`` in {None, "cameras", "lights", "both"} additionally optimizes
    per-view pose corrections (joint mode when ``train_networks`` is true,
    post-hoc otherwise).  With ``out_dir`` the run writes ``metrics.csv``,
    ``timing.csv`` and ``checkpoint.rfk`` (every ``checkpoint_every`` epochs
    and at the end).  Everything is reproducible from ``model.seed``.
    """
    if len(scene) < 2:
        raise ValueError(f"training needs at least 2 views, scene has {len(scene)}")
    if refine not in (None, "cameras", "lights", "both"):
        raise ValueError(f"refine must be cameras, lights or both, not {refine!r}")
    if model.n_views != len(scene):
        if model.epoch:
            raise ValueError(f"model carries poses for {model.n_views} views, scene has {len(scene)}")
        model.resize_poses(len(scene))
    out = Path(out_dir) if out_dir is not None else None
    ckpt = out / "checkpoint.rfk" if out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        fresh = model.epoch == 0
        for name, cols in (("metrics.csv", METRIC_FIELDS), ("timing.csv", ("epoch", "seconds"))):
            if fresh or not (out / name).exists():
                with open(out / name, "w", newline="") as fh:
                    csv.writer(fh).writerow(cols)
    obs = _Observations(scene)
    laps: dict[int, sp.csr_matrix] = {}
    refine_cams = refine in ("cameras", "both")
    refine_lights = refine in ("lights", "both")
    last_good = ckpt if ckpt and ckpt.exists() else None
    metrics = []
    shape_params = model.shape_net.parameters()
    brdf_params = model.brdf_net.parameters()

    for epoch in range(model.epoch, schedule.total_epochs):
        t0 = time.perf_counter()
        stage = schedule.stage_at(epoch)
        domain = epoch_domain(stage.level, model.seed, epoch, schedule.rotate_domain)
        if stage.level not in laps:
            laps[stage.level] = umbrella_laplacian(domain.faces, len(domain.vertices))
        try:
            rgb_sum, reg_val, mask_sum = epoch_gradients(model, scene, domain, laps[stage.level], stage.downsample,
                                                         loss_cfg, raster, obs, refine_cams, refine_lights,
                                                         train_networks)
            _check_finite(rgb_sum, epoch, "rendering loss", last_good)
            _check_finite(reg_val, epoch, "regularization loss", last_good)
            if train_networks:
                adam_step(shape_params, model.shape_adam, model.parameter_names("shape"))
                adam_step(brdf_params, model.brdf_adam, model.parameter_names("brdf"))
            if refine:
                if not refine_cams:
                    model.cam_omega.grad = None
                    model.cam_shift.grad = None
                if not refine_lights:
                    model.light_shift.grad = None
                adam_step(model.pose_parameters(), model.pose_adam, ["cam_omega", "cam_shift", "light_shift"])
        except TrainingDiverged:
            raise
        except (FloatingPointError, RenderError) as exc:
            raise TrainingDiverged(epoch, f"values ({exc})", last_good) from exc

        model.epoch = epoch + 1
        total = rgb_sum + loss_cfg.lambda_reg * reg_val + loss_cfg.mask_weight * mask_sum
        row = {"epoch": epoch, "loss_rgb": rgb_sum, "loss_reg": reg_val, "loss_mask": mask_sum,
               "loss_total": total}
        metrics.append(row)
        if out:
            with open(out / "metrics.csv", "a", newline="") as fh:
                csv.writer(fh).writerow([epoch] + [repr(row[f]) for f in METRIC_FIELDS[1:]])
            with open(out / "timing.csv", "a", newline="") as fh:
                csv.writer(fh).writerow([epoch, f"{time.perf_counter() - t0:.3f}"])
            every = schedule.checkpoint_every
            if (every and model.epoch % every == 0) or model.epoch == schedule.total_epochs:
                model.save(ckpt)
                last_good = ckpt
        if progress:
            progress(row)

    if out and save_predictions:
        level = schedule.resolved()[-1].level
        preds = forward_views(model, scene, icosphere(level), raster)
        pdir = out / "predictions"
        pdir.mkdir(exist_ok=True)
        for k, p in enumerate(preds):
            np.save(pdir / f"view_{k:03d}.npy", p)
    if out and last_good is None and model.epoch:
        model.save(ckpt)
        last_good = ckpt
    return TrainResult(model, metrics, last_good)


@dataclass
class RefineReport:
    rotation_change_deg: list[float]
    translation_change: list[float]
    light_change: list[float]

    @property
    def mean_rotation_change(self) -> float:
        return float(np.mean(self.rotation_change_deg)) if self.rotation_change_deg else 0.0


def refined_scene(scene: SceneDataset, model: ModelState) -> SceneDataset:
    """Copy of ``scene`` with the model's pose corrections baked into its views."""
    views = [copy.copy(v) for v in scene.views]
    for k, v in enumerate(views):
        v.camera = model.camera(k, v.camera)
        v.light = model.light(k, v.light)
    out = copy.copy(scene)
    out.views = views
    out._cache = scene._cache
    return out


def refine_calibration(scene: SceneDataset, model: ModelState, which: str = "cameras", epochs: int = 100,
                       joint: bool = False, schedule: TrainSchedule | None = None,
                       loss_cfg: LossConfig = LossConfig(), raster: SoftRasterConfig = SoftRasterConfig(),
                       out_dir=None) -> tuple[SceneDataset, RefineReport]:
    """Optimize per-view camera and/or light corrections for ``epochs`` more epochs.

    Post-hoc by default (networks frozen); ``joint`` keeps training them too.
    Returns the scene with refined poses and the per-view change magnitudes.
    """
    level = schedule.resolved()[-1].level if schedule else 3
    extra = TrainSchedule(epochs=model.epoch + epochs, level=level,
                          rotate_domain=schedule.rotate_domain if schedule else True)
    if model.n_views != len(scene) and not model.epoch:
        model.resize_poses(len(scene))
    before = [model.camera(k, v.camera) for k, v in enumerate(scene.views)]
    lights_before = [model.light(k, v.light) for k, v in enumerate(scene.views)]
    train(scene, model, extra, loss_cfg, raster, out_dir, refine=which, train_networks=joint)
    after = refined_scene(scene, model)
    rot = [rotation_error_deg(a.camera.R, b.R) for a, b in zip(after.views, before)]
    trans = [float(np.linalg.norm(a.camera.center() - b.center())) for a, b in zip(after.views, before)]
    lch = [float(np.linalg.norm(np.asarray(a.light.position) - np.asarray(b.position))) if b.mode == "near" else 0.0
           for a, b in zip(after.views, lights_before)]
    return after, RefineReport(rot, trans, lch)
