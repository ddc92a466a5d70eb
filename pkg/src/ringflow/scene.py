"""Multi-view datasets: manifest I/O, PNG codecs and the synthetic scene generator.

Manifest (``scene.json``, UTF-8 JSON, floats written with full precision)::

    {
      "version": 1,
      "units": "object fits the unit ball at the origin",
      "encoding": "linear",
      "views": [
        {"image": "images/000.png", "mask": "masks/000.png",
         "camera_to_world": [[...4...], ...4 rows...],
         "fx": .., "fy": .., "cx": .., "cy": .., "width": .., "height": ..,
         "light": {"mode": "collocated" | "near" | "distant", "xyz": [x, y, z]}},
        ...
      ],
      "ground_truth": {                       # synthetic scenes only
        "shape": "bumpy", "material": "glossy", "seed": 7,
        "depth": ["gt/depth_000.png", ...], "normal": ["gt/normal_000.png", ...]
      }
    }

For ``near`` lights ``xyz`` is the light position, for ``distant`` lights the
unit direction towards the light; for ``collocated`` lights it records the
camera centre (informational; the renderer always uses the exact centre).
Depth maps are 16-bit PNGs holding round(1000 * depth) (0 = background);
normal maps are 8-bit RGB holding round(255 * (n + 1) / 2).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from PIL import Image
from scipy.special import sph_harm_y

from .geometry import Mesh, icosphere
from .renderer import Camera, Light, check_rotation, render_hard

MANIFEST_VERSION = 1
MANIFEST_NAME = "scene.json"


class SceneError(ValueError):
    def __init__(self, msg: str, view: int | None = None):
        self.view = view
        super().__init__(msg if view is None else f"view {view}: {msg}")


# ------------------------------------------------------------------ image codecs

def encode_unit(x) -> np.ndarray:
    """round(255 * clamp(x, 0, 1)), halves rounded up, as uint8."""
    return np.floor(255.0 * np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0) + 0.5).astype(np.uint8)


def write_image(path, img) -> None:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an H x W x 3 image, got {img.shape}")
    Image.fromarray(encode_unit(img), mode="RGB").save(path, format="PNG")


def read_image(path) -> np.ndarray:
    """8-bit RGB PNG to float64 in [0, 1] (byte / 255)."""
    with Image.open(path) as im:
        if im.format != "PNG":
            raise SceneError(f"{path}: unsupported image format {im.format}")
        if im.mode not in ("RGB", "L", "RGBA"):
            raise SceneError(f"{path}: unsupported PNG mode {im.mode}")
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def write_mask(path, mask) -> None:
    Image.fromarray(np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8), mode="L").save(path)


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) >= 128


def write_depth(path, depth) -> None:
    mm = np.floor(1000.0 * np.asarray(depth, dtype=np.float64) + 0.5)
    if mm.max(initial=0) > 65535:
        raise ValueError("depth beyond 65.535 units does not fit a 16-bit millidepth map")
    Image.fromarray(mm.astype(np.uint16)).save(path)


def read_depth(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.float64) / 1000.0


def write_normals(path, normals) -> None:
    write_image(path, (np.asarray(normals) + 1.0) * 0.5)


def read_normals(path) -> np.ndarray:
    """Decode a normal map; returned vectors are renormalized (zero where the pixel is mid-grey)."""
    n = read_image(path) * 2.0 - 1.0
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    return np.where(norm > 0.5, n / np.where(norm > 0, norm, 1.0), 0.0)


# ------------------------------------------------------------------ dataset

@dataclass
class View:
    camera: Camera
    light: Light
    image: str
    mask: str | None = None

    def to_dict(self) -> dict:
        c = self.camera
        light = self.light
        if light.mode == "collocated":
            xyz = c.center()
        elif light.mode == "near":
            xyz = np.asarray(light.position, dtype=np.float64)
        else:
            xyz = np.asarray(light.direction, dtype=np.float64)
        d = {"image": self.image, "camera_to_world": c.camera_to_world().tolist(),
             "fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy, "width": c.width, "height": c.height,
             "light": {"mode": light.mode, "xyz": [float(v) for v in xyz]}}
        if self.mask is not None:
            d["mask"] = self.mask
        return d

    @classmethod
    def from_dict(cls, d: dict, index: int | None = None) -> View:
        try:
            c2w = np.asarray(d["camera_to_world"], dtype=np.float64)
            if c2w.shape != (4, 4):
                raise SceneError(f"camera_to_world must be 4x4, got {c2w.shape}", index)
            try:
                check_rotation(c2w[:3, :3])
            except ValueError as exc:
                raise SceneError(f"bad camera rotation: {exc}", index) from None
            cam = Camera.from_camera_to_world(c2w, float(d["fx"]), float(d["fy"]), float(d["cx"]),
                                              float(d["cy"]), int(d["width"]), int(d["height"]))
            ld = d.get("light", {"mode": "collocated"})
            mode = ld["mode"]
            xyz = np.asarray(ld.get("xyz", [0.0, 0.0, 0.0]), dtype=np.float64)
            if mode == "near":
                light = Light("near", position=xyz)
            elif mode == "distant":
                light = Light("distant", direction=xyz)
            else:
                light = Light(mode)
        except KeyError as exc:
            raise SceneError(f"missing field {exc}", index) from None
        except ValueError as exc:
            if isinstance(exc, SceneError):
                raise
            raise SceneError(str(exc), index) from None
        return cls(cam, light, d["image"], d.get("mask"))


@dataclass
class SceneDataset:
    root: Path
    views: list[View]
    version: int = MANIFEST_VERSION
    units: str = "object fits the unit ball at the origin"
    encoding: str = "linear"
    ground_truth: dict | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __len__(self):
        return len(self.views)

    def image(self, k: int) -> np.ndarray:
        key = ("image", k)
        if key not in self._cache:
            self._cache[key] = read_image(self.root / self.views[k].image)
        return self._cache[key]

    def mask(self, k: int) -> np.ndarray | None:
        if self.views[k].mask is None:
            return None
        key = ("mask", k)
        if key not in self._cache:
            self._cache[key] = read_mask(self.root / self.views[k].mask)
        return self._cache[key]

    def gt_depth(self, k: int) -> np.ndarray:
        return read_depth(self._gt_path("depth", k))

    def gt_normals(self, k: int) -> np.ndarray:
        return read_normals(self._gt_path("normal", k))

    def _gt_path(self, kind: str, k: int) -> Path:
        if not self.ground_truth or kind not in self.ground_truth:
            raise SceneError(f"scene at {self.root} has no ground-truth {kind} maps")
        p = self.root / self.ground_truth[kind][k]
        if not p.exists():
            raise SceneError(f"missing ground-truth {kind} map {p}", k)
        return p

    def validate(self, min_views: int = 1) -> None:
        if len(self.views) < min_views:
            raise SceneError(f"need at least {min_views} views, got {len(self.views)}")
        for k, v in enumerate(self.views):
            for rel in (v.image, v.mask):
                if rel is None:
                    continue
                p = self.root / rel
                if not p.exists():
                    raise SceneError(f"missing file {p}", k)
                with Image.open(p) as im:
                    w, h = im.size
                if (w, h) != (v.camera.width, v.camera.height):
                    raise SceneError(f"{rel} is {w}x{h} but the camera declares "
                                     f"{v.camera.width}x{v.camera.height}", k)

    def to_dict(self) -> dict:
        d = {"version": self.version, "units": self.units, "encoding": self.encoding,
             "views": [v.to_dict() for v in self.views]}
        if self.ground_truth is not None:
            d["ground_truth"] = self.ground_truth
        return d


def manifest_path(path) -> Path:
    path = Path(path)
    return path / MANIFEST_NAME if path.is_dir() else path


def load_scene(path, min_views: int = 1) -> SceneDataset:
    """Parse and validate a manifest (file or the directory holding ``scene.json``)."""
    mpath = manifest_path(path)
    try:
        doc = json.loads(mpath.read_text())
    except OSError as exc:
        raise SceneError(f"cannot read manifest {mpath}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise SceneError(f"manifest {mpath} is not valid JSON: {exc}") from None
    version = doc.get("version")
    if version != MANIFEST_VERSION:
        raise SceneError(f"unsupported manifest version {version!r}")
    views = [View.from_dict(v, k) for k, v in enumerate(doc.get("views", []))]
    ds = SceneDataset(mpath.parent, views, version, doc.get("units", ""), doc.get("encoding", "linear"),
                      doc.get("ground_truth"))
    ds.validate(min_views)
    return ds


def save_scene(ds: SceneDataset, path=None) -> Path:
    mpath = manifest_path(path if path is not None else ds.root)
    mpath.parent.mkdir(parents=True, exist_ok=True)
    mpath.write_text(json.dumps(ds.to_dict(), indent=1) + "\n")
    return mpath


# ------------------------------------------------------------------ presets

def _real_sh(l: int, m: int, pts: np.ndarray) -> np.ndarray:
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    azimuth = np.arctan2(y, x) % (2 * math.pi)
    polar = np.arccos(np.clip(z, -1.0, 1.0))
    y_lm = sph_harm_y(l, abs(m), polar, azimuth)
    if m > 0:
        return math.sqrt(2.0) * (-1) ** m * y_lm.real
    if m < 0:
        return math.sqrt(2.0) * (-1) ** m * y_lm.imag
    return y_lm.real


_BUMPY_TERMS = ((2, 0, 0.10), (2, 2, 0.07), (3, -1, 0.08), (3, 3, 0.06), (4, 2, 0.05))


def _bumpy(s: np.ndarray) -> np.ndarray:
    r = 1.0 + sum(c * _real_sh(l, m, s) for l, m, c in _BUMPY_TERMS)
    return 0.62 * r[:, None] * s


def _stress(s: np.ndarray) -> np.ndarray:
    # three long thin lobes with deep saddles between them
    dirs = np.array([[1.0, 0.0, 0.0], [-0.5, math.sqrt(3) / 2, 0.0], [-0.5, -math.sqrt(3) / 2, 0.0]])
    lobes = np.max(np.clip(s @ dirs.T, 0.0, 1.0) ** 12, axis=1)
    r = 0.22 + 0.63 * lobes
    return r[:, None] * s


SHAPES: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "sphere": lambda s: 0.8 * s,
    "ellipsoid": lambda s: s * np.array([0.85, 0.62, 0.5]),
    "bumpy": _bumpy,
    "striped": lambda s: 0.8 * s,
    "stress": _stress,
}

GLOSSY = np.array([0.55, 0.42, 0.3, 0.35, 0.3])
LAMBERTIAN = np.array([0.7, 0.6, 0.5, 0.0, 0.5])
STRIPE_A = np.array([0.8, 0.25, 0.15, 0.1, 0.6])
STRIPE_B = np.array([0.15, 0.3, 0.7, 0.45, 0.25])


def _striped(s: np.ndarray, bands: int = 4) -> np.ndarray:
    # alternate materials in latitude bands of equal polar angle
    phi = np.arccos(np.clip(s[:, 2], -1.0, 1.0))
    band = np.floor(phi / math.pi * bands).astype(int) % 2
    return np.where(band[:, None] == 0, STRIPE_A, STRIPE_B)


MATERIALS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "glossy": lambda s: np.tile(GLOSSY, (len(s), 1)),
    "lambertian": lambda s: np.tile(LAMBERTIAN, (len(s), 1)),
    "striped": _striped,
}

DEFAULT_MATERIAL = {"striped": "striped", "sphere": "lambertian"}


# ------------------------------------------------------------------ synthesis

@dataclass
class SynthSpec:
    shape: str = "bumpy"
    material: str | None = None
    views: int = 30
    resolution: int = 96
    light: str = "collocated"
    seed: int = 0
    radius: float = 2.0
    fov_deg: float = 60.0
    supersample: int = 3
    gt_level: int = 5

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape preset {self.shape!r}; choose from {sorted(SHAPES)}")
        if self.material is None:
            self.material = DEFAULT_MATERIAL.get(self.shape, "glossy")
        if self.material not in MATERIALS:
            raise ValueError(f"unknown material preset {self.material!r}; choose from {sorted(MATERIALS)}")
        if self.light not in ("collocated", "near", "distant"):
            raise ValueError(f"unknown light mode {self.light!r}")
        if self.views < 1 or self.resolution < 4:
            raise ValueError("need at least one view and a resolution of 4 or more")


@dataclass
class GroundTruth:
    mesh: Mesh
    theta_fn: Callable[[np.ndarray], np.ndarray]
    depth: list[np.ndarray]
    normals: list[np.ndarray]
    masks: list[np.ndarray]

    @property
    def theta(self) -> np.ndarray:
        return self.theta_fn(self.mesh.attributes["canonical"])


def ground_truth_mesh(shape: str, level: int = 5) -> Mesh:
    dom = icosphere(level)
    return Mesh(SHAPES[shape](dom.vertices), dom.faces, {"canonical": dom.vertices.copy()})


def sample_view_directions(n: int, seed: int) -> np.ndarray:
    """``n`` directions uniform on the unit sphere."""
    d = np.random.default_rng(seed).standard_normal((n, 3))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def make_cameras(spec: SynthSpec, seed: int | None = None) -> list[Camera]:
    dirs = sample_view_directions(spec.views, spec.seed if seed is None else seed)
    return [Camera.look_at(spec.radius * d, fov_deg=spec.fov_deg, width=spec.resolution,
                           height=spec.resolution) for d in dirs]


def make_light(spec: SynthSpec, cam: Camera, k: int) -> Light:
    if spec.light == "collocated":
        return Light("collocated")
    c = cam.center()
    right = cam.R[0]
    up = -cam.R[1]
    if spec.light == "near":
        # light mounted 0.4 units beside the lens, side alternating with the view index
        return Light("near", position=c + 0.4 * (right if k % 2 == 0 else up))
    d = c + 0.8 * right
    return Light("distant", direction=d / np.linalg.norm(d))


def render_ground_truth(gt_mesh: Mesh, theta_fn, cam: Camera, light: Light, supersample: int = 3):
    return render_hard(gt_mesh, cam, light, theta_fn=theta_fn, supersample=supersample)


def generate_synthetic(spec: SynthSpec, out_dir) -> tuple[SceneDataset, GroundTruth]:
    """Render a synthetic multi-view scene to ``out_dir`` and return it with its ground truth.

    Images use the hard z-buffer renderer (with ``supersample``-fold box
    anti-aliasing) and the shared shading model, then are quantized to 8 bit.
    """
    out = Path(out_dir)
    for sub in ("images", "masks", "gt"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    mesh = ground_truth_mesh(spec.shape, spec.gt_level)
    theta_fn = MATERIALS[spec.material]
    views, depths, normals, masks = [], [], [], []
    gt = {"shape": spec.shape, "material": spec.material, "seed": spec.seed, "gt_level": spec.gt_level,
          "supersample": spec.supersample, "depth": [], "normal": []}
    for k, cam in enumerate(make_cameras(spec)):
        light = make_light(spec, cam, k)
        r = render_ground_truth(mesh, theta_fn, cam, light, spec.supersample)
        name = f"{k:03d}.png"
        write_image(out / "images" / name, r.image)
        write_mask(out / "masks" / name, r.mask)
        write_depth(out / "gt" / f"depth_{name}", r.depth)
        write_normals(out / "gt" / f"normal_{name}", r.normals)
        gt["depth"].append(f"gt/depth_{name}")
        gt["normal"].append(f"gt/normal_{name}")
        views.append(View(cam, light, f"images/{name}", f"masks/{name}"))
        depths.append(r.depth)
        normals.append(r.normals)
        masks.append(r.mask)
    ds = SceneDataset(out, views, ground_truth=gt)
    save_scene(ds)
    return load_scene(out), GroundTruth(mesh, theta_fn, depths, normals, masks)


def load_ground_truth(ds: SceneDataset) -> GroundTruth:
    """Rebuild the analytic ground truth of a synthetic scene from its manifest."""
    g = ds.ground_truth
    if not g or "shape" not in g:
        raise SceneError(f"scene at {ds.root} carries no synthetic ground truth")
    mesh = ground_truth_mesh(g["shape"], int(g.get("gt_level", 5)))
    depths = [ds.gt_depth(k) for k in range(len(ds))]
    normals = [ds.gt_normals(k) for k in range(len(ds))]
    return GroundTruth(mesh, MATERIALS[g["material"]], depths, normals, [d > 0 for d in depths])
