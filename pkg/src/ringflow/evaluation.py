"""Normal, depth and image metrics, and whole-scene evaluation of a reconstruction."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .geometry import Mesh
from .renderer import render_hard
from .scene import SceneDataset, SceneError, load_ground_truth, write_image


class EvalError(ValueError):
    pass


@dataclass
class ErrorStats:
    per_pixel: np.ndarray      # NaN outside the mask
    mean: float
    median: float

    @property
    def values(self) -> np.ndarray:
        return self.per_pixel[np.isfinite(self.per_pixel)]


def _stats(err: np.ndarray, mask: np.ndarray) -> ErrorStats:
    full = np.full(mask.shape, np.nan)
    full[mask] = err
    return ErrorStats(full, float(np.mean(err)), float(np.median(err)))


def _check_mask(mask, shape) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != shape:
        raise EvalError(f"mask shape {mask.shape} does not match maps {shape}")
    if not mask.any():
        raise EvalError("empty mask: no pixel is valid in both maps")
    return mask


def normal_error(pred, gt, mask) -> ErrorStats:
    """Per-pixel angle in degrees between unit normal maps, over ``mask``."""
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise EvalError(f"normal maps differ in shape: {pred.shape} vs {gt.shape}")
    mask = _check_mask(mask, pred.shape[:-1])
    c = np.clip(np.sum(pred[mask] * gt[mask], axis=-1), -1.0, 1.0)
    return _stats(np.degrees(np.arccos(c)), mask)


def depth_error(pred, gt, mask, bbox_diag: float) -> ErrorStats:
    """Per-pixel 100 |d_pred - d_gt| / bbox_diag, over ``mask``."""
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise EvalError(f"depth maps differ in shape: {pred.shape} vs {gt.shape}")
    if not bbox_diag > 0:
        raise EvalError("bounding-box diagonal must be positive")
    mask = _check_mask(mask, pred.shape)
    return _stats(100.0 * np.abs(pred[mask] - gt[mask]) / bbox_diag, mask)


def psnr(pred, gt) -> float:
    """10 log10(1 / MSE) over all pixels and channels; ``inf`` when the images are equal."""
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise EvalError(f"images differ in shape: {pred.shape} vs {gt.shape}")
    mse = float(np.mean((pred - gt) ** 2))
    return math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)


# ------------------------------------------------------------------ report

@dataclass
class ViewMetrics:
    split: str
    view: int
    normal_mean: float
    normal_median: float
    depth_mean: float
    depth_median: float
    psnr: float
    valid_pixels: int


@dataclass
class EvalReport:
    rows: list[ViewMetrics] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    # pooled per-pixel errors by split, for the aggregate medians
    _normals: dict = field(default_factory=dict, repr=False)
    _depths: dict = field(default_factory=dict, repr=False)

    def splits(self) -> list[str]:
        return list(dict.fromkeys(r.split for r in self.rows))

    def aggregate(self, split: str) -> dict:
        """Pixel-pooled mean/median errors and the mean per-view PSNR of one split."""
        rows = [r for r in self.rows if r.split == split]
        if not rows:
            raise EvalError(f"no rows for split {split!r}")
        n = np.concatenate(self._normals[split])
        d = np.concatenate(self._depths[split])
        return {"split": split, "views": len(rows),
                "normal_mean": float(n.mean()), "normal_median": float(np.median(n)),
                "depth_mean": float(d.mean()), "depth_median": float(np.median(d)),
                "psnr": float(np.mean([r.psnr for r in rows]))}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f for f in ViewMetrics.__dataclass_fields__])
            for r in self.rows:
                w.writerow([repr(v) if isinstance(v, float) else v for v in asdict(r).values()])

    def summary(self) -> str:
        lines = []
        for s in self.splits():
            a = self.aggregate(s)
            lines.append(f"[{s}] {a['views']} views: normal error mean {a['normal_mean']:.2f} deg "
                         f"(median {a['normal_median']:.2f}), depth error mean {a['depth_mean']:.3f}% "
                         f"(median {a['depth_median']:.3f}%), PSNR {a['psnr']:.2f} dB")
        return "\n".join(lines)


def _heatmap(err: np.ndarray, vmax: float) -> np.ndarray:
    """Black where invalid, blue (0) through red (vmax)."""
    t = np.clip(np.nan_to_num(err, nan=0.0) / vmax, 0.0, 1.0)
    img = np.stack([t, 1.0 - np.abs(2.0 * t - 1.0), 1.0 - t], axis=-1)
    img[~np.isfinite(err)] = 0.0
    return img


@dataclass
class Surface:
    """What evaluation renders: a mesh plus reflectance per vertex or as a function
    of the mesh's ``canonical`` attribute."""
    mesh: Mesh
    theta: np.ndarray | None = None
    theta_fn: Callable[[np.ndarray], np.ndarray] | None = None


def _as_surface(model, level: int) -> Surface:
    if isinstance(model, Surface):
        return model
    if isinstance(model, Mesh):
        return Surface(model, model.attributes.get("theta"))
    from .training import predict_mesh
    m = predict_mesh(model, level)
    return Surface(m, m.attributes["theta"])


def evaluate_split(surface: Surface, scene: SceneDataset, split: str, report: EvalReport,
                   pose_model=None, out_dir: Path | None = None, error_maps: bool = False) -> None:
    try:
        gt = load_ground_truth(scene)
    except SceneError as exc:
        raise EvalError(str(exc)) from None
    diag = gt.mesh.bbox_diagonal()
    ss = int((scene.ground_truth or {}).get("supersample", 1))
    report._normals.setdefault(split, [])
    report._depths.setdefault(split, [])
    for k, view in enumerate(scene.views):
        cam, light = view.camera, view.light
        if pose_model is not None:
            cam, light = pose_model.camera(k, cam), pose_model.light(k, light)
        r = render_hard(surface.mesh, cam, light, theta=surface.theta, theta_fn=surface.theta_fn,
                        supersample=ss)
        mask = r.mask & gt.masks[k]
        if not mask.any():
            raise EvalError(f"{split} view {k}: prediction and ground truth do not overlap")
        ne = normal_error(r.normals, gt.normals[k], mask)
        de = depth_error(r.depth, gt.depth[k], mask, diag)
        p = psnr(r.image, scene.image(k))
        report.rows.append(ViewMetrics(split, k, ne.mean, ne.median, de.mean, de.median, p, int(mask.sum())))
        report._normals[split].append(ne.values)
        report._depths[split].append(de.values)
        if out_dir is not None and error_maps:
            grid = np.concatenate([r.image, scene.image(k), _heatmap(ne.per_pixel, 30.0),
                                   _heatmap(de.per_pixel, 3.0)], axis=1)
            write_image(out_dir / f"errors_{split}_{k:03d}.png", grid)


def evaluate(model, scene: SceneDataset, heldout: SceneDataset | None = None, level: int = 5,
             out_dir=None, error_maps: bool = False, config: dict | None = None) -> EvalReport:
    """Render ``model`` at every input (and held-out) view and compare with ground truth.

    ``model`` is a trained ModelState (its mesh is extracted at ``level``), a
    Mesh with a ``theta`` attribute, or a :class:`Surface`.  Input views use the
    model's refined poses when it carries any; held-out views use their own.
    """
    surface = _as_surface(model, level)
    pose_model = model if hasattr(model, "camera") and getattr(model, "n_views", 0) == len(scene) else None
    out = Path(out_dir) if out_dir is not None else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    report = EvalReport(config=dict(config or {}))
    evaluate_split(surface, scene, "input", report, pose_model, out, error_maps)
    if heldout is not None:
        evaluate_split(surface, heldout, "heldout", report, None, out, error_maps)
    if out:
        report.write_csv(out / "eval.csv")
        prov = "config: " + json.dumps(report.config, sort_keys=True)
        (out / "summary.txt").write_text(report.summary() + "\n" + prov + "\n")
    return report
