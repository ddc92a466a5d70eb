"""Command-line entry point: ``ringflow {synth,train,render,export,eval}``.

Every path is resolved against ``--workdir``.  Tunables come from, in order
of precedence, command-line flags, the JSON file given by ``--config`` and
the built-in defaults; the resolved values are printed at startup and
stored in every checkpoint and report.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .geometry import export_obj, export_ply
from .renderer import Camera, Light, SoftRasterConfig, render
from .scene import SynthSpec, View, generate_synthetic, load_scene, write_image


@dataclass
class RunConfig:
    steps: int = 20
    lambda_reg: float = 0.01
    alpha: float = 0.5
    mask_weight: float = 0.0
    sigma: float = 1e-4
    gamma: float = 1e-4
    lr: float = 1e-4
    brdf_lr: float | None = None
    pose_lr: float | None = None
    epochs: int = 2000
    level: int = 3
    seed: int = 0
    stages: list | None = None
    checkpoint_every: int = 0
    rotate_domain: bool = True

    @classmethod
    def resolve(cls, args: argparse.Namespace, config_file: Path | None) -> RunConfig:
        values = {}
        if config_file is not None:
            try:
                doc = json.loads(config_file.read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise UsageError(f"cannot read config {config_file}: {exc}") from None
            unknown = set(doc) - {f.name for f in fields(cls)}
            if unknown:
                raise UsageError(f"unknown config keys: {sorted(unknown)}")
            values.update(doc)
        for f in fields(cls):
            v = getattr(args, f.name, None)
            if v is not None:
                values[f.name] = v
        return cls(**values)

    def schedule(self):
        from .training import Stage, TrainSchedule
        stages = tuple(Stage(*s) for s in self.stages) if self.stages else ()
        return TrainSchedule(self.epochs, self.level, stages, self.checkpoint_every, self.rotate_domain)

    def loss(self):
        from .training import LossConfig
        return LossConfig(self.lambda_reg, self.alpha, self.mask_weight)

    def raster(self) -> SoftRasterConfig:
        return SoftRasterConfig(sigma=self.sigma, gamma=self.gamma)

    def model(self):
        from .training import ModelConfig
        return ModelConfig(steps=self.steps, lr=self.lr, brdf_lr=self.brdf_lr, pose_lr=self.pose_lr)


class UsageError(Exception):
    pass


def _parse_stages(text: str) -> list:
    try:
        return [[int(v) for v in part.split(":")] for part in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError("stages are level:downsample:epochs[,...]") from None


def _add_tunables(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("tunables (override --config)")
    g.add_argument("--steps", type=int, help="Euler steps of the shape flow")
    g.add_argument("--lambda-reg", dest="lambda_reg", type=float)
    g.add_argument("--alpha", type=float)
    g.add_argument("--mask-weight", dest="mask_weight", type=float)
    g.add_argument("--sigma", type=float)
    g.add_argument("--gamma", type=float)
    g.add_argument("--lr", type=float)
    g.add_argument("--brdf-lr", dest="brdf_lr", type=float, help="BRDF network learning rate (default: --lr)")
    g.add_argument("--pose-lr", dest="pose_lr", type=float, help="pose refinement learning rate (default: --lr)")
    g.add_argument("--epochs", type=int)
    g.add_argument("--level", type=int, help="icosphere level used for training")
    g.add_argument("--seed", type=int)
    g.add_argument("--stages", type=_parse_stages, help="coarse-to-fine stages level:downsample:epochs,...")
    g.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ringflow", description=__doc__.splitlines()[0])
    p.add_argument("--workdir", default=".", help="base directory for all relative paths")
    p.add_argument("--config", help="JSON file with tunables")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="render a synthetic multi-view scene")
    s.add_argument("--preset", required=True, help="shape preset: sphere, ellipsoid, bumpy, striped, stress")
    s.add_argument("--material", help="glossy, lambertian or striped (default depends on the shape)")
    s.add_argument("--views", type=int, default=30)
    s.add_argument("--res", type=int, default=96)
    s.add_argument("--light", choices=("collocated", "near", "distant"), default="collocated")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--supersample", type=int, default=3)
    s.add_argument("--out", default="scene")

    t = sub.add_parser("train", help="fit shape and reflectance to a scene")
    t.add_argument("--scene", required=True)
    t.add_argument("--out", default="run")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--refine-poses", dest="refine_poses", nargs="?", const="cameras",
                   choices=("cameras", "lights", "both"), help="also optimize per-view poses")
    t.add_argument("--refine-mode", dest="refine_mode", choices=("joint", "posthoc"), default="joint")
    t.add_argument("--refine-epochs", dest="refine_epochs", type=int, default=100,
                   help="extra epochs for post-hoc refinement")
    t.add_argument("--save-predictions", dest="save_predictions", action="store_true",
                   help="store the final training-view renders as .npy")
    _add_tunables(t)

    r = sub.add_parser("render", help="render a trained model from new views or lights")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--view-file", dest="view_file", required=True,
                   help="JSON with a 'views' list in manifest format (a scene manifest works)")
    r.add_argument("--light-file", dest="light_file", help="JSON with a 'lights' list of {mode, xyz}")
    r.add_argument("--swap-brdf", dest="swap_brdf", help="take the BRDF network from this checkpoint")
    r.add_argument("--level", type=int, help="icosphere level (default: the training level)")
    r.add_argument("--out", default="renders")
    r.add_argument("--save-float", dest="save_float", action="store_true", help="also write .npy images")

    e = sub.add_parser("export", help="extract the reconstructed mesh")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--level", type=int, default=5)
    e.add_argument("--format", choices=("obj", "ply"), default="obj")
    e.add_argument("--out", help="output file (default mesh_L<level>.<format>)")

    v = sub.add_parser("eval", help="compare a trained model with ground truth")
    v.add_argument("--ckpt", required=True)
    v.add_argument("--scene", required=True)
    v.add_argument("--heldout")
    v.add_argument("--level", type=int, default=5)
    v.add_argument("--out", default="eval")
    v.add_argument("--error-maps", dest="error_maps", action="store_true")
    return p


# ------------------------------------------------------------------ commands

def cmd_synth(args, wd: Path, cfg: RunConfig) -> None:
    spec = SynthSpec(shape=args.preset, material=args.material, views=args.views, resolution=args.res,
                     light=args.light, seed=args.seed, supersample=args.supersample)
    ds, _ = generate_synthetic(spec, wd / args.out)
    print(f"wrote {len(ds)} views to {ds.root}")


def cmd_train(args, wd: Path, cfg: RunConfig) -> None:
    from .training import ModelState, refine_calibration, train
    scene = load_scene(wd / args.scene, min_views=2)
    out = wd / args.out
    run = {**asdict(cfg), "scene": str(args.scene)}
    if args.resume:
        model = ModelState.load(wd / args.resume)
        model.run_config = {**model.run_config, **run}
    else:
        model = ModelState(cfg.model(), cfg.seed, len(scene), run)
    joint = args.refine_poses if args.refine_mode == "joint" else None
    res = train(scene, model, cfg.schedule(), cfg.loss(), cfg.raster(), out, refine=joint,
                save_predictions=args.save_predictions, progress=_progress(cfg.schedule().total_epochs))
    if args.refine_poses and args.refine_mode == "posthoc":
        _, rep = refine_calibration(scene, model, args.refine_poses, args.refine_epochs,
                                    schedule=cfg.schedule(), loss_cfg=cfg.loss(), raster=cfg.raster(),
                                    out_dir=out)
        print(f"post-hoc refinement: mean rotation change {rep.mean_rotation_change:.4f} deg")
    print(f"checkpoint: {res.checkpoint}")


def _progress(total: int):
    def report(row: dict) -> None:
        e = row["epoch"] + 1
        if e == total or e % 50 == 0:
            print(f"epoch {e}/{total}  rgb {row['loss_rgb']:.6f}  reg {row['loss_reg']:.3e}", flush=True)
    return report


def _read_views(path: Path) -> list[View]:
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read view file {path}: {exc}") from None
    entries = doc.get("views", [])
    if not entries:
        raise UsageError(f"{path} lists no views")
    return [View.from_dict({"image": "", **v}, k) for k, v in enumerate(entries)]


def _read_lights(path: Path) -> list[Light]:
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read light file {path}: {exc}") from None
    out = []
    for d in doc.get("lights", []):
        xyz = np.asarray(d.get("xyz", [0.0, 0.0, 0.0]), dtype=np.float64)
        mode = d["mode"]
        out.append(Light(mode, position=xyz if mode == "near" else None,
                         direction=xyz if mode == "distant" else None))
    if not out:
        raise UsageError(f"{path} lists no lights")
    return out


def cmd_render(args, wd: Path, cfg: RunConfig) -> None:
    from .training import ModelState, predict_mesh, swap_brdf
    model = ModelState.load(wd / args.ckpt)
    if args.swap_brdf:
        model = swap_brdf(model, ModelState.load(wd / args.swap_brdf))
    views = _read_views(wd / args.view_file)
    lights = _read_lights(wd / args.light_file) if args.light_file else [v.light for v in views]
    if len(lights) == 1 and len(views) > 1:
        lights = lights * len(views)
    elif len(views) == 1 and len(lights) > 1:
        views = views * len(lights)
    if len(lights) != len(views):
        raise UsageError(f"{len(views)} views but {len(lights)} lights")
    rc = RunConfig(**{k: v for k, v in model.run_config.items() if k in RunConfig.__dataclass_fields__})
    level = args.level if args.level is not None else rc.schedule().resolved()[-1].level
    mesh = predict_mesh(model, level)
    out = wd / args.out
    out.mkdir(parents=True, exist_ok=True)
    for k, (v, light) in enumerate(zip(views, lights)):
        r = render(mesh, mesh.attributes["theta"], v.camera, light, rc.raster())
        write_image(out / f"render_{k:03d}.png", r.image.data)
        if args.save_float:
            np.save(out / f"render_{k:03d}.npy", r.image.data)
    print(f"wrote {len(views)} renders to {out}")


def cmd_export(args, wd: Path, cfg: RunConfig) -> None:
    from .training import ModelState, predict_mesh
    model = ModelState.load(wd / args.ckpt)
    mesh = predict_mesh(model, args.level)
    path = wd / (args.out or f"mesh_L{args.level}.{args.format}")
    path.parent.mkdir(parents=True, exist_ok=True)
    comment = "ringflow run config " + json.dumps(model.run_config, sort_keys=True)
    (export_obj if args.format == "obj" else export_ply)(mesh, path, comment)
    print(f"wrote {mesh.n_vertices} vertices, {mesh.n_faces} faces to {path}")


def cmd_eval(args, wd: Path, cfg: RunConfig) -> None:
    from .evaluation import evaluate
    from .training import ModelState
    model = ModelState.load(wd / args.ckpt)
    scene = load_scene(wd / args.scene)
    held = load_scene(wd / args.heldout) if args.heldout else None
    rep = evaluate(model, scene, held, args.level, wd / args.out, args.error_maps, config=model.run_config)
    print(rep.summary())


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "render": cmd_render, "export": cmd_export,
            "eval": cmd_eval}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    wd = Path(args.workdir)
    try:
        cfg = RunConfig.resolve(args, wd / args.config if args.config else None)
        print("config: " + json.dumps(asdict(cfg), sort_keys=True), file=sys.stderr)
        COMMANDS[args.command](args, wd, cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"ringflow: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report any runtime failure as exit 1
        print(f"ringflow {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
