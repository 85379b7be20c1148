"""Command-line entry point. Exit codes: 0 success, 1 invalid input/config, 2 runtime failure."""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("endodepth")


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


# -- individual tools ------------------------------------------------------------

def cmd_segment(a):
    from .volume import ShapeSpec, load_volume, make_synthetic_volume, save_obj, segment_colon

    if a.volume:
        vol = load_volume(a.volume)
    else:
        vol = make_synthetic_volume(ShapeSpec(a.synthetic, dims=(48, 48, 64), radius=12.0), seed=a.seed)
    lumen, shell, mesh = segment_colon(vol, a.fraction, a.min_voxels, a.dilate, a.edits)
    save_obj(mesh, a.out)
    print(f"lumen voxels {int(lumen.sum())}, shell voxels {int(shell.sum())}, "
          f"{len(mesh.vertices)} vertices, {len(mesh.triangles)} triangles -> {a.out}")


def cmd_render(a):
    from .dataset import manifest_from_pairs
    from .pipeline import _render_set
    from .render import DepthEncoding, Lighting

    r = {"phantom": {}, "fps": a.fps, "speed_cm_s": a.speed, "jitter_cm": a.jitter, "size": a.size,
         "fov": a.fov, "motion_blur": a.motion_blur, "dof": None}
    lighting = Lighting(texture=a.texture)
    enc = DepthEncoding()
    out = Path(a.out)
    paths = _render_set(a.phantom_seed, r, lighting, a.frames, out, enc)
    manifest_from_pairs(paths, out, "sim", enc=enc, seed=a.phantom_seed).save(out / "manifest.tsv")
    print(f"{len(paths)} frames -> {out}")


def cmd_filter(a):
    from .dataset import brightness_filter, load_manifest

    m = brightness_filter(load_manifest(a.manifest), a.fraction)
    m.save(a.out or a.manifest)
    print(f"retained {sum(e.split != 'excluded' for e in m.entries)} of {len(m)}")


def cmd_split(a):
    from .dataset import assign_splits, load_manifest

    m = load_manifest(a.manifest)
    if a.counts:
        m = assign_splits(m, counts=_ints(a.counts), seed=a.seed)
    else:
        m = assign_splits(m, ratios=_floats(a.ratios), seed=a.seed)
    m.seed = a.seed
    m.save(a.out or a.manifest)
    print(" ".join(f"{k}={v}" for k, v in m.split_counts().items()))


def _resized(rgb, size):
    from PIL import Image

    if rgb.shape[:2] == (size, size):
        return rgb
    return np.asarray(Image.fromarray(rgb).resize((size, size), Image.BILINEAR))


def cmd_train_cyclegan(a):
    from .dataset import load_image_dir, load_manifest
    from .sim2real import CycleGanHyper, LossWeights, select_checkpoint, train_cyclegan

    if Path(a.sim).is_file():
        m = load_manifest(a.sim)
        sim = [_resized(m.load_rgb(e), a.size) for e in m.entries if e.split != "excluded"]
    else:
        sim = load_image_dir(a.sim, a.size)
    real = load_image_dir(a.real, a.size, letterbox=a.letterbox)
    hyper = CycleGanHyper(epochs=a.epochs, batch_size=a.batch, lr=a.lr, weights=LossWeights(a.alpha, a.beta),
                          seed=a.seed, max_steps=a.max_steps, adv_mode=a.adv_mode, cycle_mode=a.cycle_mode,
                          threads=a.threads)
    state, paths = train_cyclegan(sim, real, hyper, checkpoint_dir=a.out)
    best = select_checkpoint(state.history)
    shutil.copyfile(paths[best - 1], Path(a.out) / "selected.ckpt")
    print(f"{state.epoch} epochs; lowest generator objective at epoch {best}: {paths[best - 1]}")


def cmd_translate(a):
    from .dataset import load_manifest
    from .sim2real import translate

    out = translate(Path(a.ckpt), load_manifest(a.input), a.out)
    out.save(Path(a.out) / "manifest.tsv")
    print(f"translated {len(out)} images -> {a.out}")


def _manifest_pairs(path):
    from .dataset import load_manifest
    from .pipeline import _pairs

    m = load_manifest(path)
    return m, _pairs(m, "train"), _pairs(m, "val")


def _depth_hyper(a, beta):
    from .depthnet import DepthHyper, DepthLossConfig

    return DepthHyper(epochs=a.epochs, batch_size=a.batch, lr=a.lr, loss=DepthLossConfig(beta=beta), seed=a.seed,
                      max_steps=a.max_steps, threads=a.threads)


def cmd_train_depth(a):
    from .depthnet import save_depthnet, train_depthnet

    m, train, val = _manifest_pairs(a.manifest)
    if train is None:
        raise ValueError(f"{a.manifest} has no train entries")
    hyper = _depth_hyper(a, a.beta)
    res = train_depthnet(train, val, hyper, enc=m.encoding, checkpoint_dir=Path(a.out) / "checkpoints")
    path = save_depthnet(res, Path(a.out) / "model.ckpt", hyper, m.encoding)
    print(f"selected epoch {res.best_epoch} -> {path}")


def cmd_grid_search(a):
    from .depthnet import grid_search_beta, save_depthnet

    m, train, val = _manifest_pairs(a.manifest)
    if train is None or val is None:
        raise ValueError(f"{a.manifest} needs train and val entries")
    betas = _floats(a.betas)
    if any(b < 0 for b in betas):
        raise ValueError("betas must be non-negative")
    res = grid_search_beta(train, val, betas, _depth_hyper(a, betas[0] if betas else 1.0), enc=m.encoding)
    print("beta\tbest_epoch\tval_rmse_cm\tval_rmse_norm")
    for r in res.report:
        print(f"{r['beta']:g}\t{r['best_epoch']}\t{r['val_rmse_cm']:.6g}\t{r['val_rmse_norm']:.6g}")
    print(f"best beta {res.best_beta:g}")
    if a.out:
        save_depthnet(res.models[res.best_beta], Path(a.out) / "model.ckpt", _depth_hyper(a, res.best_beta),
                      m.encoding)


def cmd_predict(a):
    from PIL import Image

    from .dataset import letterbox_crop
    from .depthnet import load_depthnet, predict_depth
    from .render import quantize_depth, save_png

    model, enc = load_depthnet(a.ckpt)
    with Image.open(a.input) as im:
        rgb = np.asarray(im.convert("RGB"))
    if a.letterbox:
        rgb = letterbox_crop(rgb, a.radius_fraction, a.size)
    elif rgb.shape[:2] != (a.size, a.size):
        rgb = np.asarray(Image.fromarray(rgb).resize((a.size, a.size), Image.BILINEAR))
    depth = predict_depth(model, rgb, enc)
    save_png(a.out, quantize_depth(depth, enc))
    print(f"depth {depth.min():.3f}-{depth.max():.3f} cm -> {a.out}")


def cmd_eval_fid(a):
    from .dataset import load_image_dir
    from .metrics import extract_features, feature_stats, frechet_distance

    fa = feature_stats(extract_features(load_image_dir(a.a, a.size)))
    fb = feature_stats(extract_features(load_image_dir(a.b, a.size)))
    print(f"{frechet_distance(fa, fb, a.mode):.6g}")


def cmd_eval_depth(a):
    from .metrics import depth_metrics, mean_report, report
    from .render import DepthEncoding, dequantize_depth, load_png

    enc = DepthEncoding(a.d_min, a.d_max)
    gts = sorted(Path(a.gt).glob("*.png"))
    if not gts:
        raise ValueError(f"no PNG files in {a.gt}")
    reports, names = [], []
    for g in gts:
        p = Path(a.pred) / g.name
        if not p.is_file():
            raise FileNotFoundError(f"no prediction for {g.name} in {a.pred}")
        reports.append(depth_metrics(dequantize_depth(load_png(p), enc), dequantize_depth(load_png(g), enc)))
        names.append(g.name)
    print(report([mean_report(reports)], a.out, names=["mean"]), end="")
    if a.out:
        report(reports, a.out, names=names, stem="per_image")


def cmd_profile(a):
    from .metrics import point_profile, read_points
    from .render import DepthEncoding, dequantize_depth, load_png

    depth = dequantize_depth(load_png(a.depth), DepthEncoding(a.d_min, a.d_max))
    res = point_profile(depth, read_points(a.points), a.direction)
    print(json.dumps(res, indent=1))


# -- pipeline ----------------------------------------------------------------------

def _load_cfg(a):
    from .pipeline import bundled_config, load_config

    path = a.config
    if path is not None and not Path(path).exists() and Path(path).suffix == "":
        path = bundled_config(path)  # e.g. --config toy
    return load_config(path)


def cmd_validate(a):
    from .pipeline import ConfigError, validate_config

    diags = validate_config(_load_cfg(a))
    for d in diags:
        print(d)
    if diags:
        raise ConfigError(f"{len(diags)} problem(s)")
    print("config ok")


def cmd_run(a):
    from .pipeline import STAGES, run_pipeline

    cfg = _load_cfg(a)
    stages = a.stages.split(",") if a.stages else STAGES
    for rec in run_pipeline(cfg, a.root, stages, a.force):
        print(f"{rec['stage']}: {rec['status']}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="endodepth", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("segment", help="extract a colon wall mesh from a CT-like volume")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--volume", help="volume header (.hdr)")
    src.add_argument("--synthetic", choices=["sphere", "torus", "tube"])
    s.add_argument("--fraction", type=float, default=1 / 3)
    s.add_argument("--min-voxels", type=int, default=100_000)
    s.add_argument("--dilate", type=int, default=3)
    s.add_argument("--edits")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_segment)

    s = sub.add_parser("render", help="render a phantom fly-through")
    s.add_argument("--phantom-seed", type=int, default=0)
    s.add_argument("--frames", type=int, default=64)
    s.add_argument("--fps", type=float, default=30.0)
    s.add_argument("--speed", type=float, default=1.0)
    s.add_argument("--jitter", type=float, default=0.0)
    s.add_argument("--fov", type=float, default=120.0)
    s.add_argument("--size", type=int, default=256)
    s.add_argument("--motion-blur", type=int, default=1)
    s.add_argument("--texture", choices=["vessels"])
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("filter", help="exclude the darkest and brightest frames")
    s.add_argument("--manifest", required=True)
    s.add_argument("--fraction", type=float, default=0.10)
    s.add_argument("--out")
    s.set_defaults(func=cmd_filter)

    s = sub.add_parser("split", help="assign train/val/test")
    s.add_argument("--manifest", required=True)
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--counts")
    g.add_argument("--ratios")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("train-cyclegan", help="train sim<->real translation")
    s.add_argument("--sim", required=True)
    s.add_argument("--real", required=True)
    s.add_argument("--size", type=int, default=256)
    s.add_argument("--letterbox", action="store_true", help="crop the circular view of real frames")
    s.add_argument("--epochs", type=int, default=300)
    s.add_argument("--batch", type=int, default=16)
    s.add_argument("--lr", type=float, default=2e-4)
    s.add_argument("--alpha", type=float, default=1.0)
    s.add_argument("--beta", type=float, default=10.0)
    s.add_argument("--adv-mode", choices=["log", "lsgan"], default="log")
    s.add_argument("--cycle-mode", choices=["l2", "l1"], default="l2")
    s.add_argument("--max-steps", type=int)
    s.add_argument("--threads", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_cyclegan)

    s = sub.add_parser("translate", help="apply a trained generator to a manifest")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_translate)

    for name, fn in (("train-depth", cmd_train_depth), ("grid-search", cmd_grid_search)):
        s = sub.add_parser(name, help="train the depth network" if name == "train-depth"
                           else "train once per SSIM weight and keep the best")
        s.add_argument("--manifest", required=True)
        if name == "train-depth":
            s.add_argument("--beta", type=float, default=1.0)
        else:
            s.add_argument("--betas", default="0.001,0.01,0.1,0,1,10,100")
        s.add_argument("--epochs", type=int, default=300)
        s.add_argument("--batch", type=int, default=16)
        s.add_argument("--lr", type=float, default=2e-4)
        s.add_argument("--max-steps", type=int)
        s.add_argument("--threads", type=int)
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--out", required=name == "train-depth")
        s.set_defaults(func=fn)

    s = sub.add_parser("predict", help="depth map for one image")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--size", type=int, default=256)
    s.add_argument("--letterbox", action="store_true")
    s.add_argument("--radius-fraction", type=float, default=1.0)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("eval-fid", help="Frechet distance between two image folders")
    s.add_argument("--a", required=True)
    s.add_argument("--b", required=True)
    s.add_argument("--mode", choices=["paper_diag", "full"], default="paper_diag")
    s.add_argument("--size", type=int, default=256)
    s.set_defaults(func=cmd_eval_fid)

    s = sub.add_parser("eval-depth", help="depth metrics for matching 8-bit depth PNGs")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--d-min", type=float, default=0.01)
    s.add_argument("--d-max", type=float, default=20.0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval_depth)

    s = sub.add_parser("profile", help="depth along a list of x,y points")
    s.add_argument("--depth", required=True)
    s.add_argument("--points", required=True)
    s.add_argument("--direction", choices=["increasing", "decreasing"], default="increasing")
    s.add_argument("--d-min", type=float, default=0.01)
    s.add_argument("--d-max", type=float, default=20.0)
    s.set_defaults(func=cmd_profile)

    s = sub.add_parser("run", help="run pipeline stages from a config")
    s.add_argument("--config", help="YAML file, or the name of a bundled config (toy)")
    s.add_argument("--root", help="output root (overrides the config)")
    s.add_argument("--stages", help="comma-separated subset, in pipeline order")
    s.add_argument("--force", action="store_true", help="rerun stages whose parameters changed")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("validate", help="check a config without running it")
    s.add_argument("--config")
    s.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    from .pipeline import ConfigError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ConfigError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - any other failure is a runtime error
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
