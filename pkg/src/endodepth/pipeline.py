"""Staged pipeline: segment -> render -> filter -> cyclegan -> translate -> split -> depthnet -> eval.

Every stage writes only under ``<root>/<stage>`` and records a parameter hash
in ``.stage.json``. A stage whose hash matches a completed earlier run is
skipped; a mismatch is refused unless forced.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
import shutil
import time
from dataclasses import asdict
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .dataset import (DatasetManifest, assign_splits, brightness_filter, load_image_dir, load_manifest,
                      manifest_from_pairs)
from .depthnet import (DepthHyper, DepthLossConfig, ResUnetConfig, grid_search_beta, load_depthnet,
                       predict_depth, save_depthnet, train_depthnet)
from .metrics import (default_extractor, depth_metrics, extract_features, feature_stats, frechet_distance,
                      mean_report, report)
from .phantom import PhantomParams, generate_phantom, generate_trajectory
from .raycast import MeshRaycaster
from .render import (DepthEncoding, Lighting, apply_depth_of_field, apply_motion_blur, camera_intrinsics,
                     dequantize_depth, render_frame, save_png, write_sequence)
from .sim2real import (CycleGanHyper, DiscriminatorConfig, GeneratorConfig, LossWeights, load_generator,
                       select_checkpoint, train_cyclegan, translate)
from .volume import ShapeSpec, load_volume, make_synthetic_volume, save_obj, segment_colon

log = logging.getLogger(__name__)

STAGES = ("segment", "render", "filter", "cyclegan", "translate", "split", "depthnet", "eval")
UPSTREAM = {
    "segment": (),
    "render": ("segment",),
    "filter": ("render",),
    "cyclegan": ("filter", "render"),
    "translate": ("cyclegan", "filter"),
    "split": ("translate",),
    "depthnet": ("split",),
    "eval": ("depthnet", "split", "render", "translate"),
}
STAMP = ".stage.json"


class ConfigError(ValueError):
    """Invalid configuration; maps to exit code 1."""


class StageError(RuntimeError):
    """A stage could not run; maps to exit code 2."""


DEFAULTS: dict = {
    "seed": 0,
    "root": "runs/default",
    "threads": None,
    "segment": {
        "volume": None,
        "synthetic": {"kind": "tube", "dims": [48, 48, 64], "radius": 12.0, "noise_hu": 20.0},
        "fraction": 1 / 3,
        "min_voxels": 100_000,
        "dilate": 3,
        "edits": None,
    },
    "render": {
        "phantom": {},
        "frames": 14464,
        "fps": 30.0,
        "speed_cm_s": 1.0,
        "jitter_cm": 0.0,
        "size": 256,
        "fov": 120.0,
        "d_min": 0.01,
        "d_max": 20.0,
        "lighting": {},
        "motion_blur": 1,
        "dof": None,
        "real": {"dir": None, "letterbox": True, "radius_fraction": 1.0, "phantom_seed": 1000,
                 "frames": 14464, "lighting": {"texture": "vessels", "albedo": [0.78, 0.42, 0.38]}},
    },
    "filter": {"fraction": 0.10},
    "cyclegan": {"epochs": 300, "batch": 16, "lr": 2e-4, "beta1": 0.5, "beta2": 0.99, "alpha": 1.0,
                 "beta": 10.0, "adv_mode": "log", "cycle_mode": "l2", "augment": True, "max_steps": None,
                 "select_window": 1, "generator": {}, "discriminator": {}},
    "translate": {"batch": 16},
    "split": {"ratios": [0.8, 0.1, 0.1], "counts": None},
    "depthnet": {"epochs": 300, "batch": 16, "lr": 2e-4, "beta1": 0.9, "beta2": 0.99, "betas": [1.0],
                 "augment": True, "max_steps": None, "model": {}},
    "eval": {"fid_mode": "paper_diag", "fid_seed": 0},
}


# -- config ------------------------------------------------------------------------

def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and out[k]:
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> dict:
    """Defaults deep-merged with a YAML file (and optional overrides)."""
    user = {}
    if path is not None:
        try:
            user = yaml.safe_load(Path(path).read_text()) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: not parseable: {e}") from e
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    return _merge(_merge(DEFAULTS, user), overrides or {})


def bundled_config(name: str = "toy") -> Path:
    return Path(str(resources.files("endodepth") / "configs" / f"{name}.yaml"))


FREE_FORM = {"segment.synthetic", "render.real.lighting"}


def _unknown_keys(cfg: dict, ref: dict, prefix: str, out: list):
    for k, v in cfg.items():
        if k not in ref:
            out.append(f"{prefix}{k}: unknown key")
        elif isinstance(v, dict) and isinstance(ref[k], dict) and ref[k] and f"{prefix}{k}" not in FREE_FORM:
            _unknown_keys(v, ref[k], f"{prefix}{k}.", out)


def validate_config(cfg: dict) -> list[str]:
    """Static range checks; an empty list means the config is usable."""
    d: list[str] = []
    _unknown_keys(cfg, DEFAULTS, "", d)

    def need(cond, msg):
        if not cond:
            d.append(msg)

    def num(v):
        return isinstance(v, (int, float)) and not isinstance(v, bool)

    need(isinstance(cfg.get("seed"), int) and cfg["seed"] >= 0, "seed: must be a non-negative integer")
    need(cfg.get("threads") is None or (isinstance(cfg["threads"], int) and cfg["threads"] > 0),
         "threads: must be a positive integer")
    s = cfg["segment"]
    need(num(s["fraction"]) and 0 < s["fraction"] < 1, "segment.fraction: must be in (0,1)")
    need(isinstance(s["min_voxels"], int) and s["min_voxels"] >= 0, "segment.min_voxels: must be >= 0")
    need(isinstance(s["dilate"], int) and s["dilate"] >= 1, "segment.dilate: must be >= 1")
    need(s["volume"] is not None or s["synthetic"] is not None, "segment: give volume or synthetic")

    r = cfg["render"]
    need(num(r["fov"]) and 0 < r["fov"] < 180, "fov out of (0,180)")
    need(isinstance(r["size"], int) and r["size"] > 0 and r["size"] % 16 == 0,
         "render.size: must be a positive multiple of 16")
    need(isinstance(r["frames"], int) and r["frames"] >= 2, "render.frames: must be >= 2")
    need(num(r["fps"]) and r["fps"] > 0, "render.fps: must be > 0")
    need(num(r["speed_cm_s"]) and r["speed_cm_s"] > 0, "render.speed_cm_s: must be > 0")
    need(num(r["d_min"]) and num(r["d_max"]) and 0 < r["d_min"] < r["d_max"], "render: need 0 < d_min < d_max")
    need(isinstance(r["motion_blur"], int) and r["motion_blur"] >= 1 and r["motion_blur"] % 2 == 1,
         "render.motion_blur: must be an odd window >= 1")
    try:
        PhantomParams(**r["phantom"]).validate()
    except (TypeError, ValueError) as e:
        d.append(f"render.phantom: {e}")
    real = r["real"]
    for key, section in (("render.lighting", r["lighting"]), ("render.real.lighting", real.get("lighting", {}))):
        try:
            Lighting(**section)
        except TypeError as e:
            d.append(f"{key}: {e}")
    if s["synthetic"] is not None and s["volume"] is None:
        try:
            ShapeSpec(**s["synthetic"])
        except TypeError as e:
            d.append(f"segment.synthetic: {e}")
    if real.get("dir") is None:
        need(isinstance(real.get("frames"), int) and real["frames"] >= 2, "render.real.frames: must be >= 2")

    f = cfg["filter"]
    need(num(f["fraction"]) and 0 <= f["fraction"] < 0.5, "filter.fraction: must be in [0, 0.5)")

    for name in ("cyclegan", "depthnet"):
        c = cfg[name]
        need(isinstance(c["epochs"], int) and c["epochs"] >= 1, f"{name}.epochs: must be >= 1")
        need(isinstance(c["batch"], int) and c["batch"] >= 1, f"{name}.batch: must be >= 1")
        need(num(c["lr"]) and c["lr"] > 0, f"{name}.lr: must be > 0")
        need(num(c["beta1"]) and 0 <= c["beta1"] < 1 and num(c["beta2"]) and 0 <= c["beta2"] < 1,
             f"{name}: Adam betas must be in [0,1)")
        need(c["max_steps"] is None or (isinstance(c["max_steps"], int) and c["max_steps"] >= 1),
             f"{name}.max_steps: must be >= 1")
    g = cfg["cyclegan"]
    need(num(g["alpha"]) and g["alpha"] >= 0, "cyclegan.alpha: must be non-negative")
    need(num(g["beta"]) and g["beta"] >= 0, "cyclegan.beta: must be non-negative")
    need(g["adv_mode"] in ("log", "lsgan"), "cyclegan.adv_mode: must be log or lsgan")
    need(g["cycle_mode"] in ("l2", "l1"), "cyclegan.cycle_mode: must be l2 or l1")
    betas = cfg["depthnet"]["betas"]
    need(isinstance(betas, list) and len(betas) > 0, "depthnet.betas: must be a non-empty list")
    if isinstance(betas, list) and any((not num(b)) or b < 0 for b in betas):
        d.append("depthnet.betas: contains a negative or non-numeric value")

    sp = cfg["split"]
    if (sp["ratios"] is None) == (sp["counts"] is None):
        d.append("split: give exactly one of ratios or counts")
    elif sp["ratios"] is not None:
        need(len(sp["ratios"]) == 3 and all(num(x) and x >= 0 for x in sp["ratios"])
             and sum(sp["ratios"]) <= 1 + 1e-9, "split.ratios: three non-negative values summing to <= 1")
        need(len(sp["ratios"]) == 3 and sp["ratios"][0] > 0 and sp["ratios"][2] > 0,
             "split.ratios: train and test must be non-empty")
    else:
        need(len(sp["counts"]) == 3 and all(isinstance(x, int) and x >= 0 for x in sp["counts"]),
             "split.counts: three non-negative integers")
    e = cfg["eval"]
    need(e["fid_mode"] in ("full", "paper_diag"), "eval.fid_mode: must be full or paper_diag")
    return d


def stage_hash(cfg: dict, stage: str) -> str:
    """Hash of the stage section, the global seed, and all upstream stage hashes."""
    payload = {"stage": stage, "seed": cfg["seed"], "params": cfg[stage],
               "upstream": {u: stage_hash(cfg, u) for u in UPSTREAM[stage]}}
    blob = json.dumps(payload, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# -- run bookkeeping -------------------------------------------------------------------

class RunLock:
    def __init__(self, root: Path):
        self.path = root / ".lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise StageError(f"another run holds {self.path}; remove it if that run is dead") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


def _read_stamp(stage_dir: Path) -> dict | None:
    p = stage_dir / STAMP
    return json.loads(p.read_text()) if p.is_file() else None


def _write_stamp(stage_dir: Path, stage: str, h: str, complete: bool):
    (stage_dir / STAMP).write_text(json.dumps({"stage": stage, "hash": h, "complete": complete,
                                               "version": __version__}, sort_keys=True) + "\n")


def _append_runlog(root: Path, rec: dict):
    with open(root / "runlog.jsonl", "a") as f:
        f.write(json.dumps(rec, sort_keys=True) + "\n")


def _require(path: Path) -> Path:
    if not path.exists():
        raise StageError(f"missing upstream output: {path}")
    return path


def run_stage(cfg: dict, stage: str, root: str | Path | None = None, force: bool = False) -> dict:
    """Run one stage (lock must be held by the caller for multi-stage runs). Returns the run-log entry."""
    if stage not in STAGES:
        raise ConfigError(f"unknown stage {stage!r}; choose from {', '.join(STAGES)}")
    root = Path(root or cfg["root"])
    out = root / stage
    h = stage_hash(cfg, stage)
    stamp = _read_stamp(out)
    if stamp is not None and stamp["hash"] == h and stamp["complete"]:
        log.info("%s: up to date", stage)
        return {"stage": stage, "status": "up to date", "hash": h}
    if stamp is not None and stamp["hash"] != h and not force:
        raise StageError(f"{stage}: parameters changed since the run in {out} "
                         f"(hash {stamp['hash']} -> {h}); rerun with --force")
    if out.exists() and stamp is None and any(out.iterdir()) and not force:
        raise StageError(f"{stage}: {out} holds unrecognised files; rerun with --force")
    for u in UPSTREAM[stage]:
        st = _read_stamp(root / u)
        if st is None or not st["complete"]:
            raise StageError(f"missing upstream output: {root / u / STAMP} (run stage '{u}' first)")
    if out.exists():
        shutil.rmtree(out)
    out.mkdir(parents=True)
    _write_stamp(out, stage, h, complete=False)
    _configure_threads(cfg)
    start = time.time()
    log.info("%s: running (hash %s)", stage, h)
    try:
        outputs = _RUNNERS[stage](cfg, root, out)
    except (StageError, ConfigError):
        raise
    except Exception as e:
        raise StageError(f"{stage} failed: {type(e).__name__}: {e}") from e
    _write_stamp(out, stage, h, complete=True)
    rec = {"stage": stage, "status": "done", "hash": h, "start": start, "end": time.time(),
           "version": __version__, "inputs": [str(Path(u)) for u in UPSTREAM[stage]],
           "outputs": sorted(str(Path(o).relative_to(root)) for o in outputs)}
    _append_runlog(root, rec)
    return rec


def run_pipeline(cfg: dict, root: str | Path | None = None, stages=STAGES, force: bool = False) -> list[dict]:
    diags = validate_config(cfg)
    if diags:
        raise ConfigError("invalid config:\n  " + "\n  ".join(diags))
    root = Path(root or cfg["root"])
    with RunLock(root):
        return [run_stage(cfg, s, root, force) for s in stages]


def _configure_threads(cfg):
    import torch

    if cfg.get("threads"):
        torch.set_num_threads(int(cfg["threads"]))


# -- stage bodies ------------------------------------------------------------------------

def _encoding(cfg) -> DepthEncoding:
    return DepthEncoding(float(cfg["render"]["d_min"]), float(cfg["render"]["d_max"]))


def _segment(cfg, root, out):
    s = cfg["segment"]
    if s["volume"]:
        vol = load_volume(s["volume"])
    else:
        syn = dict(s["synthetic"])
        syn["dims"] = tuple(syn.get("dims", (64, 64, 64)))
        vol = make_synthetic_volume(ShapeSpec(**syn), seed=cfg["seed"])
    lumen, shell, mesh = segment_colon(vol, s["fraction"], s["min_voxels"], s["dilate"], s["edits"])
    save_obj(mesh, out / "mesh.obj")
    summary = {"lumen_voxels": int(lumen.sum()), "shell_voxels": int(shell.sum()),
               "vertices": int(len(mesh.vertices)), "triangles": int(len(mesh.triangles)),
               "surface_area": round(float(mesh.surface_area()), 6),
               "euler_characteristic": int(mesh.euler_characteristic())}
    (out / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n")
    return [out / "mesh.obj", out / "summary.json"]


def _render_set(seed, r, lighting: Lighting, frames: int, out_dir: Path, enc: DepthEncoding):
    params = PhantomParams(**r["phantom"])
    mesh, centerline = generate_phantom(seed, params)
    poses = generate_trajectory(centerline, r["fps"], r["speed_cm_s"], r["jitter_cm"], seed)
    idx = np.unique(np.round(np.linspace(0, len(poses) - 1, frames)).astype(int))
    intr = camera_intrinsics(r["size"], r["fov"])
    caster = MeshRaycaster(mesh.vertices, mesh.triangles)
    pairs = [render_frame(caster, poses[i], intr, lighting, enc, {"frame_index": int(i)}) for i in idx]
    if r["motion_blur"] > 1:
        for p, rgb in zip(pairs, apply_motion_blur([p.rgb for p in pairs], r["motion_blur"])):
            p.rgb = rgb
    if r["dof"]:
        for p in pairs:
            p.rgb = apply_depth_of_field(p.rgb, p.depth_cm, r["dof"]["focal_cm"], r["dof"]["max_blur_px"], enc)
    return write_sequence(pairs, out_dir, intr, enc)


def _render(cfg, root, out):
    r = cfg["render"]
    enc = _encoding(cfg)
    sim_paths = _render_set(cfg["seed"], r, Lighting(**r["lighting"]), r["frames"], out / "sim", enc)
    sim = manifest_from_pairs(sim_paths, out, "sim", enc=enc, seed=cfg["seed"])
    sim.save(out / "sim_manifest.tsv")
    real_cfg = r["real"]
    real_dir = out / "real"
    real_dir.mkdir()
    if real_cfg.get("dir"):
        imgs = load_image_dir(real_cfg["dir"], r["size"], real_cfg.get("letterbox", True),
                              real_cfg.get("radius_fraction", 1.0))
        paths = []
        for k, im in enumerate(imgs):
            p = real_dir / f"real_{k:06d}_rgb.png"
            save_png(p, im)
            paths.append((p, None))
    else:
        lighting = Lighting(**_merge(asdict(Lighting()), real_cfg.get("lighting", {})))
        pairs = _render_set(cfg["seed"] + real_cfg["phantom_seed"], r, lighting, real_cfg["frames"], real_dir, enc)
        for _, d in pairs:
            d.unlink()  # the real domain carries no ground truth
        paths = [(rgb, None) for rgb, _ in pairs]
    real = manifest_from_pairs(paths, out, "real", enc=enc, seed=cfg["seed"])
    real.save(out / "real_manifest.tsv")
    return [out / "sim_manifest.tsv", out / "real_manifest.tsv"]


def _filter(cfg, root, out):
    sim = load_manifest(_require(root / "render" / "sim_manifest.tsv"))
    filtered = brightness_filter(sim, cfg["filter"]["fraction"])
    filtered.save(out / "manifest.tsv")
    return [out / "manifest.tsv"]


def _cyclegan(cfg, root, out):
    c = cfg["cyclegan"]
    sim = load_manifest(_require(root / "filter" / "manifest.tsv"))
    real = load_manifest(_require(root / "render" / "real_manifest.tsv"))
    sim_imgs = [sim.load_rgb(e) for e in sim.entries if e.split != "excluded"]
    real_imgs = [real.load_rgb(e) for e in real.entries]
    hyper = CycleGanHyper(epochs=c["epochs"], batch_size=c["batch"], lr=c["lr"], beta1=c["beta1"],
                          beta2=c["beta2"], weights=LossWeights(c["alpha"], c["beta"]), adv_mode=c["adv_mode"],
                          cycle_mode=c["cycle_mode"], augment=c["augment"], seed=cfg["seed"],
                          max_steps=c["max_steps"], threads=cfg.get("threads"))
    state, paths = train_cyclegan(sim_imgs, real_imgs, hyper, GeneratorConfig(**c["generator"]),
                                  DiscriminatorConfig(**c["discriminator"]), checkpoint_dir=out / "checkpoints")
    best = select_checkpoint(state.history, c["select_window"])
    shutil.copyfile(paths[best - 1], out / "selected.ckpt")
    lines = ["epoch\tgen_objective"] + [f"{i + 1}\t{v!r}" for i, v in enumerate(state.history)]
    (out / "history.tsv").write_text("\n".join(lines) + "\n")
    steps = ["step\t" + "\t".join(state.steps[0])] + [
        f"{k}\t" + "\t".join(repr(v) for v in s.values()) for k, s in enumerate(state.steps)]
    (out / "steps.tsv").write_text("\n".join(steps) + "\n")
    (out / "selected.txt").write_text(f"epoch {best}\n")
    return [out / "selected.ckpt", out / "history.tsv", out / "steps.tsv"]


def _translate(cfg, root, out):
    ckpt = root / "cyclegan" / "selected.ckpt"
    if not ckpt.is_file():
        raise StageError(f"missing checkpoint: {ckpt}")
    sim = load_manifest(_require(root / "filter" / "manifest.tsv"))
    translated = translate(load_generator(ckpt), sim, out / "images", batch_size=cfg["translate"]["batch"])
    translated.save(out / "manifest.tsv")
    return [out / "manifest.tsv"]


def _split(cfg, root, out):
    m = load_manifest(_require(root / "translate" / "manifest.tsv"))
    sp = cfg["split"]
    m = assign_splits(m, counts=sp["counts"], ratios=sp["ratios"], seed=cfg["seed"])
    m.seed = cfg["seed"]
    m.save(out / "manifest.tsv")
    return [out / "manifest.tsv"]


def _pairs(m: DatasetManifest, split: str):
    entries = m.split(split)
    if not entries:
        return None
    return (np.stack([m.load_rgb(e) for e in entries]), np.stack([m.load_depth(e) for e in entries]))


def _depth_hyper(cfg, beta: float) -> DepthHyper:
    c = cfg["depthnet"]
    return DepthHyper(epochs=c["epochs"], batch_size=c["batch"], lr=c["lr"], beta1=c["beta1"], beta2=c["beta2"],
                      loss=DepthLossConfig(beta=float(beta)), augment=c["augment"], seed=cfg["seed"],
                      max_steps=c["max_steps"], threads=cfg.get("threads"))


def _depthnet(cfg, root, out):
    m = load_manifest(_require(root / "split" / "manifest.tsv"))
    train, val = _pairs(m, "train"), _pairs(m, "val")
    if train is None:
        raise StageError("split manifest has no training entries")
    c = cfg["depthnet"]
    model_cfg = ResUnetConfig(**c["model"])
    enc = m.encoding
    betas = [float(b) for b in c["betas"]]
    if len(betas) > 1:
        if val is None:
            raise StageError("grid search needs a validation split")
        grid = grid_search_beta(train, val, betas, _depth_hyper(cfg, betas[0]), model_cfg, enc)
        lines = ["beta\tbest_epoch\tval_rmse_cm\tval_rmse_norm"] + [
            f"{r['beta']!r}\t{r['best_epoch']}\t{r['val_rmse_cm']!r}\t{r['val_rmse_norm']!r}" for r in grid.report]
        (out / "grid.tsv").write_text("\n".join(lines) + "\n")
        beta, result = grid.best_beta, grid.models[grid.best_beta]
    else:
        beta = betas[0]
        result = train_depthnet(train, val, _depth_hyper(cfg, beta), model_cfg, enc)
    save_depthnet(result, out / "model.ckpt", _depth_hyper(cfg, beta), enc)
    keys = sorted(result.history[0])
    hist = ["\t".join(keys)] + ["\t".join(repr(h[k]) for k in keys) for h in result.history]
    (out / "history.tsv").write_text("\n".join(hist) + "\n")
    (out / "selected.txt").write_text(f"beta {beta!r}\nepoch {result.best_epoch}\n")
    return [out / "model.ckpt", out / "history.tsv"]


def _eval(cfg, root, out):
    m = load_manifest(_require(root / "split" / "manifest.tsv"))
    model, enc = load_depthnet(_require(root / "depthnet" / "model.ckpt"))
    test = m.split("test")
    if not test:
        raise StageError("split manifest has no test entries")
    rgb = np.stack([m.load_rgb(e) for e in test])
    pred = predict_depth(model, rgb, enc)
    reports = [depth_metrics(p, dequantize_depth(m.load_depth(e), enc)) for p, e in zip(pred, test)]
    report([mean_report(reports)], out, names=["translated"], stem="metrics")
    report(reports, out, names=[Path(e.rgb).name for e in test], stem="per_image")

    sim = load_manifest(_require(root / "filter" / "manifest.tsv"))
    real = load_manifest(_require(root / "render" / "real_manifest.tsv"))
    trans = load_manifest(_require(root / "translate" / "manifest.tsv"))
    ext = default_extractor(cfg["eval"]["fid_seed"])
    feats = {name: feature_stats(extract_features([mm.load_rgb(e) for e in mm.entries if e.split != "excluded"],
                                                  ext))
             for name, mm in (("sim", sim), ("translated", trans), ("real", real))}
    lines = ["pair\tpaper_diag\tfull"]
    for a in ("sim", "translated"):
        d1 = frechet_distance(feats[a], feats["real"], "paper_diag")
        d2 = frechet_distance(feats[a], feats["real"], "full")
        lines.append(f"{a}-real\t{d1:.6g}\t{d2:.6g}")
    (out / "fid.tsv").write_text("\n".join(lines) + "\n")
    return [out / "metrics.txt", out / "metrics.csv", out / "per_image.csv", out / "fid.tsv"]


_RUNNERS = {"segment": _segment, "render": _render, "filter": _filter, "cyclegan": _cyclegan,
            "translate": _translate, "split": _split, "depthnet": _depthnet, "eval": _eval}
