import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from endodepth.cli import main
from endodepth.pipeline import (DEFAULTS, STAGES, ConfigError, RunLock, StageError, bundled_config, load_config,
                                run_pipeline, run_stage, stage_hash, validate_config)
from endodepth.render import save_png

MICRO = {
    "seed": 3,
    "threads": 1,
    "segment": {"synthetic": {"kind": "sphere", "dims": [24, 24, 24], "radius": 6.0}, "min_voxels": 100},
    "render": {"phantom": {"length": 6.0, "segments": 24, "ring_step": 0.3}, "frames": 12, "size": 32,
               "real": {"frames": 12}},
    "cyclegan": {"batch": 4, "max_steps": 3, "generator": {"base_filters": 4, "filter_growth": 4},
                 "discriminator": {"base_filters": 4, "filter_growth": 4}},
    "split": {"ratios": [0.5, 0.25, 0.25]},
    "depthnet": {"batch": 4, "max_steps": 3, "model": {"base_filters": 4, "filter_growth": 4}},
}


@pytest.fixture(scope="module")
def micro_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = load_config(overrides=MICRO)
    recs = run_pipeline(cfg, root)
    return cfg, root, recs


# -- config --------------------------------------------------------------------------

def test_defaults_are_valid():
    cfg = load_config()
    assert validate_config(cfg) == []
    # published settings
    assert cfg["render"]["size"] == 256 and cfg["render"]["fov"] == 120.0
    assert (cfg["cyclegan"]["alpha"], cfg["cyclegan"]["beta"], cfg["cyclegan"]["lr"]) == (1.0, 10.0, 2e-4)


def test_bundled_toy_config_is_valid():
    cfg = load_config(bundled_config("toy"))
    assert validate_config(cfg) == []
    assert cfg["render"]["frames"] == 64 and cfg["render"]["size"] == 32
    assert cfg["cyclegan"]["max_steps"] == 200 and cfg["depthnet"]["max_steps"] == 200
    assert cfg["threads"] == 1


def test_fov_diagnostic():
    assert "fov out of (0,180)" in validate_config(load_config(overrides={"render": {"fov": 200}}))


def test_negative_beta_diagnostic():
    diags = validate_config(load_config(overrides={"depthnet": {"betas": [0.1, -1]}}))
    assert any("depthnet.betas" in d for d in diags)
    diags = validate_config(load_config(overrides={"cyclegan": {"beta": -10}}))
    assert any("cyclegan.beta" in d for d in diags)


def test_unknown_key_and_bad_sections():
    diags = validate_config(load_config(overrides={"render": {"fvo": 90}, "split": {"counts": [1, 2, 3]}}))
    assert "render.fvo: unknown key" in diags
    assert any(d.startswith("split:") for d in diags)
    diags = validate_config(load_config(overrides={"render": {"phantom": {"fold_amplitude": 5.0}}}))
    assert any(d.startswith("render.phantom") for d in diags)


def test_unparseable_config(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("seed: [1,\n")
    with pytest.raises(ConfigError):
        load_config(p)


def test_stage_hash_stable_and_propagates():
    a, b = load_config(), load_config()
    assert all(stage_hash(a, s) == stage_hash(b, s) for s in STAGES)
    c = load_config(overrides={"filter": {"fraction": 0.2}})
    assert stage_hash(c, "render") == stage_hash(a, "render")
    for s in ("filter", "cyclegan", "translate", "split", "depthnet", "eval"):
        assert stage_hash(c, s) != stage_hash(a, s)


# -- pipeline runs ------------------------------------------------------------------------

def test_micro_run_completes(micro_run):
    cfg, root, recs = micro_run
    assert [r["stage"] for r in recs] == list(STAGES)
    assert all(r["status"] == "done" for r in recs)
    for rel in ("render/sim_manifest.tsv", "render/real_manifest.tsv", "filter/manifest.tsv",
                "translate/manifest.tsv", "split/manifest.tsv", "cyclegan/selected.ckpt", "depthnet/model.ckpt",
                "eval/metrics.txt", "eval/metrics.csv", "eval/fid.tsv", "segment/mesh.obj"):
        assert (root / rel).is_file(), rel
    assert not (root / ".lock").exists()
    log = [json.loads(line) for line in (root / "runlog.jsonl").read_text().splitlines()]
    assert [r["stage"] for r in log] == list(STAGES)


def test_stages_write_only_inside_their_directory(micro_run):
    _, root, _ = micro_run
    top = {p.name for p in root.iterdir()}
    assert top == set(STAGES) | {"runlog.jsonl"}
    for rec in (json.loads(x) for x in (root / "runlog.jsonl").read_text().splitlines()):
        assert all(o.startswith(rec["stage"] + "/") for o in rec["outputs"])


def test_manifests_record_seed_and_relative_paths(micro_run):
    _, root, _ = micro_run
    text = (root / "split" / "manifest.tsv").read_text()
    assert "# seed 3" in text
    assert str(root) not in text
    assert "../translate/images/frame_" in text


def test_rerun_is_up_to_date(micro_run):
    cfg, root, _ = micro_run
    recs = run_pipeline(cfg, root)
    assert all(r["status"] == "up to date" for r in recs)


def test_changed_parameters_need_force(micro_run, tmp_path):
    cfg, root, _ = micro_run
    changed = load_config(overrides={**MICRO, "split": {"ratios": [0.25, 0.25, 0.5]}})
    with pytest.raises(StageError, match="--force"):
        run_stage(changed, "split", root)


def test_force_reruns_changed_stage(tmp_path):
    cfg = load_config(overrides=MICRO)
    run_pipeline(cfg, tmp_path, stages=("segment",))
    changed = load_config(overrides={**MICRO, "segment": {**MICRO["segment"], "dilate": 2}})
    with pytest.raises(StageError):
        run_pipeline(changed, tmp_path, stages=("segment",))
    rec = run_pipeline(changed, tmp_path, stages=("segment",), force=True)[0]
    assert rec["status"] == "done"


def test_missing_upstream_is_named(tmp_path):
    cfg = load_config(overrides=MICRO)
    with pytest.raises(StageError, match=r"missing upstream output: .*render"):
        run_stage(cfg, "filter", tmp_path)


def test_missing_checkpoint_before_translate(micro_run, tmp_path, capsys):
    import shutil

    _, root, _ = micro_run
    work = tmp_path / "copy"
    shutil.copytree(root, work)
    (work / "cyclegan" / "selected.ckpt").unlink()
    shutil.rmtree(work / "translate")
    cfg_path = tmp_path / "micro.yaml"
    cfg_path.write_text(yaml.safe_dump(MICRO))
    code = main(["run", "--config", str(cfg_path), "--root", str(work), "--stages", "translate"])
    assert code == 2
    assert str(work / "cyclegan" / "selected.ckpt") in capsys.readouterr().err


def test_lock_blocks_concurrent_runs(tmp_path):
    cfg = load_config(overrides=MICRO)
    with RunLock(tmp_path):
        with pytest.raises(StageError, match="lock"):
            run_pipeline(cfg, tmp_path, stages=("segment",))
    assert run_pipeline(cfg, tmp_path, stages=("segment",))[0]["status"] == "done"


def test_invalid_config_refused_before_running(tmp_path):
    cfg = load_config(overrides={"render": {"fov": 0}})
    with pytest.raises(ConfigError):
        run_pipeline(cfg, tmp_path)
    assert not any(tmp_path.iterdir())


# -- CLI --------------------------------------------------------------------------------

def test_cli_validate_exit_codes(tmp_path, capsys):
    good = tmp_path / "good.yaml"
    good.write_text(yaml.safe_dump(MICRO))
    assert main(["validate", "--config", str(good)]) == 0
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({"render": {"fov": 200}}))
    assert main(["validate", "--config", str(bad)]) == 1
    assert "fov out of (0,180)" in capsys.readouterr().out
    assert main(["validate", "--config", "toy"]) == 0


def test_cli_bad_arguments():
    assert main(["no-such-command"]) == 1
    assert main(["filter"]) == 1


def test_cli_filter_and_split(tmp_path, capsys):
    rng = np.random.default_rng(0)
    lines = ["rgb\tdepth\tsplit\tbrightness\tsource\treason"]
    for k in range(20):
        save_png(tmp_path / f"f{k}.png", rng.integers(0, 256, (8, 8, 3), dtype=np.uint8))
        lines.append(f"f{k}.png\t-\tunassigned\t{k / 20!r}\tsim\t-")
    (tmp_path / "m.tsv").write_text("\n".join(lines) + "\n")
    assert main(["filter", "--manifest", str(tmp_path / "m.tsv"), "--out", str(tmp_path / "f.tsv")]) == 0
    assert "retained 16 of 20" in capsys.readouterr().out
    assert main(["split", "--manifest", str(tmp_path / "f.tsv"), "--counts", "10,3,3", "--seed", "1"]) == 0
    out = capsys.readouterr().out
    assert "train=10 val=3 test=3" in out
    assert main(["split", "--manifest", str(tmp_path / "f.tsv"), "--counts", "10,5,5"]) == 1


def test_cli_segment_and_profile(tmp_path, capsys):
    assert main(["segment", "--synthetic", "sphere", "--min-voxels", "100", "--out", str(tmp_path / "m.obj")]) == 0
    assert (tmp_path / "m.obj").read_text().startswith("v ")
    depth = np.tile(np.arange(0, 250, 50, dtype=np.uint8), (3, 1))
    save_png(tmp_path / "d.png", depth)
    (tmp_path / "pts.txt").write_text("0,1\n1,1\n2,1\n3,1\n4,1\n")
    assert main(["profile", "--depth", str(tmp_path / "d.png"), "--points", str(tmp_path / "pts.txt")]) == 0
    res = json.loads(capsys.readouterr().out.split("m.obj\n", 1)[-1])
    assert res["monotonic"] and res["linear_fit_r2"] == pytest.approx(1.0)
    (tmp_path / "far.txt").write_text("0,1\n1,1\n9,1\n")
    assert main(["profile", "--depth", str(tmp_path / "d.png"), "--points", str(tmp_path / "far.txt")]) == 1


def test_cli_eval_depth_and_fid(tmp_path, capsys):
    rng = np.random.default_rng(1)
    for d in ("pred", "gt", "a", "b"):
        (tmp_path / d).mkdir()
    for k in range(3):
        g = rng.integers(10, 200, (8, 8), dtype=np.uint8)
        save_png(tmp_path / "gt" / f"{k}.png", g)
        save_png(tmp_path / "pred" / f"{k}.png", g)
        save_png(tmp_path / "a" / f"{k}.png", rng.integers(0, 256, (32, 32, 3), dtype=np.uint8))
        save_png(tmp_path / "b" / f"{k}.png", rng.integers(0, 256, (32, 32, 3), dtype=np.uint8))
    assert main(["eval-depth", "--pred", str(tmp_path / "pred"), "--gt", str(tmp_path / "gt"),
                 "--out", str(tmp_path / "rep")]) == 0
    row = capsys.readouterr().out.splitlines()[1].split()
    assert row == ["mean", "0", "0", "0", "0", "1", "1", "1"]
    assert (tmp_path / "rep" / "per_image.csv").is_file()
    assert main(["eval-fid", "--a", str(tmp_path / "a"), "--b", str(tmp_path / "a"), "--size", "32"]) == 0
    assert float(capsys.readouterr().out) == 0.0
    assert main(["eval-fid", "--a", str(tmp_path / "a"), "--b", str(tmp_path / "b"), "--size", "32",
                 "--mode", "full"]) == 0
    assert float(capsys.readouterr().out) > 0


def test_cli_predict(micro_run, tmp_path):
    _, root, _ = micro_run
    from endodepth.render import load_png

    img = next((root / "translate" / "images").glob("*_rgb.png"))
    out = tmp_path / "d.png"
    assert main(["predict", "--ckpt", str(root / "depthnet" / "model.ckpt"), "--in", str(img), "--out", str(out),
                 "--size", "32"]) == 0
    assert load_png(out).shape == (32, 32)
    assert main(["predict", "--ckpt", str(tmp_path / "none.ckpt"), "--in", str(img), "--out", str(out)]) == 2


def test_cli_translate_missing_checkpoint(micro_run, tmp_path, capsys):
    _, root, _ = micro_run
    code = main(["translate", "--ckpt", str(tmp_path / "gone.ckpt"), "--in", str(root / "filter" / "manifest.tsv"),
                 "--out", str(tmp_path / "t")])
    assert code == 2
    assert "gone.ckpt" in capsys.readouterr().err


def test_defaults_cover_every_stage():
    assert set(STAGES) <= set(DEFAULTS)
    assert Path(bundled_config("toy")).is_file()


def test_cli_train_cyclegan_from_manifest(micro_run, tmp_path):
    _, root, _ = micro_run
    out = tmp_path / "gan"
    code = main(["train-cyclegan", "--sim", str(root / "filter" / "manifest.tsv"), "--real", str(root / "render" / "real"),
                 "--size", "32", "--max-steps", "1", "--batch", "4", "--threads", "1", "--out", str(out)])
    assert code == 0
    assert (out / "selected.ckpt").is_file() and (out / "epoch_001.ckpt").is_file()
