import json
from pathlib import Path

import numpy as np

from mvattn.cli import config_to_dict, main, write_pgm
from mvattn.model import ModelConfig
from mvattn.training import TrainConfig


def run_cli(*args):
    return main([str(a) for a in args])


def tiny_config_file(tmp_path, **train_overrides):
    model_cfg = ModelConfig(
        depth=2,
        model_dim=16,
        heads=2,
        adapter_bottleneck_ratio=2,
        adapter_heads=1,
        lora_rank=2,
        supervised_layers=(1,),
        patch_rows=2,
        patch_cols=2,
        n_views=2,
        latent_dim=4,
        ffn_mult=2,
    )
    defaults = dict(
        steps=4,
        n_scenes=2,
        points_per_scene=10,
        n_neg=4,
        pairs_per_step=16,
        image_size=32,
        eval_scenes=2,
        curriculum_warmup=1,
        curriculum_ramp=1,
        lr_warmup_steps=2,
        checkpoint_every=2,
        seed=3,
    )
    defaults.update(train_overrides)
    train_cfg = TrainConfig(**defaults)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(config_to_dict(model_cfg, train_cfg)))
    return path, model_cfg, train_cfg


def dir_snapshot(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


# -- gen-data ------------------------------------------------------------------------


def test_gen_data_byte_identical_for_fixed_seed(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert run_cli("gen-data", "--scenes", 2, "--points", 20, "--seed", 7, "--out", out,
                       "--image-size", 64, "--patch-rows", 4, "--patch-cols", 4) == 0
    assert dir_snapshot(a) == dir_snapshot(b)
    different = tmp_path / "c"
    assert run_cli("gen-data", "--scenes", 2, "--points", 20, "--seed", 8, "--out", different,
                   "--image-size", 64, "--patch-rows", 4, "--patch-cols", 4) == 0
    assert dir_snapshot(a) != dir_snapshot(different)


def test_gen_data_default_grid_writes_33_cameras(tmp_path):
    out = tmp_path / "d"
    assert run_cli("gen-data", "--scenes", 1, "--points", 5, "--out", out) == 0
    views = (out / "views.txt").read_text().strip().splitlines()
    assert len(views) == 33
    gen = json.loads((out / "gen_config.json").read_text())
    assert gen["n_views"] == 33


def test_gen_data_zero_noise_unit_weights(tmp_path):
    out = tmp_path / "e"
    assert run_cli("gen-data", "--scenes", 1, "--points", 12, "--noise-px", 0, "--out", out,
                   "--image-size", 64, "--patch-rows", 4, "--patch-cols", 4) == 0
    rows = (out / "corr_000.csv").read_text().strip().splitlines()[1:]
    assert rows
    assert all(row.rsplit(",", 1)[1] == "1.000000000" for row in rows)


def test_gen_data_malformed_views_file_exits_2(tmp_path):
    bad = tmp_path / "views.txt"
    bad.write_text("0 0\nnope\n")
    assert run_cli("gen-data", "--scenes", 1, "--points", 5, "--views-file", bad,
                   "--out", tmp_path / "x") == 2


def test_gen_data_unwritable_out_exits_2(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("occupied")
    assert run_cli("gen-data", "--scenes", 1, "--points", 5, "--out", blocker / "sub") == 2


def test_gen_data_rejects_bad_counts(tmp_path):
    assert run_cli("gen-data", "--scenes", 0, "--points", 5, "--out", tmp_path / "y") == 2
    assert run_cli("gen-data", "--scenes", 1, "--points", 5, "--noise-px", -1,
                   "--out", tmp_path / "z") == 2


# -- train ----------------------------------------------------------------------------


def test_train_writes_artifacts_and_is_deterministic(tmp_path):
    cfg_path, _, train_cfg = tiny_config_file(tmp_path)
    out1, out2 = tmp_path / "r1", tmp_path / "r2"
    assert run_cli("train", "--config", cfg_path, "--out", out1) == 0
    assert run_cli("train", "--config", cfg_path, "--out", out2) == 0
    assert (out1 / "trace.csv").read_text() == (out2 / "trace.csv").read_text()
    assert (out1 / "manifest.json").exists()
    assert (out1 / f"ckpt_step_{train_cfg.steps}.mvck").exists()
    manifest = json.loads((out1 / "manifest.json").read_text())
    assert manifest["seed"] == train_cfg.seed
    assert len(manifest["config_sha256"]) == 64


def test_train_ablation_arm_recorded_in_manifest(tmp_path):
    cfg_path, _, _ = tiny_config_file(tmp_path)
    out = tmp_path / "arm"
    assert run_cli("train", "--config", cfg_path, "--ablation", "no_csl", "--out", out) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["ablation"] == "no_csl"
    assert manifest["lambda_pinned_zero"] is True
    lam_col = [ln.split(",")[3] for ln in (out / "trace.csv").read_text().strip().splitlines()[1:]]
    assert all(float(x) == 0.0 for x in lam_col)


def test_train_unknown_arm_exits_2(tmp_path):
    cfg_path, _, _ = tiny_config_file(tmp_path)
    assert run_cli("train", "--config", cfg_path, "--ablation", "bogus", "--out", tmp_path / "o") == 2


def test_train_invalid_config_exits_2_before_compute(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"model": {"model_dim": 15}, "train": {}}))
    out = tmp_path / "never"
    assert run_cli("train", "--config", path, "--out", out) == 2
    assert not (out / "trace.csv").exists()


def test_train_resume_matches_uninterrupted(tmp_path):
    cfg_path, _, train_cfg = tiny_config_file(tmp_path, steps=6, checkpoint_every=2)
    ref = tmp_path / "ref"
    assert run_cli("train", "--config", cfg_path, "--out", ref) == 0

    # simulate an interruption after step 4: drop later checkpoints, truncate the trace
    broken = tmp_path / "broken"
    assert run_cli("train", "--config", cfg_path, "--out", broken) == 0
    (broken / "ckpt_step_6.mvck").unlink()
    lines = (broken / "trace.csv").read_text().splitlines()
    (broken / "trace.csv").write_text("\n".join(lines[:5]) + "\n")  # header + steps 0..3
    assert run_cli("train", "--config", cfg_path, "--out", broken, "--resume") == 0
    assert (broken / "trace.csv").read_text() == (ref / "trace.csv").read_text()


# -- eval -----------------------------------------------------------------------------------


def matched_data_dir(tmp_path, train_cfg, n_views=2):
    views = tmp_path / "grid.txt"
    views.write_text("".join(f"{i * 360.0 / n_views} 0\n" for i in range(n_views)))
    data = tmp_path / "data"
    assert run_cli(
        "gen-data", "--scenes", 2, "--points", 10, "--views-file", views, "--out", data,
        "--image-size", train_cfg.image_size, "--patch-rows", 2, "--patch-cols", 2,
        "--latent-dim", 4, "--seed", 11,
    ) == 0
    return data


def test_eval_corr_acc_on_gen_data(tmp_path):
    cfg_path, model_cfg, train_cfg = tiny_config_file(tmp_path)
    run_dir = tmp_path / "run"
    assert run_cli("train", "--config", cfg_path, "--out", run_dir) == 0
    data = matched_data_dir(tmp_path, train_cfg)
    ckpt = run_dir / f"ckpt_step_{train_cfg.steps}.mvck"
    out_json = tmp_path / "metrics.json"
    assert run_cli("eval", "--ckpt", ckpt, "--data", data, "--out", out_json) == 0
    result = json.loads(out_json.read_text())
    assert result["metric"] == "corr-acc"
    assert 0.0 <= result["median"] <= 1.0
    assert len(result["per_scene"]) == 2


def test_eval_threshold_zero_scores_zero(tmp_path):
    cfg_path, _, train_cfg = tiny_config_file(tmp_path)
    run_dir = tmp_path / "run"
    assert run_cli("train", "--config", cfg_path, "--out", run_dir) == 0
    data = matched_data_dir(tmp_path, train_cfg)
    ckpt = run_dir / f"ckpt_step_{train_cfg.steps}.mvck"
    out_json = tmp_path / "m0.json"
    assert run_cli("eval", "--ckpt", ckpt, "--data", data, "--threshold-px", 0, "--out", out_json) == 0
    assert json.loads(out_json.read_text())["median"] == 0.0


def test_eval_missing_ckpt_exits_2(tmp_path):
    assert run_cli("eval", "--ckpt", tmp_path / "none.mvck", "--data", tmp_path) == 2


def test_eval_mismatched_data_exits_2(tmp_path):
    cfg_path, _, train_cfg = tiny_config_file(tmp_path)
    run_dir = tmp_path / "run"
    assert run_cli("train", "--config", cfg_path, "--out", run_dir) == 0
    data = tmp_path / "data33"
    assert run_cli("gen-data", "--scenes", 1, "--points", 5, "--out", data) == 0  # 33 views
    ckpt = run_dir / f"ckpt_step_{train_cfg.steps}.mvck"
    assert run_cli("eval", "--ckpt", ckpt, "--data", data) == 2


def test_eval_unknown_metric_exits_2(tmp_path):
    cfg_path, _, train_cfg = tiny_config_file(tmp_path)
    run_dir = tmp_path / "run"
    assert run_cli("train", "--config", cfg_path, "--out", run_dir) == 0
    ckpt = run_dir / f"ckpt_step_{train_cfg.steps}.mvck"
    assert run_cli("eval", "--ckpt", ckpt, "--data", tmp_path, "--metric", "psnr") == 2


# -- attn-viz ----------------------------------------------------------------------------------


def test_attn_viz_outputs(tmp_path):
    cfg_path, model_cfg, train_cfg = tiny_config_file(tmp_path)
    run_dir = tmp_path / "run"
    assert run_cli("train", "--config", cfg_path, "--out", run_dir) == 0
    data = matched_data_dir(tmp_path, train_cfg)
    ckpt = run_dir / f"ckpt_step_{train_cfg.steps}.mvck"
    viz = tmp_path / "viz"
    assert run_cli(
        "attn-viz", "--ckpt", ckpt, "--scene", data / "scene_000.json",
        "--query-view", 0, "--query-patch", 1, "--layer", 1, "--out", viz,
    ) == 0
    weights = [float(x) for x in (viz / "weights.csv").read_text().strip().split(",")]
    assert abs(sum(weights) - 1.0) < 1e-9
    pgm = (viz / "attn_view01.pgm").read_text().splitlines()
    assert pgm[0] == "P2"
    assert pgm[1] == f"{model_cfg.patch_cols} {model_cfg.patch_rows}"
    assert pgm[2] == "255"
    pixels = [int(x) for row in pgm[3:] for x in row.split()]
    assert len(pixels) == model_cfg.tokens_per_view
    assert all(0 <= x <= 255 for x in pixels)


def test_attn_viz_invalid_indices_exit_2(tmp_path):
    cfg_path, _, train_cfg = tiny_config_file(tmp_path)
    run_dir = tmp_path / "run"
    assert run_cli("train", "--config", cfg_path, "--out", run_dir) == 0
    data = matched_data_dir(tmp_path, train_cfg)
    ckpt = run_dir / f"ckpt_step_{train_cfg.steps}.mvck"
    scene = data / "scene_000.json"
    base = ["attn-viz", "--ckpt", ckpt, "--scene", scene, "--out", tmp_path / "v2"]
    assert run_cli(*base, "--query-view", 9, "--query-patch", 0, "--layer", 1) == 2
    assert run_cli(*base, "--query-view", 0, "--query-patch", 99, "--layer", 1) == 2
    assert run_cli(*base, "--query-view", 0, "--query-patch", 0, "--layer", 7) == 2


def test_write_pgm_min_max_normalization(tmp_path):
    path = tmp_path / "t.pgm"
    write_pgm(path, np.array([[0.0, 1.0], [0.5, 0.25]]))
    lines = path.read_text().splitlines()
    vals = [int(x) for row in lines[3:] for x in row.split()]
    assert vals == [0, 255, 128, 64]
    write_pgm(path, np.zeros((2, 2)))  # constant input: all black, no division blowup
    vals = [int(x) for row in path.read_text().splitlines()[3:] for x in row.split()]
    assert vals == [0, 0, 0, 0]


# -- grad-check (argument surface only; the full run lives in the acceptance suite) -------------


def test_grad_check_rejects_bad_config(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run_cli("grad-check", "--config", bad) == 2
