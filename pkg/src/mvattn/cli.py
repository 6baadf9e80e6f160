"""Experiment command line: data generation, training, evaluation, ablation
sweeps, gradient checking, and attention-map export.

Exit codes: 0 success, 1 threshold failure, 2 usage or I/O error. Every
command validates its inputs fully before any compute, and every command is
deterministic under a fixed seed. Training runs write a manifest whose config
snapshot and seed replay the run bit-identically.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .correspondence import (
    load_correspondences_csv,
    load_scene_json,
    render_scene_latents,
    save_correspondences_csv,
    save_scene_json,
    synthetic_sfm,
    generate_scene,
)
from .geometry import (
    build_intrinsics,
    build_virtual_camera,
    default_view_grid,
    load_view_grid,
    projective_matrix,
    save_view_grid,
)
from .model import Model, ModelConfig
from .training import (
    ABLATION_ARMS,
    SceneBatch,
    TrainConfig,
    Trainer,
    evaluate_corr_acc,
    micro_config,
    model_grad_check,
    run_ablation,
    run_ablation_sweep,
)

GRAD_CHECK_THRESHOLD = 1e-4


class CliError(Exception):
    """Usage or I/O failure; maps to exit code 2."""


def default_experiment_config() -> tuple[ModelConfig, TrainConfig]:
    """Desk-scale defaults for `mvattn train`: minutes, not hours, on a 4-core CPU.

    The library-level ModelConfig defaults keep the larger 12x12 patch grid;
    the CLI preset shrinks the grid and view count so the default run fits
    the budget (measured ~10 min on 2 CPU cores; see README).
    """
    model_cfg = ModelConfig(patch_rows=6, patch_cols=6, n_views=6, adapter_bottleneck_ratio=4)
    train_cfg = TrainConfig(
        steps=1000,
        pairs_per_step=384,
        curriculum_warmup=150,
        curriculum_ramp=250,
        lambda_target=1.0,
        lr_adapter=3e-3,
        lr_warmup_steps=80,
    )
    return model_cfg, train_cfg


def ablation_experiment_config(seed: int = 0) -> tuple[ModelConfig, TrainConfig]:
    """Smaller preset for the five-arm ablation sweep (a few minutes per arm).

    Desk-scale departures from the full-scale defaults, required for the
    supervision signal to bite within a few hundred steps: bottleneck ratio 4
    (ratio 8 on a 64-dim toy model leaves 4-dim adapter heads, too little
    capacity for contrastive matching), lambda target 1.0, adapter lr 3e-3.
    """
    model_cfg = ModelConfig(patch_rows=6, patch_cols=6, n_views=4, adapter_bottleneck_ratio=4)
    train_cfg = TrainConfig(
        steps=600,
        n_scenes=6,
        points_per_scene=120,
        curriculum_warmup=100,
        curriculum_ramp=100,
        lambda_target=1.0,
        lr_adapter=3e-3,
        lr_warmup_steps=60,
        eval_scenes=20,
        checkpoint_every=300,
        seed=seed,
    )
    return model_cfg, train_cfg


def config_to_dict(model_cfg: ModelConfig, train_cfg: TrainConfig) -> dict:
    model = asdict(model_cfg)
    model["supervised_layers"] = list(model_cfg.supervised_layers)
    return {"model": model, "train": train_cfg.to_json_dict()}


def config_from_dict(raw: dict) -> tuple[ModelConfig, TrainConfig]:
    try:
        model_raw = dict(raw["model"])
        model_raw["supervised_layers"] = tuple(model_raw.get("supervised_layers", ()))
        return ModelConfig(**model_raw), TrainConfig.from_json_dict(raw["train"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError(f"invalid config: {exc}") from exc


def load_config_file(path) -> tuple[ModelConfig, TrainConfig]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CliError(f"config {path} is not valid JSON: {exc}") from exc
    return config_from_dict(raw)


def config_hash(config_dict: dict) -> str:
    canonical = json.dumps(config_dict, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def write_manifest(out_dir: Path, config_dict: dict, extra: dict) -> None:
    manifest = {
        "config": config_dict,
        "seed": config_dict["train"]["seed"],
        "config_sha256": config_hash(config_dict),
        "created_unix": time.time(),
        "layout": {
            "config": "config.json",
            "manifest": "manifest.json",
            "trace": "trace.csv",
            "checkpoints": "ckpt_step_*.mvck",
        },
    }
    manifest.update(extra)
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    if args.scenes < 1 or args.points < 1:
        raise CliError("--scenes and --points must be >= 1")
    if args.noise_px < 0:
        raise CliError("--noise-px must be >= 0")
    if args.views_file is not None:
        specs = load_view_grid(args.views_file, radius=args.radius)
    else:
        specs = default_view_grid(radius=args.radius)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {out}: {exc}") from exc

    intr = build_intrinsics(args.image_size, args.image_size, args.fov)
    poses = [build_virtual_camera(s) for s in specs]
    save_view_grid(out / "views.txt", specs)
    gen_config = {
        "scenes": args.scenes,
        "points": args.points,
        "noise_px": args.noise_px,
        "seed": args.seed,
        "image_size": args.image_size,
        "fov": args.fov,
        "radius": args.radius,
        "latent_dim": args.latent_dim,
        "patch_rows": args.patch_rows,
        "patch_cols": args.patch_cols,
        "n_views": len(specs),
    }
    with open(out / "gen_config.json", "w", encoding="utf-8") as fh:
        json.dump(gen_config, fh, indent=2, sort_keys=True)
        fh.write("\n")

    for i in range(args.scenes):
        seed_i = int(np.random.SeedSequence([args.seed, i]).generate_state(1, np.uint32)[0])
        scene = generate_scene(seed_i, args.points, args.latent_dim)
        save_scene_json(out / f"scene_{i:03d}.json", scene)
        corr = synthetic_sfm(
            scene,
            poses,
            intr,
            args.patch_rows,
            args.patch_cols,
            pixel_noise_sigma=args.noise_px,
            seed=args.seed,
        )
        save_correspondences_csv(out / f"corr_{i:03d}.csv", corr)
    print(f"wrote {args.scenes} scene(s), {len(specs)} cameras to {out}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    if args.config is not None:
        model_cfg, train_cfg = load_config_file(args.config)
    else:
        model_cfg, train_cfg = default_experiment_config()
    if args.ablation is not None and args.ablation != "sweep" and args.ablation not in ABLATION_ARMS:
        raise CliError(
            f"unknown ablation arm {args.ablation!r}; choose from {ABLATION_ARMS} or 'sweep'"
        )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.ablation == "sweep":
        config_dict = config_to_dict(model_cfg, train_cfg)
        with open(out / "config.json", "w", encoding="utf-8") as fh:
            json.dump(config_dict, fh, indent=2, sort_keys=True)
        write_manifest(out, config_dict, {"mode": "ablation_sweep", "arms": list(ABLATION_ARMS)})
        report = run_ablation_sweep(ABLATION_ARMS, model_cfg, train_cfg, out)
        with open(out / "ablation_report.json", "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
        print(json.dumps(report["ranking"]))
        return 0

    if args.ablation is not None:
        from .training import apply_arm

        train_cfg = apply_arm(train_cfg, args.ablation)

    trainer = Trainer(model_cfg, train_cfg, out_dir=out)
    config_dict = config_to_dict(trainer.model_cfg, trainer.cfg)
    with open(out / "config.json", "w", encoding="utf-8") as fh:
        json.dump(config_dict, fh, indent=2, sort_keys=True)
    write_manifest(
        out,
        config_dict,
        {
            "mode": "train",
            "ablation": args.ablation or "full",
            "lambda_pinned_zero": bool(trainer.cfg.no_csl),
        },
    )
    trace = trainer.run(resume=args.resume, trace_path=out / "trace.csv")
    last = trace[-1] if trace else None
    if last:
        print(
            f"finished step {last.step}: l_flow={last.l_flow:.6f} "
            f"l_corr={last.l_corr:.6f} l_total={last.l_total:.6f}"
        )
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def _load_run(ckpt_path: Path) -> tuple[Model, ModelConfig, TrainConfig]:
    if not ckpt_path.exists():
        raise CliError(f"checkpoint {ckpt_path} does not exist")
    config_path = ckpt_path.parent / "config.json"
    if not config_path.exists():
        raise CliError(f"no config.json next to {ckpt_path}")
    model_cfg, train_cfg = load_config_file(config_path)
    if train_cfg.no_ca3:
        model_cfg = replace(model_cfg, use_ca3=False)
    if train_cfg.no_lora:
        model_cfg = replace(model_cfg, use_lora=False)
    model = Model(model_cfg, seed=train_cfg.seed)
    state = load_checkpoint(ckpt_path)
    model.load_state_dict({k[len("model.") :]: v for k, v in state.items() if k.startswith("model.")})
    return model, model_cfg, train_cfg


def _load_data_dir(data_dir: Path, model_cfg: ModelConfig):
    gen_path = data_dir / "gen_config.json"
    if not gen_path.exists():
        raise CliError(f"{data_dir} is not a gen-data directory (no gen_config.json)")
    with open(gen_path, "r", encoding="utf-8") as fh:
        gen = json.load(fh)
    if gen["n_views"] != model_cfg.n_views:
        raise CliError(f"data has {gen['n_views']} views but the model expects {model_cfg.n_views}")
    if (gen["patch_rows"], gen["patch_cols"]) != (model_cfg.patch_rows, model_cfg.patch_cols):
        raise CliError(
            f"data patch grid {gen['patch_rows']}x{gen['patch_cols']} does not match model "
            f"{model_cfg.patch_rows}x{model_cfg.patch_cols}"
        )
    if gen["latent_dim"] != model_cfg.latent_dim:
        raise CliError(f"data latent_dim {gen['latent_dim']} != model {model_cfg.latent_dim}")
    intr = build_intrinsics(gen["image_size"], gen["image_size"], gen["fov"])
    specs = load_view_grid(data_dir / "views.txt", radius=gen["radius"])
    poses = [build_virtual_camera(s) for s in specs]
    projectives = [projective_matrix(p, intr) for p in poses]
    batches = []
    for scene_path in sorted(data_dir.glob("scene_*.json")):
        idx = scene_path.stem.split("_")[-1]
        scene = load_scene_json(scene_path)
        corr = load_correspondences_csv(
            data_dir / f"corr_{idx}.csv", gen["n_views"], gen["patch_rows"], gen["patch_cols"]
        )
        z0 = render_scene_latents(scene, poses, intr, gen["patch_rows"], gen["patch_cols"])
        batches.append(
            SceneBatch(scene=scene, z0=z0, cond=z0[: model_cfg.tokens_per_view].copy(), corr=corr)
        )
    if not batches:
        raise CliError(f"no scene_*.json files in {data_dir}")
    return intr, projectives, batches


def cmd_eval(args) -> int:
    if args.metric != "corr-acc":
        raise CliError(f"unsupported metric {args.metric!r}; only 'corr-acc' is implemented")
    model, model_cfg, _train_cfg = _load_run(Path(args.ckpt))
    intr, projectives, batches = _load_data_dir(Path(args.data), model_cfg)
    per_scene = [
        evaluate_corr_acc(model, projectives, intr, b, layer=args.layer, threshold_px=args.threshold_px)
        for b in batches
    ]
    result = {
        "metric": "corr-acc",
        "threshold_px": args.threshold_px,
        "per_scene": per_scene,
        "median": float(np.median(per_scene)),
        "mean": float(np.mean(per_scene)),
    }
    text = json.dumps(result, indent=2, sort_keys=True)
    print(text)
    out_path = Path(args.out) if args.out else Path(args.ckpt).parent / "eval_corr_acc.json"
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write(text + "\n")
    return 0


# ---------------------------------------------------------------------------
# attn-viz
# ---------------------------------------------------------------------------


def write_pgm(path, values: np.ndarray) -> None:
    """Min-max normalized grayscale PGM (plain P2)."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    scaled = np.zeros_like(v) if hi <= lo else (v - lo) / (hi - lo)
    pixels = np.round(scaled * 255).astype(int)
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"P2\n{v.shape[1]} {v.shape[0]}\n255\n")
        for row in pixels:
            fh.write(" ".join(str(p) for p in row) + "\n")


def cmd_attn_viz(args) -> int:
    model, model_cfg, train_cfg = _load_run(Path(args.ckpt))
    scene_path = Path(args.scene)
    if not scene_path.exists():
        raise CliError(f"scene file {scene_path} does not exist")
    if not 0 <= args.query_view < model_cfg.n_views:
        raise CliError(f"--query-view must be in [0, {model_cfg.n_views})")
    if not 0 <= args.query_patch < model_cfg.tokens_per_view:
        raise CliError(f"--query-patch must be in [0, {model_cfg.tokens_per_view})")
    if not 0 <= args.layer < model_cfg.depth:
        raise CliError(f"--layer must be in [0, {model_cfg.depth})")
    if not model_cfg.use_ca3:
        raise CliError("this checkpoint was trained without the camera adapter branch")

    scene = load_scene_json(scene_path)
    intr = build_intrinsics(train_cfg.image_size, train_cfg.image_size, train_cfg.fov_deg)
    from .training import orbit_view_grid

    poses = [build_virtual_camera(s) for s in orbit_view_grid(model_cfg.n_views, radius=train_cfg.radius)]
    projectives = [projective_matrix(p, intr) for p in poses]
    z0 = render_scene_latents(scene, poses, intr, model_cfg.patch_rows, model_cfg.patch_cols)
    cond = z0[: model_cfg.tokens_per_view].copy()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model.forward(z0, 0.0, cond, projectives, record_attention_layers=(args.layer,))
    p = model_cfg.tokens_per_view
    token = (args.query_view + 1) * p + args.query_patch
    row = model.extract_attention(args.layer, token)

    with open(out / "weights.csv", "w", encoding="utf-8") as fh:
        fh.write(",".join(f"{w:.17g}" for w in row) + "\n")
    for view in range(model_cfg.n_views):
        if view == args.query_view:
            continue
        segment = row[(view + 1) * p : (view + 2) * p]
        grid = segment.reshape(model_cfg.patch_rows, model_cfg.patch_cols)
        write_pgm(out / f"attn_view{view:02d}.pgm", grid)
    print(f"wrote attention maps for query (view {args.query_view}, patch {args.query_patch}) to {out}")
    return 0


# ---------------------------------------------------------------------------
# grad-check
# ---------------------------------------------------------------------------


def cmd_grad_check(args) -> int:
    if args.config is not None:
        model_cfg, train_cfg = load_config_file(args.config)
    else:
        model_cfg, train_cfg = micro_config()
    report = model_grad_check(model_cfg, train_cfg, eps=args.eps)
    ok = True
    for kind in ("l_flow", "l_corr", "l_total"):
        err = report[kind]
        status = "ok" if err < GRAD_CHECK_THRESHOLD else "FAIL"
        ok = ok and err < GRAD_CHECK_THRESHOLD
        print(f"{kind}: max relative error {err:.3e} [{status}]")
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# parser / entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mvattn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate synthetic scenes and correspondence CSVs")
    g.add_argument("--scenes", type=int, default=4)
    g.add_argument("--points", type=int, default=96)
    g.add_argument("--views-file", type=str, default=None)
    g.add_argument("--noise-px", type=float, default=0.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", type=str, required=True)
    g.add_argument("--image-size", type=int, default=480)
    g.add_argument("--fov", type=float, default=60.0)
    g.add_argument("--radius", type=float, default=2.0)
    g.add_argument("--latent-dim", type=int, default=8)
    g.add_argument("--patch-rows", type=int, default=12)
    g.add_argument("--patch-cols", type=int, default=12)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train (optionally one ablation arm or the full sweep)")
    t.add_argument("--config", type=str, default=None)
    t.add_argument("--ablation", type=str, default=None)
    t.add_argument("--out", type=str, required=True)
    t.add_argument("--resume", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a gen-data directory")
    e.add_argument("--ckpt", type=str, required=True)
    e.add_argument("--data", type=str, required=True)
    e.add_argument("--metric", type=str, default="corr-acc")
    e.add_argument("--threshold-px", type=float, default=5.0)
    e.add_argument("--layer", type=int, default=None)
    e.add_argument("--out", type=str, default=None)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("attn-viz", help="export adapter attention maps as PGM + CSV")
    a.add_argument("--ckpt", type=str, required=True)
    a.add_argument("--scene", type=str, required=True)
    a.add_argument("--query-view", type=int, required=True)
    a.add_argument("--query-patch", type=int, required=True)
    a.add_argument("--layer", type=int, required=True)
    a.add_argument("--out", type=str, required=True)
    a.set_defaults(func=cmd_attn_viz)

    c = sub.add_parser("grad-check", help="finite-difference check of all trainable gradients")
    c.add_argument("--config", type=str, default=None)
    c.add_argument("--eps", type=float, default=1e-5)
    c.set_defaults(func=cmd_grad_check)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
