"""Flow-matching training with correspondence supervision and the ablation harness.

One run owns one model, one optimizer, and one thread; the ablation sweep
launches runs in parallel (capped by MVATTN_THREADS) and merges their metric
reports. Every random draw derives from (seed, step) or (seed, purpose, index)
seed sequences, so runs are bit-deterministic and resumable: a checkpoint
holds the full parameter and optimizer state, and step k of a resumed run
replays exactly.

Sign convention: the velocity target is (z0 - eps) while z_t = (1-t) z0 +
t eps moves from data to noise, so dz_t/dt = -v; a sampler integrates
dz = +v_pred * (-dt) from t=1 to 0. The flow loss is the mean squared error
over latent entries.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, asdict, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, backward
from .checkpoint import load_checkpoint, save_checkpoint
from .correspondence import (
    CorrespondenceSet,
    SyntheticScene,
    corr_acc_from_attention,
    csl_loss,
    generate_scene,
    lambda_schedule,
    render_scene_latents,
    sample_all_negatives,
    subsample_pairs,
    synthetic_sfm,
)
from .geometry import ViewSpec, build_intrinsics, build_virtual_camera, projective_matrix
from .model import Model, ModelConfig

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
WEIGHT_DECAY = 0.01

ABLATION_ARMS = ("full", "no_csl", "no_ca3", "no_lora", "no_frame_replication")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, detail: str):
        super().__init__(f"non-finite loss at step {step}: {detail}")
        self.step = step


@dataclass
class TrainConfig:
    steps: int = 2000
    lr_adapter: float = 1e-4
    lr_lora: float = 1e-5
    lr_warmup_steps: int = 120
    grad_clip: float = 1.0
    lambda_target: float = 0.01
    curriculum_warmup: int = 300
    curriculum_ramp: int = 300
    batch_size: int = 1
    seed: int = 0
    tau: float = 0.07
    n_neg: int = 128
    pair_budget: int = 10000
    pairs_per_step: int = 512
    n_scenes: int = 8
    points_per_scene: int = 96
    pixel_noise: float = 0.0
    image_size: int = 48
    fov_deg: float = 60.0
    radius: float = 2.0
    eval_scenes: int = 20
    checkpoint_every: int = 500
    no_csl: bool = False
    no_ca3: bool = False
    no_lora: bool = False
    no_frame_replication: bool = False

    def __post_init__(self):
        if self.lr_adapter <= 0 or self.lr_lora <= 0:
            raise ValueError("learning rates must be > 0")
        if self.batch_size != 1:
            raise ValueError("only batch_size=1 (one scene per step) is supported")
        if self.steps < 0 or self.n_scenes < 1:
            raise ValueError("steps must be >= 0 and n_scenes >= 1")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")

    def to_json_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json_dict(cls, raw: dict) -> "TrainConfig":
        return cls(**raw)


@dataclass
class LossBreakdown:
    step: int
    l_flow: float
    l_corr: float
    lambda_corr: float
    l_total: float
    grad_norm_adapter: float
    grad_norm_lora: float


def flow_sample(z0: np.ndarray, eps: np.ndarray, t: float) -> tuple[np.ndarray, np.ndarray]:
    """Noisy latent on the linear path and the velocity target (z0 - eps)."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    if z0.shape != eps.shape:
        raise ad.ShapeError(f"flow_sample: shape mismatch {z0.shape} vs {eps.shape}")
    return (1.0 - t) * z0 + t * eps, z0 - eps


def lr_scale(step: int, warmup_steps: int, total_steps: int) -> float:
    """Linear warmup by step/warmup, then cosine annealing to zero."""
    if warmup_steps > 0 and step < warmup_steps:
        return step / warmup_steps
    span = max(1, total_steps - warmup_steps)
    progress = min(1.0, (step - warmup_steps) / span)
    return 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Adaptive-moment update with decoupled weight decay on matrix-shaped params."""

    def __init__(self, groups: dict[str, list[tuple[str, Tensor]]], base_lr: dict[str, float]):
        self.groups = groups
        self.base_lr = base_lr
        self.count = 0
        self.m = {name: np.zeros_like(t.data) for ps in groups.values() for name, t in ps}
        self.v = {name: np.zeros_like(t.data) for ps in groups.values() for name, t in ps}

    def update(self, scale: float) -> None:
        self.count += 1
        bc1 = 1.0 - ADAM_BETA1**self.count
        bc2 = 1.0 - ADAM_BETA2**self.count
        for group, params in self.groups.items():
            lr = self.base_lr[group] * scale
            for name, p in params:
                g = p.grad if p.grad is not None else np.zeros_like(p.data)
                m = self.m[name]
                v = self.v[name]
                m *= ADAM_BETA1
                m += (1.0 - ADAM_BETA1) * g
                v *= ADAM_BETA2
                v += (1.0 - ADAM_BETA2) * g * g
                step_dir = (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
                if p.data.ndim >= 2:  # decay weights, not biases
                    step_dir = step_dir + WEIGHT_DECAY * p.data
                p.data -= lr * step_dir

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.m:
            out[f"opt.{name}.m"] = self.m[name]
            out[f"opt.{name}.v"] = self.v[name]
        out["opt.count"] = np.asarray(float(self.count))
        return out

    def load_state_arrays(self, state: dict[str, np.ndarray]) -> None:
        for name in self.m:
            np.copyto(self.m[name], state[f"opt.{name}.m"])
            np.copyto(self.v[name], state[f"opt.{name}.v"])
        self.count = int(float(state["opt.count"]))


def clip_group_grads(params: list[tuple[str, Tensor]], max_norm: float) -> float:
    """Scale the group's gradients to a global L2 norm of at most max_norm; returns the applied norm."""
    total = 0.0
    for _, p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for _, p in params:
            if p.grad is not None:
                p.grad *= factor
        return max_norm
    return norm


def orbit_view_grid(n_views: int, elevation_deg: float = 0.0, radius: float = 2.0) -> list[ViewSpec]:
    """Evenly spaced azimuth orbit at one elevation."""
    return [ViewSpec(i * 360.0 / n_views, elevation_deg, radius) for i in range(n_views)]


def merge_latent_groups(z0: np.ndarray, tokens_per_view: int, group: int = 4) -> np.ndarray:
    """Share one latent among each group of `group` consecutive views.

    Models the merged-latent failure of temporal compression without frame
    replication: every view in a group trains against the group mean.
    """
    n_views = z0.shape[0] // tokens_per_view
    out = z0.copy()
    per_view = z0.reshape(n_views, tokens_per_view, -1)
    for g0 in range(0, n_views, group):
        g1 = min(g0 + group, n_views)
        shared = per_view[g0:g1].mean(axis=0)
        out.reshape(n_views, tokens_per_view, -1)[g0:g1] = shared
    return out


@dataclass
class SceneBatch:
    scene: SyntheticScene
    z0: np.ndarray  # [n_views * patches, latent_dim] clean latents
    cond: np.ndarray  # [patches, latent_dim] anchor: clean view-0 latent
    corr: CorrespondenceSet


def designated_layer(supervised_layers: tuple[int, ...]) -> int:
    """Layer whose adapter attention drives the consistency proxy (third supervised when available)."""
    layers = sorted(supervised_layers)
    if not layers:
        raise ValueError("no supervised layers configured")
    return layers[2] if len(layers) >= 3 else layers[-1]


class Trainer:
    def __init__(self, model_cfg: ModelConfig, train_cfg: TrainConfig, out_dir=None):
        if train_cfg.no_ca3:
            model_cfg = replace(model_cfg, use_ca3=False)
            train_cfg = replace(train_cfg, no_csl=True)
        if train_cfg.no_lora:
            model_cfg = replace(model_cfg, use_lora=False)
        self.model_cfg = model_cfg
        self.cfg = train_cfg
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.model = Model(model_cfg, seed=train_cfg.seed)
        self.intr = build_intrinsics(train_cfg.image_size, train_cfg.image_size, train_cfg.fov_deg)
        self.grid = orbit_view_grid(model_cfg.n_views, radius=train_cfg.radius)
        self.poses = [build_virtual_camera(s) for s in self.grid]
        self.projectives = [projective_matrix(p, self.intr) for p in self.poses]
        groups = self.model.parameter_groups()
        self.opt = AdamW(
            {"adapter": groups["adapter"], "lora": groups["lora"]},
            {"adapter": train_cfg.lr_adapter, "lora": train_cfg.lr_lora},
        )
        self.start_step = 0
        self.train_batches = [
            self._build_batch(("train", i)) for i in range(train_cfg.n_scenes)
        ]

    # -- data ----------------------------------------------------------------

    def _scene_seed(self, tag: tuple) -> int:
        label = {"train": 1, "eval": 2}[tag[0]]
        return int(
            np.random.SeedSequence([self.cfg.seed, label, tag[1]]).generate_state(1, np.uint32)[0]
        )

    def _build_batch(self, tag: tuple) -> SceneBatch:
        cfg, mcfg = self.cfg, self.model_cfg
        scene = generate_scene(self._scene_seed(tag), cfg.points_per_scene, mcfg.latent_dim)
        z0 = render_scene_latents(scene, self.poses, self.intr, mcfg.patch_rows, mcfg.patch_cols)
        cond = z0[: mcfg.tokens_per_view].copy()
        if cfg.no_frame_replication:
            z0 = merge_latent_groups(z0, mcfg.tokens_per_view)
        corr = synthetic_sfm(
            scene,
            self.poses,
            self.intr,
            mcfg.patch_rows,
            mcfg.patch_cols,
            pixel_noise_sigma=cfg.pixel_noise,
            seed=cfg.seed,
        )
        rng = np.random.default_rng(np.random.SeedSequence([scene.seed, 0xB0D]))
        corr = subsample_pairs(corr, cfg.pair_budget, rng)
        return SceneBatch(scene=scene, z0=z0, cond=cond, corr=corr)

    def eval_batches(self, count: int) -> list[SceneBatch]:
        return [self._build_batch(("eval", i)) for i in range(count)]

    # -- one step --------------------------------------------------------------

    def train_step(self, step: int) -> LossBreakdown:
        cfg, mcfg = self.cfg, self.model_cfg
        batch = self.train_batches[step % len(self.train_batches)]
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 3, step]))
        t = float(rng.uniform(0.0, 1.0))
        eps = rng.standard_normal(batch.z0.shape)
        z_t, v_target = flow_sample(batch.z0, eps, t)

        v_pred = self.model.forward(z_t, t, batch.cond, self.projectives)
        diff = ad.sub(v_pred, Tensor(v_target))
        l_flow = ad.mean(ad.elementwise_mul(diff, diff))

        lam = 0.0 if cfg.no_csl else lambda_schedule(
            step, cfg.curriculum_warmup, cfg.curriculum_ramp, cfg.lambda_target
        )
        if cfg.no_csl or not mcfg.use_ca3:
            l_corr = None
            l_total = l_flow
        else:
            corr_step = subsample_pairs(batch.corr, cfg.pairs_per_step, rng)
            negatives = sample_all_negatives(corr_step, cfg.n_neg, rng)
            modulator = self.model.modulator(self.projectives)
            view_rows = self.model.view_token_rows()
            per_layer = []
            for layer in mcfg.supervised_layers:
                q_emb, k_emb = self.model.ca3_qk_embeddings(layer, modulator)
                per_layer.append(
                    csl_loss(
                        ad.gather_rows(q_emb, view_rows),
                        ad.gather_rows(k_emb, view_rows),
                        corr_step,
                        cfg.n_neg,
                        cfg.tau,
                        rng,
                        negatives=negatives,
                    )
                )
            acc = per_layer[0]
            for extra in per_layer[1:]:
                acc = ad.add(acc, extra)
            l_corr = ad.scalar_mul(acc, 1.0 / len(per_layer))
            l_total = ad.add(l_flow, ad.scalar_mul(l_corr, lam))

        flow_val = float(l_flow.data)
        corr_val = float(l_corr.data) if l_corr is not None else 0.0
        total_val = float(l_total.data)
        if not (np.isfinite(flow_val) and np.isfinite(corr_val)):
            raise TrainingDiverged(step, f"l_flow={flow_val}, l_corr={corr_val}")

        backward(l_total)
        groups = self.model.parameter_groups()
        norm_adapter = clip_group_grads(groups["adapter"], cfg.grad_clip)
        norm_lora = clip_group_grads(groups["lora"], cfg.grad_clip)
        if not (np.isfinite(norm_adapter) and np.isfinite(norm_lora)):
            raise TrainingDiverged(
                step, f"grad norms adapter={norm_adapter}, lora={norm_lora}"
            )
        self.opt.update(lr_scale(step, cfg.lr_warmup_steps, cfg.steps))
        self.model.zero_grad()
        self.model.clear_cache()
        return LossBreakdown(
            step=step,
            l_flow=flow_val,
            l_corr=corr_val,
            lambda_corr=lam,
            l_total=total_val,
            grad_norm_adapter=norm_adapter,
            grad_norm_lora=norm_lora,
        )

    # -- checkpointing -----------------------------------------------------------

    def checkpoint_arrays(self, step: int) -> dict[str, np.ndarray]:
        arrays = {f"model.{k}": v for k, v in self.model.state_dict().items()}
        arrays.update(self.opt.state_arrays())
        arrays["meta.step"] = np.asarray(float(step))
        return arrays

    def save(self, path, step: int) -> None:
        save_checkpoint(path, self.checkpoint_arrays(step))

    def load(self, path) -> int:
        state = load_checkpoint(path)
        self.model.load_state_dict(
            {k[len("model.") :]: v for k, v in state.items() if k.startswith("model.")}
        )
        self.opt.load_state_arrays(state)
        self.start_step = int(float(state["meta.step"]))
        return self.start_step

    def latest_checkpoint(self):
        if self.out_dir is None:
            return None
        found = sorted(
            self.out_dir.glob("ckpt_step_*.mvck"), key=lambda p: int(p.stem.split("_")[-1])
        )
        return found[-1] if found else None

    # -- loop ---------------------------------------------------------------------

    def run(self, resume: bool = False, trace_path=None) -> list[LossBreakdown]:
        cfg = self.cfg
        if resume:
            latest = self.latest_checkpoint()
            if latest is not None:
                self.load(latest)
        trace: list[LossBreakdown] = []
        writer = _TraceWriter(trace_path, self.start_step) if trace_path else None
        for step in range(self.start_step, cfg.steps):
            breakdown = self.train_step(step)
            trace.append(breakdown)
            if writer:
                writer.append(breakdown)
            if self.out_dir and cfg.checkpoint_every > 0 and (step + 1) % cfg.checkpoint_every == 0:
                self.save(self.out_dir / f"ckpt_step_{step + 1}.mvck", step + 1)
        if self.out_dir:
            self.save(self.out_dir / f"ckpt_step_{cfg.steps}.mvck", cfg.steps)
        if writer:
            writer.close()
        return trace


class _TraceWriter:
    """Appends trace rows; on resume, keeps only rows before the resume step."""

    HEADER = "step,l_flow,l_corr,lambda,l_total,grad_norm_adapter,grad_norm_lora"

    def __init__(self, path, start_step: int):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        rows = []
        if self.path.exists() and start_step > 0:
            with open(self.path, "r", encoding="utf-8") as fh:
                lines = fh.read().splitlines()
            rows = [ln for ln in lines[1:] if ln and int(ln.split(",", 1)[0]) < start_step]
        with open(self.path, "w", encoding="utf-8") as fh:
            fh.write(self.HEADER + "\n")
            for row in rows:
                fh.write(row + "\n")
        self._fh = open(self.path, "a", encoding="utf-8")

    def append(self, b: LossBreakdown) -> None:
        self._fh.write(
            f"{b.step},{b.l_flow:.17g},{b.l_corr:.17g},{b.lambda_corr:.17g},"
            f"{b.l_total:.17g},{b.grad_norm_adapter:.17g},{b.grad_norm_lora:.17g}\n"
        )
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


# ---------------------------------------------------------------------------
# Evaluation and the ablation harness
# ---------------------------------------------------------------------------


def evaluate_corr_acc(
    model: Model,
    projectives,
    intr,
    batch: SceneBatch,
    layer: int | None = None,
    threshold_px: float = 5.0,
) -> float:
    """Consistency proxy on one scene: attention argmax versus oracle pixels, clean latents (t=0)."""
    if not model.cfg.use_ca3:
        return 0.0
    layer = designated_layer(model.cfg.supervised_layers) if layer is None else layer
    model.forward(batch.z0, 0.0, batch.cond, projectives, record_attention_layers=(layer,))
    p = model.cfg.tokens_per_view

    def row_fn(view: int, patch: int) -> np.ndarray:
        row = model.extract_attention(layer, (view + 1) * p + patch)
        return row[p:]  # drop the anchor slot; remaining rows are view-major

    return corr_acc_from_attention(row_fn, batch.corr, intr, threshold_px)


def micro_config() -> tuple[ModelConfig, TrainConfig]:
    """Smallest config whose losses exercise every trainable path; sized for finite differences."""
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
    train_cfg = TrainConfig(
        steps=1,
        n_scenes=1,
        points_per_scene=8,
        n_neg=4,
        pair_budget=24,
        image_size=32,
        eval_scenes=1,
        curriculum_warmup=0,
        curriculum_ramp=0,
        seed=5,
    )
    return model_cfg, train_cfg


GRAD_CHECK_DENOM_FLOOR = 1e-6


def model_grad_check(
    model_cfg: ModelConfig, train_cfg: TrainConfig, eps: float = 1e-5
) -> dict[str, float]:
    """Max relative error, analytic vs central differences, per loss over all trainable params.

    Trainable parameters are jittered away from their zero initialization
    first: the check validates derivatives at a generic point, and exact
    zero-init would leave whole paths (adapter output, value projections)
    with identically zero gradients.

    The relative-error denominator is floored at 1e-6: with losses of
    magnitude ~5 and eps 1e-5, float64 central differences carry ~1e-11 of
    roundoff, so coordinates whose true gradient is below the floor are
    noise-dominated and carry no testable signal, while any real wiring
    error still shows up as an O(1) discrepancy on sizable gradients.
    """
    trainer = Trainer(model_cfg, train_cfg)
    model = trainer.model
    jitter = np.random.default_rng(np.random.SeedSequence([train_cfg.seed, 11]))
    for _, p in model.trainable_parameters():
        p.data += 0.05 * jitter.standard_normal(p.data.shape)

    batch = trainer.train_batches[0]
    draw = np.random.default_rng(np.random.SeedSequence([train_cfg.seed, 13]))
    t = float(draw.uniform(0.2, 0.8))
    noise = draw.standard_normal(batch.z0.shape)
    z_t, v_target = flow_sample(batch.z0, noise, t)
    lam = train_cfg.lambda_target
    neg_seed = int(np.random.SeedSequence([train_cfg.seed, 17]).generate_state(1)[0])

    def losses() -> dict[str, Tensor]:
        v_pred = model.forward(z_t, t, batch.cond, trainer.projectives)
        diff = ad.sub(v_pred, Tensor(v_target))
        l_flow = ad.mean(ad.elementwise_mul(diff, diff))
        modulator = model.modulator(trainer.projectives)
        rows = model.view_token_rows()
        per_layer = []
        for layer in model.cfg.supervised_layers:
            q_emb, k_emb = model.ca3_qk_embeddings(layer, modulator)
            per_layer.append(
                csl_loss(
                    ad.gather_rows(q_emb, rows),
                    ad.gather_rows(k_emb, rows),
                    batch.corr,
                    train_cfg.n_neg,
                    train_cfg.tau,
                    np.random.default_rng(neg_seed),
                )
            )
        acc = per_layer[0]
        for extra in per_layer[1:]:
            acc = ad.add(acc, extra)
        l_corr = ad.scalar_mul(acc, 1.0 / len(per_layer))
        l_total = ad.add(l_flow, ad.scalar_mul(l_corr, lam))
        model.clear_cache()
        return {"l_flow": l_flow, "l_corr": l_corr, "l_total": l_total}

    report: dict[str, float] = {}
    for kind in ("l_flow", "l_corr", "l_total"):
        model.zero_grad()
        backward(losses()[kind])
        analytic = {
            name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
            for name, p in model.trainable_parameters()
        }
        worst = 0.0
        for name, p in model.trainable_parameters():
            flat = p.data.reshape(-1)
            a_flat = analytic[name].reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                f_plus = float(losses()[kind].data)
                flat[i] = orig - eps
                f_minus = float(losses()[kind].data)
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * eps)
                denom = max(abs(a_flat[i]), abs(numeric), GRAD_CHECK_DENOM_FLOOR)
                worst = max(worst, abs(a_flat[i] - numeric) / denom)
        report[kind] = worst
        model.zero_grad()
    return report


def apply_arm(train_cfg: TrainConfig, arm: str) -> TrainConfig:
    if arm not in ABLATION_ARMS:
        raise ValueError(f"unknown ablation arm {arm!r}; expected one of {ABLATION_ARMS}")
    flags = {
        "full": {},
        "no_csl": {"no_csl": True},
        "no_ca3": {"no_ca3": True},
        "no_lora": {"no_lora": True},
        "no_frame_replication": {"no_frame_replication": True},
    }[arm]
    return replace(train_cfg, **flags)


def run_ablation(
    arm: str, model_cfg: ModelConfig, train_cfg: TrainConfig, out_dir=None
) -> dict:
    """Train one arm and report its consistency proxy over held-out scenes."""
    cfg = apply_arm(train_cfg, arm)
    arm_dir = Path(out_dir) / arm if out_dir is not None else None
    if arm_dir is not None:
        arm_dir.mkdir(parents=True, exist_ok=True)
    trainer = Trainer(model_cfg, cfg, out_dir=arm_dir)
    trace = trainer.run(trace_path=arm_dir / "trace.csv" if arm_dir else None)
    per_scene = [
        evaluate_corr_acc(trainer.model, trainer.projectives, trainer.intr, b)
        for b in trainer.eval_batches(cfg.eval_scenes)
    ]
    final = trace[-1] if trace else None
    return {
        "arm": arm,
        "seed": cfg.seed,
        "corr_acc_median": float(np.median(per_scene)) if per_scene else 0.0,
        "corr_acc_per_scene": per_scene,
        "final_l_flow": final.l_flow if final else None,
        "final_l_corr": final.l_corr if final else None,
        "final_l_total": final.l_total if final else None,
    }


def max_parallel_arms(n_arms: int) -> int:
    env = os.environ.get("MVATTN_THREADS")
    if env is not None:
        return max(1, min(n_arms, int(env)))
    return max(1, min(n_arms, os.cpu_count() or 1))


def run_ablation_sweep(
    arms: tuple[str, ...],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    out_dir=None,
) -> dict:
    """Run arms in parallel (each with private model/optimizer state) and rank by the proxy."""
    workers = max_parallel_arms(len(arms))
    if workers == 1:
        results = [run_ablation(arm, model_cfg, train_cfg, out_dir) for arm in arms]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(run_ablation, arm, model_cfg, train_cfg, out_dir) for arm in arms
            ]
            results = [f.result() for f in futures]
    results.sort(key=lambda r: r["corr_acc_median"], reverse=True)
    return {"arms": results, "ranking": [r["arm"] for r in results]}
