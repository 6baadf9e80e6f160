"""Synthetic scenes, an exact structure-from-motion oracle, correspondence
supervision, and the cross-view consistency metric.

Scenes are labelled 3-D points inside a ball, each carrying a deterministic
feature vector; per-view latents are rendered by averaging the features of
the points that project into each patch, so the same point feeds
corresponding patches across views. The oracle replaces feature matching:
projections are exact, optionally perturbed by Gaussian pixel noise, and a
pair's confidence weight is min over its two views of exp(-e^2 / (2 sigma^2))
where e is the injected displacement (sigma = 2 px).

Pairs are stored once per point and unordered view pair with views in
canonical ascending order; the contrastive loss pushes gradients into both
embeddings, and the consistency metric probes both directions explicitly.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import (
    BehindCameraError,
    CameraPose,
    Intrinsics,
    ViewSpec,
    build_virtual_camera,
    project_point,
)

CONFIDENCE_SIGMA_PX = 2.0
SCENE_BALL_RADIUS = 0.8


@dataclass(frozen=True)
class SyntheticScene:
    seed: int
    points: np.ndarray  # [P, 3], inside the ball
    labels: np.ndarray  # [P], unique ints
    features: np.ndarray  # [P, latent_dim]
    background: np.ndarray  # [latent_dim], fill for empty patches

    @property
    def num_points(self) -> int:
        return self.points.shape[0]


def generate_scene(seed: int, num_points: int, latent_dim: int = 8) -> SyntheticScene:
    """Points i.i.d. uniform in the radius-0.8 ball; features one unit normal vector per label."""
    if num_points < 1:
        raise ValueError(f"num_points must be >= 1, got {num_points}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), num_points, latent_dim]))
    directions = rng.standard_normal((num_points, 3))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    radii = SCENE_BALL_RADIUS * rng.random(num_points) ** (1.0 / 3.0)
    points = directions * radii[:, None]
    features = rng.standard_normal((num_points, latent_dim))
    background = 0.1 * rng.standard_normal(latent_dim)
    for arr in (points, features, background):
        arr.setflags(write=False)
    labels = np.arange(num_points)
    labels.setflags(write=False)
    return SyntheticScene(int(seed), points, labels, features, background)


def confidence(displacement_px: float, sigma: float = CONFIDENCE_SIGMA_PX) -> float:
    """Observation confidence exp(-e^2 / (2 sigma^2)) for an injected pixel displacement e."""
    if sigma <= 0:
        raise ValueError(f"confidence sigma must be > 0, got {sigma}")
    return float(np.exp(-(displacement_px**2) / (2.0 * sigma**2)))


def pixel_to_patch(u: float, v: float, intr: Intrinsics, patch_rows: int, patch_cols: int) -> int:
    """Row-major index of the patch containing a pixel (floor semantics at boundaries)."""
    if not (0.0 <= u < intr.width and 0.0 <= v < intr.height):
        raise ValueError(f"pixel ({u}, {v}) outside {intr.width}x{intr.height} frame")
    col = min(int(u * patch_cols / intr.width), patch_cols - 1)
    row = min(int(v * patch_rows / intr.height), patch_rows - 1)
    return row * patch_cols + col


def patch_center_pixel(
    patch_index: int, intr: Intrinsics, patch_rows: int, patch_cols: int
) -> tuple[float, float]:
    row, col = divmod(patch_index, patch_cols)
    if not 0 <= row < patch_rows:
        raise ValueError(f"patch index {patch_index} outside {patch_rows}x{patch_cols} grid")
    return (col + 0.5) * intr.width / patch_cols, (row + 0.5) * intr.height / patch_rows


@dataclass(frozen=True)
class CorrespondencePair:
    point_id: int
    view_q: int
    patch_q: int
    u_q: float
    v_q: float
    view_k: int
    patch_k: int
    u_k: float
    v_k: float
    weight: float

    def __post_init__(self):
        if self.view_q == self.view_k:
            raise ValueError("a correspondence pair must span two distinct views")
        if not 0.0 < self.weight <= 1.0:
            raise ValueError(f"weight must be in (0, 1], got {self.weight}")


@dataclass
class CorrespondenceSet:
    """Supervision pairs plus, per point, every observed (view, patch) token."""

    pairs: list[CorrespondencePair]
    correspondents: dict[int, tuple[tuple[int, int], ...]]
    n_views: int
    patch_rows: int
    patch_cols: int

    @property
    def num_pairs(self) -> int:
        return len(self.pairs)

    @property
    def tokens_per_view(self) -> int:
        return self.patch_rows * self.patch_cols

    @property
    def total_tokens(self) -> int:
        return self.n_views * self.tokens_per_view

    def token_index(self, view: int, patch: int) -> int:
        return view * self.tokens_per_view + patch


def render_scene_latents(
    scene: SyntheticScene,
    poses: list[CameraPose],
    intr: Intrinsics,
    patch_rows: int,
    patch_cols: int,
) -> np.ndarray:
    """Per-view patch features: mean of the features of points landing in each patch.

    Returns [n_views * patches, latent_dim], view-major. Empty patches take
    the scene background vector.
    """
    p = patch_rows * patch_cols
    d = scene.features.shape[1]
    out = np.tile(scene.background, (len(poses) * p, 1))
    for n, pose in enumerate(poses):
        sums = np.zeros((p, d))
        counts = np.zeros(p)
        for j in range(scene.num_points):
            try:
                u, v, _ = project_point(pose, intr, scene.points[j])
            except BehindCameraError:
                continue
            if not (0.0 <= u < intr.width and 0.0 <= v < intr.height):
                continue
            s = pixel_to_patch(u, v, intr, patch_rows, patch_cols)
            sums[s] += scene.features[j]
            counts[s] += 1.0
        filled = counts > 0
        out[n * p : (n + 1) * p][filled] = sums[filled] / counts[filled, None]
    return out


def synthetic_sfm(
    scene: SyntheticScene,
    grid: list[ViewSpec] | list[CameraPose],
    intr: Intrinsics,
    patch_rows: int,
    patch_cols: int,
    pixel_noise_sigma: float = 0.0,
    seed: int = 0,
    confidence_sigma: float = CONFIDENCE_SIGMA_PX,
) -> CorrespondenceSet:
    """Exact multi-view observations of every scene point, paired per unordered view pair.

    Observed pixels are the true projections plus optional Gaussian noise;
    noisy pixels that leave the frame are dropped. Points visible in fewer
    than two views contribute nothing.
    """
    poses = [g if isinstance(g, CameraPose) else build_virtual_camera(g) for g in grid]
    rng = np.random.default_rng(np.random.SeedSequence([scene.seed, int(seed), 0x5F]))
    pairs: list[CorrespondencePair] = []
    correspondents: dict[int, tuple[tuple[int, int], ...]] = {}
    for j in range(scene.num_points):
        observations = []
        for n, pose in enumerate(poses):
            try:
                u, v, _ = project_point(pose, intr, scene.points[j])
            except BehindCameraError:
                continue
            if not (0.0 <= u < intr.width and 0.0 <= v < intr.height):
                continue
            if pixel_noise_sigma > 0.0:
                du, dv = rng.normal(0.0, pixel_noise_sigma, size=2)
                u_obs, v_obs = u + du, v + dv
                if not (0.0 <= u_obs < intr.width and 0.0 <= v_obs < intr.height):
                    continue
                displacement = float(np.hypot(du, dv))
            else:
                u_obs, v_obs, displacement = u, v, 0.0
            conf = confidence(displacement, confidence_sigma)
            patch = pixel_to_patch(u_obs, v_obs, intr, patch_rows, patch_cols)
            observations.append((n, u_obs, v_obs, patch, conf))
        if len(observations) < 2:
            continue
        correspondents[j] = tuple((n, s) for n, _, _, s, _ in observations)
        for a, b in combinations(observations, 2):  # observations are view-ascending
            pairs.append(
                CorrespondencePair(
                    point_id=j,
                    view_q=a[0], patch_q=a[3], u_q=a[1], v_q=a[2],
                    view_k=b[0], patch_k=b[3], u_k=b[1], v_k=b[2],
                    weight=min(a[4], b[4]),
                )
            )
    return CorrespondenceSet(pairs, correspondents, len(poses), patch_rows, patch_cols)


def subsample_pairs(corr: CorrespondenceSet, budget: int, rng: np.random.Generator) -> CorrespondenceSet:
    """Uniform without-replacement subsample down to `budget` pairs; order preserved."""
    if budget < 0:
        raise ValueError("budget must be >= 0")
    if corr.num_pairs <= budget:
        return corr
    keep = np.sort(rng.choice(corr.num_pairs, size=budget, replace=False))
    out = CorrespondenceSet(
        [corr.pairs[i] for i in keep],
        corr.correspondents,
        corr.n_views,
        corr.patch_rows,
        corr.patch_cols,
    )
    pools = getattr(corr, "_negative_pools", None)
    if pools is not None:  # same point universe, so the exclusion pools carry over
        object.__setattr__(out, "_negative_pools", pools)
    return out


def negative_pool(corr: CorrespondenceSet, point_id: int) -> np.ndarray:
    """Token indices that are not observations of the point (cached per point)."""
    cache = getattr(corr, "_negative_pools", None)
    if cache is None:
        cache = {}
        object.__setattr__(corr, "_negative_pools", cache)
    pool = cache.get(point_id)
    if pool is None:
        excluded = np.fromiter(
            (corr.token_index(v, s) for v, s in corr.correspondents[point_id]),
            dtype=np.intp,
        )
        pool = np.setdiff1d(np.arange(corr.total_tokens), excluded, assume_unique=False)
        pool.setflags(write=False)
        cache[point_id] = pool
    return pool


def sample_negatives(
    corr: CorrespondenceSet, pair: CorrespondencePair, n_neg: int, rng: np.random.Generator
) -> np.ndarray:
    """n_neg distinct token indices, uniform over tokens that are NOT observations of the pair's point.

    Token indices are view-major (view * patches + patch), i.e. packed
    (view, patch) keys.
    """
    pool = negative_pool(corr, pair.point_id)
    if pool.size < n_neg:
        raise ValueError(f"only {pool.size} candidate negatives for n_neg={n_neg}")
    return rng.choice(pool, size=n_neg, replace=False)


def sample_all_negatives(
    corr: CorrespondenceSet, n_neg: int, rng: np.random.Generator
) -> np.ndarray:
    """Stacked negative samples for every pair, shape [num_pairs, n_neg]."""
    return np.stack([sample_negatives(corr, p, n_neg, rng) for p in corr.pairs])


def csl_loss(
    q_emb: Tensor,
    k_emb: Tensor,
    corr: CorrespondenceSet,
    n_neg: int,
    tau: float,
    rng: np.random.Generator,
    negatives: np.ndarray | None = None,
) -> Tensor:
    """Confidence-weighted sparse InfoNCE over query/key token embeddings.

    q_emb and k_emb are [total_tokens, d] in view-major token order. Each
    pair contributes w * (logsumexp(pos, negs) - pos) with logits scaled by
    1/tau; the result is the mean over pairs. Exactly
    num_pairs * (n_neg + 1) query-key dot products are evaluated.

    `negatives` overrides the per-pair sampling (e.g. to share one draw
    across the supervised layers of a step). Embeddings are scaled to unit
    row norm before the dot products: with the standard contrastive
    temperature (0.07) raw desk-scale dots would saturate the softmax.
    """
    if tau <= 0.0:
        raise ValueError(f"temperature must be > 0, got {tau}")
    if q_emb.shape != k_emb.shape or q_emb.shape[0] != corr.total_tokens:
        raise ad.ShapeError(
            f"embeddings {q_emb.shape}/{k_emb.shape} do not cover {corr.total_tokens} tokens"
        )
    m = corr.num_pairs
    if m == 0:
        warnings.warn("csl_loss over an empty correspondence set is defined as 0", stacklevel=2)
        return Tensor(np.asarray(0.0))

    q_idx = np.array([corr.token_index(p.view_q, p.patch_q) for p in corr.pairs], dtype=np.intp)
    k_idx = np.array([corr.token_index(p.view_k, p.patch_k) for p in corr.pairs], dtype=np.intp)
    neg_idx = sample_all_negatives(corr, n_neg, rng) if negatives is None else np.asarray(negatives)
    if neg_idx.shape != (m, n_neg):
        raise ad.ShapeError(f"negatives shape {neg_idx.shape} != {(m, n_neg)}")
    weights = np.array([p.weight for p in corr.pairs])
    q_emb = ad.l2_normalize_rows(q_emb)
    k_emb = ad.l2_normalize_rows(k_emb)

    inv_tau = 1.0 / tau
    pos = ad.scalar_mul(ad.rowwise_dot(ad.gather_rows(q_emb, q_idx), ad.gather_rows(k_emb, k_idx)), inv_tau)
    neg = ad.scalar_mul(
        ad.rowwise_dot(
            ad.gather_rows(q_emb, np.repeat(q_idx, n_neg)),
            ad.gather_rows(k_emb, neg_idx.reshape(-1)),
        ),
        inv_tau,
    )
    logits = ad.concat([ad.reshape(pos, (m, 1)), ad.reshape(neg, (m, n_neg))], axis=1)
    per_pair = ad.sub(ad.logsumexp_rows(logits), pos)
    return ad.scalar_mul(ad.tensor_sum(ad.elementwise_mul(per_pair, Tensor(weights))), 1.0 / m)


def corr_acc(
    predicted_px: np.ndarray, oracle_px: np.ndarray, threshold_px: float = 5.0
) -> float:
    """Fraction of probes whose predicted pixel lies strictly within threshold_px of the oracle."""
    predicted = np.asarray(predicted_px, dtype=np.float64).reshape(-1, 2)
    oracle = np.asarray(oracle_px, dtype=np.float64).reshape(-1, 2)
    if predicted.shape != oracle.shape:
        raise ValueError(f"probe shapes differ: {predicted.shape} vs {oracle.shape}")
    if predicted.shape[0] == 0:
        return 0.0
    err = np.linalg.norm(predicted - oracle, axis=1)
    return float(np.mean(err < threshold_px))


def corr_acc_from_attention(
    row_fn,
    corr: CorrespondenceSet,
    intr: Intrinsics,
    threshold_px: float = 5.0,
) -> float:
    """Consistency proxy: both directions of every pair, predicting the centre
    pixel of the argmax-attention patch in the target view.

    row_fn(view, patch) returns attention weights over all view tokens
    (view-major), for the query token at that position.
    """
    p = corr.tokens_per_view
    predicted, oracle = [], []
    for pair in corr.pairs:
        for qv, qs, kv, target_uv in (
            (pair.view_q, pair.patch_q, pair.view_k, (pair.u_k, pair.v_k)),
            (pair.view_k, pair.patch_k, pair.view_q, (pair.u_q, pair.v_q)),
        ):
            row = np.asarray(row_fn(qv, qs))
            segment = row[kv * p : (kv + 1) * p]
            best = int(np.argmax(segment))
            predicted.append(patch_center_pixel(best, intr, corr.patch_rows, corr.patch_cols))
            oracle.append(target_uv)
    return corr_acc(np.array(predicted), np.array(oracle), threshold_px)


def lambda_schedule(step: int, warmup_steps: int, ramp_steps: int, target: float = 0.01) -> float:
    """0 through warmup, then linear to `target` across ramp_steps, constant after."""
    if warmup_steps < 0 or ramp_steps < 0:
        raise ValueError("warmup and ramp must be >= 0")
    if step < warmup_steps or target == 0.0:
        return 0.0
    if ramp_steps == 0 or step >= warmup_steps + ramp_steps:
        return target
    return target * (step - warmup_steps) / ramp_steps


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

CSV_HEADER = ["point_id", "view_q", "u_q", "v_q", "patch_q", "view_k", "u_k", "v_k", "patch_k", "weight"]


def save_correspondences_csv(path, corr: CorrespondenceSet) -> None:
    ordered = sorted(corr.pairs, key=lambda p: (p.point_id, p.view_q, p.view_k))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for p in ordered:
            writer.writerow(
                [
                    p.point_id,
                    p.view_q, f"{p.u_q:.9f}", f"{p.v_q:.9f}", p.patch_q,
                    p.view_k, f"{p.u_k:.9f}", f"{p.v_k:.9f}", p.patch_k,
                    f"{p.weight:.9f}",
                ]
            )


def load_correspondences_csv(path, n_views: int, patch_rows: int, patch_cols: int) -> CorrespondenceSet:
    pairs: list[CorrespondencePair] = []
    seen: dict[int, set[tuple[int, int]]] = {}
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        for row in reader:
            pair = CorrespondencePair(
                point_id=int(row[0]),
                view_q=int(row[1]), u_q=float(row[2]), v_q=float(row[3]), patch_q=int(row[4]),
                view_k=int(row[5]), u_k=float(row[6]), v_k=float(row[7]), patch_k=int(row[8]),
                weight=float(row[9]),
            )
            pairs.append(pair)
            obs = seen.setdefault(pair.point_id, set())
            obs.add((pair.view_q, pair.patch_q))
            obs.add((pair.view_k, pair.patch_k))
    correspondents = {pid: tuple(sorted(obs)) for pid, obs in seen.items()}
    return CorrespondenceSet(pairs, correspondents, n_views, patch_rows, patch_cols)


def save_scene_json(path, scene: SyntheticScene) -> None:
    payload = {
        "seed": scene.seed,
        "num_points": scene.num_points,
        "latent_dim": int(scene.features.shape[1]),
        "points": scene.points.tolist(),
        "labels": scene.labels.tolist(),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)
        fh.write("\n")


def load_scene_json(path) -> SyntheticScene:
    """Rebuild a scene from its stored seed; stored points guard against drift."""
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    scene = generate_scene(payload["seed"], payload["num_points"], payload["latent_dim"])
    if not np.allclose(scene.points, np.array(payload["points"]), atol=1e-12):
        raise ValueError(f"{path}: stored points do not match regeneration from seed")
    return scene
