"""Toy diffusion transformer with camera-aware adapter branches.

The backbone (self-attention, a constant-token cross-attention stub, and the
feed-forward) is random-orthogonal initialized and frozen: there is no real
pretraining, the artifact tests mechanisms, not priors. Trainable parameters
are exactly the low-rank factors on the backbone attention projections and
the per-block camera adapter (bottlenecked multi-head attention over all
tokens of all views, modulated by per-view projective matrices). The adapter
output projection and the low-rank B factors start at zero, so at step 0 the
full model is bit-identical to the frozen backbone.

Token layout: slot 0 holds the conditioning anchor (the clean latent of view
0, standing in for an encoded sketch), slots 1..N hold the views. Block
inputs at the supervised layers are cached on the live graph (never
detached) so the correspondence loss reaches the adapter query/key weights
and everything upstream of them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .prope import PropeLayout, PropeModulator, TokenViewMap

TIME_FEATURES = 8


@dataclass
class ModelConfig:
    depth: int = 8
    model_dim: int = 64
    heads: int = 4
    adapter_bottleneck_ratio: int = 8
    adapter_heads: int = 2
    lora_rank: int = 16
    supervised_layers: tuple[int, ...] = (3, 4, 5, 6)
    patch_rows: int = 12
    patch_cols: int = 12
    n_views: int = 8
    latent_dim: int = 8
    ffn_mult: int = 4
    projective_dim: int | None = None  # None: default half split, min 4
    use_ca3: bool = True
    use_lora: bool = True

    def __post_init__(self):
        self.supervised_layers = tuple(int(u) for u in self.supervised_layers)
        if self.model_dim % self.heads != 0:
            raise ValueError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if self.model_dim % self.adapter_bottleneck_ratio != 0:
            raise ValueError(
                f"model_dim {self.model_dim} not divisible by bottleneck ratio "
                f"{self.adapter_bottleneck_ratio}"
            )
        if self.bottleneck_dim % self.adapter_heads != 0:
            raise ValueError(
                f"bottleneck dim {self.bottleneck_dim} not divisible by adapter heads "
                f"{self.adapter_heads}"
            )
        if any(not 0 <= u < self.depth for u in self.supervised_layers):
            raise ValueError(f"supervised layers {self.supervised_layers} outside [0, {self.depth})")
        if self.n_views < 1:
            raise ValueError("n_views must be >= 1")

    @property
    def bottleneck_dim(self) -> int:
        return self.model_dim // self.adapter_bottleneck_ratio

    @property
    def adapter_head_dim(self) -> int:
        return self.bottleneck_dim // self.adapter_heads

    @property
    def tokens_per_view(self) -> int:
        return self.patch_rows * self.patch_cols

    @property
    def view_tokens(self) -> int:
        return self.n_views * self.tokens_per_view

    def prope_layout(self) -> PropeLayout:
        if self.projective_dim is None:
            return PropeLayout.default_split(self.adapter_head_dim)
        return PropeLayout(
            head_dim=self.adapter_head_dim,
            projective_dim=self.projective_dim,
            spatial_dim=self.adapter_head_dim - self.projective_dim,
        )

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        raw = json.loads(text)
        raw["supervised_layers"] = tuple(raw.get("supervised_layers", ()))
        return cls(**raw)


@dataclass
class FrameReplicationMap:
    """Index contract for surviving a 4x temporally compressing encoder.

    Frame 0 duplicates view 0 as the conditioning anchor; each view then
    occupies 4 consecutive frames, so the encoder emits one anchor latent
    (dropped) plus exactly one latent per view.
    """

    n_views: int
    compression: int
    total_frames: int
    frames_of_view: list[list[int]]
    latent_of_view: list[int]
    anchor_frame: int = 0
    anchor_latent: int = 0

    @property
    def n_latents(self) -> int:
        return self.n_views + 1


def frame_replication_map(n_views: int, compression: int = 4) -> FrameReplicationMap:
    if n_views < 1:
        raise ValueError(f"n_views must be >= 1, got {n_views}")
    if compression != 4:
        raise ValueError(f"only 4x temporal compression is supported, got {compression}")
    frames_of_view = [[1 + 4 * i + j for j in range(4)] for i in range(n_views)]
    latent_of_view = [i + 1 for i in range(n_views)]
    return FrameReplicationMap(
        n_views=n_views,
        compression=compression,
        total_frames=4 * n_views + 1,
        frames_of_view=frames_of_view,
        latent_of_view=latent_of_view,
    )


def _orthogonal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    n = max(rows, cols)
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    q = q * np.sign(np.diag(r))  # make the factorization unique
    return q[:rows, :cols].copy()


def _time_features(t: float) -> np.ndarray:
    tau = 2.0 * np.pi * t
    return np.array(
        [1.0, t, np.sin(tau), np.cos(tau), np.sin(2 * tau), np.cos(2 * tau), np.sin(4 * tau), np.cos(4 * tau)]
    )


def lora_linear(x: Tensor, w: Tensor, b: Tensor | None, a_factor: Tensor, b_factor: Tensor) -> Tensor:
    """(W + B@A) applied to row vectors: x @ W + (x @ A^T) @ B^T, A: [rank, in], B: [out, rank]."""
    if a_factor.shape[1] != w.shape[0] or b_factor.shape[0] != w.shape[1]:
        raise ad.ShapeError(
            f"lora factors A{a_factor.shape}/B{b_factor.shape} do not match weight {w.shape}"
        )
    if a_factor.shape[0] != b_factor.shape[1]:
        raise ad.ShapeError(f"lora rank mismatch A{a_factor.shape} vs B{b_factor.shape}")
    y = ad.matmul(x, w)
    delta = ad.matmul(ad.matmul(x, ad.transpose(a_factor)), ad.transpose(b_factor))
    y = ad.add(y, delta)
    if b is not None:
        y = ad.add_rowvec(y, b)
    return y


def _linear(x: Tensor, w: Tensor, b: Tensor | None) -> Tensor:
    y = ad.matmul(x, w)
    return ad.add_rowvec(y, b) if b is not None else y


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    t, d = x.shape
    return ad.transpose(ad.reshape(x, (t, n_heads, d // n_heads)), (1, 0, 2))


def _merge_heads(x: Tensor) -> Tensor:
    h, t, dh = x.shape
    return ad.reshape(ad.transpose(x, (1, 0, 2)), (t, h * dh))


class Model:
    """One training run exclusively owns a Model; clone via state dicts for read-only use."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.layout = cfg.prope_layout()
        # Slot 0 is the anchor; views occupy slots 1..N.
        self.slot_map = TokenViewMap.build(cfg.n_views + 1, cfg.patch_rows, cfg.patch_cols)
        self.hidden_cache: dict[int, Tensor] = {}
        self.recorded_attention: dict[int, np.ndarray] = {}
        self._params: dict[str, Tensor] = {}
        self._group_of: dict[str, str] = {}
        self._init_params(np.random.default_rng(seed))

    # -- parameters ---------------------------------------------------------

    def _add(self, name: str, data: np.ndarray, group: str) -> Tensor:
        t = Tensor(np.array(data, dtype=np.float64), requires_grad=group != "backbone", name=name)
        self._params[name] = t
        self._group_of[name] = group
        return t

    def _init_params(self, rng: np.random.Generator):
        cfg = self.cfg
        d, bn = cfg.model_dim, cfg.bottleneck_dim
        self._add("patch_embed.w", _orthogonal(rng, cfg.latent_dim, d), "backbone")
        self._add("patch_embed.b", 0.01 * rng.standard_normal(d), "backbone")
        self._add("time_embed.w", 0.1 * rng.standard_normal((TIME_FEATURES, d)), "backbone")
        self._add("cond_token", rng.standard_normal((1, d)), "backbone")
        for layer in range(cfg.depth):
            pre = f"blocks.{layer}"
            for proj in ("q", "k", "v", "o"):
                self._add(f"{pre}.attn.w{proj}", _orthogonal(rng, d, d), "backbone")
                self._add(f"{pre}.attn.b{proj}", 0.01 * rng.standard_normal(d), "backbone")
                if cfg.use_lora:
                    self._add(
                        f"{pre}.lora.{proj}.a",
                        rng.standard_normal((cfg.lora_rank, d)) / np.sqrt(d),
                        "lora",
                    )
                    self._add(f"{pre}.lora.{proj}.b", np.zeros((d, cfg.lora_rank)), "lora")
            if cfg.use_ca3:
                self._add(f"{pre}.ca3.down.w", rng.standard_normal((d, bn)) / np.sqrt(d), "adapter")
                self._add(f"{pre}.ca3.down.b", np.zeros(bn), "adapter")
                for proj in ("q", "k", "v"):
                    self._add(
                        f"{pre}.ca3.{proj}.w", rng.standard_normal((bn, bn)) / np.sqrt(bn), "adapter"
                    )
                    self._add(f"{pre}.ca3.{proj}.b", np.zeros(bn), "adapter")
                self._add(f"{pre}.ca3.out.w", np.zeros((bn, d)), "adapter")
                self._add(f"{pre}.ca3.out.b", np.zeros(d), "adapter")
            self._add(f"{pre}.cross.wv", _orthogonal(rng, d, d), "backbone")
            self._add(f"{pre}.cross.bv", 0.01 * rng.standard_normal(d), "backbone")
            self._add(f"{pre}.cross.wo", _orthogonal(rng, d, d), "backbone")
            self._add(f"{pre}.cross.bo", 0.01 * rng.standard_normal(d), "backbone")
            hidden = cfg.ffn_mult * d
            self._add(f"{pre}.ffn.w1", _orthogonal(rng, d, hidden), "backbone")
            self._add(f"{pre}.ffn.b1", 0.01 * rng.standard_normal(hidden), "backbone")
            self._add(f"{pre}.ffn.w2", _orthogonal(rng, hidden, d), "backbone")
            self._add(f"{pre}.ffn.b2", 0.01 * rng.standard_normal(d), "backbone")
        self._add("out_head.w", _orthogonal(rng, d, cfg.latent_dim), "backbone")
        self._add("out_head.b", np.zeros(cfg.latent_dim), "backbone")

    def param(self, name: str) -> Tensor:
        return self._params[name]

    def named_parameters(self):
        return list(self._params.items())

    def parameter_groups(self) -> dict[str, list[tuple[str, Tensor]]]:
        groups: dict[str, list[tuple[str, Tensor]]] = {"backbone": [], "lora": [], "adapter": []}
        for name, t in self._params.items():
            groups[self._group_of[name]].append((name, t))
        return groups

    def trainable_parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self._params.items() if t.requires_grad]

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        missing = sorted(set(self._params) - set(state))
        extra = sorted(set(state) - set(self._params))
        if missing or extra:
            raise ValueError(f"state dict mismatch; missing={missing[:4]}, extra={extra[:4]}")
        for name, t in self._params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {t.data.shape}")
            np.copyto(t.data, arr)

    # -- forward ------------------------------------------------------------

    def _slot_projectives(self, projectives) -> list:
        if len(projectives) != self.cfg.n_views:
            raise ValueError(f"expected {self.cfg.n_views} projective matrices, got {len(projectives)}")
        return [projectives[0], *projectives]

    def modulator(self, projectives) -> PropeModulator:
        return PropeModulator(self._slot_projectives(projectives), self.slot_map, self.layout)

    def _self_attention(self, x: Tensor, layer: int) -> Tensor:
        cfg = self.cfg
        pre = f"blocks.{layer}"
        xn = ad.layer_norm(x)
        qkv = {}
        for proj in ("q", "k", "v"):
            w, b = self.param(f"{pre}.attn.w{proj}"), self.param(f"{pre}.attn.b{proj}")
            if cfg.use_lora:
                qkv[proj] = lora_linear(
                    xn, w, b, self.param(f"{pre}.lora.{proj}.a"), self.param(f"{pre}.lora.{proj}.b")
                )
            else:
                qkv[proj] = _linear(xn, w, b)
        q = _split_heads(qkv["q"], cfg.heads)
        k = _split_heads(qkv["k"], cfg.heads)
        v = _split_heads(qkv["v"], cfg.heads)
        scale = 1.0 / np.sqrt(cfg.model_dim // cfg.heads)
        attn = ad.softmax(ad.scalar_mul(ad.matmul(q, ad.transpose(k, (0, 2, 1))), scale))
        out = _merge_heads(ad.matmul(attn, v))
        wo, bo = self.param(f"{pre}.attn.wo"), self.param(f"{pre}.attn.bo")
        if cfg.use_lora:
            return lora_linear(
                out, wo, bo, self.param(f"{pre}.lora.o.a"), self.param(f"{pre}.lora.o.b")
            )
        return _linear(out, wo, bo)

    def _ca3_bottleneck(self, h: Tensor, layer: int) -> Tensor:
        # The branch normalizes its input like the self-attention branch does;
        # the residual stream itself is never rescaled.
        pre = f"blocks.{layer}.ca3"
        return _linear(ad.layer_norm(h), self.param(f"{pre}.down.w"), self.param(f"{pre}.down.b"))

    def ca3_branch(
        self, h: Tensor, layer: int, modulator: PropeModulator, record_attention: bool = False
    ) -> Tensor:
        """Down-project, attend over all tokens of all views with projective modulation, up-project."""
        cfg = self.cfg
        pre = f"blocks.{layer}.ca3"
        hb = self._ca3_bottleneck(h, layer)
        q = _split_heads(_linear(hb, self.param(f"{pre}.q.w"), self.param(f"{pre}.q.b")), cfg.adapter_heads)
        k = _split_heads(_linear(hb, self.param(f"{pre}.k.w"), self.param(f"{pre}.k.b")), cfg.adapter_heads)
        v = _split_heads(_linear(hb, self.param(f"{pre}.v.w"), self.param(f"{pre}.v.b")), cfg.adapter_heads)
        q, k, v = modulator.modulate_q(q), modulator.modulate_k(k), modulator.modulate_v(v)
        scale = 1.0 / np.sqrt(cfg.adapter_head_dim)
        attn = ad.softmax(ad.scalar_mul(ad.matmul(q, ad.transpose(k, (0, 2, 1))), scale))
        if record_attention:
            self.recorded_attention[layer] = attn.data.mean(axis=0)
        out = modulator.unmodulate_o(ad.matmul(attn, v))
        return _linear(_merge_heads(out), self.param(f"{pre}.out.w"), self.param(f"{pre}.out.b"))

    def _cross_stub(self, h: Tensor, layer: int) -> Tensor:
        # Attention to a single constant token collapses to its value path:
        # the softmax over one key is 1, so every token receives the same row.
        pre = f"blocks.{layer}.cross"
        vc = _linear(self.param("cond_token"), self.param(f"{pre}.wv"), self.param(f"{pre}.bv"))
        vo = _linear(vc, self.param(f"{pre}.wo"), self.param(f"{pre}.bo"))
        return ad.add_rowvec(h, ad.reshape(vo, (self.cfg.model_dim,)))

    def _ffn(self, x: Tensor, layer: int) -> Tensor:
        pre = f"blocks.{layer}.ffn"
        hidden = ad.gelu(_linear(ad.layer_norm(x), self.param(f"{pre}.w1"), self.param(f"{pre}.b1")))
        return _linear(hidden, self.param(f"{pre}.w2"), self.param(f"{pre}.b2"))

    def block_forward(
        self,
        h: Tensor,
        layer: int,
        modulator: PropeModulator | None,
        backbone_only: bool = False,
        record_attention: bool = False,
        cache: bool = True,
    ) -> Tensor:
        cfg = self.cfg
        if not backbone_only and cache and layer in cfg.supervised_layers:
            self.hidden_cache[layer] = h  # kept on the live graph, never detached
        h_new = ad.add(h, self._self_attention(h, layer))
        if cfg.use_ca3 and not backbone_only:
            h_new = ad.add(h_new, self.ca3_branch(h, layer, modulator, record_attention))
        h_new = self._cross_stub(h_new, layer)
        return ad.add(h_new, self._ffn(h_new, layer))

    def forward(
        self,
        z_t: np.ndarray | Tensor,
        t: float,
        cond: np.ndarray,
        projectives,
        backbone_only: bool = False,
        record_attention_layers: tuple[int, ...] = (),
    ) -> Tensor:
        """Predict the velocity field for the view tokens of z_t.

        z_t: [n_views * patches, latent_dim] noisy latents; cond: [patches,
        latent_dim] clean anchor latent (view 0); projectives: one per view.
        """
        cfg = self.cfg
        if not 0.0 <= t <= 1.0:
            raise ValueError(f"t must lie in [0, 1], got {t}")
        z = z_t if isinstance(z_t, Tensor) else Tensor(np.asarray(z_t, dtype=np.float64))
        if z.shape != (cfg.view_tokens, cfg.latent_dim):
            raise ad.ShapeError(f"z_t shape {z.shape} != {(cfg.view_tokens, cfg.latent_dim)}")
        cond_arr = np.asarray(cond, dtype=np.float64)
        if cond_arr.shape != (cfg.tokens_per_view, cfg.latent_dim):
            raise ad.ShapeError(
                f"cond shape {cond_arr.shape} != {(cfg.tokens_per_view, cfg.latent_dim)}"
            )
        modulator = self.modulator(projectives) if cfg.use_ca3 and not backbone_only else None
        self.hidden_cache = {}
        self.recorded_attention = {}

        x = ad.concat([Tensor(cond_arr), z], axis=0)
        h = _linear(x, self.param("patch_embed.w"), self.param("patch_embed.b"))
        t_emb = Tensor(_time_features(float(t))[None, :]) @ self.param("time_embed.w")
        h = ad.add_rowvec(h, ad.reshape(t_emb, (cfg.model_dim,)))
        for layer in range(cfg.depth):
            h = self.block_forward(
                h,
                layer,
                modulator,
                backbone_only=backbone_only,
                record_attention=layer in record_attention_layers,
            )
        y = _linear(ad.layer_norm(h), self.param("out_head.w"), self.param("out_head.b"))
        view_rows = np.arange(cfg.tokens_per_view, (cfg.n_views + 1) * cfg.tokens_per_view)
        return ad.gather_rows(y, view_rows)

    def clear_cache(self):
        self.hidden_cache = {}

    # -- correspondence-loss projections -------------------------------------

    def ca3_qk_embeddings(self, layer: int, modulator: PropeModulator) -> tuple[Tensor, Tensor]:
        """Adapter query/key projections of the cached hidden state at `layer`.

        Computed from the undetached cache through the same weights and
        projective modulation the in-block attention uses, then flattened
        back to [tokens, bottleneck_dim].
        """
        if not self.cfg.use_ca3:
            raise ValueError("model has no camera adapter branch")
        if layer not in self.hidden_cache:
            raise ValueError(f"layer {layer} is not cached; run a forward pass first")
        cfg = self.cfg
        pre = f"blocks.{layer}.ca3"
        hb = self._ca3_bottleneck(self.hidden_cache[layer], layer)
        q = _split_heads(_linear(hb, self.param(f"{pre}.q.w"), self.param(f"{pre}.q.b")), cfg.adapter_heads)
        k = _split_heads(_linear(hb, self.param(f"{pre}.k.w"), self.param(f"{pre}.k.b")), cfg.adapter_heads)
        return _merge_heads(modulator.modulate_q(q)), _merge_heads(modulator.modulate_k(k))

    def view_token_rows(self) -> np.ndarray:
        """Global row indices of the view tokens (anchor slot excluded)."""
        p = self.cfg.tokens_per_view
        return np.arange(p, (self.cfg.n_views + 1) * p)

    def extract_attention(self, layer: int, query_token: int) -> np.ndarray:
        """Head-averaged adapter attention row for one query token from the last recorded forward."""
        if not 0 <= layer < self.cfg.depth:
            raise ValueError(f"layer {layer} outside [0, {self.cfg.depth})")
        if layer not in self.recorded_attention:
            raise ValueError(f"no recorded attention at layer {layer}; pass record_attention_layers")
        rows = self.recorded_attention[layer]
        if not 0 <= query_token < rows.shape[0]:
            raise ValueError(f"query token {query_token} outside [0, {rows.shape[0]})")
        return rows[query_token]
