"""Projective position encoding for cross-view attention.

Head dimensions split into a projective subspace (contiguous 4-blocks, first)
and a spatial subspace (2-blocks, after it). Projective 4-blocks of queries
are multiplied by the view's projective matrix transposed, key and value
4-blocks by its inverse, so a pre-softmax logit depends on cameras only
through the relative transform P_q @ P_k^-1. The companion output step
inverts the value modulation, which keeps block outputs invariant when every
view's matrix is right-composed by one shared invertible matrix (camera gauge
invariance). The spatial subspace carries standard 2-D rotary encoding on
patch coordinates, so its logit contribution depends only on coordinate
differences.

Projective matrices are scaled to unit determinant magnitude before use; the
scaling is itself a right-composable gauge, so relative transforms are
unaffected while logit magnitudes stay bounded across camera radii.

Everything here is a pure function of immutable inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, per_token_matvec
from .geometry import ProjectiveMatrix

SPATIAL_ROPE_BASE = 10000.0


@dataclass(frozen=True)
class PropeLayout:
    """Split of one attention head: projective_dim (multiple of 4) + spatial_dim (even)."""

    head_dim: int
    projective_dim: int
    spatial_dim: int

    def __post_init__(self):
        if self.projective_dim < 0 or self.projective_dim % 4 != 0:
            raise ValueError(f"projective_dim must be a nonnegative multiple of 4, got {self.projective_dim}")
        if self.spatial_dim < 0 or self.spatial_dim % 2 != 0:
            raise ValueError(f"spatial_dim must be nonnegative and even, got {self.spatial_dim}")
        if self.projective_dim + self.spatial_dim != self.head_dim:
            raise ValueError(
                f"subspaces {self.projective_dim}+{self.spatial_dim} != head_dim {self.head_dim}"
            )

    @staticmethod
    def default_split(head_dim: int) -> "PropeLayout":
        """Half projective (rounded down to a multiple of 4), rest spatial.

        Tiny heads (dim 4..7) get a full 4-dim projective block instead of
        none, so the camera path stays active at bottleneck scale.
        """
        projective = (head_dim // 2) // 4 * 4
        if projective == 0 and head_dim >= 4:
            projective = 4
        spatial = head_dim - projective
        if spatial % 2 != 0:
            raise ValueError(f"no valid split for head_dim {head_dim}")
        return PropeLayout(head_dim=head_dim, projective_dim=projective, spatial_dim=spatial)


@dataclass(frozen=True)
class TokenViewMap:
    """Token index -> (view, patch row, patch col); tokens are view-major, patches row-major."""

    n_views: int
    patch_rows: int
    patch_cols: int
    view_of: np.ndarray
    row_of: np.ndarray
    col_of: np.ndarray

    @classmethod
    def build(cls, n_views: int, patch_rows: int, patch_cols: int) -> "TokenViewMap":
        if n_views < 1 or patch_rows < 1 or patch_cols < 1:
            raise ValueError("TokenViewMap dimensions must be positive")
        p = patch_rows * patch_cols
        t = np.arange(n_views * p)
        view_of = t // p
        rem = t % p
        for arr in (view_of, rem):
            arr.setflags(write=False)
        row_of = rem // patch_cols
        col_of = rem % patch_cols
        row_of.setflags(write=False)
        col_of.setflags(write=False)
        return cls(n_views, patch_rows, patch_cols, view_of, row_of, col_of)

    @property
    def tokens_per_view(self) -> int:
        return self.patch_rows * self.patch_cols

    @property
    def total_tokens(self) -> int:
        return self.n_views * self.tokens_per_view

    def token_index(self, view: int, patch: int) -> int:
        p = self.tokens_per_view
        if not (0 <= view < self.n_views and 0 <= patch < p):
            raise ValueError(f"token (view={view}, patch={patch}) out of range")
        return view * p + patch

    def view_slice(self, view: int) -> slice:
        p = self.tokens_per_view
        return slice(view * p, (view + 1) * p)


def normalize_projective(m: np.ndarray) -> np.ndarray:
    """Scale a 4x4 matrix to unit determinant magnitude."""
    det = np.linalg.det(m)
    if abs(det) <= 1e-12:
        raise ValueError("cannot normalize a singular projective matrix")
    return m / abs(det) ** 0.25


def _as_matrices(projectives) -> list[np.ndarray]:
    out = []
    for p in projectives:
        out.append(p.m if isinstance(p, ProjectiveMatrix) else np.asarray(p, dtype=np.float64))
    return out


def _block_diag_repeat(block: np.ndarray, count: int, head_dim: int, offset: int) -> np.ndarray:
    """Embed `count` copies of a 4x4 block into an identity of size head_dim."""
    m = np.eye(head_dim)
    for i in range(count):
        lo = offset + 4 * i
        m[lo : lo + 4, lo : lo + 4] = block
    return m


def _per_view_prope_matrices(projectives, layout: PropeLayout):
    """Per-view modulation matrices for q, k/v, and the output step."""
    n_blocks = layout.projective_dim // 4
    mats_q, mats_kv, mats_o = [], [], []
    for m in _as_matrices(projectives):
        p = normalize_projective(m)
        p_inv = np.linalg.inv(p)
        mats_q.append(_block_diag_repeat(p.T, n_blocks, layout.head_dim, 0))
        mats_kv.append(_block_diag_repeat(p_inv, n_blocks, layout.head_dim, 0))
        mats_o.append(_block_diag_repeat(p, n_blocks, layout.head_dim, 0))
    return np.stack(mats_q), np.stack(mats_kv), np.stack(mats_o)


def _rope_angles(token_map: TokenViewMap, layout: PropeLayout) -> np.ndarray:
    """Rotation angle per token and spatial 2-block.

    2-blocks alternate between the patch-row and patch-col coordinate;
    frequencies fall geometrically within each coordinate group.
    """
    n_blocks = layout.spatial_dim // 2
    coords = np.where(
        (np.arange(n_blocks) % 2 == 0)[None, :],
        token_map.row_of[:, None].astype(np.float64),
        token_map.col_of[:, None].astype(np.float64),
    )
    group = np.arange(n_blocks) // 2
    group_sizes = np.array([(n_blocks + 1) // 2, n_blocks // 2])
    denom = np.maximum(group_sizes[np.arange(n_blocks) % 2], 1)
    inv_freq = SPATIAL_ROPE_BASE ** (-group / denom)
    return coords * inv_freq[None, :]


def _per_token_rope_matrices(token_map: TokenViewMap, layout: PropeLayout) -> np.ndarray:
    t = token_map.total_tokens
    mats = np.tile(np.eye(layout.head_dim), (t, 1, 1))
    if layout.spatial_dim == 0:
        return mats
    angles = _rope_angles(token_map, layout)
    c, s = np.cos(angles), np.sin(angles)
    for b in range(layout.spatial_dim // 2):
        lo = layout.projective_dim + 2 * b
        mats[:, lo, lo] = c[:, b]
        mats[:, lo, lo + 1] = -s[:, b]
        mats[:, lo + 1, lo] = s[:, b]
        mats[:, lo + 1, lo + 1] = c[:, b]
    return mats


class PropeModulator:
    """Precomputed per-token modulation for one (cameras, token map, layout) triple.

    Combines the projective modulation with spatial rotary encoding (they act
    on disjoint subspaces) so the model applies one matrix per token and side.
    """

    def __init__(self, projectives, token_map: TokenViewMap, layout: PropeLayout):
        if len(projectives) != token_map.n_views:
            raise ValueError(
                f"{len(projectives)} projective matrices for {token_map.n_views} views"
            )
        self.layout = layout
        self.token_map = token_map
        per_view_q, per_view_kv, per_view_o = _per_view_prope_matrices(projectives, layout)
        rope = _per_token_rope_matrices(token_map, layout)
        view_of = token_map.view_of
        self.q_mats = per_view_q[view_of] @ rope
        self.k_mats = per_view_kv[view_of] @ rope
        self.v_mats = per_view_kv[view_of]
        self.o_mats = per_view_o[view_of]

    def modulate_q(self, q: Tensor) -> Tensor:
        return per_token_matvec(q, self.q_mats)

    def modulate_k(self, k: Tensor) -> Tensor:
        return per_token_matvec(k, self.k_mats)

    def modulate_v(self, v: Tensor) -> Tensor:
        return per_token_matvec(v, self.v_mats)

    def unmodulate_o(self, o: Tensor) -> Tensor:
        return per_token_matvec(o, self.o_mats)


def modulate_qkv(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    projectives,
    token_map: TokenViewMap,
    layout: PropeLayout,
) -> tuple[Tensor, Tensor, Tensor]:
    """Apply the projective modulation to [heads, T, head_dim] (or [T, head_dim]) tensors."""
    if len(projectives) != token_map.n_views:
        raise ValueError(f"{len(projectives)} projective matrices for {token_map.n_views} views")
    for t in (q, k, v):
        if t.shape[-1] != layout.head_dim or t.shape[-2] != token_map.total_tokens:
            raise ValueError(f"tensor shape {t.shape} does not match layout/token map")
    if layout.projective_dim == 0:
        return q, k, v
    per_view_q, per_view_kv, _ = _per_view_prope_matrices(projectives, layout)
    view_of = token_map.view_of
    return (
        per_token_matvec(q, per_view_q[view_of]),
        per_token_matvec(k, per_view_kv[view_of]),
        per_token_matvec(v, per_view_kv[view_of]),
    )


def spatial_rope(
    q: Tensor, k: Tensor, token_map: TokenViewMap, layout: PropeLayout
) -> tuple[Tensor, Tensor]:
    """Rotate the spatial 2-blocks of queries and keys by their patch coordinates."""
    if layout.spatial_dim == 0:
        return q, k
    mats = _per_token_rope_matrices(token_map, layout)
    return per_token_matvec(q, mats), per_token_matvec(k, mats)


def unmodulate_output(
    attn_out: Tensor, projectives, token_map: TokenViewMap, layout: PropeLayout
) -> Tensor:
    """Invert the value modulation on attention output (projective 4-blocks times the view's P)."""
    if layout.projective_dim == 0:
        return attn_out
    _, _, per_view_o = _per_view_prope_matrices(projectives, layout)
    return per_token_matvec(attn_out, per_view_o[token_map.view_of])
