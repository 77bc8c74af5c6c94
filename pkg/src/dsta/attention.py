"""Multi-head self-attention with three key-set policies.

Space-only attention keeps every patch inside its own frame, joint
space-time attention lets every token see every other token, and divided
space-time attention factorizes into a per-position temporal pass followed
by a per-frame spatial pass. Each policy exists in two interchangeable
forms that are required to agree:

* ``masked``: one full-attention pass with an additive key mask. Simple,
  easy to audit, and the verification oracle.
* ``gathered``: attends over explicitly gathered key sets. This is the
  real computational recipe, so multiply-add metering runs on this path.

Token layout. With a shared classification token (joint and divided
schemes), row 0 is the classification token and patch p of frame t (both
1-based) lives at row ``1 + (t-1)*N + (p-1)``. Space-only grids instead
replicate the classification token once per frame: frame t occupies the
``N+1`` rows starting at ``(t-1)*(N+1)``, its classification copy first.

Classification-token policy under the divided scheme: the temporal pass
includes the shared token as a key for every patch query but leaves the
token itself untouched (its output row is zeroed so the residual passes it
through); the spatial pass updates it by attending over all patch tokens
plus itself.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING

from .errors import ConfigError, ContractError, DimensionError
from .tensor import (
    Tensor,
    concat_cols,
    concat_rows,
    gather_rows,
    matmul,
    mul,
    scale,
    scale_add,
    slice_cols,
    softmax,
    transpose,
)

if TYPE_CHECKING:
    from .model import ModelConfig

MASK_OFF = -1e30
# Grids up to this many tokens default to the masked path; larger ones to
# the gathered path. Both paths are always available explicitly.
MASKED_PATH_MAX_TOKENS = 600


class AttentionScheme(Enum):
    SPACE_ONLY = "space"
    JOINT = "joint"
    DIVIDED = "divided"

    @classmethod
    def parse(cls, name: str) -> "AttentionScheme":
        for member in cls:
            if member.value == name:
                return member
        raise ConfigError(f"unknown attention scheme {name!r} (use space|joint|divided)")


@dataclass
class TokenGrid:
    """A clip's token sequence plus the layout needed to index it."""

    tokens: Tensor
    n_patches: int
    n_frames: int
    per_frame_cls: bool = False

    def __post_init__(self):
        expected = self.token_count
        if self.tokens.ndim != 2 or self.tokens.shape[0] != expected:
            raise DimensionError(
                f"grid tokens shape {self.tokens.shape} does not hold {expected} tokens"
            )

    @property
    def token_count(self) -> int:
        if self.per_frame_cls:
            return self.n_frames * (self.n_patches + 1)
        return self.n_frames * self.n_patches + 1

    @property
    def width(self) -> int:
        return self.tokens.shape[1]

    def patch_row(self, p: int, t: int) -> int:
        """Row of patch p in frame t; both indices are 1-based."""
        if not (1 <= p <= self.n_patches and 1 <= t <= self.n_frames):
            raise DimensionError(f"patch index ({p},{t}) outside grid")
        if self.per_frame_cls:
            return (t - 1) * (self.n_patches + 1) + p
        return 1 + (t - 1) * self.n_patches + (p - 1)

    def frame_patch_rows(self, t: int) -> list[int]:
        return [self.patch_row(p, t) for p in range(1, self.n_patches + 1)]

    def position_rows(self, p: int) -> list[int]:
        return [self.patch_row(p, t) for t in range(1, self.n_frames + 1)]

    def cls_rows(self) -> list[int]:
        if self.per_frame_cls:
            return [t * (self.n_patches + 1) for t in range(self.n_frames)]
        return [0]


@dataclass
class QKVProjection:
    """Query/key/value weights, each [D, D], applied as ``x @ w.T``."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    n_heads: int

    def __post_init__(self):
        d = self.wq.shape
        if len(d) != 2 or d[0] != d[1]:
            raise DimensionError(f"projection weights must be square, got {d}")
        if self.wk.shape != d or self.wv.shape != d:
            raise DimensionError("q/k/v projection shapes differ")
        if self.n_heads < 1 or d[0] % self.n_heads != 0:
            raise ConfigError(
                f"width {d[0]} is not divisible by {self.n_heads} heads"
            )

    @property
    def width(self) -> int:
        return self.wq.shape[0]

    @property
    def head_dim(self) -> int:
        return self.width // self.n_heads


# -- multiply-add metering ------------------------------------------------------


class MacCounter:
    """Counts fused multiply-adds reported by executed attention kernels."""

    def __init__(self):
        self.total = 0

    def add(self, macs: int) -> None:
        self.total += macs


_meters: list[MacCounter] = []


def metering() -> bool:
    return bool(_meters)


@contextmanager
def count_attention_macs():
    """Count score and weighted-sum multiply-adds of gathered attention calls."""
    counter = MacCounter()
    _meters.append(counter)
    try:
        yield counter
    finally:
        _meters.remove(counter)


# -- attention primitives -------------------------------------------------------


def scaled_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(head_dim)) v over explicit key/value rows."""
    for name, t in (("q", q), ("k", k), ("v", v)):
        if t.ndim != 2:
            raise DimensionError(f"scaled_attention {name} must be 2-d, got {t.shape}")
    dh = q.shape[1]
    if k.shape[1] != dh or v.shape[1] != dh:
        raise DimensionError(
            f"scaled_attention widths differ: q {q.shape}, k {k.shape}, v {v.shape}"
        )
    if k.shape[0] != v.shape[0]:
        raise DimensionError(f"key/value row counts differ: {k.shape} vs {v.shape}")
    if _meters:
        macs = 2 * q.shape[0] * k.shape[0] * dh
        for meter in _meters:
            meter.add(macs)
    scores = scale(matmul(q, transpose(k)), 1.0 / math.sqrt(dh))
    weights = softmax(scores, axis=-1)
    return matmul(weights, v)


def _masked_attention(q: Tensor, k: Tensor, v: Tensor, mask: Tensor | None) -> Tensor:
    """Full attention with an additive key mask; the verification oracle path."""
    dh = q.shape[1]
    raw = matmul(q, transpose(k))
    if mask is not None:
        scores = scale_add(raw, 1.0 / math.sqrt(dh), mask)
    else:
        scores = scale(raw, 1.0 / math.sqrt(dh))
    weights = softmax(scores, axis=-1)
    return matmul(weights, v)


# -- key masks (cached per layout) ----------------------------------------------

_mask_cache: dict[tuple, Tensor] = {}


def key_mask(kind: str, n_patches: int, n_frames: int) -> Tensor | None:
    """Additive [S, S] mask for the masked path; None means fully open."""
    if kind == "joint":
        return None
    key = (kind, n_patches, n_frames)
    cached = _mask_cache.get(key)
    if cached is not None:
        return cached
    if kind == "space_frame":
        grid = TokenGrid(
            Tensor.zeros((n_frames * (n_patches + 1), 1)), n_patches, n_frames, True
        )
    else:
        grid = TokenGrid(Tensor.zeros((n_frames * n_patches + 1, 1)), n_patches, n_frames)
    s = grid.token_count
    data = Tensor.full((s, s), MASK_OFF)
    buf = data.data

    def allow(row: int, col: int) -> None:
        buf[row * s + col] = 0.0

    if kind == "temporal":
        # Row 0 is zeroed after the pass; keep its softmax finite via self.
        allow(0, 0)
        for t in range(1, n_frames + 1):
            for p in range(1, n_patches + 1):
                row = grid.patch_row(p, t)
                allow(row, 0)
                for t2 in range(1, n_frames + 1):
                    allow(row, grid.patch_row(p, t2))
    elif kind == "divided_spatial":
        for col in range(s):
            allow(0, col)
        for t in range(1, n_frames + 1):
            frame_rows = grid.frame_patch_rows(t)
            for row in frame_rows:
                allow(row, 0)
                for col in frame_rows:
                    allow(row, col)
    elif kind == "space_frame":
        block = n_patches + 1
        for t in range(n_frames):
            base = t * block
            for i in range(block):
                for j in range(block):
                    allow(base + i, base + j)
    else:
        raise ContractError(f"unknown mask kind {kind!r}")
    _mask_cache[key] = data
    return data


# -- gathered per-head passes -----------------------------------------------------

_perm_cache: dict[tuple, list[int]] = {}


def _temporal_perm(n_patches: int, n_frames: int) -> list[int]:
    """Maps grid rows to rows of [zero-cls; position-major temporal outputs]."""
    key = (n_patches, n_frames)
    perm = _perm_cache.get(key)
    if perm is None:
        s = n_frames * n_patches + 1
        perm = [0] * s
        for p in range(1, n_patches + 1):
            for t in range(1, n_frames + 1):
                grid_row = 1 + (t - 1) * n_patches + (p - 1)
                perm[grid_row] = 1 + (p - 1) * n_frames + (t - 1)
        _perm_cache[key] = perm
    return perm


def _temporal_head(grid: TokenGrid, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Per-position attention across frames; the shared token passes through."""
    groups = []
    for p in range(1, grid.n_patches + 1):
        rows = grid.position_rows(p)
        key_rows = [0] + rows
        groups.append(
            scaled_attention(
                gather_rows(q, rows), gather_rows(k, key_rows), gather_rows(v, key_rows)
            )
        )
    zero_cls = Tensor.zeros((1, q.shape[1]))
    stacked = concat_rows([zero_cls] + groups)
    return gather_rows(stacked, _temporal_perm(grid.n_patches, grid.n_frames))


def _divided_spatial_head(grid: TokenGrid, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Per-frame attention; the shared token attends over every token."""
    cls_out = scaled_attention(gather_rows(q, [0]), k, v)
    groups = [cls_out]
    for t in range(1, grid.n_frames + 1):
        rows = grid.frame_patch_rows(t)
        key_rows = [0] + rows
        groups.append(
            scaled_attention(
                gather_rows(q, rows), gather_rows(k, key_rows), gather_rows(v, key_rows)
            )
        )
    return concat_rows(groups)


def _space_frame_head(grid: TokenGrid, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Frame-local attention over each frame's classification copy and patches."""
    block = grid.n_patches + 1
    groups = []
    for t in range(grid.n_frames):
        rows = list(range(t * block, (t + 1) * block))
        groups.append(
            scaled_attention(
                gather_rows(q, rows), gather_rows(k, rows), gather_rows(v, rows)
            )
        )
    return concat_rows(groups)


# -- public per-head operations ---------------------------------------------------


def _project(grid: TokenGrid, proj: QKVProjection) -> tuple[Tensor, Tensor, Tensor]:
    if grid.width != proj.width:
        raise DimensionError(
            f"grid width {grid.width} does not match projection width {proj.width}"
        )
    x = grid.tokens
    return (
        matmul(x, transpose(proj.wq)),
        matmul(x, transpose(proj.wk)),
        matmul(x, transpose(proj.wv)),
    )


def _head_slice(t: Tensor, proj: QKVProjection, head: int) -> Tensor:
    if not 0 <= head < proj.n_heads:
        raise ContractError(f"head {head} outside [0, {proj.n_heads})")
    dh = proj.head_dim
    return slice_cols(t, head * dh, (head + 1) * dh)


def temporal_attention(grid: TokenGrid, proj: QKVProjection, head: int) -> Tensor:
    """One head of the per-position temporal pass (divided scheme only)."""
    if grid.per_frame_cls:
        raise ContractError("temporal attention needs a shared classification token")
    q, k, v = _project(grid, proj)
    return _temporal_head(
        grid, _head_slice(q, proj, head), _head_slice(k, proj, head), _head_slice(v, proj, head)
    )


def spatial_attention(grid: TokenGrid, proj: QKVProjection, head: int) -> Tensor:
    """One head of the per-frame spatial pass (divided or space-only grids)."""
    q, k, v = _project(grid, proj)
    qh, kh, vh = (
        _head_slice(q, proj, head),
        _head_slice(k, proj, head),
        _head_slice(v, proj, head),
    )
    if grid.per_frame_cls:
        return _space_frame_head(grid, qh, kh, vh)
    return _divided_spatial_head(grid, qh, kh, vh)


def joint_attention(grid: TokenGrid, proj: QKVProjection, head: int) -> Tensor:
    """One head of attention over every token of the clip."""
    if grid.per_frame_cls:
        raise ContractError("joint attention needs a shared classification token")
    q, k, v = _project(grid, proj)
    return scaled_attention(
        _head_slice(q, proj, head), _head_slice(k, proj, head), _head_slice(v, proj, head)
    )


# -- multi-head wrapper -------------------------------------------------------------


def _resolve_kind(grid: TokenGrid, scheme: AttentionScheme, step: str | None) -> str:
    if scheme is AttentionScheme.JOINT:
        if step not in (None, "joint"):
            raise ContractError(f"step {step!r} is invalid under the joint scheme")
        if grid.per_frame_cls:
            raise ContractError("joint scheme cannot run on a per-frame-cls grid")
        return "joint"
    if scheme is AttentionScheme.SPACE_ONLY:
        if step not in (None, "spatial"):
            raise ContractError(f"step {step!r} is invalid under the space-only scheme")
        if not grid.per_frame_cls:
            raise ContractError("space-only scheme needs a per-frame-cls grid")
        return "space_frame"
    if scheme is AttentionScheme.DIVIDED:
        if grid.per_frame_cls:
            raise ContractError("divided scheme needs a shared classification token")
        if step == "temporal":
            return "temporal"
        if step == "spatial":
            return "divided_spatial"
        raise ContractError("divided scheme needs step='temporal' or step='spatial'")
    raise ContractError(f"unknown scheme {scheme!r}")


_zero_cls_cache: dict[tuple, Tensor] = {}


def _zero_cls_mask(s: int, d: int) -> Tensor:
    key = (s, d)
    m = _zero_cls_cache.get(key)
    if m is None:
        m = Tensor.full((s, d), 1.0)
        for j in range(d):
            m.data[j] = 0.0
        _zero_cls_cache[key] = m
    return m


def multi_head(
    grid: TokenGrid,
    proj: QKVProjection,
    out_proj: Tensor,
    scheme: AttentionScheme,
    *,
    step: str | None = None,
    path: str = "auto",
) -> Tensor:
    """Run one attention policy per head, concatenate, project back to width D.

    ``path`` selects the implementation: "masked", "gathered", or "auto"
    (masked at small token counts, gathered otherwise; metering forces
    gathered because that path reflects the real cost).
    """
    kind = _resolve_kind(grid, scheme, step)
    if out_proj.shape != (proj.width, proj.width):
        raise DimensionError(
            f"output projection shape {out_proj.shape} must be ({proj.width}, {proj.width})"
        )
    if path == "auto":
        if _meters:
            path = "gathered"
        else:
            path = "masked" if grid.token_count <= MASKED_PATH_MAX_TOKENS else "gathered"
    if path not in ("masked", "gathered"):
        raise ContractError(f"unknown attention path {path!r}")
    if path == "masked" and _meters:
        raise ContractError("multiply-add metering requires the gathered path")

    q, k, v = _project(grid, proj)
    head_outs = []
    for h in range(proj.n_heads):
        qh = _head_slice(q, proj, h)
        kh = _head_slice(k, proj, h)
        vh = _head_slice(v, proj, h)
        if path == "masked":
            out_h = _masked_attention(qh, kh, vh, key_mask(kind, grid.n_patches, grid.n_frames))
        elif kind == "temporal":
            out_h = _temporal_head(grid, qh, kh, vh)
        elif kind == "divided_spatial":
            out_h = _divided_spatial_head(grid, qh, kh, vh)
        elif kind == "space_frame":
            out_h = _space_frame_head(grid, qh, kh, vh)
        else:
            out_h = scaled_attention(qh, kh, vh)
        head_outs.append(out_h)
    merged = matmul(concat_cols(head_outs), transpose(out_proj))
    if kind == "temporal":
        # Keep the shared token untouched by the temporal pass.
        merged = mul(merged, _zero_cls_mask(grid.token_count, proj.width))
    return merged


# -- analytic cost model --------------------------------------------------------------


def attention_flops(cfg: "ModelConfig", scheme: AttentionScheme) -> int:
    """Per-block multiply-add count of score computation plus weighted sums.

    Counts one fused multiply-add per unit, summed over all heads (head
    count cancels: heads * head_dim = D). Projections, softmax, and norms
    are excluded; this models exactly what the gathered path's attention
    kernels execute, which the metering oracle verifies.
    """
    f, n, d = cfg.n_frames, cfg.n_patches, cfg.dim
    if scheme is AttentionScheme.JOINT:
        s = f * n + 1
        return 2 * s * s * d
    if scheme is AttentionScheme.SPACE_ONLY:
        return 2 * f * (n + 1) * (n + 1) * d
    if scheme is AttentionScheme.DIVIDED:
        temporal = f * n * (f + 1)
        spatial = f * n * (n + 1) + (f * n + 1)
        return 2 * d * (temporal + spatial)
    raise ContractError(f"unknown scheme {scheme!r}")
