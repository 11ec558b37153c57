"""Sine-cosine positional tables and pre-norm transformer blocks."""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError
from .patches import MaskPlan
from .tensor import (Tensor, add, default_dtype, gelu, index, layer_norm, linear, matmul,
                     mul, parameter, reshape, softmax_lastdim, transpose, trunc_normal)


def default_heads(D: int) -> int:
    """One head per 64 channels, never fewer than two."""
    return max(2, D // 64)


@dataclass
class BlockParams:
    heads: int
    ln1_g: Tensor
    ln1_b: Tensor
    qkv_w: Tensor
    qkv_b: Tensor
    proj_w: Tensor
    proj_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    fc1_w: Tensor
    fc1_b: Tensor
    fc2_w: Tensor
    fc2_b: Tensor

    @property
    def width(self) -> int:
        return self.ln1_g.shape[0]

    def named(self, prefix: str) -> dict[str, Tensor]:
        names = ("ln1_g", "ln1_b", "qkv_w", "qkv_b", "proj_w", "proj_b",
                 "ln2_g", "ln2_b", "fc1_w", "fc1_b", "fc2_w", "fc2_b")
        return {f"{prefix}.{n}": getattr(self, n) for n in names}


def init_block(D: int, rng: np.random.Generator, heads: int | None = None,
               dtype=None) -> BlockParams:
    heads = heads or default_heads(D)
    if D % heads:
        raise ContractError(f"width {D} not divisible by {heads} heads")
    dtype = dtype or default_dtype()
    hidden = 4 * D

    def w(*shape):
        return parameter(trunc_normal(shape, rng, dtype=dtype))

    def z(*shape):
        return parameter(np.zeros(shape, dtype=dtype))

    return BlockParams(
        heads=heads,
        ln1_g=parameter(np.ones(D, dtype=dtype)), ln1_b=z(D),
        qkv_w=w(D, 3 * D), qkv_b=z(3 * D),
        proj_w=w(D, D), proj_b=z(D),
        ln2_g=parameter(np.ones(D, dtype=dtype)), ln2_b=z(D),
        fc1_w=w(D, hidden), fc1_b=z(hidden),
        fc2_w=w(hidden, D), fc2_b=z(D),
    )


def attention(x: Tensor, p: BlockParams) -> Tensor:
    """Multi-head self-attention over the token axis of ``x`` ([..., T, D])."""
    *lead, T, D = x.shape
    h = p.heads
    dh = D // h
    qkv = linear(x, p.qkv_w, p.qkv_b)
    qkv = reshape(qkv, (*lead, T, 3, h, dh))
    n = len(lead)
    # -> [3, *lead, h, T, dh]
    qkv = transpose(qkv, (n + 1,) + tuple(range(n)) + (n + 2, n, n + 3))
    q, k, v = index(qkv, 0), index(qkv, 1), index(qkv, 2)
    kt = transpose(k, tuple(range(n + 1)) + (n + 2, n + 1))
    scores = mul(matmul(q, kt), 1.0 / np.sqrt(dh))
    weights = softmax_lastdim(scores)
    ctx = matmul(weights, v)
    ctx = transpose(ctx, tuple(range(n)) + (n + 1, n, n + 2))
    ctx = reshape(ctx, (*lead, T, D))
    return linear(ctx, p.proj_w, p.proj_b)


def mlp(x: Tensor, p: BlockParams) -> Tensor:
    return linear(gelu(linear(x, p.fc1_w, p.fc1_b)), p.fc2_w, p.fc2_b)


def block_forward(x: Tensor, p: BlockParams) -> Tensor:
    """Pre-norm residual block: ``x + MHSA(LN(x))`` then ``+ MLP(LN(.))``."""
    if x.ndim < 2 or x.shape[-2] < 1:
        raise DimensionError(f"block input needs at least one token, got {x.shape}")
    if x.shape[-1] != p.width:
        raise DimensionError(f"token width {x.shape[-1]} does not match block width {p.width}")
    x = add(x, attention(layer_norm(x, p.ln1_g, p.ln1_b), p))
    return add(x, mlp(layer_norm(x, p.ln2_g, p.ln2_b), p))


def _sincos_1d(pos: np.ndarray, dim: int) -> np.ndarray:
    omega = 1.0 / 10000 ** (np.arange(dim // 2, dtype=np.float64) / (dim / 2.0))
    angles = np.outer(pos.astype(np.float64), omega)
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


@dataclass(frozen=True)
class PosTable:
    table: np.ndarray  # [N, D], float64, never trained
    grid_h: int
    grid_w: int

    @property
    def N(self) -> int:
        return self.table.shape[0]


@functools.lru_cache(maxsize=32)
def sincos_pos_2d(grid_h: int, grid_w: int, D: int) -> PosTable:
    """Row code on the first half of the channels, column code on the second."""
    if D % 4:
        raise ContractError(f"positional width {D} must be divisible by 4")
    rows, cols = np.meshgrid(np.arange(grid_h), np.arange(grid_w), indexing="ij")
    table = np.concatenate([_sincos_1d(rows.ravel(), D // 2),
                            _sincos_1d(cols.ravel(), D // 2)], axis=1)
    table.setflags(write=False)
    return PosTable(table, grid_h, grid_w)


def _pos_rows(pos: PosTable, idx: np.ndarray | None, dtype) -> np.ndarray:
    table = pos.table.astype(dtype)
    return table if idx is None else table[idx]


def encoder_forward(tokens: Tensor, pos: PosTable, plan, blocks) -> Tensor:
    """Add positional rows for the tokens present, then run the block stack.

    ``plan`` is a :class:`MaskPlan` (or one per batch item) whose ``keep``
    indices pick the table rows, or ``None`` when all ``N`` tokens are given.
    """
    n_tok = tokens.shape[-2]
    if plan is None:
        if n_tok != pos.N:
            raise ContractError(f"{n_tok} tokens but positional table has {pos.N} rows")
        rows = _pos_rows(pos, None, tokens.dtype)
    else:
        plans = [plan] if isinstance(plan, MaskPlan) else list(plan)
        for p in plans:
            if p.N != pos.N:
                raise ContractError(f"mask plan covers {p.N} patches, table has {pos.N}")
            if p.n_visible != n_tok:
                raise ContractError(f"plan keeps {p.n_visible} rows, got {n_tok} tokens")
        idx = np.stack([p.keep for p in plans])
        rows = _pos_rows(pos, idx, tokens.dtype)
        if isinstance(plan, MaskPlan) and tokens.ndim == 2:
            rows = rows[0]
    x = add(tokens, rows)
    for blk in blocks:
        x = block_forward(x, blk)
    return x


def decoder_forward(tokens: Tensor, pos: PosTable, blocks) -> Tensor:
    if tokens.shape[-2] != pos.N:
        raise ContractError(f"{tokens.shape[-2]} tokens but positional table has {pos.N} rows")
    x = add(tokens, _pos_rows(pos, None, tokens.dtype))
    for blk in blocks:
        x = block_forward(x, blk)
    return x
