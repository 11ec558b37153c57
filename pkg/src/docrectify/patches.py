"""Patch sequences and the random masking protocol.

Images are ``[H, W, 3]`` (or batched ``[B, H, W, 3]``).  A patch row holds
the ``P x P`` pixels of one patch in raster order with the three channels
interleaved per pixel; rows themselves follow raster patch order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractError, DimensionError, GeometryError
from .tensor import Tensor, as_tensor, custom_op, gather_rows, reshape, transpose


@dataclass(frozen=True)
class PatchGeometry:
    H: int
    W: int
    P: int

    def __post_init__(self):
        if self.P < 1 or self.H < 1 or self.W < 1:
            raise GeometryError(f"extents must be positive: H={self.H}, W={self.W}, P={self.P}")
        if self.H % self.P or self.W % self.P:
            raise GeometryError(
                f"image {self.H}x{self.W} is not divisible by patch size P={self.P}")

    @property
    def grid(self) -> tuple[int, int]:
        return self.H // self.P, self.W // self.P

    @property
    def N(self) -> int:
        return (self.H // self.P) * (self.W // self.P)

    @property
    def row_length(self) -> int:
        return self.P * self.P * 3


@dataclass
class PatchSequence:
    geometry: PatchGeometry
    rows: Tensor  # [N, P*P*3] or [B, N, P*P*3]

    def __post_init__(self):
        shape = self.rows.shape
        if shape[-2] != self.geometry.N or shape[-1] != self.geometry.row_length:
            raise GeometryError(
                f"patch rows {shape} do not match geometry N={self.geometry.N}, "
                f"row length {self.geometry.row_length}")


def patchify(image, P: int) -> PatchSequence:
    image = as_tensor(image)
    if image.ndim not in (3, 4) or image.shape[-1] != 3:
        raise DimensionError(f"expected [H,W,3] or [B,H,W,3], got {image.shape}")
    H, W = image.shape[-3], image.shape[-2]
    geom = PatchGeometry(H, W, P)
    gh, gw = geom.grid
    batched = image.ndim == 4
    B = image.shape[0] if batched else 1
    x = reshape(image, (B, gh, P, gw, P, 3))
    x = transpose(x, (0, 1, 3, 2, 4, 5))
    x = reshape(x, (B, geom.N, geom.row_length) if batched else (geom.N, geom.row_length))
    return PatchSequence(geom, x)


def unpatchify(seq: PatchSequence) -> Tensor:
    geom = seq.geometry
    rows = seq.rows
    if rows.shape[-2] != geom.N:
        raise GeometryError(f"{rows.shape[-2]} rows, geometry expects {geom.N}")
    gh, gw = geom.grid
    P = geom.P
    batched = rows.ndim == 3
    B = rows.shape[0] if batched else 1
    x = reshape(rows, (B, gh, gw, P, P, 3))
    x = transpose(x, (0, 1, 3, 2, 4, 5))
    return reshape(x, (B, geom.H, geom.W, 3) if batched else (geom.H, geom.W, 3))


@dataclass(frozen=True)
class MaskPlan:
    """Seeded split of ``N`` patch indices into visible and masked sets."""

    N: int
    ratio: float
    keep: np.ndarray
    masked: np.ndarray
    restore: np.ndarray
    seed: int

    @property
    def n_visible(self) -> int:
        return len(self.keep)

    @property
    def n_masked(self) -> int:
        return len(self.masked)


def visible_count(N: int, R: float) -> int:
    # round half up
    return int(np.floor(N * (1.0 - R) + 0.5))


def make_mask_plan(N: int, R: float, seed: int) -> MaskPlan:
    if N < 1:
        raise ContractError(f"patch count must be positive, got {N}")
    if not 0.0 <= R < 1.0:
        raise ContractError(f"mask ratio must lie in [0, 1), got {R}")
    n_vis = visible_count(N, R)
    shuffle = np.random.default_rng(seed).permutation(N)
    keep = np.sort(shuffle[:n_vis])
    masked = np.sort(shuffle[n_vis:])
    order = np.concatenate([keep, masked])
    # restore[i] is the position of patch i inside keep ++ masked
    restore = np.argsort(order, kind="stable")
    return MaskPlan(N, float(R), keep, masked, restore, int(seed))


def _plans_list(plan, batch: int | None) -> list[MaskPlan]:
    plans = [plan] if isinstance(plan, MaskPlan) else list(plan)
    if batch is not None and len(plans) != batch:
        raise ContractError(f"{len(plans)} mask plans for a batch of {batch}")
    if len({p.n_visible for p in plans}) > 1:
        raise ContractError("mask plans in one batch must share the visible count")
    return plans


def gather_visible(seq: PatchSequence | Tensor, plan: MaskPlan | Sequence[MaskPlan]) -> Tensor:
    """Rows at ``plan.keep``; accepts a single sequence or a batch with one plan each."""
    rows = seq.rows if isinstance(seq, PatchSequence) else as_tensor(seq)
    return _select_rows(rows, plan, "keep")


def gather_masked(seq: PatchSequence | Tensor, plan: MaskPlan | Sequence[MaskPlan]) -> Tensor:
    rows = seq.rows if isinstance(seq, PatchSequence) else as_tensor(seq)
    return _select_rows(rows, plan, "masked")


def _select_rows(rows: Tensor, plan, which: str) -> Tensor:
    single = rows.ndim == 2
    if single:
        rows = reshape(rows, (1,) + rows.shape)
    plans = _plans_list(plan, rows.shape[0])
    for p in plans:
        if p.N != rows.shape[1]:
            raise ContractError(f"mask plan covers {p.N} patches, sequence has {rows.shape[1]}")
    idx = np.stack([getattr(p, which) for p in plans]).astype(np.intp)
    if idx.shape[1] == 0:
        empty = np.zeros((rows.shape[0], 0, rows.shape[2]), dtype=rows.dtype)
        out = custom_op(empty, (rows,), lambda g: (np.zeros_like(rows.data),), "gather_rows")
        return reshape(out, empty.shape[1:]) if single else out
    out = gather_rows(rows, idx)
    return reshape(out, out.shape[1:]) if single else out


def restore_with_mask_tokens(visible, mask_token, plan: MaskPlan | Sequence[MaskPlan]) -> Tensor:
    """Scatter encoded visible rows back to raster order, filling masked slots.

    ``visible`` is [N_v, D] or [B, N_v, D]; ``mask_token`` is [D].
    """
    visible, mask_token = as_tensor(visible), as_tensor(mask_token)
    single = visible.ndim == 2
    vis = visible.data[None] if single else visible.data
    B, n_vis, D = vis.shape
    if mask_token.shape != (D,):
        raise DimensionError(f"mask token shape {mask_token.shape} does not match width {D}")
    plans = _plans_list(plan, B)
    N = plans[0].N
    for p in plans:
        if p.n_visible != n_vis:
            raise ContractError(f"plan keeps {p.n_visible} rows, got {n_vis} visible rows")
    bidx = np.arange(B)[:, None]
    keep = np.stack([p.keep for p in plans]).astype(np.intp)
    masked = np.stack([p.masked for p in plans]).astype(np.intp)
    out = np.empty((B, N, D), dtype=vis.dtype)
    out[bidx, keep] = vis
    out[bidx, masked] = mask_token.data

    def _back(g):
        g = g[None] if single else g
        gv = g[bidx, keep]
        gm = g[bidx, masked].sum(axis=(0, 1))
        return (gv[0] if single else gv), gm

    return custom_op(out[0] if single else out, (visible, mask_token), _back, "restore")
