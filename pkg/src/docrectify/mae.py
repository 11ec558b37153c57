"""Stage 1: masked reconstruction of background-excluded page images."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import GeometryError, PoisonedStateError
from .optim import AdamState, OneCycleSchedule, adam_step, one_cycle_lr
from .patches import (MaskPlan, PatchGeometry, PatchSequence, gather_masked, gather_visible,
                      make_mask_plan, patchify, restore_with_mask_tokens, unpatchify)
from .tensor import (Tensor, as_tensor, backward, default_dtype, linear, mean, no_grad, parameter,
                     square, trunc_normal, zero_grad)
from .transformer import (BlockParams, PosTable, decoder_forward, default_heads,
                          encoder_forward, init_block, sincos_pos_2d)


class EmptyMaskWarning(UserWarning):
    """The reconstruction loss was asked to average over zero masked patches."""


@dataclass(frozen=True)
class ModelConfig:
    H: int = 96
    W: int = 96
    P: int = 8
    D: int = 128
    K1: int = 4
    K2: int = 2
    heads: int = 0  # 0 selects default_heads(D)

    @property
    def geometry(self) -> PatchGeometry:
        return PatchGeometry(self.H, self.W, self.P)

    @property
    def n_heads(self) -> int:
        return self.heads or default_heads(self.D)


def init_encoder(cfg: ModelConfig, rng: np.random.Generator, dtype) -> dict:
    L = cfg.geometry.row_length
    return {
        "patch_embed_w": parameter(trunc_normal((L, cfg.D), rng, dtype=dtype)),
        "patch_embed_b": parameter(np.zeros(cfg.D, dtype=dtype)),
        "blocks": [init_block(cfg.D, rng, cfg.n_heads, dtype) for _ in range(cfg.K1)],
    }


def encoder_params(enc: dict) -> dict[str, Tensor]:
    out = {"patch_embed.w": enc["patch_embed_w"], "patch_embed.b": enc["patch_embed_b"]}
    for i, blk in enumerate(enc["blocks"]):
        out.update(blk.named(f"encoder.{i}"))
    return out


class MaeModel:
    """Patch embedding, encoder stack, mask token, decoder stack and pixel head."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=None):
        dtype = dtype or default_dtype()
        cfg.geometry  # validates
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        enc = init_encoder(cfg, rng, dtype)
        self.patch_embed_w: Tensor = enc["patch_embed_w"]
        self.patch_embed_b: Tensor = enc["patch_embed_b"]
        self.encoder: list[BlockParams] = enc["blocks"]
        self.mask_token = parameter(np.zeros(cfg.D, dtype=dtype))
        self.decoder = [init_block(cfg.D, rng, cfg.n_heads, dtype) for _ in range(cfg.K2)]
        L = cfg.geometry.row_length
        self.out_w = parameter(trunc_normal((cfg.D, L), rng, dtype=dtype))
        self.out_b = parameter(np.zeros(L, dtype=dtype))

    @property
    def pos(self) -> PosTable:
        gh, gw = self.cfg.geometry.grid
        return sincos_pos_2d(gh, gw, self.cfg.D)

    def encoder_parameters(self) -> dict[str, Tensor]:
        return encoder_params({"patch_embed_w": self.patch_embed_w,
                               "patch_embed_b": self.patch_embed_b,
                               "blocks": self.encoder})

    def parameters(self) -> dict[str, Tensor]:
        out = self.encoder_parameters()
        out["mask_token"] = self.mask_token
        for i, blk in enumerate(self.decoder):
            out.update(blk.named(f"decoder.{i}"))
        out["out_proj.w"] = self.out_w
        out["out_proj.b"] = self.out_b
        return out


def _check_geometry(cfg: ModelConfig, image: Tensor):
    if image.shape[-3:] != (cfg.H, cfg.W, 3):
        raise GeometryError(f"image {image.shape} does not match model geometry "
                            f"{(cfg.H, cfg.W, 3)}")


def encode_visible(model: MaeModel, image, plan) -> Tensor:
    """Embedded, position-tagged and encoded visible patches (E_e)."""
    image = as_tensor(image)
    _check_geometry(model.cfg, image)
    seq = patchify(image, model.cfg.P)
    visible = gather_visible(seq, plan)
    tokens = linear(visible, model.patch_embed_w, model.patch_embed_b)
    return encoder_forward(tokens, model.pos, plan, model.encoder)


def mae_forward(model: MaeModel, image, plan) -> Tensor:
    """Reconstruct the full image from its visible patches."""
    encoded = encode_visible(model, image, plan)
    tokens = restore_with_mask_tokens(encoded, model.mask_token, plan)
    decoded = decoder_forward(tokens, model.pos, model.decoder)
    rows = linear(decoded, model.out_w, model.out_b)
    return unpatchify(PatchSequence(model.cfg.geometry, rows))


def pretrain_loss(reconstructed, target, plan) -> Tensor:
    """Mean squared error over the pixels of masked patches only."""
    reconstructed, target = as_tensor(reconstructed), as_tensor(target)
    if reconstructed.shape != target.shape:
        raise GeometryError(f"reconstruction {reconstructed.shape} vs target {target.shape}")
    plans = [plan] if isinstance(plan, MaskPlan) else list(plan)
    if all(p.n_masked == 0 for p in plans):
        warnings.warn("no masked patches; reconstruction loss defined as 0", EmptyMaskWarning,
                      stacklevel=2)
        return Tensor(0.0, dtype=reconstructed.dtype)
    H, W = reconstructed.shape[-3], reconstructed.shape[-2]
    P = int(round(math.sqrt(H * W / plans[0].N)))
    if PatchGeometry(H, W, P).N != plans[0].N:
        raise GeometryError(f"mask plan over {plans[0].N} patches does not tile {H}x{W}")
    pred = gather_masked(patchify(reconstructed, P), plan)
    tgt = gather_masked(patchify(target.detach(), P), plan)
    return mean(square(pred - tgt))


@dataclass
class PretrainBatch:
    images: np.ndarray  # [B, H, W, 3], background excluded, values in [0, 1]
    plans: list[MaskPlan]


def make_pretrain_batch(images: np.ndarray, P: int, ratio: float, seeds) -> PretrainBatch:
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    geom = PatchGeometry(images.shape[1], images.shape[2], P)
    plans = [make_mask_plan(geom.N, ratio, int(s)) for s in seeds]
    if len(plans) != len(images):
        raise GeometryError(f"{len(plans)} mask seeds for {len(images)} images")
    return PretrainBatch(images, plans)


def pretrain_step(model: MaeModel, batch: PretrainBatch, opt: AdamState,
                  sched: OneCycleSchedule, step: int, lr: float | None = None) -> float:
    """One optimisation step; returns the loss before the update.

    ``lr`` overrides the schedule; an override of 0 skips the update.
    """
    params = model.parameters()
    zero_grad(params.values())
    recon = mae_forward(model, batch.images.astype(model.out_w.dtype, copy=False), batch.plans)
    loss = pretrain_loss(recon, batch.images.astype(model.out_w.dtype, copy=False), batch.plans)
    value = float(loss.data)
    if not np.isfinite(value):
        raise PoisonedStateError(f"non-finite reconstruction loss at step {step}")
    backward(loss)
    lr = one_cycle_lr(sched, step) if lr is None else lr
    if lr > 0:
        adam_step(params, {k: p.grad for k, p in params.items()}, opt, lr)
    return value


def reconstruct_demo(model: MaeModel, image, plan: MaskPlan, fill: float = 0.5):
    """Masked input, composite reconstruction and target for one image.

    The composite copies visible patches from the input and takes masked
    patches from the model's prediction.
    """
    target = image.data if isinstance(image, Tensor) else np.asarray(image)
    with no_grad():
        pred = mae_forward(model, target.astype(model.out_w.dtype), plan).data
    P = model.cfg.P
    gh, gw = model.cfg.geometry.grid
    hidden = np.zeros((gh, gw), dtype=bool)
    hidden.flat[plan.masked] = True
    hidden = np.repeat(np.repeat(hidden, P, axis=0), P, axis=1)[..., None]
    masked_input = np.where(hidden, np.asarray(fill, dtype=target.dtype), target)
    composite = np.where(hidden, pred.astype(target.dtype), target)
    return masked_input, composite, target
