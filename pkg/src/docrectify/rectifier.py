"""Stage 2: flow-field rectifier on top of the pre-trained encoder.

Flows are stored as per-pixel displacements ``(du, dv)`` in pixels, with
channel 0 along rows and channel 1 along columns.  The absolute source
coordinate of output pixel ``(u, v)`` is ``(u + du, v + dv)``.
"""

from __future__ import annotations

import numpy as np

from .errors import CompatibilityError, DimensionError, GeometryError, PoisonedStateError
from .mae import MaeModel, ModelConfig, encoder_params, init_encoder
from .optim import AdamState, OneCycleSchedule, adam_step, one_cycle_lr
from .patches import patchify
from .tensor import (Tensor, absolute, as_tensor, backward, custom_op, default_dtype, linear,
                     mean, mul, no_grad, parameter, reshape, softmax_lastdim, take, transpose,
                     trunc_normal, tsum, zero_grad)
from .transformer import PosTable, decoder_forward, encoder_forward, init_block, sincos_pos_2d


def background_exclude(image, mask) -> np.ndarray:
    """Zero the background by multiplying every channel with the mask."""
    image = np.asarray(image)
    mask = np.asarray(mask)
    if mask.ndim == image.ndim - 1:
        mask = mask[..., None]
    if mask.shape[:-1] != image.shape[:-1] or mask.shape[-1] != 1:
        raise GeometryError(f"mask {mask.shape} does not match image {image.shape}")
    return image * mask.astype(image.dtype, copy=False)


class RectModel:
    """Encoder (checkpoint-compatible with :class:`MaeModel`), rectification
    decoder, coarse flow head and convex-upsampling head."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=None):
        dtype = dtype or default_dtype()
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        enc = init_encoder(cfg, rng, dtype)
        self.patch_embed_w = enc["patch_embed_w"]
        self.patch_embed_b = enc["patch_embed_b"]
        self.encoder = enc["blocks"]
        self.decoder = [init_block(cfg.D, rng, cfg.n_heads, dtype) for _ in range(cfg.K2)]
        self.flow_w = parameter(trunc_normal((cfg.D, 2), rng, dtype=dtype))
        self.flow_b = parameter(np.zeros(2, dtype=dtype))
        n_up = cfg.P * cfg.P * 9
        self.up_w = parameter(trunc_normal((cfg.D, n_up), rng, dtype=dtype))
        self.up_b = parameter(np.zeros(n_up, dtype=dtype))

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
        for i, blk in enumerate(self.decoder):
            out.update(blk.named(f"rect_decoder.{i}"))
        out["flow_proj.w"] = self.flow_w
        out["flow_proj.b"] = self.flow_b
        out["upsample_proj.w"] = self.up_w
        out["upsample_proj.b"] = self.up_b
        return out

    def load_encoder(self, source) -> None:
        """Copy encoder tensors from a :class:`MaeModel` or a name->array mapping."""
        if isinstance(source, (MaeModel, RectModel)):
            source = {k: v.data for k, v in source.encoder_parameters().items()}
        for name, p in self.encoder_parameters().items():
            if name not in source:
                raise CompatibilityError(f"checkpoint has no tensor {name}")
            arr = np.asarray(source[name])
            if arr.shape != p.shape:
                raise CompatibilityError(
                    f"tensor {name}: checkpoint shape {arr.shape}, model expects {p.shape}")
            p.data[...] = arr


def _check_geometry(cfg: ModelConfig, image: Tensor):
    if image.shape[-3:] != (cfg.H, cfg.W, 3):
        raise GeometryError(f"image {image.shape} does not match model geometry "
                            f"{(cfg.H, cfg.W, 3)}")


def rect_features(model: RectModel, image) -> Tensor:
    """All N patch tokens through encoder and rectification decoder (E_f)."""
    image = as_tensor(image)
    _check_geometry(model.cfg, image)
    seq = patchify(image, model.cfg.P)
    tokens = linear(seq.rows, model.patch_embed_w, model.patch_embed_b)
    encoded = encoder_forward(tokens, model.pos, None, model.encoder)
    return decoder_forward(encoded, model.pos, model.decoder)


def flow_head(model: RectModel, features: Tensor) -> Tensor:
    """Project each token to a 2-vector and lay tokens out on the patch grid."""
    gh, gw = model.cfg.geometry.grid
    coarse = linear(features, model.flow_w, model.flow_b)
    lead = features.shape[:-2]
    return reshape(coarse, (*lead, gh, gw, 2))


def rect_forward(model: RectModel, image) -> Tensor:
    """Coarse displacement in patch-cell units, shape ``[(B,) H/P, W/P, 2]``."""
    return flow_head(model, rect_features(model, image))


def _neighbor_index(gh: int, gw: int) -> np.ndarray:
    """Flat cell index of the 3x3 neighbourhood of every cell, edges clamped."""
    r, c = np.meshgrid(np.arange(gh), np.arange(gw), indexing="ij")
    out = np.empty((gh, gw, 9), dtype=np.intp)
    k = 0
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            rr = np.clip(r + dr, 0, gh - 1)
            cc = np.clip(c + dc, 0, gw - 1)
            out[..., k] = rr * gw + cc
            k += 1
    return out.reshape(-1)


def convex_upsample_logits(coarse, logits, P: int) -> Tensor:
    """Full-resolution flow as softmax-weighted 3x3 combinations of coarse cells.

    ``coarse`` is ``[(B,) h, w, 2]`` in cell units; ``logits`` is
    ``[(B,) h*w, P*P*9]`` laid out as ``(i, j, k)`` with the neighbour axis
    ``k`` innermost.  Output is in pixels, ``[(B,) h*P, w*P, 2]``.
    """
    coarse, logits = as_tensor(coarse), as_tensor(logits)
    single = coarse.ndim == 3
    if single:
        coarse = reshape(coarse, (1,) + coarse.shape)
        logits = reshape(logits, (1,) + logits.shape)
    B, gh, gw, two = coarse.shape
    if two != 2 or logits.shape != (B, gh * gw, P * P * 9):
        raise DimensionError(f"coarse {coarse.shape} and logits {logits.shape} are "
                             f"inconsistent with P={P}")
    weights = softmax_lastdim(reshape(logits, (B, gh, gw, P, P, 9)))
    weights = reshape(weights, (B, gh, gw, P, P, 9, 1))
    # centre plus weighted offsets: same value since the weights sum to one, but
    # a constant field comes out exact even when the float weights do not
    nb = take(reshape(coarse, (B, gh * gw, 2)), _neighbor_index(gh, gw), axis=1)
    nb = reshape(nb, (B, gh, gw, 1, 1, 9, 2))
    centre = reshape(coarse, (B, gh, gw, 1, 1, 2))
    offsets = nb - reshape(centre, (B, gh, gw, 1, 1, 1, 2))
    up = mul(centre + tsum(weights * offsets, axis=5), float(P))  # [B, gh, gw, P, P, 2]
    up = transpose(up, (0, 1, 3, 2, 4, 5))
    up = reshape(up, (B, gh * P, gw * P, 2))
    return reshape(up, up.shape[1:]) if single else up


def convex_upsample(coarse, features, model: RectModel) -> Tensor:
    features = as_tensor(features)
    gh, gw = coarse.shape[-3], coarse.shape[-2]
    if features.shape[-2] != gh * gw:
        raise DimensionError(f"{features.shape[-2]} feature rows for {gh}x{gw} coarse cells")
    logits = linear(features, model.up_w, model.up_b)
    return convex_upsample_logits(coarse, logits, model.cfg.P)


def predict_flow(model: RectModel, image) -> Tensor:
    feats = rect_features(model, image)
    return convex_upsample(flow_head(model, feats), feats, model)


def bilinear_warp(image, flow) -> Tensor:
    """Backward-warp ``image`` by ``flow``: ``out(u, v) = image(u + du, v + dv)``.

    Source coordinates are clamped to the image; gradients flow to both the
    image and the displacement (zero along a clamped coordinate).
    """
    img, disp = as_tensor(image), as_tensor(flow)
    single = img.ndim == 3
    I = img.data[None] if single else img.data
    F = disp.data[None] if single else disp.data
    if I.ndim != 4 or F.shape != I.shape[:3] + (2,):
        raise DimensionError(f"image {img.shape} and flow {disp.shape} are incompatible")
    B, H, W, C = I.shape
    dt = I.dtype.type
    u = np.arange(H, dtype=I.dtype)[None, :, None]
    v = np.arange(W, dtype=I.dtype)[None, None, :]
    y = u + F[..., 0].astype(I.dtype, copy=False)
    x = v + F[..., 1].astype(I.dtype, copy=False)
    yc = np.clip(y, 0, H - 1)
    xc = np.clip(x, 0, W - 1)
    y0 = np.minimum(np.floor(yc).astype(np.intp), max(H - 2, 0))
    x0 = np.minimum(np.floor(xc).astype(np.intp), max(W - 2, 0))
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    wy = (yc - y0)[..., None]
    wx = (xc - x0)[..., None]
    b = np.arange(B)[:, None, None]
    I00, I01 = I[b, y0, x0], I[b, y0, x1]
    I10, I11 = I[b, y1, x0], I[b, y1, x1]
    one = dt(1)
    out = ((one - wy) * (one - wx) * I00 + (one - wy) * wx * I01
           + wy * (one - wx) * I10 + wy * wx * I11)

    def _back(g):
        g = g[None] if single else g
        gimg = gdisp = None
        if img.requires_grad:
            base = (b * H) * W
            chan = np.arange(C)
            total = np.zeros(B * H * W * C, dtype=np.float64)
            for yy, xx, wgt in ((y0, x0, (one - wy) * (one - wx)), (y0, x1, (one - wy) * wx),
                                (y1, x0, wy * (one - wx)), (y1, x1, wy * wx)):
                flat = ((base + yy * W + xx)[..., None] * C + chan).ravel()
                total += np.bincount(flat, (wgt * g).ravel(), minlength=total.size)
            gimg = total.reshape(B, H, W, C).astype(I.dtype)
            if single:
                gimg = gimg[0]
        if disp.requires_grad:
            dy = (one - wx) * (I10 - I00) + wx * (I11 - I01)
            dx = (one - wy) * (I01 - I00) + wy * (I11 - I10)
            in_y = (y >= 0) & (y <= H - 1)
            in_x = (x >= 0) & (x <= W - 1)
            gdisp = np.stack([(g * dy).sum(-1) * in_y, (g * dx).sum(-1) * in_x], axis=-1)
            gdisp = gdisp.astype(disp.dtype, copy=False)
            if single:
                gdisp = gdisp[0]
        return gimg, gdisp

    return custom_op(out[0] if single else out, (img, disp), _back, "bilinear_warp")


def finetune_loss(predicted, gt) -> Tensor:
    """Mean absolute error over every flow coordinate."""
    predicted, gt = as_tensor(predicted), as_tensor(gt)
    if predicted.shape != gt.shape:
        raise GeometryError(f"predicted flow {predicted.shape} vs ground truth {gt.shape}")
    return mean(absolute(predicted - gt.detach()))


def finetune_step(model: RectModel, images: np.ndarray, gt_flows: np.ndarray, opt: AdamState,
                  sched: OneCycleSchedule, step: int, freeze_encoder: bool = False,
                  lr: float | None = None) -> float:
    """One optimisation step on a batch of background-excluded images.

    With ``freeze_encoder`` only the rectification decoder and heads move.
    Returns the loss before the update.
    """
    params = model.parameters()
    frozen = model.encoder_parameters() if freeze_encoder else {}
    params = {k: v for k, v in params.items() if k not in frozen}
    zero_grad(model.parameters().values())
    dtype = model.flow_w.dtype
    for p in frozen.values():
        p.requires_grad = False
    try:
        pred = predict_flow(model, np.asarray(images, dtype=dtype))
        loss = finetune_loss(pred, np.asarray(gt_flows, dtype=dtype))
        value = float(loss.data)
        if not np.isfinite(value):
            raise PoisonedStateError(f"non-finite rectification loss at step {step}")
        backward(loss)
    finally:
        for p in frozen.values():
            p.requires_grad = True
    lr = one_cycle_lr(sched, step) if lr is None else lr
    if lr > 0:
        adam_step(params, {k: p.grad for k, p in params.items()}, opt, lr)
    return value


def rectify(model: RectModel, image, mask) -> tuple[np.ndarray, np.ndarray]:
    """Background exclusion, flow prediction and warping for one image or a batch."""
    dtype = model.flow_w.dtype
    excluded = background_exclude(np.asarray(image, dtype=dtype), mask)
    with no_grad():
        flow = predict_flow(model, excluded).data
        out = bilinear_warp(excluded, flow).data
    return out, flow
