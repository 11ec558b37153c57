"""Masked-patch pre-training and flow-field rectification of distorted
document images, built on a small numpy autodiff engine."""

from .errors import (CompatibilityError, ContractError, DimensionError, GeometryError,
                     InversionError, NumericError, PoisonedStateError, SegmentationError,
                     SpecError, ValidationError)
from .tensor import Tensor, backward, no_grad, precision
from .optim import AdamState, OneCycleSchedule, adam_step, one_cycle_lr
from .patches import MaskPlan, PatchGeometry, make_mask_plan, patchify, unpatchify
from .mae import MaeModel, ModelConfig, mae_forward, pretrain_loss, pretrain_step
from .rectifier import RectModel, bilinear_warp, finetune_loss, finetune_step, rectify
from .synth import PageSpec, WarpSpec, gen_sample, gen_warp, random_specs
from .metrics import cer, edit_distance, ld_epe, ms_ssim
from .config import PRESETS, RunConfig, resolve_config

__version__ = "0.1.0"
