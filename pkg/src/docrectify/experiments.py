"""Small training experiments used by the acceptance suite and the demos.

Everything here runs in memory on synthetic data; nothing touches disk.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .mae import MaeModel, make_pretrain_batch, pretrain_step
from .metrics import ld_epe
from .optim import AdamState, OneCycleSchedule
from .pipeline import derived_seed, flow_region
from .rectifier import RectModel, finetune_step, predict_flow
from .synth import gen_sample, random_specs
from .tensor import no_grad

log = logging.getLogger(__name__)


@dataclass
class SyntheticSet:
    excluded: np.ndarray  # [n, H, W, 3] float32
    flow: np.ndarray  # [n, H, W, 2]
    region: np.ndarray  # [n, H, W] bool, pixels scored by ld_epe

    def __len__(self) -> int:
        return len(self.excluded)

    def subset(self, idx) -> "SyntheticSet":
        return SyntheticSet(self.excluded[idx], self.flow[idx], self.region[idx])


def make_set(corpus_seed: int, count: int, H: int = 96, W: int = 96, start: int = 0) -> SyntheticSet:
    samples = [gen_sample(*random_specs(corpus_seed, start + i, H, W)) for i in range(count)]
    return SyntheticSet(
        np.stack([s.excluded for s in samples]).astype(np.float32),
        np.stack([s.gt_flow for s in samples]),
        np.stack([flow_region(s.mask, s.gt_flow) for s in samples]))


@dataclass
class OverfitResult:
    losses: list[float]
    seconds: float

    @property
    def drop(self) -> float:
        """Fractional loss reduction from the first to the last step."""
        return 1.0 - self.losses[-1] / self.losses[0]


def overfit_mae(cfg: RunConfig, data: SyntheticSet, steps: int = 300) -> OverfitResult:
    """Fit one fixed batch with fixed masks for ``steps`` steps."""
    t0 = time.perf_counter()
    model = MaeModel(cfg.model, seed=cfg.seed)
    batch = make_pretrain_batch(data.excluded, cfg.P, cfg.mask_ratio,
                                [derived_seed(cfg.seed, i) for i in range(len(data))])
    opt, sched = AdamState(), OneCycleSchedule(cfg.max_lr, steps, cfg.warmup_fraction)
    losses = [pretrain_step(model, batch, opt, sched, s) for s in range(steps)]
    return OverfitResult(losses, time.perf_counter() - t0)


def overfit_rectifier(cfg: RunConfig, data: SyntheticSet, steps: int = 300) -> OverfitResult:
    t0 = time.perf_counter()
    model = RectModel(cfg.model, seed=cfg.seed)
    opt, sched = AdamState(), OneCycleSchedule(cfg.max_lr, steps, cfg.warmup_fraction)
    losses = [finetune_step(model, data.excluded, data.flow, opt, sched, s)
              for s in range(steps)]
    return OverfitResult(losses, time.perf_counter() - t0)


def pretrain_encoder(cfg: RunConfig, data: SyntheticSet, steps: int, seed: int,
                     mask_ratio: float | None = None) -> dict[str, np.ndarray]:
    """Random-batch masked pre-training; returns the encoder tensors."""
    ratio = cfg.mask_ratio if mask_ratio is None else mask_ratio
    model = MaeModel(cfg.model, seed=seed)
    opt, sched = AdamState(), OneCycleSchedule(cfg.max_lr, steps, cfg.warmup_fraction)
    rng = np.random.default_rng([seed, 1])
    for step in range(steps):
        idx = rng.integers(0, len(data), cfg.batch)
        seeds = rng.integers(0, 2**31, cfg.batch)
        loss = pretrain_step(model, make_pretrain_batch(data.excluded[idx], cfg.P, ratio, seeds),
                             opt, sched, step)
        if step % 500 == 0:
            log.info("pretrain seed %d step %d loss %.4f", seed, step, loss)
    return {k: v.data.copy() for k, v in model.encoder_parameters().items()}


def evaluate_flow(model: RectModel, data: SyntheticSet, chunk: int = 20) -> float:
    """Mean per-sample ld_epe over each sample's page region."""
    scores = []
    with no_grad():
        for lo in range(0, len(data), chunk):
            pred = predict_flow(model, data.excluded[lo:lo + chunk]).data
            for i, p in enumerate(pred):
                scores.append(ld_epe(p, data.flow[lo + i], data.region[lo + i]))
    return float(np.mean(scores))


def finetune_and_score(cfg: RunConfig, train: SyntheticSet, test: SyntheticSet, steps: int,
                       seed: int, encoder: dict | None = None,
                       freeze_encoder: bool = False) -> float:
    model = RectModel(cfg.model, seed=seed)
    if encoder is not None:
        model.load_encoder(encoder)
    opt, sched = AdamState(), OneCycleSchedule(cfg.max_lr, steps, cfg.warmup_fraction)
    rng = np.random.default_rng([seed, 2])
    for step in range(steps):
        idx = rng.integers(0, len(train), cfg.batch)
        finetune_step(model, train.excluded[idx], train.flow[idx], opt, sched, step,
                      freeze_encoder=freeze_encoder)
    return evaluate_flow(model, test)


@dataclass
class TransferReport:
    scores: dict[str, list[float]] = field(default_factory=dict)  # arm -> per-seed ld_epe
    seconds: float = 0.0

    def median(self, arm: str) -> float:
        return float(np.median(self.scores[arm]))

    @property
    def improvement(self) -> float:
        """Relative ld_epe reduction of the pre-trained arm over scratch."""
        return 1.0 - self.median("pretrained") / self.median("scratch")

    def lines(self) -> list[str]:
        return [f"{arm:>18}: median ld_epe {self.median(arm):.4f}  per seed "
                + ", ".join(f"{v:.4f}" for v in vals) for arm, vals in self.scores.items()]


def transfer_experiment(cfg: RunConfig, train: SyntheticSet, test: SyntheticSet,
                        pretrain_steps: int, finetune_steps: int, seeds=(0, 1, 2),
                        informational: bool = False) -> TransferReport:
    """Pre-trained versus scratch encoder initialisation at an equal fine-tune budget.

    One encoder is pre-trained (seeded by ``cfg.seed``) and shared by all
    fine-tune seeds; each seed changes the decoder and head initialisation
    and the batch order, and is paired with a scratch run on the same seed.
    With ``informational`` the first seed also runs a frozen-encoder arm and
    a 50% mask-ratio pre-training arm.
    """
    t0 = time.perf_counter()
    report = TransferReport({"pretrained": [], "scratch": []})
    encoder = pretrain_encoder(cfg, train, pretrain_steps, cfg.seed)
    for seed in seeds:
        report.scores["pretrained"].append(
            finetune_and_score(cfg, train, test, finetune_steps, seed, encoder))
        report.scores["scratch"].append(
            finetune_and_score(cfg, train, test, finetune_steps, seed, None))
        log.info("transfer seed %d: pretrained %.4f scratch %.4f", seed,
                 report.scores["pretrained"][-1], report.scores["scratch"][-1])
    if informational:
        seed = seeds[0]
        report.scores["frozen encoder"] = [
            finetune_and_score(cfg, train, test, finetune_steps, seed, encoder, True)]
        half = pretrain_encoder(cfg, train, pretrain_steps, cfg.seed, mask_ratio=0.5)
        report.scores["mask ratio 0.5"] = [
            finetune_and_score(cfg, train, test, finetune_steps, seed, half)]
    report.seconds = time.perf_counter() - t0
    return report
