"""
Masked reconstruction
=====================

Trains a small masked autoencoder on synthetic pages for a few hundred
steps and writes masked-input / reconstruction / target triples.
"""

from pathlib import Path

import numpy as np

from docrectify import io
from docrectify.config import resolve_config
from docrectify.experiments import make_set
from docrectify.mae import MaeModel, make_pretrain_batch, pretrain_step, reconstruct_demo
from docrectify.optim import AdamState, OneCycleSchedule
from docrectify.patches import make_mask_plan

out = Path(__file__).with_suffix("")
out.mkdir(exist_ok=True)

cfg = resolve_config("desk", D=64, K1=2, K2=1)
train = make_set(corpus_seed=1, count=200)
held_out = make_set(corpus_seed=1, count=3, start=200)

# random batches, fresh masks every step
model = MaeModel(cfg.model, seed=0)
steps = 400
opt, sched = AdamState(), OneCycleSchedule(1e-3, steps)
rng = np.random.default_rng(0)
for step in range(steps):
    idx = rng.integers(0, len(train), cfg.batch)
    batch = make_pretrain_batch(train.excluded[idx], cfg.P, cfg.mask_ratio,
                                rng.integers(0, 2**31, cfg.batch))
    loss = pretrain_step(model, batch, opt, sched, step)
    if step % 100 == 0 or step == steps - 1:
        print(f"step {step:4d}  masked-pixel MSE {loss:.4f}")

# 75% of the 144 patches hidden; the model only ever sees the other 36
for i, image in enumerate(held_out.excluded):
    plan = make_mask_plan(cfg.model.geometry.N, cfg.mask_ratio, seed=100 + i)
    masked, composite, target = reconstruct_demo(model, image, plan)
    io.write_ppm(out / f"{i}_masked.ppm", masked)
    io.write_ppm(out / f"{i}_reconstruction.ppm", composite)
    io.write_ppm(out / f"{i}_target.ppm", target)

print(f"triples written to {out}")
