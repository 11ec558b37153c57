"""
Flow rectifier
==============

Fine-tunes the rectifier twice at the same budget, once from a
pre-trained encoder and once from scratch, then scores both on held-out
pages with the end-point error over the page region.

The acceptance suite runs the full-size version of this comparison; the
budget here is cut down to finish in a few minutes, so the gap between the
two arms is noisier.
"""

from pathlib import Path

from docrectify import io
from docrectify.config import resolve_config
from docrectify.experiments import (evaluate_flow, finetune_and_score, make_set,
                                    pretrain_encoder)
from docrectify.rectifier import RectModel, rectify

out = Path(__file__).with_suffix("")
out.mkdir(exist_ok=True)

cfg = resolve_config("desk", D=64, K1=2, K2=1, max_lr=3e-4)
train = make_set(corpus_seed=7, count=300)
test = make_set(corpus_seed=7, count=50, start=300)

encoder = pretrain_encoder(cfg, train, steps=400, seed=0)
with_pretraining = finetune_and_score(cfg, train, test, steps=300, seed=0, encoder=encoder)
from_scratch = finetune_and_score(cfg, train, test, steps=300, seed=0)
print(f"held-out ld_epe  pre-trained encoder {with_pretraining:.3f} px   "
      f"scratch {from_scratch:.3f} px")

# an untrained rectifier already predicts a near-identity flow
untrained = RectModel(cfg.model, seed=0)
print(f"untrained rectifier ld_epe {evaluate_flow(untrained, test):.3f} px")

# write one rectified page; the distorted input is already background-excluded
rectified, flow = rectify(untrained, test.excluded[0], test.excluded[0].max(-1) > 0)
io.write_ppm(out / "input.ppm", test.excluded[0])
io.write_ppm(out / "rectified_untrained.ppm", rectified)
io.write_flo(out / "flow_untrained.flo", flow)
print(f"images written to {out}")
