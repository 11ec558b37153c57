"""End-to-end commands: corpus generation, both training stages, rectification,
evaluation and reconstruction demos.

Every command is deterministic given its configuration: sample specs come
from ``(seed, index)`` streams, batch order from ``(seed, stage, epoch)`` and
mask plans from ``(seed, epoch, index)``.
"""

from __future__ import annotations

import csv
import io as _io
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .config import RunConfig, config_from_echo, write_config_echo
from .errors import CompatibilityError, ContractError, ValidationError
from .mae import MaeModel, make_pretrain_batch, pretrain_step, reconstruct_demo
from .metrics import (MetricsReport, ScaleReductionWarning, cer, edit_distance, ld_epe,
                      ms_ssim_scales)
from .optim import AdamState, OneCycleSchedule, one_cycle_lr
from .patches import make_mask_plan
from .rectifier import RectModel, bilinear_warp, finetune_step, rectify
from .synth import (ROUNDTRIP_TOL, gen_sample, interior, random_specs, read_line_pattern,
                    roundtrip_error, threshold_segment)

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
SUFFIXES = {"distorted": "_distorted.ppm", "clean": "_clean.ppm", "mask": "_mask.ppm",
            "flow": "_flow.flo"}
STAGE_CODES = {"pretrain": 1, "finetune": 2}
REPORT_FIELDS = ("sample", "ms_ssim_gray", "ld_epe", "ed", "cer")


def sample_id(index: int) -> str:
    return f"s{index:05d}"


def derived_seed(*keys: int) -> int:
    """A 32-bit seed from an integer key tuple."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# corpus


def read_mask(path) -> np.ndarray:
    return (io.read_ppm(path)[..., 0] >= 0.5).astype(np.float32)


def verify_sample(root: Path, entry: dict) -> float:
    """Round-trip error of a written sample, recomputed from its files."""
    files = {k: root / v for k, v in entry["files"].items()}
    clean = io.read_ppm(files["clean"])
    distorted = io.read_ppm(files["distorted"])
    mask = read_mask(files["mask"])
    flow = io.read_flo(files["flow"])
    return roundtrip_error(clean, distorted, mask, flow)


def cmd_gen_data(cfg: RunConfig, out_dir, count: int | None = None,
                 spot_check: float = 0.1) -> dict:
    """Write ``count`` samples plus ``manifest.json`` into ``out_dir``.

    A ``spot_check`` fraction of the written samples is re-read and put
    through the round-trip certificate again.
    """
    cfg.validate()
    count = cfg.count if count is None else count
    if count < 0:
        raise ValidationError(f"count must be non-negative, got {count}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for index in range(count):
        page, warp, bg_seed = random_specs(cfg.seed, index, cfg.H, cfg.W)
        sample = gen_sample(page, warp, bg_seed)
        sid = sample_id(index)
        files = {k: sid + suffix for k, suffix in SUFFIXES.items()}
        io.write_ppm(out / files["distorted"], sample.distorted)
        io.write_ppm(out / files["clean"], sample.clean)
        io.write_ppm(out / files["mask"], sample.mask)
        io.write_flo(out / files["flow"], sample.gt_flow)
        entries.append({"id": sid, "index": index, "files": files,
                        "annotation": read_line_pattern(io.read_ppm(out / files["clean"])),
                        **sample.meta()})
    manifest = {"format": 1, "seed": cfg.seed, "H": cfg.H, "W": cfg.W, "count": count,
                "samples": entries}
    _write_json(out / MANIFEST, manifest)
    write_config_echo(cfg, out / "config.txt")
    if count and spot_check > 0:
        k = max(1, math.ceil(spot_check * count))
        picks = np.random.default_rng([cfg.seed, 0x5C]).choice(count, size=min(k, count),
                                                                replace=False)
        for i in sorted(int(p) for p in picks):
            err = verify_sample(out, entries[i])
            if not err < ROUNDTRIP_TOL:
                raise ValidationError(f"{entries[i]['id']}: written sample fails the "
                                      f"round-trip certificate ({err:.4f})")
        log.info("spot-checked %d of %d samples", len(picks), count)
    return manifest


@dataclass
class Corpus:
    root: Path
    manifest: dict
    ids: list[str]
    distorted: np.ndarray  # [n, H, W, 3]
    mask: np.ndarray  # [n, H, W]
    flow: np.ndarray  # [n, H, W, 2]
    clean: np.ndarray | None = None

    @property
    def excluded(self) -> np.ndarray:
        return self.distorted * self.mask[..., None]

    def __len__(self) -> int:
        return len(self.ids)


def read_manifest(root) -> dict:
    root = Path(root)
    manifest = json.loads((root / MANIFEST).read_text(encoding="utf-8"))
    if manifest.get("count") != len(manifest.get("samples", [])):
        raise ValidationError(f"{root / MANIFEST}: count {manifest.get('count')} but "
                              f"{len(manifest.get('samples', []))} entries")
    return manifest


def load_corpus(root, cfg: RunConfig | None = None, with_clean: bool = False) -> Corpus:
    root = Path(root)
    manifest = read_manifest(root)
    if cfg is not None and (manifest["H"], manifest["W"]) != (cfg.H, cfg.W):
        raise ValidationError(f"corpus {root} holds {manifest['H']}x{manifest['W']} images, "
                              f"config expects {cfg.H}x{cfg.W}")
    ids, dist, masks, flows, cleans = [], [], [], [], []
    for entry in manifest["samples"]:
        files = {k: root / v for k, v in entry["files"].items()}
        for kind in ("distorted", "mask", "flow") + (("clean",) if with_clean else ()):
            if not files[kind].is_file():
                raise ValidationError(f"manifest lists {files[kind]} but the file is missing")
        img = io.read_ppm(files["distorted"])
        if img.shape[:2] != (manifest["H"], manifest["W"]):
            raise ValidationError(f"{files['distorted']}: extent {img.shape[:2]} disagrees "
                                  "with the manifest")
        ids.append(entry["id"])
        dist.append(img)
        masks.append(read_mask(files["mask"]))
        flows.append(io.read_flo(files["flow"]))
        if with_clean:
            cleans.append(io.read_ppm(files["clean"]))
    H, W = manifest["H"], manifest["W"]

    def stack(items, tail):
        return np.stack(items) if items else np.zeros((0, H, W, *tail), dtype=np.float32)

    return Corpus(root, manifest, ids, stack(dist, (3,)), stack(masks, ()), stack(flows, (2,)),
                  stack(cleans, (3,)) if with_clean else None)


# ---------------------------------------------------------------------------
# checkpoints


def adam_tensors(opt: AdamState) -> dict[str, np.ndarray]:
    out = {}
    for name in opt.m:
        out[f"adam.m.{name}"] = opt.m[name]
        out[f"adam.v.{name}"] = opt.v[name]
    return out


def save_training_checkpoint(path, stage: str, cfg: RunConfig, params: dict, opt: AdamState,
                             step: int, total_steps: int) -> None:
    tensors = {name: p.data for name, p in params.items()}
    tensors.update(adam_tensors(opt))
    meta = {"stage": stage, "config": cfg.echo(), "step": step, "total_steps": total_steps,
            "adam": {"step": opt.step, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps}}
    io.save_checkpoint(path, tensors, meta)


def assign_parameters(params: dict, tensors: dict, names=None) -> None:
    for name in (names if names is not None else params):
        if name not in tensors:
            raise CompatibilityError(f"checkpoint has no tensor {name}")
        arr = tensors[name]
        if arr.shape != params[name].shape:
            raise CompatibilityError(f"tensor {name}: checkpoint shape {arr.shape}, "
                                     f"model expects {params[name].shape}")
        params[name].data[...] = arr


def restore_adam(meta: dict, tensors: dict) -> AdamState:
    a = meta["adam"]
    opt = AdamState(beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"], step=a["step"])
    for key, arr in tensors.items():
        if key.startswith("adam.m."):
            name = key[len("adam.m."):]
            opt.m[name] = arr.copy()
            opt.v[name] = tensors[f"adam.v.{name}"].copy()
    return opt


def trace_path(checkpoint) -> Path:
    return Path(str(checkpoint) + ".trace.csv")


def _read_trace(path: Path, before: int) -> list[list[str]]:
    if not path.is_file():
        raise ValidationError(f"cannot resume: loss trace {path} is missing")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    rows = [r for r in rows if int(r[0]) < before]
    if len(rows) != before:
        raise ValidationError(f"loss trace {path} holds {len(rows)} rows, checkpoint is at "
                              f"step {before}")
    return rows


def _write_rows(path: Path, header, rows) -> None:
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    path.write_text(buf.getvalue(), encoding="utf-8")


def _fmt(x) -> str:
    return "" if x is None else repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


# ---------------------------------------------------------------------------
# training


def _check_model_config(meta: dict, cfg: RunConfig) -> None:
    old = config_from_echo(meta["config"]).model
    if old != cfg.model:
        raise CompatibilityError(f"checkpoint model {old} does not match config {cfg.model}")


def _train(stage: str, cfg: RunConfig, n: int, model, step_fn, out_checkpoint,
           resume=None, max_steps: int | None = None) -> float:
    if n < 1:
        raise ValidationError("training corpus is empty")
    spe = math.ceil(n / cfg.batch)
    total = cfg.epochs * spe
    sched = OneCycleSchedule(cfg.max_lr, total, cfg.warmup_fraction)
    params = model.parameters()
    opt = AdamState()
    start = 0
    rows: list[list[str]] = []
    if resume is not None:
        meta, tensors = io.load_checkpoint(resume)
        if meta.get("stage") != stage:
            raise CompatibilityError(f"{resume} is a {meta.get('stage')} checkpoint, "
                                     f"cannot resume {stage}")
        _check_model_config(meta, cfg)
        if meta["total_steps"] != total:
            raise CompatibilityError(f"{resume} was written for {meta['total_steps']} steps, "
                                     f"this run has {total}")
        assign_parameters(params, tensors)
        opt = restore_adam(meta, tensors)
        start = meta["step"]
        rows = _read_trace(trace_path(resume), start)
    stop = total if max_steps is None else min(total, max_steps)
    code = STAGE_CODES[stage]
    loss = float("nan")
    perm, perm_epoch = None, -1
    for step in range(start, stop):
        epoch, k = divmod(step, spe)
        if epoch != perm_epoch:
            perm = np.random.default_rng([cfg.seed, code, epoch]).permutation(n)
            perm_epoch = epoch
        idx = perm[k * cfg.batch:(k + 1) * cfg.batch]
        lr = one_cycle_lr(sched, step)
        loss = step_fn(idx, epoch, opt, sched, step)
        rows.append([str(step), str(epoch), repr(lr), repr(loss)])
    if rows:
        loss = float(rows[-1][3])
    out_checkpoint = Path(out_checkpoint)
    out_checkpoint.parent.mkdir(parents=True, exist_ok=True)
    save_training_checkpoint(out_checkpoint, stage, cfg, params, opt, stop, total)
    _write_rows(trace_path(out_checkpoint), ("step", "epoch", "lr", "loss"), rows)
    write_config_echo(cfg, Path(str(out_checkpoint) + ".config.txt"))
    return loss


def cmd_pretrain(cfg: RunConfig, corpus, out_checkpoint, resume=None,
                 max_steps: int | None = None) -> float:
    """Masked-reconstruction training on the background-excluded corpus images.

    Returns the loss of the last step run.  ``max_steps`` stops early (the
    checkpoint can then be passed as ``resume``).
    """
    cfg.validate()
    data = load_corpus(corpus, cfg)
    images = data.excluded.astype(np.float32)
    model = MaeModel(cfg.model, seed=cfg.seed)
    N = cfg.model.geometry.N

    def step_fn(idx, epoch, opt, sched, step):
        seeds = [derived_seed(cfg.seed, epoch, int(i)) for i in idx]
        batch = make_pretrain_batch(images[idx], cfg.P, cfg.mask_ratio, seeds)
        return pretrain_step(model, batch, opt, sched, step)

    if make_mask_plan(N, cfg.mask_ratio, 0).n_masked == 0:
        log.warning("mask ratio %s hides no patch of %d; the loss is identically 0",
                    cfg.mask_ratio, N)
    return _train("pretrain", cfg, len(data), model, step_fn, out_checkpoint, resume, max_steps)


def load_rect_model(checkpoint) -> tuple[RectModel, RunConfig]:
    meta, tensors = io.load_checkpoint(checkpoint)
    if meta.get("stage") != "finetune":
        raise CompatibilityError(f"{checkpoint} is a {meta.get('stage')} checkpoint, "
                                 "rectification needs a fine-tuned one")
    cfg = config_from_echo(meta["config"])
    model = RectModel(cfg.model, seed=cfg.seed)
    assign_parameters(model.parameters(), tensors)
    return model, cfg


def cmd_finetune(cfg: RunConfig, corpus, in_checkpoint, out_checkpoint, resume=None,
                 max_steps: int | None = None) -> float:
    """Flow-regression training of the rectifier.

    The encoder is copied from ``in_checkpoint`` (a pre-training or
    fine-tuning checkpoint) unless ``cfg.from_scratch`` is set.
    """
    cfg.validate()
    data = load_corpus(corpus, cfg)
    images = data.excluded.astype(np.float32)
    flows = data.flow
    model = RectModel(cfg.model, seed=cfg.seed)
    if cfg.from_scratch:
        if in_checkpoint is not None:
            log.info("from_scratch set; ignoring %s", in_checkpoint)
    elif resume is None:
        if in_checkpoint is None:
            raise ValidationError("fine-tuning needs an input checkpoint unless from_scratch")
        meta, tensors = io.load_checkpoint(in_checkpoint)
        model.load_encoder(tensors)

    def step_fn(idx, epoch, opt, sched, step):
        return finetune_step(model, images[idx], flows[idx], opt, sched, step,
                             freeze_encoder=cfg.freeze_encoder)

    return _train("finetune", cfg, len(data), model, step_fn, out_checkpoint, resume, max_steps)


# ---------------------------------------------------------------------------
# inference and evaluation


@dataclass
class RectifyResult:
    written: list[str] = field(default_factory=list)
    errors: dict[str, str] = field(default_factory=dict)


def _rectify_inputs(source: Path) -> list[tuple[str, Path, Path | None]]:
    """``(id, image, mask or None)`` triples for a corpus, a directory or a file."""
    if source.is_dir() and (source / MANIFEST).is_file():
        manifest = read_manifest(source)
        return [(e["id"], source / e["files"]["distorted"],
                 source / e["files"]["mask"] if "mask" in e["files"] else None)
                for e in manifest["samples"]]
    paths = sorted(source.glob("*.ppm")) if source.is_dir() else [source]
    out = []
    for path in paths:
        stem = path.stem
        if stem.endswith(("_mask", "_clean", "_rectified")):
            continue
        sid = stem[:-len("_distorted")] if stem.endswith("_distorted") else stem
        mask = path.with_name(sid + SUFFIXES["mask"])
        out.append((sid, path, mask if mask.is_file() else None))
    return out


def cmd_rectify(checkpoint, source, out_dir) -> RectifyResult:
    """Rectify every input image; a bad input is recorded and skipped."""
    model, cfg = load_rect_model(checkpoint)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = RectifyResult()
    for sid, image_path, mask_path in _rectify_inputs(Path(source)):
        try:
            image = io.read_ppm(image_path)
            mask = read_mask(mask_path) if mask_path is not None else threshold_segment(image)
            rectified, flow = rectify(model, image, mask)
        except (OSError, ContractError) as exc:
            log.error("%s: %s", image_path, exc)
            result.errors[sid] = f"{type(exc).__name__}: {exc}"
            continue
        io.write_ppm(out / f"{sid}_rectified.ppm", rectified)
        io.write_flo(out / f"{sid}_flow.flo", flow)
        result.written.append(sid)
    write_config_echo(cfg, out / "config.txt")
    return result


def flow_region(mask: np.ndarray, gt_flow: np.ndarray, erode: int = 2) -> np.ndarray:
    """Pixels of the rectified frame that the ground-truth flow maps onto the page."""
    covered = bilinear_warp(mask[..., None].astype(np.float32), gt_flow).data[..., 0]
    return interior(covered >= 0.999, erode)


@dataclass
class EvalResult:
    rows: list[MetricsReport]
    aggregate: MetricsReport
    missing: list[str]
    scales: int | None


def _mean(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def cmd_eval(pred_dir, gt_corpus, out_report=None, image_suffix: str = "_rectified.ppm",
             flow_suffix: str = "_flow.flo", max_missing: float = 0.1) -> EvalResult:
    """Per-sample MS-SSIM (grayscale, original size), end-point error over
    the page region and, where the manifest carries annotations, ED and CER.

    Writes ``report.csv`` (per-sample rows then a ``mean`` row) and
    ``missing.txt``.  Raises :class:`ValidationError` after writing if more
    than ``max_missing`` of the samples lack predictions.
    """
    pred_dir, gt_root = Path(pred_dir), Path(gt_corpus)
    manifest = read_manifest(gt_root)
    rows, missing, scales = [], [], None
    for entry in manifest["samples"]:
        sid = entry["id"]
        pred_img_path = pred_dir / (sid + image_suffix)
        pred_flow_path = pred_dir / (sid + flow_suffix)
        if not (pred_img_path.is_file() and pred_flow_path.is_file()):
            missing.append(sid)
            continue
        files = {k: gt_root / v for k, v in entry["files"].items()}
        pred_img = io.read_ppm(pred_img_path)
        clean = io.read_ppm(files["clean"])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ScaleReductionWarning)
            score, scales = ms_ssim_scales(pred_img, clean)
        gt_flow = io.read_flo(files["flow"])
        region = flow_region(read_mask(files["mask"]), gt_flow)
        epe = ld_epe(io.read_flo(pred_flow_path), gt_flow, region if region.any() else None)
        ed = rate = None
        annotation = entry.get("annotation")
        if annotation:
            counts = edit_distance(read_line_pattern(pred_img), annotation)
            ed, rate = counts.distance, cer(counts, len(annotation))
        rows.append(MetricsReport(sid, score, epe, ed, rate))
    agg = MetricsReport("mean", _mean(r.ms_ssim for r in rows), _mean(r.ld_epe for r in rows),
                        _mean(r.ed for r in rows), _mean(r.cer for r in rows))
    out = Path(out_report) if out_report else pred_dir / "report.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_rows(out, REPORT_FIELDS,
                [[r.sample, _fmt(r.ms_ssim), _fmt(r.ld_epe), _fmt(r.ed), _fmt(r.cer)]
                 for r in rows + [agg]])
    out.with_name(out.stem + ".missing.txt").write_text(
        "".join(s + "\n" for s in missing), encoding="utf-8")
    if scales is not None:
        log.info("MS-SSIM over %d scales on grayscale images at original size", scales)
    n = len(manifest["samples"])
    if missing:
        log.warning("%d of %d samples have no prediction: %s", len(missing), n,
                    ", ".join(missing[:10]))
    if n and len(missing) > max_missing * n:
        raise ValidationError(f"{len(missing)} of {n} predictions missing (limit "
                              f"{max_missing:.0%})")
    return EvalResult(rows, agg, missing, scales)


def read_report(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def cmd_demo_reconstruct(checkpoint, source, out_dir, mask_ratio: float | None = None,
                         count: int = 4) -> list[str]:
    """Masked input, reconstruction and target images for the first samples."""
    meta, tensors = io.load_checkpoint(checkpoint)
    if meta.get("stage") != "pretrain":
        raise CompatibilityError(f"{checkpoint} is a {meta.get('stage')} checkpoint, "
                                 "the reconstruction demo needs a pre-training one")
    cfg = config_from_echo(meta["config"])
    ratio = cfg.mask_ratio if mask_ratio is None else mask_ratio
    model = MaeModel(cfg.model, seed=cfg.seed)
    assign_parameters(model.parameters(), tensors)
    data = load_corpus(source, cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for i in range(min(count, len(data))):
        plan = make_mask_plan(cfg.model.geometry.N, ratio, derived_seed(cfg.seed, i))
        masked, composite, target = reconstruct_demo(model, data.excluded[i], plan)
        sid = data.ids[i]
        io.write_ppm(out / f"{sid}_masked.ppm", masked)
        io.write_ppm(out / f"{sid}_reconstruction.ppm", composite)
        io.write_ppm(out / f"{sid}_target.ppm", target)
        written.append(sid)
    return written
