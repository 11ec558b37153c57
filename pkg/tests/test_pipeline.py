import csv
import json
from dataclasses import replace

import numpy as np
import pytest

from docrectify import io, pipeline
from docrectify.config import resolve_config
from docrectify.errors import CompatibilityError, ValidationError
from docrectify.pipeline import (cmd_demo_reconstruct, cmd_eval, cmd_finetune, cmd_gen_data,
                                 cmd_pretrain, cmd_rectify, load_corpus, read_report,
                                 save_training_checkpoint, trace_path)
from docrectify.optim import AdamState
from docrectify.rectifier import RectModel, background_exclude

TINY = resolve_config("desk", D=32, K1=1, K2=1, epochs=2, batch=4, seed=3)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    cmd_gen_data(TINY, root, count=6)
    return root


@pytest.fixture(scope="module")
def pretrained(corpus, tmp_path_factory):
    path = tmp_path_factory.mktemp("pt") / "mae.ckpt"
    cmd_pretrain(TINY, corpus, path)
    return path


@pytest.fixture(scope="module")
def finetuned(corpus, pretrained, tmp_path_factory):
    path = tmp_path_factory.mktemp("ft") / "rect.ckpt"
    cmd_finetune(TINY, corpus, pretrained, path)
    return path


def files_of(root):
    return {p.name: p.read_bytes() for p in sorted(root.iterdir()) if p.is_file()}


def test_gen_data_layout(corpus):
    manifest = json.loads((corpus / "manifest.json").read_text())
    assert manifest["count"] == 6 and len(manifest["samples"]) == 6
    entry = manifest["samples"][0]
    assert entry["id"] == "s00000"
    for name in entry["files"].values():
        assert (corpus / name).is_file()
    assert entry["annotation"].count("\n") + 1 == entry["page"]["line_count"]
    assert (corpus / "config.txt").is_file()


def test_gen_data_replay_is_byte_identical(corpus, tmp_path):
    cmd_gen_data(TINY, tmp_path, count=6)
    assert files_of(tmp_path) == files_of(corpus)


def test_gen_data_empty(tmp_path):
    manifest = cmd_gen_data(TINY, tmp_path, count=0)
    assert manifest["samples"] == []
    assert not list(tmp_path.glob("*.ppm"))
    assert len(load_corpus(tmp_path)) == 0


def test_written_samples_pass_certificate(corpus):
    manifest = pipeline.read_manifest(corpus)
    for entry in manifest["samples"]:
        assert pipeline.verify_sample(corpus, entry) < 0.05


def test_corpus_errors(corpus, tmp_path):
    with pytest.raises(ValidationError, match="config expects"):
        load_corpus(corpus, replace(TINY, H=64, W=64))
    cmd_gen_data(TINY, tmp_path, count=2)
    (tmp_path / "s00001_flow.flo").unlink()
    with pytest.raises(ValidationError, match="missing"):
        load_corpus(tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    manifest["count"] = 5
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(ValidationError, match="count 5"):
        load_corpus(tmp_path)


def test_pretrain_trace_bookkeeping(pretrained):
    rows = list(csv.reader(open(trace_path(pretrained))))
    assert rows[0] == ["step", "epoch", "lr", "loss"]
    assert len(rows) - 1 == TINY.epochs * 2  # 6 samples, batch 4
    meta, tensors = io.load_checkpoint(pretrained)
    assert meta["stage"] == "pretrain" and meta["step"] == meta["total_steps"] == 4
    assert "mask_token" in tensors and "adam.m.mask_token" in tensors


def test_resume_matches_uninterrupted_run(corpus, pretrained, tmp_path):
    part = tmp_path / "part.ckpt"
    cmd_pretrain(TINY, corpus, part, max_steps=1)
    assert io.load_checkpoint(part)[0]["step"] == 1
    full = tmp_path / "full.ckpt"
    cmd_pretrain(TINY, corpus, full, resume=part)
    assert full.read_bytes() == pretrained.read_bytes()
    assert trace_path(full).read_bytes() == trace_path(pretrained).read_bytes()


def test_resume_rejects_wrong_stage(corpus, finetuned, tmp_path):
    with pytest.raises(CompatibilityError, match="finetune checkpoint"):
        cmd_pretrain(TINY, corpus, tmp_path / "x.ckpt", resume=finetuned)


def test_finetune_modes(corpus, pretrained, tmp_path):
    with pytest.raises(ValidationError, match="from_scratch"):
        cmd_finetune(TINY, corpus, None, tmp_path / "a.ckpt")
    cmd_finetune(replace(TINY, from_scratch=True), corpus, None, tmp_path / "b.ckpt")
    frozen = tmp_path / "c.ckpt"
    cmd_finetune(replace(TINY, freeze_encoder=True), corpus, pretrained, frozen)
    _, before = io.load_checkpoint(pretrained)
    _, after = io.load_checkpoint(frozen)
    enc = [k for k in after if k.startswith(("patch_embed.", "encoder.")) and "adam" not in k]
    assert enc and all(before[k].tobytes() == after[k].tobytes() for k in enc)


def test_finetune_shape_mismatch_names_tensor(corpus, pretrained, tmp_path):
    cfg = replace(TINY, D=64)
    with pytest.raises(CompatibilityError, match="patch_embed.w"):
        cmd_finetune(cfg, corpus, pretrained, tmp_path / "x.ckpt")


def test_rectify_zero_head_returns_excluded_input(corpus, tmp_path):
    model = RectModel(TINY.model, 0)
    model.flow_w.data[...] = 0
    ckpt = tmp_path / "zero.ckpt"
    save_training_checkpoint(ckpt, "finetune", TINY, model.parameters(), AdamState(), 0, 0)
    res = cmd_rectify(ckpt, corpus, tmp_path / "out")
    assert len(res.written) == 6 and not res.errors
    data = load_corpus(corpus)
    for i, sid in enumerate(data.ids):
        got = io.read_ppm(tmp_path / "out" / f"{sid}_rectified.ppm", as_float=False)
        expected = io.to_uint8(background_exclude(data.distorted[i], data.mask[i]))
        assert np.array_equal(got, expected)
        assert not io.read_flo(tmp_path / "out" / f"{sid}_flow.flo").any()


def test_rectify_outputs_and_replay(corpus, finetuned, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    res = cmd_rectify(finetuned, corpus, a)
    cmd_rectify(finetuned, corpus, b)
    assert len(list(a.glob("*_rectified.ppm"))) == 6 and len(list(a.glob("*.flo"))) == 6
    assert res.written == [f"s{i:05d}" for i in range(6)]
    assert files_of(a) == files_of(b)


def test_rectify_loose_files_and_bad_input(corpus, finetuned, tmp_path):
    src = tmp_path / "in"
    src.mkdir()
    (src / "good.ppm").write_bytes((corpus / "s00000_distorted.ppm").read_bytes())
    (src / "broken.ppm").write_bytes(b"P6\nnot an image")
    res = cmd_rectify(finetuned, src, tmp_path / "out")
    assert res.written == ["good"]
    assert "broken" in res.errors
    single = cmd_rectify(finetuned, src / "good.ppm", tmp_path / "one")
    assert single.written == ["good"]


def make_gt_predictions(corpus, dest, skip=()):
    dest.mkdir()
    for entry in pipeline.read_manifest(corpus)["samples"]:
        if entry["id"] in skip:
            continue
        files = entry["files"]
        (dest / f"{entry['id']}_rectified.ppm").write_bytes((corpus / files["clean"]).read_bytes())
        (dest / f"{entry['id']}_flow.flo").write_bytes((corpus / files["flow"]).read_bytes())


def test_eval_ground_truth_against_itself(corpus, tmp_path):
    make_gt_predictions(corpus, tmp_path / "gt")
    res = cmd_eval(tmp_path / "gt", corpus, tmp_path / "report.csv")
    assert len(res.rows) == 6 and not res.missing and res.scales == 4
    for r in res.rows:
        assert abs(r.ms_ssim - 1.0) < 1e-9 and r.ld_epe == 0 and r.cer == 0 and r.ed == 0
    rows = read_report(tmp_path / "report.csv")
    assert list(rows[0]) == ["sample", "ms_ssim_gray", "ld_epe", "ed", "cer"]
    assert rows[-1]["sample"] == "mean"


def test_eval_aggregate_and_replay(corpus, finetuned, tmp_path):
    cmd_rectify(finetuned, corpus, tmp_path / "pred")
    res = cmd_eval(tmp_path / "pred", corpus, tmp_path / "r1.csv")
    cmd_eval(tmp_path / "pred", corpus, tmp_path / "r2.csv")
    assert (tmp_path / "r1.csv").read_bytes() == (tmp_path / "r2.csv").read_bytes()
    rows = read_report(tmp_path / "r1.csv")
    for key in ("ms_ssim_gray", "ld_epe", "cer"):
        per = [float(r[key]) for r in rows[:-1]]
        assert abs(float(rows[-1][key]) - sum(per) / len(per)) < 1e-9
    assert abs(res.aggregate.ld_epe - np.mean([r.ld_epe for r in res.rows])) < 1e-9


def test_eval_missing_predictions(corpus, tmp_path):
    make_gt_predictions(corpus, tmp_path / "p", skip={"s00002"})
    with pytest.raises(ValidationError, match="1 of 6"):
        cmd_eval(tmp_path / "p", corpus, tmp_path / "r.csv")
    assert (tmp_path / "r.missing.txt").read_text() == "s00002\n"
    res = cmd_eval(tmp_path / "p", corpus, tmp_path / "r.csv", max_missing=0.2)
    assert len(res.rows) == 5 and res.missing == ["s00002"]


def test_demo_reconstruct(corpus, pretrained, finetuned, tmp_path):
    ids = cmd_demo_reconstruct(pretrained, corpus, tmp_path, count=2)
    assert ids == ["s00000", "s00001"]
    for suffix in ("_masked", "_reconstruction", "_target"):
        assert (tmp_path / f"s00000{suffix}.ppm").is_file()
    with pytest.raises(CompatibilityError):
        cmd_demo_reconstruct(finetuned, corpus, tmp_path)


@pytest.mark.slow
def test_desk_pretrain_halves_loss(tmp_path):
    cfg = resolve_config("desk", seed=0)
    cmd_gen_data(cfg, tmp_path / "c", count=200, spot_check=0)
    final = cmd_pretrain(cfg, tmp_path / "c", tmp_path / "mae.ckpt")
    rows = list(csv.reader(open(trace_path(tmp_path / "mae.ckpt"))))[1:]
    assert len(rows) == 20 * 25
    assert final < 0.5 * float(rows[0][3])
