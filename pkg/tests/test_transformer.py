import numpy as np
import pytest

from docrectify.errors import ContractError, DimensionError
from docrectify.patches import make_mask_plan
from docrectify.tensor import Tensor, mul, precision, softmax_lastdim, tsum
from docrectify.transformer import (attention, block_forward, decoder_forward, default_heads,
                                    encoder_forward, init_block, sincos_pos_2d)

from conftest import check_grads


def test_default_heads():
    assert default_heads(512) == 8 and default_heads(128) == 2 and default_heads(32) == 2


def test_pos_origin_and_norm():
    D = 16
    pos = sincos_pos_2d(4, 5, D)
    row0 = pos.table[0]
    # each half: [sin... (D/4), cos... (D/4)]
    for half in (row0[:D // 2], row0[D // 2:]):
        assert np.all(half[:D // 4] == 0) and np.all(half[D // 4:] == 1)
    assert np.allclose(np.linalg.norm(pos.table, axis=1), np.sqrt(D / 2))


def test_pos_rows_distinct_on_18x18():
    table = sincos_pos_2d(18, 18, 512).table
    assert len({row.tobytes() for row in table}) == 324
    d = np.linalg.norm(table[:, None] - table[None], axis=-1)
    assert d[~np.eye(324, dtype=bool)].min() > 1e-3


def test_pos_width_must_divide_by_4():
    with pytest.raises(ContractError):
        sincos_pos_2d(2, 2, 10)


def test_pos_table_is_frozen_and_cached():
    a, b = sincos_pos_2d(3, 3, 8), sincos_pos_2d(3, 3, 8)
    assert a is b
    with pytest.raises(ValueError):
        a.table[0, 0] = 1.0


def _zero_residuals(blk):
    for t in (blk.proj_w, blk.proj_b, blk.fc2_w, blk.fc2_b):
        t.data[...] = 0


def test_block_identity_with_zero_output_weights(rng):
    blk = init_block(16, rng)
    _zero_residuals(blk)
    x = Tensor(rng.standard_normal((5, 16)))
    assert np.array_equal(block_forward(x, blk).data, x.data)


def test_deep_stack_identity(rng):
    blocks = [init_block(8, rng) for _ in range(4)]
    for b in blocks:
        _zero_residuals(b)
    pos = sincos_pos_2d(2, 3, 8)
    x = Tensor(rng.standard_normal((6, 8)).astype(np.float32))
    out = decoder_forward(x, pos, blocks).data
    assert np.array_equal(out, x.data + pos.table.astype(np.float32))


def test_block_permutation_equivariant(rng):
    with precision(np.float64):
        blk = init_block(16, rng)
        x = rng.standard_normal((5, 16))
        perm = rng.permutation(5)
        a = block_forward(Tensor(x), blk).data
        b = block_forward(Tensor(x[perm]), blk).data
    assert np.allclose(a[perm], b, atol=1e-12)


def test_attention_weights_convex(rng):
    x = rng.standard_normal((2, 7, 8)) * 3
    w = softmax_lastdim(Tensor(x @ x.transpose(0, 2, 1))).data
    assert np.all(w >= 0) and np.allclose(w.sum(-1), 1, atol=1e-6)


def test_block_grad_tiny(f64, rng):
    blk = init_block(8, rng, heads=2)
    for t in blk.named("b").values():
        t.data[...] = rng.standard_normal(t.shape) * 0.5
    x = Tensor(rng.standard_normal((3, 8)), requires_grad=True)
    w = Tensor(rng.standard_normal((3, 8)))
    params = [x] + list(blk.named("b").values())
    assert check_grads(lambda: tsum(mul(block_forward(x, blk), w)), params) < 1e-3


def test_block_batched_matches_unbatched(rng):
    blk = init_block(16, rng)
    x = rng.standard_normal((3, 5, 16)).astype(np.float32)
    batched = block_forward(Tensor(x), blk).data
    for i in range(3):
        assert np.allclose(batched[i], block_forward(Tensor(x[i]), blk).data, atol=1e-6)


def test_block_width_mismatch(rng):
    with pytest.raises(DimensionError):
        block_forward(Tensor(np.zeros((2, 8))), init_block(16, rng))


def test_encoder_empty_stack_adds_gathered_pos(rng):
    pos = sincos_pos_2d(3, 4, 8)
    plan = make_mask_plan(12, 0.5, 1)
    x = Tensor(rng.standard_normal((6, 8)).astype(np.float32))
    out = encoder_forward(x, pos, plan, []).data
    assert np.array_equal(out, x.data + pos.table[plan.keep].astype(np.float32))


def test_encoder_paper_shape():
    rng = np.random.default_rng(0)
    pos = sincos_pos_2d(18, 18, 512)
    plan = make_mask_plan(324, 0.75, 0)
    out = encoder_forward(Tensor(np.zeros((81, 512))), pos, plan, [init_block(512, rng)])
    assert out.shape == (81, 512)


def test_encoder_shuffle_equivariance(rng):
    with precision(np.float64):
        blocks = [init_block(8, rng) for _ in range(2)]
        pos = sincos_pos_2d(3, 4, 8)
        tokens = rng.standard_normal((12, 8))
        perm = rng.permutation(12)
        base = encoder_forward(Tensor(tokens), pos, None, blocks).data
        # attach positions before the stack, shuffle pairs, run blocks, unshuffle
        x = Tensor(tokens[perm] + pos.table[perm])
        for b in blocks:
            x = block_forward(x, b)
        out = np.empty_like(base)
        out[perm] = x.data
    assert np.allclose(out, base, atol=1e-5)


def test_encoder_plan_mismatch(rng):
    pos = sincos_pos_2d(3, 4, 8)
    with pytest.raises(ContractError):
        encoder_forward(Tensor(np.zeros((5, 8))), pos, make_mask_plan(12, 0.5, 0), [])
    with pytest.raises(ContractError):
        encoder_forward(Tensor(np.zeros((6, 8))), pos, make_mask_plan(10, 0.4, 0), [])


def test_decoder_length_mismatch_and_shape(rng):
    pos = sincos_pos_2d(18, 18, 512)
    with pytest.raises(ContractError):
        decoder_forward(Tensor(np.zeros((10, 512))), pos, [])
    assert decoder_forward(Tensor(np.zeros((324, 512))), pos, []).shape == (324, 512)


def test_decoder_replay(rng):
    blocks = [init_block(8, rng)]
    pos = sincos_pos_2d(2, 2, 8)
    x = Tensor(rng.standard_normal((4, 8)).astype(np.float32))
    assert np.array_equal(decoder_forward(x, pos, blocks).data, decoder_forward(x, pos, blocks).data)
