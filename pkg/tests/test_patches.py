import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from docrectify.errors import ContractError, DimensionError, GeometryError
from docrectify.patches import (PatchGeometry, PatchSequence, gather_masked, gather_visible,
                                make_mask_plan, patchify, restore_with_mask_tokens, unpatchify,
                                visible_count)
from docrectify.tensor import Tensor, backward, mul, tsum

from conftest import check_grads, leaf


def test_paper_geometry():
    g = PatchGeometry(288, 288, 16)
    assert g.N == 324 and g.row_length == 768


def test_layout_definition():
    img = np.arange(4 * 4 * 3, dtype=np.float32).reshape(4, 4, 3)
    seq = patchify(Tensor(img), 2)
    assert seq.rows.shape == (4, 12)
    expected = np.concatenate([img[0, 0], img[0, 1], img[1, 0], img[1, 1]])
    assert np.array_equal(seq.rows.data[0], expected)
    assert np.array_equal(seq.rows.data[1], np.concatenate([img[0, 2], img[0, 3],
                                                            img[1, 2], img[1, 3]]))


def test_roundtrip_bit_identical(rng):
    img = rng.random((96, 96, 3)).astype(np.float32)
    out = unpatchify(patchify(Tensor(img), 8)).data
    assert np.array_equal(out, img)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_roundtrip_any_divisor(gh, gw, P, seed):
    img = np.random.default_rng(seed).random((gh * P, gw * P, 3)).astype(np.float32)
    assert np.array_equal(unpatchify(patchify(Tensor(img), P)).data, img)


def test_non_divisible_names_extents():
    with pytest.raises(GeometryError, match="10.*12.*4"):
        patchify(Tensor(np.zeros((10, 12, 3))), 4)


def test_unpatchify_row_count_mismatch():
    with pytest.raises(GeometryError):
        PatchSequence(PatchGeometry(4, 4, 2), Tensor(np.zeros((3, 12))))


def test_mask_plan_counts():
    plan = make_mask_plan(324, 0.75, 0)
    assert plan.n_visible == 81 and plan.n_masked == 243
    full = make_mask_plan(10, 0.0, 3)
    assert np.array_equal(full.keep, np.arange(10)) and full.n_masked == 0


def test_mask_plan_replay():
    a, b = make_mask_plan(144, 0.75, 5), make_mask_plan(144, 0.75, 5)
    assert np.array_equal(a.keep, b.keep) and np.array_equal(a.restore, b.restore)
    assert not np.array_equal(a.keep, make_mask_plan(144, 0.75, 6).keep)


@pytest.mark.parametrize("R", [-0.1, 1.0, 1.5])
def test_mask_ratio_range(R):
    with pytest.raises(ContractError):
        make_mask_plan(10, R, 0)


def test_visible_count_round_half_up():
    assert visible_count(10, 0.25) == 8  # 7.5 rounds up
    assert visible_count(2, 0.75) == 1  # 0.5 rounds up


@settings(max_examples=1000, deadline=None)
@given(st.integers(1, 400), st.floats(0, 0.999), st.integers(0, 2**32 - 1))
def test_partition_property(N, R, seed):
    plan = make_mask_plan(N, R, seed)
    keep, masked = plan.keep, plan.masked
    assert len(set(keep.tolist()) | set(masked.tolist())) == N
    assert len(keep) + len(masked) == N and not set(keep.tolist()) & set(masked.tolist())
    assert len(keep) == int(np.floor(N * (1 - R) + 0.5))
    assert np.all(np.diff(keep) > 0) and np.all(np.diff(masked) > 0)
    assert np.array_equal(np.concatenate([keep, masked])[plan.restore], np.arange(N))


def test_gather_keep_zero_on_two_patches():
    plan = make_mask_plan(2, 0.5, 0)
    rows = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    out = gather_visible(rows, plan).data
    assert np.array_equal(out, rows.data[plan.keep])


def test_gather_identity_at_zero_ratio(rng):
    rows = Tensor(rng.random((6, 4)))
    assert np.array_equal(gather_visible(rows, make_mask_plan(6, 0.0, 1)).data, rows.data)


def test_gather_gradient_is_keep_indicator(f64, rng):
    plan = make_mask_plan(8, 0.5, 2)
    x = leaf(rng.random((8, 3)))
    backward(tsum(gather_visible(x, plan)))
    expected = np.zeros((8, 3))
    expected[plan.keep] = 1
    assert np.array_equal(x.grad, expected)
    w = Tensor(rng.standard_normal((4, 3)))
    assert check_grads(lambda: tsum(mul(gather_visible(x, plan), w)), [x]) < 1e-4


def test_restore_example():
    plan = make_mask_plan(2, 0.5, 0)
    visible = Tensor(np.array([[7.0, 8.0]]))
    out = restore_with_mask_tokens(visible, Tensor(np.zeros(2)), plan).data
    assert np.array_equal(out[plan.keep[0]], [7, 8])
    assert np.array_equal(out[plan.masked[0]], [0, 0])


def test_restore_identity_at_zero_ratio(rng):
    v = Tensor(rng.random((5, 3)))
    assert np.array_equal(restore_with_mask_tokens(v, Tensor(np.ones(3)),
                                                   make_mask_plan(5, 0.0, 0)).data, v.data)


def test_restore_mask_token_grad(f64, rng):
    plan = make_mask_plan(6, 0.5, 4)
    vis, tok = leaf(rng.random((3, 4))), leaf(rng.random(4))
    w = rng.standard_normal((6, 4))
    out = restore_with_mask_tokens(vis, tok, plan)
    assert np.array_equal(out.data[plan.masked], np.broadcast_to(tok.data, (3, 4)))
    backward(tsum(mul(out, Tensor(w))))
    assert np.allclose(tok.grad, w[plan.masked].sum(0))
    assert check_grads(lambda: tsum(mul(restore_with_mask_tokens(vis, tok, plan), Tensor(w))),
                       [vis, tok]) < 1e-4


def test_restore_width_mismatch():
    with pytest.raises(DimensionError):
        restore_with_mask_tokens(Tensor(np.zeros((1, 3))), Tensor(np.zeros(4)),
                                 make_mask_plan(2, 0.5, 0))


def test_gather_then_restore_true_rows(rng):
    plan = make_mask_plan(12, 0.5, 9)
    rows = Tensor(rng.random((12, 5)))
    vis, hid = gather_visible(rows, plan).data, gather_masked(rows, plan).data
    rebuilt = np.concatenate([vis, hid])[plan.restore]
    assert np.array_equal(rebuilt, rows.data)


def test_batched_plans(rng):
    plans = [make_mask_plan(4, 0.5, s) for s in (0, 1)]
    rows = Tensor(rng.random((2, 4, 3)))
    out = gather_visible(rows, plans).data
    for b in range(2):
        assert np.array_equal(out[b], rows.data[b, plans[b].keep])
