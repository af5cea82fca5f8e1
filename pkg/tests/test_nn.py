"""Layer forward passes against naive oracles, backward passes against
central finite differences."""

import numpy as np
import pytest

from waffleiron.nn import (
    BatchNorm,
    DepthwiseConv3x3,
    LayerScale,
    ParamStore,
    PointwiseLinear,
    grad_check,
    neighborhood_max,
    neighborhood_max_backward,
    relu,
    relu_backward,
    slot_max,
)

SEEDS = (0, 1, 2, 3, 4)


def check_layer(build, seeds=SEEDS, eps=1e-3, threshold=1e-4):
    """Run grad_check over several seeds, asserting the worst error."""
    worst = 0.0
    for seed in seeds:
        store = ParamStore()
        loss_fn = build(store, np.random.default_rng(seed))
        worst = max(worst, grad_check(loss_fn, store, eps))
    assert worst < threshold, f"max relative gradient error {worst}"
    return worst


class TestPointwiseLinear:
    def test_identity_weights(self):
        store = ParamStore()
        lin = PointwiseLinear(store, "lin", 3, 3, np.random.default_rng(0))
        lin.w.data[...] = np.eye(3)
        lin.b.data[...] = 0
        x = np.random.default_rng(1).standard_normal((3, 9)).astype(np.float32)
        np.testing.assert_array_equal(lin.forward(x), x)

    def test_basis_column_reads_weight_column(self):
        store = ParamStore()
        lin = PointwiseLinear(store, "lin", 4, 5, np.random.default_rng(2))
        x = np.zeros((4, 1), dtype=np.float32)
        x[2, 0] = 1.0
        np.testing.assert_allclose(lin.forward(x)[:, 0], lin.w.data[:, 2] + lin.b.data)

    def test_shape_mismatch(self):
        store = ParamStore()
        lin = PointwiseLinear(store, "lin", 4, 5, np.random.default_rng(0))
        with pytest.raises(ValueError):
            lin.forward(np.zeros((3, 7), dtype=np.float32))

    def test_gradients(self):
        def build(store, rng):
            lin = PointwiseLinear(store, "lin", 4, 5, rng)
            x = store.register("x", rng.standard_normal((4, 7)).astype(np.float32))
            r = rng.standard_normal((5, 7))

            def loss_fn(want_grad):
                y = lin.forward(x.data)
                if want_grad:
                    x.grad += lin.backward(r.astype(y.dtype))
                return float((y * r).sum())

            return loss_fn

        check_layer(build)


class TestBatchNorm:
    def test_constant_channel_returns_shift(self):
        store = ParamStore()
        bn = BatchNorm(store, "bn", 2)
        bn.beta.data[...] = [0.5, -1.0]
        x = np.full((2, 6), 3.0, dtype=np.float32)
        y = bn.forward(x, training=True)
        np.testing.assert_allclose(y[0], 0.5, atol=1e-6)
        np.testing.assert_allclose(y[1], -1.0, atol=1e-6)

    def test_eval_identity_with_unit_stats(self):
        store = ParamStore()
        bn = BatchNorm(store, "bn", 3)
        x = np.random.default_rng(0).standard_normal((3, 20)).astype(np.float32)
        y = bn.forward(x, training=False)
        np.testing.assert_allclose(y, x, rtol=1e-4, atol=1e-5)

    def test_matches_two_pass_oracle(self):
        rng = np.random.default_rng(1)
        store = ParamStore()
        bn = BatchNorm(store, "bn", 3)
        bn.gamma.data[...] = rng.uniform(0.5, 1.5, 3)
        bn.beta.data[...] = rng.standard_normal(3)
        x = rng.standard_normal((3, 50)).astype(np.float32)
        y = bn.forward(x, training=True)
        x64 = x.astype(np.float64)
        mean = x64.mean(axis=1)
        var = ((x64 - mean[:, None]) ** 2).mean(axis=1)
        want = bn.gamma.data[:, None] * (x64 - mean[:, None]) / np.sqrt(var + 1e-5)[:, None]
        want += bn.beta.data[:, None]
        np.testing.assert_allclose(y, want, atol=1e-6)

    def test_normalizes_valid_columns_only(self):
        rng = np.random.default_rng(2)
        store = ParamStore()
        bn = BatchNorm(store, "bn", 4)
        x = rng.standard_normal((4, 40)).astype(np.float32)
        valid = np.ones(40, dtype=bool)
        valid[30:] = False
        x[:, 30:] = 100.0  # junk that must not leak into the statistics
        y = bn.forward(x, valid=valid, training=True)
        yv = y[:, valid].astype(np.float64)
        assert np.abs(yv.mean(axis=1)).max() < 1e-5
        assert np.abs(yv.var(axis=1) - 1.0).max() < 1e-4

    def test_running_stats_update(self):
        store = ParamStore()
        bn = BatchNorm(store, "bn", 1)
        x = np.full((1, 10), 2.0, dtype=np.float32)
        bn.forward(x, training=True)
        np.testing.assert_allclose(bn.running_mean.data, [0.2], atol=1e-7)
        bn.forward(x, training=True, update_stats=False)
        np.testing.assert_allclose(bn.running_mean.data, [0.2], atol=1e-7)

    def test_empty_batch_raises(self):
        store = ParamStore()
        bn = BatchNorm(store, "bn", 2)
        with pytest.raises(ValueError):
            bn.forward(np.zeros((2, 4), dtype=np.float32), valid=np.zeros(4, dtype=bool), training=True)

    def test_gradients_train_mode(self):
        def build(store, rng):
            bn = BatchNorm(store, "bn", 3)
            bn.gamma.data[...] = rng.uniform(0.5, 1.5, 3)
            bn.beta.data[...] = rng.standard_normal(3)
            x = store.register("x", rng.standard_normal((3, 12)).astype(np.float32))
            valid = np.ones(12, dtype=bool)
            valid[9:] = False
            r = rng.standard_normal((3, 12))
            r[:, 9:] = 0.0  # padding columns never receive loss gradient

            def loss_fn(want_grad):
                y = bn.forward(x.data, valid=valid, training=True, update_stats=False)
                if want_grad:
                    x.grad += bn.backward(r)
                return float((y * r).sum())

            return loss_fn

        check_layer(build)

    def test_gradients_eval_mode(self):
        def build(store, rng):
            bn = BatchNorm(store, "bn", 3)
            bn.running_mean.data[...] = rng.standard_normal(3)
            bn.running_var.data[...] = rng.uniform(0.5, 2.0, 3)
            x = store.register("x", rng.standard_normal((3, 8)).astype(np.float32))
            r = rng.standard_normal((3, 8))

            def loss_fn(want_grad):
                y = bn.forward(x.data, training=False)
                if want_grad:
                    x.grad += bn.backward(r)
                return float((y * r).sum())

            return loss_fn

        check_layer(build)


def conv_oracle(x, kern, bias):
    """Six-loop depthwise 3x3 cross-correlation with zero padding."""
    f, h, w = x.shape
    xp = np.zeros((f, h + 2, w + 2), dtype=np.float64)
    xp[:, 1 : h + 1, 1 : w + 1] = x
    y = np.zeros((f, h, w), dtype=np.float64)
    for c in range(f):
        for i in range(h):
            for j in range(w):
                acc = 0.0
                for u in range(3):
                    for v in range(3):
                        acc += float(kern[c, u, v]) * xp[c, i + u, j + v]
                y[c, i, j] = acc + float(bias[c])
    return y


class TestDepthwiseConv:
    def test_center_one_hot_is_identity(self):
        store = ParamStore()
        conv = DepthwiseConv3x3(store, "conv", 2, np.random.default_rng(0))
        conv.k.data[...] = 0
        conv.k.data[:, 1, 1] = 1.0
        conv.b.data[...] = 0
        x = np.random.default_rng(1).standard_normal((2, 4, 5)).astype(np.float32)
        np.testing.assert_array_equal(conv.forward(x), x)

    def test_ones_kernel_spreads_impulse(self):
        store = ParamStore()
        conv = DepthwiseConv3x3(store, "conv", 1, np.random.default_rng(0))
        conv.k.data[...] = 1.0
        conv.b.data[...] = 0
        x = np.zeros((1, 5, 5), dtype=np.float32)
        x[0, 2, 2] = 1.0
        y = conv.forward(x)
        assert (y[0, 1:4, 1:4] == 1.0).all()
        assert y.sum() == 9.0

    def test_matches_six_loop_oracle(self):
        rng = np.random.default_rng(2)
        store = ParamStore()
        conv = DepthwiseConv3x3(store, "conv", 2, rng)
        x = rng.standard_normal((2, 5, 6)).astype(np.float32)
        y = conv.forward(x)
        np.testing.assert_allclose(y, conv_oracle(x, conv.k.data, conv.b.data), atol=1e-6)

    def test_channel_permutation_commutes(self):
        rng = np.random.default_rng(3)
        store = ParamStore()
        conv = DepthwiseConv3x3(store, "conv", 4, rng)
        x = rng.standard_normal((4, 6, 6)).astype(np.float32)
        y = conv.forward(x)
        perm = rng.permutation(4)
        store2 = ParamStore()
        conv2 = DepthwiseConv3x3(store2, "conv", 4, np.random.default_rng(0))
        conv2.k.data[...] = conv.k.data[perm]
        conv2.b.data[...] = conv.b.data[perm]
        np.testing.assert_array_equal(conv2.forward(x[perm]), y[perm])

    def test_gradients(self):
        def build(store, rng):
            conv = DepthwiseConv3x3(store, "conv", 2, rng)
            x = store.register("x", rng.standard_normal((2, 5, 6)).astype(np.float32))
            r = rng.standard_normal((2, 5, 6))

            def loss_fn(want_grad):
                y = conv.forward(x.data)
                if want_grad:
                    x.grad += conv.backward(r)
                return float((y * r).sum())

            return loss_fn

        check_layer(build)


class TestLayerScale:
    def test_ones_is_identity(self):
        store = ParamStore()
        ls = LayerScale(store, "ls", 3)
        ls.diag.data[...] = 1.0
        x = np.random.default_rng(0).standard_normal((3, 7)).astype(np.float32)
        np.testing.assert_array_equal(ls.forward(x), x)

    def test_zeros_kill_the_branch(self):
        store = ParamStore()
        ls = LayerScale(store, "ls", 3)
        ls.diag.data[...] = 0.0
        x = np.ones((3, 7), dtype=np.float32)
        assert (ls.forward(x) == 0).all()

    def test_default_init(self):
        store = ParamStore()
        ls = LayerScale(store, "ls", 5)
        np.testing.assert_allclose(ls.diag.data, 1e-2)

    def test_gradients_tight(self):
        def build(store, rng):
            ls = LayerScale(store, "ls", 4)
            ls.diag.data[...] = rng.standard_normal(4)
            x = store.register("x", rng.standard_normal((4, 9)).astype(np.float32))
            r = rng.standard_normal((4, 9))

            def loss_fn(want_grad):
                y = ls.forward(x.data)
                if want_grad:
                    x.grad += ls.backward(r)
                return float((y * r).sum())

            return loss_fn

        # the map is bilinear, so central differences are essentially exact
        check_layer(build, threshold=1e-6)


class TestNeighborhoodMax:
    def test_single_neighbor_copies_column(self):
        x = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]], dtype=np.float32)
        nbr = np.array([[1], [0], [1]])
        y, sel = neighborhood_max(x, nbr)
        np.testing.assert_array_equal(y, x[:, [1, 0, 1]])
        np.testing.assert_array_equal(sel, np.array([[1, 0, 1], [1, 0, 1]]))

    def test_all_equal_routes_to_lowest_index(self):
        x = np.full((2, 4), 5.0, dtype=np.float32)
        nbr = np.array([[3, 1, 2]] * 4)
        y, sel = neighborhood_max(x, nbr)
        np.testing.assert_array_equal(y, x)
        assert (sel == 1).all()
        dx = neighborhood_max_backward(np.ones((2, 4)), sel, 4)
        np.testing.assert_array_equal(dx[:, 1], [4.0, 4.0])
        assert dx[:, [0, 2, 3]].sum() == 0

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((4, 30)).astype(np.float32)
        nbr = rng.integers(0, 30, size=(30, 5))
        y, _ = neighborhood_max(x, nbr)
        for i in range(30):
            np.testing.assert_array_equal(y[:, i], x[:, nbr[i]].max(axis=1))

    def test_bad_neighbors(self):
        x = np.zeros((2, 3), dtype=np.float32)
        with pytest.raises(ValueError):
            neighborhood_max(x, np.zeros((3, 0), dtype=np.int64))
        with pytest.raises(ValueError):
            neighborhood_max(x, np.array([[5], [0], [0]]))

    def test_gradients(self):
        def build(store, rng):
            # distinct, well separated values so the FD step never flips a max
            vals = rng.permutation(3 * 20).astype(np.float32) * 0.05
            x = store.register("x", vals.reshape(3, 20))
            nbr = rng.integers(0, 20, size=(20, 4))
            r = rng.standard_normal((3, 20))

            def loss_fn(want_grad):
                y, sel = neighborhood_max(x.data, nbr)
                if want_grad:
                    x.grad += neighborhood_max_backward(r, sel, 20)
                return float((y * r).sum())

            return loss_fn

        check_layer(build)


class TestSlotMax:
    def test_tie_prefers_slot_with_lowest_point_index(self):
        values = np.zeros((1, 2, 3), dtype=np.float32)
        neighbors = np.array([[9, 2, 5], [1, 8, 0]])
        _, slots = slot_max(values, neighbors)
        assert slots[0].tolist() == [1, 2]  # point 2 for row 0, point 0 for row 1


class TestRelu:
    def test_forward_backward(self):
        x = np.array([[-1.0, 0.0, 2.0]], dtype=np.float32)
        np.testing.assert_array_equal(relu(x), [[0.0, 0.0, 2.0]])
        np.testing.assert_array_equal(relu_backward(np.ones_like(x), x), [[0.0, 0.0, 1.0]])


class TestGradCheckHarness:
    def test_rejects_bad_eps(self):
        store = ParamStore()
        store.register("x", np.zeros(1, dtype=np.float32))
        with pytest.raises(ValueError):
            grad_check(lambda want: 0.0, store, eps=1.0)

    def test_detects_nonfinite(self):
        store = ParamStore()
        store.register("x", np.zeros(1, dtype=np.float32))
        with pytest.raises(FloatingPointError):
            grad_check(lambda want: float("nan"), store)

    def test_restores_float32(self):
        store = ParamStore()
        t = store.register("x", np.ones(2, dtype=np.float32))

        def loss_fn(want_grad):
            if want_grad:
                t.grad += 1.0
            return float(t.data.sum())

        err = grad_check(loss_fn, store)
        assert err < 1e-10
        assert t.data.dtype == np.float32


def test_forward_determinism():
    rng = np.random.default_rng(5)
    store = ParamStore()
    conv = DepthwiseConv3x3(store, "conv", 3, rng)
    x = rng.standard_normal((3, 8, 8)).astype(np.float32)
    np.testing.assert_array_equal(conv.forward(x), conv.forward(x))


def test_param_store_rejects_duplicates():
    store = ParamStore()
    store.register("w", np.zeros(1, dtype=np.float32))
    with pytest.raises(ValueError):
        store.register("w", np.zeros(1, dtype=np.float32))
