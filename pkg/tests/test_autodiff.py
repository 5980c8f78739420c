"""Unit and gradient checks for the reverse-mode engine.

Every primitive gets (a) a forward check against a hand-computed or
numpy-computed value and (b) a central-difference gradient check at
randomly drawn points. The gradcheck harness itself is exercised on a
known-broken gradient to prove it can fail.
"""

import numpy as np
import pytest

from pointperc import autodiff as ad
from pointperc.autodiff import DiffArray, ParamStore, Tape


RNG = np.random.default_rng(20240817)


def scalar_grad(fn, *arrays):
    """Run fn under a tape, backprop from its scalar output, return grads."""
    xs = [DiffArray(a, requires_grad=True) for a in arrays]
    tape = Tape()
    with tape:
        out = fn(*xs)
    tape.backward(out)
    return out, [x.grad for x in xs]


def numeric_grad(fn, arrays, eps=1e-6):
    """Central differences of a scalar-valued fn of raw numpy arrays."""
    grads = []
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    for k, a in enumerate(arrays):
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = fn(*arrays)
            flat[i] = orig - eps
            fm = fn(*arrays)
            flat[i] = orig
            gf[i] = (fp - fm) / (2 * eps)
        grads.append(g)
    return grads


def check_op(build, *shapes, n_points=3, atol=1e-6):
    """Gradcheck `build` (DiffArrays -> scalar DiffArray) at random points."""
    for _ in range(n_points):
        arrays = [RNG.standard_normal(s) for s in shapes]
        _, analytic = scalar_grad(build, *arrays)

        def raw(*raws):
            xs = [DiffArray(r) for r in raws]
            with Tape():
                return float(build(*xs).data.reshape(()))

        numeric = numeric_grad(raw, arrays)
        for a, n in zip(analytic, numeric):
            np.testing.assert_allclose(a, n, atol=atol, rtol=1e-4)


# ---------------------------------------------------------------------------
# Forward values
# ---------------------------------------------------------------------------

class TestForward:
    def test_softmax_uniform(self):
        y = ad.softmax(DiffArray([[0.0, 0.0]]))
        np.testing.assert_allclose(y.data, [[0.5, 0.5]])

    def test_matmul_identity(self):
        x = RNG.standard_normal((4, 3))
        y = ad.matmul(DiffArray(np.eye(4)), DiffArray(x))
        np.testing.assert_array_equal(y.data, x)

    def test_relu_clamps(self):
        y = ad.relu(DiffArray([-2.0, 0.0, 3.0]))
        np.testing.assert_array_equal(y.data, [0.0, 0.0, 3.0])

    def test_gelu_known_values(self):
        from scipy.special import erf

        x = np.array([0.0, 1.3, -1.3])
        y = ad.gelu(DiffArray(x)).data
        expect = x * 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
        np.testing.assert_allclose(y, expect, rtol=1e-14)
        assert y[0] == 0.0

    def test_sigmoid_midpoint(self):
        assert ad.sigmoid(DiffArray([0.0])).data[0] == 0.5

    def test_softplus_large_negative_stable(self):
        y = ad.softplus(DiffArray([-1000.0, 1000.0]))
        assert y.data[0] == 0.0
        assert y.data[1] == 1000.0

    def test_huber_regions(self):
        y = ad.huber(DiffArray([0.5, 2.0, -3.0]), beta=1.0)
        np.testing.assert_allclose(y.data, [0.125, 1.5, 2.5])

    def test_reduce_mean(self):
        x = np.arange(6.0).reshape(2, 3)
        assert float(ad.reduce_mean(DiffArray(x)).data.reshape(())) == 2.5

    def test_concat_axis1(self):
        a = np.ones((2, 2))
        b = np.zeros((2, 1))
        y = ad.concat([DiffArray(a), DiffArray(b)], axis=1)
        assert y.shape == (2, 3)
        np.testing.assert_array_equal(y.data[:, 2], 0.0)

    def test_scatter_max_ties_take_lowest_row(self):
        x = DiffArray([[1.0], [1.0], [0.0]], requires_grad=True)
        idx = np.array([0, 0, 1])
        tape = Tape()
        with tape:
            y = ad.scatter_max(x, idx, 2)
            s = ad.reduce_sum(y)
        tape.backward(s)
        np.testing.assert_array_equal(y.data, [[1.0], [0.0]])
        # tie between rows 0 and 1: gradient must go to row 0 only
        np.testing.assert_array_equal(x.grad, [[1.0], [0.0], [1.0]])

    def test_segment_softmax_rows_sum_to_one(self):
        x = DiffArray(RNG.standard_normal((7, 1)))
        seg = np.array([0, 0, 0, 1, 1, 2, 2])
        y = ad.segment_softmax(x, seg, 3)
        sums = np.add.reduceat(y.data, [0, 3, 5], axis=0)
        np.testing.assert_allclose(sums, 1.0)

    def test_segment_empty_segment_rejected(self):
        with pytest.raises(ValueError):
            ad.segment_sum(DiffArray(np.ones((2, 1))), np.array([0, 2]), 3)

    def test_batch_norm_eval_identity(self):
        # with running stats (0, 1), gamma 1, beta 0 and eps tiny, eval is ~id
        x = RNG.standard_normal((5, 3))
        g = DiffArray(np.ones(3), requires_grad=True)
        b = DiffArray(np.zeros(3), requires_grad=True)
        y = ad.batch_norm(DiffArray(x), g, b, np.zeros(3), np.ones(3), training=False)
        np.testing.assert_allclose(y.data, x, rtol=1e-5)

    def test_batch_norm_train_normalizes(self):
        x = RNG.standard_normal((64, 4)) * 3.0 + 2.0
        g = DiffArray(np.ones(4), requires_grad=True)
        b = DiffArray(np.zeros(4), requires_grad=True)
        rm, rv = np.zeros(4), np.ones(4)
        y = ad.batch_norm(DiffArray(x), g, b, rm, rv, training=True)
        np.testing.assert_allclose(y.data.mean(axis=0), 0.0, atol=1e-10)
        np.testing.assert_allclose(y.data.std(axis=0), 1.0, atol=1e-3)
        # momentum 0.9 keeps 90% of the old stats
        np.testing.assert_allclose(rm, 0.1 * x.mean(axis=0), atol=1e-12)

    def test_backward_requires_scalar(self):
        x = DiffArray(np.ones((2, 2)), requires_grad=True)
        tape = Tape()
        with tape:
            y = ad.scale(x, 2.0)
        with pytest.raises(ValueError):
            tape.backward(y)


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------

class TestGradients:
    def test_add_broadcast(self):
        check_op(lambda a, b: ad.reduce_sum(ad.mul(ad.add(a, b), a)), (3, 4), (4,))

    def test_sub_broadcast(self):
        check_op(lambda a, b: ad.reduce_sum(ad.powc(ad.sub(a, b), 2.0)), (2, 3), (1, 3))

    def test_mul(self):
        check_op(lambda a, b: ad.reduce_sum(ad.mul(a, b)), (3, 3), (3, 3))

    def test_matmul(self):
        check_op(lambda a, b: ad.reduce_sum(ad.matmul(a, b)), (3, 4), (4, 2))

    def test_scale(self):
        check_op(lambda a: ad.reduce_sum(ad.scale(a, -1.7)), (5,))

    def test_concat(self):
        check_op(
            lambda a, b: ad.reduce_sum(ad.powc(ad.concat([a, b], axis=0), 2.0)),
            (2, 3),
            (4, 3),
        )

    def test_slice_cols(self):
        check_op(lambda a: ad.reduce_sum(ad.slice_cols(a, 1, 3)), (4, 5))

    def test_gather_rows_repeats(self):
        idx = np.array([0, 2, 2, 1])
        check_op(lambda a: ad.reduce_sum(ad.powc(ad.gather_rows(a, idx), 2.0)), (3, 2))

    def test_scatter_rows(self):
        idx = np.array([3, 0, 2])
        check_op(lambda a: ad.reduce_sum(ad.powc(ad.scatter_rows(a, idx, 5), 2.0)), (3, 2))

    def test_segment_sum(self):
        seg = np.array([0, 0, 1, 2, 2, 2])
        check_op(lambda a: ad.reduce_sum(ad.powc(ad.segment_sum(a, seg, 3), 2.0)), (6, 2))

    def test_segment_softmax(self):
        seg = np.array([0, 0, 0, 1, 1])
        check_op(
            lambda a: ad.reduce_sum(ad.mul(ad.segment_softmax(a, seg, 2), a)), (5, 2)
        )

    def test_softmax(self):
        check_op(lambda a: ad.reduce_sum(ad.mul(ad.softmax(a, axis=1), a)), (3, 4))

    def test_reduce_sum_axis(self):
        check_op(lambda a: ad.reduce_sum(ad.powc(ad.reduce_sum(a, axis=0), 2.0)), (3, 4))

    def test_reduce_mean_axis(self):
        check_op(lambda a: ad.reduce_sum(ad.powc(ad.reduce_mean(a, axis=1), 2.0)), (3, 4))

    def test_reduce_max(self):
        check_op(lambda a: ad.reduce_sum(ad.reduce_max(a, axis=1)), (4, 5))

    def test_relu(self):
        # shift away from the kink at 0
        for _ in range(3):
            a = RNG.standard_normal((4, 4)) + 0.5
            a[np.abs(a) < 1e-3] = 0.5
            _, (g,) = scalar_grad(lambda x: ad.reduce_sum(ad.relu(x)), a)
            n = numeric_grad(
                lambda r: float(ad.relu(DiffArray(r)).data.sum()), [a]
            )[0]
            np.testing.assert_allclose(g, n, atol=1e-6)

    def test_gelu(self):
        check_op(lambda a: ad.reduce_sum(ad.gelu(a)), (4, 3))

    def test_sigmoid(self):
        check_op(lambda a: ad.reduce_sum(ad.sigmoid(a)), (6,))

    def test_softplus(self):
        check_op(lambda a: ad.reduce_sum(ad.softplus(a)), (6,))

    def test_log(self):
        for _ in range(3):
            a = RNG.uniform(0.5, 2.0, size=(4,))
            _, (g,) = scalar_grad(lambda x: ad.reduce_sum(ad.log(x)), a)
            np.testing.assert_allclose(g, 1.0 / a, rtol=1e-10)

    def test_exp(self):
        check_op(lambda a: ad.reduce_sum(ad.exp(a)), (3, 3))

    def test_huber_smooth(self):
        # avoid |x| == beta where huber has a second-derivative jump
        for _ in range(3):
            a = RNG.standard_normal((5,)) * 2.0
            a[np.abs(np.abs(a) - 1.0) < 1e-2] = 0.3
            _, (g,) = scalar_grad(lambda x: ad.reduce_sum(ad.huber(x)), a)
            n = numeric_grad(
                lambda r: float(ad.huber(DiffArray(r)).data.sum()), [a]
            )[0]
            np.testing.assert_allclose(g, n, atol=1e-6)

    def test_scatter_max_gradient(self):
        idx = np.array([0, 1, 0, 1, 0])
        for _ in range(3):
            a = RNG.standard_normal((5, 2))

            def f(x):
                return ad.reduce_sum(ad.powc(ad.scatter_max(x, idx, 2), 2.0))

            _, (g,) = scalar_grad(f, a)
            n = numeric_grad(
                lambda r: float(
                    (ad.segment_max_forward(r, idx, 2)[0] ** 2).sum()
                ),
                [a],
            )[0]
            np.testing.assert_allclose(g, n, atol=1e-6)

    def test_batch_norm_train_grad(self):
        def build(x, g, b):
            y = ad.batch_norm(x, g, b, np.zeros(3), np.ones(3), training=True)
            return ad.reduce_sum(ad.powc(y, 2.0))

        for _ in range(3):
            arrays = [RNG.standard_normal((6, 3)), RNG.uniform(0.5, 1.5, 3), RNG.standard_normal(3)]
            _, analytic = scalar_grad(build, *arrays)

            def raw(x, g, b):
                xs = DiffArray(x, requires_grad=False)
                with Tape():
                    y = ad.batch_norm(
                        xs, DiffArray(g), DiffArray(b), np.zeros(3), np.ones(3), training=True
                    )
                return float((y.data**2).sum())

            numeric = numeric_grad(raw, arrays)
            for a, n in zip(analytic, numeric):
                np.testing.assert_allclose(a, n, atol=1e-5, rtol=1e-4)

    def test_grad_accumulates_across_uses(self):
        x = DiffArray([2.0], requires_grad=True)
        tape = Tape()
        with tape:
            y = ad.add(ad.mul(x, x), x)  # x^2 + x, dy/dx = 2x + 1 = 5
            s = ad.reduce_sum(y)
        tape.backward(s)
        np.testing.assert_allclose(x.grad, [5.0])


# ---------------------------------------------------------------------------
# Stores, init, gradcheck harness, checkpoints
# ---------------------------------------------------------------------------

class TestParamStore:
    def test_order_and_duplicates(self):
        s = ParamStore()
        s.add("b", DiffArray([1.0], requires_grad=True))
        s.add("a", DiffArray([2.0], requires_grad=True))
        assert s.names() == ["b", "a"]
        with pytest.raises(ValueError):
            s.add("a", DiffArray([3.0], requires_grad=True))

    def test_rejects_frozen(self):
        s = ParamStore()
        with pytest.raises(ValueError):
            s.add("x", DiffArray([1.0]))

    def test_init_deterministic_and_bounded(self):
        spec = [("w", (8, 4), "weight"), ("b", (4,), "zeros"), ("g", (4,), "ones")]
        s1 = ad.init_params(spec, np.random.default_rng(7))
        s2 = ad.init_params(spec, np.random.default_rng(7))
        np.testing.assert_array_equal(s1["w"].data, s2["w"].data)
        bound = np.sqrt(6.0 / 12.0)
        assert np.abs(s1["w"].data).max() <= bound
        np.testing.assert_array_equal(s1["b"].data, 0.0)
        np.testing.assert_array_equal(s1["g"].data, 1.0)


class TestGradcheckHarness:
    def _store(self):
        return ad.init_params([("w", (3, 3), "weight"), ("b", (3,), "zeros")],
                              np.random.default_rng(11))

    def test_passes_on_correct_graph(self):
        store = self._store()
        x = ad.constant(RNG.standard_normal((5, 3)))

        def f():
            return ad.reduce_sum(ad.gelu(ad.linear(x, store["w"], store["b"])))

        report = ad.gradcheck(f, store)
        assert report.passed, report.failures[:3]
        assert report.checked == 12

    def test_catches_wrong_gradient(self):
        store = self._store()
        x = ad.constant(RNG.standard_normal((5, 3)))

        def f():
            y = ad.linear(x, store["w"], store["b"])
            # detach: recompute through a fresh non-recording constant
            z = ad.constant(y.data * y.data)
            return ad.reduce_sum(ad.add(ad.mul(y, y), z))

        report = ad.gradcheck(f, store)
        assert not report.passed
        assert report.failures

    def test_sampled_mode_checks_fewer(self):
        store = self._store()
        x = ad.constant(RNG.standard_normal((5, 3)))

        def f():
            return ad.reduce_sum(ad.linear(x, store["w"], store["b"]))

        report = ad.gradcheck(f, store, entries_per_param=2,
                              rng=np.random.default_rng(0))
        assert report.passed
        assert report.checked == 4


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        store = ad.init_params(
            [("enc.w", (4, 6), "weight"), ("enc.b", (6,), "zeros")],
            np.random.default_rng(3),
        )
        buffers = {"bn.mean": RNG.standard_normal(6), "bn.var": np.abs(RNG.standard_normal(6))}
        path = tmp_path / "model.ckpt"
        ad.save_checkpoint(path, store, buffers, echo=["lr = 0.0001", "steps = 10"])
        arrays, echo = ad.load_checkpoint(path)
        assert echo == ["lr = 0.0001", "steps = 10"]
        np.testing.assert_array_equal(arrays["enc.w"], store["enc.w"].data)
        np.testing.assert_array_equal(arrays["bn.mean"], buffers["bn.mean"])
        fresh = ad.init_params(
            [("enc.w", (4, 6), "weight"), ("enc.b", (6,), "zeros")],
            np.random.default_rng(99),
        )
        ad.restore_params(fresh, arrays)
        np.testing.assert_array_equal(fresh["enc.w"].data, store["enc.w"].data)

    def test_truncated_payload_rejected(self, tmp_path):
        store = ad.init_params([("w", (4, 4), "weight")], np.random.default_rng(1))
        path = tmp_path / "model.ckpt"
        ad.save_checkpoint(path, store)
        raw = path.read_bytes()
        path.write_bytes(raw[:-8])
        with pytest.raises(ad.CheckpointError):
            ad.load_checkpoint(path)

    def test_missing_separator_rejected(self, tmp_path):
        path = tmp_path / "model.ckpt"
        path.write_bytes(b"w 2 2\n" + b"\x00" * 32)
        with pytest.raises(ad.CheckpointError):
            ad.load_checkpoint(path)

    def test_shape_mismatch_rejected(self, tmp_path):
        store = ad.init_params([("w", (2, 2), "weight")], np.random.default_rng(1))
        path = tmp_path / "model.ckpt"
        ad.save_checkpoint(path, store)
        arrays, _ = ad.load_checkpoint(path)
        other = ad.init_params([("w", (3, 2), "weight")], np.random.default_rng(1))
        with pytest.raises(ad.CheckpointError):
            ad.restore_params(other, arrays)
