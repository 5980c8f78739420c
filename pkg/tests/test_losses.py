"""Loss values against hand arithmetic and oracles, plus gradient checks."""

import numpy as np
import pytest

import oracles
from pointperc import autodiff as ad
from pointperc.autodiff import DiffArray, ParamStore, Tape
from pointperc.losses import (
    LossError,
    UncertaintyWeights,
    cross_entropy,
    focal_loss,
    lovasz_softmax,
    masked_smooth_l1,
    multitask_loss,
    smooth_l1,
)

RNG = np.random.default_rng(99173)


def gradcheck_loss(build, shapes, seed=0, tol=1e-4):
    """Wrap raw arrays as a ParamStore and run the finite-difference check."""
    rng = np.random.default_rng(seed)
    store = ParamStore()
    arrays = []
    for i, s in enumerate(shapes):
        arr = DiffArray(rng.standard_normal(s), requires_grad=True)
        store.add(f"x{i}", arr)
        arrays.append(arr)
    report = ad.gradcheck(lambda: build(*arrays), store, tol=tol)
    assert report.passed, report.failures[:3]


class TestCrossEntropy:
    def test_perfect_prediction_near_zero(self):
        logits = DiffArray([[30.0, 0.0], [0.0, 30.0]])
        loss = cross_entropy(logits, np.array([0, 1]))
        assert float(loss.data) < 1e-12

    def test_uniform_logits(self):
        logits = DiffArray(np.zeros((3, 4)))
        loss = cross_entropy(logits, np.array([0, 1, 2]))
        assert float(loss.data) == pytest.approx(np.log(4.0), rel=1e-12)

    def test_matches_direct_formula(self):
        logits_raw = RNG.standard_normal((10, 5))
        labels = RNG.integers(0, 5, 10)
        loss = cross_entropy(DiffArray(logits_raw), labels)
        p = np.exp(logits_raw) / np.exp(logits_raw).sum(axis=1, keepdims=True)
        want = -np.mean(np.log(p[np.arange(10), labels]))
        assert float(loss.data) == pytest.approx(want, rel=1e-12)

    def test_ignore_label(self):
        logits_raw = RNG.standard_normal((6, 3))
        labels = np.array([0, 1, 255, 2, 255, 0])
        loss = cross_entropy(DiffArray(logits_raw), labels, ignore_id=255)
        keep = labels != 255
        p = np.exp(logits_raw) / np.exp(logits_raw).sum(axis=1, keepdims=True)
        want = -np.mean(np.log(p[keep, labels[keep]]))
        assert float(loss.data) == pytest.approx(want, rel=1e-12)

    def test_all_ignored_rejected(self):
        with pytest.raises(LossError):
            cross_entropy(DiffArray(np.zeros((2, 3))), np.array([9, 9]), ignore_id=9)

    def test_gradcheck(self):
        labels = RNG.integers(0, 4, 8)
        gradcheck_loss(lambda x: cross_entropy(x, labels), [(8, 4)])


class TestLovasz:
    def _probs(self, raw):
        return ad.softmax(DiffArray(raw), axis=1)

    def test_perfect_is_zero(self):
        probs = DiffArray(np.eye(3)[[0, 1, 2, 0]])
        loss = lovasz_softmax(probs, np.array([0, 1, 2, 0]))
        assert float(loss.data) == pytest.approx(0.0, abs=1e-12)

    def test_single_wrong_point_is_one(self):
        probs = DiffArray([[0.0, 1.0]])
        loss = lovasz_softmax(probs, np.array([0]))
        assert float(loss.data) == pytest.approx(1.0)

    def test_matches_delta_sum_oracle(self):
        for trial in range(25):
            rng = np.random.default_rng(trial)
            n, k = int(rng.integers(2, 7)), int(rng.integers(2, 4))
            raw = rng.standard_normal((n, k))
            probs = np.exp(raw) / np.exp(raw).sum(axis=1, keepdims=True)
            labels = rng.integers(0, k, n)
            loss = lovasz_softmax(DiffArray(probs), labels)
            want_terms = []
            for c in np.unique(labels):
                fg = labels == c
                errors = np.where(fg, 1.0 - probs[:, c], probs[:, c])
                want_terms.append(oracles.lovasz_delta_sum(errors, fg))
            assert float(loss.data) == pytest.approx(np.mean(want_terms), rel=1e-10)

    def test_binary_vertex_equals_jaccard_loss(self):
        # at 0/1 probabilities the extension equals the set-function value
        labels = np.array([0, 0, 1, 1, 0])
        pred = np.array([0, 1, 1, 0, 0])
        probs = np.eye(2)[pred]
        loss = lovasz_softmax(DiffArray(probs.astype(float)), labels)
        terms = []
        for c in (0, 1):
            fg = set(np.flatnonzero(labels == c).tolist())
            wrong = set(np.flatnonzero(pred != labels).tolist())
            # points predicted as c wrongly, or truly c but missed
            s = {i for i in wrong if labels[i] == c or pred[i] == c}
            terms.append(1.0 - len(fg - s) / len(fg | s))
        assert float(loss.data) == pytest.approx(np.mean(terms), rel=1e-12)

    def test_range_per_class(self):
        for _ in range(10):
            raw = RNG.standard_normal((6, 3))
            probs = np.exp(raw) / np.exp(raw).sum(axis=1, keepdims=True)
            labels = RNG.integers(0, 3, 6)
            loss = lovasz_softmax(DiffArray(probs), labels)
            assert 0.0 <= float(loss.data) <= 1.0

    def test_gradcheck_through_softmax(self):
        labels = np.array([0, 1, 2, 1, 0, 2])
        gradcheck_loss(
            lambda x: lovasz_softmax(ad.softmax(x, axis=1), labels), [(6, 3)]
        )


class TestFocal:
    def test_certain_correct_is_zero(self):
        logits = DiffArray([100.0, -100.0])
        loss = focal_loss(logits, np.array([1.0, 0.0]))
        assert float(loss.data) == pytest.approx(0.0, abs=1e-12)

    def test_half_probability_arithmetic(self):
        # p_t = 0.5 on a positive: 0.25 * 0.25 * ln 2
        logits = DiffArray([0.0])
        loss = focal_loss(logits, np.array([1.0]), alpha=0.25, gamma=2.0)
        assert float(loss.data) == pytest.approx(0.25 * 0.25 * np.log(2.0), rel=1e-12)

    def test_gamma_zero_balanced_alpha_is_half_bce(self):
        raw = RNG.standard_normal(12)
        targets = RNG.integers(0, 2, 12).astype(float)
        loss = focal_loss(DiffArray(raw), targets, alpha=0.5, gamma=0.0)
        p = 1.0 / (1.0 + np.exp(-raw))
        bce = -np.mean(targets * np.log(p) + (1 - targets) * np.log(1 - p))
        assert float(loss.data) == pytest.approx(0.5 * bce, rel=1e-10)

    def test_gradcheck(self):
        targets = RNG.integers(0, 2, 10).astype(float)
        gradcheck_loss(lambda x: focal_loss(x, targets), [(10,)])


class TestSmoothL1:
    def test_zero(self):
        assert float(smooth_l1(DiffArray([[0.0]]), np.array([[0.0]])).data) == 0.0

    def test_inner_quadratic(self):
        loss = smooth_l1(DiffArray([[0.5]]), np.array([[0.0]]))
        assert float(loss.data) == pytest.approx(0.125)

    def test_outer_linear(self):
        loss = smooth_l1(DiffArray([[2.0]]), np.array([[0.0]]))
        assert float(loss.data) == pytest.approx(1.5)

    def test_masked_rows(self):
        pred = DiffArray([[1.0, 1.0], [5.0, 5.0]])
        target = np.zeros((2, 2))
        mask = np.array([1.0, 0.0])
        loss = masked_smooth_l1(pred, target, mask)
        assert float(loss.data) == pytest.approx(0.5)  # (|1|-0.5)*2/2

    def test_masked_empty_is_zero_constant(self):
        pred = DiffArray(RNG.standard_normal((3, 2)), requires_grad=True)
        loss = masked_smooth_l1(pred, np.zeros((3, 2)), np.zeros(3))
        assert float(loss.data) == 0.0

    def test_gradcheck(self):
        target = RNG.standard_normal((5, 3)) * 0.1
        gradcheck_loss(lambda x: smooth_l1(x, target), [(5, 3)])
        mask = np.array([1.0, 0, 1, 0, 1])
        gradcheck_loss(lambda x: masked_smooth_l1(x, target, mask), [(5, 3)])


class TestMultitask:
    def test_zero_rho_is_plain_sum(self):
        store = ParamStore()
        w = UncertaintyWeights(store)
        losses = {"seg": ad.constant(np.array(0.7)), "det": ad.constant(np.array(1.3))}
        total = multitask_loss(losses, w)
        assert float(total.data) == pytest.approx(2.0)

    def test_single_task_no_weighting(self):
        total = multitask_loss({"seg": ad.constant(np.array(0.9))}, None)
        assert float(total.data) == pytest.approx(0.9)

    def test_rho_gradient_closed_form(self):
        store = ParamStore()
        w = UncertaintyWeights(store)
        w.rho["seg"].data[0] = 0.4
        w.rho["det"].data[0] = -0.2
        seg_val, det_val = 0.8, 1.7
        tape = Tape()
        with tape:
            total = multitask_loss(
                {"seg": ad.constant(np.array(seg_val)), "det": ad.constant(np.array(det_val))}, w
            )
        tape.backward(total)
        assert w.rho["seg"].grad[0] == pytest.approx(-np.exp(-0.4) * seg_val + 0.5)
        assert w.rho["det"].grad[0] == pytest.approx(-np.exp(0.2) * det_val + 0.5)

    def test_stationary_rho(self):
        # gradient vanishes at rho = ln(2 L)
        store = ParamStore()
        w = UncertaintyWeights(store)
        loss_val = 1.1
        w.rho["seg"].data[0] = np.log(2 * loss_val)
        tape = Tape()
        with tape:
            total = multitask_loss({"seg": ad.constant(np.array(loss_val))}, w)
        tape.backward(total)
        assert w.rho["seg"].grad[0] == pytest.approx(0.0, abs=1e-12)
        assert w.rho["det"].grad is None

    def test_gradcheck_with_diff_losses(self):
        # gradcheck over loss inputs and rho jointly
        target = RNG.standard_normal((4, 2)) * 0.1
        labels = RNG.integers(0, 3, 4)
        rng = np.random.default_rng(5)
        store = ParamStore()
        x = store.add("x", DiffArray(rng.standard_normal((4, 3)), requires_grad=True))
        y = store.add("y", DiffArray(rng.standard_normal((4, 2)), requires_grad=True))
        w = UncertaintyWeights(store)
        w.rho["seg"].data[0] = 0.3
        w.rho["det"].data[0] = -0.1

        def f():
            seg = cross_entropy(x, labels)
            det = smooth_l1(y, target)
            return multitask_loss({"seg": seg, "det": det}, w)

        report = ad.gradcheck(f, store)
        assert report.passed, report.failures[:3]
