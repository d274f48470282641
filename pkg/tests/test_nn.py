import numpy as np
import pytest

from shiftlab.errors import FormatError, NumericError, ParameterError
from shiftlab.nn import (
    Gradient,
    backward,
    forward,
    init_model,
    init_optimizer,
    load_model,
    save_model,
    sgd_step,
    zeros_gradient,
)


def finite_difference_grad(model, X, loss_fn, eps=1e-5):
    """Central finite differences of loss_fn(model) for every parameter."""
    grads = []
    params = [(l.weight, l.bias) for l in [*model.extractor, model.classifier]]
    for w, b in params:
        gw = np.zeros_like(w)
        gb = np.zeros_like(b)
        for arr, g in ((w, gw), (b, gb)):
            it = np.nditer(arr, flags=["multi_index"])
            for _ in it:
                i = it.multi_index
                arr[i] += eps
                lp = loss_fn(model)
                arr[i] -= 2 * eps
                lm = loss_fn(model)
                arr[i] += eps
                g[i] = (lp - lm) / (2 * eps)
        grads.append((gw, gb))
    return grads


def assert_grad_close(analytic: Gradient, fd, rtol=1e-4):
    pairs = [*analytic.extractor, analytic.classifier]
    for (aw, ab), (fw, fb) in zip(pairs, fd):
        for a, f in ((aw, fw), (ab, fb)):
            denom = np.maximum(np.abs(f), 1e-6)
            assert np.max(np.abs(a - f) / denom) < rtol


class TestInit:
    def test_determinism(self):
        a = init_model(2, 8, 2, depth=2, seed=5)
        b = init_model(2, 8, 2, depth=2, seed=5)
        for la, lb in zip([*a.extractor, a.classifier], [*b.extractor, b.classifier]):
            assert np.array_equal(la.weight, lb.weight)
            assert np.array_equal(la.bias, lb.bias)

    def test_shapes_depth_one(self):
        m = init_model(2, 8, 2, depth=1, seed=0)
        assert len(m.extractor) == 1
        assert m.extractor[0].weight.shape == (8, 2)
        assert m.classifier.weight.shape == (2, 8)

    def test_biases_zero_and_fan_in_bound(self):
        m = init_model(3, 16, 4, depth=3, seed=2)
        for layer in [*m.extractor, m.classifier]:
            assert np.all(layer.bias == 0)
            bound = 1.0 / np.sqrt(layer.weight.shape[1])
            assert np.all(np.abs(layer.weight) <= bound)

    def test_rejects_nonpositive_dims(self):
        with pytest.raises(ParameterError):
            init_model(0, 8, 2)
        with pytest.raises(ParameterError):
            init_model(2, 8, 2, depth=0)


class TestForward:
    def test_zero_classifier_gives_uniform_probs(self):
        m = init_model(2, 8, 3, seed=1)
        m.classifier.weight[...] = 0.0
        _, _, probs = forward(m, np.random.default_rng(0).normal(size=(5, 2)))
        assert np.allclose(probs, 1.0 / 3.0, atol=1e-12)

    def test_softmax_shift_invariance(self):
        m = init_model(2, 8, 3, seed=1)
        X = np.random.default_rng(1).normal(size=(4, 2))
        _, logits, probs = forward(m, X)
        m2 = init_model(2, 8, 3, seed=1)
        m2.classifier.bias += 7.5  # shifts every logit of every row
        _, _, probs2 = forward(m2, X)
        assert np.allclose(probs, probs2, atol=1e-12)

    def test_rows_sum_to_one(self):
        m = init_model(5, 12, 4, seed=3)
        X = np.random.default_rng(2).normal(size=(20, 5))
        probs = forward(m, X)[2]
        assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-9)
        assert np.all((probs > 0) & (probs < 1))

    def test_dimension_mismatch(self):
        m = init_model(3, 8, 2, seed=0)
        with pytest.raises(ParameterError):
            forward(m, np.zeros((4, 2)))


class TestBackward:
    def test_matches_finite_differences_on_ce_style_loss(self):
        rng = np.random.default_rng(7)
        m = init_model(3, 6, 3, depth=2, seed=7)
        X = rng.normal(size=(10, 3))
        U = rng.normal(size=(10, 3))  # arbitrary fixed upstream direction

        def loss(model):
            return float((forward(model, X)[1] * U).sum())

        analytic = backward(m, X, U)
        assert_grad_close(analytic, finite_difference_grad(m, X, loss))

    def test_feature_gradient_path(self):
        rng = np.random.default_rng(8)
        m = init_model(2, 5, 2, depth=2, seed=8)
        X = rng.normal(size=(6, 2))
        V = rng.normal(size=(6, 5))

        def loss(model):
            return float((forward(model, X)[0] * V).sum())

        analytic = backward(m, X, loss_grad_on_features=V)
        fd = finite_difference_grad(m, X, loss)
        assert_grad_close(Gradient(analytic.extractor, analytic.classifier), fd)

    def test_zero_upstream_gives_zero_gradient(self):
        m = init_model(2, 4, 2, seed=0)
        g = backward(m, np.zeros((3, 2)), np.zeros((3, 2)))
        for gw, gb in [*g.extractor, g.classifier]:
            assert np.all(gw == 0) and np.all(gb == 0)

    def test_mean_reduction_invariant_to_duplication(self):
        rng = np.random.default_rng(3)
        m = init_model(2, 4, 2, seed=3)
        X = rng.normal(size=(5, 2))
        U = rng.normal(size=(5, 2))
        g1 = backward(m, X, U / 5)
        g2 = backward(m, np.vstack([X, X]), np.vstack([U, U]) / 10)
        for (a, ab), (b, bb) in zip(
            [*g1.extractor, g1.classifier], [*g2.extractor, g2.classifier]
        ):
            assert np.allclose(a, b, atol=1e-12)
            assert np.allclose(ab, bb, atol=1e-12)


class TestSgd:
    def test_plain_step(self):
        m = init_model(2, 4, 2, seed=1)
        before = m.extractor[0].weight.copy()
        g = zeros_gradient(m)
        g.extractor[0][0][...] = 1.0
        state = init_optimizer(m, 0.1, 0.0)
        sgd_step(m, g, state)
        assert np.allclose(m.extractor[0].weight, before - 0.1, atol=1e-15)
        assert state.step == 1

    def test_zero_grad_fixed_point(self):
        m = init_model(2, 4, 2, seed=1)
        before = m.classifier.weight.copy()
        sgd_step(m, zeros_gradient(m), init_optimizer(m, 0.5, 0.9))
        assert np.array_equal(m.classifier.weight, before)

    def test_momentum_recurrence(self):
        m = init_model(2, 4, 2, seed=1)
        before = m.extractor[0].weight.copy()
        state = init_optimizer(m, 1.0, 0.9)
        g = zeros_gradient(m)
        g.extractor[0][0][...] = 1.0
        sgd_step(m, g, state)
        g2 = zeros_gradient(m)
        g2.extractor[0][0][...] = 1.0
        sgd_step(m, g2, state)
        # v1 = g, v2 = 0.9 g + g -> total displacement g (1 + 1.9)
        assert np.allclose(before - m.extractor[0].weight, 2.9, atol=1e-12)

    def test_nonfinite_gradient_aborts(self):
        m = init_model(2, 4, 2, seed=1)
        g = zeros_gradient(m)
        g.extractor[0][0][0, 0] = np.nan
        with pytest.raises(NumericError):
            sgd_step(m, g, init_optimizer(m, 0.1, 0.0))


class TestSerialization:
    def test_roundtrip_bit_exact(self, tmp_path):
        m = init_model(3, 7, 4, depth=3, seed=9, domain_id="dom-x")
        path = tmp_path / "m.txt"
        save_model(m, path)
        back = load_model(path)
        for la, lb in zip([*m.extractor, m.classifier], [*back.extractor, back.classifier]):
            assert np.array_equal(la.weight, lb.weight)
            assert np.array_equal(la.bias, lb.bias)
            assert la.activation == lb.activation
        assert back.meta["domain_id"] == "dom-x"

    def test_shape_inconsistent_file_rejected(self, tmp_path):
        m = init_model(2, 4, 2, seed=0)
        path = tmp_path / "m.txt"
        save_model(m, path)
        lines = path.read_text().splitlines()
        # corrupt the classifier block header to an incompatible input dim
        idx = max(i for i, ln in enumerate(lines) if ln.startswith("layer "))
        lines[idx] = "layer 2 3 linear"
        path.write_text("\n".join(lines[: idx + 1 + 2 * 3 + 2]) + "\n")
        with pytest.raises(FormatError):
            load_model(path)

    def test_version_mismatch(self, tmp_path):
        path = tmp_path / "m.txt"
        path.write_text("#shiftlab-model v999\n\n")
        with pytest.raises(FormatError):
            load_model(path)
