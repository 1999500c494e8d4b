import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedbias.errors import ConfigError, NumericError, ShapeError
from fedbias.nn import (
    Classifier,
    DenseLayer,
    FeatureExtractor,
    Model,
    MRContext,
    backward,
    cross_entropy,
    forward_features,
    forward_logits,
    init_model,
    numeric_gradient,
    sgd_update,
)

from helpers import gradient_pair, random_case, within_tolerance


def single(weight, bias, act):
    return FeatureExtractor([DenseLayer(weight, bias, act)])


class TestForward:
    def test_identity_layer(self):
        ext = single(np.eye(2), np.zeros(2), "identity")
        np.testing.assert_array_equal(forward_features(ext, [[1.0, 2.0]]), [[1.0, 2.0]])

    def test_relu_layer(self):
        ext = single(np.eye(2), np.zeros(2), "relu")
        np.testing.assert_array_equal(forward_features(ext, [[-1.0, 3.0]]), [[0.0, 3.0]])

    def test_two_layer_hand_evaluation(self):
        # hand-computed: hidden relu([1.1, -0.8, 0.2]) = [1.1, 0, 0.2]; output [1.5, 0.7]
        ext = FeatureExtractor([
            DenseLayer([[1, 2], [-1, 1], [0.5, -3]], [0.1, 0.2, -0.3], "relu"),
            DenseLayer([[1, -1, 2], [0, 1, 1]], [0.0, 0.5], "identity"),
        ])
        np.testing.assert_allclose(forward_features(ext, [[1.0, 0.0]]), [[1.5, 0.7]], rtol=0, atol=1e-15)

    def test_shape_mismatch(self):
        ext = single(np.eye(2), np.zeros(2), "identity")
        with pytest.raises(ShapeError):
            forward_features(ext, [[1.0, 2.0, 3.0]])

    def test_chain_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            FeatureExtractor([DenseLayer(np.eye(2), np.zeros(2)), DenseLayer(np.eye(3), np.zeros(3))])


class TestLogits:
    def test_zero_weight(self):
        clf = Classifier.linear(np.zeros((2, 3)), [1.0, 2.0])
        out = forward_logits(clf, np.random.default_rng(0).normal(size=(4, 3)))
        np.testing.assert_array_equal(out, np.tile([1.0, 2.0], (4, 1)))

    def test_identity(self):
        clf = Classifier.linear(np.eye(2), np.zeros(2))
        np.testing.assert_array_equal(forward_logits(clf, [[3.0, -1.0]]), [[3.0, -1.0]])

    def test_affine_against_loops(self):
        rng = np.random.default_rng(7)
        w, b, z = rng.normal(size=(3, 4)), rng.normal(size=3), rng.normal(size=4)
        expected = [sum(w[r][c] * z[c] for c in range(4)) + b[r] for r in range(3)]
        np.testing.assert_allclose(forward_logits(Classifier.linear(w, b), [z])[0], expected, rtol=1e-14)

    def test_needs_two_classes(self):
        with pytest.raises(ShapeError):
            Classifier.linear(np.ones((1, 2)), [0.0])


class TestCrossEntropy:
    def test_uniform(self):
        assert cross_entropy(np.zeros((3, 4)), [0, 1, 3]) == pytest.approx(math.log(4), abs=1e-12)

    def test_saturated(self):
        assert cross_entropy([[1000.0, -1000.0]], [0]) == pytest.approx(0.0, abs=1e-12)

    def test_closed_form(self):
        assert cross_entropy([[1.0, 2.0]], [1]) == pytest.approx(0.31326168751822286, abs=1e-12)

    def test_label_out_of_range(self):
        with pytest.raises(ConfigError):
            cross_entropy([[0.0, 0.0]], [2])

    def test_non_finite(self):
        with pytest.raises(NumericError):
            cross_entropy([[np.inf, 0.0]], [0])

    @given(st.lists(st.floats(-50, 50), min_size=2, max_size=6), st.integers(0, 5))
    def test_non_negative(self, logits, label):
        label %= len(logits)
        assert cross_entropy([logits], [label]) >= 0.0


class TestBackward:
    @pytest.mark.parametrize("seed", range(10))
    @pytest.mark.parametrize("dbe", [False, True])
    def test_matches_finite_differences(self, seed, dbe):
        model, x, y, prbm, mr = random_case(seed, dbe)
        analytic, numeric = gradient_pair(model, x, y, prbm, mr)
        assert within_tolerance(analytic, numeric).all()

    def test_disabled_dbe_equals_plain(self):
        model, x, y, _, _ = random_case(3, dbe=False)
        plain, plain_loss = backward(model.extractor, model.classifier, x, y)
        k = model.rep_dim
        mr = MRContext(None, np.ones(k), kappa=0.0, momentum=0.5)
        dbe, dbe_loss = backward(model.extractor, model.classifier, x, y, np.zeros(k), mr)
        np.testing.assert_array_equal(plain.flatten(), dbe.flatten())
        assert plain_loss.total == dbe_loss.total

    def test_mr_only_bias_gradient_is_zero(self):
        # linear extractor, classifier weight zero so CE ignores the representation
        ext = single(np.eye(2), np.zeros(2), "identity")
        clf = Classifier.linear(np.zeros((2, 2)), np.zeros(2))
        mr = MRContext(None, np.array([1.0, -1.0]), kappa=1.0, momentum=1.0)
        grads, loss = backward(ext, clf, [[0.5, 0.5], [2.0, 1.0]], [0, 1], np.array([0.3, 0.1]), mr)
        np.testing.assert_array_equal(grads.prbm, [0.0, 0.0])
        assert loss.mr > 0
        assert np.any(grads.extractor[0][0] != 0)

    def test_bias_gradient_is_column_sum_of_representation_gradient(self):
        model, x, y, prbm, mr = random_case(11, dbe=True)
        grads, _ = backward(model.extractor, model.classifier, x, y, prbm, mr)
        # gradient with respect to the classifier input, by finite differences on z itself
        from fedbias.nn import forward_features as ff

        zg = ff(model.extractor, x)

        def ce_of(flat):
            z = flat.reshape(zg.shape) + prbm
            return cross_entropy(forward_logits(model.classifier, z), y)

        dz = numeric_gradient(ce_of, zg.ravel()).reshape(zg.shape)
        np.testing.assert_allclose(grads.prbm, dz.sum(axis=0), rtol=1e-5, atol=1e-8)

    def test_mr_requires_bias(self):
        model, x, y, _, _ = random_case(1, dbe=False)
        mr = MRContext(None, np.zeros(model.rep_dim), 1.0, 1.0)
        with pytest.raises(ConfigError):
            backward(model.extractor, model.classifier, x, y, None, mr)

    def test_non_finite_reports_layer(self):
        ext = single(np.full((2, 2), 1e308), np.zeros(2), "identity")
        clf = Classifier.linear(np.eye(2), np.zeros(2))
        with pytest.raises(NumericError, match="extractor layer 0"):
            backward(ext, clf, [[10.0, 10.0]], [0])

    def test_deterministic(self):
        model, x, y, prbm, mr = random_case(5, dbe=True)
        a, _ = backward(model.extractor, model.classifier, x, y, prbm, mr)
        b, _ = backward(model.extractor, model.classifier, x, y, prbm, mr)
        assert a.flatten(True).tobytes() == b.flatten(True).tobytes()


class TestSGD:
    def _model(self):
        ext = single([[1.0]], [0.0], "identity")
        return Model(ext, Classifier.linear([[1.0], [1.0]], [1.0, 1.0]))

    def _grads(self, model, value):
        from fedbias.nn import GradientSet

        arrays = [np.full_like(a, value) for a in model.arrays()]
        return GradientSet([(arrays[0], arrays[1])], [(arrays[2], arrays[3])])

    def test_zero_gradient(self):
        m = self._model()
        before = m.flatten()
        sgd_update(m, self._grads(m, 0.0), 0.1)
        np.testing.assert_array_equal(m.flatten(), before)

    def test_arithmetic(self):
        m = self._model()
        sgd_update(m, self._grads(m, 0.5), 0.1)
        assert m.classifier.bias[0] == pytest.approx(0.95, abs=1e-15)

    def test_linearity(self):
        a, b = self._model(), self._model()
        sgd_update(a, self._grads(a, 0.2), 0.1)
        sgd_update(a, self._grads(a, 0.3), 0.1)
        sgd_update(b, self._grads(b, 0.5), 0.1)
        np.testing.assert_allclose(a.flatten(), b.flatten(), atol=1e-15)

    def test_bias_updated(self):
        m = self._model()
        g = self._grads(m, 0.0)
        g.prbm = np.array([1.0])
        prbm = np.array([0.0])
        sgd_update(m, g, 0.5, prbm=prbm)
        assert prbm[0] == -0.5

    def test_shape_mismatch(self):
        m = self._model()
        g = self._grads(m, 0.0)
        g.classifier[0] = (np.zeros((3, 1)), np.zeros(3))
        with pytest.raises(ShapeError):
            sgd_update(m, g, 0.1)


class TestNumericGradient:
    def test_quadratic(self):
        g = numeric_gradient(lambda p: float(p[0] ** 2), np.array([3.0]), 1e-5)
        assert g[0] == pytest.approx(6.0, abs=1e-6)

    def test_constant(self):
        np.testing.assert_array_equal(numeric_gradient(lambda p: 4.2, np.zeros(3)), np.zeros(3))

    def test_rejects_bad_step(self):
        with pytest.raises(ConfigError):
            numeric_gradient(lambda p: 0.0, np.zeros(1), 0.0)

    def test_non_finite(self):
        with pytest.raises(NumericError):
            numeric_gradient(lambda p: float("nan"), np.zeros(1))


class TestInit:
    def test_bounds_and_split(self):
        m = init_model(5, (8, 4), 3, np.random.default_rng(0), split=1)
        assert m.rep_dim == 8
        assert len(m.classifier.layers) == 2
        assert np.all(np.abs(m.extractor.layers[0].weight) <= 1 / math.sqrt(5))
        assert init_model(5, (8, 4), 3, np.random.default_rng(0)).rep_dim == 4

    def test_seeded(self):
        a = init_model(3, (4,), 2, np.random.default_rng(9))
        b = init_model(3, (4,), 2, np.random.default_rng(9))
        assert a.digest() == b.digest()

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000))
    def test_flatten_roundtrip(self, seed):
        m = init_model(3, (4, 2), 3, np.random.default_rng(seed))
        flat = m.flatten()
        other = init_model(3, (4, 2), 3, np.random.default_rng(seed + 1))
        other.load_flat(flat)
        np.testing.assert_array_equal(other.flatten(), flat)
