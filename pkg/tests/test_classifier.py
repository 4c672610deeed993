import json
import math

import numpy as np
import pytest

from advstream.classifier import (
    LinearClassifier,
    LinearModel,
    ShapeMismatchError,
    load_linear_model,
    save_linear_model,
)
from advstream.imaging import Image
from conftest import make_image, make_linear


def tiny_model(weights, bias, labels=None, h=1, w=1, c=1):
    labels = labels or tuple(f"c{i}" for i in range(len(bias)))
    return LinearClassifier(
        LinearModel(labels, h, w, c, np.asarray(weights, float), np.asarray(bias, float))
    )


class TestSoftmax:
    def test_zero_model_is_uniform(self):
        clf = tiny_model(np.zeros((4, 1)), np.zeros(4))
        sm = clf.softmax_of(Image.from_flat(1, 1, 1, [123]))
        assert np.allclose(sm.probs, 0.25)

    def test_bias_only_closed_form(self):
        clf = tiny_model(np.zeros((2, 1)), [1.0, 0.0])
        sm = clf.softmax_of(Image.from_flat(1, 1, 1, [0]))
        e = math.e
        assert sm.probs[0] == pytest.approx(e / (e + 1), abs=1e-12)
        assert sm.probs[1] == pytest.approx(1 / (e + 1), abs=1e-12)

    def test_sums_to_one(self, small_clf):
        img = make_image(4, 4, 3, seed=1)
        assert abs(small_clf.softmax_of(img).probs.sum() - 1.0) <= 1e-9

    def test_logit_shift_invariance(self):
        img = make_image(4, 4, 3, seed=2)
        a = make_linear(seed=3)
        shifted = LinearClassifier(
            LinearModel(a.model.labels, 4, 4, 3, a.model.weights, a.model.bias + 17.0)
        )
        pa = a.softmax_of(img).probs
        pb = shifted.softmax_of(img).probs
        assert np.allclose(pa, pb, atol=1e-12)

    def test_shape_mismatch(self, small_clf):
        with pytest.raises(ShapeMismatchError):
            small_clf.softmax_of(make_image(3, 3, 3))


class TestFeatures:
    def test_two_layer_contract(self):
        clf = tiny_model([[2.0]], [0.0])
        fs = clf.features_of(Image.from_flat(1, 1, 1, [255]))
        assert np.allclose(fs.layers[0], [1.0])
        assert np.allclose(fs.layers[1], [2.0])

    def test_layer_dims(self, small_clf):
        fs = small_clf.features_of(make_image(4, 4, 3, seed=4))
        assert fs.dims() == small_clf.layer_dims == (48, 4)

    def test_logit_layer_renormalizes_to_softmax(self, small_clf):
        img = make_image(4, 4, 3, seed=5)
        z = small_clf.features_of(img).layers[1]
        e = np.exp(z - z.max())
        assert np.allclose(e / e.sum(), small_clf.softmax_of(img).probs, atol=1e-12)

    def test_deterministic(self, small_clf):
        img = make_image(4, 4, 3, seed=6)
        a = small_clf.features_of(img)
        b = small_clf.features_of(img)
        assert all(np.array_equal(x, y) for x, y in zip(a.layers, b.layers))


class TestGrad:
    def test_zero_at_the_mean(self):
        clf = tiny_model([[1.0]], [0.0])
        img = Image.from_flat(1, 1, 1, [255])
        g = clf.grad_mahalanobis(img, 0, [1.0], [[1.0]])
        assert np.allclose(g, 0.0)

    def test_one_dimensional_hand_value(self):
        clf = tiny_model([[1.0]], [0.0])
        img = Image.from_flat(1, 1, 1, [127])  # x = 127/255 ~ 0.498
        g = clf.grad_mahalanobis(img, 0, [0.0], [[1.0]])
        assert g[0] == pytest.approx(2 * 127 / 255)

    @pytest.mark.parametrize("layer", [0, 1])
    def test_matches_central_finite_differences(self, layer):
        clf = make_linear(height=2, width=2, channels=1, seed=7)
        img = make_image(2, 2, 1, seed=8)
        dim = clf.layer_dims[layer]
        rng = np.random.default_rng(9)
        mean = rng.normal(size=dim)
        a = rng.normal(size=(dim, dim))
        inv_cov = a @ a.T + np.eye(dim)

        def dist(x):
            f = clf.features_of_normalized(x).layers[layer]
            return (f - mean) @ inv_cov @ (f - mean)

        x0 = img.data / 255.0
        analytic = clf.grad_mahalanobis(img, layer, mean, inv_cov)
        step = 1e-4
        for i in range(x0.size):
            xp, xm = x0.copy(), x0.copy()
            xp[i] += step
            xm[i] -= step
            fd = (dist(xp) - dist(xm)) / (2 * step)
            assert abs(analytic[i] - fd) <= 1e-5


class TestModelFile:
    def test_roundtrip(self, tmp_path):
        clf = make_linear(seed=10)
        path = tmp_path / "model.json"
        save_linear_model(clf.model, path)
        back = load_linear_model(path)
        assert back.labels == clf.model.labels
        assert np.array_equal(back.weights, clf.model.weights)
        assert np.array_equal(back.bias, clf.model.bias)

    def test_missing_field(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"labels": ["a"]}))
        with pytest.raises(Exception):
            load_linear_model(path)

    def test_fingerprint_tracks_topology(self):
        a = make_linear(seed=1)
        b = make_linear(seed=2)  # same topology, different weights
        c = make_linear(labels=("a", "b"), seed=1)
        assert a.fingerprint() == b.fingerprint()
        assert a.fingerprint() != c.fingerprint()
