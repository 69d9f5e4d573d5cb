import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from restt.features import (ClampCounter, EmbeddedSample, MinMaxScaler, avg_pool_2x2, flatten_row_major,
                            image_features, normalize_pixels, tabular_features, to_samples, trig_embed)

H = np.sqrt(2) / 2


def test_trig_examples():
    np.testing.assert_allclose(trig_embed([0.0]), [1.0, 0.0], atol=1e-15)
    np.testing.assert_allclose(trig_embed([0.5]), [H, H])
    np.testing.assert_allclose(trig_embed([0.0, 1.0]), np.array([1, 0, 0, 1]) / np.sqrt(2), atol=1e-15)
    with pytest.raises(ValueError):
        trig_embed([])


def test_trig_clamps_and_counts():
    c = ClampCounter()
    out = trig_embed([-0.5, 1.5, 0.2], counter=c)
    assert c.count == 2
    np.testing.assert_allclose(out, trig_embed([0.0, 1.0, 0.2]))


@given(arrays(np.float64, st.integers(1, 20), elements=st.floats(0, 1)))
def test_trig_unit_norm(x):
    assert np.linalg.norm(trig_embed(x)) == pytest.approx(1.0, abs=1e-12)


@given(st.floats(0, 1), st.floats(0, 1), st.integers(1, 6))
def test_trig_lipschitz(a, b, m):
    x, y = np.full(m, 0.3), np.full(m, 0.3)
    x[0], y[0] = a, b
    bound = np.pi / (2 * np.sqrt(m)) * abs(a - b) + 1e-12
    assert np.max(np.abs(trig_embed(x) - trig_embed(y))) <= bound


def test_pooling():
    np.testing.assert_allclose(avg_pool_2x2(np.full((28, 28), 3.5)), np.full((14, 14), 3.5))
    assert avg_pool_2x2([[0, 0], [4, 8]])[0, 0] == 3.0
    checker = np.indices((28, 28)).sum(axis=0) % 2
    np.testing.assert_allclose(avg_pool_2x2(checker), 0.5)
    with pytest.raises(ValueError, match="odd"):
        avg_pool_2x2(np.zeros((27, 27)))
    with pytest.raises(ValueError, match="square"):
        avg_pool_2x2(np.zeros((4, 6)))
    assert avg_pool_2x2(np.zeros((5, 4, 4))).shape == (5, 2, 2)


def test_flatten():
    np.testing.assert_array_equal(flatten_row_major([[1, 2], [3, 4]]), [1, 2, 3, 4])
    np.testing.assert_array_equal(flatten_row_major([[5, 6, 7]]), [5, 6, 7])
    img = np.arange(12).reshape(3, 4)
    np.testing.assert_array_equal(flatten_row_major(img).reshape(3, 4), img)


def test_normalize():
    np.testing.assert_allclose(normalize_pixels(np.array([0, 255, 51], dtype=np.uint8)), [0.0, 1.0, 0.2])
    x = np.array([0.1, 0.9])
    np.testing.assert_array_equal(normalize_pixels(x, already_unit=True), x)
    with pytest.raises(ValueError, match="0..255"):
        normalize_pixels(np.array([256]))
    with pytest.raises(ValueError):
        normalize_pixels(np.array([-1]))
    with pytest.raises(ValueError):
        normalize_pixels(np.array([1.5]), already_unit=True)


def test_image_pipeline_shape_and_norm(rng):
    imgs = rng.integers(0, 256, size=(3, 28, 28)).astype(np.uint8)
    x = image_features(imgs)
    assert x.shape == (3, 196, 2)
    np.testing.assert_allclose(np.sum(x ** 2, axis=-1), 1.0)
    # first node is the mean of the top-left block
    v = imgs[0, :2, :2].mean() / 255
    np.testing.assert_allclose(x[0, 0], [np.cos(np.pi * v / 2), np.sin(np.pi * v / 2)])


def test_scaler_fit_on_train_and_clamp_test():
    train = np.array([[0.0, 10.0], [2.0, 20.0], [4.0, 30.0]])
    s = MinMaxScaler().fit(train)
    np.testing.assert_allclose(s.transform(train), [[0, 0], [0.5, 0.5], [1, 1]])
    out = s.transform(np.array([[6.0, 0.0]]))
    np.testing.assert_allclose(out, [[1.0, 0.0]])
    assert s.clamped.count == 2
    nodes = tabular_features(train, s, "trig")
    assert nodes.shape == (3, 2, 2)
    assert tabular_features(train, s, "raw").shape == (3, 2, 1)
    with pytest.raises(ValueError):
        tabular_features(train, s, "fourier")


def test_constant_column_maps_to_zero():
    s = MinMaxScaler().fit(np.array([[1.0], [1.0]]))
    np.testing.assert_allclose(s.transform(np.array([[1.0]])), [[0.0]])


def test_samples():
    nodes = image_features(np.zeros((2, 4, 4), dtype=np.uint8))
    samples = to_samples(nodes, "trig")
    assert len(samples) == 2 and samples[0].input_dims == (2, 2, 2, 2)
    with pytest.raises(ValueError):
        EmbeddedSample((np.ones(2),), "learned")
