import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hecnn.convlower import ConvShape, FilterBank, conv_to_matrix
from hecnn.modelspec import LayerKind, LayerSpec, ModelSpec, load_model, random_input, random_weights
from hecnn.refmodel import ref_avgpool, ref_conv, ref_dense, ref_forward, ref_square
from hecnn.slotvec import ShapeError


def test_ref_conv_ones():
    out = ref_conv(np.array([[[1.0, 2.0], [3.0, 4.0]]]), FilterBank(np.ones((1, 1, 2, 2)), [0.0]))
    assert out.shape == (1, 1, 1) and out[0, 0, 0] == 10


def test_ref_conv_delta_filter_crops():
    x = np.random.default_rng(0).normal(size=(1, 5, 5))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 2] = 1.0
    out = ref_conv(x, FilterBank(w, [0.0]))
    assert np.array_equal(out[0], x[0, 1:4, 2:5])


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(2, 7), st.integers(1, 3), st.integers(1, 2),
       st.integers(0, 2**31))
def test_ref_conv_matches_matrix(c_in, c_out, d, k, s, seed):
    k = min(k, d)
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(c_in, d, d))
    bank = FilterBank(rng.normal(size=(c_out, c_in, k, k)), rng.normal(size=c_out))
    A, b = conv_to_matrix(ConvShape(d, c_in, c_out, k, s), bank)
    assert np.allclose(ref_conv(x, bank, s).ravel(), A @ x.ravel() + b)


def test_ref_avgpool_square_dense():
    assert ref_avgpool(np.array([[[1.0, 2.0], [3.0, 4.0]]]), 2, 2)[0, 0, 0] == 2.5
    assert not ref_square(np.zeros((2, 3, 3))).any()
    v = np.random.default_rng(1).normal(size=6)
    assert np.array_equal(ref_dense(v, np.eye(6), np.zeros(6)), v)


def test_ref_dense_shape_check():
    with pytest.raises(ShapeError):
        ref_dense(np.ones(3), np.ones((2, 4)), np.zeros(2))


def test_linearity():
    rng = np.random.default_rng(2)
    bank = FilterBank(rng.normal(size=(2, 2, 3, 3)), np.zeros(2))
    x, y = rng.normal(size=(2, 2, 7, 7))
    a, b = 1.7, -0.4
    assert np.allclose(ref_conv(a * x + b * y, bank), a * ref_conv(x, bank) + b * ref_conv(y, bank), atol=1e-10)
    assert np.allclose(ref_avgpool(a * x + b * y, 2, 1), a * ref_avgpool(x, 2, 1) + b * ref_avgpool(y, 2, 1),
                       atol=1e-10)
    W = rng.normal(size=(4, 98))
    assert np.allclose(ref_dense(a * x + b * y, W, np.zeros(4)),
                       a * ref_dense(x, W, np.zeros(4)) + b * ref_dense(y, W, np.zeros(4)), atol=1e-10)


def test_forward_single_square_layer():
    model = ModelSpec("sq", (1, 3, 3), 16, [LayerSpec(LayerKind.SQUARE, "Square1")])
    x = np.random.default_rng(3).normal(size=(1, 3, 3))
    assert np.array_equal(ref_forward(model, {}, x), (x * x).ravel())


def test_forward_zero_input_zero_bias():
    model = load_model("me")
    weights = {k: (w, np.zeros_like(b)) for k, (w, b) in random_weights(model, 0).items()}
    assert not ref_forward(model, weights, np.zeros(model.input_shape)).any()


def test_forward_is_deterministic():
    model = load_model("cryptonets-hs")
    w, x = random_weights(model, 5), random_input(model, 5)
    assert np.array_equal(ref_forward(model, w, x), ref_forward(model, w, x))


def test_forward_rejects_wrong_input_shape():
    model = load_model("me")
    with pytest.raises(ShapeError):
        ref_forward(model, random_weights(model, 0), np.zeros((1, 28, 28)))
