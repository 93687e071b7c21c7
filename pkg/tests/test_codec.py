import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from localedit.codec import Codec, decode, encode

POOL = Codec("avgpool", 2)


def test_identity_roundtrip():
    x = np.random.default_rng(0).random((6, 4, 3))
    c = Codec()
    assert np.array_equal(encode(c, x), x)
    assert np.array_equal(decode(c, x), x)
    assert np.array_equal(c.decode(c.encode(x)), x)


def test_avgpool_block_mean():
    block = np.array([[0.0, 0.0], [1.0, 1.0]])[..., None]
    assert POOL.encode(block)[0, 0, 0] == 0.5


def test_avgpool_constant():
    x = np.full((8, 6, 3), 0.3)
    z = POOL.encode(x)
    assert z.shape == (4, 3, 3)
    assert np.allclose(z, 0.3)


def test_nearest_decode_block():
    z = np.array([[[0.7, 0.1, 0.2]]])
    assert np.array_equal(POOL.decode(z), np.broadcast_to(z, (2, 2, 3)))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 2, 3), elements=st.floats(-5, 5)))
def test_avgpool_encode_decode_identity(z):
    assert np.array_equal(POOL.encode(POOL.decode(z)), z)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (4, 6, 3), elements=st.floats(-5, 5)))
def test_avgpool_projection_idempotent(x):
    p = POOL.decode(POOL.encode(x))
    assert np.allclose(POOL.decode(POOL.encode(p)), p, atol=1e-12)


def test_indivisible_and_bad_kind():
    with pytest.raises(ValueError):
        POOL.encode(np.zeros((5, 4, 3)))
    with pytest.raises(ValueError):
        Codec("vae", 8)
    with pytest.raises(ValueError):
        Codec("identity", 2)
    assert POOL.latent_shape(64, 32) == (32, 16)


def test_two_dimensional_input():
    m = np.arange(16, dtype=float).reshape(4, 4)
    assert POOL.encode(m).shape == (2, 2)
