from __future__ import annotations

import numpy as np
import pytest

from bridge3d.codec import PatchCodec, orthonormal_matrix
from bridge3d.errors import DimensionError


def test_round_trip_is_exact(rng_np):
    codec = PatchCodec(patch=4)
    image = rng_np.random((2, 32, 32))
    latent = codec.encode(image)
    assert latent.shape == (64, 32)
    assert latent.grid == (8, 8)
    np.testing.assert_allclose(codec.decode(latent), image, atol=1e-12)


def test_non_square_grid(rng_np):
    codec = PatchCodec(patch=2)
    image = rng_np.random((2, 4, 8))
    latent = codec.encode(image)
    np.testing.assert_allclose(codec.decode(latent.tokens, latent.grid), image, atol=1e-12)


def test_energy_is_preserved(rng_np):
    q = orthonormal_matrix(32, 20240611)
    x = rng_np.normal(size=(10, 32))
    np.testing.assert_allclose(np.linalg.norm(x @ q, axis=1), np.linalg.norm(x, axis=1), atol=1e-5)
    np.testing.assert_allclose(q.T @ q, np.eye(32), atol=1e-12)


def test_zero_image_gives_zero_tokens():
    codec = PatchCodec(patch=4)
    assert not codec.encode_tokens(np.zeros((2, 16, 16))).any()


def test_one_hot_token_decodes_to_one_patch():
    codec = PatchCodec(patch=4)
    tokens = np.zeros((16, codec.width))
    tokens[5, 3] = 1.0
    image = codec.decode(tokens)
    nonzero = np.argwhere(np.abs(image) > 1e-12)
    rows, cols = nonzero[:, 1] // 4, nonzero[:, 2] // 4
    assert set(zip(rows.tolist(), cols.tolist())) == {(1, 1)}


def test_seed_changes_the_basis():
    a = PatchCodec(patch=2, seed=1).encode_tokens(np.ones((2, 4, 4)))
    b = PatchCodec(patch=2, seed=2).encode_tokens(np.ones((2, 4, 4)))
    assert not np.allclose(a, b)


def test_shape_errors():
    codec = PatchCodec(patch=4)
    with pytest.raises(DimensionError):
        codec.encode(np.zeros((2, 10, 16)))
    with pytest.raises(DimensionError):
        codec.encode(np.zeros((3, 16, 16)))
    with pytest.raises(DimensionError):
        codec.decode(np.zeros((15, codec.width)), grid=(4, 4))
