import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from patchlock.errors import BadMagic, KeyMismatch, ShapeMismatch, TruncatedFile
from patchlock.image import encrypt_image, normalize, segment_blocks
from patchlock.keys import FlipKey, KeyPair, PermutationKey, identity_keypair, keypair_new
from patchlock.model import (
    encrypt_model, load_model, params_equal, permute_rows, random_params, save_model,
    signflip_rows,
)

seeds = st.integers(0, 2**64 - 1)


@pytest.fixture(scope="module")
def small():
    return random_params(3, 8, 8, 2, 5, 2, 3, 4, seed=3)


def test_permute_rows_example():
    E = np.array([[1, 2], [3, 4]], np.float32)
    assert permute_rows(E, PermutationKey([1, 0])).tolist() == [[3, 4], [1, 2]]
    assert np.array_equal(permute_rows(E, PermutationKey([0, 1])), E)


def test_signflip_rows_example():
    E = np.array([[1, 2], [3, 4]], np.float32)
    assert signflip_rows(E, FlipKey([1, 0])).tolist() == [[-1, -2], [3, 4]]
    assert np.array_equal(signflip_rows(E, FlipKey([0, 0])), E)


def test_row_transforms_key_mismatch():
    E = np.zeros((4, 2), np.float32)
    with pytest.raises(KeyMismatch):
        permute_rows(E, PermutationKey(np.arange(6)))
    with pytest.raises(KeyMismatch):
        signflip_rows(E, FlipKey([0, 1]))


@given(seeds)
def test_signflip_twice_bit_exact(seed):
    E = np.random.default_rng(seed % 2**32).standard_normal((48, 7)).astype(np.float32)
    r = keypair_new(0, seed, 4, 3).flip
    assert signflip_rows(signflip_rows(E, r), r).tobytes() == E.tobytes()


@given(seeds)
def test_permute_then_inverse_bit_exact(seed):
    E = np.random.default_rng(seed % 2**32).standard_normal((48, 7)).astype(np.float32)
    v = keypair_new(seed, 0, 4, 3).perm
    assert permute_rows(permute_rows(E, v), v.inverse()).tobytes() == E.tobytes()


@given(seeds)
def test_shuffled_vector_times_permuted_matrix(seed):
    # brute-force float64 dot products
    rng = np.random.default_rng(seed % 2**32)
    x = rng.standard_normal(48)
    E = rng.standard_normal((48, 6)).astype(np.float32)
    v = keypair_new(seed, 1, 4, 3).perm.v
    Ep = permute_rows(E, PermutationKey(v))
    xs = x[v]
    for o in range(6):
        lhs = sum(float(xs[k]) * float(Ep[k, o]) for k in range(48))
        rhs = sum(float(x[k]) * float(E[k, o]) for k in range(48))
        assert abs(lhs - rhs) <= 1e-6


@given(seeds, seeds, st.integers(0, 2**32 - 1))
def test_embedding_equivalence(s1, s2, img_seed):
    """Per patch: enc(x) @ enc(E) == x @ E, in float64, for normalized patches."""
    rng = np.random.default_rng(img_seed)
    img = rng.integers(0, 256, (3, 8, 8), dtype=np.uint8)
    E = rng.standard_normal((48, 9)).astype(np.float32)
    keys = keypair_new(s1, s2, 4, 3)
    Ek = signflip_rows(permute_rows(E, keys.perm), keys.flip).astype(np.float64)
    plain = normalize(segment_blocks(img, 4)).astype(np.float64).reshape(-1, 48)
    enc = normalize(segment_blocks(encrypt_image(img, keys, 4), 4)).astype(np.float64).reshape(-1, 48)
    for p in range(plain.shape[0]):
        for o in range(9):
            lhs = sum(enc[p, k] * Ek[k, o] for k in range(48))
            rhs = sum(plain[p, k] * float(E[k, o]) for k in range(48))
            assert abs(lhs - rhs) <= 1e-6


def test_encrypt_model_identity_keys(small):
    keys = KeyPair(PermutationKey(np.arange(small.p_b)), FlipKey(np.zeros(small.p_b)))
    assert params_equal(encrypt_model(small, keys), small)


def test_encrypt_model_only_touches_embedding(small):
    keys = keypair_new(1, 2, 2, 3)
    enc = encrypt_model(small, keys)
    a, b = save_model(small), save_model(enc)
    start = struct.calcsize("<4s8I")
    end = start + 4 * small.p_b * small.d
    assert a[:start] == b[:start]
    assert a[end:] == b[end:]
    assert a[start:end] != b[start:end]
    assert not params_equal(enc, small)


def test_encrypt_model_twice_is_not_identity(small):
    keys = keypair_new(1, 2, 2, 3)
    twice = encrypt_model(encrypt_model(small, keys), keys)
    assert not np.array_equal(twice.embed, small.embed)


def test_encrypt_model_wrong_block_size(small):
    with pytest.raises(KeyMismatch):
        encrypt_model(small, keypair_new(1, 2, 4, 3))


# --- CMX1 ----------------------------------------------------------------------

@given(st.integers(0, 2**32 - 1), st.integers(0, 3))
def test_model_roundtrip(seed, L):
    params = random_params(2, 4, 6, 2, 3, L, 3, 2, seed=seed)
    loaded = load_model(save_model(params))
    assert save_model(loaded) == save_model(params)
    assert loaded.dims == params.dims
    assert loaded.embed.tobytes() == params.embed.tobytes()


def test_model_file_layout(small):
    buf = save_model(small)
    assert buf[:4] == b"CMX1"
    assert struct.unpack_from("<8I", buf, 4) == (3, 8, 8, 2, 5, 2, 3, 4)
    d, k, L, p_b, classes = 5, 3, 2, 12, 4
    n_floats = p_b * d + d + 4 * d + L * (d * k * k + d + 4 * d + d * d + d + 4 * d) + classes * d + classes
    assert len(buf) == 36 + 4 * n_floats
    first_row = np.frombuffer(buf, "<f4", d, 36)
    assert np.array_equal(first_row, small.embed[0])
    head_bias = np.frombuffer(buf, "<f4", classes, len(buf) - 4 * classes)
    assert np.array_equal(head_bias, small.head_bias)
    # first layer's pointwise weight is output-major
    off = 36 + 4 * (p_b * d + 5 * d + d * k * k + 5 * d)
    assert np.array_equal(np.frombuffer(buf, "<f4", d * d, off).reshape(d, d), small.layers[0].pw_weight)


def test_model_bad_magic(small):
    buf = bytearray(save_model(small))
    buf[:4] = b"CMX2"
    with pytest.raises(BadMagic):
        load_model(bytes(buf))


@pytest.mark.parametrize("cut, field", [(20, "header"), (40, "embed"), (1, "head_bias")])
def test_model_truncated_names_field(small, cut, field):
    buf = save_model(small)
    data = buf[:cut] if cut > 1 else buf[:-cut]
    with pytest.raises(TruncatedFile, match=field):
        load_model(data)


def test_model_trailing_bytes(small):
    with pytest.raises(ShapeMismatch):
        load_model(save_model(small) + b"\0\0\0\0")


def test_model_header_patch_not_dividing(small):
    buf = bytearray(save_model(small))
    struct.pack_into("<I", buf, 16, 3)  # P = 3 does not divide 8
    with pytest.raises(ShapeMismatch):
        load_model(bytes(buf))


def test_params_validate_shapes(small):
    import dataclasses
    with pytest.raises(ShapeMismatch):
        dataclasses.replace(small, embed=np.zeros((10, 5)))


def test_identity_keypair_encrypt_only_flips_signs(small):
    enc = encrypt_model(small, identity_keypair(small.p_b))
    assert np.array_equal(np.abs(enc.embed), np.abs(small.embed))
