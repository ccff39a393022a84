"""Block-wise image encryption and lossless image I/O.

Images are ``uint8`` arrays of shape ``(C, H, W)``. A block image has shape
``(H_b, W_b, p_b)``; inside a block, pixel ``(c, i, j)`` sits at flat index
``k = c*M*M + i*M + j``. The patch-embedding rows of the model use the same
order, which is what lets the model transform mirror the image transform.
"""
from __future__ import annotations

import re

import numpy as np

from .errors import BadImage, BadShape, KeyMismatch, NotDivisible
from .keys import FlipKey, KeyPair, PermutationKey


def _check_image(img) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.dtype != np.uint8:
        raise BadShape(f"expected uint8 (C, H, W) image, got {img.dtype} {img.shape}")
    return img


def segment_blocks(img: np.ndarray, M: int) -> np.ndarray:
    """Split ``img`` into ``M x M`` blocks, each flattened channel-major."""
    img = _check_image(img)
    C, H, W = img.shape
    if M < 1 or H % M or W % M:
        raise NotDivisible(f"block size {M} does not divide image {H}x{W}")
    Hb, Wb = H // M, W // M
    return (
        img.reshape(C, Hb, M, Wb, M)
        .transpose(1, 3, 0, 2, 4)
        .reshape(Hb, Wb, C * M * M)
        .copy()
    )


def integrate_blocks(blocks: np.ndarray, M: int) -> np.ndarray:
    """Inverse of :func:`segment_blocks`."""
    blocks = np.asarray(blocks)
    if blocks.ndim != 3:
        raise BadShape(f"expected (H_b, W_b, p_b) block image, got shape {blocks.shape}")
    Hb, Wb, p_b = blocks.shape
    if M < 1 or p_b % (M * M) or p_b == 0:
        raise BadShape(f"p_b={p_b} is not of the form {M}*{M}*C")
    C = p_b // (M * M)
    return (
        blocks.reshape(Hb, Wb, C, M, M)
        .transpose(2, 0, 3, 1, 4)
        .reshape(C, Hb * M, Wb * M)
        .copy()
    )


def _vector(key, attr: str, p_b: int) -> np.ndarray:
    vec = np.asarray(getattr(key, attr, key))
    if vec.shape != (p_b,):
        raise KeyMismatch(f"key length {vec.size} != p_b={p_b}")
    return vec


def shuffle_pixels(blocks: np.ndarray, key: PermutationKey) -> np.ndarray:
    """``out[..., k] = blocks[..., v[k]]`` in every block."""
    v = _vector(key, "v", blocks.shape[-1])
    return blocks[..., v]


def unshuffle_pixels(blocks: np.ndarray, key: PermutationKey) -> np.ndarray:
    v = _vector(key, "v", blocks.shape[-1])
    return blocks[..., np.argsort(v, kind="stable")]


def flip_pixels(blocks: np.ndarray, key: FlipKey) -> np.ndarray:
    """Negative-positive transform: XOR with 255 wherever ``r[k] == 1``."""
    r = _vector(key, "r", blocks.shape[-1])
    return blocks ^ (r.astype(np.uint8) * np.uint8(255))


def _check_keys(img: np.ndarray, keys: KeyPair, M: int) -> None:
    if keys.p_b != M * M * img.shape[0]:
        raise KeyMismatch(
            f"key p_b={keys.p_b} != M*M*C = {M}*{M}*{img.shape[0]}"
        )


def encrypt_image(img: np.ndarray, keys: KeyPair, M: int) -> np.ndarray:
    """Segment, shuffle, flip, integrate."""
    img = _check_image(img)
    _check_keys(img, keys, M)
    blocks = segment_blocks(img, M)
    return integrate_blocks(flip_pixels(shuffle_pixels(blocks, keys.perm), keys.flip), M)


def decrypt_image(img: np.ndarray, keys: KeyPair, M: int) -> np.ndarray:
    img = _check_image(img)
    _check_keys(img, keys, M)
    blocks = segment_blocks(img, M)
    return integrate_blocks(unshuffle_pixels(flip_pixels(blocks, keys.flip), keys.perm), M)


def encrypt_images(imgs: np.ndarray, keys: KeyPair, M: int) -> np.ndarray:
    """Batched :func:`encrypt_image` over a ``(B, C, H, W)`` stack."""
    imgs = np.asarray(imgs)
    B, C, H, W = imgs.shape
    if B == 0:
        return imgs.copy()
    _check_keys(imgs[0], keys, M)
    if H % M or W % M:
        raise NotDivisible(f"block size {M} does not divide image {H}x{W}")
    Hb, Wb = H // M, W // M
    blocks = imgs.reshape(B, C, Hb, M, Wb, M).transpose(0, 2, 4, 1, 3, 5).reshape(B, Hb, Wb, -1)
    blocks = flip_pixels(shuffle_pixels(blocks, keys.perm), keys.flip)
    return blocks.reshape(B, Hb, Wb, C, M, M).transpose(0, 3, 1, 4, 2, 5).reshape(B, C, H, W)


def normalize(img: np.ndarray) -> np.ndarray:
    """Map bytes to ``[-1, 1]`` float32: ``2 * (u / 255) - 1``.

    Evaluated as ``(2u - 255) / 255`` so ``normalize(255 - u) == -normalize(u)``
    holds exactly: the numerators are exact negatives and the division is
    correctly rounded.
    """
    u = np.asarray(img)
    if u.dtype != np.uint8:
        raise BadShape(f"normalize expects uint8 input, got {u.dtype}")
    num = 2 * u.astype(np.int32) - 255
    return num.astype(np.float32) / np.float32(255.0)


# --- PPM / PGM ---------------------------------------------------------------

_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")


def read_pnm(buf: bytes) -> np.ndarray:
    """Parse binary PPM (P6, 3 channels) or PGM (P5, 1 channel), maxval 255."""
    pos = 0
    fields = []
    for _ in range(4):
        m = _TOKEN.match(buf, pos)
        if m is None:
            raise BadImage("truncated PNM header")
        fields.append(m.group(1))
        pos = m.end()
    magic, w, h, maxval = fields
    if magic not in (b"P6", b"P5"):
        raise BadImage(f"unsupported PNM magic {magic!r}; need P6 or P5")
    try:
        W, H, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise BadImage(f"malformed PNM header: {exc}") from None
    if maxval != 255:
        raise BadImage(f"maxval {maxval} unsupported; need 255")
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise BadImage("missing whitespace after PNM header")
    pos += 1
    C = 3 if magic == b"P6" else 1
    n = C * H * W
    body = buf[pos:pos + n]
    if len(body) != n:
        raise BadImage(f"PNM body truncated: expected {n} bytes, got {len(body)}")
    # file order is row-major interleaved (H, W, C)
    return np.frombuffer(body, dtype=np.uint8).reshape(H, W, C).transpose(2, 0, 1).copy()


def write_pnm(img: np.ndarray) -> bytes:
    img = _check_image(img)
    C, H, W = img.shape
    if C == 3:
        magic = b"P6"
    elif C == 1:
        magic = b"P5"
    else:
        raise BadShape(f"PNM holds 1 or 3 channels, image has {C}")
    header = b"%s\n%d %d\n255\n" % (magic, W, H)
    return header + np.ascontiguousarray(img.transpose(1, 2, 0)).tobytes()


def load_image(path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_pnm(f.read())
