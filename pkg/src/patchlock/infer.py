"""Forward-only ConvMixer inference.

Every reduction (patch embedding, depthwise and pointwise convolutions,
pooling, head) accumulates in float64 in ascending index order and rounds
the result to float32. Kernels are parallel over outputs only, so results
do not depend on the thread count.
"""
from __future__ import annotations

import os

import numba
import numpy as np

from .errors import EvenKernel, ShapeMismatch
from .image import normalize
from .model import BatchNormParams, ConvMixerParams, MixerLayer, random_params

_GELU_C = np.sqrt(2.0 / np.pi)

if "NUMBA_THREADING_LAYER" not in os.environ and "NUMBA_THREADING_LAYER_PRIORITY" not in os.environ:
    numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]


def set_threads(n: int | None = None) -> int:
    """Cap kernel parallelism; defaults to ``$PATCHLOCK_THREADS`` if set."""
    if n is None:
        env = os.environ.get("PATCHLOCK_THREADS")
        if not env:
            return numba.get_num_threads()
        n = int(env)
        if n < 1:
            raise ValueError(f"PATCHLOCK_THREADS must be a positive integer, got {env!r}")
    n = min(n, numba.config.NUMBA_NUM_THREADS)
    numba.set_num_threads(n)
    return n


# --- kernels -------------------------------------------------------------------

@numba.njit(parallel=True, cache=True)
def _embed_kernel(patches, E, bias, out):
    # patches (B, N, p) f32; E (p, d) f64; out (B, d, N) f32
    B, N, p = patches.shape
    d = E.shape[1]
    for t in numba.prange(B * N):
        b, n = t // N, t % N
        acc = np.zeros(d)
        for k in range(p):
            xv = np.float64(patches[b, n, k])
            for o in range(d):
                acc[o] += xv * E[k, o]
        for o in range(d):
            out[b, o, n] = np.float32(acc[o] + bias[o])


@numba.njit(parallel=True, cache=True)
def _depthwise_kernel(z, w, bias, out):
    # z (B, d, h, w) f32; w (d, k, k) f64; zero "same" padding
    B, d, h, wd = z.shape
    k = w.shape[1]
    pad = (k - 1) // 2
    for t in numba.prange(B * d):
        b, c = t // d, t % d
        acc = np.zeros((h, wd))
        for i in range(k):
            y0 = max(0, pad - i)
            y1 = min(h, h + pad - i)
            for j in range(k):
                x0 = max(0, pad - j)
                x1 = min(wd, wd + pad - j)
                wv = w[c, i, j]
                for y in range(y0, y1):
                    for x in range(x0, x1):
                        acc[y, x] += wv * np.float64(z[b, c, y + i - pad, x + j - pad])
        for y in range(h):
            for x in range(wd):
                out[b, c, y, x] = np.float32(acc[y, x] + bias[c])


@numba.njit(parallel=True, cache=True)
def _pointwise_kernel(z, wt, bias, out):
    # z (B, d_in, n) f32; wt (d_in, d_out) f64 (transposed weight)
    B, di, n = z.shape
    do = wt.shape[1]
    for t in numba.prange(B * n):
        b, p = t // n, t % n
        acc = np.zeros(do)
        for k in range(di):
            xv = np.float64(z[b, k, p])
            for o in range(do):
                acc[o] += xv * wt[k, o]
        for o in range(do):
            out[b, o, p] = np.float32(acc[o] + bias[o])


@numba.njit(parallel=True, cache=True)
def _head_kernel(z, wt, bias, out):
    # z (B, d, n) f32; wt (d, classes) f64; global average pool then linear
    B, d, n = z.shape
    classes = wt.shape[1]
    for b in numba.prange(B):
        acc = np.zeros(classes)
        for k in range(d):
            s = 0.0
            for p in range(n):
                s += np.float64(z[b, k, p])
            pooled = np.float64(np.float32(s / n))
            for o in range(classes):
                acc[o] += pooled * wt[k, o]
        for o in range(classes):
            out[b, o] = np.float32(acc[o] + bias[o])


# --- layers --------------------------------------------------------------------

def _batched(x, ndim):
    x = np.asarray(x)
    if x.ndim == ndim:
        return x[None], True
    if x.ndim == ndim + 1:
        return x, False
    raise ShapeMismatch(f"expected {ndim}-D input or a batch of them, got shape {x.shape}")


def gelu(t):
    """tanh-approximated GELU, evaluated in float64."""
    t = np.asarray(t)
    x = t.astype(np.float64)
    y = 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * (x * x * x))))
    return y.astype(np.float32) if t.dtype == np.float32 else y


def batchnorm_infer(z, bn: BatchNormParams) -> np.ndarray:
    """Inference-mode batch norm over axis -3 (channels) of ``(..., d, h, w)``."""
    z = np.asarray(z)
    d = bn.gamma.shape[0]
    if z.ndim < 3 or z.shape[-3] != d:
        raise ShapeMismatch(f"batchnorm over {d} channels, got tensor of shape {z.shape}")
    shape = (d, 1, 1)
    mean = bn.running_mean.astype(np.float64).reshape(shape)
    std = np.sqrt(bn.running_var.astype(np.float64) + bn.epsilon).reshape(shape)
    gamma = bn.gamma.astype(np.float64).reshape(shape)
    beta = bn.beta.astype(np.float64).reshape(shape)
    return (((z.astype(np.float64) - mean) / std) * gamma + beta).astype(np.float32)


def extract_patches(x: np.ndarray, P: int) -> np.ndarray:
    """``(B, C, H, W)`` -> ``(B, N, P*P*C)``, patches row-major, canonical inner order."""
    B, C, H, W = x.shape
    if H % P or W % P:
        raise ShapeMismatch(f"patch size {P} does not divide {H}x{W}")
    Hp, Wp = H // P, W // P
    return np.ascontiguousarray(
        x.reshape(B, C, Hp, P, Wp, P).transpose(0, 2, 4, 1, 3, 5).reshape(B, Hp * Wp, C * P * P)
    )


def embed_linear(x, params: ConvMixerParams) -> np.ndarray:
    """Patch embedding before activation: ``patch @ E + bias`` per patch."""
    x, single = _batched(x, 3)
    if x.shape[1:] != (params.C, params.H, params.W):
        raise ShapeMismatch(
            f"input shape {x.shape[1:]} != model input {(params.C, params.H, params.W)}"
        )
    patches = extract_patches(x.astype(np.float32), params.P)
    B, N, _ = patches.shape
    out = np.empty((B, params.d, N), dtype=np.float32)
    _embed_kernel(patches, params.embed.astype(np.float64),
                  params.embed_bias.astype(np.float64), out)
    out = out.reshape(B, params.d, params.H // params.P, params.W // params.P)
    return out[0] if single else out


def patch_embed(x, params: ConvMixerParams) -> np.ndarray:
    """``BN(gelu(patch @ E + bias))`` on normalized input, shape ``(d, H/P, W/P)``."""
    return batchnorm_infer(gelu(embed_linear(x, params)), params.embed_bn)


def _depthwise(z: np.ndarray, layer: MixerLayer) -> np.ndarray:
    k = layer.dw_weight.shape[-1]
    if k % 2 == 0:
        raise EvenKernel(f"depthwise kernel size {k} is even")
    if layer.dw_weight.shape[0] != z.shape[1]:
        raise ShapeMismatch(
            f"layer width {layer.dw_weight.shape[0]} != input channels {z.shape[1]}"
        )
    out = np.empty_like(z)
    _depthwise_kernel(z, layer.dw_weight.astype(np.float64), layer.dw_bias.astype(np.float64), out)
    return out


def _pointwise(z: np.ndarray, layer: MixerLayer) -> np.ndarray:
    B, d, h, w = z.shape
    out = np.empty((B, d, h * w), dtype=np.float32)
    _pointwise_kernel(np.ascontiguousarray(z.reshape(B, d, h * w)),
                      np.ascontiguousarray(layer.pw_weight.T, dtype=np.float64),
                      layer.pw_bias.astype(np.float64), out)
    return out.reshape(B, d, h, w)


def mixer_layer(z, layer: MixerLayer) -> np.ndarray:
    """Depthwise stage with residual, then pointwise stage; ``(d, h, w)`` preserved."""
    z, single = _batched(z, 3)
    z = np.ascontiguousarray(z, dtype=np.float32)
    zp = batchnorm_infer(gelu(_depthwise(z, layer)), layer.dw_bn) + z
    out = batchnorm_infer(gelu(_pointwise(zp, layer)), layer.pw_bn)
    return out[0] if single else out


def forward_normalized(x, params: ConvMixerParams) -> np.ndarray:
    x, single = _batched(x, 3)
    z = patch_embed(x, params)
    for layer in params.layers:
        z = mixer_layer(z, layer)
    B = z.shape[0]
    logits = np.empty((B, params.classes), dtype=np.float32)
    _head_kernel(np.ascontiguousarray(z.reshape(B, params.d, -1)),
                 np.ascontiguousarray(params.head_weight.T, dtype=np.float64),
                 params.head_bias.astype(np.float64), logits)
    return logits[0] if single else logits


def forward(img, params: ConvMixerParams) -> np.ndarray:
    """Logits for a uint8 ``(C, H, W)`` image or ``(B, C, H, W)`` batch (no softmax)."""
    return forward_normalized(normalize(img), params)


def forward_batches(imgs, params: ConvMixerParams, batch_size: int = 64) -> np.ndarray:
    """:func:`forward` over a large stack in chunks to bound memory."""
    imgs = np.asarray(imgs)
    out = [forward(imgs[i:i + batch_size], params) for i in range(0, len(imgs), batch_size)]
    return np.concatenate(out) if out else np.empty((0, params.classes), np.float32)


def softmax(logits) -> np.ndarray:
    l = np.asarray(logits, dtype=np.float64)
    e = np.exp(l - l.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def predict(logits) -> np.ndarray:
    """Argmax with ties broken toward the lowest index."""
    return np.argmax(np.asarray(logits), axis=-1)


def _calibrated(pre: np.ndarray, bn: BatchNormParams) -> BatchNormParams:
    x = pre.astype(np.float64)
    return BatchNormParams(bn.gamma, bn.beta, x.mean(axis=(0, 2, 3)), x.var(axis=(0, 2, 3)))


def calibrate_batchnorm(params: ConvMixerParams, imgs) -> ConvMixerParams:
    """Set every BN layer's running statistics from activations on ``imgs``.

    Emulates what training leaves behind: each BN sees roughly zero-mean,
    unit-variance inputs, so the network stays input-sensitive at depth.
    """
    x = normalize(np.asarray(imgs))
    pre = gelu(embed_linear(x, params))
    params.embed_bn = _calibrated(pre, params.embed_bn)
    z = batchnorm_infer(pre, params.embed_bn)
    for layer in params.layers:
        pre = gelu(_depthwise(z, layer))
        layer.dw_bn = _calibrated(pre, layer.dw_bn)
        zp = batchnorm_infer(pre, layer.dw_bn) + z
        pre = gelu(_pointwise(zp, layer))
        layer.pw_bn = _calibrated(pre, layer.pw_bn)
        z = batchnorm_infer(pre, layer.pw_bn)
    return params


def random_model(C, H, W, P, d, L, kernel, classes, seed=0, n_calibration=32) -> ConvMixerParams:
    """Random-weight ConvMixer with BN statistics calibrated on random images."""
    params = random_params(C, H, W, P, d, L, kernel, classes, seed=seed)
    if n_calibration:
        rng = np.random.default_rng([seed, 1])
        imgs = rng.integers(0, 256, size=(n_calibration, C, H, W), dtype=np.uint8)
        calibrate_batchnorm(params, imgs)
    return params


set_threads()
