"""ConvMixer parameters, key-driven embedding transform, CMX1 serialization."""
from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import BadMagic, KeyMismatch, ShapeMismatch, TruncatedFile
from .keys import FlipKey, KeyPair, PermutationKey

BN_EPS = 1e-5
MODEL_MAGIC = b"CMX1"
_HEADER = struct.Struct("<4s8I")


def _f32(a, shape, name) -> np.ndarray:
    a = np.array(a, dtype=np.float32)
    if a.shape != tuple(shape):
        raise ShapeMismatch(f"{name}: expected shape {tuple(shape)}, got {a.shape}")
    return a


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = BN_EPS

    def __post_init__(self):
        d = np.shape(self.gamma)
        for name in ("gamma", "beta", "running_mean", "running_var"):
            setattr(self, name, _f32(getattr(self, name), d, f"bn.{name}"))
        if (self.running_var < 0).any():
            raise ShapeMismatch("bn.running_var has negative entries")

    @classmethod
    def identity(cls, d: int) -> "BatchNormParams":
        return cls(np.ones(d), np.zeros(d), np.zeros(d), np.ones(d))

    def arrays(self):
        return self.gamma, self.beta, self.running_mean, self.running_var


@dataclass
class MixerLayer:
    dw_weight: np.ndarray  # (d, k, k)
    dw_bias: np.ndarray
    dw_bn: BatchNormParams
    pw_weight: np.ndarray  # (d_out, d_in)
    pw_bias: np.ndarray
    pw_bn: BatchNormParams


@dataclass
class ConvMixerParams:
    C: int
    H: int
    W: int
    P: int
    d: int
    L: int
    kernel: int
    classes: int
    embed: np.ndarray  # (P*P*C, d), row k = canonical flat patch index
    embed_bias: np.ndarray
    embed_bn: BatchNormParams
    layers: list[MixerLayer] = field(default_factory=list)
    head_weight: np.ndarray = None  # (classes, d)
    head_bias: np.ndarray = None

    def __post_init__(self):
        if self.L < 0 or min(self.dims[:5] + self.dims[6:]) < 1:
            raise ShapeMismatch(f"dimensions must be positive (L may be 0), got {self.dims}")
        if self.H % self.P or self.W % self.P:
            raise ShapeMismatch(f"patch size {self.P} does not divide {self.H}x{self.W}")
        if len(self.layers) != self.L:
            raise ShapeMismatch(f"layers: expected {self.L}, got {len(self.layers)}")
        d, k = self.d, self.kernel
        self.embed = _f32(self.embed, (self.p_b, d), "embed")
        self.embed_bias = _f32(self.embed_bias, (d,), "embed_bias")
        for i, layer in enumerate(self.layers):
            layer.dw_weight = _f32(layer.dw_weight, (d, k, k), f"layers[{i}].dw_weight")
            layer.dw_bias = _f32(layer.dw_bias, (d,), f"layers[{i}].dw_bias")
            layer.pw_weight = _f32(layer.pw_weight, (d, d), f"layers[{i}].pw_weight")
            layer.pw_bias = _f32(layer.pw_bias, (d,), f"layers[{i}].pw_bias")
        self.head_weight = _f32(self.head_weight, (self.classes, d), "head_weight")
        self.head_bias = _f32(self.head_bias, (self.classes,), "head_bias")

    @property
    def p_b(self) -> int:
        return self.P * self.P * self.C

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.C, self.H, self.W, self.P, self.d, self.L, self.kernel, self.classes)


def random_params(C, H, W, P, d, L, kernel, classes, seed=0) -> ConvMixerParams:
    """Random-weight model with fan-in scaled uniform init and plausible BN stats."""
    rng = np.random.default_rng(seed)

    def uniform(fan_in, *shape):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    def bn():
        return BatchNormParams(
            gamma=rng.uniform(0.5, 1.5, d),
            beta=rng.uniform(-0.1, 0.1, d),
            running_mean=rng.uniform(-0.1, 0.1, d),
            running_var=rng.uniform(0.5, 1.5, d),
        )

    p_b = P * P * C
    embed, embed_bias, embed_bn = uniform(p_b, p_b, d), uniform(p_b, d), bn()
    layers = []
    for _ in range(L):
        layers.append(
            MixerLayer(
                dw_weight=uniform(kernel * kernel, d, kernel, kernel),
                dw_bias=uniform(kernel * kernel, d),
                dw_bn=bn(),
                pw_weight=uniform(d, d, d),
                pw_bias=uniform(d, d),
                pw_bn=bn(),
            )
        )
    return ConvMixerParams(
        C, H, W, P, d, L, kernel, classes,
        embed=embed, embed_bias=embed_bias, embed_bn=embed_bn, layers=layers,
        head_weight=uniform(d, classes, d), head_bias=uniform(d, classes),
    )


def permute_rows(E: np.ndarray, key: PermutationKey) -> np.ndarray:
    """``E'[k] = E[v[k]]``, so shuffled patches times ``E'`` equal plain patches times ``E``."""
    v = np.asarray(getattr(key, "v", key))
    if v.shape != (E.shape[0],):
        raise KeyMismatch(f"permutation length {v.size} != embedding rows {E.shape[0]}")
    return E[v]


def signflip_rows(E: np.ndarray, key: FlipKey) -> np.ndarray:
    r = np.asarray(getattr(key, "r", key))
    if r.shape != (E.shape[0],):
        raise KeyMismatch(f"flip length {r.size} != embedding rows {E.shape[0]}")
    out = E.copy()
    out[r == 1] *= -1  # sign-bit flip, exact
    return out


def encrypt_model(params: ConvMixerParams, keys: KeyPair) -> ConvMixerParams:
    """Transform only the embedding matrix; every other array is shared unchanged."""
    if keys.p_b != params.p_b:
        raise KeyMismatch(
            f"key p_b={keys.p_b} != P*P*C={params.p_b}: block size must equal patch size"
        )
    embed = signflip_rows(permute_rows(params.embed, keys.perm), keys.flip)
    return dataclasses.replace(params, embed=embed)


# --- CMX1 ----------------------------------------------------------------------

def _arrays(params: ConvMixerParams):
    """(name, array) pairs in CMX1 order."""
    yield "embed", params.embed
    yield "embed_bias", params.embed_bias
    yield from zip(("embed_bn.gamma", "embed_bn.beta", "embed_bn.mean", "embed_bn.var"),
                   params.embed_bn.arrays())
    for i, layer in enumerate(params.layers):
        p = f"layers[{i}]."
        yield p + "dw_weight", layer.dw_weight
        yield p + "dw_bias", layer.dw_bias
        yield from zip((p + "dw_bn.gamma", p + "dw_bn.beta", p + "dw_bn.mean", p + "dw_bn.var"),
                       layer.dw_bn.arrays())
        yield p + "pw_weight", layer.pw_weight
        yield p + "pw_bias", layer.pw_bias
        yield from zip((p + "pw_bn.gamma", p + "pw_bn.beta", p + "pw_bn.mean", p + "pw_bn.var"),
                       layer.pw_bn.arrays())
    yield "head_weight", params.head_weight
    yield "head_bias", params.head_bias


def save_model(params: ConvMixerParams) -> bytes:
    parts = [_HEADER.pack(MODEL_MAGIC, *params.dims)]
    parts += [a.astype("<f4").tobytes() for _, a in _arrays(params)]
    return b"".join(parts)


def load_model(buf: bytes) -> ConvMixerParams:
    if len(buf) < 4 or bytes(buf[:4]) != MODEL_MAGIC:
        raise BadMagic(f"model magic {bytes(buf[:4])!r} != {MODEL_MAGIC!r}")
    if len(buf) < _HEADER.size:
        raise TruncatedFile(f"header: need {_HEADER.size} bytes, have {len(buf)}")
    C, H, W, P, d, L, k, classes = _HEADER.unpack_from(buf)[1:]
    if min(C, H, W, P, d, k, classes) < 1:
        raise ShapeMismatch(f"header has a zero dimension: {(C, H, W, P, d, L, k, classes)}")
    if H % P or W % P:
        raise ShapeMismatch(f"header: patch size {P} does not divide {H}x{W}")
    offset = _HEADER.size

    def take(name, *shape):
        nonlocal offset
        n = int(np.prod(shape))
        end = offset + 4 * n
        if end > len(buf):
            raise TruncatedFile(f"{name}: need {end} bytes, have {len(buf)}")
        a = np.frombuffer(buf, dtype="<f4", count=n, offset=offset).reshape(shape)
        offset = end
        return a.astype(np.float32)

    def bn(name):
        return BatchNormParams(*(take(f"{name}.{f}", d) for f in ("gamma", "beta", "mean", "var")))

    embed = take("embed", P * P * C, d)
    embed_bias = take("embed_bias", d)
    embed_bn = bn("embed_bn")
    layers = []
    for i in range(L):
        p = f"layers[{i}]."
        layers.append(MixerLayer(
            dw_weight=take(p + "dw_weight", d, k, k),
            dw_bias=take(p + "dw_bias", d),
            dw_bn=bn(p + "dw_bn"),
            pw_weight=take(p + "pw_weight", d, d),
            pw_bias=take(p + "pw_bias", d),
            pw_bn=bn(p + "pw_bn"),
        ))
    head_weight = take("head_weight", classes, d)
    head_bias = take("head_bias", classes)
    if offset != len(buf):
        raise ShapeMismatch(f"{len(buf) - offset} trailing bytes after head_bias")
    return ConvMixerParams(C, H, W, P, d, L, k, classes, embed, embed_bias, embed_bn,
                           layers, head_weight, head_bias)


def params_equal(a: ConvMixerParams, b: ConvMixerParams) -> bool:
    """Bit-exact comparison of dimensions and every array."""
    return save_model(a) == save_model(b)
