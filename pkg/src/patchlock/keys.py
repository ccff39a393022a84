"""Secret key material: seeded permutation and balanced flip vectors.

Keys are derived from 64-bit seeds through splitmix64 so that the same seed
gives the same vectors on any platform and in any language. splitmix64 is a
determinism device, not a CSPRNG.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .errors import InvalidKey, KeyMismatch, OddBlockSize, BadMagic, TruncatedFile

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4B7C15
KEY_MAGIC = b"PLK1"


def prng_next(state: int) -> tuple[int, int]:
    """One splitmix64 step. Returns ``(new_state, output)``."""
    state = (state + GOLDEN_GAMMA) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


class SplitMix64:
    """Mutable stream over :func:`prng_next`."""

    def __init__(self, seed: int):
        if not 0 <= seed <= MASK64:
            raise ValueError(f"seed out of 64-bit range: {seed}")
        self.state = seed

    def next(self) -> int:
        self.state, out = prng_next(self.state)
        return out

    def __iter__(self) -> Iterator[int]:
        while True:
            yield self.next()


def bounded_uniform(stream: SplitMix64, n: int) -> int:
    """Unbiased draw from ``[0, n)`` by rejection sampling."""
    if not 1 <= n <= MASK64:
        raise ValueError(f"n must be in [1, 2**64), got {n}")
    limit = ((1 << 64) // n) * n
    while True:
        x = stream.next()
        if x < limit:
            return x % n


def _fisher_yates(values: list[int], stream: SplitMix64) -> list[int]:
    for i in range(len(values) - 1, 0, -1):
        j = bounded_uniform(stream, i + 1)
        values[i], values[j] = values[j], values[i]
    return values


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.int64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PermutationKey:
    v: np.ndarray
    source_seed: int | None = None

    def __post_init__(self):
        v = _frozen(self.v)
        if v.ndim != 1 or not np.array_equal(np.sort(v), np.arange(v.size)):
            raise InvalidKey("permutation vector is not a bijection on 0..p_b-1")
        object.__setattr__(self, "v", v)

    def __len__(self) -> int:
        return self.v.size

    def inverse(self) -> "PermutationKey":
        return PermutationKey(np.argsort(self.v, kind="stable"))

    def __eq__(self, other):
        return isinstance(other, PermutationKey) and np.array_equal(self.v, other.v)

    __hash__ = None


@dataclass(frozen=True)
class FlipKey:
    """Binary flip mask ``r``.

    Derived and loaded keys are always balanced (half ones). Construction
    itself only checks that entries are 0/1, so degenerate masks such as
    all-zeros can still be built by hand for testing.
    """

    r: np.ndarray
    source_seed: int | None = None

    def __post_init__(self):
        r = _frozen(self.r)
        if r.ndim != 1 or not np.isin(r, (0, 1)).all():
            raise InvalidKey("flip vector entries must be 0 or 1")
        object.__setattr__(self, "r", r)

    def __len__(self) -> int:
        return self.r.size

    @property
    def balanced(self) -> bool:
        return self.r.size % 2 == 0 and int(self.r.sum()) * 2 == self.r.size

    def __eq__(self, other):
        return isinstance(other, FlipKey) and np.array_equal(self.r, other.r)

    __hash__ = None


@dataclass(frozen=True)
class KeyPair:
    perm: PermutationKey
    flip: FlipKey
    p_b: int = field(default=-1)

    def __post_init__(self):
        if self.p_b == -1:
            object.__setattr__(self, "p_b", len(self.perm))
        if len(self.perm) != self.p_b or len(self.flip) != self.p_b:
            raise KeyMismatch(
                f"key lengths (v={len(self.perm)}, r={len(self.flip)}) != p_b={self.p_b}"
            )

    @property
    def seeds(self) -> tuple[int | None, int | None]:
        return self.perm.source_seed, self.flip.source_seed


def derive_permutation(seed: int, p_b: int) -> PermutationKey:
    if p_b < 1:
        raise ValueError(f"p_b must be positive, got {p_b}")
    v = _fisher_yates(list(range(p_b)), SplitMix64(seed))
    return PermutationKey(v, source_seed=seed)


def derive_flip_mask(seed: int, p_b: int) -> FlipKey:
    if p_b < 1 or p_b % 2:
        raise OddBlockSize(f"p_b={p_b} must be even and positive for a balanced flip mask")
    half = p_b // 2
    r = _fisher_yates([1] * half + [0] * half, SplitMix64(seed))
    return FlipKey(r, source_seed=seed)


def keypair_new(seed1: int, seed2: int, M: int, C: int) -> KeyPair:
    """Key pair for ``M x M`` blocks over ``C`` channels (``p_b = M*M*C``)."""
    if M < 1 or C < 1:
        raise ValueError(f"block size and channels must be positive (M={M}, C={C})")
    p_b = M * M * C
    if p_b % 2:
        raise OddBlockSize(f"p_b = {M}*{M}*{C} = {p_b} is odd")
    return KeyPair(derive_permutation(seed1, p_b), derive_flip_mask(seed2, p_b), p_b)


def identity_keypair(p_b: int) -> KeyPair:
    """Identity permutation with a balanced flip mask.

    Sign flips are exactly neutral in the encrypted inference path, so this
    key yields bit-identical logits; it is still storable as a PLK1 file.
    """
    if p_b % 2:
        raise OddBlockSize(f"p_b={p_b} is odd")
    half = p_b // 2
    return KeyPair(
        PermutationKey(np.arange(p_b), source_seed=0),
        FlipKey([1] * half + [0] * half, source_seed=0),
        p_b,
    )


# PLK1: magic, u32 p_b, u64 seed1, u64 seed2, p_b x u32 v, p_b x u8 r (little-endian)
_HEADER = struct.Struct("<4sIQQ")


def dump_key(keys: KeyPair) -> bytes:
    s1, s2 = (s if s is not None else 0 for s in keys.seeds)
    return b"".join(
        (
            _HEADER.pack(KEY_MAGIC, keys.p_b, s1, s2),
            keys.perm.v.astype("<u4").tobytes(),
            keys.flip.r.astype(np.uint8).tobytes(),
        )
    )


def load_key(buf: bytes) -> KeyPair:
    if len(buf) < 4 or buf[:4] != KEY_MAGIC:
        raise BadMagic(f"key file magic {bytes(buf[:4])!r} != {KEY_MAGIC!r}")
    if len(buf) < _HEADER.size:
        raise TruncatedFile("key header")
    _, p_b, s1, s2 = _HEADER.unpack_from(buf)
    end = _HEADER.size + 5 * p_b
    if len(buf) < end:
        raise TruncatedFile(f"key body: need {end} bytes, have {len(buf)}")
    if len(buf) > end:
        raise InvalidKey(f"{len(buf) - end} trailing bytes after key body")
    v = np.frombuffer(buf, dtype="<u4", count=p_b, offset=_HEADER.size)
    r = np.frombuffer(buf, dtype=np.uint8, count=p_b, offset=_HEADER.size + 4 * p_b)
    flip = FlipKey(r, source_seed=s2)
    if not flip.balanced:
        raise InvalidKey(f"flip vector is not balanced: sum(r)={int(r.sum())}, p_b={p_b}")
    return KeyPair(PermutationKey(v, source_seed=s1), flip, p_b)
