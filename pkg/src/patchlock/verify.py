"""Key-space counting, the plain/encrypted equivalence check and random-key attacks."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import OddBlockSize
from .image import encrypt_images
from .infer import forward_batches, predict
from .keys import KeyPair, SplitMix64, keypair_new
from .model import ConvMixerParams, encrypt_model

# Reported total key space for p_b = 48 (4x4 blocks, RGB) in the original
# publication; exact evaluation of the same formulas gives ~2^247.8.
PUBLISHED_LOG2_O = 543.8


@dataclass(frozen=True)
class KeySpaceReport:
    p_b: int
    O_p: int
    O_b: int
    log2_Op: float
    log2_Ob: float
    log2_O: float

    @property
    def O(self) -> int:
        return self.O_p * self.O_b

    def summary(self) -> str:
        lines = [
            f"p_b     = {self.p_b}",
            f"log2_Op = {self.log2_Op:.1f}",
            f"log2_Ob = {self.log2_Ob:.1f}",
            f"log2_O  = {self.log2_O:.1f}",
        ]
        if self.p_b == 48:
            lines.append(
                f"published figure: 2^{PUBLISHED_LOG2_O} -- differs from the exact value "
                f"2^{self.log2_O:.1f} by {PUBLISHED_LOG2_O - self.log2_O:.1f} bits; "
                "the exact value is authoritative here"
            )
        return "\n".join(lines)


def keyspace_bits(p_b: int) -> KeySpaceReport:
    """Exact ``p_b!`` and central binomial (big integers), then log2."""
    if p_b < 2 or p_b % 2:
        raise OddBlockSize(f"p_b={p_b} must be a positive even integer")
    O_p = math.factorial(p_b)
    O_b = math.comb(p_b, p_b // 2)
    # math.log2 takes ints of any size without going through float
    return KeySpaceReport(p_b, O_p, O_b, math.log2(O_p), math.log2(O_b), math.log2(O_p * O_b))


def random_images(n: int, C: int, H: int, W: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.integers(0, 256, size=(n, C, H, W), dtype=np.uint8)


def argmax_agreement(a, b, min_gap: float = 1e-3) -> tuple[float, int]:
    """Fraction of rows whose argmax agrees, excluding rows where the reference
    ``a`` has a top-2 gap below ``min_gap``. Returns ``(rate, n_counted)``."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape[-1] > 1:
        top2 = np.sort(a, axis=-1)[:, -2:]
        keep = (top2[:, 1] - top2[:, 0]) >= min_gap
    else:
        keep = np.ones(len(a), bool)
    n = int(keep.sum())
    if n == 0:
        return 1.0, 0
    return float((predict(a[keep]) == predict(b[keep])).mean()), n


@dataclass
class EquivalenceResult:
    passed: bool
    max_deviation: float
    tolerance: float
    agreement: float
    n_images: int
    n_counted: int


def verify_equivalence(params: ConvMixerParams, keys: KeyPair, n_images: int,
                       tolerance: float = 1e-4, seed: int = 0,
                       images: np.ndarray | None = None,
                       plain_logits: np.ndarray | None = None) -> EquivalenceResult:
    """Compare ``forward(m, x)`` with ``forward(enc(m), enc(x))`` on random images."""
    if images is None:
        images = random_images(n_images, params.C, params.H, params.W, seed)
    if plain_logits is None:
        plain_logits = forward_batches(images, params)
    enc_logits = forward_batches(encrypt_images(images, keys, params.P), encrypt_model(params, keys))
    dev = float(np.abs(enc_logits.astype(np.float64) - plain_logits).max()) if len(images) else 0.0
    agreement, counted = argmax_agreement(plain_logits, enc_logits)
    return EquivalenceResult(dev <= tolerance, dev, tolerance, agreement, len(images), counted)


@dataclass
class AttackReport:
    n_keys: int
    n_images: int
    mean_logit_dev: list[float] = field(default_factory=list)
    top1_agreement: list[float] = field(default_factory=list)

    @property
    def pooled_agreement(self) -> float:
        return float(np.mean(self.top1_agreement)) if self.top1_agreement else float("nan")


def evaluate_attack_keys(params: ConvMixerParams, correct_keys: KeyPair,
                         attack_keys: list[KeyPair], images: np.ndarray) -> AttackReport:
    """Feed images encrypted under each attack key into the correctly-encrypted model."""
    enc_model = encrypt_model(params, correct_keys)
    ref = forward_batches(encrypt_images(images, correct_keys, params.P), enc_model)
    ref_pred = predict(ref)
    report = AttackReport(len(attack_keys), len(images))
    for keys in attack_keys:
        out = forward_batches(encrypt_images(images, keys, params.P), enc_model)
        dev = np.abs(out.astype(np.float64) - ref).max(axis=1)
        report.mean_logit_dev.append(float(dev.mean()))
        report.top1_agreement.append(float((predict(out) == ref_pred).mean()))
    return report


def draw_attack_keys(correct_keys: KeyPair, n: int, seed: int, M: int, C: int) -> list[KeyPair]:
    """``n`` key pairs from one audit seed; any draw equal to the correct key is redrawn."""
    stream = SplitMix64(seed)
    out = []
    while len(out) < n:
        keys = keypair_new(stream.next(), stream.next(), M, C)
        if keys.perm == correct_keys.perm and keys.flip == correct_keys.flip:
            continue
        out.append(keys)
    return out


def random_key_attack(params: ConvMixerParams, correct_keys: KeyPair, n_attack_keys: int,
                      n_images: int, seed: int = 0) -> AttackReport:
    if n_attack_keys < 1:
        raise ValueError("n_attack_keys must be at least 1")
    attack = draw_attack_keys(correct_keys, n_attack_keys, seed, params.P, params.C)
    images = random_images(n_images, params.C, params.H, params.W, seed)
    return evaluate_attack_keys(params, correct_keys, attack, images)


def plain_input_agreement(params: ConvMixerParams, keys: KeyPair, n_images: int,
                          seed: int = 0) -> float:
    """Top-1 agreement between the plain model and the encrypted model, both fed plain images."""
    images = random_images(n_images, params.C, params.H, params.W, seed)
    plain = predict(forward_batches(images, params))
    stolen = predict(forward_batches(images, encrypt_model(params, keys)))
    return float((plain == stolen).mean())


CSV_HEADER = ("key_index", "mean_logit_dev", "top1_agreement")


def emit_report(report: AttackReport) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for i, (dev, agree) in enumerate(zip(report.mean_logit_dev, report.top1_agreement)):
        w.writerow((i, repr(float(dev)), repr(float(agree))))
    return buf.getvalue().encode("utf-8")


def parse_report(data: bytes) -> list[tuple[int, float, float]]:
    rows = list(csv.reader(io.StringIO(data.decode("utf-8"))))
    if tuple(rows[0]) != CSV_HEADER:
        raise ValueError(f"unexpected CSV header {rows[0]}")
    return [(int(i), float(d), float(a)) for i, d, a in rows[1:]]
