import math

import mpmath
import numpy as np
import pytest

from patchlock.errors import OddBlockSize
from patchlock.keys import identity_keypair, keypair_new
from patchlock.infer import random_model
from patchlock.model import encrypt_model
from patchlock.verify import (
    AttackReport, argmax_agreement, draw_attack_keys, emit_report, evaluate_attack_keys,
    keyspace_bits, parse_report, plain_input_agreement, random_images, random_key_attack,
    verify_equivalence,
)


@pytest.fixture(scope="module")
def model():
    return random_model(3, 16, 16, 4, 24, 2, 5, 6, seed=7, n_calibration=16)


def brute_force_keyspace(p_b):
    """Count permutations and balanced masks by enumeration."""
    import itertools
    perms = sum(1 for _ in itertools.permutations(range(p_b)))
    masks = sum(1 for m in itertools.product((0, 1), repeat=p_b) if sum(m) == p_b // 2)
    return perms, masks


@pytest.mark.parametrize("p_b", [2, 4, 6])
def test_keyspace_small_by_enumeration(p_b):
    rep = keyspace_bits(p_b)
    assert (rep.O_p, rep.O_b) == brute_force_keyspace(p_b)


def test_keyspace_examples():
    rep = keyspace_bits(2)
    assert (rep.O_p, rep.O_b, rep.O, rep.log2_O) == (2, 2, 4, 2.0)
    rep = keyspace_bits(4)
    assert (rep.O_p, rep.O_b, rep.O) == (24, 6, 144)
    assert round(rep.log2_O, 2) == 7.17


def test_keyspace_48_against_mpmath():
    rep = keyspace_bits(48)
    with mpmath.workdps(50):
        oracle = mpmath.log(mpmath.factorial(48) * mpmath.binomial(48, 24), 2)
    assert abs(rep.log2_O - float(oracle)) < 0.1
    assert f"{rep.log2_O:.1f}" == "247.8"
    assert abs(rep.log2_O - (rep.log2_Op + rep.log2_Ob)) < 0.05
    summary = rep.summary()
    assert "543.8" in summary and "247.8" in summary


def test_keyspace_monotone():
    bits = [keyspace_bits(p).log2_O for p in range(2, 66, 2)]
    assert all(b > a for a, b in zip(bits, bits[1:]))


def test_keyspace_odd():
    with pytest.raises(OddBlockSize):
        keyspace_bits(9)


def test_argmax_agreement_excludes_close_calls():
    a = np.array([[1.0, 0.0], [0.5, 0.5004], [0.0, 2.0]])
    b = np.array([[1.0, 0.0], [0.6, 0.5], [2.0, 0.0]])
    rate, n = argmax_agreement(a, b)
    assert n == 2 and rate == 0.5


def test_verify_identity_keys_exact_zero(model):
    res = verify_equivalence(model, identity_keypair(model.p_b), 8)
    assert res.max_deviation == 0.0 and res.passed and res.agreement == 1.0


def test_verify_random_keys_pass(model):
    for s in range(3):
        res = verify_equivalence(model, keypair_new(s, s + 50, 4, 3), 16, 1e-4, seed=s)
        assert res.passed, res


def test_mismatched_keys_diverge(model):
    k1, k2 = keypair_new(1, 2, 4, 3), keypair_new(3, 4, 4, 3)
    images = random_images(16, 3, 16, 16)
    from patchlock.image import encrypt_images
    from patchlock.infer import forward_batches
    plain = forward_batches(images, model)
    mixed = forward_batches(encrypt_images(images, k2, 4), encrypt_model(model, k1))
    assert np.abs(mixed - plain).max() > 1e-2


def test_attack_sanity_arm(model):
    keys = keypair_new(10, 11, 4, 3)
    images = random_images(8, 3, 16, 16)
    rep = evaluate_attack_keys(model, keys, [keys], images)
    assert rep.mean_logit_dev == [0.0] and rep.top1_agreement == [1.0]


def test_attack_keys_skip_correct_key():
    correct = keypair_new(*draw_attack_keys(identity_keypair(48), 1, 5, 4, 3)[0].seeds, 4, 3)
    keys = draw_attack_keys(correct, 3, 5, 4, 3)
    assert all(not (k.perm == correct.perm and k.flip == correct.flip) for k in keys)
    assert len(keys) == 3


def test_attack_small(model):
    keys = keypair_new(10, 11, 4, 3)
    rep = random_key_attack(model, keys, 5, 16, seed=3)
    assert rep.n_keys == 5 and rep.n_images == 16
    assert min(rep.mean_logit_dev) > 1e-3
    assert all(0.0 <= a <= 1.0 for a in rep.top1_agreement)
    assert rep.pooled_agreement < 1.0
    again = random_key_attack(model, keys, 5, 16, seed=3)
    assert emit_report(again) == emit_report(rep)


def test_plain_images_into_encrypted_model(model):
    assert plain_input_agreement(model, keypair_new(1, 2, 4, 3), 32) < 0.9


def test_report_empty():
    assert emit_report(AttackReport(0, 0)) == b"key_index,mean_logit_dev,top1_agreement\n"


def test_report_two_keys_parse_back():
    rep = AttackReport(2, 4, [0.123456789, 1.5e-3], [0.25, 1.0])
    data = emit_report(rep)
    assert data.count(b"\n") == 3
    rows = parse_report(data)
    assert [r[0] for r in rows] == [0, 1]
    for (_, dev, agree), d0, a0 in zip(rows, rep.mean_logit_dev, rep.top1_agreement):
        assert math.isclose(dev, d0, rel_tol=1e-6) and math.isclose(agree, a0, rel_tol=1e-6)

