"""``patchlock`` command line: key generation, encryption, inference, audits.

Exit codes: 0 ok, 1 a verification assertion failed, 2 usage or I/O error.
"""
from __future__ import annotations

import argparse
import os
import sys
import tempfile

import numpy as np

from .errors import PatchlockError

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _atomic_write(path: str, data: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".patchlock-", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read(path: str) -> bytes:
    with open(path, "rb") as f:
        return f.read()


def _positive(flag):
    def conv(text):
        try:
            value = int(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{flag} expects an integer, got {text!r}")
        if value < 1:
            raise argparse.ArgumentTypeError(f"{flag} must be positive, got {value}")
        return value
    return conv


def _seed(text):
    try:
        value = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {text!r}")
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError(f"seed must fit in 64 bits, got {value}")
    return value


def _model_spec(text):
    try:
        dims = tuple(int(t) for t in text.split(","))
    except ValueError:
        dims = ()
    if len(dims) != 8 or min(dims[:5] + dims[6:]) < 1 or dims[5] < 0:
        raise argparse.ArgumentTypeError(
            f"--spec expects C,H,W,P,d,L,kernel,classes (8 positive integers), got {text!r}"
        )
    return dims


def _nonneg_float(flag):
    def conv(text):
        try:
            value = float(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{flag} expects a number, got {text!r}")
        if not value >= 0:
            raise argparse.ArgumentTypeError(f"{flag} must be non-negative, got {text!r}")
        return value
    return conv


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="patchlock", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("keygen", help="derive a key pair and write a PLK1 key file")
    p.add_argument("--seed1", type=_seed, required=True)
    p.add_argument("--seed2", type=_seed, required=True)
    p.add_argument("--block", type=_positive("--block"), required=True)
    p.add_argument("--channels", type=_positive("--channels"), default=3)
    p.add_argument("-o", "--output", required=True)

    for name in ("encrypt-image", "decrypt-image"):
        p = sub.add_parser(name, help=f"{name.split('-')[0]} a PPM/PGM image block-wise")
        p.add_argument("--key", required=True)
        p.add_argument("--block", type=_positive("--block"), required=True)
        p.add_argument("input")
        p.add_argument("output")

    p = sub.add_parser("encrypt-model", help="transform the patch embedding of a CMX1 model")
    p.add_argument("--key", required=True)
    p.add_argument("input")
    p.add_argument("output")

    p = sub.add_parser("infer", help="classify one image")
    p.add_argument("--model", required=True)
    p.add_argument("image")

    p = sub.add_parser("verify", help="check plain/encrypted equivalence on random images")
    p.add_argument("--model", required=True)
    p.add_argument("--key", required=True)
    p.add_argument("--images", type=_positive("--images"), default=16)
    p.add_argument("--tol", type=_nonneg_float("--tol"), default=1e-4)
    p.add_argument("--seed", type=_seed, default=0)

    p = sub.add_parser("keyspace", help="exact key-space size in bits")
    p.add_argument("--pb", type=_positive("--pb"), required=True)

    p = sub.add_parser("attack-sim", help="random wrong-key attack, CSV report")
    p.add_argument("--model", required=True)
    p.add_argument("--key", required=True)
    p.add_argument("--keys", type=_positive("--keys"), default=100)
    p.add_argument("--images", type=_positive("--images"), default=64)
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--min-dev", type=_nonneg_float("--min-dev"), default=1e-3,
                   help="every wrong key must exceed this mean max-abs logit deviation")
    p.add_argument("-o", "--output", required=True)

    p = sub.add_parser("gen-model", help="write a random-weight CMX1 model")
    p.add_argument("--spec", type=_model_spec, required=True)
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("-o", "--output", required=True)
    return parser


def _cmd_keygen(args, out):
    from .keys import dump_key, keypair_new

    keys = keypair_new(args.seed1, args.seed2, args.block, args.channels)
    _atomic_write(args.output, dump_key(keys))
    print(f"wrote {args.output} (p_b={keys.p_b})", file=out)
    return EXIT_OK


def _cmd_image(args, out):
    from .image import decrypt_image, encrypt_image, read_pnm, write_pnm
    from .keys import load_key

    keys = load_key(_read(args.key))
    img = read_pnm(_read(args.input))
    fn = encrypt_image if args.command == "encrypt-image" else decrypt_image
    _atomic_write(args.output, write_pnm(fn(img, keys, args.block)))
    return EXIT_OK


def _cmd_encrypt_model(args, out):
    from .keys import load_key
    from .model import encrypt_model, load_model, save_model

    keys = load_key(_read(args.key))
    params = load_model(_read(args.input))
    _atomic_write(args.output, save_model(encrypt_model(params, keys)))
    return EXIT_OK


def _cmd_infer(args, out):
    from .image import read_pnm
    from .infer import forward, predict, softmax
    from .model import load_model

    params = load_model(_read(args.model))
    logits = forward(read_pnm(_read(args.image)), params)
    probs = softmax(logits)
    print(f"class {int(predict(logits))}", file=out)
    print("probabilities " + " ".join(f"{p:.6f}" for p in probs), file=out)
    return EXIT_OK


def _cmd_verify(args, out):
    from .keys import load_key
    from .model import load_model
    from .verify import verify_equivalence

    params = load_model(_read(args.model))
    keys = load_key(_read(args.key))
    res = verify_equivalence(params, keys, args.images, args.tol, seed=args.seed)
    status = "PASS" if res.passed else "FAIL"
    print(f"{status} max_deviation={res.max_deviation:.3e} tol={res.tolerance:.1e} "
          f"argmax_agreement={res.agreement:.4f} images={res.n_images}", file=out)
    return EXIT_OK if res.passed else EXIT_FAIL


def _cmd_keyspace(args, out):
    from .verify import keyspace_bits

    print(keyspace_bits(args.pb).summary(), file=out)
    return EXIT_OK


def _cmd_attack(args, out):
    from .keys import load_key
    from .model import load_model
    from .verify import emit_report, random_key_attack

    params = load_model(_read(args.model))
    keys = load_key(_read(args.key))
    report = random_key_attack(params, keys, args.keys, args.images, seed=args.seed)
    _atomic_write(args.output, emit_report(report))
    worst = min(report.mean_logit_dev)
    ok = worst > args.min_dev
    print(f"{'PASS' if ok else 'FAIL'} keys={report.n_keys} images={report.n_images} "
          f"min_mean_logit_dev={worst:.3e} pooled_top1_agreement={report.pooled_agreement:.4f}",
          file=out)
    return EXIT_OK if ok else EXIT_FAIL


def _cmd_gen_model(args, out):
    from .infer import random_model
    from .model import save_model

    params = random_model(*args.spec, seed=args.seed)
    _atomic_write(args.output, save_model(params))
    return EXIT_OK


COMMANDS = {
    "keygen": _cmd_keygen,
    "encrypt-image": _cmd_image,
    "decrypt-image": _cmd_image,
    "encrypt-model": _cmd_encrypt_model,
    "infer": _cmd_infer,
    "verify": _cmd_verify,
    "keyspace": _cmd_keyspace,
    "attack-sim": _cmd_attack,
    "gen-model": _cmd_gen_model,
}


def run(argv=None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return COMMANDS[args.command](args, out)
    except PatchlockError as exc:
        print(f"patchlock: error: {type(exc).__name__}: {exc}", file=err)
        return EXIT_USAGE
    except OSError as exc:
        print(f"patchlock: error: {type(exc).__name__}: {exc}", file=err)
        return EXIT_USAGE


def main() -> None:
    sys.exit(run())
