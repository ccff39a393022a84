"""Block-wise image encryption with matching ConvMixer embedding transforms.

An image encrypted with a key pair and a model whose patch embedding was
transformed with the same key pair give the same logits as the plain image
on the plain model; any other key scrambles the output.
"""
from .errors import (
    BadImage, BadMagic, BadShape, EvenKernel, InvalidKey, KeyMismatch, NotDivisible,
    OddBlockSize, PatchlockError, ShapeMismatch, TruncatedFile,
)
from .keys import (
    FlipKey, KeyPair, PermutationKey, SplitMix64, bounded_uniform, derive_flip_mask,
    derive_permutation, dump_key, identity_keypair, keypair_new, load_key, prng_next,
)
from .image import (
    decrypt_image, encrypt_image, encrypt_images, flip_pixels, integrate_blocks, normalize,
    read_pnm, segment_blocks, shuffle_pixels, unshuffle_pixels, write_pnm,
)
from .model import (
    BatchNormParams, ConvMixerParams, MixerLayer, encrypt_model, load_model, permute_rows,
    random_params, save_model, signflip_rows,
)
from .infer import (
    batchnorm_infer, forward, forward_batches, gelu, mixer_layer, patch_embed, predict,
    random_model, softmax,
)
from .verify import (
    emit_report, keyspace_bits, random_key_attack, verify_equivalence,
)

__version__ = "0.1.0"
