"""
Block-wise image encryption
===========================

Derive a key pair from two seeds, encrypt an image block by block, and get
it back. Encrypted images are plain 8-bit images, so they can be stored as
PPM files without loss.
"""

import pathlib
import tempfile

import numpy as np

from patchlock import (
    decrypt_image, encrypt_image, keypair_new, read_pnm, segment_blocks, write_pnm,
)

# A smooth 3x32x32 test card: horizontal red ramp, vertical green ramp.
ramp = np.linspace(0, 255, 32).astype(np.uint8)
img = np.stack([np.tile(ramp, (32, 1)), np.tile(ramp[:, None], (1, 32)),
                np.full((32, 32), 128, np.uint8)])

# 4x4 blocks over 3 channels -> 48 pixels per block.
keys = keypair_new(seed1=1234, seed2=5678, M=4, C=3)
print("p_b =", keys.p_b)
print("first permutation entries:", keys.perm.v[:8])
print("flip mask (balanced):", keys.flip.r.sum(), "ones of", keys.p_b)

###############################################################################
# Each block is flattened channel-major, shuffled with ``v`` and then has
# half of its pixels inverted (``255 - p``) according to ``r``.
blocks = segment_blocks(img, 4)
print("block image shape:", blocks.shape)

enc = encrypt_image(img, keys, 4)
print("pixels changed by encryption: %.1f%%" % (100 * np.mean(enc != img)))

###############################################################################
# Round trip through a PPM file.
out = pathlib.Path(tempfile.mkdtemp()) / "encrypted.ppm"
out.write_bytes(write_pnm(enc))
restored = decrypt_image(read_pnm(out.read_bytes()), keys, 4)
print("decrypt(encrypt(x)) == x:", np.array_equal(restored, img))

# A different key does not recover the image.
wrong = keypair_new(1235, 5678, 4, 3)
print("wrong key recovers image:", np.array_equal(decrypt_image(enc, wrong, 4), img))
print("wrote", out)
