"""
Encrypted model, encrypted image, same answer
=============================================

Transforming only the patch-embedding matrix of a ConvMixer with the image
key makes the network give the same logits on encrypted images as the
original network gives on plain images.
"""

import numpy as np

from patchlock import encrypt_image, encrypt_model, forward, keypair_new, random_model, softmax
from patchlock.model import params_equal, save_model

# Random-weight ConvMixer at CIFAR-10 size, BN statistics calibrated on noise.
model = random_model(C=3, H=32, W=32, P=4, d=256, L=8, kernel=9, classes=10, seed=0)
keys = keypair_new(seed1=11, seed2=22, M=4, C=3)
enc_model = encrypt_model(model, keys)

###############################################################################
# Only the embedding rows were permuted and sign-flipped.
a, b = save_model(model), save_model(enc_model)
print("serialized bytes that differ:", sum(x != y for x, y in zip(a, b)), "of", len(a))
print("embedding is a row shuffle:",
      np.array_equal(np.sort(np.abs(enc_model.embed), axis=0), np.sort(np.abs(model.embed), axis=0)))
print("models identical:", params_equal(model, enc_model))

###############################################################################
# Compare the two inference paths on a few random images.
rng = np.random.default_rng(1)
for i in range(4):
    x = rng.integers(0, 256, (3, 32, 32), dtype=np.uint8)
    plain = forward(x, model)
    protected = forward(encrypt_image(x, keys, 4), enc_model)
    stolen = forward(x, enc_model)  # plain image into the encrypted model
    print(f"image {i}: plain class {plain.argmax()}, encrypted class {protected.argmax()}, "
          f"max |dlogit| {np.abs(plain - protected).max():.1e}, "
          f"plain-into-encrypted class {stolen.argmax()}, "
          f"p(top) {softmax(plain).max():.3f}")
