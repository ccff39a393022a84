"""
Random-key attack
=================

An attacker who has the encrypted model but not the key tries random keys.
Each wrong key gives logits far from the correct-key output and predictions
that agree with the correct-key predictions only at about chance level.
"""

import numpy as np

from patchlock import emit_report, keypair_new, random_key_attack, random_model

model = random_model(C=3, H=32, W=32, P=4, d=64, L=4, kernel=9, classes=10, seed=3)
correct = keypair_new(seed1=101, seed2=202, M=4, C=3)

report = random_key_attack(model, correct, n_attack_keys=20, n_images=32, seed=7)
agree = np.array(report.top1_agreement)
dev = np.array(report.mean_logit_dev)

print("wrong keys:", report.n_keys, " images per key:", report.n_images)
print("top-1 agreement with correct key: min %.3f  median %.3f  max %.3f"
      % (agree.min(), np.median(agree), agree.max()))
print("mean max |dlogit|:               min %.3f  median %.3f"
      % (dev.min(), np.median(dev)))

###############################################################################
# The CSV report has one row per key.
print(emit_report(report).decode()[:200])
