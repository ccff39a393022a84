"""
Key-space size
==============

The number of distinct keys is ``p_b!`` permutations times the number of
balanced flip masks, ``C(p_b, p_b/2)``. Both are computed exactly with
Python integers before taking log2.
"""

from patchlock import keyspace_bits

for p_b in (2, 4, 12, 48, 192):
    rep = keyspace_bits(p_b)
    print(f"p_b={p_b:4d}  log2 Op={rep.log2_Op:8.1f}  log2 Ob={rep.log2_Ob:7.1f}  "
          f"log2 O={rep.log2_O:8.1f}")

print()
print(keyspace_bits(48).summary())
