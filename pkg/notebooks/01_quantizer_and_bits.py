"""
Symmetric k-bit quantization, bit packing and the storage bill
================================================================

A walk through the low-level pieces: the half-step grid, grouped scales,
LSB-first packing and what a mixed-precision matrix costs per weight.
"""

import numpy as np

from cherryq.quant import (QuantConfig, avg_bits, code_range, fake_quant, pack_codes, quantize_grouped,
                           quantize_symmetric, unpack_codes)

# the grid has no zero: levels sit at S*(n+0.5)
x = np.array([1.0, -1.0, 0.3, -0.2, 0.01])
codes, s = quantize_symmetric(x, 2)
print("scale", s, "codes", codes, "values", fake_quant(x, 2))

# 3-bit levels for a unit scale
lo, hi = code_range(3)
print("3-bit levels:", [(n + 0.5) for n in range(lo, hi + 1)])

# error shrinks as bits grow
rng = np.random.default_rng(0)
w = rng.standard_normal((64, 256)).astype(np.float32)
for k in (2, 3, 4):
    err = np.abs(quantize_grouped(w, k, 128).dequantize() - w).mean()
    print(f"k={k}  mean |error| with B=128: {err:.4f}")

# smaller groups mean tighter scales
for B in (256, 128, 64, 32):
    err = np.abs(quantize_grouped(w, 3, B).dequantize() - w).mean()
    print(f"B={B:3d}  mean |error| at 3 bits: {err:.4f}")

# packing: four 2-bit codes fill one byte
blob = pack_codes(np.array([-2, -1, 0, 1]), 2)
print("packed byte:", format(blob.data[0], "08b"))
assert unpack_codes(blob).tolist() == [-2, -1, 0, 1]

# bits per weight for a 4096x4096 matrix
recipes = {
    "3-bit B=128 cherries 1/256": QuantConfig(bits=3, group_size=128),
    "3-bit B=64 cherries 1/256": QuantConfig(bits=3, group_size=64),
    "4-bit B=128 cherries 1/256": QuantConfig(bits=4, group_size=128),
    "2-bit B=128 cherries + column scales": QuantConfig(bits=2, group_size=128),
    "3-bit B=128 no cherries": QuantConfig(bits=3, group_size=128, cherry_fraction=0),
    "3-bit B=64 no cherries": QuantConfig(bits=3, group_size=64, cherry_fraction=0),
}
for name, q in recipes.items():
    print(f"{name:40s} {avg_bits(q, 4096, 4096):.4f}")
