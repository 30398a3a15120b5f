"""
What goes on disk
===================

Save a quantized model, look inside, read it back.
"""

import numpy as np

from cherryq.checkpoint import deserialize, serialize
from cherryq.data import split_windows, synthetic_corpus, tokenize
from cherryq.model import ModelConfig, perplexity
from cherryq.qat import QatConfig, TrainConfig, cherryq_train, train_base
from cherryq.quant import QuantConfig

ids = tokenize(synthetic_corpus(60_000, 2))
config = ModelConfig(width=32, heads=2, context=32, layers=1)
train, val = split_windows(ids, config.context + 1)

base = train_base(config, train, TrainConfig(steps=100, batch_size=16, peak_lr=3e-3))
run = cherryq_train(base.model, train, QatConfig(quant=QuantConfig(bits=3, group_size=16, cherry_fraction=1 / 32),
                                                 steps=10, batch_size=16))

raw = serialize(run.checkpoint())
fp_raw = serialize(base.checkpoint())
print(f"full precision {len(fp_raw)} bytes, mixed {len(raw)} bytes ({len(raw) / len(fp_raw):.2f}x)")
print("magic", raw[:4], "checksum", raw[-4:].hex())

ck = deserialize(raw)
for name, m in ck.mixed.items():
    print(f"{name:28s} {m.rows}x{m.cols}  cherries {m.cherry_indices.tolist()}  "
          f"{m.bits_per_weight():.3f} bits/weight")

# round trips are exact
assert serialize(ck) == raw
val_batches = [val[i:i + 64] for i in range(0, len(val), 64)]
print("ppl from disk   ", perplexity(ck.to_model(), val_batches))
print("ppl in memory   ", perplexity(run.model, val_batches, run.eval_weights()))

# a single flipped byte is caught
broken = bytearray(raw)
broken[100] ^= 1
try:
    deserialize(bytes(broken))
except Exception as exc:
    print(type(exc).__name__, exc)
