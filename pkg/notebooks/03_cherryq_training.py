"""
Mixed-precision QAT: cherries in float16, everything else in 3 bits
=====================================================================

Compare three fine-tunes of one base model: cherries chosen by impact,
cherries chosen by magnitude, and plain QAT without cherries.
"""

import numpy as np

from cherryq.data import split_windows, synthetic_corpus, tokenize
from cherryq.model import ModelConfig, perplexity
from cherryq.qat import QatConfig, TrainConfig, cherryq_train, train_base
from cherryq.quant import QuantConfig, avg_bits

ids = tokenize(synthetic_corpus(150_000, 0))
config = ModelConfig(width=32, heads=2, context=32, layers=1)
train, val = split_windows(ids, config.context + 1)
val_batches = [val[i:i + 64] for i in range(0, len(val), 64)]

base = train_base(config, train, TrainConfig(steps=400, batch_size=16, peak_lr=3e-3, floor_frac=0.02,
                                             weight_decay=0.1))
print(f"full precision  ppl {perplexity(base.model, val_batches):.4f}")

variants = {
    "impact cherries": QatConfig(quant=QuantConfig(bits=3, group_size=16, cherry_fraction=1 / 32), metric="impact"),
    "weight cherries": QatConfig(quant=QuantConfig(bits=3, group_size=16, cherry_fraction=1 / 32), metric="weight"),
    "plain QAT": QatConfig(quant=QuantConfig(bits=3, group_size=16, cherry_fraction=0), calib_sequences=0),
}
for name, cfg in variants.items():
    cfg = QatConfig(**{**cfg.__dict__, "steps": 60, "batch_size": 16, "peak_lr": 1e-4})
    run = cherryq_train(base.model, train, cfg)
    ppl = perplexity(run.checkpoint().to_model(), val_batches)
    bits = np.mean([avg_bits(cfg.quant, *base.model.params[n].shape) for n in run.cherry])
    print(f"{name:16s} ppl {ppl:.4f}  avg bits {bits:.3f}  cherries {dict((n, c.tolist()) for n, c in run.cherry.items())}")

# 2 bits: per-column scales searched once, then frozen
cfg = QatConfig(quant=QuantConfig(bits=2, group_size=16, cherry_fraction=1 / 32), steps=60, batch_size=16,
                peak_lr=1e-4)
run = cherryq_train(base.model, train, cfg)
print("2-bit  ppl %.4f" % perplexity(run.checkpoint().to_model(), val_batches))
for n, s in run.searches.items():
    print(f"  {n:28s} alpha {s.alpha:.3f}")
