"""
Which weights matter? Impact maps and heterogeneity
=====================================================

Train a small byte-level LM for a few hundred steps, then score every
weight three ways and see how concentrated each score is.
"""

import numpy as np

from cherryq.cherry import select_cherry_columns
from cherryq.data import split_windows, synthetic_corpus, tokenize
from cherryq.impact import (activation_metric, estimate_impact, heterogeneity_report, overlap_ratio,
                            weight_metric)
from cherryq.model import ModelConfig
from cherryq.qat import TrainConfig, train_base

ids = tokenize(synthetic_corpus(120_000, 0))
print(bytes(ids[:160].astype(np.uint8)).decode())

config = ModelConfig(width=32, heads=2, context=32, layers=1)
train, val = split_windows(ids, config.context + 1)
base = train_base(config, train, TrainConfig(steps=300, batch_size=16, peak_lr=3e-3, floor_frac=0.02))
print("loss: first %.3f  last %.3f" % (base.log.losses[0], np.mean(base.log.losses[-20:])))

model = base.model
names = model.weight_matrix_names()
rng = np.random.default_rng(1)
order = rng.permutation(len(train))
half_a, half_b = train[np.sort(order[:32])], train[np.sort(order[32:64])]

# impact = mean squared per-sequence gradient
imp_a = {n: m.values for n, m in estimate_impact(model, [half_a], names).items()}
imp_b = {n: m.values for n, m in estimate_impact(model, [half_b], names).items()}
impact = {n: (imp_a[n] + imp_b[n]) / 2 for n in names}

metrics = {
    "impact": impact,
    "weight": {n: weight_metric(model.params[n].data) for n in names},
    "activation": activation_metric(model, [half_a, half_b], names),
}
report = heterogeneity_report(metrics)
for e in report.entries:
    print(f"{e.matrix:28s} {e.metric:10s} score {e.score:8.2f}")
for m in metrics:
    print(f"median {m} score: {report.median_score(m):.2f}")

# do two disjoint calibration halves agree on the cherry columns?
frac = 1 / 16
for n in names:
    a = select_cherry_columns(imp_a[n], frac)
    b = select_cherry_columns(imp_b[n], frac)
    cols = impact[n].shape[1]
    print(f"{n:28s} overlap {overlap_ratio(a, b):5.1f}%   (random ~{100 * len(a) / cols:.1f}%)")
