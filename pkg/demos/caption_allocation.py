"""Splitting a symbol budget by caption complexity.

Each toy image comes with a template caption whose length grows with the
number of objects in the scene. The caption is scored on word count,
lexical diversity and sentence length; captions that score above the
calibration mean get more semantic symbols, simpler ones fewer. Setting
eta to 0 falls back to the fixed split.

    python3 demos/caption_allocation.py
"""
from collections import Counter

import numpy as np

from ditjscc import AllocationConfig, SystemConfig, allocate, analyze, fit_norm_stats, kc_score, make_toy_corpus
from ditjscc.kcba import KCWeights

corpus = make_toy_corpus(0, 400)
stats, I_bar = fit_norm_stats(corpus.captions)
print(f"calibrated on {len(corpus)} captions, mean score {I_bar:.3f}\n")

for n in (1, 4):
    cap = corpus.captions[int(np.flatnonzero(corpus.counts == n)[0])]
    m = analyze(cap)
    print(f"{n} object(s): {cap!r}")
    print(f"  words {m.wc:.0f}  diversity {m.ld:.2f}  sentence length {m.sc:.1f}  score {kc_score(m, KCWeights(), stats):.3f}")

ks_set = SystemConfig().candidates.ks_set
for eta in (0.0, 1.0):
    cfg = AllocationConfig(k=512, k_bar_s=256, eta=eta, I_bar=I_bar)
    allocs = [allocate(kc_score(analyze(c), KCWeights(), stats), cfg, ks_set) for c in corpus.captions]
    k_s = np.array([a.k_s for a in allocs])
    print(f"\neta {eta}: mean k_s {k_s.mean():.1f} of 512")
    for n in range(1, 5):
        hist = Counter(k_s[corpus.counts == n].tolist())
        print(f"  {n} object(s): " + ", ".join(f"k_s={k}: {c}" for k, c in sorted(hist.items())))
