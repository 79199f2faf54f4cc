"""
The three-arm ablation
======================

Each arm trains the same encoder on the same corpus and differs only in the
self-distillation branch:

  vl      contrastive image/report loss only
  vl-sd   adds self-distillation; slices and tokens chosen at random
  full    adds self-distillation; slices and tokens chosen by [CLS] attention

The table reports held-out probe accuracy, modality-gap ratio, selection
recall and retrieval R@5 per arm and seed, plus an untrained encoder for
reference. This is the same protocol the acceptance tests run.

Run:  python demos/04_ablation.py [seed ...]   (default seed 0; ~2-3 min per arm)
"""

import sys

import numpy as np

from crossdim.experiments import ARMS, default_corpora, random_init_scores, run_arm

seeds = [int(s) for s in sys.argv[1:]] or [0]
train, heldout = default_corpora()

header = f"{'arm':6s} {'seed':>4s} {'probe':>6s} {'gap':>6s} {'recall':>6s} {'R@5':>6s} {'secs':>5s}"
print(header)
print("-" * len(header))

results = {}
for seed in seeds:
    init = random_init_scores(seed, heldout)
    print(f"{'init':6s} {seed:4d} {init['probe_accuracy']:6.3f} {init['gap_ratio']:6.3f} {init['selection_recall']:6.3f} {init['retrieval_r5']:6.3f} {'':>5s}")
    for arm in ARMS:
        r = run_arm(arm, seed, train, heldout, f"demo_runs/ablation/{arm}_{seed}")
        results[arm, seed] = r
        print(f"{arm:6s} {seed:4d} {r.probe_accuracy:6.3f} {r.gap_ratio:6.3f} {r.selection_recall:6.3f} {r.retrieval_r5:6.3f} {r.seconds:5.0f}")

if len(seeds) > 1:
    print("\nmedians over seeds")
    for arm in ARMS:
        med = {f: np.median([getattr(results[arm, s], f) for s in seeds]) for f in ("probe_accuracy", "gap_ratio", "selection_recall")}
        print(f"  {arm:6s} probe {med['probe_accuracy']:.3f}  gap {med['gap_ratio']:.3f}  recall {med['selection_recall']:.3f}")
