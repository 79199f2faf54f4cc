"""
Pretrain once, then read the representation four ways
=====================================================

A short pretraining run on the default corpus, followed by the evaluation
suite on a held-out corpus drawn from another seed:

* a linear probe on backbone [CLS] features, at several label fractions
* the modality gap between 2D and 3D embeddings of the same class
* image-to-report retrieval in the shared space
* slice-selection recall against the ground-truth lesion slices

The 2D PCA of the shared space is written to a CSV for plotting.

Run:  python demos/03_pretrain_and_evaluate.py [epochs]   (default 10, ~1 min/epoch)
"""

import sys
from pathlib import Path

from crossdim.evaluation import (
    extract_embeddings,
    extract_text_embeddings,
    linear_probe,
    modality_gap,
    pca_project,
    retrieval_eval,
    selection_report,
    write_projection,
)
from crossdim.experiments import default_corpora
from crossdim.synth import CLASSES
from crossdim.trainer import TrainConfig, train_loop

epochs = max(2, int(sys.argv[1]) if len(sys.argv) > 1 else 10)
out = Path("demo_runs/pretrain")

train, heldout = default_corpora()
# Keep the warmup fraction of the default 30-epoch schedule.
config = TrainConfig(epochs=epochs, warmup_epochs=max(1, epochs * 12 // 30))
print(f"pretraining {config.epochs} epochs on {len(train)} pairs ...")
state = train_loop(config, train, out)
print(f"done after {state.step} steps; checkpoints and metrics.csv in {out}/")

# Embeddings for every held-out sample: backbone features plus the
# projected, unit-norm shared-space vector.
table = extract_embeddings(state, heldout, "student")

print("\nlinear probe on backbone [CLS]")
for fraction in (0.01, 0.1, 1.0):
    probe = linear_probe(table.features, table.labels, fraction, seed=0)
    print(f"  {fraction:5.0%} labels: accuracy {probe.accuracy:.3f}, mean AUC {probe.mean_auc:.3f} ({probe.num_train} train)")

# Ratio of 2D-to-3D centroid distance over within-modality spread; lower
# means images and volumes of one finding sit closer together.
gap = modality_gap(table.embeddings, table.kinds, table.labels)
print(f"\nmodality gap: inter {gap.inter:.3f}, intra {gap.intra:.3f}, ratio {gap.ratio:.3f}")
for label, inter in gap.per_class.items():
    print(f"  {CLASSES[label]:9s} {inter:.3f}")

retr = retrieval_eval(table.embeddings, extract_text_embeddings(state, heldout))
chance = 5 / len(heldout)
print(f"\nretrieval image->report R@1 {retr.image_to_text[1]:.3f}, R@5 {retr.image_to_text[5]:.3f} (chance R@5 {chance:.3f})")

sel = selection_report(state, heldout, "teacher")
print(f"\nselection recall@{sel.k}: {sel.mean_recall:.3f} vs random {sel.mean_baseline:.3f} over {len(sel.rows)} volumes")

coords = pca_project(table.embeddings)
write_projection(coords, table.kinds, table.labels, out / "projection.csv")
print(f"\nPCA coordinates written to {out / 'projection.csv'}")
