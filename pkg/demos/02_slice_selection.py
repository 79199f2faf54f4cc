"""
Attentive slice selection, step by step
=======================================

The encoder reads a volume as one sequence of slab tokens. During that pass
we keep the [CLS] row of every attention map, average it over layers and
heads into one weight per token, then average those weights per slab to score
slices. The top-k slices are re-tokenised at full 2D resolution and put in
front of the volume tokens.

With an untrained encoder the scores are close to uniform, so this demo
trains a small model for a few epochs first.

Run:  python demos/02_slice_selection.py
"""

import numpy as np

from crossdim.model import normalize_intensity
from crossdim.nn import encoder_forward
from crossdim.selection import aggregate_cls_attention, random_recall_baseline, score_slices, select_top_k, selection_recall
from crossdim.synth import generate_corpus
from crossdim.tokenizers import tokenize_3d
from crossdim.trainer import TrainConfig, train_loop

train = generate_corpus(200, 100, seed=0)
config = TrainConfig(epochs=8, warmup_epochs=2, warmup_select=50)
print("training a small model (about a minute) ...")
state = train_loop(config, train, "demo_runs/slice_selection")

mc = config.model
geom = mc.geometry
teacher = state.teacher.params

# A held-out volume with a lesion.
vol = next(s for s in generate_corpus(0, 8, seed=1) if s.lesion_slices)
pixels = normalize_intensity(vol.pixels[None], mc)

# 1. Tokenise the volume alone and run the teacher with the trace switched on.
seq = tokenize_3d(pixels, teacher, geom)
out = encoder_forward(teacher, seq.embeddings, mc.vision, "backbone.", record_trace=True)
print("\ntrace rows (batch, layers, heads, tokens):", out.trace.rows.shape)

# 2. One attention weight per token.
v = aggregate_cls_attention(out.trace)[0]
print("token weights sum to", round(float(v.sum()), 6))

# 3. Slab scores, then top-k original slice indices.
scores = score_slices(v, seq.slice_index[0, 1:], slab_depth=geom.slab_depth)
chosen = select_top_k(scores, config.k)
print("slab scores:", np.round(scores.scores, 4))
print(f"selected slices {chosen}, lesion slices {list(vol.lesion_slices)}")

recall = selection_recall(chosen, vol.lesion_slices, config.k)
baseline = random_recall_baseline(geom.depth, config.k, len(vol.lesion_slices))
print(f"recall@{config.k} = {recall:.2f} (a random pick scores {baseline:.2f} on average)")
