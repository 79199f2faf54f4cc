"""Brute-force loop oracles for [CLS] attention aggregation and slice scoring."""

import numpy as np

from crossdim.nn import AttentionTrace
from crossdim.selection import aggregate_cls_attention, score_slices


def loop_aggregate(rows):
    """Brute-force mean over (layer, head) of stored [CLS] rows."""
    n_layers, n_heads, p = rows.shape
    v = [0.0] * p
    for layer in range(n_layers):
        for head in range(n_heads):
            for j in range(p):
                v[j] += rows[layer, head, j]
    return np.array([x / (n_layers * n_heads) for x in v])


def loop_scores(v, slice_index):
    groups = sorted(set(slice_index.tolist()))
    out = []
    for g in groups:
        total, n = 0.0, 0
        for j in range(len(v)):
            if slice_index[j] == g:
                total += v[j]
                n += 1
        out.append(total / n)
    return np.array(out)


def random_trace(rng, layers, heads, p):
    rows = rng.random((layers, heads, p))
    return rows / rows.sum(-1, keepdims=True)


def oracle_mismatch(seed: int) -> float:
    """Largest deviation between the vectorised ops and the loop oracles on one random trace."""
    rng = np.random.default_rng(seed)
    layers, heads = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    groups, per = int(rng.integers(1, 6)), int(rng.integers(1, 9))
    rows = random_trace(rng, layers, heads, groups * per)
    slice_index = rng.permutation(np.repeat(np.arange(groups), per))
    v = aggregate_cls_attention(AttentionTrace(rows))
    s = score_slices(v, slice_index).scores
    return max(np.abs(v - loop_aggregate(rows)).max(), np.abs(s - loop_scores(v, slice_index)).max())
