"""Language-guided slice selection and attention-guided token masking.

The [CLS] token is the one supervised by the report, so its attention over
patch tokens, averaged over every layer and head, says which tokens carry the
reported finding. Averaging that vector over the tokens of each slice ranks
slices; the top-k become pseudo 2D partners of their own volume. The same
vector decides which tokens survive masking in the student view.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import ModelConfig, encode_tokens
from .nn import AttentionTrace, EncoderOutput, ParamRegistry
from .tensor import no_grad
from .tokenizers import TokenSequence, assemble_sequence, gather_tokens, tokenize_2d, tokenize_3d, tokenize_selected_slices


@dataclass
class SliceScores:
    """Mean attention per slice group; group ``g`` covers original slices
    ``g * slab_depth ... (g + 1) * slab_depth - 1``."""

    scores: np.ndarray
    groups: np.ndarray
    slab_depth: int = 1

    def per_slice(self) -> np.ndarray:
        """Scores broadcast to original-slice resolution, indexed by slice."""
        depth = (int(self.groups.max()) + 1) * self.slab_depth
        out = np.full(depth, -np.inf)
        for g, s in zip(self.groups, self.scores):
            out[g * self.slab_depth : (g + 1) * self.slab_depth] = s
        return out


@dataclass
class MaskPlan:
    retain_ratio: float
    keep: np.ndarray  # (B, T) bool over the full sequence, [CLS] included
    kept_positions: np.ndarray  # (B, K) ascending positions of kept tokens

    @property
    def num_kept(self) -> int:
        return self.kept_positions.shape[1]


def aggregate_cls_attention(trace: AttentionTrace | np.ndarray) -> np.ndarray:
    """Mean of the stored [CLS] rows over all layers and heads -> (..., P)."""
    rows = trace.rows if isinstance(trace, AttentionTrace) else np.asarray(trace, dtype=np.float64)
    if rows.ndim < 3:
        raise ValueError(f"trace needs (layers, heads, patches) axes, got shape {rows.shape}")
    if rows.shape[-3] == 0 or rows.shape[-2] == 0:
        raise ValueError("trace has no (layer, head) entries")
    if np.isnan(rows).any():
        raise ValueError("trace has missing (layer, head) entries")
    return rows.mean(axis=(-3, -2))


def score_slices(v: np.ndarray, slice_index: np.ndarray, slab_depth: int = 1) -> SliceScores:
    """s_i = (1/N) sum_j v_ij over the N tokens of each slice group."""
    v = np.asarray(v, dtype=np.float64)
    slice_index = np.asarray(slice_index)
    if v.shape != slice_index.shape or v.ndim != 1:
        raise ValueError(f"attention {v.shape} and provenance {slice_index.shape} must be matching vectors")
    if np.any(slice_index < 0):
        raise ValueError("token without slice provenance")
    groups, counts = np.unique(slice_index, return_counts=True)
    if np.any(counts != counts[0]):
        raise ValueError(f"slice groups have unequal token counts {counts.tolist()}")
    sums = np.zeros(len(groups))
    np.add.at(sums, np.searchsorted(groups, slice_index), v)
    return SliceScores(sums / counts[0], groups, slab_depth)


def select_top_k(scores: SliceScores, k: int) -> list[int]:
    """The k highest-scoring original slices, ties to the lower index, ascending."""
    per_slice = scores.per_slice()
    if not 1 <= k <= per_slice.size:
        raise ValueError(f"k={k} outside [1, {per_slice.size}]")
    order = np.lexsort((np.arange(per_slice.size), -per_slice))
    return sorted(int(i) for i in order[:k])


def kept_count(num_patches: int, retain_ratio: float) -> int:
    # guard against ratio*P landing a hair above an integer
    return max(1, math.ceil(retain_ratio * num_patches - 1e-9))


def plan_attentive_mask(v: np.ndarray, retain_ratio: float) -> MaskPlan:
    """Keep the ceil(ratio * P) patch tokens with the highest attention, plus [CLS].

    ``v`` is (P,) or (B, P) over patch tokens; positions in the plan refer to
    the full sequence where [CLS] sits at position 0.
    """
    if not 0.0 < retain_ratio <= 1.0:
        raise ValueError(f"retain_ratio {retain_ratio} outside (0, 1]")
    v = np.atleast_2d(np.asarray(v, dtype=np.float64))
    b, p = v.shape
    n_keep = kept_count(p, retain_ratio)
    kept = np.empty((b, n_keep + 1), dtype=np.intp)
    keep = np.zeros((b, p + 1), dtype=bool)
    idx = np.arange(p)
    for i in range(b):
        order = np.lexsort((idx, -v[i]))[:n_keep]
        kept[i, 0] = 0
        kept[i, 1:] = np.sort(order) + 1
        keep[i, kept[i]] = True
    return MaskPlan(retain_ratio, keep, kept)


def random_slices(rng: np.random.Generator, batch: int, depth: int, k: int) -> np.ndarray:
    if not 0 <= k <= depth:
        raise ValueError(f"k={k} outside [0, {depth}]")
    return np.stack([np.sort(rng.choice(depth, size=k, replace=False)) for _ in range(batch)]) if batch else np.zeros((0, k), int)


def attentive_slices(params: ParamRegistry, volumes: np.ndarray, config: ModelConfig, k: int) -> tuple[np.ndarray, list[SliceScores], np.ndarray]:
    """Top-k slices per volume from a traced pass over the 3D-only sequence.

    Returns (selected (B, k), per-volume scores, attention vectors (B, P)).
    """
    g = config.geometry
    with no_grad():
        seq = tokenize_3d(volumes, params, g)
        out = encode_tokens(params, seq, config, record_trace=True)
    v = aggregate_cls_attention(out.trace)
    scores = [score_slices(v[i], seq.slice_index[i, 1:], g.slab_depth) for i in range(v.shape[0])]
    selected = np.array([select_top_k(s, k) for s in scores], dtype=np.intp).reshape(v.shape[0], k)
    return selected, scores, v


@dataclass
class Views:
    kind: int
    student: TokenSequence
    teacher: TokenSequence
    teacher_output: EncoderOutput
    mask: MaskPlan
    selected: np.ndarray | None = None
    scores: list[SliceScores] | None = None


def build_views(
    pixels: np.ndarray,
    kind: int,
    teacher: ParamRegistry,
    student: ParamRegistry,
    config: ModelConfig,
    k: int,
    retain_ratio: float,
    attentive: bool,
    rng: np.random.Generator | None = None,
) -> Views:
    """Teacher (full) and student (masked) views for a batch of one modality.

    For volumes the teacher first ranks slices on the 3D-only sequence (or
    slices are drawn at random when ``attentive`` is off), the chosen slices
    are tokenized by the 2D path and prepended to the 3D tokens, and the
    teacher's traced pass over that full sequence picks the tokens the student
    keeps. Dropped tokens leave the student sequence entirely.
    """
    g = config.geometry
    selected = scores = None
    if kind == 2:
        with no_grad():
            t_seq = tokenize_2d(pixels, teacher, g)
        s_full = tokenize_2d(pixels, student, g)
    elif kind == 3:
        if attentive:
            selected, scores, _ = attentive_slices(teacher, pixels, config, k)
        else:
            if rng is None:
                raise ValueError("random slice selection needs an rng")
            selected = random_slices(rng, pixels.shape[0], g.depth, k)
        with no_grad():
            t_seq = assemble_sequence([tokenize_selected_slices(pixels, selected, teacher, g), tokenize_3d(pixels, teacher, g)])
        s_full = assemble_sequence([tokenize_selected_slices(pixels, selected, student, g), tokenize_3d(pixels, student, g)])
    else:
        raise ValueError(f"sample kind must be 2 or 3, got {kind}")
    with no_grad():
        t_out = encode_tokens(teacher, t_seq, config, record_trace=True)
    plan = plan_attentive_mask(aggregate_cls_attention(t_out.trace), retain_ratio)
    return Views(kind, gather_tokens(s_full, plan.kept_positions), t_seq, t_out, plan, selected, scores)


def selection_recall(selected: Sequence[int], truth: Sequence[int], k: int) -> float:
    """|selected & truth| / min(k, |truth|)."""
    if not truth:
        raise ValueError("recall is undefined without ground-truth slices")
    return len(set(selected) & set(truth)) / min(k, len(truth))


def random_recall_baseline(depth: int, k: int, truth_size: int) -> float:
    """Expected recall of k uniformly random distinct slices (hypergeometric mean k*t/S)."""
    return (k * truth_size / depth) / min(k, truth_size)
