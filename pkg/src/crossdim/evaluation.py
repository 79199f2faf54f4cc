"""Frozen-encoder evaluation: embeddings, linear probe, modality gap, retrieval,
slice-selection quality and a PCA projection for plotting."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from sklearn.metrics import roc_auc_score

from .model import ModelConfig, encode_tokens, image_embedding, normalize_intensity, text_embedding
from .nn import ParamRegistry
from .rng import stream
from .selection import attentive_slices, random_recall_baseline, selection_recall
from .synth import CLASSES, SyntheticSample
from .tensor import no_grad
from .tokenizers import assemble_sequence, tokenize_2d, tokenize_3d, tokenize_selected_slices
from .trainer import TrainState


@dataclass
class EmbeddingTable:
    ids: np.ndarray
    kinds: np.ndarray  # 2 or 3
    labels: np.ndarray
    features: np.ndarray  # backbone [CLS], (n, D)
    embeddings: np.ndarray  # unit-norm shared-space projection, (n, E)
    selected: dict[int, list[int]] = field(default_factory=dict)

    def subset(self, mask: np.ndarray) -> "EmbeddingTable":
        keep = set(self.ids[mask].tolist())
        return EmbeddingTable(
            self.ids[mask], self.kinds[mask], self.labels[mask], self.features[mask], self.embeddings[mask],
            {i: s for i, s in self.selected.items() if i in keep},
        )


def _network(state: TrainState, which: str) -> ParamRegistry:
    if which == "student":
        return state.student
    if which == "teacher":
        return state.teacher.params
    raise ValueError(f"which must be 'student' or 'teacher', got {which!r}")


def _check_geometry(samples: Sequence[SyntheticSample], config: ModelConfig) -> None:
    g = config.geometry
    for i, s in enumerate(samples):
        want = (g.image_size, g.image_size) if s.kind == 2 else (g.depth, g.image_size, g.image_size)
        if s.pixels.shape != want:
            raise ValueError(f"sample {i}: shape {s.pixels.shape} does not match model geometry {want}")


def encode_images(params: ParamRegistry, samples: Sequence[SyntheticSample], config: ModelConfig, k: int, chunk: int = 32):
    """Full-view (unmasked) [CLS] features; volumes use attentive top-k selection."""
    _check_geometry(samples, config)
    g = config.geometry
    n = len(samples)
    feats = np.zeros((n, config.vision.model_dim))
    embs = np.zeros((n, config.embed_dim))
    selected: dict[int, list[int]] = {}
    for kind in (2, 3):
        idx = [i for i, s in enumerate(samples) if s.kind == kind]
        for start in range(0, len(idx), chunk):
            part = idx[start : start + chunk]
            pixels = normalize_intensity(np.stack([samples[i].pixels for i in part]), config)
            with no_grad():
                if kind == 2:
                    seq = tokenize_2d(pixels, params, g)
                else:
                    sel, _, _ = attentive_slices(params, pixels, config, k)
                    seq = assemble_sequence([tokenize_selected_slices(pixels, sel, params, g), tokenize_3d(pixels, params, g)])
                    for i, row in zip(part, sel):
                        selected[i] = row.tolist()
                cls = encode_tokens(params, seq, config).cls_embedding
                feats[part] = cls.data
                embs[part] = image_embedding(params, cls).data
    return feats, embs, selected


def extract_embeddings(state: TrainState, samples: Sequence[SyntheticSample], which: str = "student") -> EmbeddingTable:
    params = _network(state, which)
    feats, embs, selected = encode_images(params, samples, state.config.model, state.config.k)
    return EmbeddingTable(
        np.arange(len(samples)),
        np.array([s.kind for s in samples]),
        np.array([s.label for s in samples]),
        feats,
        embs,
        selected,
    )


def extract_text_embeddings(state: TrainState, samples: Sequence[SyntheticSample], chunk: int = 64) -> np.ndarray:
    out = []
    with no_grad():
        for start in range(0, len(samples), chunk):
            reports = [s.report for s in samples[start : start + chunk]]
            out.append(text_embedding(state.text, reports, state.config.model).data)
    return np.concatenate(out, axis=0).astype(np.float64)


# ---------------------------------------------------------------------------
# linear probe


@dataclass
class ProbeResult:
    fraction: float
    accuracy: float
    auc: dict[int, float]
    seed: int
    num_train: int = 0
    num_test: int = 0

    @property
    def mean_auc(self) -> float:
        vals = [v for v in self.auc.values() if np.isfinite(v)]
        return float(np.mean(vals)) if vals else float("nan")


def stratified_split(labels: np.ndarray, seed: int, test_fraction: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    rng = stream(seed, "probe-split")
    train, test = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        n_test = int(round(test_fraction * len(idx)))
        test.extend(idx[:n_test])
        train.extend(idx[n_test:])
    return np.sort(train), np.sort(test)


def subsample(labels: np.ndarray, pool: np.ndarray, fraction: float, seed: int) -> np.ndarray:
    """Stratified ``fraction`` of ``pool``; at least one sample per class."""
    rng = stream(seed, "probe-fraction")
    out = []
    for c in np.unique(labels):
        idx = rng.permutation(pool[labels[pool] == c])
        out.extend(idx[: max(1, int(round(fraction * len(idx))))])
    return np.sort(np.asarray(out, dtype=np.intp))


def fit_logistic(x: np.ndarray, y: np.ndarray, num_classes: int, lr: float = 0.5, l2: float = 1e-4, tol: float = 1e-6, max_iter: int = 5000):
    """Multinomial logistic regression by full-batch gradient descent."""
    n, d = x.shape
    w = np.zeros((d, num_classes))
    b = np.zeros(num_classes)
    onehot = np.eye(num_classes)[y]
    prev = np.inf
    for _ in range(max_iter):
        z = x @ w + b
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        loss = -np.mean(np.log(p[np.arange(n), y] + 1e-300)) + 0.5 * l2 * np.sum(w * w)
        g = (p - onehot) / n
        w -= lr * (x.T @ g + l2 * w)
        b -= lr * g.sum(axis=0)
        if abs(prev - loss) < tol:
            break
        prev = loss
    return w, b


def linear_probe(features: np.ndarray, labels: np.ndarray, fraction: float = 1.0, seed: int = 0, num_classes: int | None = None) -> ProbeResult:
    """Train a linear classifier on frozen features; report held-out accuracy and per-class AUC."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction {fraction} outside (0, 1]")
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    num_classes = num_classes or int(labels.max()) + 1
    train_pool, test = stratified_split(labels, seed)
    train = subsample(labels, train_pool, fraction, seed)
    missing = set(range(num_classes)) - set(labels[train].tolist())
    if missing:
        raise ValueError(f"classes {sorted(missing)} have no training sample")
    mu = features[train].mean(axis=0)
    sd = features[train].std(axis=0) + 1e-8
    x = (features - mu) / sd
    w, b = fit_logistic(x[train], labels[train], num_classes)
    scores = x[test] @ w + b
    pred = scores.argmax(axis=1)
    acc = float(np.mean(pred == labels[test]))
    auc = {}
    for c in range(num_classes):
        truth = labels[test] == c
        auc[c] = float(roc_auc_score(truth, scores[:, c])) if 0 < truth.sum() < len(truth) else float("nan")
    return ProbeResult(fraction, acc, auc, seed, len(train), len(test))


# ---------------------------------------------------------------------------
# modality gap


@dataclass
class GapMetrics:
    inter: float
    intra: float
    ratio: float
    degenerate: bool = False
    per_class: dict[int, float] = field(default_factory=dict)


def modality_gap(embeddings: np.ndarray, kinds: np.ndarray, labels: np.ndarray) -> GapMetrics:
    """Class-matched distance between 2D and 3D centroids relative to within-modality spread.

    Embeddings are used as given (``extract_embeddings`` already returns unit
    rows). ``inter`` is the mean over classes of the distance between the 2D
    and 3D class centroids; ``intra`` is the mean distance of every sample to
    its own modality-class centroid.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    kinds = np.asarray(kinds)
    labels = np.asarray(labels)
    shared = sorted(set(labels[kinds == 2].tolist()) & set(labels[kinds == 3].tolist()))
    if not shared:
        raise ValueError("modality gap needs both 2D and 3D samples of at least one class")
    per_class = {}
    dists = []
    for c in shared:
        cents = {}
        for kind in (2, 3):
            pts = x[(labels == c) & (kinds == kind)]
            cents[kind] = pts.mean(axis=0)
            dists.extend(np.linalg.norm(pts - cents[kind], axis=1))
        per_class[c] = float(np.linalg.norm(cents[2] - cents[3]))
    inter = float(np.mean(list(per_class.values())))
    intra = float(np.mean(dists))
    if intra == 0.0:
        return GapMetrics(inter, intra, float("inf") if inter > 0 else 0.0, inter > 0, per_class)
    return GapMetrics(inter, intra, inter / intra, False, per_class)


# ---------------------------------------------------------------------------
# retrieval


@dataclass
class RetrievalResult:
    image_to_text: dict[int, float]
    text_to_image: dict[int, float]


def _recall(sim: np.ndarray, ks: Sequence[int]) -> dict[int, float]:
    true = np.diag(sim)[:, None]
    rank = (sim > true).sum(axis=1)  # ties resolve in favour of the true pair
    return {k: float(np.mean(rank < k)) for k in ks}


def retrieval_eval(image_emb: np.ndarray, text_emb: np.ndarray, ks: Sequence[int] = (1, 5)) -> RetrievalResult:
    """Recall@k for paired rows, ranking by cosine similarity."""
    a = np.asarray(image_emb, dtype=np.float64)
    b = np.asarray(text_emb, dtype=np.float64)
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"{a.shape[0]} images vs {b.shape[0]} texts: rows must be paired")
    if a.shape[0] < 10:
        raise ValueError("retrieval needs at least 10 pairs")
    a = a / np.linalg.norm(a, axis=1, keepdims=True)
    b = b / np.linalg.norm(b, axis=1, keepdims=True)
    sim = a @ b.T
    return RetrievalResult(_recall(sim, ks), _recall(sim.T, ks))


# ---------------------------------------------------------------------------
# slice selection


@dataclass
class SelectionRow:
    sample_id: int
    selected: list[int]
    truth: list[int]
    recall: float
    baseline: float


@dataclass
class SelectionReport:
    rows: list[SelectionRow]
    attention: np.ndarray  # (n, P) attention vectors from the 3D-only pass
    k: int

    @property
    def mean_recall(self) -> float:
        return float(np.mean([r.recall for r in self.rows])) if self.rows else float("nan")

    @property
    def mean_baseline(self) -> float:
        return float(np.mean([r.baseline for r in self.rows])) if self.rows else float("nan")


def selection_report(state: TrainState, samples: Sequence[SyntheticSample], which: str = "teacher", k: int | None = None, chunk: int = 32) -> SelectionReport:
    """Attentive selection on every volume with ground-truth lesion slices."""
    params = _network(state, which)
    config = state.config.model
    k = state.config.k if k is None else k
    vols = [(i, s) for i, s in enumerate(samples) if s.kind == 3 and s.lesion_slices]
    _check_geometry([s for _, s in vols], config)
    depth = config.geometry.depth
    rows, attn = [], []
    for start in range(0, len(vols), chunk):
        part = vols[start : start + chunk]
        sel, _, v = attentive_slices(params, normalize_intensity(np.stack([s.pixels for _, s in part]), config), config, k)
        attn.append(v)
        for (i, s), chosen in zip(part, sel):
            truth = list(s.lesion_slices)
            rows.append(SelectionRow(i, chosen.tolist(), truth, selection_recall(chosen.tolist(), truth, k), random_recall_baseline(depth, k, len(truth))))
    attention = np.concatenate(attn, axis=0) if attn else np.zeros((0, config.geometry.tokens_3d))
    return SelectionReport(rows, attention, k)


# ---------------------------------------------------------------------------
# projection


def pca_project(embeddings: np.ndarray, n_components: int = 2) -> np.ndarray:
    """Coordinates on the top principal axes (eigendecomposition of the covariance).

    Missing components of rank-deficient data are zero columns. Each axis is
    signed so its largest-magnitude loading is positive.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise ValueError("PCA needs at least 3 samples")
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / (x.shape[0] - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    out = np.zeros((x.shape[0], n_components))
    tol = max(vals[0], 0.0) * 1e-12 if vals.size else 0.0
    for c in range(min(n_components, vecs.shape[1])):
        if vals[c] <= tol:
            break
        axis = vecs[:, c]
        axis = axis * np.sign(axis[np.argmax(np.abs(axis))])
        out[:, c] = xc @ axis
    return out


def write_projection(coords: np.ndarray, kinds: Sequence[int], labels: Sequence[int], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "modality", "class"])
        for (x, y), kind, label in zip(coords[:, :2], kinds, labels):
            w.writerow([repr(float(x)), repr(float(y)), f"{kind}D", CLASSES[label]])
