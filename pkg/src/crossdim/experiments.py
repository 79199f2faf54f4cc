"""Ablation harness: train each arm on the default corpus and score it on a held-out corpus."""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .evaluation import (
    extract_embeddings,
    extract_text_embeddings,
    linear_probe,
    modality_gap,
    retrieval_eval,
    selection_report,
)
from .synth import SyntheticSample, generate_corpus
from .trainer import TrainConfig, TrainState, read_metrics, train_loop

TRAIN_SEED = 0
HELDOUT_SEED = 1
TRAIN_SIZE = (400, 200)
HELDOUT_SIZE = (400, 200)
ARMS = ("vl", "vl-sd", "full")


@dataclass
class ArmResult:
    arm: str
    seed: int
    probe_accuracy: float
    probe_auc: float
    gap_ratio: float
    selection_recall: float
    selection_baseline: float
    retrieval_r5: float
    first_epoch_vl: float
    final_epoch_vl: float
    seconds: float

    def row(self) -> dict:
        return dataclasses.asdict(self)


def default_corpora() -> tuple[list[SyntheticSample], list[SyntheticSample]]:
    return generate_corpus(*TRAIN_SIZE, seed=TRAIN_SEED), generate_corpus(*HELDOUT_SIZE, seed=HELDOUT_SEED)


def epoch_means(metrics_path, steps_per_epoch: int) -> np.ndarray:
    vl = np.atleast_1d(read_metrics(metrics_path)["L_vl"])
    n = len(vl) // steps_per_epoch
    return vl[: n * steps_per_epoch].reshape(n, steps_per_epoch).mean(axis=1)


def evaluate_state(state: TrainState, heldout: Sequence[SyntheticSample], probe_seed: int = 0) -> dict:
    table = extract_embeddings(state, heldout, "student")
    probe = linear_probe(table.features, table.labels, 1.0, probe_seed)
    gap = modality_gap(table.embeddings, table.kinds, table.labels)
    sel = selection_report(state, heldout, "teacher")
    retr = retrieval_eval(table.embeddings, extract_text_embeddings(state, heldout))
    return {
        "probe_accuracy": probe.accuracy,
        "probe_auc": probe.mean_auc,
        "gap_ratio": gap.ratio,
        "selection_recall": sel.mean_recall,
        "selection_baseline": sel.mean_baseline,
        "retrieval_r5": retr.image_to_text[5],
    }


def run_arm(
    arm: str,
    seed: int,
    train: Sequence[SyntheticSample],
    heldout: Sequence[SyntheticSample],
    out_dir,
    base: TrainConfig | None = None,
) -> ArmResult:
    config = dataclasses.replace(base or TrainConfig(), seed=seed).with_ablation(arm)
    out = Path(out_dir)
    start = time.perf_counter()
    state = train_loop(config, train, out)
    seconds = time.perf_counter() - start
    spe = state.step // max(config.epochs, 1)
    vl = epoch_means(out / "metrics.csv", spe)
    scores = evaluate_state(state, heldout)
    return ArmResult(arm, seed, first_epoch_vl=float(vl[0]), final_epoch_vl=float(vl[-1]), seconds=seconds, **scores)


def random_init_scores(seed: int, heldout: Sequence[SyntheticSample], base: TrainConfig | None = None) -> dict:
    config = dataclasses.replace(base or TrainConfig(), seed=seed)
    return evaluate_state(TrainState.initial(config), heldout)
