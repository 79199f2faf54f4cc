"""Regenerate ``oracles.json`` from first principles with plain Python floats.

Nothing here imports the package under test; each value is computed with a
scalar formula or an explicit enumeration so the tests compare two
independent implementations.

    python3 tests/oracles/make_oracles.py
"""

import json
import math
from itertools import combinations
from pathlib import Path


def softmax(xs):
    m = max(xs)
    e = [math.exp(x - m) for x in xs]
    s = sum(e)
    return [v / s for v in e]


def attention_example():
    # one head, head dim 4, [CLS] query against two patch keys
    q = [1.0, 0.0, 0.0, 0.0]
    keys = [[1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0]]
    logits = [sum(a * b for a, b in zip(q, k)) / math.sqrt(4) for k in keys]
    return softmax(logits)


def info_nce_identity_n2():
    # identity similarities, temperature 1: each direction is -log(e / (e + 1))
    return -math.log(math.e / (math.e + 1.0))


def adamw_trajectory(p0, grads, lr, wd, b1=0.9, b2=0.999, eps=1e-8):
    p, m, v, out = p0, 0.0, 0.0, []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        p = p * (1 - lr * wd)
        p = p - lr * mhat / (math.sqrt(vhat) + eps)
        out.append(p)
    return out


def encoder_params(layers, dim, ratio):
    # enumerate every tensor of a pre-norm block by its shape
    block = [
        (dim,), (dim,),  # ln1
        (dim, dim), (dim,), (dim, dim), (dim,), (dim, dim), (dim,), (dim, dim), (dim,),  # q k v proj
        (dim,), (dim,),  # ln2
        (dim, ratio * dim), (ratio * dim,), (ratio * dim, dim), (dim,),  # mlp
    ]
    final = [(dim,), (dim,)]
    return layers * sum(math.prod(s) for s in block) + sum(math.prod(s) for s in final)


def recall_baseline(depth, k, truth):
    # expected |random k-subset & truth| / min(k, |truth|) by full enumeration
    truth = set(range(truth))
    hits = [len(truth & set(c)) for c in combinations(range(depth), k)]
    return sum(hits) / len(hits) / min(k, len(truth))


def main():
    lr_cfg = dict(epochs=50, warmup=20, init_lr=1e-8, peak_lr=2e-5)
    values = {
        "attention_example": attention_example(),
        "info_nce_identity_n2": info_nce_identity_n2(),
        "adamw": {
            "p0": 1.0,
            "grads": [0.5, -0.3, 0.2],
            "lr": 0.1,
            "wd": 0.01,
            "trajectory": adamw_trajectory(1.0, [0.5, -0.3, 0.2], 0.1, 0.01),
        },
        "encoder_params_L4_D64_r4": encoder_params(4, 64, 4),
        "recall_baseline_S16_k4": {str(t): recall_baseline(16, 4, t) for t in (1, 2, 3, 4)},
        "recall_baseline_S16_k2": {str(t): recall_baseline(16, 2, t) for t in (1, 2, 3, 4)},
        "lr_paper_scale": {
            "config": lr_cfg,
            "step0": lr_cfg["init_lr"],
            "warmup_end": lr_cfg["peak_lr"],
            "final": 0.0,
            # midpoint of the cosine phase
            "cosine_mid": 0.5 * lr_cfg["peak_lr"] * (1 + math.cos(math.pi * 0.5)),
        },
    }
    path = Path(__file__).with_name("oracles.json")
    path.write_text(json.dumps(values, indent=2) + "\n")
    print(f"wrote {path}")


if __name__ == "__main__":
    main()
