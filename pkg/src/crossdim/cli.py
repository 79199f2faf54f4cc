"""Command-line entry point.

Subcommands: ``gendata``, ``pretrain``, ``eval probe|gap|retrieval``, ``select``
and ``project``. Every command writes comma-separated outputs plus a
``<output>.manifest`` key=value file recording config hash, version and seed.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from . import __version__
from .evaluation import (
    extract_embeddings,
    extract_text_embeddings,
    linear_probe,
    modality_gap,
    pca_project,
    retrieval_eval,
    selection_report,
    write_projection,
)
from .synth import CLASSES, DatasetError, LesionSpec, generate_corpus, read_dataset, write_dataset
from .trainer import ABLATIONS, CheckpointError, TrainConfig, latest_checkpoint, load_checkpoint, train_loop

log = logging.getLogger("crossdim")


def write_manifest(path, seed: int | None, config: TrainConfig | None = None, **extra) -> Path:
    path = Path(path)
    fields = {
        "version": __version__,
        "seed": "" if seed is None else seed,
        "config_hash": config.config_hash() if config is not None else "",
    }
    fields.update(extra)
    path.write_text("".join(f"{k}={v}\n" for k, v in fields.items()))
    return path


def _manifest_for(out) -> Path:
    out = Path(out)
    return out.with_name(out.name + ".manifest")


def _write_csv(path, header, rows) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _load_config(args) -> TrainConfig:
    overrides = {} if args.seed is None else {"seed": args.seed}
    if args.config:
        return TrainConfig.from_file(args.config, **overrides)
    return TrainConfig(**overrides)


# ---------------------------------------------------------------------------
# commands


def cmd_gendata(args) -> int:
    classes = tuple(c.strip() for c in args.classes.split(",") if c.strip())
    spec = LesionSpec(classes=classes)
    seed = 0 if args.seed is None else args.seed
    samples = generate_corpus(args.n_2d, args.n_3d, seed, spec)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(samples, out)
    write_manifest(_manifest_for(out), seed, n_2d=args.n_2d, n_3d=args.n_3d, classes=",".join(classes))
    print(f"wrote {len(samples)} samples to {out}")
    return 0


def cmd_pretrain(args) -> int:
    config = _load_config(args)
    if args.ablation:
        config = config.with_ablation(args.ablation)
    data = read_dataset(args.data)
    out = Path(args.out_dir)
    resume = args.resume
    if resume == "latest":
        resume = latest_checkpoint(out)
        if resume is None:
            raise CheckpointError(f"no checkpoint to resume from in {out}")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(config.to_text())
    write_manifest(out / "manifest.txt", config.seed, config, ablation=args.ablation or "", data=args.data)
    state = train_loop(config, data, out, resume=resume)
    print(f"finished at step {state.step}; metrics in {out / 'metrics.csv'}")
    return 0


def _load_state(args):
    expected = _load_config(args) if args.config else None
    state = load_checkpoint(args.checkpoint, expected=expected)
    return state, read_dataset(args.data)


def cmd_eval(args) -> int:
    state, data = _load_state(args)
    table = extract_embeddings(state, data, args.network)
    seed = state.config.seed if args.seed is None else args.seed
    if args.metric == "probe":
        features = table.features if args.space == "backbone" else table.embeddings
        header = ["fraction", "seed", "accuracy", "mean_auc", "num_train", "num_test"] + [f"auc_{c}" for c in CLASSES]
        rows = []
        for fraction in args.fractions:
            r = linear_probe(features, table.labels, fraction, seed, num_classes=len(CLASSES))
            rows.append([fraction, seed, r.accuracy, r.mean_auc, r.num_train, r.num_test] + [r.auc[c] for c in range(len(CLASSES))])
            print(f"probe fraction={fraction}: accuracy={r.accuracy:.4f} mean_auc={r.mean_auc:.4f}")
    elif args.metric == "gap":
        g = modality_gap(table.embeddings, table.kinds, table.labels)
        header = ["class", "inter", "intra", "ratio", "degenerate"]
        rows = [[CLASSES[c], inter, "", "", ""] for c, inter in sorted(g.per_class.items())]
        rows.append(["all", g.inter, g.intra, g.ratio, g.degenerate])
        print(f"gap ratio={g.ratio:.4f} (inter={g.inter:.4f}, intra={g.intra:.4f})")
    else:
        r = retrieval_eval(table.embeddings, extract_text_embeddings(state, data), args.ks)
        header = ["direction"] + [f"R@{k}" for k in args.ks]
        rows = [["image_to_text"] + [r.image_to_text[k] for k in args.ks], ["text_to_image"] + [r.text_to_image[k] for k in args.ks]]
        print("retrieval " + " ".join(f"R@{k}={r.image_to_text[k]:.4f}" for k in args.ks))
    _write_csv(args.out, header, rows)
    write_manifest(_manifest_for(args.out), seed, state.config, checkpoint=args.checkpoint, data=args.data, metric=args.metric)
    return 0


def cmd_select(args) -> int:
    state, data = _load_state(args)
    rep = selection_report(state, data, args.network, args.k)
    rows = [[r.sample_id, " ".join(map(str, r.selected)), " ".join(map(str, r.truth)), r.recall, r.baseline] for r in rep.rows]
    rows.append(["mean", "", "", rep.mean_recall, rep.mean_baseline])
    _write_csv(args.out, ["sample", "selected", "truth", "recall", "baseline"], rows)
    if args.attention_out:
        ids = [r.sample_id for r in rep.rows]
        _write_csv(args.attention_out, ["sample"] + [f"v{j}" for j in range(rep.attention.shape[1])], [[i, *v] for i, v in zip(ids, rep.attention)])
    write_manifest(_manifest_for(args.out), state.config.seed, state.config, checkpoint=args.checkpoint, data=args.data, k=rep.k)
    print(f"selection recall@{rep.k}={rep.mean_recall:.4f} (random baseline {rep.mean_baseline:.4f})")
    return 0


def cmd_project(args) -> int:
    state, data = _load_state(args)
    table = extract_embeddings(state, data, args.network)
    coords = pca_project(table.embeddings, 2)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_projection(coords, table.kinds, table.labels, args.out)
    write_manifest(_manifest_for(args.out), state.config.seed, state.config, checkpoint=args.checkpoint, data=args.data)
    print(f"wrote {len(coords)} projected points to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    # global flags are accepted before or after the subcommand; SUPPRESS keeps a
    # subcommand from overwriting a value given at the top level
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override the seed (default: from config)")
    common.add_argument("--config", default=argparse.SUPPRESS, help="plain-text key=value training config")

    p = argparse.ArgumentParser(prog="crossdim", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=None, help="override the seed (default: from config)")
    p.add_argument("--config", default=None, help="plain-text key=value training config")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gendata", parents=[common], help="generate a synthetic paired corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--n-2d", type=int, default=400)
    g.add_argument("--n-3d", type=int, default=200)
    g.add_argument("--classes", default=",".join(CLASSES), help="comma-separated subset of " + ",".join(CLASSES))
    g.set_defaults(func=cmd_gendata)

    t = sub.add_parser("pretrain", parents=[common], help="pre-train on a dataset file")
    t.add_argument("--data", required=True)
    t.add_argument("--out-dir", required=True)
    t.add_argument("--resume", default=None, help="checkpoint path, or 'latest' for the newest in --out-dir")
    t.add_argument("--ablation", choices=sorted(ABLATIONS), default=None)
    t.set_defaults(func=cmd_pretrain)

    def checkpoint_args(sp):
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--data", required=True)
        sp.add_argument("--out", required=True)
        sp.add_argument("--network", choices=("student", "teacher"), default="student")

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    esub = e.add_subparsers(dest="metric", required=True)
    ep = esub.add_parser("probe", parents=[common], help="linear probe on frozen features")
    checkpoint_args(ep)
    ep.add_argument("--fractions", type=float, nargs="+", default=[0.01, 0.1, 1.0])
    ep.add_argument("--space", choices=("backbone", "shared"), default="backbone")
    eg = esub.add_parser("gap", parents=[common], help="2D/3D modality gap")
    checkpoint_args(eg)
    er = esub.add_parser("retrieval", parents=[common], help="image-report retrieval recall")
    checkpoint_args(er)
    er.add_argument("--ks", type=int, nargs="+", default=[1, 5])
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("select", parents=[common], help="slice-selection recall against ground truth")
    checkpoint_args(s)
    s.set_defaults(network="teacher")
    s.add_argument("--k", type=int, default=None)
    s.add_argument("--attention-out", default=None, help="also dump per-volume attention vectors")
    s.set_defaults(func=cmd_select)

    pr = sub.add_parser("project", parents=[common], help="2-D PCA projection of shared embeddings")
    checkpoint_args(pr)
    pr.set_defaults(func=cmd_project)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (DatasetError, CheckpointError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
