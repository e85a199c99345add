"""Command-line runner: ``generate``, ``cv``, ``sweep`` and ``explain``.

Exit status is 0 on success, 2 for configuration or schema problems and 1
for failures while running.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from . import __version__
from .cohort import CohortSpec, cohort_graphs, cohort_stats, generate_cohort, load_cohort, save_cohort
from .errors import InputError, LesionGNNError, ParameterError, SchemaError, ShapeError, UsageError
from .evaluation import SWEEP_AXES, cross_validate, parse_values, sweep, write_sweep_csv
from .graph import REGIONS, GraphBatch
from .model import ModelConfig, forward_batch, load_checkpoint, save_checkpoint
from .training import TrainConfig

log = logging.getLogger("lesion_gnn")

CONFIG_ERRORS = (ParameterError, SchemaError, ShapeError, UsageError, InputError)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _manifest(out: Path, command: str, seed: int, config: dict) -> None:
    _write_json(out / "run.json", {"command": command, "seed": seed, "code_version": __version__,
                                   "config": config})


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(path: str):
    if not Path(path).is_file():
        raise UsageError(f"cohort file not found: {path}")
    return load_cohort(path)


def _model_config(args, feature_dim: int) -> ModelConfig:
    model = "setproc" if args.model == "setproc" else "gnn"
    return ModelConfig(feature_dim=feature_dim, model=model, layer_kind=args.layer, r=args.r, k=args.k,
                       tau=args.tau, dropout=args.dropout, use_spm=not args.no_spm)


def _train_config(args) -> TrainConfig:
    return TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
                       weight_decay=args.weight_decay, seed=args.seed)


def _feature_dim(records) -> int:
    return int(records[0].lesions[0].features.size)


def cmd_generate(args) -> int:
    spec = CohortSpec.from_overrides(args.spec or [], seed=args.seed)
    out = Path(args.out)
    if out.suffix == ".jsonl":
        out.parent.mkdir(parents=True, exist_ok=True)
        cohort_path, side = out, out.parent
    else:
        side = _out_dir(args.out)
        cohort_path = side / "cohort.jsonl"
    records = generate_cohort(spec)
    save_cohort(records, cohort_path)
    _write_json(side / "spec.json", spec.to_dict())
    _manifest(side, "generate", spec.seed, {"spec": spec.to_dict(), "cohort": str(cohort_path)})
    stats = cohort_stats(records)
    print(f"wrote {stats['n_patients']} patients ({stats['n_positive']} positive) to {cohort_path}")
    return 0


def cmd_cv(args) -> int:
    records = _load(args.cohort)
    mcfg = _model_config(args, _feature_dim(records))
    tcfg = _train_config(args)
    graphs = cohort_graphs(records, mcfg.graph_config, args.task)
    out = _out_dir(args.out)
    baseline = "lr" if args.model == "lr" else None
    report = cross_validate(graphs, mcfg, tcfg, jobs=args.jobs, baseline=baseline)
    report.write_csv(out / "folds.csv")
    if baseline is None:
        (out / "checkpoints").mkdir(exist_ok=True)
        for i, (params, hist) in enumerate(zip(report.params, report.histories)):
            save_checkpoint(params, out / "checkpoints" / f"fold{i}.ckpt")
            with open(out / "checkpoints" / f"fold{i}_history.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["epoch", "train_loss", "val_auc"])
                for rec in hist:
                    w.writerow([rec.epoch, f"{rec.train_loss:.6f}", f"{rec.val_auc:.6f}"])
    _manifest(out, "cv", args.seed, {"cohort": args.cohort, "task": args.task, "model_kind": args.model,
                                     **report.config})
    m, s = report.summary("auc")
    (out / "summary.txt").write_text(f"AUC {m:.3f} ± {s:.3f}\n{report.summary_line()}\n", encoding="utf-8")
    print(f"AUC {m:.3f} ± {s:.3f}")
    print(report.summary_line())
    return 0


def cmd_sweep(args) -> int:
    if args.axis is None or args.values is None:
        raise UsageError("sweep needs --axis and --values")
    if args.axis not in SWEEP_AXES:
        raise ParameterError(f"unknown axis {args.axis!r}; choose from {', '.join(SWEEP_AXES)}")
    records = _load(args.cohort)
    mcfg = _model_config(args, _feature_dim(records))
    tcfg = _train_config(args)
    values = parse_values(args.values)
    out = _out_dir(args.out)
    rows = sweep(records, mcfg, tcfg, args.axis, values, task=args.task, jobs=args.jobs)
    write_sweep_csv(rows, out / "sweep.csv")
    _manifest(out, "sweep", args.seed, {"cohort": args.cohort, "task": args.task, "axis": args.axis,
                                        "values": values, "model": mcfg.to_dict(),
                                        "train": dataclasses.asdict(tcfg)})
    for row in rows:
        m, s = row.report.summary("auc")
        print(f"{args.axis}={row.value}: AUC {m:.3f} ± {s:.3f}")
    return 0


def explain_records(records, params, task: str = "1y") -> dict:
    """Per-lesion scores and retention plus pre/post-pruning region counts."""
    cfg = params.config
    if _feature_dim(records) != cfg.feature_dim:
        raise SchemaError(f"checkpoint expects {cfg.feature_dim} features, cohort has {_feature_dim(records)}")
    patients = []
    pre, post = Counter(), Counter()
    recalls = []
    for rec in records:
        y = rec.label(task)
        graph = rec.to_graph(cfg.graph_config, task if y is not None else "1y")
        out = forward_batch(GraphBatch([graph]), params, "eval")
        prob = float(1.0 / (1.0 + np.exp(-out.logits.data[0, 0])))
        keep = np.zeros(graph.n_nodes, dtype=bool)
        keep[out.retained] = True
        scores = out.scores if out.scores is not None else np.ones(graph.n_nodes)
        lesions = []
        for j, les in enumerate(rec.lesions):
            pre[les.region] += 1
            if keep[j]:
                post[les.region] += 1
            lesions.append({"index": j, "score": float(scores[j]), "retained": bool(keep[j]),
                            "position": [float(v) for v in les.position], "region": les.region})
        entry = {"id": rec.patient_id, "label": y, "probability": prob,
                 "n_retained": int(keep.sum()), "lesions": lesions}
        if rec.ground_truth_signal is not None:
            truth = np.asarray(rec.ground_truth_signal, dtype=bool)
            if truth.any():
                r = float((truth & keep).sum() / truth.sum())
                entry["signal_recall"] = r
                recalls.append(r)
        patients.append(entry)
    n_pre, n_post = sum(pre.values()), sum(post.values())
    hist = [{"region": reg, "pre_count": pre[reg], "pre_fraction": pre[reg] / n_pre,
             "post_count": post[reg], "post_fraction": post[reg] / n_post if n_post else 0.0}
            for reg in REGIONS]
    return {"patients": patients, "region_histogram": hist,
            "mean_signal_recall": float(np.mean(recalls)) if recalls else None}


def cmd_explain(args) -> int:
    if args.checkpoint is None:
        raise UsageError("explain needs --checkpoint")
    records = _load(args.cohort)
    if args.patients:
        wanted = [p.strip() for p in args.patients.split(",") if p.strip()]
        by_id = {r.patient_id: r for r in records}
        missing = [p for p in wanted if p not in by_id]
        if missing:
            raise UsageError(f"unknown patient ids: {', '.join(missing)}")
        records = [by_id[p] for p in wanted]
    params = load_checkpoint(args.checkpoint)
    result = explain_records(records, params, args.task)
    out = _out_dir(args.out)
    _write_json(out / "explanation.json", {"patients": result["patients"],
                                           "mean_signal_recall": result["mean_signal_recall"]})
    with open(out / "region_histogram.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["region", "pre_count", "pre_fraction", "post_count", "post_fraction"])
        for row in result["region_histogram"]:
            w.writerow([row["region"], row["pre_count"], f"{row['pre_fraction']:.6f}",
                        row["post_count"], f"{row['post_fraction']:.6f}"])
    _manifest(out, "explain", args.seed, {"cohort": args.cohort, "checkpoint": args.checkpoint,
                                          "patients": args.patients, "model": params.config.to_dict()})
    print(f"explained {len(result['patients'])} patients -> {out / 'explanation.json'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lesion-gnn", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_cohort=True):
        if needs_cohort:
            p.add_argument("--cohort", required=True, help="cohort JSONL file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--verbose", "-v", action="store_true")

    def model_flags(p):
        p.add_argument("--task", choices=("1y", "2y"), default="1y")
        p.add_argument("--model", choices=("gnn", "setproc", "lr"), default="gnn")
        p.add_argument("--layer", choices=("gcn", "sage", "edge", "gat"), default="gcn")
        p.add_argument("--no-spm", action="store_true", help="read out over all lesions")
        p.add_argument("--r", type=float, default=0.5, help="SPM retention ratio")
        p.add_argument("--k", type=int, default=5, help="neighbours per lesion")
        p.add_argument("--tau", type=float, default=0.01, help="edge weight length scale")
        p.add_argument("--epochs", type=int, default=300)
        p.add_argument("--batch-size", type=int, default=16)
        p.add_argument("--lr", type=float, default=1e-4)
        p.add_argument("--weight-decay", type=float, default=1e-4)
        p.add_argument("--dropout", type=float, default=0.5)
        p.add_argument("--jobs", type=int, default=1, help="concurrent folds")

    g = sub.add_parser("generate", help="write a synthetic cohort")
    common(g, needs_cohort=False)
    g.add_argument("--spec", nargs="*", metavar="KEY=VALUE", help="cohort spec overrides")
    g.set_defaults(func=cmd_generate)

    c = sub.add_parser("cv", help="ten-fold cross-validation")
    common(c)
    model_flags(c)
    c.set_defaults(func=cmd_cv)

    s = sub.add_parser("sweep", help="cross-validate along one hyperparameter axis")
    common(s)
    model_flags(s)
    s.add_argument("--axis", choices=SWEEP_AXES)
    s.add_argument("--values", help="a,b,c or lo..hi or lo..hi:step")
    s.set_defaults(func=cmd_sweep)

    e = sub.add_parser("explain", help="export SPM scores and region histograms")
    common(e)
    e.add_argument("--task", choices=("1y", "2y"), default="1y")
    e.add_argument("--checkpoint", help="checkpoint written by cv")
    e.add_argument("--patients", help="comma-separated patient ids (default: all)")
    e.set_defaults(func=cmd_explain)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CONFIG_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (LesionGNNError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
