"""Ten-fold cross-validation, fold reports and one-axis hyperparameter sweeps."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .cohort import PatientRecord, cohort_graphs
from .errors import DegenerateDataError, LesionGNNError, ParameterError
from .graph import LesionGraph
from .metrics import precision_recall_f1, roc_auc
from .model import (ModelConfig, ModelParams, hidden_dims_for_depth, logistic_regression_fit,
                    mean_feature_vector, predict_proba)
from .training import TrainConfig, TrainResult, substream, train_fold

log = logging.getLogger(__name__)

N_FOLDS = 10
SWEEP_AXES = ("r", "k", "tau", "layers", "spm", "layer_kind", "model")


@dataclass
class FoldSplit:
    fold_index: int
    train_ids: list[str]
    val_ids: list[str]
    test_ids: list[str]


def make_folds(ids: Sequence[str], labels: Sequence[int], seed: int = 0, n_folds: int = N_FOLDS) -> list[FoldSplit]:
    """Stratified rotation: fold i tests partition i, validates on i+1, trains on the rest."""
    ids = list(ids)
    y = np.asarray(labels).astype(int)
    if len(ids) != y.size:
        raise ParameterError(f"{len(ids)} ids vs {y.size} labels")
    if len(ids) < 2 * n_folds:
        raise ParameterError(f"need at least {2 * n_folds} patients for {n_folds}-fold CV, got {len(ids)}")
    if y.min() == y.max():
        raise DegenerateDataError("cross-validation needs both classes")
    minority = min(int(y.sum()), int(y.size - y.sum()))
    if minority < n_folds:
        raise DegenerateDataError(f"the minority class has {minority} patients; every one of the "
                                  f"{n_folds} test slices needs at least one")
    rng = substream(seed, "folds")
    # deal shuffled positives then shuffled negatives round-robin; sizes differ by at most one
    order = np.concatenate([rng.permutation(np.flatnonzero(y == 1)), rng.permutation(np.flatnonzero(y == 0))])
    part_of = np.empty(len(ids), dtype=int)
    part_of[order] = np.arange(len(ids)) % n_folds
    parts = [[ids[i] for i in np.flatnonzero(part_of == p)] for p in range(n_folds)]
    splits = []
    for f in range(n_folds):
        v = (f + 1) % n_folds
        train = [pid for p in range(n_folds) if p not in (f, v) for pid in parts[p]]
        splits.append(FoldSplit(f, train, parts[v], parts[f]))
    return splits


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), std


@dataclass
class FoldReport:
    aucs: list[float]
    precisions: list[float]
    recalls: list[float]
    f1s: list[float]
    config: dict = field(default_factory=dict)
    params: list = field(default_factory=list, repr=False, compare=False)
    histories: list = field(default_factory=list, repr=False, compare=False)
    test_scores: list = field(default_factory=list, repr=False, compare=False)

    def summary(self, metric: str = "auc") -> tuple[float, float]:
        return _mean_std({"auc": self.aucs, "precision": self.precisions,
                          "recall": self.recalls, "f1": self.f1s}[metric])

    @property
    def mean_auc(self) -> float:
        return self.summary("auc")[0]

    def summary_line(self) -> str:
        lines = []
        for name in ("auc", "precision", "recall", "f1"):
            m, s = self.summary(name)
            lines.append(f"{name.upper() if name == 'auc' else name} {m:.3f} ± {s:.3f}")
        return ", ".join(lines)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["fold", "auc", "precision", "recall", "f1"])
            for i, row in enumerate(zip(self.aucs, self.precisions, self.recalls, self.f1s)):
                w.writerow([i] + [f"{v:.6f}" for v in row])


# A trainer maps (train graphs, val graphs, fold index) to a scoring function over graphs.
Trainer = Callable[[Sequence[LesionGraph], Sequence[LesionGraph], int], Callable[[Sequence[LesionGraph]], np.ndarray]]


@dataclass
class _GNNTrainer:
    model_config: ModelConfig
    train_config: TrainConfig
    keep: dict = field(default_factory=dict)

    def __call__(self, train, val, fold):
        result: TrainResult = train_fold(train, val, self.model_config, self.train_config, fold)
        self.keep["params"] = result.params
        self.keep["history"] = result.history
        params = result.params
        return lambda graphs: predict_proba(graphs, params)


@dataclass
class _LRTrainer:
    seed: int = 0
    keep: dict = field(default_factory=dict)

    def __call__(self, train, val, fold):
        x = np.stack([mean_feature_vector(g) for g in train])
        y = np.array([g.label for g in train])
        model = logistic_regression_fit(x, y, rng=substream(self.seed + fold, "init"))
        return lambda graphs: model.predict_proba(np.stack([mean_feature_vector(g) for g in graphs]))


def _run_fold(trainer, graphs_by_id: dict, split: FoldSplit):
    train = [graphs_by_id[i] for i in split.train_ids]
    val = [graphs_by_id[i] for i in split.val_ids]
    score_fn = trainer(train, val, split.fold_index)
    # test graphs are touched only after model selection finished
    test = [graphs_by_id[i] for i in split.test_ids]
    scores = np.asarray(score_fn(test), dtype=np.float64)
    labels = np.array([g.label for g in test])
    auc = roc_auc(scores, labels)
    prec, rec, f1 = precision_recall_f1(scores, labels)
    keep = getattr(trainer, "keep", {})
    return auc, prec, rec, f1, keep.get("params"), keep.get("history"), scores


def _run_fold_safe(args):
    trainer, graphs_by_id, split = args
    try:
        return _run_fold(trainer, graphs_by_id, split)
    except LesionGNNError as exc:
        raise type(exc)(f"fold {split.fold_index}: {exc}") from exc


def cross_validate(graphs: Sequence[LesionGraph], model_config: ModelConfig | None = None,
                   train_config: TrainConfig | None = None, fold_seed: int | None = None,
                   jobs: int = 1, trainer: Trainer | None = None, baseline: str | None = None) -> FoldReport:
    """Ten-fold CV with checkpoint selection on the validation slice of each fold.

    ``baseline='lr'`` swaps the graph model for mean-feature logistic
    regression; ``trainer`` injects any other model.  Folds depend only on
    patient ids, labels and ``fold_seed`` (default: the training seed).
    """
    model_config = model_config or ModelConfig()
    train_config = train_config or TrainConfig()
    seed = train_config.seed if fold_seed is None else fold_seed
    ids = [g.patient_id for g in graphs]
    if len(set(ids)) != len(ids):
        raise ParameterError("patient ids must be unique")
    splits = make_folds(ids, [g.label for g in graphs], seed)
    by_id = {g.patient_id: g for g in graphs}

    if trainer is None:
        trainer = _LRTrainer(train_config.seed) if baseline == "lr" else _GNNTrainer(model_config, train_config)
    tasks = [(trainer, by_id, s) for s in splits]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_fold_safe, tasks))
    else:
        results = [_run_fold_safe(t) for t in tasks]

    snapshot = {"model": model_config.to_dict(), "train": dataclasses.asdict(train_config),
                "fold_seed": seed, "baseline": baseline}
    return FoldReport(
        aucs=[r[0] for r in results],
        precisions=[r[1] for r in results],
        recalls=[r[2] for r in results],
        f1s=[r[3] for r in results],
        config=snapshot,
        params=[r[4] for r in results],
        histories=[r[5] for r in results],
        test_scores=[(s.test_ids, r[6]) for s, r in zip(splits, results)],
    )


def _parse_bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "on", "yes", "with", "spm"):
        return True
    if s in ("0", "false", "off", "no", "without", "none"):
        return False
    raise ParameterError(f"not a boolean: {v!r}")


def apply_axis(config: ModelConfig, axis: str, value) -> ModelConfig:
    """``config`` with one sweep axis set to ``value``."""
    try:
        if axis == "r":
            return dataclasses.replace(config, r=float(value))
        if axis == "k":
            return dataclasses.replace(config, k=int(value))
        if axis == "tau":
            return dataclasses.replace(config, tau=float(value))
        if axis == "layers":
            n = int(value)
            hidden = hidden_dims_for_depth(n, config.hidden_dims[0] if len(config.hidden_dims) > 1 else 64,
                                           config.hidden_dims[-1])
            return dataclasses.replace(config, hidden_dims=hidden)
        if axis == "spm":
            return dataclasses.replace(config, use_spm=_parse_bool(value))
        if axis == "layer_kind":
            return dataclasses.replace(config, layer_kind=str(value))
        if axis == "model":
            return dataclasses.replace(config, model=str(value))
    except (TypeError, ValueError) as exc:
        raise ParameterError(f"invalid value {value!r} for axis {axis}: {exc}") from exc
    raise ParameterError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")


@dataclass
class SweepRow:
    axis: str
    value: object
    report: FoldReport


def sweep(records: Sequence[PatientRecord], base_config: ModelConfig, train_config: TrainConfig,
          axis: str, values: Sequence, task: str = "1y", jobs: int = 1,
          fold_seed: int | None = None) -> list[SweepRow]:
    """One cross-validation per axis value on identical folds."""
    if not values:
        raise ParameterError("sweep needs at least one value")
    configs = [apply_axis(base_config, axis, v) for v in values]
    rows = []
    graph_cache: dict = {}
    for value, cfg in zip(values, configs):
        key = cfg.graph_config
        if key not in graph_cache:
            graph_cache[key] = cohort_graphs(records, key, task)
        report = cross_validate(graph_cache[key], cfg, train_config, fold_seed=fold_seed, jobs=jobs)
        log.info("sweep %s=%s: %s", axis, value, report.summary_line())
        rows.append(SweepRow(axis, value, report))
    return rows


def write_sweep_csv(rows: Sequence[SweepRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["axis", "value", "mean_auc", "std_auc", "mean_f1", "std_f1"])
        for row in rows:
            ma, sa = row.report.summary("auc")
            mf, sf = row.report.summary("f1")
            w.writerow([row.axis, row.value, f"{ma:.6f}", f"{sa:.6f}", f"{mf:.6f}", f"{sf:.6f}"])


def parse_values(text: str) -> list:
    """Parse ``a,b,c``, ``lo..hi`` (integer step 1) or ``lo..hi:step``."""
    text = text.strip()
    if ".." not in text:
        out = []
        for tok in text.split(","):
            tok = tok.strip()
            if not tok:
                continue
            try:
                out.append(int(tok))
            except ValueError:
                try:
                    out.append(float(tok))
                except ValueError:
                    out.append(tok)
        return out
    rng_part, _, step_part = text.partition(":")
    lo_s, hi_s = rng_part.split("..", 1)
    if not step_part and "." not in lo_s and "." not in hi_s:
        return list(range(int(lo_s), int(hi_s) + 1))
    lo, hi = float(lo_s), float(hi_s)
    step = float(step_part) if step_part else 1.0
    if step <= 0:
        raise ParameterError(f"range step must be positive, got {step}")
    n = int(math.floor((hi - lo) / step + 1e-9)) + 1
    decimals = max(len(s.split(".")[1]) if "." in s else 0 for s in (lo_s, hi_s, step_part or "1"))
    return [round(lo + i * step, decimals) for i in range(n)]
