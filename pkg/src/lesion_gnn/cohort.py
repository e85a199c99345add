"""Synthetic patient cohorts with a planted, recoverable lesion-level signal.

Each patient carries between 2 and 40 lesions (log-uniform).  In every
patient a fraction ``signal_fraction`` of lesions is "localized": placed
near one of the MS-typical region anchors.  In positive patients those
localized lesions also carry the signal, a shift of ``signal_strength``
along a fixed unit direction of the feature space.  Negative patients get
the same spatial layout without the shift, so position alone says nothing
about the label.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import CohortParseError, ParameterError, SchemaError
from .graph import REGIONS, GraphConfig, Lesion, LesionGraph

REGION_ANCHORS = {
    "periventricular": (0.50, 0.55, 0.55),
    "subcortical": (0.30, 0.45, 0.70),
    "juxtacortical": (0.12, 0.50, 0.80),
    "infratentorial": (0.50, 0.35, 0.12),
}
DEFAULT_REGION_PRIORS = {
    "periventricular": 0.45,
    "subcortical": 0.0,
    "juxtacortical": 0.30,
    "infratentorial": 0.25,
}
TWO_YEAR_FRACTION = 347 / 430


@dataclass(frozen=True)
class CohortSpec:
    n_patients: int = 430
    positive_fraction: float = 303 / 430
    lesion_count_range: tuple[int, int] = (2, 40)
    feature_dim: int = 16
    signal_fraction: float = 0.5
    signal_strength: float = 1.0
    noise_std: float = 0.5
    signal_spread: float = 0.08
    region_priors: dict = field(default_factory=lambda: dict(DEFAULT_REGION_PRIORS))
    label_2y_fraction: float = TWO_YEAR_FRACTION
    label_2y_flip: float = 0.1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "lesion_count_range", tuple(int(v) for v in self.lesion_count_range))
        lo, hi = self.lesion_count_range
        if self.n_patients < 1:
            raise ParameterError(f"n_patients must be >= 1, got {self.n_patients}")
        if not 1 <= lo <= hi:
            raise ParameterError(f"invalid lesion_count_range {self.lesion_count_range}")
        if self.feature_dim < 4:
            raise ParameterError(f"feature_dim must be >= 4 (3 are positions), got {self.feature_dim}")
        for name in ("positive_fraction", "signal_fraction"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ParameterError(f"{name} must lie in (0, 1], got {v}")
        if not 0.0 <= self.label_2y_fraction <= 1.0 or not 0.0 <= self.label_2y_flip <= 1.0:
            raise ParameterError("two-year label fractions must lie in [0, 1]")
        if self.signal_strength < 0 or self.noise_std <= 0 or self.signal_spread <= 0:
            raise ParameterError("signal_strength must be >= 0; noise_std and signal_spread > 0")
        unknown = set(self.region_priors) - set(REGIONS)
        total = sum(self.region_priors.values())
        if unknown or total <= 0 or min(self.region_priors.values()) < 0:
            raise ParameterError(f"invalid region_priors {self.region_priors}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lesion_count_range"] = list(self.lesion_count_range)
        return d

    @classmethod
    def from_overrides(cls, overrides: Iterable[str] = (), **base) -> "CohortSpec":
        """Build from ``key=value`` strings; values are parsed as JSON when possible."""
        kinds = {f.name: f for f in fields(cls)}
        values = dict(base)
        for item in overrides:
            if "=" not in item:
                raise ParameterError(f"spec override {item!r} is not key=value")
            key, raw = item.split("=", 1)
            key = key.strip()
            if key not in kinds:
                raise ParameterError(f"unknown cohort spec field {key!r}")
            try:
                val = json.loads(raw)
            except json.JSONDecodeError:
                val = raw
            if key == "lesion_count_range" and isinstance(val, str):
                val = [int(v) for v in val.replace("-", ",").split(",")]
            values[key] = val
        return cls(**values)


@dataclass
class PatientRecord:
    patient_id: str
    label_1y: int
    label_2y: int | None
    lesions: list[Lesion]
    ground_truth_signal: list[bool] | None = None

    def label(self, task: str = "1y") -> int | None:
        if task == "1y":
            return self.label_1y
        if task == "2y":
            return self.label_2y
        raise ParameterError(f"task must be '1y' or '2y', got {task!r}")

    def to_graph(self, cfg: GraphConfig | None = None, task: str = "1y") -> LesionGraph:
        y = self.label(task)
        if y is None:
            raise SchemaError(f"patient {self.patient_id} has no {task} label")
        return LesionGraph.build(self.lesions, y, cfg, self.patient_id)


def _ceil(x: float) -> int:
    return math.ceil(round(x, 9))


def nearest_region(pos: np.ndarray) -> str:
    names = list(REGION_ANCHORS)
    anchors = np.array([REGION_ANCHORS[n] for n in names])
    return names[int(np.argmin(((anchors - pos) ** 2).sum(axis=1)))]


def generate_cohort(spec: CohortSpec | None = None) -> list[PatientRecord]:
    spec = spec or CohortSpec()
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0xC0401]))
    n = spec.n_patients
    n_pos = int(math.floor(n * spec.positive_fraction + 0.5))
    labels = np.zeros(n, dtype=int)
    labels[:n_pos] = 1
    labels = rng.permutation(labels)

    d_feat = spec.feature_dim - 3
    direction = rng.normal(size=d_feat)
    direction /= np.linalg.norm(direction)

    names = [r for r in REGIONS if spec.region_priors.get(r, 0) > 0]
    probs = np.array([spec.region_priors[r] for r in names], dtype=np.float64)
    probs /= probs.sum()
    anchors = np.array([REGION_ANCHORS[r] for r in names])

    lo, hi = spec.lesion_count_range
    n_2y = int(math.floor(n * spec.label_2y_fraction + 0.5))
    has_2y = np.zeros(n, dtype=bool)
    has_2y[rng.choice(n, size=n_2y, replace=False)] = True

    records = []
    for i in range(n):
        count = int(min(hi, math.floor(math.exp(rng.uniform(math.log(lo), math.log(hi + 1))))))
        n_loc = min(count, _ceil(spec.signal_fraction * count))
        localized = np.zeros(count, dtype=bool)
        localized[rng.choice(count, size=n_loc, replace=False)] = True

        pos = rng.uniform(0.0, 1.0, size=(count, 3))
        which = rng.choice(len(names), size=count, p=probs)
        near = anchors[which] + rng.normal(0.0, spec.signal_spread, size=(count, 3))
        pos[localized] = np.clip(near[localized], 0.0, 1.0)

        feats = rng.normal(0.0, spec.noise_std, size=(count, d_feat))
        signal = localized & bool(labels[i])
        feats[signal] += spec.signal_strength * direction

        flip = rng.random() < spec.label_2y_flip
        label_2y = int(labels[i] ^ int(flip)) if has_2y[i] else None
        lesions = [
            Lesion(pos[j], np.concatenate([feats[j], pos[j]]), nearest_region(pos[j]))
            for j in range(count)
        ]
        records.append(PatientRecord(f"P{i:04d}", int(labels[i]), label_2y, lesions, signal.tolist()))
    return records


def cohort_graphs(records: Sequence[PatientRecord], cfg: GraphConfig | None = None,
                  task: str = "1y") -> list[LesionGraph]:
    """Graphs for every record that carries a label for ``task``."""
    usable = [r for r in records if r.label(task) is not None]
    if not usable:
        raise SchemaError(f"no patient in the cohort has a {task} label")
    return [r.to_graph(cfg, task) for r in usable]


# -- persistence --------------------------------------------------------------------------------


def _record_to_json(rec: PatientRecord) -> str:
    obj = {
        "id": rec.patient_id,
        "label_1y": rec.label_1y,
        "label_2y": rec.label_2y,
        "lesions": [
            {"pos": [float(v) for v in les.position], "region": les.region,
             "feat": [float(v) for v in les.features]}
            for les in rec.lesions
        ],
    }
    if rec.ground_truth_signal is not None:
        obj["signal"] = [bool(s) for s in rec.ground_truth_signal]
    return json.dumps(obj, separators=(",", ":"))


def save_cohort(records: Sequence[PatientRecord], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(_record_to_json(rec))
            fh.write("\n")


def _parse_line(obj: dict, lineno: int) -> PatientRecord:
    try:
        lesions = [Lesion(l["pos"], l["feat"], l["region"]) for l in obj["lesions"]]
        label_1y = int(obj["label_1y"])
        label_2y = obj.get("label_2y")
        label_2y = None if label_2y is None else int(label_2y)
        signal = obj.get("signal")
        pid = str(obj["id"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CohortParseError(f"bad patient record ({exc})", lineno) from exc
    if not lesions:
        raise SchemaError(f"line {lineno}: patient has no lesions")
    if label_1y not in (0, 1) or label_2y not in (None, 0, 1):
        raise SchemaError(f"line {lineno}: labels must be 0 or 1")
    if signal is not None and len(signal) != len(lesions):
        raise SchemaError(f"line {lineno}: signal flags do not match lesion count")
    return PatientRecord(pid, label_1y, label_2y, lesions, None if signal is None else [bool(s) for s in signal])


def load_cohort(path) -> list[PatientRecord]:
    records = []
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CohortParseError(f"invalid JSON ({exc.msg})", lineno) from exc
            rec = _parse_line(obj, lineno)
            for les in rec.lesions:
                if dim is None:
                    dim = les.features.size
                elif les.features.size != dim:
                    raise SchemaError(f"line {lineno}: feature length {les.features.size}, expected {dim}")
            records.append(rec)
    if not records:
        raise SchemaError(f"{path}: empty cohort file")
    return records


def cohort_stats(records: Sequence[PatientRecord]) -> dict:
    if not records:
        raise ParameterError("empty cohort")
    labels = np.array([r.label_1y for r in records])
    counts = [len(r.lesions) for r in records]
    regions = Counter(les.region for r in records for les in r.lesions)
    total = sum(regions.values())
    has_2y = [r.label_2y for r in records if r.label_2y is not None]
    return {
        "n_patients": len(records),
        "n_positive": int(labels.sum()),
        "n_negative": int(len(labels) - labels.sum()),
        "positive_fraction": float(labels.mean()),
        "n_with_label_2y": len(has_2y),
        "n_positive_2y": int(sum(has_2y)),
        "lesion_count_histogram": dict(sorted(Counter(counts).items())),
        "region_fractions": {r: regions.get(r, 0) / total for r in REGIONS},
    }
