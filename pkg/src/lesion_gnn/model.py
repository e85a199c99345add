"""Graph classifier (layers -> self-pruning -> sum readout -> MLP) and baselines."""

from __future__ import annotations

import copy
import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from . import autodiff as ad
from .autodiff import Tensor
from .errors import DegenerateDataError, InputError, ParameterError, SchemaError, ShapeError
from .graph import GraphBatch, GraphConfig, LesionGraph, segment_csr
from .layers import LAYER_KINDS, LayerParams, init_layer, layer_forward
from .pruning import PruneResult, compute_scores, retention_count, segment_top_r

MODEL_KINDS = ("gnn", "setproc")
P_INIT_STD = 0.1


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int = 16
    model: str = "gnn"
    layer_kind: str = "gcn"
    hidden_dims: tuple[int, ...] = (64, 8)
    # head_dims[0] is the readout width; each entry feeds one linear layer, the last maps to 1
    head_dims: tuple[int, ...] = (8, 8)
    r: float = 0.5
    k: int = 5
    tau: float = 0.01
    distance_floor: float = 0.0
    dropout: float = 0.5
    use_spm: bool = True

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(d) for d in self.hidden_dims))
        object.__setattr__(self, "head_dims", tuple(int(d) for d in self.head_dims))
        if self.model not in MODEL_KINDS:
            raise ParameterError(f"model must be one of {MODEL_KINDS}, got {self.model!r}")
        if self.layer_kind not in LAYER_KINDS:
            raise ParameterError(f"layer_kind must be one of {LAYER_KINDS}, got {self.layer_kind!r}")
        dims = (self.feature_dim, *self.hidden_dims, *self.head_dims)
        if not self.hidden_dims or not self.head_dims or min(dims) < 1:
            raise ParameterError(f"layer dims must be positive and non-empty, got {dims}")
        if self.head_dims[0] != self.hidden_dims[-1]:
            raise ParameterError("head_dims[0] must equal the last hidden dim (the readout width)")
        if not 0.0 < self.r <= 1.0:
            raise ParameterError(f"r must lie in (0, 1], got {self.r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ParameterError(f"dropout must lie in [0, 1), got {self.dropout}")
        GraphConfig(self.k, self.tau, self.distance_floor)

    @property
    def graph_config(self) -> GraphConfig:
        return GraphConfig(self.k, self.tau, self.distance_floor)

    @property
    def mp_kind(self) -> str:
        return "linear" if self.model == "setproc" else self.layer_kind

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        d["head_dims"] = list(self.head_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise SchemaError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def hidden_dims_for_depth(n_layers: int, width: int = 64, out: int = 8) -> tuple[int, ...]:
    if n_layers < 1:
        raise ParameterError(f"need at least one message-passing layer, got {n_layers}")
    return (width,) * (n_layers - 1) + (out,)


@dataclass
class ModelParams:
    config: ModelConfig
    layers: list[LayerParams]
    p: Tensor
    head: list[LayerParams]
    extra: dict = field(default_factory=dict)

    def named(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, lp in enumerate(self.layers):
            for k, t in lp.weights.items():
                out[f"mp{i}.{k}"] = t
        out["spm.p"] = self.p
        for i, lp in enumerate(self.head):
            for k, t in lp.weights.items():
                out[f"head{i}.{k}"] = t
        return out

    def copy(self) -> "ModelParams":
        clone = copy.deepcopy(self)
        return clone

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        named = self.named()
        for name, t in named.items():
            if name not in arrays:
                raise SchemaError(f"checkpoint lacks parameter {name}")
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise SchemaError(f"parameter {name}: checkpoint shape {arr.shape} vs model {t.shape}")
            t.data = arr.copy()


def init_params(config: ModelConfig, rng: np.random.Generator) -> ModelParams:
    dims = (config.feature_dim, *config.hidden_dims)
    layers = [init_layer(config.mp_kind, a, b, rng) for a, b in zip(dims[:-1], dims[1:])]
    p = Tensor(rng.normal(0.0, P_INIT_STD, size=(config.hidden_dims[-1], 1)), requires_grad=True)
    hdims = (*config.head_dims, 1)
    head = [init_layer("linear", a, b, rng) for a, b in zip(hdims[:-1], hdims[1:])]
    return ModelParams(config, layers, p, head)


@dataclass
class BatchOutput:
    logits: Tensor  # (B, 1)
    scores: np.ndarray | None  # (N,) per node, None without SPM
    retained: np.ndarray  # global node indices that reached the readout
    gated: Tensor | None = None  # rows fed to the readout, aligned with ``retained``


def forward_batch(batch: GraphBatch, params: ModelParams, mode: str = "eval",
                  rng: np.random.Generator | None = None, retained=None,
                  unit_gates: bool = False) -> BatchOutput:
    """Logits for every graph of ``batch``.

    ``retained`` freezes the SPM selection (global node indices);
    ``unit_gates`` replaces the score gates by ones.
    """
    cfg = params.config
    if batch.features.shape[1] != cfg.feature_dim:
        raise ShapeError(f"graphs carry {batch.features.shape[1]} features, model expects {cfg.feature_dim}")
    if mode not in ("train", "eval"):
        raise ParameterError(f"mode must be 'train' or 'eval', got {mode!r}")
    training = mode == "train"

    h = Tensor._wrap(batch.features)
    last = len(params.layers) - 1
    for i, lp in enumerate(params.layers):
        h = layer_forward(h, batch, lp)
        if i < last:
            h = ad.dropout(ad.relu(h), cfg.dropout, training, rng)

    scores = None
    if cfg.use_spm:
        s = compute_scores(h, params.p)
        scores = s.data[:, 0]
        if retained is None:
            retained = segment_top_r(scores, batch.node_graph, batch.sizes, cfg.r)
        retained = np.asarray(retained, dtype=np.intp)
        kept = ad.take_rows(h, retained)
        if not unit_gates:
            kept = kept * ad.take_rows(s, retained)
        pool = segment_csr(batch.node_graph[retained], batch.n_graphs)
        z = ad.spmm(pool, kept)
    else:
        retained = np.arange(batch.n_nodes)
        kept = h
        z = ad.spmm(batch.readout, h, batch.transposed("readout"))

    last = len(params.head) - 1
    for i, lp in enumerate(params.head):
        z = z @ lp["W"] + lp["b"]
        if i < last:
            z = ad.dropout(ad.relu(z), cfg.dropout, training, rng)
    return BatchOutput(z, scores, retained, kept)


def forward(graph: LesionGraph, params: ModelParams, mode: str = "eval",
            rng: np.random.Generator | None = None) -> tuple[float, PruneResult]:
    """Probability of disease activity for one patient, plus the SPM outcome."""
    batch = GraphBatch([graph])
    out = forward_batch(batch, params, mode, rng)
    prob = ad.sigmoid(out.logits).item()
    scores = np.ones(graph.n_nodes) if out.scores is None else out.scores.copy()
    return prob, PruneResult(scores, out.retained.copy(), out.gated)


def set_proc_forward(graph: LesionGraph, params: ModelParams, mode: str = "eval",
                     rng: np.random.Generator | None = None) -> float:
    """Set-Proc baseline: per-lesion feed-forward, SPM, sum readout, head; edges unused."""
    if params.config.model != "setproc":
        raise ParameterError("set_proc_forward needs parameters initialised with model='setproc'")
    return forward(graph, params, mode, rng)[0]


def predict_proba(graphs: Sequence[LesionGraph], params: ModelParams, chunk: int = 64) -> np.ndarray:
    out = []
    for start in range(0, len(graphs), chunk):
        batch = GraphBatch(graphs[start:start + chunk])
        out.append(ad.sigmoid(forward_batch(batch, params, "eval").logits).data[:, 0])
    return np.concatenate(out) if out else np.zeros(0)


# -- mean-feature logistic regression baseline -------------------------------------------


def mean_feature_vector(graph: LesionGraph) -> np.ndarray:
    if graph.n_nodes == 0:
        raise InputError("graph has no lesions")
    return graph.features.mean(axis=0)


@dataclass
class LogisticRegression:
    weights: np.ndarray
    bias: float
    center: np.ndarray
    scale: np.ndarray

    def decision_function(self, x: np.ndarray) -> np.ndarray:
        return ((np.asarray(x) - self.center) / self.scale) @ self.weights + self.bias

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.decision_function(x)))


def logistic_regression_fit(x, y, l2: float = 1e-3, epochs: int = 500, lr: float = 0.1,
                            rng: np.random.Generator | None = None) -> LogisticRegression:
    """Full-batch gradient descent on L2-regularised BCE over standardised inputs.

    The L2 term is applied as a proximal shrink, which keeps the iteration
    stable for arbitrarily large ``l2``.  The bias is not regularised.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.ndim != 2 or x.shape[0] != y.size:
        raise ShapeError(f"logistic regression: x {x.shape} vs y {y.shape}")
    if len(np.unique(y)) < 2:
        raise DegenerateDataError("logistic regression needs samples from both classes")
    center = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale == 0] = 1.0
    xs = (x - center) / scale
    w = np.zeros(x.shape[1])
    b = 0.0
    n = y.size
    for _ in range(epochs):
        prob = 1.0 / (1.0 + np.exp(-(xs @ w + b)))
        err = prob - y
        w = (w - lr * (xs.T @ err) / n) / (1.0 + lr * l2)
        b -= lr * err.mean()
    return LogisticRegression(w, b, center, scale)


# -- checkpoints ------------------------------------------------------------------------------
#
# layout: 8-byte magic, uint32 format version, uint32 header length (little-endian),
# UTF-8 JSON header {"format_version", "code_version", "config", "params": [{"name", "shape"}],
# "extra"}, then every parameter as little-endian float64 in header order.

CKPT_MAGIC = b"LGNNCKPT"
CKPT_VERSION = 1


def save_checkpoint(params: ModelParams, path) -> None:
    named = params.named()
    header = {
        "format_version": CKPT_VERSION,
        "code_version": __version__,
        "config": params.config.to_dict(),
        "params": [{"name": k, "shape": list(t.shape)} for k, t in named.items()],
        "extra": params.extra,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(blob)))
        fh.write(blob)
        for t in named.values():
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> ModelParams:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise SchemaError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != CKPT_VERSION:
        raise SchemaError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    config = ModelConfig.from_dict(header["config"])
    params = init_params(config, np.random.default_rng(0))
    arrays = {}
    offset = 16 + hlen
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        nbytes = 8 * int(np.prod(shape))
        chunk = raw[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise SchemaError(f"{path}: truncated data for {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(shape)
        offset += nbytes
    params.load_arrays(arrays)
    params.extra = header.get("extra", {})
    return params


__all__ = [
    "ModelConfig", "ModelParams", "BatchOutput", "init_params", "forward_batch", "forward",
    "set_proc_forward", "predict_proba", "mean_feature_vector", "logistic_regression_fit",
    "LogisticRegression", "save_checkpoint", "load_checkpoint", "hidden_dims_for_depth",
    "retention_count",
]
