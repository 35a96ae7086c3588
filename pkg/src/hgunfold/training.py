"""Outer training loop: classification meta-loss on unfolded embeddings.

Each epoch runs a full-batch forward through the K unfolded steps with a
tape, seeds the reverse pass with the cross-entropy gradient at the labeled
training rows, and applies an optimizer step to all trainable parameters
(base transforms, compatibility matrices, readouts). Model selection keeps
the parameters from the best validation epoch.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diff import GradSet, backward, forward_with_tape
from .energy import EmbeddingSet, ParamSet, base_embed, check_shapes, energy_value
from .hetgraph import HeteroGraph
from .unfolding import NonFiniteError, UnfoldConfig, _resolve_alpha, step_bound_report, unfold


@dataclass
class TrainConfig:
    epochs: int = 100
    optimizer: str = "adam"
    learning_rate: float = 1e-2
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    dropout_rate: float = 0.0
    patience: int = 0  # 0 disables early stopping
    hidden: int = 32
    fixed_identity_h: bool = False
    identity_readout: bool = False
    mlp_base: bool = False
    unfold: UnfoldConfig = field(default_factory=UnfoldConfig)

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class SplitMetrics:
    per_type: dict[str, float]
    overall: float


@dataclass
class Metrics:
    splits: dict[str, SplitMetrics]
    final_train_loss: float | None = None
    best_epoch: int | None = None

    def as_dict(self) -> dict:
        return {
            "splits": {
                name: {"per_type": sm.per_type, "overall": sm.overall}
                for name, sm in self.splits.items()
            },
            "final_train_loss": self.final_train_loss,
            "best_epoch": self.best_epoch,
        }


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    train_acc: float
    val_acc: float
    energy: float


# ---------------------------------------------------------------------------
# readout and meta-loss


def readout(y_rows: np.ndarray, weight: np.ndarray | None, bias: np.ndarray | None) -> np.ndarray:
    """Node-wise class scores: affine map, or the rows themselves when weight is None."""
    if weight is None:
        return y_rows
    scores = y_rows @ weight
    if bias is not None:
        scores = scores + bias
    return scores


def readout_scores(params: ParamSet, s: str, y_rows: np.ndarray) -> np.ndarray:
    if params.identity_readout:
        return y_rows
    return readout(y_rows, params.readout_weight[s], params.readout_bias[s])


def _log_softmax_nll(scores: np.ndarray, targets: np.ndarray) -> np.ndarray:
    # shift by the (real part of the) row max for stable exponentials
    shift = scores.real.max(axis=1, keepdims=True)
    z = scores - shift
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True)) + shift
    picked = scores[np.arange(scores.shape[0]), targets]
    return lse[:, 0] - picked


def _split_indices(graph: HeteroGraph, s: str, split: str) -> np.ndarray:
    parts = graph.splits.get(s)
    if parts is None:
        return np.zeros(0, dtype=np.int64)
    idx = parts[split]
    labels = graph.labels[s]
    return idx[labels[idx] >= 0]


def meta_loss(
    y_final: EmbeddingSet, graph: HeteroGraph, params: ParamSet, split: str
) -> tuple[float, EmbeddingSet]:
    """Mean cross-entropy over labeled nodes of the split, summed across types.

    Also returns the loss gradient with respect to the final embeddings,
    nonzero only at the rows that enter the loss.
    """
    loss, d_y, _, _ = meta_loss_grads(y_final, graph, params, split)
    return loss, d_y


def meta_loss_grads(
    y_final: EmbeddingSet, graph: HeteroGraph, params: ParamSet, split: str
) -> tuple[float, EmbeddingSet, dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Meta-loss with seed gradient and readout-parameter gradients."""
    d_y: EmbeddingSet = {s: np.zeros_like(v) for s, v in y_final.items()}
    g_weight: dict[str, np.ndarray] = {
        k: np.zeros_like(v) for k, v in params.readout_weight.items()
    }
    g_bias: dict[str, np.ndarray] = {
        k: np.zeros_like(v) for k, v in params.readout_bias.items()
    }

    total = 0.0
    any_rows = False
    for s in graph.labeled_types:
        idx = _split_indices(graph, s, split)
        if idx.size == 0:
            continue
        any_rows = True
        rows = y_final[s][idx]
        targets = graph.labels[s][idx]
        scores = readout_scores(params, s, rows)
        nll = _log_softmax_nll(scores, targets)
        total = total + nll.mean()

        if np.iscomplexobj(scores):
            continue  # directional probes only need the loss value
        probs = np.exp(scores - scores.max(axis=1, keepdims=True))
        probs /= probs.sum(axis=1, keepdims=True)
        probs[np.arange(idx.size), targets] -= 1.0
        probs /= idx.size
        if params.identity_readout:
            d_y[s][idx] = probs
        else:
            d_y[s][idx] = probs @ params.readout_weight[s].T
            g_weight[s] = rows.T @ probs
            g_bias[s] = probs.sum(axis=0)

    if not any_rows:
        raise ValueError(f"split {split!r} is empty for every labeled type")
    return total if np.iscomplexobj(total) else float(total), d_y, g_weight, g_bias


def loss_and_grads(
    graph: HeteroGraph, params: ParamSet, cfg: UnfoldConfig, split: str
):
    """Forward + reverse pass; returns (loss, full GradSet, UnfoldResult, Tape)."""
    result, tape = forward_with_tape(graph, params, cfg)
    loss, d_y, g_weight, g_bias = meta_loss_grads(result.y_final, graph, params, split)
    grads, _ = backward(tape, d_y)
    grads.readout_weight = g_weight
    grads.readout_bias = g_bias
    return loss, grads, result, tape


# ---------------------------------------------------------------------------
# evaluation


def _accuracy(graph: HeteroGraph, params: ParamSet, y_final: EmbeddingSet, split: str):
    per_type: dict[str, float] = {}
    correct = 0
    count = 0
    for s in graph.labeled_types:
        idx = _split_indices(graph, s, split)
        if idx.size == 0:
            continue
        scores = readout_scores(params, s, y_final[s][idx])
        pred = np.argmax(scores, axis=1)
        hits = int((pred == graph.labels[s][idx]).sum())
        per_type[s] = hits / idx.size
        correct += hits
        count += idx.size
    if count == 0:
        raise ValueError(f"split {split!r} is empty for every labeled type")
    return per_type, correct / count


def evaluate(
    graph: HeteroGraph, params: ParamSet, cfg: UnfoldConfig, split: str
) -> Metrics:
    """Accuracy per labeled type plus the micro-averaged overall accuracy."""
    result = unfold(graph, params, cfg)
    per_type, overall = _accuracy(graph, params, result.y_final, split)
    return Metrics(splits={split: SplitMetrics(per_type=per_type, overall=overall)})


# ---------------------------------------------------------------------------
# initialization and optimizers


def init_params(
    graph: HeteroGraph,
    hidden: int,
    rng: np.random.Generator,
    fixed_identity_h: bool = False,
    identity_readout: bool = False,
    mlp_base: bool = False,
) -> ParamSet:
    """Uniform fan-in initialization; compatibility matrices start small."""
    weights: dict[str, np.ndarray] = {}
    weights2: dict[str, np.ndarray] | None = {} if mlp_base else None
    for nt in graph.node_types:
        d0 = graph.features[nt.name].shape[1]
        bound = 1.0 / np.sqrt(d0)
        weights[nt.name] = rng.uniform(-bound, bound, size=(d0, hidden))
        if mlp_base:
            bound2 = 1.0 / np.sqrt(hidden)
            weights2[nt.name] = rng.uniform(-bound2, bound2, size=(hidden, hidden))

    compat: dict[str, np.ndarray] = {}
    for et in graph.edge_types:
        if fixed_identity_h:
            compat[et.name] = np.eye(hidden)
        else:
            bound = 1.0 / np.sqrt(hidden)
            compat[et.name] = 0.1 * rng.uniform(-bound, bound, size=(hidden, hidden))

    readout_weight: dict[str, np.ndarray] = {}
    readout_bias: dict[str, np.ndarray] = {}
    for nt in graph.node_types:
        if not nt.labeled:
            continue
        c = int(nt.num_classes)
        if identity_readout:
            if hidden != c:
                raise ValueError(
                    f"identity readout needs embedding dim == num_classes for "
                    f"type {nt.name!r} ({hidden} != {c})"
                )
            continue
        bound = 1.0 / np.sqrt(hidden)
        readout_weight[nt.name] = rng.uniform(-bound, bound, size=(hidden, c))
        readout_bias[nt.name] = np.zeros(c)

    return ParamSet(
        weights=weights,
        compat=compat,
        readout_weight=readout_weight,
        readout_bias=readout_bias,
        weights2=weights2,
        identity_readout=identity_readout,
        fixed_compat=fixed_identity_h,
    )


INIT_SCHEME = "uniform fan-in for W and theta, uniform fan-in x 0.1 for H, zero bias"


def _trainable_arrays(params: ParamSet) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {}
    for k, v in params.weights.items():
        arrays[f"W:{k}"] = v
    if params.weights2 is not None:
        for k, v in params.weights2.items():
            arrays[f"W2:{k}"] = v
    if not params.fixed_compat:
        for k, v in params.compat.items():
            arrays[f"H:{k}"] = v
    if not params.identity_readout:
        for k, v in params.readout_weight.items():
            arrays[f"theta:{k}"] = v
        for k, v in params.readout_bias.items():
            arrays[f"bias:{k}"] = v
    return arrays


def _grad_arrays(grads: GradSet, params: ParamSet) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {}
    for k, v in grads.weights.items():
        arrays[f"W:{k}"] = v
    if grads.weights2 is not None:
        for k, v in grads.weights2.items():
            arrays[f"W2:{k}"] = v
    if not params.fixed_compat:
        for k, v in grads.compat.items():
            arrays[f"H:{k}"] = v
    if not params.identity_readout:
        for k, v in grads.readout_weight.items():
            arrays[f"theta:{k}"] = v
        for k, v in grads.readout_bias.items():
            arrays[f"bias:{k}"] = v
    return arrays


class SgdOptimizer:
    def __init__(self, lr: float, weight_decay: float):
        self.lr = lr
        self.weight_decay = weight_decay

    def step(self, arrays: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for key, p in arrays.items():
            g = grads[key]
            if self.weight_decay:
                g = g + self.weight_decay * p
            p -= self.lr * g


class AdamOptimizer:
    def __init__(self, lr: float, weight_decay: float, beta1: float, beta2: float, eps: float):
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, arrays: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        for key, p in arrays.items():
            g = grads[key]
            if self.weight_decay:
                g = g + self.weight_decay * p
            m = self.m.setdefault(key, np.zeros_like(p))
            v = self.v.setdefault(key, np.zeros_like(p))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            m_hat = m / (1.0 - self.beta1**self.t)
            v_hat = v / (1.0 - self.beta2**self.t)
            p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _make_optimizer(cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return SgdOptimizer(cfg.learning_rate, cfg.weight_decay)
    return AdamOptimizer(
        cfg.learning_rate, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.adam_eps
    )


# ---------------------------------------------------------------------------
# the training loop


def _dropout_scale(
    graph: HeteroGraph, params: ParamSet, rate: float, rng: np.random.Generator
) -> EmbeddingSet | None:
    if rate <= 0.0:
        return None
    scale: EmbeddingSet = {}
    keep = 1.0 - rate
    for nt in graph.node_types:
        shape = (nt.count, params.embed_dim(nt.name))
        scale[nt.name] = (rng.random(shape) < keep).astype(float) / keep
    return scale


def train(graph: HeteroGraph, cfg: TrainConfig):
    """Run the bilevel loop; returns (params, metrics, history, run_info).

    Deterministic for a fixed seed. ``run_info`` carries the resolved step
    size, the step-size bound report, and the model-selection record that the
    run directory metadata wants.
    """
    rng = np.random.default_rng(cfg.seed)
    params = init_params(
        graph,
        cfg.hidden,
        rng,
        fixed_identity_h=cfg.fixed_identity_h,
        identity_readout=cfg.identity_readout,
        mlp_base=cfg.mlp_base,
    )
    check_shapes(graph, params)

    bound = step_bound_report(graph, params, cfg.unfold.lam)
    alpha = cfg.unfold.alpha if cfg.unfold.alpha is not None else 0.99 * bound.bound
    ucfg = UnfoldConfig(
        alpha=alpha, steps=cfg.unfold.steps, lam=cfg.unfold.lam, prox=cfg.unfold.prox
    )
    alpha_exceeds = alpha >= bound.bound
    run_info = {
        "alpha": alpha,
        "alpha_source": "auto" if cfg.unfold.alpha is None else "configured",
        "alpha_exceeds_bound": bool(alpha_exceeds),
        "step_bound": bound.as_dict(),
        "initialization": INIT_SCHEME,
        "model_selection": "best validation accuracy",
    }

    has_val = any(
        _split_indices(graph, s, "val").size > 0 for s in graph.labeled_types
    )
    optimizer = _make_optimizer(cfg)
    history: list[EpochRecord] = []
    best_val = -np.inf
    best_epoch = -1
    best_params: ParamSet | None = None
    since_best = 0

    for epoch in range(1, cfg.epochs + 1):
        scale = _dropout_scale(graph, params, cfg.dropout_rate, rng)
        result, tape = forward_with_tape(graph, params, ucfg, dropout_scale=scale)
        loss, d_y, g_weight, g_bias = meta_loss_grads(
            result.y_final, graph, params, "train"
        )
        if not np.isfinite(loss):
            raise NonFiniteError(f"non-finite training loss at epoch {epoch}")
        grads, _ = backward(tape, d_y)
        grads.readout_weight = g_weight
        grads.readout_bias = g_bias

        if scale is None:
            y_eval = result.y_final
        else:
            y_eval = unfold(graph, params, ucfg).y_final
        _, train_acc = _accuracy(graph, params, y_eval, "train")
        if has_val:
            _, val_acc = _accuracy(graph, params, y_eval, "val")
        else:
            val_acc = float("nan")
        energy = energy_value(graph, params, result.y_final, ucfg.energy(), base=tape.base)
        history.append(EpochRecord(epoch, float(loss), train_acc, val_acc, energy))

        if has_val and val_acc > best_val:
            best_val = val_acc
            best_epoch = epoch
            best_params = params.copy()
            since_best = 0
        else:
            since_best += 1

        optimizer.step(_trainable_arrays(params), _grad_arrays(grads, params))

        if cfg.patience > 0 and has_val and since_best >= cfg.patience:
            break

    if best_params is not None:
        final_params = best_params
    else:
        final_params = params
        best_epoch = history[-1].epoch if history else -1

    splits = {}
    for split in ("train", "val", "test"):
        try:
            per_type, overall = _accuracy(
                graph, final_params, unfold(graph, final_params, ucfg).y_final, split
            )
            splits[split] = SplitMetrics(per_type=per_type, overall=overall)
        except ValueError:
            continue
    metrics = Metrics(
        splits=splits,
        final_train_loss=history[-1].loss if history else None,
        best_epoch=best_epoch,
    )
    return final_params, metrics, history, run_info


# ---------------------------------------------------------------------------
# parameter serialization (versioned little-endian dump)

_PARAMS_MAGIC = b"HGUP"
_PARAMS_VERSION = 1


def save_params(params: ParamSet, path: str | Path) -> None:
    """Binary dump: magic, version, JSON meta, then sorted named float64 blocks."""
    entries: dict[str, np.ndarray] = {}
    for k, v in params.weights.items():
        entries[f"W:{k}"] = v
    if params.weights2 is not None:
        for k, v in params.weights2.items():
            entries[f"W2:{k}"] = v
    for k, v in params.compat.items():
        entries[f"H:{k}"] = v
    for k, v in params.readout_weight.items():
        entries[f"theta:{k}"] = v
    for k, v in params.readout_bias.items():
        entries[f"bias:{k}"] = v

    meta = json.dumps(
        {
            "identity_readout": params.identity_readout,
            "fixed_compat": params.fixed_compat,
            "mlp": params.weights2 is not None,
        },
        sort_keys=True,
    ).encode("utf-8")

    buf = bytearray()
    buf += _PARAMS_MAGIC
    buf += struct.pack("<I", _PARAMS_VERSION)
    buf += struct.pack("<I", len(meta))
    buf += meta
    buf += struct.pack("<I", len(entries))
    for name in sorted(entries):
        arr = np.ascontiguousarray(entries[name], dtype="<f8")
        name_b = name.encode("utf-8")
        buf += struct.pack("<H", len(name_b))
        buf += name_b
        buf += struct.pack("<B", arr.ndim)
        for dim in arr.shape:
            buf += struct.pack("<I", dim)
        buf += arr.tobytes(order="C")
    Path(path).write_bytes(bytes(buf))


def load_params(path: str | Path) -> ParamSet:
    raw = Path(path).read_bytes()
    if raw[:4] != _PARAMS_MAGIC:
        raise ValueError(f"{path}: not a parameter dump (bad magic)")
    off = 4
    (version,) = struct.unpack_from("<I", raw, off)
    off += 4
    if version != _PARAMS_VERSION:
        raise ValueError(f"{path}: unsupported parameter dump version {version}")
    (meta_len,) = struct.unpack_from("<I", raw, off)
    off += 4
    meta = json.loads(raw[off : off + meta_len].decode("utf-8"))
    off += meta_len
    (n_entries,) = struct.unpack_from("<I", raw, off)
    off += 4

    buckets: dict[str, dict[str, np.ndarray]] = {
        "W": {},
        "W2": {},
        "H": {},
        "theta": {},
        "bias": {},
    }
    for _ in range(n_entries):
        (name_len,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off : off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<B", raw, off)
        off += 1
        shape = []
        for _ in range(ndim):
            (dim,) = struct.unpack_from("<I", raw, off)
            off += 4
            shape.append(dim)
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape)
        off += count * 8
        prefix, key = name.split(":", 1)
        buckets[prefix][key] = arr.astype(float)

    return ParamSet(
        weights=buckets["W"],
        compat=buckets["H"],
        readout_weight=buckets["theta"],
        readout_bias=buckets["bias"],
        weights2=buckets["W2"] if meta.get("mlp") else None,
        identity_readout=bool(meta.get("identity_readout", False)),
        fixed_compat=bool(meta.get("fixed_compat", False)),
    )
