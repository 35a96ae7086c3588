"""Relation-aware embedding energy, its gradient, and the closed-form oracle.

The energy couples per-type embeddings Y_s through trainable compatibility
matrices H_t, one per directed edge type:

    E(Y) = sum_s [ 0.5 * ||Y_s - f(X_s; W_s)||_F^2
                   + (lam/2) * sum_t sum_{(i,j) in edges_t} ||y_si H_t - y_s'j||^2 ]

where t ranges over all directed edge types with source type s, so each
undirected edge contributes one term per direction with that direction's own
H matrix. The analytic gradient is

    dE/dY_s = (I + lam D_s) Y_s - f(X_s; W_s)
              + lam * sum_t [ D_st Y_s (H_t H_t^T) - A_t Y_s' (H_t^T + H_tinv) ]

with D_st the per-type degree diagonal and D_s their sum over edge types
leaving s. At small scale the stationarity condition can be assembled as one
dense linear system over the column-stacked embeddings and solved exactly,
which is the reference oracle the iterative layer is tested against.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .hetgraph import HeteroGraph

# Per-type embedding matrices keyed by node type name.
EmbeddingSet = dict[str, np.ndarray]

ASSEMBLE_DIM_CAP = 2000


@dataclass
class EnergyConfig:
    lam: float = 1.0

    def __post_init__(self) -> None:
        if self.lam <= 0:
            raise ValueError("lam must be positive")


@dataclass
class ParamSet:
    """Trainable parameters: base transforms, compatibility matrices, readout.

    ``weights[s]`` maps type-s input features to embeddings. When ``weights2``
    is set the base transform is the two-layer form relu(X W) W2 instead of a
    single linear map. ``compat[t]`` holds one independent matrix per directed
    edge type (canonical and inverse are never tied). Readout parameters exist
    for labeled types only; ``identity_readout`` freezes them to the identity.
    """

    weights: dict[str, np.ndarray]
    compat: dict[str, np.ndarray]
    readout_weight: dict[str, np.ndarray] = field(default_factory=dict)
    readout_bias: dict[str, np.ndarray] = field(default_factory=dict)
    weights2: dict[str, np.ndarray] | None = None
    identity_readout: bool = False
    fixed_compat: bool = False

    def embed_dim(self, s: str) -> int:
        if self.weights2 is not None:
            return self.weights2[s].shape[1]
        return self.weights[s].shape[1]

    def copy(self) -> "ParamSet":
        return ParamSet(
            weights={k: v.copy() for k, v in self.weights.items()},
            compat={k: v.copy() for k, v in self.compat.items()},
            readout_weight={k: v.copy() for k, v in self.readout_weight.items()},
            readout_bias={k: v.copy() for k, v in self.readout_bias.items()},
            weights2=None
            if self.weights2 is None
            else {k: v.copy() for k, v in self.weights2.items()},
            identity_readout=self.identity_readout,
            fixed_compat=self.fixed_compat,
        )


def check_shapes(graph: HeteroGraph, params: ParamSet) -> None:
    """Validate parameter shapes against the graph schema."""
    for nt in graph.node_types:
        w = params.weights.get(nt.name)
        if w is None:
            raise ValueError(f"missing base weight for node type {nt.name!r}")
        d0 = graph.features[nt.name].shape[1]
        if w.shape[0] != d0:
            raise ValueError(
                f"weights[{nt.name}]: expected {d0} input rows, got {w.shape[0]}"
            )
        if params.weights2 is not None:
            w2 = params.weights2.get(nt.name)
            if w2 is None or w2.shape[0] != w.shape[1]:
                raise ValueError(f"weights2[{nt.name}]: missing or mismatched")
    for et in graph.edge_types:
        h = params.compat.get(et.name)
        if h is None:
            raise ValueError(f"missing compatibility matrix for edge type {et.name!r}")
        d_src = params.embed_dim(et.src_type)
        d_dst = params.embed_dim(et.dst_type)
        if h.shape != (d_src, d_dst):
            raise ValueError(
                f"compat[{et.name}]: expected shape {(d_src, d_dst)}, got {h.shape}"
            )


def base_embed(graph: HeteroGraph, params: ParamSet) -> EmbeddingSet:
    """Initial embeddings f(X_s; W_s) per node type (linear, or two-layer with relu)."""
    out: EmbeddingSet = {}
    for nt in graph.node_types:
        x = graph.features[nt.name]
        y = x @ params.weights[nt.name]
        if params.weights2 is not None:
            y = np.maximum(y, 0.0) @ params.weights2[nt.name]
        out[nt.name] = y
    return out


def _base_embed_traced(graph: HeteroGraph, params: ParamSet):
    """Base embeddings plus the hidden activations needed for the reverse pass."""
    out: EmbeddingSet = {}
    hidden: dict[str, np.ndarray] | None = None
    if params.weights2 is not None:
        hidden = {}
    for nt in graph.node_types:
        x = graph.features[nt.name]
        y = x @ params.weights[nt.name]
        if params.weights2 is not None:
            h = np.maximum(y, 0.0)
            hidden[nt.name] = h
            y = h @ params.weights2[nt.name]
        out[nt.name] = y
    return out, hidden


def relation_terms(
    graph: HeteroGraph, params: ParamSet, y: EmbeddingSet
) -> tuple[EmbeddingSet, dict[str, np.ndarray]]:
    """Per-type sum_t [ A_t Y_s' (H_t^T + H_tinv) - D_st Y_s (H_t H_t^T) ].

    This is the edge-coupling part shared by the gradient, the descent step,
    and the reverse pass (the coupling operator is symmetric, so the adjoint
    reuses it unchanged). Also returns the neighbor aggregates A_t Y_s' per
    edge type so callers can cache them.
    """
    terms: EmbeddingSet = {
        nt.name: np.zeros_like(y[nt.name]) for nt in graph.node_types
    }
    aggregates: dict[str, np.ndarray] = {}
    for et in graph.edge_types:
        s, s2 = et.src_type, et.dst_type
        h = params.compat[et.name]
        h_inv = params.compat[et.inverse_of]
        agg = linalg.spmm(graph.adjacency(et.name), y[s2])
        aggregates[et.name] = agg
        deg = graph.degree(s, et.name)
        terms[s] = terms[s] + agg @ (h.T + h_inv) - (deg[:, None] * y[s]) @ (h @ h.T)
    return terms, aggregates


def energy_value(
    graph: HeteroGraph,
    params: ParamSet,
    y: EmbeddingSet,
    cfg: EnergyConfig,
    base: EmbeddingSet | None = None,
) -> float:
    """Evaluate the energy at embeddings ``y``.

    ``base`` overrides the anchor f(X_s; W_s) when the caller already holds it
    (or holds a perturbed version, as during dropout training).
    """
    if base is None:
        base = base_embed(graph, params)
    total = 0.0
    for nt in graph.node_types:
        diff = y[nt.name] - base[nt.name]
        total += 0.5 * float(np.sum(diff * diff))
    penalty = 0.0
    for et in graph.edge_types:
        s, s2 = et.src_type, et.dst_type
        h = params.compat[et.name]
        yh = y[s] @ h
        deg_src = graph.degree(s, et.name)
        deg_dst = graph.degree(s2, et.inverse_of)
        agg = linalg.spmm(graph.adjacency(et.name), y[s2])
        penalty += float(np.sum(deg_src[:, None] * yh * yh))
        penalty -= 2.0 * float(np.sum(yh * agg))
        penalty += float(np.sum(deg_dst[:, None] * y[s2] * y[s2]))
    return total + 0.5 * cfg.lam * penalty


def energy_grad(
    graph: HeteroGraph,
    params: ParamSet,
    y: EmbeddingSet,
    cfg: EnergyConfig,
    base: EmbeddingSet | None = None,
) -> EmbeddingSet:
    """Analytic gradient of the energy with respect to each Y_s."""
    if base is None:
        base = base_embed(graph, params)
    terms, _ = relation_terms(graph, params, y)
    grads: EmbeddingSet = {}
    for nt in graph.node_types:
        s = nt.name
        scale = 1.0 + cfg.lam * graph.total_degree(s)
        grads[s] = scale[:, None] * y[s] - base[s] - cfg.lam * terms[s]
    return grads


# ---------------------------------------------------------------------------
# dense oracle


def _type_layout(graph: HeteroGraph, params: ParamSet):
    """Offsets of each type's column-stacked block in the full vector."""
    offsets = {}
    total = 0
    for nt in graph.node_types:
        d = params.embed_dim(nt.name)
        offsets[nt.name] = (total, nt.count, d)
        total += nt.count * d
    return offsets, total


def stack_embeddings(graph: HeteroGraph, y: EmbeddingSet) -> np.ndarray:
    """Concatenate column-stacked per-type embeddings in node type order."""
    return np.concatenate(
        [linalg.vectorize(y[nt.name]) for nt in graph.node_types]
    )


def unstack_embeddings(
    graph: HeteroGraph, params: ParamSet, v: np.ndarray
) -> EmbeddingSet:
    offsets, total = _type_layout(graph, params)
    if v.shape[0] != total:
        raise ValueError(f"expected stacked vector of length {total}, got {v.shape[0]}")
    out: EmbeddingSet = {}
    for name, (off, n, d) in offsets.items():
        out[name] = linalg.unvectorize(v[off : off + n * d], (n, d))
    return out


def assemble_system(
    graph: HeteroGraph, params: ParamSet, cfg: EnergyConfig
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Dense (P, Q, D) blocks of the stationarity system, column-stacking order.

    P couples types across edges: block (s, s') accumulates
    (H_t + H_tinv^T) kron A_t over edge types t from s to s'. Q and D are
    block-diagonal, with Q_s = sum_t (H_t H_t^T kron D_st) and D_s the
    identity kron the total-degree diagonal. Q - P is symmetric, and the
    full gradient satisfies

        vec(dE/dY) = vec(Y) - vec(f) + lam (Q - P + D) vec(Y).

    Restricted to small problems (total stacked dimension <= 2000).
    """
    offsets, total = _type_layout(graph, params)
    if total > ASSEMBLE_DIM_CAP:
        raise linalg.SizeCapError(
            f"stacked dimension {total} exceeds assembly cap {ASSEMBLE_DIM_CAP}"
        )
    p = np.zeros((total, total))
    q = np.zeros((total, total))
    d = np.zeros((total, total))

    for et in graph.edge_types:
        s, s2 = et.src_type, et.dst_type
        off_s, n_s, d_s = offsets[s]
        off_s2, n_s2, d_s2 = offsets[s2]
        h = params.compat[et.name]
        h_inv = params.compat[et.inverse_of]
        a_dense = graph.adjacency(et.name).toarray()
        block = linalg.kron(h + h_inv.T, a_dense)
        p[off_s : off_s + n_s * d_s, off_s2 : off_s2 + n_s2 * d_s2] += block
        deg = graph.degree(s, et.name)
        q_block = linalg.kron(h @ h.T, np.diag(deg))
        q[off_s : off_s + n_s * d_s, off_s : off_s + n_s * d_s] += q_block

    for nt in graph.node_types:
        off, n, dim = offsets[nt.name]
        d_block = linalg.kron(np.eye(dim), np.diag(graph.total_degree(nt.name)))
        d[off : off + n * dim, off : off + n * dim] = d_block

    return p, q, d


def exact_solution(
    graph: HeteroGraph,
    params: ParamSet,
    cfg: EnergyConfig,
    base: EmbeddingSet | None = None,
) -> EmbeddingSet:
    """Closed-form energy minimizer via the assembled dense system.

    Solves (I + lam (Q - P + D)) vec(Y*) = vec(f); raises
    :class:`~hgunfold.linalg.SingularSystemError` if elimination breaks down.
    """
    p, q, d = assemble_system(graph, params, cfg)
    if base is None:
        base = base_embed(graph, params)
    rhs = stack_embeddings(graph, base)
    system = np.eye(p.shape[0]) + cfg.lam * (q - p + d)
    solution = linalg.dense_solve(system, rhs)
    return unstack_embeddings(graph, params, solution)
