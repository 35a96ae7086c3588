"""Preconditioned (proximal) descent on the relation energy, unfolded K steps.

One step rescales the energy gradient by the inverse Jacobi diagonal
1 / (1 + lam * degree) and mixes it with the previous iterate:

    Ybar_s = (1 - alpha) Y_s
             + alpha * Dtilde_s^-1 [ f(X_s; W_s)
               + lam * sum_t ( A_t Y_s' (H_t^T + H_tinv) - D_st Y_s (H_t H_t^T) ) ]

followed, when the nonnegativity penalty is active, by the elementwise
proximal map max(0, .). The step size guaranteeing a monotone energy trace is

    alpha < (2 + 2 lam d_min) / (1 + lam (d_min + sigma_max))

with d_min the smallest total degree over all nodes and sigma_max the largest
eigenvalue of the symmetric edge-coupling operator Q - P.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import linalg
from .energy import (
    EmbeddingSet,
    EnergyConfig,
    ParamSet,
    base_embed,
    energy_grad,
    energy_value,
    relation_terms,
    stack_embeddings,
    unstack_embeddings,
    assemble_system,
    _type_layout,
)
from .hetgraph import HeteroGraph

DENSE_EIG_CAP = 700

PROX_TRACE_NOTE = (
    "trace records the unconstrained energy along projected iterates; "
    "monotonicity is only guaranteed with the proximal step disabled"
)


class NonFiniteError(RuntimeError):
    """An iterate left the finite range (step size too large or bad inputs)."""


class NonConvergenceError(RuntimeError):
    """The spectral estimate behind the step bound failed to converge."""


@dataclass
class UnfoldConfig:
    alpha: float | None = None  # None resolves to 0.99 * step_bound
    steps: int = 16
    lam: float = 1.0
    prox: bool = True
    trace_energy: bool = False

    def __post_init__(self) -> None:
        if self.alpha is not None and self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.lam <= 0:
            raise ValueError("lam must be positive")

    def energy(self) -> EnergyConfig:
        return EnergyConfig(lam=self.lam)


@dataclass
class UnfoldResult:
    y_final: EmbeddingSet
    energy_trace: list[float] | None = None
    relu_masks: list[dict[str, np.ndarray]] | None = None
    trace_note: str | None = None


def preconditioner(graph: HeteroGraph, s: str, lam: float) -> np.ndarray:
    """Inverse Jacobi diagonal 1 / (1 + lam * total_degree); entries in (0, 1]."""
    return 1.0 / (1.0 + lam * graph.total_degree(s))


def prox_relu(y: EmbeddingSet) -> EmbeddingSet:
    """Proximal map of the infinite nonnegativity penalty: elementwise max(0, .)."""
    return {s: np.maximum(v, 0.0) for s, v in y.items()}


def _resolve_alpha(graph: HeteroGraph, params: ParamSet, cfg: UnfoldConfig) -> float:
    if cfg.alpha is not None:
        return cfg.alpha
    return 0.99 * step_bound(graph, params, cfg.lam)


def unfold_step(
    graph: HeteroGraph,
    params: ParamSet,
    y: EmbeddingSet,
    cfg: UnfoldConfig,
    base: EmbeddingSet | None = None,
    aggregates_out: dict[str, np.ndarray] | None = None,
) -> EmbeddingSet:
    """One preconditioned descent step (no proximal map)."""
    if base is None:
        base = base_embed(graph, params)
    alpha = _resolve_alpha(graph, params, cfg)
    terms, aggregates = relation_terms(graph, params, y)
    if aggregates_out is not None:
        aggregates_out.update(aggregates)
    out: EmbeddingSet = {}
    for nt in graph.node_types:
        s = nt.name
        prec = preconditioner(graph, s, cfg.lam)
        new = (1.0 - alpha) * y[s] + alpha * (
            prec[:, None] * (base[s] + cfg.lam * terms[s])
        )
        if not np.all(np.isfinite(new)):
            raise NonFiniteError(f"non-finite embedding for node type {s!r}")
        out[s] = new
    return out


def unfold_step_from_grad(
    graph: HeteroGraph,
    params: ParamSet,
    y: EmbeddingSet,
    cfg: UnfoldConfig,
    base: EmbeddingSet | None = None,
) -> EmbeddingSet:
    """The same step written generically as Y - alpha * Dtilde^-1 grad(Y).

    Kept as a cross-check of the explicit form; the two agree to rounding.
    """
    alpha = _resolve_alpha(graph, params, cfg)
    grads = energy_grad(graph, params, y, cfg.energy(), base=base)
    out: EmbeddingSet = {}
    for nt in graph.node_types:
        s = nt.name
        prec = preconditioner(graph, s, cfg.lam)
        out[s] = y[s] - alpha * (prec[:, None] * grads[s])
    return out


def unfold(
    graph: HeteroGraph,
    params: ParamSet,
    cfg: UnfoldConfig,
    base: EmbeddingSet | None = None,
    _record=None,
) -> UnfoldResult:
    """Run K descent steps from Y0 = f(X; W), with optional energy tracing.

    With ``prox`` enabled every step is followed by the nonnegativity
    projection and the relu masks are recorded. ``_record`` is the hook the
    differentiation tape uses to capture intermediates without changing any
    arithmetic.
    """
    if base is None:
        base = base_embed(graph, params)
    alpha = _resolve_alpha(graph, params, cfg)
    step_cfg = UnfoldConfig(
        alpha=alpha, steps=cfg.steps, lam=cfg.lam, prox=cfg.prox, trace_energy=False
    )
    ecfg = cfg.energy()

    y = dict(base)
    trace: list[float] | None = [] if cfg.trace_energy else None
    masks: list[dict[str, np.ndarray]] | None = [] if cfg.prox else None
    if trace is not None:
        trace.append(energy_value(graph, params, y, ecfg, base=base))
    if _record is not None:
        _record.snapshots.append(dict(y))

    for _ in range(cfg.steps):
        aggregates: dict[str, np.ndarray] = {}
        y_bar = unfold_step(graph, params, y, step_cfg, base=base, aggregates_out=aggregates)
        if cfg.prox:
            mask = {s: v > 0.0 for s, v in y_bar.items()}
            masks.append(mask)
            y = {s: np.maximum(v, 0.0) for s, v in y_bar.items()}
        else:
            y = y_bar
        if _record is not None:
            _record.aggregates.append(aggregates)
            _record.snapshots.append(dict(y))
        if trace is not None:
            trace.append(energy_value(graph, params, y, ecfg, base=base))

    note = PROX_TRACE_NOTE if (cfg.prox and trace is not None) else None
    return UnfoldResult(y_final=y, energy_trace=trace, relu_masks=masks, trace_note=note)


# ---------------------------------------------------------------------------
# step bound


@dataclass
class StepBoundReport:
    bound: float
    d_min: float
    sigma_max: float
    method: str
    iterations: int = 0
    converged: bool = True

    def as_dict(self) -> dict:
        return {
            "bound": self.bound,
            "d_min": self.d_min,
            "sigma_max": self.sigma_max,
            "method": self.method,
            "iterations": self.iterations,
            "converged": self.converged,
        }


def coupling_operator(graph: HeteroGraph, params: ParamSet):
    """Matrix-free symmetric operator (Q - P) on stacked embedding vectors."""
    _, total = _type_layout(graph, params)

    def apply(v: np.ndarray) -> np.ndarray:
        y = unstack_embeddings(graph, params, v)
        terms, _ = relation_terms(graph, params, y)
        return -stack_embeddings(graph, terms)

    return apply, total


def step_bound_report(
    graph: HeteroGraph,
    params: ParamSet,
    lam: float,
    tol: float = 1e-6,
    max_iters: int = 10_000,
) -> StepBoundReport:
    """Step-size bound with the quantities that produced it."""
    if lam <= 0:
        raise ValueError("lam must be positive")
    d_values = [graph.total_degree(nt.name) for nt in graph.node_types if nt.count > 0]
    d_min = float(min(v.min() for v in d_values)) if d_values else 0.0

    apply, total = coupling_operator(graph, params)
    if total == 0:
        sigma_max, method, iters, converged = 0.0, "empty", 0, True
    elif total <= DENSE_EIG_CAP:
        p, q, _ = assemble_system(graph, params, EnergyConfig(lam=lam))
        sigma_max = float(np.linalg.eigvalsh(q - p).max())
        method, iters, converged = "dense", 0, True
    else:
        result = linalg.power_iteration_sym(apply, total, tol=tol, max_iters=max_iters)
        sigma_max, iters, converged = result.value, result.iterations, result.converged
        method = "power"
        if not converged:
            raise NonConvergenceError(
                f"spectral estimate did not converge within {max_iters} iterations"
            )
    bound = (2.0 + 2.0 * lam * d_min) / (1.0 + lam * (d_min + sigma_max))
    return StepBoundReport(
        bound=bound,
        d_min=d_min,
        sigma_max=sigma_max,
        method=method,
        iterations=iters,
        converged=converged,
    )


def step_bound(
    graph: HeteroGraph,
    params: ParamSet,
    lam: float,
    tol: float = 1e-6,
    max_iters: int = 10_000,
) -> float:
    """Largest step size guaranteed to give a monotone energy trace (prox off)."""
    return step_bound_report(graph, params, lam, tol=tol, max_iters=max_iters).bound
