"""Exact reverse-mode differentiation through the unfolded descent pipeline.

The forward pass records a tape (iterate snapshots, relu masks, neighbor
aggregates); the backward pass walks it in reverse. Because the linear part
of one descent step is I - alpha * Dtilde^-1 * Hess and the energy Hessian is
symmetric, the adjoint of a step reuses the same edge-coupling operator as
the forward step:

    Ubar = U * mask                      (relu gate, when prox is on)
    V    = alpha * Dtilde^-1 * Ubar
    U'   = (1 - alpha) * Ubar + lam * coupling(V)

Per step the compatibility gradients accumulate from the aggregation term
(both as H_t and as the inverse slot of the paired type) and from the
self-loop term through the product rule on H_t H_t^T; the base-transform
gradient collects the V contributions of every step plus the adjoint that
reaches Y0.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .energy import (
    EmbeddingSet,
    ParamSet,
    _base_embed_traced,
    relation_terms,
)
from .hetgraph import HeteroGraph
from .unfolding import UnfoldConfig, UnfoldResult, _resolve_alpha, preconditioner, unfold


@dataclass
class GradSet:
    """Gradients with the same keying and shapes as :class:`ParamSet`."""

    weights: dict[str, np.ndarray]
    compat: dict[str, np.ndarray]
    readout_weight: dict[str, np.ndarray]
    readout_bias: dict[str, np.ndarray]
    weights2: dict[str, np.ndarray] | None = None


def zero_grads(params: ParamSet) -> GradSet:
    return GradSet(
        weights={k: np.zeros_like(v) for k, v in params.weights.items()},
        compat={k: np.zeros_like(v) for k, v in params.compat.items()},
        readout_weight={k: np.zeros_like(v) for k, v in params.readout_weight.items()},
        readout_bias={k: np.zeros_like(v) for k, v in params.readout_bias.items()},
        weights2=None
        if params.weights2 is None
        else {k: np.zeros_like(v) for k, v in params.weights2.items()},
    )


@dataclass
class Tape:
    """Recorded forward pass, sufficient for an exact reverse sweep."""

    graph: HeteroGraph
    params: ParamSet
    cfg: UnfoldConfig  # alpha already resolved to a number
    base: EmbeddingSet  # anchor f(X; W), after dropout scaling when used
    base_hidden: dict[str, np.ndarray] | None
    dropout_scale: EmbeddingSet | None
    snapshots: list[EmbeddingSet] = field(default_factory=list)
    aggregates: list[dict[str, np.ndarray]] = field(default_factory=list)
    masks: list[dict[str, np.ndarray]] | None = None
    result: UnfoldResult | None = None

    def nbytes(self) -> int:
        total = 0
        for snap in self.snapshots:
            total += sum(v.nbytes for v in snap.values())
        for agg in self.aggregates:
            total += sum(v.nbytes for v in agg.values())
        if self.masks:
            for mask in self.masks:
                total += sum(v.nbytes for v in mask.values())
        return total


def forward_with_tape(
    graph: HeteroGraph,
    params: ParamSet,
    cfg: UnfoldConfig,
    dropout_scale: EmbeddingSet | None = None,
) -> tuple[UnfoldResult, Tape]:
    """Run the unfolding while recording everything the reverse pass needs.

    Produces bitwise the same final embeddings as :func:`~hgunfold.unfold.unfold`;
    ``dropout_scale`` (an elementwise multiplier per type) perturbs the anchor
    during training.
    """
    raw_base, hidden = _base_embed_traced(graph, params)
    if dropout_scale is not None:
        base = {s: raw_base[s] * dropout_scale[s] for s in raw_base}
    else:
        base = raw_base
    alpha = _resolve_alpha(graph, params, cfg)
    resolved = UnfoldConfig(
        alpha=alpha,
        steps=cfg.steps,
        lam=cfg.lam,
        prox=cfg.prox,
        trace_energy=cfg.trace_energy,
    )
    tape = Tape(
        graph=graph,
        params=params,
        cfg=resolved,
        base=base,
        base_hidden=hidden,
        dropout_scale=dropout_scale,
    )
    result = unfold(graph, params, resolved, base=base, _record=tape)
    tape.masks = result.relu_masks
    tape.result = result
    return result, tape


def replay(tape: Tape) -> EmbeddingSet:
    """Recompute the forward pass from the tape's inputs (bitwise identical)."""
    result = unfold(tape.graph, tape.params, tape.cfg, base=tape.base)
    return result.y_final


def backward(tape: Tape, d_y_final: EmbeddingSet) -> tuple[GradSet, EmbeddingSet]:
    """Exact adjoints of the recorded forward pass.

    Returns parameter gradients (readout entries zero-filled, as the readout
    sits outside the unfolding) and the adjoint reaching Y0.
    """
    graph, params, cfg = tape.graph, tape.params, tape.cfg
    alpha = cfg.alpha
    lam = cfg.lam
    k_steps = cfg.steps
    if len(tape.snapshots) != k_steps + 1:
        raise ValueError("tape does not match its configuration")

    grads = zero_grads(params)
    type_names = [nt.name for nt in graph.node_types]
    for s in type_names:
        if d_y_final[s].shape != tape.snapshots[-1][s].shape:
            raise ValueError(f"seed gradient shape mismatch for type {s!r}")

    prec = {s: preconditioner(graph, s, lam) for s in type_names}
    u = {s: np.array(d_y_final[s], dtype=float, copy=True) for s in type_names}
    df = {s: np.zeros_like(u[s]) for s in type_names}

    for k in reversed(range(k_steps)):
        if cfg.prox:
            mask = tape.masks[k]
            u_bar = {s: u[s] * mask[s] for s in type_names}
        else:
            u_bar = u
        v = {s: alpha * (prec[s][:, None] * u_bar[s]) for s in type_names}

        y_k = tape.snapshots[k]
        agg_k = tape.aggregates[k]
        for et in graph.edge_types:
            s = et.src_type
            h = params.compat[et.name]
            vs = v[s]
            agg = agg_k[et.name]
            grads.compat[et.name] += lam * (vs.T @ agg)
            grads.compat[et.inverse_of] += lam * (agg.T @ vs)
            deg = graph.degree(s, et.name)
            c = vs.T @ (deg[:, None] * y_k[s])
            grads.compat[et.name] -= lam * ((c + c.T) @ h)

        for s in type_names:
            df[s] += v[s]

        terms_v, _ = relation_terms(graph, params, v)
        u = {s: (1.0 - alpha) * u_bar[s] + lam * terms_v[s] for s in type_names}

    d_y0 = {s: u[s].copy() for s in type_names}
    for s in type_names:
        df[s] += d_y0[s]

    # through dropout scaling, then the base transform
    if tape.dropout_scale is not None:
        df = {s: df[s] * tape.dropout_scale[s] for s in type_names}
    for nt in graph.node_types:
        s = nt.name
        x = graph.features[s]
        if params.weights2 is None:
            grads.weights[s] += x.T @ df[s]
        else:
            hidden = tape.base_hidden[s]
            grads.weights2[s] += hidden.T @ df[s]
            d_hidden = (df[s] @ params.weights2[s].T) * (hidden > 0.0)
            grads.weights[s] += x.T @ d_hidden

    return grads, d_y0


# ---------------------------------------------------------------------------
# verification harness


@dataclass
class GradCheckReport:
    worst: dict[str, float]
    probes: int
    excluded: int
    fd_step: float
    probe_log: list[dict] = field(default_factory=list)

    @property
    def worst_overall(self) -> float:
        return max(self.worst.values()) if self.worst else 0.0

    def as_dict(self) -> dict:
        return {
            "worst_rel_err": self.worst,
            "worst_overall": self.worst_overall,
            "probes": self.probes,
            "excluded": self.excluded,
            "fd_step": self.fd_step,
            "probe_log": self.probe_log,
        }


def _trainable_groups(params: ParamSet) -> dict[str, list[tuple[str, str]]]:
    """Group name -> list of (container, key) for every trainable array."""
    groups: dict[str, list[tuple[str, str]]] = {}
    w_entries = [("weights", k) for k in params.weights]
    if params.weights2 is not None:
        w_entries += [("weights2", k) for k in params.weights2]
    groups["W"] = w_entries
    if not params.fixed_compat:
        groups["H"] = [("compat", k) for k in params.compat]
    if not params.identity_readout and params.readout_weight:
        groups["theta"] = [("readout_weight", k) for k in params.readout_weight] + [
            ("readout_bias", k) for k in params.readout_bias
        ]
    return groups


def _masks_equal(a, b) -> bool:
    if a is None or b is None:
        return a is b
    if len(a) != len(b):
        return False
    for ma, mb in zip(a, b):
        for key in ma:
            if not np.array_equal(ma[key], mb[key]):
                return False
    return True


def grad_check(
    graph: HeteroGraph,
    params: ParamSet,
    cfg: UnfoldConfig,
    n_probes: int = 12,
    fd_step: float = 1e-5,
    split: str = "train",
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic and central-difference directional derivatives.

    Probes cycle over the parameter groups; each probe draws a random unit
    direction within one group. With the proximal step enabled, probes whose
    perturbed forward passes change any relu mask are reported as near-kink
    and excluded rather than counted as failures.
    """
    if n_probes < 1:
        raise ValueError("n_probes must be >= 1")
    rng = np.random.default_rng(seed)
    # pin the step size at the base point so perturbed runs share it
    alpha = _resolve_alpha(graph, params, cfg)
    cfg = UnfoldConfig(
        alpha=alpha, steps=cfg.steps, lam=cfg.lam, prox=cfg.prox, trace_energy=False
    )
    _, grads, base_masks = _loss_grads_masks(graph, params, cfg, split)

    groups = _trainable_groups(params)
    group_names = list(groups)
    worst = {g: 0.0 for g in group_names}
    excluded = 0
    log: list[dict] = []

    for i in range(n_probes):
        group = group_names[i % len(group_names)]
        entries = groups[group]
        direction = {
            (container, key): rng.standard_normal(
                getattr(params, container)[key].shape
            )
            for container, key in entries
        }
        norm = np.sqrt(sum(float(np.sum(d * d)) for d in direction.values()))
        direction = {k: d / norm for k, d in direction.items()}

        analytic = sum(
            float(np.sum(getattr(grads, container)[key] * direction[(container, key)]))
            for container, key in entries
        )

        loss_plus, masks_plus = _perturbed_loss(graph, params, cfg, split, direction, fd_step)
        loss_minus, masks_minus = _perturbed_loss(graph, params, cfg, split, direction, -fd_step)

        if cfg.prox and not (
            _masks_equal(base_masks, masks_plus) and _masks_equal(base_masks, masks_minus)
        ):
            excluded += 1
            log.append({"probe": i, "group": group, "status": "near-kink, excluded"})
            continue

        numeric = (loss_plus - loss_minus) / (2.0 * fd_step)
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)
        worst[group] = max(worst[group], rel)
        log.append({"probe": i, "group": group, "status": "ok", "rel_err": rel})

    counted = n_probes - excluded
    return GradCheckReport(
        worst=worst, probes=counted, excluded=excluded, fd_step=fd_step, probe_log=log
    )


def _loss_grads_masks(graph, params, cfg, split):
    from .training import loss_and_grads

    loss, grads, _, tape = loss_and_grads(graph, params, cfg, split)
    return loss, grads, tape.masks


def _perturbed_loss(graph, params, cfg, split, direction, scale):
    from .training import meta_loss

    shifted = params.copy()
    for (container, key), d in direction.items():
        getattr(shifted, container)[key] += scale * d
    result, tape = forward_with_tape(graph, shifted, cfg)
    loss, _ = meta_loss(result.y_final, graph, shifted, split)
    return loss, tape.masks
