"""Synthetic heterogeneous graphs with planted class-level edge structure.

Edges are sampled class-conditionally: a source node is drawn uniformly, the
destination class comes from a row-stochastic compatibility table for that
edge type, and the destination node is uniform within that class. Features
are a scaled one-hot of the class plus unit Gaussian noise, so the per-type
signal strength controls whether a type is classifiable from features alone.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .hetgraph import (
    EdgeTypeSchema,
    HeteroGraph,
    NodeTypeSchema,
    save_graph,
    validate_graph,
)

PRESETS = ("homophily", "heterophily", "bipartite-authorship")


@dataclass
class NodeSpec:
    name: str
    count: int
    feat_dim: int
    num_classes: int
    signal: float = 1.0
    labeled: bool = True


@dataclass
class EdgeSpec:
    name: str
    src: str
    dst: str
    mean_degree: float
    table: np.ndarray  # (classes_src, classes_dst), rows sum to 1


@dataclass
class SynthConfig:
    nodes: list[NodeSpec]
    edges: list[EdgeSpec]
    seed: int = 0
    train_frac: float = 0.6
    val_frac: float = 0.2


class SynthConfigError(ValueError):
    pass


def _validate(cfg: SynthConfig) -> None:
    classes = {}
    for spec in cfg.nodes:
        if spec.count <= 0:
            raise SynthConfigError(f"node type {spec.name!r}: count must be positive")
        if spec.num_classes < 2:
            raise SynthConfigError(f"node type {spec.name!r}: need >= 2 classes")
        if spec.signal > 0 and spec.feat_dim < spec.num_classes:
            raise SynthConfigError(
                f"node type {spec.name!r}: feat_dim must cover num_classes "
                f"when the feature signal is positive"
            )
        classes[spec.name] = spec.num_classes
    for spec in cfg.edges:
        if spec.src not in classes or spec.dst not in classes:
            raise SynthConfigError(f"edge type {spec.name!r}: unknown endpoint type")
        if spec.mean_degree <= 0:
            raise SynthConfigError(f"edge type {spec.name!r}: mean_degree must be > 0")
        table = np.asarray(spec.table, dtype=float)
        expected = (classes[spec.src], classes[spec.dst])
        if table.shape != expected:
            raise SynthConfigError(
                f"edge type {spec.name!r}: table shape {table.shape} != {expected}"
            )
        if (table < 0).any() or not np.allclose(table.sum(axis=1), 1.0, atol=1e-9):
            raise SynthConfigError(f"edge type {spec.name!r}: table is not row-stochastic")
    if not 0 < cfg.train_frac < 1 or not 0 < cfg.val_frac < 1:
        raise SynthConfigError("split fractions must lie in (0, 1)")
    if cfg.train_frac + cfg.val_frac >= 1:
        raise SynthConfigError("train_frac + val_frac must leave room for a test split")


def build_graph(cfg: SynthConfig) -> HeteroGraph:
    """Sample a graph in memory; deterministic for a fixed seed."""
    _validate(cfg)
    rng = np.random.default_rng(cfg.seed)

    classes: dict[str, np.ndarray] = {}
    for spec in cfg.nodes:
        classes[spec.name] = rng.integers(0, spec.num_classes, size=spec.count)

    members: dict[str, list[np.ndarray]] = {
        spec.name: [
            np.nonzero(classes[spec.name] == c)[0] for c in range(spec.num_classes)
        ]
        for spec in cfg.nodes
    }

    edges: dict[str, np.ndarray] = {}
    edge_types: list[EdgeTypeSchema] = []
    for spec in cfg.edges:
        n_src = next(n.count for n in cfg.nodes if n.name == spec.src)
        m = int(round(spec.mean_degree * n_src))
        table = np.asarray(spec.table, dtype=float)
        src = rng.integers(0, n_src, size=m)
        cum = np.cumsum(table, axis=1)
        draws = rng.random(m)
        dst_cls = (draws[:, None] < cum[classes[spec.src][src]]).argmax(axis=1)
        dst = np.zeros(m, dtype=np.int64)
        for c in range(table.shape[1]):
            mask = dst_cls == c
            k = int(mask.sum())
            if k == 0:
                continue
            pool = members[spec.dst][c]
            if pool.size == 0:
                raise SynthConfigError(
                    f"edge type {spec.name!r}: planted table requires destination "
                    f"class {c} but no node of type {spec.dst!r} has it"
                )
            dst[mask] = pool[rng.integers(0, pool.size, size=k)]
        pairs = np.stack([src, dst], axis=1)
        inv_name = f"{spec.name}_inv"
        edges[spec.name] = pairs
        edges[inv_name] = pairs[:, ::-1].copy()
        edge_types.append(EdgeTypeSchema(spec.name, spec.src, spec.dst, inv_name))
        edge_types.append(EdgeTypeSchema(inv_name, spec.dst, spec.src, spec.name))

    features: dict[str, np.ndarray] = {}
    labels: dict[str, np.ndarray] = {}
    splits: dict[str, dict[str, np.ndarray]] = {}
    node_types: list[NodeTypeSchema] = []
    for spec in cfg.nodes:
        x = rng.standard_normal((spec.count, spec.feat_dim))
        if spec.signal > 0:
            x[np.arange(spec.count), classes[spec.name]] += spec.signal
        features[spec.name] = x
        node_types.append(
            NodeTypeSchema(
                name=spec.name,
                count=spec.count,
                feat_dim=spec.feat_dim,
                labeled=spec.labeled,
                num_classes=spec.num_classes if spec.labeled else None,
            )
        )
        if spec.labeled:
            labels[spec.name] = classes[spec.name].astype(np.int64)
            perm = rng.permutation(spec.count)
            n_train = int(round(cfg.train_frac * spec.count))
            n_val = int(round(cfg.val_frac * spec.count))
            splits[spec.name] = {
                "train": np.sort(perm[:n_train]),
                "val": np.sort(perm[n_train : n_train + n_val]),
                "test": np.sort(perm[n_train + n_val :]),
            }

    graph = HeteroGraph(
        node_types=node_types,
        edge_types=edge_types,
        edges=edges,
        features=features,
        labels=labels,
        splits=splits,
    )
    validate_graph(graph)
    return graph


def generate(cfg: SynthConfig, out_dir: str | Path) -> Path:
    """Sample a graph and write it as a dataset directory."""
    graph = build_graph(cfg)
    out = Path(out_dir)
    save_graph(graph, out)
    return out


# ---------------------------------------------------------------------------
# presets


def _shift_table(c: int, shift: int = 1) -> np.ndarray:
    table = np.zeros((c, c))
    table[np.arange(c), (np.arange(c) + shift) % c] = 1.0
    return table


def _block_table(categories: int, venues: int) -> np.ndarray:
    """Map each category uniformly onto its contiguous block of venue classes."""
    table = np.zeros((categories, venues))
    owner = (np.arange(venues) * categories) // venues
    for cat in range(categories):
        block = np.nonzero(owner == cat)[0]
        table[cat, block] = 1.0 / block.size
    return table


def preset_config(name: str, seed: int = 0, paper_classes: int = 4) -> SynthConfig:
    """Named generator configurations used by the command line and the tests."""
    if name == "homophily":
        return SynthConfig(
            nodes=[
                NodeSpec("u", 300, 8, 4, signal=4.0),
                NodeSpec("v", 300, 8, 4, signal=4.0),
            ],
            edges=[EdgeSpec("u_to_v", "u", "v", 5.0, np.eye(4))],
            seed=seed,
        )
    if name == "heterophily":
        return SynthConfig(
            nodes=[
                NodeSpec("u", 300, 8, 4, signal=4.0),
                NodeSpec("v", 300, 8, 4, signal=0.0),
            ],
            edges=[
                EdgeSpec("u_to_v", "u", "v", 5.0, _shift_table(4)),
                EdgeSpec("v_to_v", "v", "v", 5.0, _shift_table(4)),
            ],
            seed=seed,
        )
    if name == "bipartite-authorship":
        if paper_classes < 4:
            raise SynthConfigError("bipartite-authorship needs >= 4 paper classes")
        return SynthConfig(
            nodes=[
                NodeSpec("author", 400, 8, 4, signal=3.0),
                NodeSpec(
                    "paper", 800, max(8, paper_classes), paper_classes, signal=1.0
                ),
            ],
            edges=[
                EdgeSpec(
                    "writes", "author", "paper", 6.0, _block_table(4, paper_classes)
                )
            ],
            seed=seed,
        )
    raise SynthConfigError(f"unknown preset {name!r}; choose from {PRESETS}")


def config_from_dict(raw: dict) -> SynthConfig:
    """Build a config from parsed JSON (tables as nested lists)."""
    try:
        nodes = [
            NodeSpec(
                name=n["name"],
                count=int(n["count"]),
                feat_dim=int(n["feat_dim"]),
                num_classes=int(n["num_classes"]),
                signal=float(n.get("signal", 1.0)),
                labeled=bool(n.get("labeled", True)),
            )
            for n in raw["nodes"]
        ]
        edges = [
            EdgeSpec(
                name=e["name"],
                src=e["src"],
                dst=e["dst"],
                mean_degree=float(e["mean_degree"]),
                table=np.asarray(e["table"], dtype=float),
            )
            for e in raw["edges"]
        ]
    except (KeyError, TypeError) as exc:
        raise SynthConfigError(f"malformed generator config: {exc}")
    return SynthConfig(
        nodes=nodes,
        edges=edges,
        seed=int(raw.get("seed", 0)),
        train_frac=float(raw.get("train_frac", 0.6)),
        val_frac=float(raw.get("val_frac", 0.2)),
    )
