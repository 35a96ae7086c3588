"""Heterogeneous graph data model, on-disk dataset format, and graph operators.

A dataset directory holds UTF-8 text files:

* ``schema.json``            node types (name, count, feat_dim, labeled,
                             num_classes) and edge types (name, src, dst,
                             inverse_of optional)
* ``features.<type>.tsv``    count rows of feat_dim tab-separated floats
* ``edges.<type>.tsv``       one ``src<TAB>dst`` integer pair per line
* ``labels.<type>.tsv``      one integer per line, -1 for unlabeled
* ``splits.<type>.json``     arrays ``train``, ``val``, ``test``

Every edge type is paired with an inverse whose edge set is the exact
transpose; when the inverse is absent from disk it is synthesized. Graphs are
immutable after loading, so derived operators can be cached and shared freely
across readers.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp


class DatasetError(ValueError):
    """A dataset directory or in-memory graph violates the format contract."""


@dataclass(frozen=True)
class NodeTypeSchema:
    name: str
    count: int
    feat_dim: int
    labeled: bool = False
    num_classes: int | None = None


@dataclass(frozen=True)
class EdgeTypeSchema:
    name: str
    src_type: str
    dst_type: str
    inverse_of: str


@dataclass
class HeteroGraph:
    """Typed node sets, inverse-paired typed edge sets, and per-type data."""

    node_types: list[NodeTypeSchema]
    edge_types: list[EdgeTypeSchema]
    edges: dict[str, np.ndarray]
    features: dict[str, np.ndarray]
    labels: dict[str, np.ndarray] = field(default_factory=dict)
    splits: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    _adj_cache: dict[str, sp.csr_array] = field(default_factory=dict, repr=False)
    _deg_cache: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def node_type(self, name: str) -> NodeTypeSchema:
        for nt in self.node_types:
            if nt.name == name:
                return nt
        raise DatasetError(f"unknown node type {name!r}")

    def edge_type(self, name: str) -> EdgeTypeSchema:
        for et in self.edge_types:
            if et.name == name:
                return et
        raise DatasetError(f"unknown edge type {name!r}")

    def num_nodes(self, name: str) -> int:
        return self.node_type(name).count

    @property
    def labeled_types(self) -> list[str]:
        return [nt.name for nt in self.node_types if nt.labeled]

    def edge_types_from(self, src: str) -> list[EdgeTypeSchema]:
        return [et for et in self.edge_types if et.src_type == src]

    def num_edges(self, name: str) -> int:
        return int(self.edges[name].shape[0])

    def adjacency(self, t: str) -> sp.csr_array:
        """Sparse adjacency A_t; entry (i, j) counts type-t edges i -> j.

        ``adjacency(t_inv)`` is the exact transpose of ``adjacency(t)``.
        """
        cached = self._adj_cache.get(t)
        if cached is not None:
            return cached
        et = self.edge_type(t)
        n_src = self.num_nodes(et.src_type)
        n_dst = self.num_nodes(et.dst_type)
        pairs = self.edges[t]
        values = np.ones(pairs.shape[0], dtype=float)
        a = sp.coo_array(
            (values, (pairs[:, 0], pairs[:, 1])), shape=(n_src, n_dst)
        ).tocsr()
        a.sum_duplicates()
        self._adj_cache[t] = a
        return a

    def degree(self, s: str, t: str) -> np.ndarray:
        """Diagonal of the type-t degree matrix of type-s nodes (row sums of A_t)."""
        et = self.edge_type(t)
        if et.src_type != s:
            raise DatasetError(
                f"edge type {t!r} has source type {et.src_type!r}, not {s!r}"
            )
        cached = self._deg_cache.get(t)
        if cached is None:
            cached = np.asarray(self.adjacency(t).sum(axis=1)).reshape(-1)
            self._deg_cache[t] = cached
        return cached

    def total_degree(self, s: str) -> np.ndarray:
        """Per-node count of incident edges over all edge types leaving type s."""
        key = f"__total__{s}"
        cached = self._deg_cache.get(key)
        if cached is None:
            cached = np.zeros(self.num_nodes(s), dtype=float)
            for et in self.edge_types_from(s):
                cached = cached + self.degree(s, et.name)
            self._deg_cache[key] = cached
        return cached


# ---------------------------------------------------------------------------
# parsing helpers


def _read_int_pairs(path: Path) -> np.ndarray:
    rows: list[tuple[int, int]] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DatasetError(
                    f"{path}:{lineno}: expected 'src<TAB>dst', got {line!r}"
                )
            try:
                rows.append((int(parts[0]), int(parts[1])))
            except ValueError:
                raise DatasetError(f"{path}:{lineno}: non-integer index in {line!r}")
    if not rows:
        return np.zeros((0, 2), dtype=np.int64)
    return np.array(rows, dtype=np.int64)


def _read_float_matrix(path: Path, expected_cols: int) -> np.ndarray:
    rows: list[list[float]] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != expected_cols:
                raise DatasetError(
                    f"{path}:{lineno}: expected {expected_cols} columns, got {len(parts)}"
                )
            try:
                rows.append([float(p) for p in parts])
            except ValueError:
                raise DatasetError(f"{path}:{lineno}: non-numeric value")
    return np.array(rows, dtype=float).reshape(len(rows), expected_cols)


def _read_int_column(path: Path) -> np.ndarray:
    values: list[int] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                values.append(int(line))
            except ValueError:
                raise DatasetError(f"{path}:{lineno}: non-integer label {line!r}")
    return np.array(values, dtype=np.int64)


def _sorted_rows(pairs: np.ndarray) -> np.ndarray:
    if pairs.size == 0:
        return pairs
    order = np.lexsort((pairs[:, 1], pairs[:, 0]))
    return pairs[order]


def _check_edge_ranges(pairs: np.ndarray, n_src: int, n_dst: int, context: str) -> None:
    if pairs.size == 0:
        return
    bad_src = (pairs[:, 0] < 0) | (pairs[:, 0] >= n_src)
    bad_dst = (pairs[:, 1] < 0) | (pairs[:, 1] >= n_dst)
    bad = bad_src | bad_dst
    if bad.any():
        row = int(np.argmax(bad))
        raise DatasetError(
            f"{context}:{row + 1}: edge ({pairs[row, 0]}, {pairs[row, 1]}) out of "
            f"range for node counts ({n_src}, {n_dst})"
        )


# ---------------------------------------------------------------------------
# schema handling


def _parse_schema(path: Path) -> tuple[list[NodeTypeSchema], list[dict]]:
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DatasetError(f"missing schema file {path}")
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: invalid JSON ({exc})")

    node_types = []
    for entry in raw.get("node_types", []):
        labeled = bool(entry.get("labeled", False))
        num_classes = entry.get("num_classes")
        nt = NodeTypeSchema(
            name=entry["name"],
            count=int(entry["count"]),
            feat_dim=int(entry["feat_dim"]),
            labeled=labeled,
            num_classes=int(num_classes) if num_classes is not None else None,
        )
        if nt.count < 0:
            raise DatasetError(f"{path}: node type {nt.name!r} has negative count")
        if nt.labeled and (nt.num_classes is None or nt.num_classes < 2):
            raise DatasetError(
                f"{path}: labeled node type {nt.name!r} needs num_classes >= 2"
            )
        node_types.append(nt)

    names = [nt.name for nt in node_types]
    if len(set(names)) != len(names):
        raise DatasetError(f"{path}: duplicate node type names")
    return node_types, list(raw.get("edge_types", []))


def _resolve_edge_types(raw_edges: list[dict], node_names: set[str], context: str) -> list[EdgeTypeSchema]:
    """Fill in missing inverse declarations and validate the pairing involution."""
    declared: dict[str, dict] = {}
    for entry in raw_edges:
        name = entry["name"]
        if name in declared:
            raise DatasetError(f"{context}: duplicate edge type {name!r}")
        declared[name] = entry

    # declare an inverse partner for any edge type that lacks one
    synthesized: list[dict] = []
    for entry in raw_edges:
        if entry.get("inverse_of") is None:
            inverse = f"{entry['name']}_inv"
            entry["inverse_of"] = inverse
            if inverse not in declared:
                partner = {
                    "name": inverse,
                    "src": entry["dst"],
                    "dst": entry["src"],
                    "inverse_of": entry["name"],
                }
                declared[inverse] = partner
                synthesized.append(partner)

    resolved: list[EdgeTypeSchema] = []
    for entry in raw_edges + synthesized:
        name = entry["name"]
        src, dst = entry["src"], entry["dst"]
        if src not in node_names or dst not in node_names:
            raise DatasetError(
                f"{context}: edge type {name!r} references unknown node type"
            )
        resolved.append(EdgeTypeSchema(name, src, dst, entry["inverse_of"]))

    by_name = {et.name: et for et in resolved}
    for et in resolved:
        partner = by_name.get(et.inverse_of)
        if partner is None:
            raise DatasetError(
                f"{context}: edge type {et.name!r} names missing inverse {et.inverse_of!r}"
            )
        if partner.inverse_of != et.name:
            raise DatasetError(
                f"{context}: inverse pairing of {et.name!r} is not an involution"
            )
        if partner.src_type != et.dst_type or partner.dst_type != et.src_type:
            raise DatasetError(
                f"{context}: inverse pair {et.name!r}/{partner.name!r} src/dst mismatch"
            )
        if et.inverse_of == et.name and et.src_type != et.dst_type:
            raise DatasetError(
                f"{context}: self-paired edge type {et.name!r} needs src == dst"
            )
    return resolved


# ---------------------------------------------------------------------------
# load / save / validate


def load_graph(dataset_dir: str | Path) -> HeteroGraph:
    """Load and validate a dataset directory.

    Inverse edge types absent from disk are synthesized as exact transposes of
    their canonical partners.
    """
    root = Path(dataset_dir)
    if not root.is_dir():
        raise DatasetError(f"dataset directory {root} does not exist")
    node_types, raw_edges = _parse_schema(root / "schema.json")
    node_names = {nt.name for nt in node_types}
    edge_types = _resolve_edge_types(raw_edges, node_names, str(root / "schema.json"))

    counts = {nt.name: nt.count for nt in node_types}

    features: dict[str, np.ndarray] = {}
    for nt in node_types:
        path = root / f"features.{nt.name}.tsv"
        if nt.feat_dim == 0:
            # feature-less type: constant type-indicator column
            features[nt.name] = np.ones((nt.count, 1), dtype=float)
            continue
        if not path.exists():
            raise DatasetError(f"missing feature file {path}")
        mat = _read_float_matrix(path, nt.feat_dim)
        if mat.shape[0] != nt.count:
            raise DatasetError(
                f"{path}: expected {nt.count} rows, found {mat.shape[0]}"
            )
        features[nt.name] = mat

    edges: dict[str, np.ndarray] = {}
    on_disk: dict[str, Path] = {}
    for et in edge_types:
        path = root / f"edges.{et.name}.tsv"
        if path.exists():
            pairs = _read_int_pairs(path)
            _check_edge_ranges(pairs, counts[et.src_type], counts[et.dst_type], str(path))
            edges[et.name] = pairs
            on_disk[et.name] = path

    for et in edge_types:
        if et.name in edges:
            continue
        partner = et.inverse_of
        if partner not in edges:
            raise DatasetError(
                f"no edge file for {et.name!r} or its inverse {partner!r}"
            )
        edges[et.name] = edges[partner][:, ::-1].copy()

    labels: dict[str, np.ndarray] = {}
    splits: dict[str, dict[str, np.ndarray]] = {}
    for nt in node_types:
        if not nt.labeled:
            continue
        lpath = root / f"labels.{nt.name}.tsv"
        if not lpath.exists():
            raise DatasetError(f"missing label file {lpath}")
        lab = _read_int_column(lpath)
        if lab.shape[0] != nt.count:
            raise DatasetError(f"{lpath}: expected {nt.count} labels, found {lab.shape[0]}")
        labels[nt.name] = lab

        spath = root / f"splits.{nt.name}.json"
        if not spath.exists():
            raise DatasetError(f"missing split file {spath}")
        try:
            raw_split = json.loads(spath.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{spath}: invalid JSON ({exc})")
        splits[nt.name] = {
            part: np.array(raw_split.get(part, []), dtype=np.int64)
            for part in ("train", "val", "test")
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


def validate_graph(graph: HeteroGraph) -> None:
    """Check every structural invariant; raises DatasetError on the first violation."""
    counts = {nt.name: nt.count for nt in graph.node_types}
    names = [nt.name for nt in graph.node_types]
    if len(set(names)) != len(names):
        raise DatasetError("duplicate node type names")

    by_name = {et.name: et for et in graph.edge_types}
    for et in graph.edge_types:
        partner = by_name.get(et.inverse_of)
        if partner is None or partner.inverse_of != et.name:
            raise DatasetError(f"edge type {et.name!r}: inverse pairing broken")
        if et.name not in graph.edges:
            raise DatasetError(f"edge type {et.name!r} has no edge list")
        pairs = graph.edges[et.name]
        _check_edge_ranges(pairs, counts[et.src_type], counts[et.dst_type], f"edges[{et.name}]")
        # inverse edge set must be the exact transpose (as a multiset)
        inv_pairs = graph.edges[et.inverse_of][:, ::-1]
        if pairs.shape != inv_pairs.shape or not np.array_equal(
            _sorted_rows(pairs), _sorted_rows(inv_pairs)
        ):
            raise DatasetError(
                f"edge type {et.inverse_of!r} is not the transpose of {et.name!r}"
            )

    for nt in graph.node_types:
        feats = graph.features.get(nt.name)
        if feats is None:
            raise DatasetError(f"node type {nt.name!r} has no feature matrix")
        if feats.shape[0] != nt.count:
            raise DatasetError(
                f"features[{nt.name}]: {feats.shape[0]} rows, schema says {nt.count}"
            )
        if feats.shape[1] < 1:
            raise DatasetError(f"features[{nt.name}]: feature width must be >= 1")
        if not np.all(np.isfinite(feats)):
            raise DatasetError(f"features[{nt.name}]: non-finite entries")
        if nt.labeled:
            lab = graph.labels.get(nt.name)
            if lab is None or lab.shape[0] != nt.count:
                raise DatasetError(f"labels[{nt.name}]: missing or wrong length")
            if lab.max(initial=-1) >= (nt.num_classes or 0) or lab.min(initial=-1) < -1:
                raise DatasetError(f"labels[{nt.name}]: class index out of range")
            parts = graph.splits.get(nt.name)
            if parts is None:
                raise DatasetError(f"splits[{nt.name}]: missing")
            seen: set[int] = set()
            labeled_idx = set(np.nonzero(lab >= 0)[0].tolist())
            for part in ("train", "val", "test"):
                idx = parts[part]
                if idx.size and (idx.min() < 0 or idx.max() >= nt.count):
                    raise DatasetError(f"splits[{nt.name}].{part}: index out of range")
                idx_set = set(idx.tolist())
                if idx_set & seen:
                    raise DatasetError(f"splits[{nt.name}]: overlapping splits")
                if not idx_set <= labeled_idx:
                    raise DatasetError(
                        f"splits[{nt.name}].{part}: contains unlabeled nodes"
                    )
                seen |= idx_set


def _primary_edge_types(graph: HeteroGraph) -> list[EdgeTypeSchema]:
    """One representative per inverse pair, in declaration order."""
    primary: list[EdgeTypeSchema] = []
    seen: set[str] = set()
    for et in graph.edge_types:
        if et.name in seen:
            continue
        primary.append(et)
        seen.add(et.name)
        seen.add(et.inverse_of)
    return primary


def save_graph(graph: HeteroGraph, dataset_dir: str | Path) -> None:
    """Write a graph as a dataset directory; inverse edge lists are not written.

    Floats are written with shortest round-trip formatting so that
    ``load_graph(save_graph(g))`` reproduces ``g`` exactly.
    """
    root = Path(dataset_dir)
    root.mkdir(parents=True, exist_ok=True)

    schema = {
        "node_types": [
            {
                "name": nt.name,
                "count": nt.count,
                "feat_dim": nt.feat_dim,
                "labeled": nt.labeled,
                **({"num_classes": nt.num_classes} if nt.labeled else {}),
            }
            for nt in graph.node_types
        ],
        "edge_types": [
            {
                "name": et.name,
                "src": et.src_type,
                "dst": et.dst_type,
                "inverse_of": et.inverse_of,
            }
            for et in graph.edge_types
        ],
    }
    (root / "schema.json").write_text(
        json.dumps(schema, indent=2) + "\n", encoding="utf-8"
    )

    for nt in graph.node_types:
        if nt.feat_dim == 0:
            continue
        mat = graph.features[nt.name]
        lines = ["\t".join(repr(float(v)) for v in row) for row in mat]
        (root / f"features.{nt.name}.tsv").write_text(
            "\n".join(lines) + ("\n" if lines else ""), encoding="utf-8"
        )

    for et in _primary_edge_types(graph):
        pairs = graph.edges[et.name]
        lines = [f"{int(a)}\t{int(b)}" for a, b in pairs]
        (root / f"edges.{et.name}.tsv").write_text(
            "\n".join(lines) + ("\n" if lines else ""), encoding="utf-8"
        )

    for name, lab in graph.labels.items():
        (root / f"labels.{name}.tsv").write_text(
            "\n".join(str(int(v)) for v in lab) + ("\n" if lab.size else ""),
            encoding="utf-8",
        )

    for name, parts in graph.splits.items():
        payload = {part: [int(i) for i in parts[part]] for part in ("train", "val", "test")}
        (root / f"splits.{name}.json").write_text(
            json.dumps(payload, indent=2) + "\n", encoding="utf-8"
        )
