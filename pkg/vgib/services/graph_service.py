import json
import logging
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import networkx as nx
import numpy as np
from networkx.algorithms import isomorphism
from pydantic import ValidationError
from scipy.linalg import block_diag
from sklearn.model_selection import KFold, train_test_split

from vgib.exceptions import ConfigError, DatasetError
from vgib.schemas import GraphRecord
from vgib.utils.autodiff import Rng
from vgib.utils.parsers import MotifSpec, parse_motif

logger = logging.getLogger(__name__)

DEFAULT_FEATURE_DIM = 8
# Redraw budget for motif-free bases and decoys.
MAX_ATTEMPTS = 1000
# Base degree kept away from attachment endpoints.
AVOIDED_BASE_DEGREE = 2

Label = Union[int, float]


def degree_features(num_nodes: int, edges: Iterable[Tuple[int, int]], dim: int = DEFAULT_FEATURE_DIM) -> np.ndarray:
    """One-hot node degree, capped at ``dim - 1``."""
    if dim < 1:
        raise ConfigError(f"feature dimension must be positive, got {dim}")
    degree = np.zeros(num_nodes, dtype=np.int64)
    for u, v in edges:
        degree[u] += 1
        degree[v] += 1
    features = np.zeros((num_nodes, dim), dtype=np.float64)
    features[np.arange(num_nodes), np.minimum(degree, dim - 1)] = 1.0
    return features


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected graph with node features, a label and an optional ground-truth motif mask."""

    num_nodes: int
    edges: Tuple[Tuple[int, int], ...]
    features: np.ndarray
    label: Label
    motif_mask: Optional[Tuple[bool, ...]] = None

    def __post_init__(self):
        n = int(self.num_nodes)
        if n < 1:
            raise DatasetError("a graph needs at least one node")

        edges = tuple((int(u), int(v)) for u, v in self.edges)
        seen = set()
        for u, v in edges:
            if not (0 <= u < n and 0 <= v < n):
                raise DatasetError(f"edge [{u}, {v}] out of range for {n} nodes")
            if u == v:
                raise DatasetError(f"self-loop edge [{u}, {v}] is not allowed")
            key = (min(u, v), max(u, v))
            if key in seen:
                raise DatasetError(f"duplicate edge [{u}, {v}]")
            seen.add(key)

        features = np.array(self.features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] != n or features.shape[1] == 0:
            raise DatasetError(f"features must be a {n}×d matrix, got shape {features.shape}")
        if not np.all(np.isfinite(features)):
            raise DatasetError("features contain non-finite values")
        features.setflags(write=False)

        label = self.label
        if isinstance(label, (bool, np.bool_)):
            raise DatasetError("label must be an integer class index or a real value, got a boolean")
        if isinstance(label, (int, np.integer)):
            label = int(label)
            if label < 0:
                raise DatasetError(f"class label must be non-negative, got {label}")
        else:
            label = float(label)
            if not math.isfinite(label):
                raise DatasetError("regression label must be finite")

        mask = self.motif_mask
        if mask is not None:
            mask = tuple(bool(m) for m in mask)
            if len(mask) != n:
                raise DatasetError(f"motif_mask has length {len(mask)}, expected {n}")

        object.__setattr__(self, "num_nodes", n)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "label", label)
        object.__setattr__(self, "motif_mask", mask)

    @property
    def task(self) -> str:
        return "categorical" if isinstance(self.label, int) else "regression"

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def motif_nodes(self) -> Optional[Tuple[int, ...]]:
        if self.motif_mask is None:
            return None
        return tuple(i for i, m in enumerate(self.motif_mask) if m)

    @cached_property
    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.num_nodes, self.num_nodes), dtype=np.float64)
        for u, v in self.edges:
            a[u, v] = a[v, u] = 1.0
        a.setflags(write=False)
        return a

    @cached_property
    def normalized_adjacency(self) -> np.ndarray:
        a = GraphService.normalize_adjacency(self)
        a.setflags(write=False)
        return a

    def to_networkx(self) -> nx.Graph:
        g = nx.Graph()
        g.add_nodes_from(range(self.num_nodes))
        g.add_edges_from(self.edges)
        return g

    def induced(self, nodes: Iterable[int]) -> "Graph":
        """Induced subgraph on ``nodes``, relabelled 0..k-1 in ascending node order."""
        kept = sorted(set(int(i) for i in nodes))
        if not kept:
            raise DatasetError("cannot induce a subgraph on an empty node set")
        position = {old: new for new, old in enumerate(kept)}
        edges = tuple((position[u], position[v]) for u, v in self.edges if u in position and v in position)
        mask = None if self.motif_mask is None else tuple(self.motif_mask[i] for i in kept)
        return Graph(len(kept), edges, self.features[kept], self.label, mask)

    def to_record(self) -> GraphRecord:
        return GraphRecord(
            num_nodes=self.num_nodes,
            edges=[tuple(e) for e in self.edges],
            features=self.features.tolist(),
            label=self.label,
            motif_nodes=None if self.motif_mask is None else list(self.motif_nodes),
        )


@dataclass(frozen=True, eq=False)
class Batch:
    """Several graphs laid out block-diagonally; rows keep each graph's node order."""

    graphs: Tuple[Graph, ...]
    adjacency: np.ndarray  # block-diagonal A + I
    norm_adjacency: np.ndarray
    features: np.ndarray
    membership: np.ndarray
    membership_matrix: np.ndarray  # G×N one-hot

    @property
    def num_graphs(self) -> int:
        return len(self.graphs)

    @property
    def num_nodes(self) -> int:
        return self.features.shape[0]

    @property
    def counts(self) -> np.ndarray:
        """Node count per graph as a G×1 column."""
        return self.membership_matrix.sum(axis=1, keepdims=True)

    @property
    def offsets(self) -> np.ndarray:
        sizes = [g.num_nodes for g in self.graphs]
        return np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)

    @property
    def labels(self) -> np.ndarray:
        values = [g.label for g in self.graphs]
        if self.graphs[0].task == "categorical":
            return np.asarray(values, dtype=np.int64)
        return np.asarray(values, dtype=np.float64)


# ==================== Synthetic motifs ====================


def motif_graph(spec: MotifSpec) -> nx.Graph:
    if spec.kind == "triangle":
        return nx.cycle_graph(3)
    if spec.kind == "house":
        return nx.house_graph()
    return nx.cycle_graph(spec.size)


def contains_motif(graph: nx.Graph, motif: nx.Graph) -> bool:
    """True when ``motif`` maps into ``graph`` edge-preservingly (not necessarily induced)."""
    if graph.number_of_nodes() < motif.number_of_nodes() or graph.number_of_edges() < motif.number_of_edges():
        return False
    return isomorphism.GraphMatcher(graph, motif).subgraph_is_monomorphic()


def _random_base(size: int, noise_edges: int, motif: nx.Graph, rng: Rng) -> nx.Graph:
    for _ in range(MAX_ATTEMPTS):
        base = nx.Graph()
        base.add_nodes_from(range(size))
        for i in range(1, size):
            base.add_edge(int(rng.integers(0, i - 1)), i)

        added, tries = 0, 0
        while added < noise_edges and tries < 50 * max(noise_edges, 1):
            tries += 1
            u, v = (int(x) for x in rng.integers(0, size - 1, size=2))
            if u == v or base.has_edge(u, v):
                continue
            base.add_edge(u, v)
            added += 1
        if added < noise_edges:
            logger.debug(f"base of {size} nodes took only {added} of {noise_edges} noise edges")

        if not contains_motif(base, motif):
            return base
    raise DatasetError(f"could not draw a motif-free base graph of {size} nodes in {MAX_ATTEMPTS} attempts")


def _endpoint_pool(base: nx.Graph, needed: int) -> List[int]:
    """Base nodes that may receive attachment or extra edges.

    Nodes of base degree ``AVOIDED_BASE_DEGREE`` are left out: after one new
    edge they look like a motif node to a two-hop encoder. Falls back to every
    base node when fewer than ``needed`` remain.
    """
    pool = [node for node in sorted(base.nodes) if base.degree(node) != AVOIDED_BASE_DEGREE]
    return pool if len(pool) >= needed else sorted(base.nodes)


def _attach_motif(base: nx.Graph, motif: nx.Graph, rng: Rng) -> Optional[Tuple[nx.Graph, List[int]]]:
    """Motif on new nodes, anchored to one base node, plus cycle-rank extra base edges.

    Returns None when the extra edges cannot be placed without putting the
    motif into the base.
    """
    graph = base.copy()
    n_base = base.number_of_nodes()
    mapping = {node: n_base + i for i, node in enumerate(sorted(motif.nodes))}
    # Extra edges keep edge counts equal to the decoy class.
    extra = motif.number_of_edges() - motif.number_of_nodes() + 1
    pool = _endpoint_pool(base, 2 if extra else 1)

    graph.add_nodes_from(mapping.values())
    graph.add_edges_from((mapping[u], mapping[v]) for u, v in motif.edges)
    graph.add_edge(mapping[min(motif.nodes)], pool[int(rng.integers(0, len(pool) - 1))])

    candidates = [(u, v) for i, u in enumerate(pool) for v in pool[i + 1:] if not base.has_edge(u, v)]
    for index in rng.permutation(len(candidates)):
        if extra == 0:
            break
        u, v = candidates[int(index)]
        graph.add_edge(u, v)
        if contains_motif(graph.subgraph(range(n_base)), motif):
            graph.remove_edge(u, v)
            continue
        extra -= 1
    if extra > 0:
        logger.warning(
            f"could not place {extra} extra base edge(s) on a {n_base}-node base without a motif; redrawing"
        )
        return None
    return graph, list(mapping.values())


def _attach_decoy(base: nx.Graph, motif: nx.Graph, rng: Rng) -> Optional[Tuple[nx.Graph, List[int]]]:
    """Path over motif-many new nodes whose degrees match the planted motif's."""
    m = motif.number_of_nodes()
    anchor = min(motif.nodes)
    targets = [motif.degree(node) + (1 if node == anchor else 0) for node in sorted(motif.nodes)]
    path_degree = [1 if i in (0, m - 1) else 2 for i in range(m)]
    stubs = [t - p for t, p in zip(targets, path_degree)]
    total = sum(stubs)
    n_base = base.number_of_nodes()
    pool = _endpoint_pool(base, total)
    if total > len(pool):
        return None

    for _ in range(MAX_ATTEMPTS):
        order = [pool[int(x)] for x in rng.permutation(len(pool))[:total]]
        assignment, cursor = [], 0
        for count in stubs:
            assignment.append(order[cursor:cursor + count])
            cursor += count
        if any(base.has_edge(a, b) for group in assignment for i, a in enumerate(group) for b in group[i + 1:]):
            continue

        graph = base.copy()
        new_nodes = list(range(n_base, n_base + m))
        graph.add_nodes_from(new_nodes)
        graph.add_edges_from(zip(new_nodes[:-1], new_nodes[1:]))
        for node, group in zip(new_nodes, assignment):
            graph.add_edges_from((node, target) for target in group)
        if not contains_motif(graph, motif):
            return graph, []
    return None


def _shuffled_graph(graph: nx.Graph, motif_nodes: Sequence[int], label: int, feature_dim: int, rng: Rng) -> Graph:
    n = graph.number_of_nodes()
    perm = rng.permutation(n)
    edges = sorted(tuple(sorted((int(perm[u]), int(perm[v])))) for u, v in graph.edges)
    mask = [False] * n
    for node in motif_nodes:
        mask[int(perm[node])] = True
    return Graph(n, tuple(edges), degree_features(n, edges, feature_dim), label, tuple(mask))


class GraphService:
    """Graph normalization, batching, dataset files and splits."""

    @staticmethod
    def normalize_adjacency(graph: Graph) -> np.ndarray:
        """D^-1/2 (A + I) D^-1/2 with D the degree matrix of A + I."""
        a = graph.adjacency + np.eye(graph.num_nodes)
        inv_sqrt = 1.0 / np.sqrt(a.sum(axis=1))
        return inv_sqrt[:, None] * a * inv_sqrt[None, :]

    @staticmethod
    def make_batch(graphs: Sequence[Graph]) -> Batch:
        graphs = tuple(graphs)
        if not graphs:
            raise DatasetError("cannot batch an empty sequence of graphs")
        dims = sorted({g.feature_dim for g in graphs})
        if len(dims) > 1:
            raise DatasetError(f"mixed feature dimensions in batch: {dims}")

        sizes = np.array([g.num_nodes for g in graphs], dtype=np.int64)
        membership = np.repeat(np.arange(len(graphs)), sizes)
        membership_matrix = (membership[None, :] == np.arange(len(graphs))[:, None]).astype(np.float64)

        return Batch(
            graphs=graphs,
            adjacency=block_diag(*[g.adjacency + np.eye(g.num_nodes) for g in graphs]),
            norm_adjacency=block_diag(*[g.normalized_adjacency for g in graphs]),
            features=np.vstack([g.features for g in graphs]),
            membership=membership,
            membership_matrix=membership_matrix,
        )

    @staticmethod
    def generate_motif_dataset(
        num_graphs: int,
        base_size_range: Tuple[int, int] = (10, 16),
        motif_kind: Union[str, MotifSpec] = "triangle",
        label_rule: str = "alternate",
        noise_edges: int = 2,
        seed: int = 0,
        feature_dim: int = DEFAULT_FEATURE_DIM,
    ) -> List[Graph]:
        """
        Planted-motif graphs: label 1 carries the motif attached to a random
        base node, label 0 a degree-matched path decoy. Both classes attach
        only to base nodes whose degree is not ``AVOIDED_BASE_DEGREE`` when
        enough exist.
        """
        spec = parse_motif(motif_kind) if isinstance(motif_kind, str) else motif_kind
        motif = motif_graph(spec)
        low, high = base_size_range
        if num_graphs < 1:
            raise ConfigError(f"num_graphs must be positive, got {num_graphs}")
        if low > high:
            raise ConfigError(f"base size range ({low}, {high}) is empty")
        if low < motif.number_of_nodes():
            raise ConfigError(
                f"base size lower bound {low} is below the {spec.kind} motif size {motif.number_of_nodes()}"
            )
        if noise_edges < 0:
            raise ConfigError(f"noise_edges must be non-negative, got {noise_edges}")
        if label_rule not in ("alternate", "random"):
            raise ConfigError(f"unknown label rule {label_rule!r}")

        rng = Rng(seed)
        graphs: List[Graph] = []
        for index in range(num_graphs):
            label = index % 2 if label_rule == "alternate" else int(rng.integers(0, 1))
            size = int(rng.integers(low, high))
            attach = _attach_motif if label == 1 else _attach_decoy
            for _ in range(MAX_ATTEMPTS):
                attached = attach(_random_base(size, noise_edges, motif, rng), motif, rng)
                if attached is not None:
                    break
            else:
                kind = "motif" if label == 1 else "motif-free decoy"
                raise DatasetError(f"could not attach a {kind} to a {size}-node base in {MAX_ATTEMPTS} attempts")
            graph, planted = attached
            graphs.append(_shuffled_graph(graph, planted, label, feature_dim, rng))

        logger.info(
            f"Generated {num_graphs} {spec.kind} graphs (base {low}-{high} nodes, {noise_edges} noise edges, seed {seed})"
        )
        return graphs

    @staticmethod
    def graph_from_record(record: GraphRecord, path: Optional[str] = None, line: Optional[int] = None) -> Graph:
        oriented: Dict[Tuple[int, int], Tuple[int, int]] = {}
        for u, v in record.edges:
            key = (min(u, v), max(u, v))
            if key in oriented:
                if oriented[key] == (u, v):
                    raise DatasetError(f"duplicate edge [{u}, {v}]", path, line)
                logger.warning(f"{path}:{line}: edge [{u}, {v}] listed in both directions; treating it as undirected")
                continue
            oriented[key] = (u, v)
        edges = tuple(oriented.values())

        features = record.features
        if features is None:
            features = degree_features(record.num_nodes, edges, DEFAULT_FEATURE_DIM)
        mask = None
        if record.motif_nodes is not None:
            chosen = set(record.motif_nodes)
            mask = tuple(i in chosen for i in range(record.num_nodes))
        try:
            return Graph(record.num_nodes, edges, np.asarray(features, dtype=np.float64), record.label, mask)
        except DatasetError as exc:
            raise DatasetError(str(exc), path, line) from None

    @staticmethod
    def read_dataset(path: Union[str, Path]) -> List[Graph]:
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise DatasetError(f"cannot read dataset ({exc.strerror})", str(path)) from None

        graphs: List[Graph] = []
        task = None
        for line_no, line in enumerate(text.split("\n"), start=1):
            if not line.strip():
                continue
            try:
                payload = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"malformed JSON ({exc.msg})", str(path), line_no) from None
            try:
                record = GraphRecord.model_validate(payload)
            except ValidationError as exc:
                raise DatasetError(describe_validation_error(exc), str(path), line_no) from None

            graph = GraphService.graph_from_record(record, str(path), line_no)
            if task is None:
                task = graph.task
            elif graph.task != task:
                raise DatasetError(f"mixed-task dataset: {graph.task} label after {task} labels", str(path), line_no)
            graphs.append(graph)

        if not graphs:
            raise DatasetError("dataset contains no graphs", str(path))
        logger.info(f"Read {len(graphs)} {task} graphs from {path}")
        return graphs

    @staticmethod
    def write_dataset(graphs: Sequence[Graph], path: Union[str, Path]) -> None:
        path = Path(path)
        lines = [json.dumps(g.to_record().model_dump(mode="json", exclude_none=True)) for g in graphs]
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "w", encoding="utf-8", newline="\n") as handle:
                handle.write("".join(line + "\n" for line in lines))
        except OSError as exc:
            raise DatasetError(f"cannot write dataset ({exc.strerror})", str(path)) from None
        logger.info(f"Wrote {len(graphs)} graphs to {path}")

    @staticmethod
    def split_indices(
        graphs: Sequence[Graph], fractions: Sequence[float], seed: int
    ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Index form of split_dataset; each returned array is sorted."""
        if len(fractions) != 3 or any(f < 0 for f in fractions):
            raise ConfigError(f"split needs three non-negative fractions, got {tuple(fractions)}")
        if abs(math.fsum(fractions) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must sum to 1, got {math.fsum(fractions)!r}")

        n = len(graphs)
        n_val = int(round(n * fractions[1]))
        n_test = int(round(n * fractions[2]))
        n_train = n - n_val - n_test
        if min(n_train, n_val, n_test) <= 0:
            raise DatasetError(f"split of {n} graphs into ({n_train}, {n_val}, {n_test}) leaves an empty split")

        indices = np.arange(n)
        labels = np.array([g.label for g in graphs])
        categorical = graphs[0].task == "categorical"
        state = seed % (2 ** 32)

        rest, test = train_test_split(
            indices,
            test_size=n_test,
            random_state=state,
            stratify=labels if categorical and _can_stratify(labels, n_test) else None,
        )
        train, val = train_test_split(
            rest,
            test_size=n_val,
            random_state=state,
            stratify=labels[rest] if categorical and _can_stratify(labels[rest], n_val) else None,
        )
        return np.sort(train), np.sort(val), np.sort(test)

    @staticmethod
    def split_dataset(
        graphs: Sequence[Graph], fractions: Sequence[float], seed: int
    ) -> Tuple[List[Graph], List[Graph], List[Graph]]:
        train, val, test = GraphService.split_indices(graphs, fractions, seed)
        return [graphs[i] for i in train], [graphs[i] for i in val], [graphs[i] for i in test]

    @staticmethod
    def holdout_indices(graphs: Sequence[Graph], fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
        """Split off ``fraction`` of ``graphs`` (at least one), stratified when labels allow."""
        n = len(graphs)
        held = max(1, int(round(n * fraction)))
        if held >= n:
            raise DatasetError(f"cannot hold out {held} of {n} graphs and keep a training set")
        labels = np.array([g.label for g in graphs])
        stratify = labels if graphs[0].task == "categorical" and _can_stratify(labels, held) else None
        keep, out = train_test_split(np.arange(n), test_size=held, random_state=seed % (2 ** 32), stratify=stratify)
        return np.sort(keep), np.sort(out)

    @staticmethod
    def kfold_indices(num_graphs: int, k: int, seed: int) -> List[Tuple[np.ndarray, np.ndarray]]:
        if k < 2:
            raise ConfigError(f"k-fold needs k >= 2, got {k}")
        if k > num_graphs:
            raise ConfigError(f"k-fold with k={k} needs at least {k} graphs, got {num_graphs}")
        folds = KFold(n_splits=k, shuffle=True, random_state=seed % (2 ** 32))
        return [(np.sort(train), np.sort(test)) for train, test in folds.split(np.arange(num_graphs))]


def _can_stratify(labels: np.ndarray, held_out: int) -> bool:
    _, counts = np.unique(labels, return_counts=True)
    classes = len(counts)
    return classes > 1 and counts.min() >= 2 and held_out >= classes and len(labels) - held_out >= classes


def describe_validation_error(exc: ValidationError) -> str:
    """One-line summary of a pydantic error, naming the offending fields."""
    parts = []
    for error in exc.errors():
        location = ".".join(str(p) for p in error["loc"])
        message = error["msg"].removeprefix("Value error, ")
        parts.append(f"{location}: {message}" if location else message)
    return "; ".join(parts)
