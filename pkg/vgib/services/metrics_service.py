import csv
import json
import logging
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import networkx as nx
import numpy as np
from pydantic import ValidationError
from sklearn.metrics import f1_score, roc_auc_score

from vgib.exceptions import DatasetError, EvaluationError, ShapeError
from vgib.schemas import DivergenceSummary, FidelityRecord, FidelityReport, MotifRecovery, ScoreRecord
from vgib.services.graph_service import Graph, describe_validation_error
from vgib.utils.autodiff import Rng

logger = logging.getLogger(__name__)

Predictor = Callable[[Sequence[Graph]], np.ndarray]
PropertyFn = Callable[[Graph], float]

FIDELITY_COLUMNS = ["k", "fidelity_plus", "fidelity_minus", "n", "empty_subgraphs"]


# ==================== Graph properties ====================


def triangle_count(graph: Graph) -> float:
    """Number of distinct triangles."""
    return sum(nx.triangles(graph.to_networkx()).values()) / 3.0


def average_degree(graph: Graph) -> float:
    return 2.0 * len(graph.edges) / graph.num_nodes


PROPERTIES: Dict[str, PropertyFn] = {
    "triangles": triangle_count,
    "avg_degree": average_degree,
}


# ==================== Selection ====================


def topk_count(num_nodes: int, k: float) -> int:
    """round-half-up(k·n), clipped to [1, n]."""
    return int(min(num_nodes, max(1, np.floor(k * num_nodes + 0.5))))


def _majority_label(graphs: Sequence[Graph]) -> int:
    labels = np.asarray([g.label for g in graphs], dtype=np.int64)
    return int(np.argmax(np.bincount(labels)))


class MetricsService:
    """Fidelity, property divergence and motif recovery for node-score explanations."""

    @staticmethod
    def topk_nodes(scores: Sequence[float], k: float) -> Tuple[int, ...]:
        """Highest-scoring nodes; ties go to the smaller node index. Returned in ascending order."""
        scores = np.asarray(scores, dtype=np.float64).reshape(-1)
        if scores.size == 0:
            raise EvaluationError("topk_nodes: empty graph")
        if not 0.0 < k <= 1.0:
            raise EvaluationError(f"topk_nodes: sparsity {k!r} outside (0, 1]")
        order = np.lexsort((np.arange(scores.size), -scores))
        return tuple(sorted(int(i) for i in order[:topk_count(scores.size, k)]))

    @staticmethod
    def fidelity(predictor: Predictor, graphs: Sequence[Graph], scores: Sequence[Sequence[float]], k: float) -> FidelityReport:
        """Fidelity+ and Fidelity- at sparsity ``k`` over induced, freshly normalized subgraphs.

        An empty explanatory or complementary subgraph is predicted as the
        majority label of ``graphs`` and counted in ``empty_subgraphs``.
        """
        graphs = list(graphs)
        if not graphs:
            raise EvaluationError("fidelity needs at least one graph")
        if len(scores) != len(graphs):
            raise ShapeError(f"fidelity: {len(scores)} score vectors for {len(graphs)} graphs")
        if any(g.task != "categorical" for g in graphs):
            raise EvaluationError("fidelity is defined for categorical labels only")

        subgraphs: List[Optional[Graph]] = []
        complements: List[Optional[Graph]] = []
        for graph, node_scores in zip(graphs, scores):
            if len(node_scores) != graph.num_nodes:
                raise ShapeError(f"fidelity: {len(node_scores)} scores for a {graph.num_nodes}-node graph")
            chosen = MetricsService.topk_nodes(node_scores, k)
            rest = sorted(set(range(graph.num_nodes)) - set(chosen))
            subgraphs.append(graph.induced(chosen))
            complements.append(graph.induced(rest) if rest else None)

        fallback = _majority_label(graphs)
        full = predictor(graphs)
        sub = _predict_or_fallback(predictor, subgraphs, fallback)
        comp = _predict_or_fallback(predictor, complements, fallback)
        empty = sum(g is None for g in subgraphs) + sum(g is None for g in complements)

        labels = np.asarray([g.label for g in graphs])
        right_full = (full == labels).astype(np.float64)
        plus = float(np.mean(right_full - (comp == labels)))
        minus = float(np.mean(right_full - (sub == labels)))

        records = [
            FidelityRecord(label=int(y), full_prediction=int(a), subgraph_prediction=int(b), complement_prediction=int(c))
            for y, a, b, c in zip(labels, full, sub, comp)
        ]
        return FidelityReport(
            k=k, fidelity_plus=plus, fidelity_minus=minus, n_samples=len(graphs), empty_subgraphs=empty, records=records
        )

    @staticmethod
    def fidelity_minus(predictor: Predictor, graphs: Sequence[Graph], scores, k: float) -> float:
        return MetricsService.fidelity(predictor, graphs, scores, k).fidelity_minus

    @staticmethod
    def fidelity_plus(predictor: Predictor, graphs: Sequence[Graph], scores, k: float) -> float:
        return MetricsService.fidelity(predictor, graphs, scores, k).fidelity_plus

    @staticmethod
    def sparsity_sweep(predictor: Predictor, graphs: Sequence[Graph], scores, k_list: Sequence[float]) -> List[FidelityReport]:
        if not k_list:
            raise EvaluationError("sparsity_sweep needs at least one sparsity value")
        reports = []
        for k in k_list:
            report = MetricsService.fidelity(predictor, graphs, scores, k)
            logger.info(f"k={k:.2f}: fidelity+ {report.fidelity_plus:.4f} fidelity- {report.fidelity_minus:.4f}")
            reports.append(report)
        return reports

    @staticmethod
    def property_divergence(
        property_fn: PropertyFn, graphs: Sequence[Graph], selections: Sequence[Sequence[int]], name: str = "property"
    ) -> DivergenceSummary:
        """Mean and population std of |property(G) - property(G_sub)| over non-empty selections."""
        if len(selections) != len(graphs):
            raise ShapeError(f"property_divergence: {len(selections)} selections for {len(graphs)} graphs")
        values, empty = [], 0
        for graph, nodes in zip(graphs, selections):
            if not nodes:
                empty += 1
                continue
            values.append(abs(property_fn(graph) - property_fn(graph.induced(nodes))))
        if not values:
            raise EvaluationError("property_divergence: every selection is empty")
        return DivergenceSummary(
            property_name=name, mean=float(np.mean(values)), std=float(np.std(values)), n=len(values), empty_selections=empty
        )

    @staticmethod
    def motif_recovery(scores: Sequence[Sequence[float]], masks: Sequence[Optional[Sequence[bool]]]) -> MotifRecovery:
        """Node-level AUC pooled over graphs and F1 of {p >= 0.5}; graphs without a mask are skipped."""
        if len(scores) != len(masks):
            raise ShapeError(f"motif_recovery: {len(scores)} score vectors for {len(masks)} masks")
        pooled_scores, pooled_masks, used = [], [], 0
        for node_scores, mask in zip(scores, masks):
            if mask is None:
                continue
            if len(node_scores) != len(mask):
                raise ShapeError(f"motif_recovery: {len(node_scores)} scores for a mask of length {len(mask)}")
            pooled_scores.extend(float(s) for s in node_scores)
            pooled_masks.extend(int(bool(m)) for m in mask)
            used += 1
        if not used:
            raise EvaluationError("motif_recovery: no graph carries a motif mask")
        truth = np.asarray(pooled_masks)
        if truth.min() == truth.max():
            raise EvaluationError("motif_recovery: pooled masks are all one class, AUC is undefined")
        predicted = (np.asarray(pooled_scores) >= 0.5).astype(int)
        return MotifRecovery(
            auc=float(roc_auc_score(truth, pooled_scores)),
            f1=float(f1_score(truth, predicted, zero_division=0)),
            n_graphs=used,
            n_nodes=len(pooled_masks),
        )

    @staticmethod
    def random_scores(graphs: Sequence[Graph], rng: Rng) -> List[np.ndarray]:
        return [rng.uniform(g.num_nodes) for g in graphs]

    @staticmethod
    def random_baseline(
        predictor: Predictor, graphs: Sequence[Graph], k: float, trials: int, seed: int
    ) -> Dict[str, float]:
        """Mean and population std of Fidelity± over ``trials`` random-score explainers."""
        if trials < 1:
            raise EvaluationError(f"random_baseline needs at least one trial, got {trials}")
        rng = Rng(seed)
        plus, minus = [], []
        for _ in range(trials):
            report = MetricsService.fidelity(predictor, graphs, MetricsService.random_scores(graphs, rng), k)
            plus.append(report.fidelity_plus)
            minus.append(report.fidelity_minus)
        return {
            "k": k,
            "fidelity_plus_mean": float(np.mean(plus)),
            "fidelity_plus_std": float(np.std(plus)),
            "fidelity_minus_mean": float(np.mean(minus)),
            "fidelity_minus_std": float(np.std(minus)),
            "trials": trials,
        }

    @staticmethod
    def write_fidelity_csv(reports: Sequence[FidelityReport], path: Union[str, Path]) -> None:
        with open(path, "w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(FIDELITY_COLUMNS)
            for r in reports:
                writer.writerow([repr(r.k), repr(r.fidelity_plus), repr(r.fidelity_minus), r.n_samples, r.empty_subgraphs])


def _predict_or_fallback(predictor: Predictor, graphs: Sequence[Optional[Graph]], fallback: int) -> np.ndarray:
    out = np.full(len(graphs), fallback, dtype=np.int64)
    present = [i for i, g in enumerate(graphs) if g is not None]
    if present:
        out[present] = np.asarray(predictor([graphs[i] for i in present]), dtype=np.int64)
    return out


# ==================== Score files ====================


def write_scores(records: Sequence[ScoreRecord], path: Union[str, Path]) -> None:
    """One JSON object per line, in the order given."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as handle:
            for record in records:
                handle.write(json.dumps(record.model_dump(mode="json")) + "\n")
    except OSError as exc:
        raise DatasetError(f"cannot write scores ({exc.strerror})", str(path)) from None
    logger.info(f"Wrote node scores for {len(records)} graphs to {path}")


def read_scores(path: Union[str, Path]) -> Dict[int, ScoreRecord]:
    """Score records keyed by graph index; a repeated index is an error."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DatasetError(f"cannot read scores ({exc.strerror})", str(path)) from None

    records: Dict[int, ScoreRecord] = {}
    for line_no, line in enumerate(text.split("\n"), start=1):
        if not line.strip():
            continue
        try:
            record = ScoreRecord.model_validate(json.loads(line))
        except json.JSONDecodeError as exc:
            raise DatasetError(f"malformed JSON ({exc.msg})", str(path), line_no) from None
        except ValidationError as exc:
            raise DatasetError(describe_validation_error(exc), str(path), line_no) from None
        if record.graph_index in records:
            raise DatasetError(f"graph_index {record.graph_index} appears twice", str(path), line_no)
        records[record.graph_index] = record
    return records
