import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import ValidationError

from vgib.exceptions import ArchitectureMismatchError, CheckpointError, ConfigError, DatasetError, NonFiniteError
from vgib.schemas import CheckpointDocument, ParamRecord, TrainConfig
from vgib.services.bottleneck_service import LossBreakdown, plain_loss, select_subgraph, vgib_loss
from vgib.services.gnn_service import ExplainerModel, GNNModel, parameter_digest, predicted_labels, readout
from vgib.services.graph_service import Graph, GraphService, describe_validation_error
from vgib.utils import autodiff as ad
from vgib.utils.autodiff import DiffValue, Rng

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ["epoch", "train_total", "train_cls", "train_mi", "train_aux", "val_total", "seconds"]
PREDICT_BATCH_SIZE = 64

# Child stream offsets of the run seed.
_INIT_STREAM = 0
_TRAIN_STREAM = 1
_VALIDATION_STREAM = 2

Model = Union[GNNModel, ExplainerModel]
Splits = Tuple[Sequence[Graph], Sequence[Graph], Sequence[Graph]]


# ==================== Optimizer ====================


@dataclass
class AdamState:
    step: int = 0
    first: Dict[str, np.ndarray] = field(default_factory=dict)
    second: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, DiffValue],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """One bias-corrected Adam update, applied in place to ``params``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name}", term=name)

    state.step += 1
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step
    for name, param in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(param.value)
        m = beta1 * state.first.get(name, np.zeros_like(g)) + (1.0 - beta1) * g
        v = beta2 * state.second.get(name, np.zeros_like(g)) + (1.0 - beta2) * g * g
        state.first[name], state.second[name] = m, v
        param.value = param.value - lr * (m / correction1) / (np.sqrt(v / correction2) + eps)
    return state


class AdamOptimizer:
    def __init__(self, params: Mapping[str, DiffValue], lr: float):
        self.params = dict(params)
        self.lr = lr
        self.state = AdamState()

    def zero_grad(self) -> None:
        for param in self.params.values():
            param.zero_grad()

    def step(self) -> None:
        adam_step(self.params, {name: p.grad for name, p in self.params.items()}, self.state, self.lr)


# ==================== Results ====================


@dataclass
class EpochMetrics:
    epoch: int
    train_total: float
    train_cls: float
    train_mi: float
    train_aux: float
    val_total: float
    seconds: float

    def row(self) -> List[str]:
        return [str(self.epoch)] + [repr(float(getattr(self, c))) for c in METRIC_COLUMNS[1:]]


@dataclass
class TrainResult:
    checkpoint: CheckpointDocument
    model: Model
    metrics: List[EpochMetrics]
    test_accuracy: Optional[float] = None

    @property
    def best_epoch(self) -> int:
        return self.checkpoint.epoch


@dataclass
class FoldResult:
    fold: int
    accuracy: float
    best_epoch: int


@dataclass
class CrossValidationResult:
    folds: List[FoldResult]

    @property
    def mean(self) -> float:
        return float(np.mean([f.accuracy for f in self.folds]))

    @property
    def std(self) -> float:
        return float(np.std([f.accuracy for f in self.folds]))


def write_metrics_csv(metrics: Sequence[EpochMetrics], path: Union[str, Path]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        for row in metrics:
            writer.writerow(row.row())


# ==================== Checkpoints ====================


def _snapshot(model: Model, config: TrainConfig, epoch: int, val_loss: float, rng: Rng) -> CheckpointDocument:
    params = [
        ParamRecord(name=name, shape=list(p.shape), data=p.value.reshape(-1).tolist())
        for name, p in model.all_parameters().items()
    ]
    frozen_config = model.frozen.config if isinstance(model, ExplainerModel) else None
    return CheckpointDocument(
        config=config,
        epoch=epoch,
        val_loss=val_loss,
        params=params,
        rng_state=rng.get_state(),
        frozen_config=frozen_config,
    )


def load_parameters(model: Model, records: Sequence[ParamRecord]) -> None:
    """Copy checkpoint tensors into ``model``; names and shapes must match exactly."""
    by_name = {r.name: r for r in records}
    expected = model.all_parameters()
    for name, param in expected.items():
        record = by_name.get(name)
        if record is None:
            raise ArchitectureMismatchError(f"checkpoint is missing tensor {name}")
        if tuple(record.shape) != param.shape:
            raise ArchitectureMismatchError(
                f"tensor {name} has shape {tuple(record.shape)} in the checkpoint, model expects {param.shape}"
            )
    extra = sorted(set(by_name) - set(expected))
    if extra:
        raise ArchitectureMismatchError(f"checkpoint has unexpected tensor {extra[0]}")
    for name, param in expected.items():
        record = by_name[name]
        param.value = np.asarray(record.data, dtype=np.float64).reshape(record.shape)
        param.zero_grad()


def save_checkpoint(checkpoint: CheckpointDocument, path: Union[str, Path]) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(checkpoint.model_dump(mode="json")) + "\n", encoding="utf-8")
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot write checkpoint ({exc.strerror})") from None
    logger.info(f"Saved checkpoint (epoch {checkpoint.epoch}) to {path}")


def load_checkpoint(path: Union[str, Path]) -> CheckpointDocument:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc.strerror})") from None
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not a valid checkpoint document ({exc.msg} at line {exc.lineno})") from None
    try:
        return CheckpointDocument.model_validate(payload)
    except ValidationError as exc:
        raise CheckpointError(f"{path}: {describe_validation_error(exc)}") from None


def build_model(checkpoint: CheckpointDocument) -> Model:
    """Rebuild the model a checkpoint was saved from and load its tensors."""
    config = checkpoint.config
    if checkpoint.frozen_config is not None:
        frozen = GNNModel.build(checkpoint.frozen_config, Rng(0))
        model: Model = ExplainerModel.build(config, frozen, Rng(0))
    else:
        model = GNNModel.build(config, Rng(0))
    load_parameters(model, checkpoint.params)
    return model


# ==================== Prediction ====================


def predict(model: Model, graphs: Sequence[Graph], pooling: str = "clean") -> np.ndarray:
    """Class index (or real value) per graph.

    ``clean`` pools every node; ``subgraph`` pools only the selected
    subgraph of each graph (all nodes when the selection is empty).
    """
    if pooling not in ("clean", "subgraph"):
        raise ConfigError(f"unknown pooling {pooling!r}")
    task = model.config.task
    outputs = []
    for start in range(0, len(graphs), PREDICT_BATCH_SIZE):
        batch = GraphService.make_batch(graphs[start:start + PREDICT_BATCH_SIZE])
        if pooling == "clean":
            logits = model.clean_logits(batch).value
        else:
            p = model.node_probabilities(batch)
            membership = batch.membership_matrix.copy()
            for g, (graph, offset) in enumerate(zip(batch.graphs, batch.offsets)):
                selection = select_subgraph(graph, p[offset:offset + graph.num_nodes])
                if not selection.empty:
                    membership[g] = 0.0
                    membership[g, offset + np.asarray(selection.nodes)] = 1.0
            h = model.representations(batch)
            logits = model.logits(readout(h, membership, model.readout_kind)).value
        outputs.append(predicted_labels(logits, task))
    return np.concatenate(outputs)


def evaluate_accuracy(model: Model, graphs: Sequence[Graph], pooling: str = "clean") -> float:
    """Fraction correct (categorical) or mean squared error (regression)."""
    if not graphs:
        raise DatasetError("cannot evaluate on an empty set of graphs")
    predictions = predict(model, graphs, pooling)
    labels = np.asarray([g.label for g in graphs])
    if model.config.task == "categorical":
        return float(np.mean(predictions == labels))
    return float(np.mean((predictions - labels) ** 2))


def _accuracy_pooling(config: TrainConfig) -> str:
    return "subgraph" if config.mode == "classify" and config.gates else "clean"


# ==================== Training loop ====================


def _objective(model: Model, config: TrainConfig, graphs: Sequence[Graph], rng: Rng, targets=None) -> LossBreakdown:
    batch = GraphService.make_batch(graphs)
    if not config.gates:
        return plain_loss(model, batch, targets)
    return vgib_loss(model, batch, config.beta, config.temperature, rng, config.aux_weight, targets=targets)


def _check_finite(loss: LossBreakdown, epoch: int, phase: str) -> None:
    for term, value in loss.terms:
        if not math.isfinite(value):
            raise NonFiniteError(f"{phase} loss term {term} became {value} at epoch {epoch}", epoch=epoch, term=term)


def _validation_loss(model: Model, config: TrainConfig, graphs: Sequence[Graph], epoch: int, targets=None) -> float:
    """Graph-weighted mean validation total; the same noise stream is replayed every epoch."""
    rng = Rng(config.seed).spawn(_VALIDATION_STREAM)
    total, count = 0.0, 0
    for start in range(0, len(graphs), config.batch_size):
        chunk = graphs[start:start + config.batch_size]
        chunk_targets = None if targets is None else targets[start:start + config.batch_size]
        loss = _objective(model, config, chunk, rng, chunk_targets)
        _check_finite(loss, epoch, "validation")
        total += loss.total.item() * len(chunk)
        count += len(chunk)
    return total / count


def _resolve_config(config: TrainConfig, splits: Splits) -> TrainConfig:
    train_graphs, val_graphs, test_graphs = splits
    if not train_graphs or not val_graphs:
        raise DatasetError("training needs non-empty train and validation splits")
    everything = list(train_graphs) + list(val_graphs) + list(test_graphs)
    tasks = {g.task for g in everything}
    if len(tasks) > 1:
        raise DatasetError("mixed-task dataset: categorical and regression labels")
    task = tasks.pop()
    if task != config.task:
        raise ConfigError(f"dataset labels are {task} but the run is configured for {config.task}")
    dims = {g.feature_dim for g in everything}
    if len(dims) > 1:
        raise DatasetError(f"mixed feature dimensions in dataset: {sorted(dims)}")
    # At least two logits so a single-class split still trains a classifier.
    num_outputs = max(max(int(g.label) for g in everything) + 1, 2) if task == "categorical" else 1
    return config.model_copy(update={"feature_dim": dims.pop(), "num_outputs": num_outputs})


def _fit(
    model: Model,
    config: TrainConfig,
    train_graphs: Sequence[Graph],
    val_graphs: Sequence[Graph],
    train_targets: Optional[np.ndarray] = None,
    val_targets: Optional[np.ndarray] = None,
) -> Tuple[CheckpointDocument, List[EpochMetrics]]:
    run_rng = Rng(config.seed).spawn(_TRAIN_STREAM)
    optimizer = AdamOptimizer(model.named_parameters(), config.learning_rate)

    best = _snapshot(model, config, 0, _validation_loss(model, config, val_graphs, 0, val_targets), run_rng)
    logger.info(f"Initial validation loss {best.val_loss:.6f}")

    metrics: List[EpochMetrics] = []
    for epoch in range(1, config.epochs + 1):
        started = time.perf_counter()
        order = run_rng.permutation(len(train_graphs))
        sums = np.zeros(4)
        for start in range(0, len(order), config.batch_size):
            picked = order[start:start + config.batch_size]
            targets = None if train_targets is None else train_targets[picked]
            loss = _objective(model, config, [train_graphs[i] for i in picked], run_rng, targets)
            _check_finite(loss, epoch, "training")
            optimizer.zero_grad()
            ad.backward(loss.total)
            try:
                optimizer.step()
            except NonFiniteError as exc:
                raise NonFiniteError(f"{exc} at epoch {epoch}", epoch=epoch, term=exc.term) from None
            sums += len(picked) * np.array([loss.total.item(), loss.cls, loss.mi, loss.aux])

        val_total = _validation_loss(model, config, val_graphs, epoch, val_targets)
        elapsed = time.perf_counter() - started
        means = sums / len(train_graphs)
        metrics.append(EpochMetrics(
            epoch=epoch,
            train_total=float(means[0]),
            train_cls=float(means[1]),
            train_mi=float(means[2]),
            train_aux=float(means[3]),
            val_total=val_total,
            seconds=elapsed if config.record_wall_time else 0.0,
        ))
        logger.info(
            f"Epoch {epoch}/{config.epochs}: total {means[0]:.4f} cls {means[1]:.4f} mi {means[2]:.4f} "
            f"aux {means[3]:.4f} val {val_total:.4f} ({elapsed:.2f}s)"
        )
        if val_total < best.val_loss:
            best = _snapshot(model, config, epoch, val_total, run_rng)

    load_parameters(model, best.params)
    return best, metrics


class TrainingService:
    """End-to-end training, post-hoc explainer training and k-fold evaluation."""

    @staticmethod
    def train(splits: Splits, config: TrainConfig) -> TrainResult:
        if config.mode == "explain":
            raise ConfigError("explain mode trains against a frozen classifier; use train_posthoc")
        config = _resolve_config(config, splits)
        train_graphs, val_graphs, test_graphs = splits
        logger.info(
            f"Training {config.mode} ({config.backbone}, gates={'on' if config.gates else 'off'}) on "
            f"{len(train_graphs)}/{len(val_graphs)}/{len(test_graphs)} graphs for {config.epochs} epochs"
        )

        model = GNNModel.build(config, Rng(config.seed).spawn(_INIT_STREAM))
        best, metrics = _fit(model, config, list(train_graphs), list(val_graphs))

        accuracy = None
        if test_graphs:
            accuracy = evaluate_accuracy(model, list(test_graphs), _accuracy_pooling(config))
            logger.info(f"Best epoch {best.epoch}: test accuracy {accuracy:.4f}")
        return TrainResult(checkpoint=best, model=model, metrics=metrics, test_accuracy=accuracy)

    @staticmethod
    def train_posthoc(frozen_checkpoint: CheckpointDocument, splits: Splits, config: TrainConfig) -> TrainResult:
        """Train an explainer for a frozen plain classifier, targeting its own predictions."""
        frozen_config = frozen_checkpoint.config
        if frozen_config.mode != "classify" or frozen_config.gates or frozen_checkpoint.frozen_config is not None:
            raise ArchitectureMismatchError(
                "post-hoc explanation needs a plain classifier checkpoint (mode classify, gates disabled)"
            )
        config = config.model_copy(update={"mode": "explain", "gates": True, "task": frozen_config.task})
        config = _resolve_config(config, splits)
        if config.feature_dim != frozen_config.feature_dim:
            raise ArchitectureMismatchError(
                f"dataset feature dimension {config.feature_dim} does not match the frozen classifier's "
                f"{frozen_config.feature_dim}"
            )
        config = config.model_copy(update={"num_outputs": frozen_config.num_outputs})

        frozen = build_model(frozen_checkpoint)
        before = parameter_digest(frozen.named_parameters())

        train_graphs, val_graphs, test_graphs = (list(s) for s in splits)
        train_targets = predict(frozen, train_graphs)
        val_targets = predict(frozen, val_graphs)

        model = ExplainerModel.build(config, frozen, Rng(config.seed).spawn(_INIT_STREAM))
        best, metrics = _fit(model, config, train_graphs, val_graphs, train_targets, val_targets)

        if parameter_digest(frozen.named_parameters()) != before:
            raise CheckpointError("frozen classifier parameters changed during explainer training")

        accuracy = None
        if test_graphs:
            accuracy = evaluate_accuracy(frozen, test_graphs)
        return TrainResult(checkpoint=best, model=model, metrics=metrics, test_accuracy=accuracy)

    @staticmethod
    def cross_validate(graphs: Sequence[Graph], config: TrainConfig, k: int = 10) -> CrossValidationResult:
        """k-fold test accuracy; each training fold holds out 10% for model selection."""
        graphs = list(graphs)
        folds = []
        for fold, (train_idx, test_idx) in enumerate(GraphService.kfold_indices(len(graphs), k, config.seed)):
            fold_graphs = [graphs[i] for i in train_idx]
            train_part, val_part = GraphService.holdout_indices(fold_graphs, 0.1, config.seed)
            result = TrainingService.train(
                ([fold_graphs[i] for i in train_part], [fold_graphs[i] for i in val_part], [graphs[i] for i in test_idx]),
                config,
            )
            folds.append(FoldResult(fold=fold, accuracy=result.test_accuracy, best_epoch=result.best_epoch))
            logger.info(f"Fold {fold + 1}/{k}: accuracy {result.test_accuracy:.4f} (best epoch {result.best_epoch})")
        return CrossValidationResult(folds)
