"""Message-passing encoders, the node probability head, readout and the classifier head.

Parameters are ``DiffValue`` leaves named ``<component>.<tensor>`` so checkpoints
and gradient reports can refer to them directly.
"""

import hashlib
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from vgib.exceptions import ConfigError, ShapeError
from vgib.schemas import TrainConfig
from vgib.services.graph_service import Batch
from vgib.utils import autodiff as ad
from vgib.utils.autodiff import DiffValue, Rng

logger = logging.getLogger(__name__)


def glorot(fan_in: int, fan_out: int, rng: Rng) -> np.ndarray:
    """Uniform in ±sqrt(6 / (fan_in + fan_out))."""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return (2.0 * rng.uniform((fan_in, fan_out)) - 1.0) * limit


def _width(x) -> int:
    return x.shape[1] if len(x.shape) == 2 else -1


# ==================== Encoders ====================


@dataclass
class GcnStack:
    weights: List[DiffValue]

    @classmethod
    def initialize(cls, in_dim: int, hidden_dim: int, layers: int, rng: Rng, prefix: str = "encoder") -> "GcnStack":
        dims = [in_dim] + [hidden_dim] * layers
        weights = [ad.parameter(glorot(dims[i], dims[i + 1], rng), f"{prefix}.W{i}") for i in range(layers)]
        return cls(weights)

    def named_parameters(self) -> Dict[str, DiffValue]:
        return {w.name: w for w in self.weights}

    def forward(self, norm_adjacency, features) -> DiffValue:
        return gcn_forward(norm_adjacency, features, self)


@dataclass
class GinLayer:
    w1: DiffValue
    b1: DiffValue
    w2: DiffValue
    b2: DiffValue


@dataclass
class GinStack:
    """Sum aggregation with a fixed self weight (1 + 0), then a two-layer MLP per layer."""

    layers: List[GinLayer]

    @classmethod
    def initialize(cls, in_dim: int, hidden_dim: int, layers: int, rng: Rng, prefix: str = "encoder") -> "GinStack":
        stack = []
        for i in range(layers):
            fan_in = in_dim if i == 0 else hidden_dim
            stack.append(GinLayer(
                w1=ad.parameter(glorot(fan_in, hidden_dim, rng), f"{prefix}.layer{i}.W1"),
                b1=ad.parameter(np.zeros((1, hidden_dim)), f"{prefix}.layer{i}.b1"),
                w2=ad.parameter(glorot(hidden_dim, hidden_dim, rng), f"{prefix}.layer{i}.W2"),
                b2=ad.parameter(np.zeros((1, hidden_dim)), f"{prefix}.layer{i}.b2"),
            ))
        return cls(stack)

    def named_parameters(self) -> Dict[str, DiffValue]:
        params = {}
        for layer in self.layers:
            for p in (layer.w1, layer.b1, layer.w2, layer.b2):
                params[p.name] = p
        return params

    def forward(self, adjacency_with_self, features) -> DiffValue:
        return gin_forward(adjacency_with_self, features, self)


def gcn_forward(norm_adjacency, features, stack: GcnStack) -> DiffValue:
    """H = ReLU(Ā · … ReLU(Ā X W1) … Wl)."""
    if _width(features) != stack.weights[0].shape[0]:
        raise ShapeError(
            f"gcn_forward: feature dimension {_width(features)} does not match first layer input "
            f"{stack.weights[0].shape[0]}"
        )
    h = features
    for w in stack.weights:
        h = ad.relu(ad.matmul(norm_adjacency, ad.matmul(h, w)))
    return h


def gin_forward(adjacency_with_self, features, stack: GinStack) -> DiffValue:
    if _width(features) != stack.layers[0].w1.shape[0]:
        raise ShapeError(
            f"gin_forward: feature dimension {_width(features)} does not match first layer input "
            f"{stack.layers[0].w1.shape[0]}"
        )
    h = features
    for layer in stack.layers:
        aggregated = ad.matmul(adjacency_with_self, h)
        hidden = ad.relu(ad.matmul(aggregated, layer.w1) + layer.b1)
        h = ad.relu(ad.matmul(hidden, layer.w2) + layer.b2)
    return h


# ==================== Heads ====================


@dataclass
class ProbabilityHead:
    """Row-wise MLP: d -> d (ReLU) -> 1 -> sigmoid."""

    w1: DiffValue
    b1: DiffValue
    w2: DiffValue
    b2: DiffValue

    @classmethod
    def initialize(cls, hidden_dim: int, rng: Rng, prefix: str = "prob") -> "ProbabilityHead":
        return cls(
            w1=ad.parameter(glorot(hidden_dim, hidden_dim, rng), f"{prefix}.W1"),
            b1=ad.parameter(np.zeros((1, hidden_dim)), f"{prefix}.b1"),
            w2=ad.parameter(glorot(hidden_dim, 1, rng), f"{prefix}.W2"),
            b2=ad.parameter(np.zeros((1, 1)), f"{prefix}.b2"),
        )

    def named_parameters(self) -> Dict[str, DiffValue]:
        return {p.name: p for p in (self.w1, self.b1, self.w2, self.b2)}


def probability_head(h, head: ProbabilityHead) -> DiffValue:
    """Transmission probability p_i per node, as an n×1 column."""
    if _width(h) != head.w1.shape[0]:
        raise ShapeError(f"probability_head: representation width {_width(h)} does not match {head.w1.shape[0]}")
    hidden = ad.relu(ad.matmul(h, head.w1) + head.b1)
    return ad.sigmoid(ad.matmul(hidden, head.w2) + head.b2)


@dataclass
class ClassifierHead:
    weight: DiffValue
    bias: DiffValue

    @classmethod
    def initialize(cls, hidden_dim: int, num_outputs: int, rng: Rng, prefix: str = "classifier") -> "ClassifierHead":
        return cls(
            weight=ad.parameter(glorot(hidden_dim, num_outputs, rng), f"{prefix}.W"),
            bias=ad.parameter(np.zeros((1, num_outputs)), f"{prefix}.b"),
        )

    def named_parameters(self) -> Dict[str, DiffValue]:
        return {self.weight.name: self.weight, self.bias.name: self.bias}


def classify(embedding, head: ClassifierHead) -> DiffValue:
    """Logits (categorical) or a single real prediction column (regression)."""
    if _width(embedding) != head.weight.shape[0]:
        raise ShapeError(
            f"classify: embedding shape {tuple(embedding.shape)} does not match head input {head.weight.shape[0]}"
        )
    return ad.matmul(embedding, head.weight) + head.bias


def readout(node_values, membership_matrix: np.ndarray, kind: str) -> DiffValue:
    """Per-graph mean or sum over the rows selected by each row of ``membership_matrix``."""
    if kind not in ("mean", "sum"):
        raise ConfigError(f"unknown readout {kind!r}")
    pooled = ad.matmul(membership_matrix, node_values)
    if kind == "sum":
        return pooled
    counts = membership_matrix.sum(axis=1, keepdims=True)
    return pooled / np.maximum(counts, 1.0)


# ==================== Models ====================


class GNNModel:
    """Encoder plus optional probability head and classifier head for one TrainConfig."""

    def __init__(
        self,
        config: TrainConfig,
        encoder,
        probability: Optional[ProbabilityHead],
        classifier: ClassifierHead,
    ):
        self.config = config
        self.encoder = encoder
        self.probability = probability
        self.classifier = classifier

    @classmethod
    def build(cls, config: TrainConfig, rng: Rng, prefix: str = "") -> "GNNModel":
        if config.feature_dim is None or config.num_outputs is None:
            raise ConfigError("feature_dim and num_outputs must be resolved before building a model")
        stack = GcnStack if config.backbone == "gcn" else GinStack
        encoder = stack.initialize(config.feature_dim, config.hidden_dim, config.layers, rng, f"{prefix}encoder")
        probability = ProbabilityHead.initialize(config.hidden_dim, rng, f"{prefix}prob") if config.gates else None
        classifier = ClassifierHead.initialize(config.hidden_dim, config.num_outputs, rng, f"{prefix}classifier")
        logger.debug(f"Built {config.backbone} model with {config.layers} layers, hidden {config.hidden_dim}")
        return cls(config, encoder, probability, classifier)

    @property
    def has_auxiliary(self) -> bool:
        return True

    @property
    def readout_kind(self) -> str:
        return self.config.readout

    def named_parameters(self) -> Dict[str, DiffValue]:
        params = dict(self.encoder.named_parameters())
        if self.probability is not None:
            params.update(self.probability.named_parameters())
        params.update(self.classifier.named_parameters())
        return params

    def all_parameters(self) -> Dict[str, DiffValue]:
        """Every tensor a checkpoint must hold (trainable or not)."""
        return self.named_parameters()

    def encode(self, batch: Batch) -> DiffValue:
        if self.config.backbone == "gcn":
            return self.encoder.forward(batch.norm_adjacency, batch.features)
        return self.encoder.forward(batch.adjacency, batch.features)

    def representations(self, batch: Batch) -> DiffValue:
        """Node representations that gates and noise act on."""
        return self.encode(batch)

    def gate_probabilities(self, batch: Batch, h: DiffValue) -> DiffValue:
        if self.probability is None:
            raise ConfigError("this model was trained without gates and has no probability head")
        return probability_head(h, self.probability)

    def logits(self, embedding) -> DiffValue:
        return classify(embedding, self.classifier)

    def clean_logits(self, batch: Batch) -> DiffValue:
        h = self.encode(batch)
        return self.logits(readout(h, batch.membership_matrix, self.config.readout))

    def node_probabilities(self, batch: Batch) -> np.ndarray:
        """Deterministic p per node (no gate sampling)."""
        h = self.representations(batch)
        return self.gate_probabilities(batch, h).value[:, 0].copy()


class ExplainerModel:
    """Post-hoc explainer: its own encoder and probability head over a frozen classifier.

    Gates and noise act on the frozen classifier's node representations and
    the frozen readout and head produce the logits.
    """

    FROZEN_PREFIX = "frozen."

    def __init__(self, config: TrainConfig, encoder, probability: ProbabilityHead, frozen: GNNModel):
        self.config = config
        self.encoder = encoder
        self.probability = probability
        self.frozen = frozen

    @classmethod
    def build(cls, config: TrainConfig, frozen: GNNModel, rng: Rng) -> "ExplainerModel":
        if config.feature_dim is None:
            raise ConfigError("feature_dim must be resolved before building an explainer")
        stack = GcnStack if config.backbone == "gcn" else GinStack
        encoder = stack.initialize(config.feature_dim, config.hidden_dim, config.layers, rng)
        probability = ProbabilityHead.initialize(config.hidden_dim, rng)
        return cls(config, encoder, probability, frozen)

    @property
    def has_auxiliary(self) -> bool:
        return False

    @property
    def readout_kind(self) -> str:
        return self.frozen.config.readout

    def named_parameters(self) -> Dict[str, DiffValue]:
        params = dict(self.encoder.named_parameters())
        params.update(self.probability.named_parameters())
        return params

    def all_parameters(self) -> Dict[str, DiffValue]:
        params = self.named_parameters()
        for name, value in self.frozen.named_parameters().items():
            params[self.FROZEN_PREFIX + name] = value
        return params

    def encode(self, batch: Batch) -> DiffValue:
        if self.config.backbone == "gcn":
            return self.encoder.forward(batch.norm_adjacency, batch.features)
        return self.encoder.forward(batch.adjacency, batch.features)

    def representations(self, batch: Batch) -> DiffValue:
        # Frozen values enter as constants so no gradient reaches them.
        return ad.constant(self.frozen.encode(batch).value)

    def gate_probabilities(self, batch: Batch, h: DiffValue) -> DiffValue:
        return probability_head(self.encode(batch), self.probability)

    def logits(self, embedding) -> DiffValue:
        head = self.frozen.classifier
        return ad.matmul(embedding, head.weight.value) + head.bias.value

    def clean_logits(self, batch: Batch) -> DiffValue:
        return self.frozen.clean_logits(batch)

    def node_probabilities(self, batch: Batch) -> np.ndarray:
        return self.gate_probabilities(batch, None).value[:, 0].copy()


def parameter_digest(params: Dict[str, DiffValue]) -> str:
    """sha256 over tensor names and raw bytes, in name order."""
    digest = hashlib.sha256()
    for name in sorted(params):
        digest.update(name.encode("utf-8"))
        digest.update(np.ascontiguousarray(params[name].value).tobytes())
    return digest.hexdigest()


def predicted_labels(logits: np.ndarray, task: str) -> np.ndarray:
    if task == "categorical":
        return np.argmax(logits, axis=1)
    return logits[:, 0].copy()


