"""Noise injection, the variational compression bound and subgraph selection.

Per graph G with m nodes, gates λ̂ and representations h:

    A = Σ (1 - λ̂_j)²           (floored at 1e-8)
    B = Σ λ̂_j (h_j - μ) / σ     (per dimension; B² is the mean over dimensions)
    term = -½ log A + A / (2m) + B² / (2m)

and the batch value is the mean of the per-graph terms.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import networkx as nx
import numpy as np

from vgib.exceptions import ConfigError, DatasetError, ShapeError
from vgib.services.gnn_service import readout
from vgib.services.graph_service import Batch, Graph
from vgib.utils import autodiff as ad
from vgib.utils.autodiff import DiffValue, Rng

logger = logging.getLogger(__name__)

P_FLOOR = 1e-6
SIGMA_FLOOR = 1e-4
A_FLOOR = 1e-8


def _as_value(x) -> DiffValue:
    return x if isinstance(x, DiffValue) else ad.constant(x)


def _single_graph(num_nodes: int) -> np.ndarray:
    return np.ones((1, num_nodes))


@dataclass
class NoisePrior:
    """Per-graph mean and standard deviation of node representations, plus their per-node expansion."""

    mean: DiffValue       # G×d
    std: DiffValue        # G×d
    node_mean: DiffValue  # N×d
    node_std: DiffValue   # N×d


@dataclass
class PerturbedGraph:
    p: DiffValue
    gates: DiffValue
    noise: DiffValue
    z: DiffValue
    prior: NoisePrior


@dataclass
class NoiseDraws:
    """Frozen random inputs of one loss evaluation: gate uniforms and standard-normal noise."""

    u: np.ndarray   # N×1
    xi: np.ndarray  # N×d

    @classmethod
    def sample(cls, rng: Rng, num_nodes: int, dim: int) -> "NoiseDraws":
        return cls(u=rng.uniform((num_nodes, 1)), xi=rng.normal((num_nodes, dim)))


@dataclass
class LossBreakdown:
    total: DiffValue
    cls: float
    mi: float
    aux: float
    perturbed: Optional[PerturbedGraph] = None

    @property
    def terms(self) -> Tuple[Tuple[str, float], ...]:
        return (("total", self.total.item()), ("cls", self.cls), ("mi", self.mi), ("aux", self.aux))


@dataclass(frozen=True)
class SubgraphSelection:
    nodes: Tuple[int, ...]
    subgraph: Optional[Graph]

    @property
    def empty(self) -> bool:
        return not self.nodes


def compute_noise_prior(h, membership_matrix: Optional[np.ndarray] = None) -> NoisePrior:
    """Population mean and std per graph; std floored at 1e-4, and 1 for single-node graphs."""
    h = _as_value(h)
    m = _single_graph(h.shape[0]) if membership_matrix is None else membership_matrix
    counts = m.sum(axis=1, keepdims=True)
    if np.any(counts < 1):
        raise ShapeError("compute_noise_prior: every graph needs at least one node")

    mean = ad.matmul(m, h) / counts
    node_mean = ad.matmul(m.T, mean)
    variance = ad.matmul(m, ad.square(h - node_mean)) / counts

    singleton = np.broadcast_to(counts == 1, variance.shape)
    keep = ((variance.value >= SIGMA_FLOOR ** 2) & ~singleton).astype(np.float64)
    fill = np.where(singleton, 1.0, SIGMA_FLOOR)
    safe_variance = variance * keep + (1.0 - keep)
    std = ad.exp(0.5 * ad.log(safe_variance)) * keep + (1.0 - keep) * fill
    return NoisePrior(mean=mean, std=std, node_mean=node_mean, node_std=ad.matmul(m.T, std))


def sample_relaxed_gate(p, temperature: float, rng: Optional[Rng] = None, u=None) -> DiffValue:
    """λ̂ = sigmoid((logit p + logit u) / t), with p clamped to [1e-6, 1 - 1e-6]."""
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature!r}")
    p = ad.clamp(_as_value(p), P_FLOOR, 1.0 - P_FLOOR)
    if u is None:
        if rng is None:
            raise ConfigError("sample_relaxed_gate needs either an Rng or frozen uniforms")
        u = rng.uniform(p.shape)
    u = np.asarray(u, dtype=np.float64)
    if u.shape != p.shape:
        raise ShapeError(f"sample_relaxed_gate: uniforms of shape {u.shape} for probabilities of shape {p.shape}")
    logit_u = np.log(u) - np.log1p(-u)
    logit_p = ad.log(p) - ad.log(1.0 - p)
    return ad.sigmoid((logit_p + logit_u) / temperature)


def mix_representations(h, gates, noise) -> DiffValue:
    """Z_i = λ̂_i h_i + (1 - λ̂_i) ε_i."""
    gates = _as_value(gates)
    return gates * h + (1.0 - gates) * noise


def inject_noise(h, gates, prior: NoisePrior, rng: Optional[Rng] = None, xi=None, p=None) -> PerturbedGraph:
    """Replace each node representation by prior noise in proportion 1 - λ̂."""
    h = _as_value(h)
    if xi is None:
        if rng is None:
            raise ConfigError("inject_noise needs either an Rng or frozen standard-normal draws")
        xi = rng.normal(h.shape)
    xi = np.asarray(xi, dtype=np.float64)
    if xi.shape != h.shape:
        raise ShapeError(f"inject_noise: draws of shape {xi.shape} for representations of shape {h.shape}")
    noise = prior.node_mean + prior.node_std * xi
    gates = _as_value(gates)
    return PerturbedGraph(
        p=_as_value(gates if p is None else p),
        gates=gates,
        noise=noise,
        z=mix_representations(h, gates, noise),
        prior=prior,
    )


def compression_terms(gates, h, prior: NoisePrior, membership_matrix: Optional[np.ndarray] = None) -> DiffValue:
    """Per-graph compression bound as a G×1 column."""
    gates, h = _as_value(gates), _as_value(h)
    m = _single_graph(h.shape[0]) if membership_matrix is None else membership_matrix
    counts = m.sum(axis=1, keepdims=True)

    a = ad.clamp_min(ad.matmul(m, ad.square(1.0 - gates)), A_FLOOR)
    b = ad.matmul(m, gates * (h - prior.node_mean) / prior.node_std)
    b_squared = ad.mean(ad.square(b), axis=1, keepdims=True)
    return -0.5 * ad.log(a) + a / (2.0 * counts) + b_squared / (2.0 * counts)


def compression_loss(gates, h, prior: NoisePrior, membership_matrix: Optional[np.ndarray] = None) -> DiffValue:
    return ad.mean(compression_terms(gates, h, prior, membership_matrix))


def classification_loss(outputs, labels, task: str) -> DiffValue:
    """Mean cross-entropy over logits (categorical) or mean squared error (regression)."""
    outputs = _as_value(outputs)
    labels = np.asarray(labels)
    n = outputs.shape[0]
    if labels.shape != (n,):
        raise ShapeError(f"classification_loss: {labels.shape[0] if labels.ndim else 0} labels for {n} outputs")

    if task == "categorical":
        classes = outputs.shape[1]
        index = labels.astype(np.int64)
        bad = [lab for lab, i in zip(labels.tolist(), index.tolist()) if lab != i or not 0 <= i < classes]
        if bad:
            raise DatasetError(f"label {bad[0]!r} out of range for {classes} classes")
        onehot = np.zeros((n, classes))
        onehot[np.arange(n), index] = 1.0
        return -ad.mean(ad.sum(ad.log_softmax(outputs, axis=1) * onehot, axis=1))
    if task == "regression":
        return ad.mean(ad.square(outputs - labels.astype(np.float64)[:, None]))
    raise ConfigError(f"unknown task {task!r}")


def vgib_loss(
    model,
    batch: Batch,
    beta: float,
    temperature: float,
    rng: Optional[Rng] = None,
    aux_weight: float = 1.0,
    draws: Optional[NoiseDraws] = None,
    targets: Optional[np.ndarray] = None,
) -> LossBreakdown:
    """cls(noised) + β·mi + aux_weight·cls(clean) for one batch.

    ``draws`` freezes the gate uniforms and noise; otherwise they are sampled
    from ``rng`` (uniforms first). ``targets`` replaces the batch labels.
    """
    h = model.representations(batch)
    p = model.gate_probabilities(batch, h)
    if draws is None:
        if rng is None:
            raise ConfigError("vgib_loss needs either an Rng or frozen draws")
        draws = NoiseDraws.sample(rng, batch.num_nodes, h.shape[1])

    membership = batch.membership_matrix
    prior = compute_noise_prior(h, membership)
    gates = sample_relaxed_gate(p, temperature, u=draws.u)
    perturbed = inject_noise(h, gates, prior, xi=draws.xi, p=p)

    labels = batch.labels if targets is None else np.asarray(targets)
    task = model.config.task
    cls_term = classification_loss(model.logits(readout(perturbed.z, membership, model.readout_kind)), labels, task)
    mi_term = compression_loss(gates, h, prior, membership)
    total = cls_term + beta * mi_term

    aux_value = 0.0
    if model.has_auxiliary:
        aux_term = classification_loss(model.logits(readout(h, membership, model.readout_kind)), labels, task)
        aux_value = aux_term.item()
        if aux_weight:
            total = total + aux_weight * aux_term

    return LossBreakdown(total=total, cls=cls_term.item(), mi=mi_term.item(), aux=aux_value, perturbed=perturbed)


def plain_loss(model, batch: Batch, targets: Optional[np.ndarray] = None) -> LossBreakdown:
    """Classification loss of a model trained without gates."""
    labels = batch.labels if targets is None else np.asarray(targets)
    cls_term = classification_loss(model.clean_logits(batch), labels, model.config.task)
    return LossBreakdown(total=cls_term, cls=cls_term.item(), mi=0.0, aux=0.0)


def select_subgraph(graph: Graph, p: Sequence[float], threshold: float = 0.5) -> SubgraphSelection:
    """Nodes with p >= threshold, reduced to their largest connected component.

    Ties between equally large components go to the one holding the highest
    p, then to the one with the smallest node index.
    """
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    if p.shape[0] != graph.num_nodes:
        raise ShapeError(f"select_subgraph: {p.shape[0]} scores for a {graph.num_nodes}-node graph")

    passing = [i for i in range(graph.num_nodes) if p[i] >= threshold]
    if not passing:
        return SubgraphSelection(nodes=(), subgraph=None)

    components = [sorted(c) for c in nx.connected_components(graph.to_networkx().subgraph(passing))]
    best = min(components, key=lambda c: (-len(c), -float(p[c].max()), c[0]))
    return SubgraphSelection(nodes=tuple(best), subgraph=graph.induced(best))
