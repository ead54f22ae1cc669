"""Validated records: run configuration and everything read from or written to disk."""

import math
from datetime import datetime
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, Field, StrictFloat, StrictInt, field_validator, model_validator

# ==================== Training Configuration ====================


class TrainConfig(BaseModel):
    mode: Literal["interpret", "explain", "classify"] = "interpret"
    backbone: Literal["gcn", "gin"] = "gcn"
    layers: int = Field(default=2, ge=1, le=8)
    hidden_dim: int = Field(default=16, ge=1, le=1024)
    readout: Literal["mean", "sum"] = "sum"
    beta: float = Field(default=0.1, ge=0.0)
    temperature: float = Field(default=1.0, gt=0.0)
    learning_rate: float = Field(default=1e-3, gt=0.0)
    epochs: int = Field(default=100, ge=0)
    batch_size: int = Field(default=32, ge=1)
    seed: int = Field(default=0, ge=0)
    aux_weight: float = Field(default=1.0, ge=0.0)
    task: Literal["categorical", "regression"] = "categorical"
    gates: bool = True
    split: Tuple[float, float, float] = (0.85, 0.05, 0.10)
    record_wall_time: bool = False
    # Resolved from the dataset when training starts.
    feature_dim: Optional[int] = Field(default=None, ge=1)
    num_outputs: Optional[int] = Field(default=None, ge=1)

    model_config = {
        "extra": "forbid",
    }

    @field_validator("split")
    @classmethod
    def validate_split(cls, v: Tuple[float, float, float]) -> Tuple[float, float, float]:
        if any(f < 0.0 for f in v):
            raise ValueError("split fractions must be non-negative")
        if abs(math.fsum(v) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {math.fsum(v)!r}")
        return v

    @model_validator(mode="after")
    def validate_gates(self) -> "TrainConfig":
        if not self.gates and self.mode != "classify":
            raise ValueError("gates can only be disabled in classify mode")
        return self


# ==================== Dataset Records ====================


class GraphRecord(BaseModel):
    """One line of a JSON-lines dataset file."""

    num_nodes: int = Field(..., ge=1)
    edges: List[Tuple[StrictInt, StrictInt]] = Field(default_factory=list)
    features: Optional[List[List[float]]] = None
    label: Union[StrictInt, StrictFloat]
    motif_nodes: Optional[List[StrictInt]] = None

    model_config = {
        "extra": "forbid",
    }

    @model_validator(mode="after")
    def validate_indices(self) -> "GraphRecord":
        n = self.num_nodes
        for u, v in self.edges:
            if not (0 <= u < n and 0 <= v < n):
                raise ValueError(f"edge [{u}, {v}] out of range for {n} nodes")
            if u == v:
                raise ValueError(f"self-loop edge [{u}, {v}] is not allowed")
        if self.features is not None:
            if len(self.features) != n:
                raise ValueError(f"features has {len(self.features)} rows, expected {n}")
            widths = {len(row) for row in self.features}
            if len(widths) > 1:
                raise ValueError(f"feature rows have mixed widths {sorted(widths)}")
            if widths == {0}:
                raise ValueError("feature rows are empty")
        if self.motif_nodes is not None:
            for node in self.motif_nodes:
                if not 0 <= node < n:
                    raise ValueError(f"motif node {node} out of range for {n} nodes")
            if len(set(self.motif_nodes)) != len(self.motif_nodes):
                raise ValueError("motif_nodes contains duplicates")
        return self


# ==================== Checkpoints ====================


class ParamRecord(BaseModel):
    name: str = Field(..., min_length=1)
    shape: List[int]
    data: List[float]

    model_config = {
        "extra": "forbid",
    }

    @model_validator(mode="after")
    def validate_size(self) -> "ParamRecord":
        if any(s < 0 for s in self.shape):
            raise ValueError(f"tensor {self.name} has a negative dimension in {self.shape}")
        if math.prod(self.shape) != len(self.data):
            raise ValueError(
                f"tensor {self.name}: shape {self.shape} needs {math.prod(self.shape)} values, got {len(self.data)}"
            )
        return self


class CheckpointDocument(BaseModel):
    config: TrainConfig
    epoch: int = Field(..., ge=0)
    val_loss: float
    params: List[ParamRecord]
    rng_state: List[int]
    # Present only on post-hoc explainer checkpoints.
    frozen_config: Optional[TrainConfig] = None

    model_config = {
        "extra": "forbid",
    }

    @field_validator("params")
    @classmethod
    def validate_unique_names(cls, v: List[ParamRecord]) -> List[ParamRecord]:
        names = [p.name for p in v]
        if len(set(names)) != len(names):
            raise ValueError("params contains duplicate tensor names")
        return v


# ==================== Explanation Outputs ====================


class ScoreRecord(BaseModel):
    """One line of the node-score file written by ``explain``."""

    graph_index: int = Field(..., ge=0)
    p: List[float]
    selected_nodes: List[int]
    empty: bool

    model_config = {
        "extra": "forbid",
    }

    @field_validator("p")
    @classmethod
    def validate_probabilities(cls, v: List[float]) -> List[float]:
        for value in v:
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"probability {value!r} outside [0, 1]")
        return v


class FidelityRecord(BaseModel):
    label: int
    full_prediction: int
    subgraph_prediction: int
    complement_prediction: int


class FidelityReport(BaseModel):
    k: float = Field(..., gt=0.0, le=1.0)
    fidelity_plus: float = Field(..., ge=-1.0, le=1.0)
    fidelity_minus: float = Field(..., ge=-1.0, le=1.0)
    n_samples: int = Field(..., gt=0)
    empty_subgraphs: int = Field(default=0, ge=0)
    records: List[FidelityRecord] = Field(default_factory=list)


class MotifRecovery(BaseModel):
    auc: float = Field(..., ge=0.0, le=1.0)
    f1: float = Field(..., ge=0.0, le=1.0)
    n_graphs: int
    n_nodes: int


class DivergenceSummary(BaseModel):
    property_name: str
    mean: float
    std: float
    n: int
    empty_selections: int


# ==================== Run Manifests ====================


class RunManifest(BaseModel):
    subcommand: str
    argv: List[str]
    config: Dict[str, Any] = Field(default_factory=dict)
    inputs: Dict[str, str] = Field(default_factory=dict)
    outputs: Dict[str, str] = Field(default_factory=dict)
    seed: Optional[int] = None
    started_at: datetime
    finished_at: Optional[datetime] = None
    artifact_hashes: Dict[str, str] = Field(default_factory=dict)
    summary: Dict[str, Any] = Field(default_factory=dict)
    exit_code: Optional[int] = None
