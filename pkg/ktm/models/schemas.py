from pydantic import BaseModel, Field, field_validator, model_validator
from typing import List, Optional, Dict, Any
from enum import Enum
import math

import numpy as np

from ktm.core.config import settings


class KernelVariant(str, Enum):
    RATIONAL_QUADRATIC_TIME_AUTHOR = "rational_quadratic_time_author"
    GRAPH_EMBEDDING = "graph_embedding"
    CONSTANT = "constant"


class FeatureKind(str, Enum):
    EUCLIDEAN = "euclidean"
    GRAPH = "graph"


class KernelSpec(BaseModel):
    """
    Kernel variant plus its positive parameters.

    Rational quadratic uses amplitude, length_scale, mixture_shape and
    author_mismatch_distance; the graph kernel uses amplitude (s) and one
    scale per embedding coordinate (diagonal of S); constant uses amplitude.
    """
    variant: KernelVariant = KernelVariant.RATIONAL_QUADRATIC_TIME_AUTHOR
    amplitude: float = Field(default=1.0, gt=0)
    length_scale: float = Field(default=5.0, gt=0)
    mixture_shape: float = Field(default=1.0, gt=0)
    author_mismatch_distance: float = Field(default=5.0, gt=0)
    scales: Optional[List[float]] = None

    @field_validator("scales")
    @classmethod
    def _positive_scales(cls, value):
        if value is not None and any(not (s > 0 and math.isfinite(s)) for s in value):
            raise ValueError("graph scales must be positive and finite")
        return value

    def param_names(self) -> List[str]:
        if self.variant == KernelVariant.RATIONAL_QUADRATIC_TIME_AUTHOR:
            return ["amplitude", "length_scale", "mixture_shape", "author_mismatch_distance"]
        if self.variant == KernelVariant.GRAPH_EMBEDDING:
            return ["amplitude"] + [f"scale_{i}" for i in range(len(self.scales or []))]
        return ["amplitude"]

    def log_params(self) -> np.ndarray:
        if self.variant == KernelVariant.RATIONAL_QUADRATIC_TIME_AUTHOR:
            values = [self.amplitude, self.length_scale, self.mixture_shape, self.author_mismatch_distance]
        elif self.variant == KernelVariant.GRAPH_EMBEDDING:
            values = [self.amplitude] + list(self.scales or [])
        else:
            values = [self.amplitude]
        return np.log(np.asarray(values, dtype=float))

    def with_log_params(self, log_values) -> "KernelSpec":
        values = np.exp(np.asarray(log_values, dtype=float))
        if self.variant == KernelVariant.RATIONAL_QUADRATIC_TIME_AUTHOR:
            return self.model_copy(update={
                "amplitude": float(values[0]),
                "length_scale": float(values[1]),
                "mixture_shape": float(values[2]),
                "author_mismatch_distance": float(values[3]),
            })
        if self.variant == KernelVariant.GRAPH_EMBEDDING:
            return self.model_copy(update={
                "amplitude": float(values[0]),
                "scales": [float(v) for v in values[1:]],
            })
        return self.model_copy(update={"amplitude": float(values[0])})


class Hyperparameters(BaseModel):
    """Kernel parameters and the shared observation noise tau, optimised in log domain"""
    kernel: KernelSpec
    tau: float = Field(default_factory=lambda: settings.default_tau, gt=0)

    @property
    def xi(self) -> np.ndarray:
        return np.append(self.kernel.log_params(), math.log(self.tau))

    def with_xi(self, xi) -> "Hyperparameters":
        xi = np.asarray(xi, dtype=float)
        return Hyperparameters(
            kernel=self.kernel.with_log_params(xi[:-1]),
            tau=float(np.exp(xi[-1]))
        )


class TrainConfig(BaseModel):
    n_topics: int = Field(default_factory=lambda: settings.default_topics, ge=3)
    max_sweeps: int = Field(default=50, ge=0)
    hyperopt_every: int = Field(default_factory=lambda: settings.default_hyperopt_every, ge=1)
    hyperopt_steps: int = Field(default_factory=lambda: settings.default_hyperopt_steps, ge=1)
    beta: float = Field(default_factory=lambda: settings.default_beta, gt=0)
    passes_per_doc: int = Field(default=1, ge=1)
    seed: int = 0
    jitter_start: float = Field(default_factory=lambda: settings.jitter_start, gt=0)
    jitter_max: float = Field(default_factory=lambda: settings.jitter_max, gt=0)
    alpha_floor: float = Field(default_factory=lambda: settings.alpha_floor, gt=0)
    initial_alpha: float = Field(default=1.0, gt=0)
    use_gp: bool = True
    optimize_hypers: bool = True
    snapshot: bool = False
    threads: Optional[int] = Field(default=None, ge=1)

    @model_validator(mode="after")
    def _jitter_order(self):
        if self.jitter_start > self.jitter_max:
            raise ValueError("jitter_start must not exceed jitter_max")
        return self


class OptimizationReport(BaseModel):
    steps_requested: int
    steps_taken: int = 0
    accepted: int = 0
    rejected: int = 0
    aborted: bool = False
    converged: bool = False
    log_evidence_trace: List[float] = []
    message: Optional[str] = None


class ComparisonRow(BaseModel):
    n_obs: int = Field(ge=0)
    bridge_err: float
    bridge_sd: float
    mcmc_err: float
    mcmc_sd: float


class ModelManifest(BaseModel):
    format_version: int
    package_version: str
    config: TrainConfig
    hyperparameters: Hyperparameters
    feature_kind: FeatureKind
    n_docs: int
    vocab_size: int
    sweep_index: int
    heldout_perplexity: Optional[float] = None
    files: Dict[str, str] = Field(description="file name -> sha256 of its bytes")
    extra: Dict[str, Any] = {}
