"""
Per-topic Gaussian process regression from Gaussian messages.

Each document sends the GP of topic k a message N(mu_dk; h_k(phi_d), sigma2_dk + tau^2).
Because the messages are Gaussian already, the posterior is a single
heteroscedastic-noise solve, factorised through B = I + S^1/2 H S^1/2.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg

from ktm.core.config import settings
from ktm.core.errors import InvalidArgumentError, DimensionError, NumericalError, KtmError
from ktm.models.schemas import Hyperparameters, KernelSpec, OptimizationReport
from ktm.services.kernels import FeatureSpace, gram, pairwise, prior_variance, derivative_traces


logger = logging.getLogger(__name__)

MAX_LINE_SEARCH_REJECTIONS = 30


@dataclass(frozen=True)
class GaussianMessages:
    """Messages for one topic: bridge means and variances plus the shared noise tau"""
    means: np.ndarray
    bridge_variances: np.ndarray
    tau: float = 0.0

    def __post_init__(self):
        means = np.asarray(self.means, dtype=float).ravel()
        bridge_variances = np.asarray(self.bridge_variances, dtype=float).ravel()
        if means.shape != bridge_variances.shape:
            raise DimensionError(f"{means.size} message means but {bridge_variances.size} variances")
        if not np.all(np.isfinite(means)):
            raise InvalidArgumentError("message means must be finite")
        if self.tau < 0 or not math.isfinite(self.tau):
            raise InvalidArgumentError(f"tau must be finite and non-negative, got {self.tau}")
        variances = bridge_variances + self.tau ** 2
        if not np.all(np.isfinite(variances)) or np.any(variances <= 0):
            raise InvalidArgumentError("message variances must be positive and finite")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "bridge_variances", bridge_variances)

    @property
    def size(self) -> int:
        return self.means.size

    @property
    def variances(self) -> np.ndarray:
        return self.bridge_variances + self.tau ** 2

    @property
    def precisions(self) -> np.ndarray:
        return 1.0 / self.variances

    @property
    def precision_adjusted_means(self) -> np.ndarray:
        return self.precisions * self.means

    def with_tau(self, tau: float) -> "GaussianMessages":
        return replace(self, tau=float(tau))


@dataclass(frozen=True)
class GpTopicModel:
    kernel: KernelSpec
    features: FeatureSpace
    chol: np.ndarray
    sqrt_precisions: np.ndarray
    solve_vector: np.ndarray
    jitter: float

    @property
    def size(self) -> int:
        return self.solve_vector.size

    @property
    def log_det_b(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.chol))))


def _jitter_ladder(start: float, maximum: float) -> Iterator[float]:
    yield 0.0
    jitter = start
    while jitter <= maximum * (1.0 + 1e-9):
        yield jitter
        jitter *= 10.0


def fit(kernel: KernelSpec, features: FeatureSpace, msgs: GaussianMessages, subset=None,
        jitter_start: Optional[float] = None, jitter_max: Optional[float] = None) -> GpTopicModel:
    """
    Condition the GP prior of one topic on its document messages
    """
    if subset is not None:
        features = features.subset(subset)
    if features.n_points != msgs.size:
        raise DimensionError(f"{features.n_points} training inputs but {msgs.size} messages")
    jitter_start = settings.jitter_start if jitter_start is None else jitter_start
    jitter_max = settings.jitter_max if jitter_max is None else jitter_max

    H = gram(kernel, features, with_derivatives=False).matrix
    s = np.sqrt(msgs.precisions)
    scale = float(np.mean(np.diag(H)))
    if not scale > 0:
        scale = 1.0
    identity = np.eye(msgs.size)

    chol = None
    used = 0.0
    for jitter in _jitter_ladder(jitter_start, jitter_max):
        H_j = H + jitter * scale * identity if jitter else H
        B = identity + s[:, None] * H_j * s[None, :]
        try:
            chol = linalg.cholesky(B, lower=True)
            used = jitter
            break
        except linalg.LinAlgError:
            logger.warning(f"Cholesky of B failed with jitter {jitter:g}; escalating")
    if chol is None:
        smallest = float(np.linalg.eigvalsh(H).min())
        raise NumericalError(
            f"kernel matrix factorization failed up to jitter {jitter_max:g}; "
            f"smallest eigenvalue estimate {smallest:.3e}"
        )
    if used:
        logger.warning(f"Added jitter {used:g} x mean diagonal to the kernel matrix")
    pivot = float(np.diag(chol).min())
    if pivot < 1.0 - 1e-9:
        logger.warning(f"Smallest Cholesky pivot of B is {pivot:.12f}, below 1")

    solve_vector = s * linalg.cho_solve((chol, True), s * msgs.means)
    return GpTopicModel(
        kernel=kernel,
        features=features,
        chol=chol,
        sqrt_precisions=s,
        solve_vector=solve_vector,
        jitter=used,
    )


def predict_many(model: GpTopicModel, queries: FeatureSpace) -> Tuple[np.ndarray, np.ndarray]:
    """
    Posterior mean and marginal variance of h at every query row
    """
    cross = pairwise(model.kernel, model.features, queries)
    means = cross.T @ model.solve_vector
    v = linalg.solve_triangular(model.chol, model.sqrt_precisions[:, None] * cross, lower=True)
    prior = prior_variance(model.kernel, queries)
    variances = prior - np.sum(v ** 2, axis=0)
    variances = np.clip(variances, np.finfo(float).eps * prior, prior)
    return means, variances


def predict(model: GpTopicModel, query: FeatureSpace) -> Tuple[float, float]:
    if query.n_points != 1:
        raise DimensionError(f"predict takes a single query point, got {query.n_points}")
    means, variances = predict_many(model, query)
    return float(means[0]), float(variances[0])


def log_evidence(model: GpTopicModel, msgs: GaussianMessages) -> float:
    """
    1/2 [log|S| - log|B| - mu^T S^1/2 B^-1 S^1/2 mu]
    """
    if msgs.size != model.size:
        raise DimensionError(f"{msgs.size} messages for a model fitted on {model.size}")
    z = linalg.solve_triangular(model.chol, model.sqrt_precisions * msgs.means, lower=True)
    return 0.5 * (float(np.sum(np.log(msgs.precisions))) - model.log_det_b - float(z @ z))


def evidence_gradient(model: GpTopicModel, msgs: GaussianMessages, hypers: Hyperparameters) -> np.ndarray:
    """
    Gradient of log_evidence with respect to hypers.xi (log kernel
    parameters followed by log tau)
    """
    s = model.sqrt_precisions
    w = s * linalg.cho_solve((model.chol, True), s * msgs.means)
    # (H + Sigma)^-1 = S^1/2 B^-1 S^1/2
    inverse = s[:, None] * linalg.cho_solve((model.chol, True), np.diag(s))
    weight = np.outer(w, w) - inverse
    kernel_part = 0.5 * derivative_traces(model.kernel, model.features, weight)
    tau_part = hypers.tau ** 2 * (float(w @ w) - float(np.trace(inverse)))
    return np.append(kernel_part, tau_part)


def fit_topics(hypers: Hyperparameters, features: FeatureSpace, messages: Sequence[GaussianMessages],
               subset=None, workers: int = 1, jitter_start: Optional[float] = None,
               jitter_max: Optional[float] = None) -> List[GpTopicModel]:
    """
    Independent fits for all topics, in topic order
    """
    tau_messages = [m.with_tau(hypers.tau) for m in messages]

    def _fit(msgs):
        return fit(hypers.kernel, features, msgs, subset=subset, jitter_start=jitter_start, jitter_max=jitter_max)

    if workers <= 1 or len(tau_messages) <= 1:
        return [_fit(m) for m in tau_messages]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_fit, tau_messages))


def total_log_evidence(hypers: Hyperparameters, features: FeatureSpace, messages: Sequence[GaussianMessages],
                       subset=None, workers: int = 1, **jitter) -> Tuple[float, List[GpTopicModel]]:
    models = fit_topics(hypers, features, messages, subset=subset, workers=workers, **jitter)
    value = sum(log_evidence(model, m.with_tau(hypers.tau)) for model, m in zip(models, messages))
    return float(value), models


def optimize_hypers(hypers: Hyperparameters, features: FeatureSpace, messages: Sequence[GaussianMessages],
                    steps: int, subset=None, workers: int = 1,
                    **jitter) -> Tuple[Hyperparameters, OptimizationReport]:
    """
    Gradient ascent on the summed log evidence of all topics with a
    backtracking line search; only improving steps are accepted.
    """
    if steps < 1:
        raise InvalidArgumentError(f"steps must be at least 1, got {steps}")
    report = OptimizationReport(steps_requested=steps)

    def evaluate(candidate: Hyperparameters):
        try:
            value, models = total_log_evidence(candidate, features, messages, subset=subset,
                                               workers=workers, **jitter)
        except (KtmError, ValueError, FloatingPointError) as e:
            logger.debug(f"Hyperparameter candidate rejected: {e}")
            return -np.inf, None
        return (value, models) if np.isfinite(value) else (-np.inf, None)

    current = hypers
    value, models = evaluate(current)
    if models is None:
        report.aborted = True
        report.message = "log evidence is not finite at the starting hyperparameters"
        return hypers, report
    report.log_evidence_trace.append(value)
    step = 0.5

    for _ in range(steps):
        report.steps_taken += 1
        gradient = sum(
            evidence_gradient(model, m.with_tau(current.tau), current)
            for model, m in zip(models, messages)
        )
        norm = float(np.linalg.norm(gradient))
        if not np.isfinite(norm):
            report.aborted = True
            report.message = "gradient is not finite"
            break
        if norm < 1e-10:
            report.converged = True
            report.message = "gradient below 1e-10"
            break
        direction = gradient / norm
        rejections = 0
        while True:
            xi = current.xi + step * direction
            trial_value, trial_models = -np.inf, None
            if np.all(np.isfinite(np.exp(xi))) and np.all(np.exp(xi) > 0):
                trial = current.with_xi(xi)
                trial_value, trial_models = evaluate(trial)
            if trial_models is not None and trial_value >= value + 1e-4 * step * norm:
                current, value, models = trial, trial_value, trial_models
                report.accepted += 1
                report.log_evidence_trace.append(value)
                step = min(2.0 * step, 2.0)
                break
            rejections += 1
            report.rejected += 1
            step *= 0.5
            if rejections >= MAX_LINE_SEARCH_REJECTIONS:
                report.aborted = True
                report.message = f"line search rejected {rejections} consecutive steps"
                break
        if report.aborted:
            break

    logger.info(
        f"Hyperparameter optimisation: {report.accepted} accepted, {report.rejected} rejected, "
        f"log Z {report.log_evidence_trace[0]:.4f} -> {report.log_evidence_trace[-1]:.4f}"
    )
    return current, report
