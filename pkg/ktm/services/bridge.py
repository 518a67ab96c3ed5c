"""
Laplace bridge between Dirichlet beliefs and diagonal Gaussians in the softmax basis.

All maps use the limit of an infinitely sharp sum constraint on the softmax
coordinates, so no constraint strength appears anywhere at runtime.
"""

import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy.special import logsumexp, softmax as _softmax

from ktm.core.config import settings
from ktm.core.errors import InvalidArgumentError, DimensionError


logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DirichletBelief:
    alpha: np.ndarray
    clamped: int = 0

    def __post_init__(self):
        alpha = np.asarray(self.alpha, dtype=float)
        if alpha.ndim != 1 or alpha.size < 2:
            raise DimensionError(f"Dirichlet needs a vector of K >= 2 entries, got shape {alpha.shape}")
        if not np.all(np.isfinite(alpha)) or np.any(alpha <= 0):
            raise InvalidArgumentError("Dirichlet parameters must be strictly positive and finite")
        object.__setattr__(self, "alpha", alpha)

    @property
    def K(self) -> int:
        return self.alpha.size

    @property
    def alpha_hat(self) -> float:
        return float(self.alpha.sum())

    def mean(self) -> np.ndarray:
        return self.alpha / self.alpha.sum()


@dataclass(frozen=True)
class GaussianBelief:
    mean: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        variance = np.asarray(self.variance, dtype=float)
        if mean.shape != variance.shape or mean.ndim != 1:
            raise DimensionError(f"mean {mean.shape} and variance {variance.shape} must be matching vectors")
        if not np.all(np.isfinite(mean)):
            raise InvalidArgumentError("Gaussian mean must be finite")
        if not np.all(np.isfinite(variance)) or np.any(variance <= 0):
            raise InvalidArgumentError("Gaussian variances must be strictly positive and finite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "variance", variance)

    @property
    def K(self) -> int:
        return self.mean.size


@dataclass(frozen=True)
class FullBridgeCovariance:
    matrix: np.ndarray

    @property
    def diagonal(self) -> np.ndarray:
        return np.diag(self.matrix).copy()


def softmax(y) -> np.ndarray:
    """
    Map softmax-basis coordinates to the probability simplex
    """
    y = np.asarray(y, dtype=float)
    if not np.all(np.isfinite(y)):
        raise InvalidArgumentError("softmax input must be finite")
    # scipy subtracts the maximum before exponentiating
    return _softmax(y, axis=-1)


def _require_bridge_dimension(K: int):
    if K <= 2:
        raise DimensionError(
            f"the softmax-basis bridge is only valid for K > 2 (got K={K}); "
            "use beta_to_gaussian_2d for the two-category case"
        )


def _diagonal_variance(inv_alpha: np.ndarray) -> np.ndarray:
    K = inv_alpha.size
    return inv_alpha * (1.0 - 2.0 / K) + inv_alpha.sum() / K ** 2


def dirichlet_to_gaussian(d: DirichletBelief) -> GaussianBelief:
    """
    Laplace approximation of a Dirichlet in the softmax basis.

    The mean is the mode (log alpha centred on its average); the variances are
    the diagonal of the inverse Hessian at that mode.
    """
    _require_bridge_dimension(d.K)
    log_alpha = np.log(d.alpha)
    mean = log_alpha - log_alpha.mean()
    variance = _diagonal_variance(1.0 / d.alpha)
    return GaussianBelief(mean=mean, variance=variance)


def gaussian_to_dirichlet(g: GaussianBelief, alpha_floor: float = None) -> DirichletBelief:
    """
    Inverse of dirichlet_to_gaussian.

    Entries that come out non-positive or non-finite are raised to the floor
    and counted in the returned belief's ``clamped`` field.
    """
    _require_bridge_dimension(g.K)
    floor = settings.alpha_floor if alpha_floor is None else alpha_floor
    K = g.K
    # exp(mu_k) * sum_l exp(-mu_l), evaluated in log space
    with np.errstate(over="ignore", invalid="ignore"):
        cross = np.exp(g.mean + logsumexp(-g.mean))
        alpha = (1.0 - 2.0 / K + cross / K ** 2) / g.variance
    bad = ~np.isfinite(alpha) | (alpha < floor)
    clamped = int(bad.sum())
    if clamped:
        alpha = np.where(bad, floor, alpha)
        logger.warning(f"Clamped {clamped} of {K} Dirichlet parameters to floor {floor:g}")
    return DirichletBelief(alpha=alpha, clamped=clamped)


def full_inverse_hessian(d: DirichletBelief) -> FullBridgeCovariance:
    """
    Full inverse Hessian of the softmax-basis Dirichlet at its mode
    """
    _require_bridge_dimension(d.K)
    K = d.K
    inv_alpha = 1.0 / d.alpha
    matrix = -(inv_alpha[:, None] + inv_alpha[None, :] - inv_alpha.sum() / K) / K
    # same arithmetic as dirichlet_to_gaussian, so the diagonals agree exactly
    np.fill_diagonal(matrix, _diagonal_variance(inv_alpha))
    return FullBridgeCovariance(matrix=matrix)


def beta_to_gaussian_2d(a: float, b: float) -> Tuple[float, float]:
    """
    Two-category case: Laplace fit of a Beta(a, b) on the logit line
    """
    if not (a > 0 and b > 0) or not (np.isfinite(a) and np.isfinite(b)):
        raise InvalidArgumentError(f"Beta parameters must be positive, got ({a}, {b})")
    return float(np.log(a / b)), float(1.0 / a + 1.0 / b)


def dirichlet_rows_to_gaussian(alpha: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Row-wise dirichlet_to_gaussian for a D x K parameter matrix
    """
    alpha = np.asarray(alpha, dtype=float)
    K = alpha.shape[1]
    _require_bridge_dimension(K)
    if not np.all(np.isfinite(alpha)) or np.any(alpha <= 0):
        raise InvalidArgumentError("Dirichlet parameters must be strictly positive and finite")
    log_alpha = np.log(alpha)
    means = log_alpha - log_alpha.mean(axis=1, keepdims=True)
    inv_alpha = 1.0 / alpha
    variances = inv_alpha * (1.0 - 2.0 / K) + inv_alpha.sum(axis=1, keepdims=True) / K ** 2
    return means, variances


def gaussian_rows_to_dirichlet(means: np.ndarray, variances: np.ndarray,
                               alpha_floor: float = None) -> Tuple[np.ndarray, int]:
    """
    Row-wise gaussian_to_dirichlet; returns the D x K parameters and the clamp count
    """
    floor = settings.alpha_floor if alpha_floor is None else alpha_floor
    means = np.asarray(means, dtype=float)
    variances = np.asarray(variances, dtype=float)
    K = means.shape[1]
    _require_bridge_dimension(K)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        cross = np.exp(means + logsumexp(-means, axis=1, keepdims=True))
        alpha = (1.0 - 2.0 / K + cross / K ** 2) / variances
    bad = ~np.isfinite(alpha) | (alpha < floor)
    clamped = int(bad.sum())
    if clamped:
        alpha = np.where(bad, floor, alpha)
        logger.warning(f"Clamped {clamped} Dirichlet parameters to floor {floor:g}")
    return alpha, clamped
