"""
Elliptical slice sampling reference for the softmax-Gaussian-multinomial
posterior, and the experiment comparing it against the Laplace bridge.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import linalg
from scipy.special import logsumexp
from scipy.stats import invwishart

from ktm.core.config import settings
from ktm.core.errors import InvalidArgumentError, DimensionError, InvalidStateError
from ktm.models.schemas import ComparisonRow
from ktm.services.bridge import (
    DirichletBelief,
    GaussianBelief,
    dirichlet_to_gaussian,
    gaussian_to_dirichlet,
    softmax,
)


logger = logging.getLogger(__name__)

COMPARISON_COLUMNS = list(ComparisonRow.model_fields)


@dataclass(frozen=True)
class BridgeExperiment:
    """
    One synthetic softmax-multinomial problem.

    ``prior_mean`` / ``prior_cov`` are the inference prior shared by both
    methods; the ground truth was drawn from ``generating_mean`` /
    ``generating_cov`` and centred. ``observations`` holds category draws in
    the order they are revealed.
    """
    K: int
    prior_mean: np.ndarray
    prior_cov: np.ndarray
    ground_truth: np.ndarray
    observations: np.ndarray
    generating_mean: Optional[np.ndarray] = None
    generating_cov: Optional[np.ndarray] = None
    dof: Optional[float] = None

    def __post_init__(self):
        K = self.K
        prior_mean = np.asarray(self.prior_mean, dtype=float)
        prior_cov = np.asarray(self.prior_cov, dtype=float)
        truth = np.asarray(self.ground_truth, dtype=float)
        observations = np.asarray(self.observations, dtype=int)
        if prior_mean.shape != (K,) or truth.shape != (K,) or prior_cov.shape != (K, K):
            raise DimensionError(f"experiment arrays do not match K={K}")
        if not np.allclose(prior_cov, prior_cov.T, atol=1e-12):
            raise InvalidArgumentError("prior covariance must be symmetric")
        if np.linalg.eigvalsh(prior_cov).min() < -1e-10:
            raise InvalidArgumentError("prior covariance must be positive semi-definite")
        if observations.size and (observations.min() < 0 or observations.max() >= K):
            raise InvalidArgumentError(f"observations must lie in [0, {K})")
        object.__setattr__(self, "prior_mean", prior_mean)
        object.__setattr__(self, "prior_cov", prior_cov)
        object.__setattr__(self, "ground_truth", truth)
        object.__setattr__(self, "observations", observations)

    def counts(self, n_obs: int) -> np.ndarray:
        """Category counts of the first ``n_obs`` observations"""
        if n_obs > self.observations.size:
            raise InvalidArgumentError(f"only {self.observations.size} observations available, asked for {n_obs}")
        return np.bincount(self.observations[:n_obs], minlength=self.K).astype(float)


def _centering(K: int) -> np.ndarray:
    return np.eye(K) - np.full((K, K), 1.0 / K)


def _ess_transition(log_lik: Callable[[np.ndarray], float], prior_mean: np.ndarray, prior_cov_factor: np.ndarray,
                    current: np.ndarray, cur_log_lik: float, rng: np.random.Generator) -> Tuple[np.ndarray, float]:
    nu = prior_cov_factor @ rng.standard_normal(prior_cov_factor.shape[1])
    offset = current - prior_mean
    threshold = cur_log_lik + math.log(rng.uniform())

    phi = rng.uniform(0.0, 2.0 * math.pi)
    phi_min, phi_max = phi - 2.0 * math.pi, phi
    while True:
        proposal = offset * math.cos(phi) + nu * math.sin(phi) + prior_mean
        proposal_log_lik = log_lik(proposal)
        if proposal_log_lik >= threshold:
            return proposal, proposal_log_lik
        # shrink the bracket towards the current point
        if phi > 0:
            phi_max = phi
        elif phi < 0:
            phi_min = phi
        else:
            raise InvalidStateError("slice shrank to the current point and still rejected")
        phi = rng.uniform(phi_min, phi_max)


def ess_sample(log_lik: Callable[[np.ndarray], float], prior_mean, prior_cov_factor, current,
               rng: np.random.Generator) -> np.ndarray:
    """
    One elliptical slice sampling transition leaving
    N(x; prior_mean, F F^T) * exp(log_lik(x)) invariant, where F is
    ``prior_cov_factor``.
    """
    prior_mean = np.asarray(prior_mean, dtype=float)
    factor = np.asarray(prior_cov_factor, dtype=float)
    current = np.asarray(current, dtype=float)
    if factor.ndim != 2 or factor.shape[0] != current.size or prior_mean.shape != current.shape:
        raise DimensionError(f"prior factor {factor.shape} does not match a state of size {current.size}")
    cur_log_lik = log_lik(current)
    if not np.isfinite(cur_log_lik):
        raise InvalidStateError("log likelihood is not finite at the current state")
    return _ess_transition(log_lik, prior_mean, factor, current, cur_log_lik, rng)[0]


def run_chain(log_lik: Callable[[np.ndarray], float], prior_mean, prior_cov_factor, start,
              n_samples: int, burn_in: int, rng: np.random.Generator) -> np.ndarray:
    """
    ``burn_in`` discarded transitions followed by ``n_samples`` kept ones
    """
    prior_mean = np.asarray(prior_mean, dtype=float)
    factor = np.asarray(prior_cov_factor, dtype=float)
    x = np.asarray(start, dtype=float).copy()
    ll = log_lik(x)
    if not np.isfinite(ll):
        raise InvalidStateError("log likelihood is not finite at the chain start")
    samples = np.empty((n_samples, x.size))
    for i in range(burn_in + n_samples):
        x, ll = _ess_transition(log_lik, prior_mean, factor, x, ll, rng)
        if i >= burn_in:
            samples[i - burn_in] = x
    return samples


def multinomial_log_lik(counts: np.ndarray) -> Callable[[np.ndarray], float]:
    """log prod_k softmax(x)_k^counts_k"""
    counts = np.asarray(counts, dtype=float)
    total = counts.sum()

    def log_lik(x: np.ndarray) -> float:
        return float(counts @ x - total * logsumexp(x))

    return log_lik


def sample_experiment(K: int, rng: np.random.Generator, n_obs: int = 200,
                      dof: Optional[float] = None) -> BridgeExperiment:
    """
    Draw a generating mean from N(0, I) and covariance from an inverse
    Wishart with identity scale, a centred ground truth from them, and
    ``n_obs`` categories from its softmax.
    """
    if K < 3:
        raise InvalidArgumentError(f"the bridge comparison needs K >= 3, got {K}")
    dof = K + 2 if dof is None else dof
    if dof <= K - 1:
        raise InvalidArgumentError(f"inverse Wishart degrees of freedom must exceed K - 1, got {dof}")
    mean = rng.standard_normal(K)
    cov = np.atleast_2d(invwishart.rvs(df=dof, scale=np.eye(K), random_state=rng))
    draw = mean + linalg.cholesky(cov, lower=True) @ rng.standard_normal(K)
    truth = _centering(K) @ draw
    observations = rng.choice(K, size=n_obs, p=softmax(truth))
    return BridgeExperiment(
        K=K,
        prior_mean=np.zeros(K),
        prior_cov=np.eye(K),
        ground_truth=truth,
        observations=observations,
        generating_mean=mean,
        generating_cov=cov,
        dof=float(dof),
    )


def conjugate_update(belief: DirichletBelief, counts) -> DirichletBelief:
    counts = np.asarray(counts, dtype=float)
    if counts.shape != belief.alpha.shape:
        raise DimensionError(f"counts {counts.shape} do not match K={belief.K}")
    if np.any(counts < 0):
        raise InvalidArgumentError("counts must be non-negative")
    return DirichletBelief(alpha=belief.alpha + counts)


def bridge_posterior(prior: GaussianBelief, counts) -> GaussianBelief:
    """
    Gaussian prior -> Dirichlet -> add counts -> Gaussian
    """
    return dirichlet_to_gaussian(conjugate_update(gaussian_to_dirichlet(prior), counts))


def _compare_one(exp: BridgeExperiment, n_obs: int, n_mcmc: int, burn_in: int,
                 rng: np.random.Generator) -> ComparisonRow:
    counts = exp.counts(n_obs)
    centering = _centering(exp.K)

    prior = GaussianBelief(mean=exp.prior_mean, variance=np.diag(exp.prior_cov).copy())
    bridged = bridge_posterior(prior, counts)
    bridge_err = float(np.linalg.norm(bridged.mean - exp.ground_truth))
    bridge_sd = float(np.sqrt(bridged.variance.sum()))

    # the exact posterior lives on the centred subspace, like the bridge's mode
    factor = centering @ linalg.cholesky(exp.prior_cov, lower=True)
    mean = centering @ exp.prior_mean
    samples = run_chain(multinomial_log_lik(counts), mean, factor, mean, n_mcmc, burn_in, rng)
    mcmc_mean = samples.mean(axis=0)
    mcmc_err = float(np.linalg.norm(mcmc_mean - exp.ground_truth))
    mcmc_sd = float(np.sqrt(np.trace(np.cov(samples, rowvar=False, ddof=1))))
    return ComparisonRow(n_obs=n_obs, bridge_err=bridge_err, bridge_sd=bridge_sd,
                         mcmc_err=mcmc_err, mcmc_sd=mcmc_sd)


def run_bridge_vs_mcmc(exp: BridgeExperiment, n_obs_grid: Sequence[int], n_mcmc: int = None,
                       seed: int = 0, burn_in: int = None) -> pd.DataFrame:
    """
    Bridge and elliptical-slice posterior estimates for each observation
    count of one experiment; counts are nested prefixes of the same draws.
    """
    n_mcmc = settings.mcmc_samples if n_mcmc is None else n_mcmc
    burn_in = settings.mcmc_burn_in if burn_in is None else burn_in
    if n_mcmc < 1000:
        raise InvalidArgumentError(f"n_mcmc must be at least 1000, got {n_mcmc}")
    grid = [int(n) for n in n_obs_grid]
    if any(n < 0 for n in grid):
        raise InvalidArgumentError("observation counts must be non-negative")
    rng = np.random.default_rng(seed)
    rows = [_compare_one(exp, n, n_mcmc, burn_in, rng).model_dump() for n in grid]
    return pd.DataFrame(rows, columns=COMPARISON_COLUMNS)


def run_repeated_comparison(K: int = 10, n_obs_grid: Sequence[int] = (0, 10, 50, 100, 200),
                            repetitions: int = None, n_mcmc: int = None, seed: int = 0,
                            burn_in: int = None, dof: Optional[float] = None,
                            workers: int = 1) -> pd.DataFrame:
    """
    Average the comparison table over independent experiments
    """
    repetitions = settings.oracle_repetitions if repetitions is None else repetitions
    if repetitions < 1:
        raise InvalidArgumentError(f"repetitions must be at least 1, got {repetitions}")
    n_max = max(int(n) for n in n_obs_grid) if len(n_obs_grid) else 0
    children = np.random.SeedSequence(seed).spawn(repetitions)

    def _repetition(child: np.random.SeedSequence) -> pd.DataFrame:
        experiment_seed, chain_seed = child.spawn(2)
        exp = sample_experiment(K, np.random.default_rng(experiment_seed), n_obs=n_max, dof=dof)
        return run_bridge_vs_mcmc(exp, n_obs_grid, n_mcmc=n_mcmc, seed=chain_seed, burn_in=burn_in)

    logger.info(f"Running {repetitions} bridge-vs-MCMC repetitions at K={K}")
    if workers <= 1:
        tables: List[pd.DataFrame] = [_repetition(c) for c in children]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            tables = list(pool.map(_repetition, children))
    combined = pd.concat(tables, ignore_index=True)
    averaged = combined.groupby("n_obs", sort=False).mean().reset_index()
    return averaged[COMPARISON_COLUMNS]
