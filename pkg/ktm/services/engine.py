"""
Training loop of the kernel topic model.

Each sweep turns the current GP predictions into per-document Dirichlet
priors, runs one variational LDA sweep, maps the Dirichlet posteriors back
to Gaussian messages and refits the per-topic GPs on them.
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ktm.core.config import resolve_threads
from ktm.core.errors import DimensionError, InvalidArgumentError, InvalidStateError, NumericalError
from ktm.models.schemas import Hyperparameters, KernelSpec, KernelVariant, OptimizationReport, TrainConfig
from ktm.services import gp
from ktm.services.bridge import (
    DirichletBelief,
    dirichlet_rows_to_gaussian,
    gaussian_rows_to_dirichlet,
    softmax,
)
from ktm.services.kernels import FeatureSpace, default_graph_scales
from ktm.services.vlda import (
    Corpus,
    DocResponsibilities,
    TopicWordModel,
    expected_topic_word,
    init_responsibilities,
    perplexity,
    posterior_proportions,
    sweep_corpus,
)


logger = logging.getLogger(__name__)


@dataclass
class ModelState:
    config: TrainConfig
    features: FeatureSpace
    doc_ids: List[str]
    topic_word: TopicWordModel
    priors: np.ndarray
    nu: np.ndarray
    messages: List[gp.GaussianMessages]
    gps: List[gp.GpTopicModel]
    hypers: Hyperparameters
    sweep_index: int = 0
    perplexity_trace: List[float] = field(default_factory=list)
    clamped_trace: List[int] = field(default_factory=list)
    reports: List[OptimizationReport] = field(default_factory=list)
    responsibilities: Optional[DocResponsibilities] = None
    heldout_perplexity: Optional[float] = None

    @property
    def n_topics(self) -> int:
        return self.topic_word.n_topics

    @property
    def n_docs(self) -> int:
        return len(self.doc_ids)

    @property
    def doc_beliefs(self) -> List[DirichletBelief]:
        return [DirichletBelief(alpha=row) for row in self.priors + self.nu]

    def proportions(self) -> np.ndarray:
        """Dirichlet-mean topic proportions of the training documents"""
        return posterior_proportions(self.priors, self.nu)


@dataclass(frozen=True)
class TopicPrediction:
    probabilities: np.ndarray
    y_means: np.ndarray
    y_variances: np.ndarray


class KernelTopicModelTrainer:
    """Runs sweeps on one corpus; owns all mutable training state"""

    def __init__(self, config: TrainConfig, kernel: KernelSpec, hypers: Optional[Hyperparameters] = None):
        self.config = config
        self.hypers = hypers or Hyperparameters(kernel=kernel)
        self.workers = resolve_threads(config.threads)

    def initialize(self, corpus: Corpus, features: FeatureSpace) -> ModelState:
        if features.n_points != corpus.n_docs:
            raise DimensionError(f"{features.n_points} metadata rows for {corpus.n_docs} documents")
        kernel = self.hypers.kernel
        if kernel.variant == KernelVariant.GRAPH_EMBEDDING and kernel.scales is None:
            scales = default_graph_scales(features.values.shape[1])
            self.hypers = self.hypers.model_copy(update={"kernel": kernel.model_copy(update={"scales": scales})})
        K = self.config.n_topics
        resp, topic_word = init_responsibilities(
            corpus, K, self.config.seed, beta=self.config.beta, accumulate=False
        )
        priors = np.full((corpus.n_docs, K), self.config.initial_alpha)
        nu = np.zeros_like(priors)
        return ModelState(
            config=self.config,
            features=features,
            doc_ids=list(corpus.doc_ids),
            topic_word=topic_word,
            priors=priors,
            nu=nu,
            messages=[],
            gps=[],
            hypers=self.hypers,
            responsibilities=resp,
        )

    def _document_priors(self, state: ModelState) -> Tuple[np.ndarray, int]:
        if not self.config.use_gp or not state.gps:
            return np.full((state.n_docs, state.n_topics), self.config.initial_alpha), 0
        means = np.empty((state.n_docs, state.n_topics))
        variances = np.empty_like(means)
        for k, model in enumerate(state.gps):
            means[:, k], variances[:, k] = gp.predict_many(model, state.features)
        variances += state.hypers.tau ** 2
        return gaussian_rows_to_dirichlet(means, variances, alpha_floor=self.config.alpha_floor)

    def _fit_gps(self, state: ModelState, hypers: Hyperparameters, sweep: int) -> List[gp.GpTopicModel]:
        def _fit(k: int) -> gp.GpTopicModel:
            try:
                return gp.fit(
                    hypers.kernel, state.features, state.messages[k].with_tau(hypers.tau),
                    jitter_start=self.config.jitter_start, jitter_max=self.config.jitter_max,
                )
            except NumericalError as e:
                raise NumericalError(f"sweep {sweep}, topic {k}: {e}") from e

        topics = range(state.n_topics)
        if self.workers <= 1:
            return [_fit(k) for k in topics]
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            return list(pool.map(_fit, topics))

    def sweep(self, state: ModelState, corpus: Corpus) -> ModelState:
        if state.responsibilities is None:
            raise InvalidStateError("state has no word responsibilities; it cannot be trained further")
        started = time.time()
        s = state.sweep_index + 1

        theta = expected_topic_word(state.topic_word)
        entry_perplexity = perplexity(corpus, theta, state.proportions())

        priors, clamped = self._document_priors(state)
        nu = sweep_corpus(
            corpus, priors, state.topic_word, state.responsibilities,
            passes_per_doc=self.config.passes_per_doc,
            snapshot=self.config.snapshot,
            workers=self.workers,
        )
        means, variances = dirichlet_rows_to_gaussian(priors + nu)
        state.priors, state.nu = priors, nu
        state.messages = [
            gp.GaussianMessages(means=means[:, k], bridge_variances=variances[:, k], tau=state.hypers.tau)
            for k in range(state.n_topics)
        ]

        if self.config.use_gp:
            state.gps = self._fit_gps(state, state.hypers, s)
            if self.config.optimize_hypers and s % self.config.hyperopt_every == 0:
                self._optimize(state, s)

        state.perplexity_trace.append(entry_perplexity)
        state.clamped_trace.append(clamped)
        state.sweep_index = s
        logger.info(
            f"Sweep {s}: perplexity {state.perplexity_trace[-1]:.4f}, "
            f"clamped {clamped}, {time.time() - started:.2f}s"
        )
        return state

    def _optimize(self, state: ModelState, sweep: int):
        hypers, report = gp.optimize_hypers(
            state.hypers, state.features, state.messages, self.config.hyperopt_steps,
            workers=self.workers,
            jitter_start=self.config.jitter_start, jitter_max=self.config.jitter_max,
        )
        state.reports.append(report)
        if report.accepted:
            state.hypers = hypers
            state.messages = [m.with_tau(hypers.tau) for m in state.messages]
            state.gps = self._fit_gps(state, hypers, sweep)
        logger.info(f"Sweep {sweep}: hyperparameters {hypers.kernel.model_dump(mode='json')}, tau {hypers.tau:.4g}")

    def train(self, corpus: Corpus, features: FeatureSpace) -> ModelState:
        state = self.initialize(corpus, features)
        for _ in range(self.config.max_sweeps):
            self.sweep(state, corpus)
        return state


def train(corpus: Corpus, features: FeatureSpace, kernel: KernelSpec, config: TrainConfig,
          hypers: Optional[Hyperparameters] = None) -> ModelState:
    """
    Train from a uniform start for ``config.max_sweeps`` sweeps
    """
    return KernelTopicModelTrainer(config, kernel, hypers).train(corpus, features)


def _require_gps(state: ModelState):
    if not state.gps:
        raise InvalidStateError("model has no fitted Gaussian processes (trained without GP or for zero sweeps)")


def predict_topic_series(state: ModelState, queries: FeatureSpace) -> TopicPrediction:
    """
    Topic proportions at every query row: softmax of the per-topic GP means,
    with the softmax-basis variances (GP variance plus tau^2)
    """
    _require_gps(state)
    means = np.empty((queries.n_points, state.n_topics))
    variances = np.empty_like(means)
    for k, model in enumerate(state.gps):
        means[:, k], variances[:, k] = gp.predict_many(model, queries)
    variances += state.hypers.tau ** 2
    return TopicPrediction(probabilities=softmax(means), y_means=means, y_variances=variances)


def predict_topics(state: ModelState, query: FeatureSpace) -> TopicPrediction:
    if query.n_points != 1:
        raise DimensionError(f"predict_topics takes one query point, got {query.n_points}")
    result = predict_topic_series(state, query)
    return TopicPrediction(
        probabilities=result.probabilities[0],
        y_means=result.y_means[0],
        y_variances=result.y_variances[0],
    )


def node_queries(state: ModelState, names: Sequence[str]) -> FeatureSpace:
    """Feature rows of graph nodes present in the training embedding"""
    return state.features.subset(state.features.locate_nodes(names))


def evaluate_heldout(state: ModelState, heldout: Corpus) -> float:
    """
    Perplexity of ``heldout`` tokens under the trained topics and the
    documents' inferred proportions; documents are matched by id.
    """
    if heldout.vocab_size != state.topic_word.vocab_size:
        raise DimensionError(f"corpus has V={heldout.vocab_size}, model has V={state.topic_word.vocab_size}")
    index = {doc_id: i for i, doc_id in enumerate(state.doc_ids)}
    missing = [d for d in heldout.doc_ids if d not in index]
    if missing:
        raise InvalidArgumentError(f"documents not in the model: {missing[:5]}")
    rows = [index[d] for d in heldout.doc_ids]
    pi = state.proportions()[rows]
    return perplexity(heldout, expected_topic_word(state.topic_word), pi)
