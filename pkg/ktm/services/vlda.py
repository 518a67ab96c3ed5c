"""
Semi-collapsed variational LDA.

Topic-word distributions are integrated out (zero-order collapsed updates over
expected topic-word counts) while each document keeps an explicit Dirichlet
belief alpha_d + nu_d over its topic proportions.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse

from ktm.core.errors import InvalidArgumentError, DimensionError, InvalidStateError


logger = logging.getLogger(__name__)


@dataclass
class Corpus:
    """
    Bag-of-words documents as a D x V sparse count matrix with canonical
    (sorted, de-duplicated) rows, plus a document id per row.
    """
    counts: sparse.csr_matrix
    doc_ids: List[str]
    vocab: Optional[List[str]] = None
    allow_empty: bool = False

    def __post_init__(self):
        counts = sparse.csr_matrix(self.counts, dtype=float)
        counts.sum_duplicates()
        counts.sort_indices()
        counts.eliminate_zeros()
        if counts.shape[0] < 1:
            raise InvalidArgumentError("corpus must contain at least one document")
        if len(self.doc_ids) != counts.shape[0]:
            raise DimensionError(f"{len(self.doc_ids)} doc ids for {counts.shape[0]} documents")
        if counts.nnz and (np.any(counts.data <= 0) or np.any(counts.data != np.round(counts.data))):
            raise InvalidArgumentError("word counts must be positive integers")
        if not self.allow_empty and np.any(np.diff(counts.indptr) == 0):
            empty = int(np.flatnonzero(np.diff(counts.indptr) == 0)[0])
            raise InvalidArgumentError(f"document {self.doc_ids[empty]} has no tokens")
        if self.vocab is not None and len(self.vocab) != counts.shape[1]:
            raise DimensionError(f"vocabulary has {len(self.vocab)} entries, corpus has V={counts.shape[1]}")
        self.counts = counts
        self.doc_ids = [str(d) for d in self.doc_ids]

    @classmethod
    def from_documents(cls, docs: Sequence[dict], vocab_size: int, doc_ids=None, **kwargs) -> "Corpus":
        """
        Build from a list of {word_id: count} maps
        """
        rows, cols, data = [], [], []
        for d, doc in enumerate(docs):
            for word, count in doc.items():
                if not 0 <= int(word) < vocab_size:
                    raise InvalidArgumentError(f"word id {word} outside [0, {vocab_size})")
                rows.append(d)
                cols.append(int(word))
                data.append(count)
        matrix = sparse.coo_matrix((data, (rows, cols)), shape=(len(docs), vocab_size))
        if doc_ids is None:
            doc_ids = [str(d + 1) for d in range(len(docs))]
        return cls(counts=matrix.tocsr(), doc_ids=list(doc_ids), **kwargs)

    @property
    def n_docs(self) -> int:
        return self.counts.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.counts.shape[1]

    @property
    def doc_lengths(self) -> np.ndarray:
        return np.asarray(self.counts.sum(axis=1)).ravel()

    @property
    def total_tokens(self) -> float:
        return float(self.counts.sum())

    def document(self, d: int) -> Tuple[np.ndarray, np.ndarray]:
        start, end = self.counts.indptr[d], self.counts.indptr[d + 1]
        return self.counts.indices[start:end], self.counts.data[start:end]


@dataclass
class TopicWordModel:
    beta: float
    counts: np.ndarray
    topic_totals: np.ndarray

    @classmethod
    def empty(cls, n_topics: int, vocab_size: int, beta: float) -> "TopicWordModel":
        if beta <= 0:
            raise InvalidArgumentError(f"beta must be positive, got {beta}")
        return cls(beta=beta, counts=np.zeros((n_topics, vocab_size)), topic_totals=np.zeros(n_topics))

    @property
    def n_topics(self) -> int:
        return self.counts.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.counts.shape[1]

    def copy(self) -> "TopicWordModel":
        return TopicWordModel(beta=self.beta, counts=self.counts.copy(), topic_totals=self.topic_totals.copy())


@dataclass
class DocResponsibilities:
    """Per document, one K-vector of responsibilities per distinct word"""
    gamma: List[np.ndarray]
    assigned: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.assigned is None:
            self.assigned = np.ones(len(self.gamma), dtype=bool)


def init_responsibilities(corpus: Corpus, K: int, seed: int, beta: float = 0.1,
                          accumulate: bool = True) -> Tuple[DocResponsibilities, TopicWordModel]:
    """
    Draw responsibilities from a symmetric Dirichlet(1) per distinct word.

    With ``accumulate`` the topic-word counts are built from them; otherwise
    the counts stay empty (uniform topics) and each document's mass is added
    the first time it is swept.
    """
    if K < 2:
        raise InvalidArgumentError(f"need at least 2 topics, got {K}")
    rng = np.random.default_rng(seed)
    state = TopicWordModel.empty(K, corpus.vocab_size, beta)
    gammas = []
    for d in range(corpus.n_docs):
        words, counts = corpus.document(d)
        gamma = rng.dirichlet(np.ones(K), size=words.size)
        gamma /= gamma.sum(axis=1, keepdims=True)
        gammas.append(gamma)
        if accumulate:
            contribution = gamma * counts[:, None]
            state.counts[:, words] += contribution.T
            state.topic_totals += contribution.sum(axis=0)
    assigned = np.full(corpus.n_docs, accumulate, dtype=bool)
    return DocResponsibilities(gamma=gammas, assigned=assigned), state


def _update_document(words: np.ndarray, counts: np.ndarray, gamma: np.ndarray, prior_alpha: np.ndarray,
                     columns: np.ndarray, totals: np.ndarray, beta: float, vocab_size: int,
                     passes: int, assigned: bool) -> np.ndarray:
    """
    Zero-order collapsed word updates for one document.

    ``columns`` (K x distinct words) and ``totals`` (K) are updated in place
    with remove-then-add bookkeeping, ``gamma`` row by row. Returns nu_d.
    """
    V_beta = beta * vocab_size
    nu = gamma.T @ counts
    for _ in range(passes):
        for j in range(words.size):
            c = counts[j]
            old = gamma[j] * c
            if assigned:
                columns[:, j] -= old
                totals -= old
            nu_minus = nu - old
            weights = (
                (beta + np.maximum(columns[:, j], 0.0))
                / (V_beta + np.maximum(totals, 0.0))
                * (prior_alpha + nu_minus)
            )
            new_gamma = weights / weights.sum()
            new = new_gamma * c
            columns[:, j] = np.maximum(columns[:, j] + new, 0.0)
            totals += new
            nu = nu_minus + new
            gamma[j] = new_gamma
        assigned = True
    return gamma.T @ counts


def _prior_vector(prior, K: int) -> np.ndarray:
    alpha = prior.alpha if hasattr(prior, "alpha") else np.asarray(prior, dtype=float)
    if alpha.shape != (K,):
        raise DimensionError(f"prior has shape {alpha.shape}, topic-word state has K={K}")
    return alpha


def sweep_document(d: int, prior, state: TopicWordModel, resp: DocResponsibilities,
                   corpus: Corpus, passes_per_doc: int = 1) -> np.ndarray:
    """
    Update the responsibilities of document d against the current topic-word
    counts and return its pseudo-counts nu_d.
    """
    alpha = _prior_vector(prior, state.n_topics)
    words, counts = corpus.document(d)
    columns = state.counts[:, words]
    nu = _update_document(
        words, counts, resp.gamma[d], alpha, columns, state.topic_totals,
        state.beta, state.vocab_size, passes_per_doc, bool(resp.assigned[d])
    )
    state.counts[:, words] = columns
    resp.assigned[d] = True
    return nu


def _snapshot_delta(d, alpha, frozen: TopicWordModel, resp: DocResponsibilities, corpus: Corpus, passes: int):
    words, counts = corpus.document(d)
    columns = frozen.counts[:, words]
    before = columns.copy()
    totals = frozen.topic_totals.copy()
    gamma = resp.gamma[d].copy()
    nu = _update_document(
        words, counts, gamma, alpha, columns, totals,
        frozen.beta, frozen.vocab_size, passes, bool(resp.assigned[d])
    )
    return words, gamma, columns - before, nu


def sweep_corpus(corpus: Corpus, priors: np.ndarray, state: TopicWordModel, resp: DocResponsibilities,
                 passes_per_doc: int = 1, snapshot: bool = False, workers: int = 1) -> np.ndarray:
    """
    One sweep over all documents; returns the D x K pseudo-count matrix.

    Sequential mode updates the shared counts document by document. Snapshot
    mode lets workers read a frozen copy and applies their deltas afterwards
    in document order.
    """
    priors = np.asarray(priors, dtype=float)
    if priors.shape != (corpus.n_docs, state.n_topics):
        raise DimensionError(f"priors have shape {priors.shape}, expected {(corpus.n_docs, state.n_topics)}")
    nu = np.zeros_like(priors)
    if not snapshot:
        for d in range(corpus.n_docs):
            nu[d] = sweep_document(d, priors[d], state, resp, corpus, passes_per_doc)
        return nu

    frozen = state.copy()
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(
            lambda d: _snapshot_delta(d, priors[d], frozen, resp, corpus, passes_per_doc),
            range(corpus.n_docs)
        ))
    for d, (words, gamma, delta, nu_d) in enumerate(results):
        state.counts[:, words] += delta
        resp.gamma[d] = gamma
        resp.assigned[d] = True
        nu[d] = nu_d
    np.maximum(state.counts, 0.0, out=state.counts)
    state.topic_totals = state.counts.sum(axis=1)
    return nu


def expected_topic_word(state: TopicWordModel) -> np.ndarray:
    """
    Posterior-mean topic-word distributions (beta + n_kv) / (V beta + n_k)
    """
    return (state.beta + state.counts) / (state.vocab_size * state.beta + state.topic_totals[:, None])


def posterior_proportions(priors: np.ndarray, nu: np.ndarray) -> np.ndarray:
    posterior = np.asarray(priors, dtype=float) + np.asarray(nu, dtype=float)
    return posterior / posterior.sum(axis=1, keepdims=True)


def perplexity(corpus: Corpus, theta: np.ndarray, pi: np.ndarray) -> float:
    """
    exp of the negative mean per-token log predictive under the topic mixture
    """
    theta = np.asarray(theta, dtype=float)
    pi = np.asarray(pi, dtype=float)
    if pi.shape[0] != corpus.n_docs or theta.shape[1] != corpus.vocab_size or pi.shape[1] != theta.shape[0]:
        raise DimensionError(
            f"shapes disagree: pi {pi.shape}, theta {theta.shape}, corpus {corpus.counts.shape}"
        )
    total = corpus.total_tokens
    if total <= 0:
        raise InvalidArgumentError("cannot evaluate perplexity of an empty corpus")
    log_lik = 0.0
    for d in range(corpus.n_docs):
        words, counts = corpus.document(d)
        if words.size == 0:
            continue
        predictive = pi[d] @ theta[:, words]
        if np.any(predictive <= 0):
            raise InvalidStateError(f"document {corpus.doc_ids[d]} has a word with zero predictive probability")
        log_lik += float(counts @ np.log(predictive))
    return float(np.exp(-log_lik / total))
