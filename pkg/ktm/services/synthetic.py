"""
Forward sampler for the kernel topic model's generative process
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from ktm.core.errors import InvalidArgumentError
from ktm.models.schemas import KernelSpec
from ktm.services.bridge import softmax
from ktm.services.kernels import FeatureSpace, gram
from ktm.services.vlda import Corpus


logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SyntheticCorpus:
    corpus: Corpus
    features: FeatureSpace
    kernel: KernelSpec
    topics: np.ndarray
    latent: np.ndarray
    proportions: np.ndarray


def generate_ktm_corpus(n_docs: int = 60, n_topics: int = 3, vocab_size: int = 50, doc_length: int = 40,
                        seed: int = 0, feature_range: float = 10.0, length_scale: float = 2.0,
                        amplitude: float = 4.0, tau: float = 0.1, topic_beta: float = 0.1) -> SyntheticCorpus:
    """
    Sample topics from a symmetric Dirichlet, one smooth GP function per
    topic over a 1D feature, noisy softmax-basis proportions per document,
    then topic and word draws for every token.
    """
    if n_docs < 1 or n_topics < 2 or vocab_size < 2 or doc_length < 1:
        raise InvalidArgumentError("need n_docs >= 1, n_topics >= 2, vocab_size >= 2, doc_length >= 1")
    rng = np.random.default_rng(seed)

    topics = rng.dirichlet(np.full(vocab_size, topic_beta), size=n_topics)
    times = np.sort(rng.uniform(0.0, feature_range, size=n_docs))
    features = FeatureSpace.euclidean(times, columns=["time"])
    kernel = KernelSpec(amplitude=amplitude, length_scale=length_scale, mixture_shape=1.0)

    H = gram(kernel, features, with_derivatives=False).matrix
    factor = linalg.cholesky(H + 1e-8 * amplitude * np.eye(n_docs), lower=True)
    functions = factor @ rng.standard_normal((n_docs, n_topics))
    latent = functions + tau * rng.standard_normal((n_docs, n_topics))
    proportions = softmax(latent)

    docs = []
    for d in range(n_docs):
        assignments = rng.choice(n_topics, size=doc_length, p=proportions[d])
        words = np.array([rng.choice(vocab_size, p=topics[k]) for k in assignments])
        ids, counts = np.unique(words, return_counts=True)
        docs.append(dict(zip(ids.tolist(), counts.tolist())))
    corpus = Corpus.from_documents(docs, vocab_size, vocab=[f"w{v}" for v in range(vocab_size)])
    logger.info(f"Generated synthetic corpus: D={n_docs}, K={n_topics}, V={vocab_size}, seed={seed}")
    return SyntheticCorpus(
        corpus=corpus,
        features=features,
        kernel=kernel,
        topics=topics,
        latent=latent,
        proportions=proportions,
    )
