"""
Positive-definite kernels over document metadata.

Two feature spaces are supported: Euclidean vectors (optionally with an
author label per document) and graph nodes embedded by their shortest-path
distances to every node of the corpus graph.
"""

import logging
from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.distance import cdist

from ktm.core.errors import InvalidArgumentError, DimensionError, UnsupportedOperationError, UnsupportedQueryError
from ktm.models.schemas import KernelSpec, KernelVariant, FeatureKind


logger = logging.getLogger(__name__)

UNKNOWN_AUTHOR = "\x00unknown"


@dataclass(frozen=True)
class GraphEmbedding:
    matrix: np.ndarray
    capped: bool
    cap: float
    disconnected_pairs: int


@dataclass(frozen=True)
class FeatureSpace:
    """
    Metadata of a set of points.

    Euclidean: ``values`` is n x F, ``authors`` an optional label per row.
    Graph: ``values`` is n x C embedding rows (C = number of corpus nodes,
    rows may be a subset of the nodes) and ``nodes`` names each row.
    """
    kind: FeatureKind
    values: np.ndarray
    columns: Tuple[str, ...] = ()
    authors: Optional[np.ndarray] = None
    nodes: Optional[Tuple[str, ...]] = None
    edges: Optional[Tuple[Tuple[str, str], ...]] = None
    capped: bool = False

    def __post_init__(self):
        values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if not np.all(np.isfinite(values)):
            raise InvalidArgumentError("feature values must be finite")
        object.__setattr__(self, "values", values)
        if self.authors is not None:
            authors = np.asarray([str(a) for a in self.authors], dtype=object)
            if authors.size != values.shape[0]:
                raise DimensionError(f"{authors.size} authors for {values.shape[0]} feature rows")
            object.__setattr__(self, "authors", authors)
        if self.kind == FeatureKind.GRAPH and (self.nodes is None or len(self.nodes) != values.shape[0]):
            raise DimensionError("graph features need one node name per embedding row")

    @classmethod
    def euclidean(cls, values, authors=None, columns: Sequence[str] = ()) -> "FeatureSpace":
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        return cls(kind=FeatureKind.EUCLIDEAN, values=values, columns=tuple(columns), authors=authors)

    @classmethod
    def graph(cls, nodes: Sequence[str], edges: Sequence[Tuple[str, str]]) -> "FeatureSpace":
        embedding = graph_embed(nodes, edges)
        return cls(
            kind=FeatureKind.GRAPH,
            values=embedding.matrix,
            nodes=tuple(str(n) for n in nodes),
            edges=tuple((str(a), str(b)) for a, b in edges),
            capped=embedding.capped,
        )

    @property
    def n_points(self) -> int:
        return self.values.shape[0]

    def subset(self, indices) -> "FeatureSpace":
        indices = np.asarray(indices, dtype=int)
        return FeatureSpace(
            kind=self.kind,
            values=self.values[indices],
            columns=self.columns,
            authors=None if self.authors is None else self.authors[indices],
            nodes=None if self.nodes is None else tuple(self.nodes[i] for i in indices),
            edges=self.edges,
            capped=self.capped,
        )

    def permuted(self, permutation) -> "FeatureSpace":
        """Same metadata assigned to documents in a different order"""
        return self.subset(permutation)

    def locate_nodes(self, names: Sequence[str]) -> np.ndarray:
        if self.kind != FeatureKind.GRAPH:
            raise UnsupportedQueryError("node queries need graph features")
        lookup = {name: i for i, name in enumerate(self.nodes)}
        missing = [n for n in names if str(n) not in lookup]
        if missing:
            raise UnsupportedQueryError(f"nodes not present in the graph embedding: {missing[:5]}")
        return np.array([lookup[str(n)] for n in names], dtype=int)


@dataclass(frozen=True)
class GramMatrix:
    matrix: np.ndarray
    derivatives: List[np.ndarray]
    names: List[str]


def graph_embed(nodes: Sequence[str], edges: Sequence[Tuple[str, str]]) -> GraphEmbedding:
    """
    Hop-count shortest-path distances between all nodes of an undirected graph.

    Pairs with no connecting path get the largest finite distance plus one.
    """
    nodes = [str(n) for n in nodes]
    if not nodes:
        raise InvalidArgumentError("graph needs at least one node")
    index: Dict[str, int] = {}
    for i, name in enumerate(nodes):
        if name in index:
            raise InvalidArgumentError(f"duplicate node name {name!r}")
        index[name] = i
    adjacency = defaultdict(set)
    for a, b in edges:
        a, b = str(a), str(b)
        if a not in index or b not in index:
            raise InvalidArgumentError(f"edge ({a}, {b}) references an unknown node")
        if a == b:
            continue
        adjacency[index[a]].add(index[b])
        adjacency[index[b]].add(index[a])

    D = len(nodes)
    distances = np.full((D, D), np.inf)
    for source in range(D):
        seen = {}
        level = 0
        next_level = {source}
        while next_level:
            this_level = next_level
            next_level = set()
            for v in this_level:
                if v not in seen:
                    seen[v] = level
                    next_level.update(adjacency[v])
            level += 1
        for target, hops in seen.items():
            distances[source, target] = hops

    finite = np.isfinite(distances)
    disconnected = int((~finite).sum())
    cap = float(distances[finite].max()) + 1.0
    if disconnected:
        logger.warning(
            f"Graph has {disconnected} disconnected node pairs; capping their distance at {cap:g}"
        )
        distances[~finite] = cap
    return GraphEmbedding(matrix=distances, capped=bool(disconnected), cap=cap, disconnected_pairs=disconnected)


def rq_time_author(spec: KernelSpec, doc_a, doc_b) -> float:
    """
    Rational quadratic kernel between two (time, author) documents; time may
    be a scalar or a feature vector, author None for no identity term.
    """
    time_a, author_a = doc_a
    time_b, author_b = doc_b
    delta = np.atleast_1d(np.asarray(time_a, dtype=float) - np.asarray(time_b, dtype=float))
    r2 = float(delta @ delta) / spec.length_scale ** 2
    if author_a is not None and author_b is not None and author_a != author_b:
        r2 += (spec.author_mismatch_distance / spec.length_scale) ** 2
    return spec.amplitude * (1.0 + r2 / (2.0 * spec.mixture_shape)) ** (-spec.mixture_shape)


def graph_kernel(spec: KernelSpec, x_a, x_b) -> float:
    x_a = np.asarray(x_a, dtype=float)
    x_b = np.asarray(x_b, dtype=float)
    if x_a.shape != x_b.shape:
        raise DimensionError(f"embedding rows differ in length: {x_a.shape} vs {x_b.shape}")
    scales = _graph_scales(spec, x_a.size)
    delta = x_a - x_b
    return spec.amplitude * float(np.exp(-0.5 * np.sum(scales * delta ** 2)))


def default_graph_scales(n_coordinates: int) -> List[float]:
    return [1.0 / n_coordinates] * n_coordinates


def _graph_scales(spec: KernelSpec, n_coordinates: int) -> np.ndarray:
    if spec.scales is None:
        return np.asarray(default_graph_scales(n_coordinates))
    scales = np.asarray(spec.scales, dtype=float)
    if scales.size != n_coordinates:
        raise DimensionError(f"kernel has {scales.size} scales, embedding has {n_coordinates} coordinates")
    return scales


def _author_mismatch(fa: FeatureSpace, fb: FeatureSpace) -> np.ndarray:
    if fa.authors is None or fb.authors is None:
        return np.zeros((fa.n_points, fb.n_points))
    return (fa.authors[:, None] != fb.authors[None, :]).astype(float)


def _check_variant(spec: KernelSpec, fa: FeatureSpace, fb: FeatureSpace):
    if fa.kind != fb.kind:
        raise InvalidArgumentError(f"cannot compare {fa.kind.value} with {fb.kind.value} features")
    if spec.variant == KernelVariant.RATIONAL_QUADRATIC_TIME_AUTHOR and fa.kind != FeatureKind.EUCLIDEAN:
        raise UnsupportedOperationError("the rational quadratic kernel needs euclidean features")
    if spec.variant == KernelVariant.GRAPH_EMBEDDING and fa.kind != FeatureKind.GRAPH:
        raise UnsupportedOperationError("the graph embedding kernel needs graph features")
    if fa.values.shape[1] != fb.values.shape[1]:
        raise DimensionError(f"feature widths differ: {fa.values.shape[1]} vs {fb.values.shape[1]}")


def _rq_parts(spec: KernelSpec, fa: FeatureSpace, fb: FeatureSpace):
    sq = cdist(fa.values, fb.values, "sqeuclidean")
    mismatch = _author_mismatch(fa, fb)
    r2_author = mismatch * (spec.author_mismatch_distance / spec.length_scale) ** 2
    r2 = sq / spec.length_scale ** 2 + r2_author
    base = 1.0 + r2 / (2.0 * spec.mixture_shape)
    k = spec.amplitude * base ** (-spec.mixture_shape)
    return k, r2, r2_author, base


def pairwise(spec: KernelSpec, fa: FeatureSpace, fb: FeatureSpace) -> np.ndarray:
    """
    Kernel matrix between every row of ``fa`` and every row of ``fb``
    """
    _check_variant(spec, fa, fb)
    if spec.variant == KernelVariant.RATIONAL_QUADRATIC_TIME_AUTHOR:
        return _rq_parts(spec, fa, fb)[0]
    if spec.variant == KernelVariant.GRAPH_EMBEDDING:
        root = np.sqrt(_graph_scales(spec, fa.values.shape[1]))
        weighted = cdist(fa.values * root, fb.values * root, "sqeuclidean")
        return spec.amplitude * np.exp(-0.5 * weighted)
    if spec.variant == KernelVariant.CONSTANT:
        return np.full((fa.n_points, fb.n_points), spec.amplitude)
    raise UnsupportedOperationError(f"unknown kernel variant {spec.variant}")


def prior_variance(spec: KernelSpec, features: FeatureSpace) -> np.ndarray:
    """k(x, x) for every row; all supported kernels are stationary"""
    return np.full(features.n_points, spec.amplitude)


def _symmetric(matrix: np.ndarray) -> np.ndarray:
    return 0.5 * (matrix + matrix.T)


def gram(spec: KernelSpec, features: FeatureSpace, subset=None, with_derivatives: bool = True) -> GramMatrix:
    """
    Symmetric train kernel matrix and its derivatives with respect to the
    log parameters, in the order of ``spec.param_names()``.
    """
    if subset is not None:
        features = features.subset(subset)
    _check_variant(spec, features, features)
    names = spec.param_names()

    if spec.variant == KernelVariant.RATIONAL_QUADRATIC_TIME_AUTHOR:
        k, r2, r2_author, base = _rq_parts(spec, features, features)
        matrix = _symmetric(k)
        if not with_derivatives:
            return GramMatrix(matrix=matrix, derivatives=[], names=names)
        shape = spec.mixture_shape
        outer = spec.amplitude * base ** (-shape - 1.0)
        derivatives = [
            matrix,
            outer * r2,
            k * (-shape * np.log(base) + r2 / (2.0 * base)),
            -outer * r2_author,
        ]
        return GramMatrix(matrix=matrix, derivatives=[_symmetric(m) for m in derivatives], names=names)

    if spec.variant == KernelVariant.GRAPH_EMBEDDING:
        matrix = _symmetric(pairwise(spec, features, features))
        if not with_derivatives:
            return GramMatrix(matrix=matrix, derivatives=[], names=names)
        scales = _graph_scales(spec, features.values.shape[1])
        X = features.values
        derivatives = [matrix]
        for i, scale in enumerate(scales):
            delta = X[:, i][:, None] - X[:, i][None, :]
            derivatives.append(-0.5 * scale * delta ** 2 * matrix)
        return GramMatrix(matrix=matrix, derivatives=derivatives, names=names)

    if spec.variant == KernelVariant.CONSTANT:
        if with_derivatives:
            raise UnsupportedOperationError("the constant kernel provides no parameter derivatives")
        return GramMatrix(matrix=pairwise(spec, features, features), derivatives=[], names=names)

    raise UnsupportedOperationError(f"unknown kernel variant {spec.variant}")


def derivative_traces(spec: KernelSpec, features: FeatureSpace, weight: np.ndarray) -> np.ndarray:
    """
    sum_ab weight_ab * dH_ab / dlog(param_j) for every kernel parameter.

    The graph kernel contracts its per-coordinate derivatives without forming
    one matrix per coordinate.
    """
    weight = _symmetric(np.asarray(weight, dtype=float))
    if spec.variant == KernelVariant.GRAPH_EMBEDDING:
        _check_variant(spec, features, features)
        matrix = _symmetric(pairwise(spec, features, features))
        scales = _graph_scales(spec, features.values.shape[1])
        X = features.values
        W = weight * matrix
        row_sums = W.sum(axis=1)
        # sum_ab W_ab (x_ai - x_bi)^2 = 2 sum_a x_ai^2 r_a - 2 x_i^T W x_i
        spread = 2.0 * (X ** 2).T @ row_sums - 2.0 * np.sum((W @ X) * X, axis=0)
        return np.concatenate([[W.sum()], -0.5 * scales * spread])
    result = gram(spec, features, with_derivatives=True)
    return np.array([np.sum(weight * d) for d in result.derivatives])
