import logging

import numpy as np
import pytest

from ktm.core.errors import DimensionError, NumericalError, UnsupportedOperationError
from ktm.models.schemas import Hyperparameters, KernelSpec, KernelVariant
from ktm.services import gp
from ktm.services.kernels import FeatureSpace, GramMatrix, gram, pairwise


def random_problem(rng, D, tau=0.0):
    """Random RQ problem with author labels and heteroscedastic messages"""
    spec = KernelSpec(
        variant=KernelVariant.RATIONAL_QUADRATIC_TIME_AUTHOR,
        amplitude=rng.uniform(0.5, 2.0),
        length_scale=rng.uniform(0.5, 3.0),
        mixture_shape=rng.uniform(0.5, 3.0),
        author_mismatch_distance=rng.uniform(0.5, 2.0),
    )
    features = FeatureSpace.euclidean(rng.uniform(0, 5, size=(D, 1)), authors=rng.choice(["a", "b"], size=D))
    msgs = gp.GaussianMessages(
        means=rng.normal(size=D),
        bridge_variances=rng.uniform(0.1, 2.0, size=D),
        tau=tau,
    )
    return spec, features, msgs


def dense_oracle(spec, features, msgs, queries):
    """Posterior and evidence by direct dense linear algebra"""
    H = pairwise(spec, features, features)
    A = H + np.diag(msgs.variances)
    A_inv = np.linalg.inv(A)
    cross = pairwise(spec, features, queries)
    mean = cross.T @ A_inv @ msgs.means
    var = spec.amplitude - np.einsum("ij,ik,kj->j", cross, A_inv, cross)
    sign, logdet = np.linalg.slogdet(A)
    log_z = -0.5 * (msgs.means @ A_inv @ msgs.means + logdet)
    # evidence without the 2 pi constant, in the same normalisation as log_evidence
    return mean, var, log_z


def numeric_gradient(hypers, features, msgs, h=1e-5):
    xi = hypers.xi
    grad = np.zeros_like(xi)
    for j in range(xi.size):
        up, down = xi.copy(), xi.copy()
        up[j] += h
        down[j] -= h
        values = []
        for point in (up, down):
            candidate = hypers.with_xi(point)
            m = msgs.with_tau(candidate.tau)
            values.append(gp.log_evidence(gp.fit(candidate.kernel, features, m), m))
        grad[j] = (values[0] - values[1]) / (2 * h)
    return grad


class TestGaussianMessages:
    def test_precisions(self):
        """Test precisions invert the combined variances"""
        m = gp.GaussianMessages(means=[1.0, -2.0], bridge_variances=[0.5, 2.0], tau=0.5)
        np.testing.assert_allclose(m.variances, [0.75, 2.25])
        np.testing.assert_allclose(m.precisions * m.variances, 1.0, atol=1e-12)
        np.testing.assert_allclose(m.precision_adjusted_means, [1 / 0.75, -2 / 2.25])

    def test_shape_mismatch(self):
        """Test means and variances must align"""
        with pytest.raises(DimensionError):
            gp.GaussianMessages(means=[1.0, 2.0], bridge_variances=[1.0])


class TestFit:
    def test_one_point_constant_kernel(self):
        """Test D = 1 with k = 1 and unit noise halves the mean and variance"""
        spec = KernelSpec(variant=KernelVariant.CONSTANT, amplitude=1.0)
        features = FeatureSpace.euclidean([[0.0]])
        model = gp.fit(spec, features, gp.GaussianMessages(means=[3.0], bridge_variances=[1.0]))
        mean, var = gp.predict(model, features)
        assert mean == pytest.approx(1.5, abs=1e-14)
        assert var == pytest.approx(0.5, abs=1e-14)

    def test_matches_dense_oracle(self):
        """Test fit, predict and log evidence on 50 random instances"""
        rng = np.random.default_rng(0)
        for _ in range(50):
            D = int(rng.integers(1, 11))
            spec, features, msgs = random_problem(rng, D, tau=rng.uniform(0.0, 1.0))
            queries = FeatureSpace.euclidean(rng.uniform(-1, 6, size=(4, 1)),
                                             authors=rng.choice(["a", "b", "c"], size=4))
            model = gp.fit(spec, features, msgs)
            assert model.jitter == 0.0
            mean, var = gp.predict_many(model, queries)
            o_mean, o_var, o_logz = dense_oracle(spec, features, msgs, queries)
            np.testing.assert_allclose(mean, o_mean, atol=1e-8)
            np.testing.assert_allclose(var, np.maximum(o_var, 0), atol=1e-8)
            assert gp.log_evidence(model, msgs) == pytest.approx(o_logz, abs=1e-8)

    def test_pivots_at_least_one(self):
        """Test every Cholesky pivot of B is at least one"""
        rng = np.random.default_rng(1)
        spec, features, msgs = random_problem(rng, 9)
        model = gp.fit(spec, features, msgs)
        assert np.diag(model.chol).min() >= 1 - 1e-9

    def test_dimension_mismatch(self):
        """Test messages must match the inputs"""
        rng = np.random.default_rng(2)
        spec, features, msgs = random_problem(rng, 4)
        with pytest.raises(DimensionError):
            gp.fit(spec, features, gp.GaussianMessages(means=[0.0], bridge_variances=[1.0]))

    def test_subset_fit(self):
        """Test fitting on a subset of rows"""
        rng = np.random.default_rng(3)
        spec, features, msgs = random_problem(rng, 3)
        big = FeatureSpace.euclidean(np.vstack([features.values, [[9.0]]]),
                                     authors=list(features.authors) + ["a"])
        model = gp.fit(spec, big, msgs, subset=[0, 1, 2])
        direct = gp.fit(spec, features, msgs)
        np.testing.assert_array_equal(model.solve_vector, direct.solve_vector)

    def test_jitter_escalates(self, monkeypatch, caplog):
        """Test an indefinite kernel matrix is repaired by the jitter ladder"""
        def indefinite(kernel, features, subset=None, with_derivatives=True):
            return GramMatrix(matrix=np.array([[1.0, 1.0 + 3e-6], [1.0 + 3e-6, 1.0]]), derivatives=[], names=[])

        monkeypatch.setattr(gp, "gram", indefinite)
        features = FeatureSpace.euclidean([[0.0], [1.0]])
        msgs = gp.GaussianMessages(means=[0.2, 0.1], bridge_variances=[1e-6, 1e-6])
        with caplog.at_level(logging.WARNING, logger="ktm.services.gp"):
            model = gp.fit(KernelSpec(), features, msgs)
        assert model.jitter == pytest.approx(1e-5)
        assert "jitter" in caplog.text

    def test_failure_reports_eigenvalue(self, monkeypatch):
        """Test a matrix beyond repair raises with the smallest eigenvalue"""
        def broken(kernel, features, subset=None, with_derivatives=True):
            return GramMatrix(matrix=np.array([[1.0, 5.0], [5.0, 1.0]]), derivatives=[], names=[])

        monkeypatch.setattr(gp, "gram", broken)
        features = FeatureSpace.euclidean([[0.0], [1.0]])
        msgs = gp.GaussianMessages(means=[0.0, 0.0], bridge_variances=[1.0, 1.0])
        with pytest.raises(NumericalError, match="-4.000e\\+00"):
            gp.fit(KernelSpec(), features, msgs)


class TestPredict:
    def test_far_query_reverts_to_prior(self):
        """Test a query far from the data returns the prior"""
        rng = np.random.default_rng(4)
        spec, features, msgs = random_problem(rng, 6)
        spec = spec.model_copy(update={"length_scale": 0.1, "mixture_shape": 50.0})
        model = gp.fit(spec, features, msgs)
        mean, var = gp.predict(model, FeatureSpace.euclidean([[1e4]], authors=["a"]))
        assert abs(mean) < 1e-10
        assert var == pytest.approx(spec.amplitude, rel=1e-10)

    def test_interpolates_exact_messages(self):
        """Test tiny message variance reproduces the message mean"""
        spec = KernelSpec(length_scale=1.0)
        features = FeatureSpace.euclidean([[0.0], [3.0], [7.0]])
        msgs = gp.GaussianMessages(means=[0.4, -1.0, 2.0], bridge_variances=[1e-9] * 3)
        model = gp.fit(spec, features, msgs)
        mean, _ = gp.predict_many(model, features)
        np.testing.assert_allclose(mean, msgs.means, atol=1e-6)

    def test_uninformative_messages(self):
        """Test huge message variances leave the prior in place"""
        rng = np.random.default_rng(5)
        spec, features, msgs = random_problem(rng, 7)
        vague = gp.GaussianMessages(means=msgs.means, bridge_variances=msgs.bridge_variances * 1e12)
        model = gp.fit(spec, features, vague)
        mean, var = gp.predict_many(model, features)
        np.testing.assert_allclose(mean, 0.0, atol=1e-5)
        np.testing.assert_allclose(var, spec.amplitude, atol=1e-5)

    def test_variance_bounded_by_prior(self):
        """Test posterior variance never exceeds the prior variance"""
        rng = np.random.default_rng(6)
        spec, features, msgs = random_problem(rng, 10)
        model = gp.fit(spec, features, msgs)
        _, var = gp.predict_many(model, FeatureSpace.euclidean(rng.uniform(-5, 10, size=(40, 1)),
                                                               authors=rng.choice(["a", "b"], size=40)))
        assert np.all(var > 0)
        assert np.all(var <= spec.amplitude)


class TestLogEvidence:
    def test_identity_closed_form(self):
        """Test H = I, unit precisions and zero means give -(D/2) log 2"""
        nodes = [str(i) for i in range(7)]
        features = FeatureSpace.graph(nodes, [])
        # all pairs at the capped distance 1 with huge scales: H = I to machine precision
        spec = KernelSpec(variant=KernelVariant.GRAPH_EMBEDDING, amplitude=1.0, scales=[2000.0] * 7)
        assert np.array_equal(gram(spec, features, with_derivatives=False).matrix, np.eye(7))
        msgs = gp.GaussianMessages(means=np.zeros(7), bridge_variances=np.ones(7))
        model = gp.fit(spec, features, msgs)
        assert gp.log_evidence(model, msgs) == pytest.approx(-3.5 * np.log(2.0), abs=1e-12)

    def test_zero_means(self):
        """Test zero means leave only the determinant terms"""
        rng = np.random.default_rng(7)
        spec, features, msgs = random_problem(rng, 5)
        zero = gp.GaussianMessages(means=np.zeros(5), bridge_variances=msgs.bridge_variances)
        model = gp.fit(spec, features, zero)
        expected = 0.5 * (np.sum(np.log(zero.precisions)) - model.log_det_b)
        assert gp.log_evidence(model, zero) == pytest.approx(expected, abs=1e-12)
        assert model.log_det_b >= 0


class TestEvidenceGradient:
    def test_matches_finite_differences(self):
        """Test every gradient component on 20 random problems"""
        rng = np.random.default_rng(8)
        for _ in range(20):
            D = int(rng.integers(2, 11))
            spec, features, msgs = random_problem(rng, D)
            hypers = Hyperparameters(kernel=spec, tau=rng.uniform(0.2, 1.5))
            m = msgs.with_tau(hypers.tau)
            model = gp.fit(spec, features, m)
            analytic = gp.evidence_gradient(model, m, hypers)
            numeric = numeric_gradient(hypers, features, msgs)
            np.testing.assert_allclose(analytic, numeric, rtol=1e-5, atol=1e-7)

    def test_graph_gradient(self):
        """Test graph-kernel gradients against finite differences"""
        rng = np.random.default_rng(9)
        nodes = [f"v{i}" for i in range(6)]
        edges = [("v0", "v1"), ("v1", "v2"), ("v2", "v3"), ("v4", "v5"), ("v3", "v4")]
        features = FeatureSpace.graph(nodes, edges)
        spec = KernelSpec(variant=KernelVariant.GRAPH_EMBEDDING, amplitude=1.2,
                          scales=list(rng.uniform(0.05, 0.5, size=6)))
        msgs = gp.GaussianMessages(means=rng.normal(size=6), bridge_variances=rng.uniform(0.2, 1.0, size=6))
        hypers = Hyperparameters(kernel=spec, tau=0.7)
        m = msgs.with_tau(hypers.tau)
        analytic = gp.evidence_gradient(gp.fit(spec, features, m), m, hypers)
        np.testing.assert_allclose(analytic, numeric_gradient(hypers, features, msgs), rtol=1e-5, atol=1e-7)

    def test_ignored_parameter_is_flat(self):
        """Test the author distance has zero gradient without author labels"""
        rng = np.random.default_rng(10)
        spec, _, msgs = random_problem(rng, 6)
        features = FeatureSpace.euclidean(rng.uniform(0, 5, size=(6, 1)))
        hypers = Hyperparameters(kernel=spec, tau=0.5)
        m = msgs.with_tau(0.5)
        grad = gp.evidence_gradient(gp.fit(spec, features, m), m, hypers)
        assert grad[3] == 0.0

    def test_large_tau_has_negative_gradient(self):
        """Test inflating tau past the residual scale lowers the evidence"""
        rng = np.random.default_rng(11)
        spec = KernelSpec(length_scale=2.0)
        features = FeatureSpace.euclidean(np.linspace(0, 10, 25)[:, None])
        H = gram(spec, features, with_derivatives=False).matrix
        f = np.linalg.cholesky(H + 1e-8 * np.eye(25)) @ rng.normal(size=25)
        msgs = gp.GaussianMessages(means=f, bridge_variances=np.full(25, 1e-4))
        hypers = Hyperparameters(kernel=spec, tau=3.0)
        m = msgs.with_tau(hypers.tau)
        grad = gp.evidence_gradient(gp.fit(spec, features, m), m, hypers)
        assert grad[-1] < 0
        assert numeric_gradient(hypers, features, msgs)[-1] < 0

    def test_constant_kernel_unsupported(self):
        """Test a kernel without derivatives raises"""
        spec = KernelSpec(variant=KernelVariant.CONSTANT)
        features = FeatureSpace.euclidean([[0.0], [1.0]])
        msgs = gp.GaussianMessages(means=[0.1, 0.2], bridge_variances=[1.0, 1.0], tau=1.0)
        model = gp.fit(spec, features, msgs)
        with pytest.raises(UnsupportedOperationError):
            gp.evidence_gradient(model, msgs, Hyperparameters(kernel=spec, tau=1.0))


class TestOptimizeHypers:
    @staticmethod
    def sample_topics(rng, length_scale, n_topics=3, D=40, noise=0.05):
        spec = KernelSpec(length_scale=length_scale, amplitude=1.0)
        features = FeatureSpace.euclidean(np.sort(rng.uniform(0, 20, size=D))[:, None])
        H = gram(spec, features, with_derivatives=False).matrix
        factor = np.linalg.cholesky(H + 1e-8 * np.eye(D))
        messages = [
            gp.GaussianMessages(means=factor @ rng.normal(size=D) + noise * rng.normal(size=D),
                                bridge_variances=np.full(D, 0.0025))
            for _ in range(n_topics)
        ]
        return features, messages

    def test_trace_non_decreasing(self):
        """Test accepted steps never lower the summed log evidence"""
        rng = np.random.default_rng(12)
        features, messages = self.sample_topics(rng, 2.0)
        start = Hyperparameters(kernel=KernelSpec(length_scale=8.0), tau=1.0)
        hypers, report = gp.optimize_hypers(start, features, messages, steps=10)
        trace = report.log_evidence_trace
        assert len(trace) == report.accepted + 1
        assert all(b >= a for a, b in zip(trace, trace[1:]))
        value, _ = gp.total_log_evidence(hypers, features, messages)
        assert value >= trace[0]

    def test_recovers_length_scale(self):
        """Test the median recovered length scale is within a factor 2 over 10 seeds"""
        recovered = []
        for seed in range(10):
            rng = np.random.default_rng(100 + seed)
            features, messages = self.sample_topics(rng, 2.0)
            start = Hyperparameters(kernel=KernelSpec(length_scale=5.0), tau=0.5)
            hypers, _ = gp.optimize_hypers(start, features, messages, steps=60)
            recovered.append(hypers.kernel.length_scale)
        median = float(np.median(recovered))
        assert 1.0 <= median <= 4.0

    def test_stationary_point_unchanged(self):
        """Test an already optimal point is left alone"""
        rng = np.random.default_rng(13)
        features, messages = self.sample_topics(rng, 2.0, D=12, noise=0.3)
        start = Hyperparameters(kernel=KernelSpec(length_scale=2.0), tau=0.3)
        optimum, _ = gp.optimize_hypers(start, features, messages, steps=200)
        again, report = gp.optimize_hypers(optimum, features, messages, steps=3)
        trace = report.log_evidence_trace
        assert trace[-1] >= trace[0]
        assert trace[-1] - trace[0] <= 1e-4 * abs(trace[0]) + 1e-6

    def test_parallel_fits_match_sequential(self):
        """Test topic fits are independent of the worker count"""
        rng = np.random.default_rng(14)
        features, messages = self.sample_topics(rng, 2.0, D=15)
        hypers = Hyperparameters(kernel=KernelSpec(length_scale=2.0), tau=0.4)
        sequential = gp.fit_topics(hypers, features, messages, workers=1)
        parallel = gp.fit_topics(hypers, features, messages, workers=3)
        for a, b in zip(sequential, parallel):
            np.testing.assert_array_equal(a.solve_vector, b.solve_vector)

    def test_steps_must_be_positive(self):
        """Test zero steps is rejected"""
        rng = np.random.default_rng(15)
        features, messages = self.sample_topics(rng, 2.0, D=5)
        with pytest.raises(ValueError):
            gp.optimize_hypers(Hyperparameters(kernel=KernelSpec()), features, messages, steps=0)
