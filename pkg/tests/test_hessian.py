import json

import numpy as np
import pytest

from conftest import QuadraticModel
from services.autodiff import ParamVector
from services.errors import ConfigurationError
from services.hessian import (MAX_EIGENPAIRS, HessianReport, analyze, dense_hessian, evaluation_batch,
                              hutchinson_trace, top_eigenpairs)


def origin(model):
    return ParamVector(np.zeros(model.layout.n), model.layout)


class TestTopEigenpairs:
    """Deflated power iteration"""

    def test_diagonal_spectrum(self, diagonal_quadratic, unit_batch):
        """Eigenvalues come back ordered by magnitude, vectors sign-fixed"""
        report = top_eigenpairs(diagonal_quadratic, origin(diagonal_quadratic), unit_batch, k=2,
                                tol=1e-12, max_iters=1000)
        np.testing.assert_allclose(report.eigenvalues, [5.0, -3.0], rtol=1e-6)
        np.testing.assert_allclose(report.eigenvectors[0].values, [1, 0, 0, 0, 0], atol=1e-3)
        np.testing.assert_allclose(report.eigenvectors[1].values, [0, 1, 0, 0, 0], atol=1e-3)
        assert report.all_converged

    def test_orthonormal(self, random_quadratic, unit_batch):
        """Returned vectors are unit length and mutually orthogonal"""
        report = top_eigenpairs(random_quadratic, origin(random_quadratic), unit_batch, k=3,
                                tol=1e-10, max_iters=2000)
        vectors = np.stack([v.values for v in report.eigenvectors])
        np.testing.assert_allclose(np.linalg.norm(vectors, axis=1), 1.0, atol=1e-6)
        gram = vectors @ vectors.T
        assert np.max(np.abs(gram - np.diag(np.diag(gram)))) <= 1e-4

    def test_matches_dense_spectrum(self, random_quadratic, unit_batch):
        """Power iteration finds the largest-magnitude eigenvalue of A"""
        report = top_eigenpairs(random_quadratic, origin(random_quadratic), unit_batch, k=1,
                                tol=1e-12, max_iters=5000)
        eig = np.linalg.eigvalsh(random_quadratic.matrix)
        top = eig[np.argmax(np.abs(eig))]
        np.testing.assert_allclose(report.eigenvalues[0], top, rtol=1e-4)

    def test_mlp_top_two_match_dense(self, tiny_mlp, tiny_batch):
        """On a sigmoid MLP the two largest-magnitude eigenvalues agree with the dense spectrum within 1%"""
        graph, params = tiny_mlp
        report = top_eigenpairs(graph, params, tiny_batch, k=2, tol=1e-12, max_iters=2000)
        h, _ = dense_hessian(graph, params, tiny_batch)
        eig = np.linalg.eigvalsh(h)
        expected = eig[np.argsort(-np.abs(eig), kind='stable')[:2]]
        np.testing.assert_allclose(report.eigenvalues, expected, rtol=0.01)

    def test_rayleigh_quotient(self, tiny_mlp, tiny_batch):
        """The reported value is the Rayleigh quotient of the reported vector"""
        from services.autodiff import hvp
        graph, params = tiny_mlp
        report = top_eigenpairs(graph, params, tiny_batch, k=1, max_iters=300)
        v = report.eigenvectors[0]
        np.testing.assert_allclose(v.dot(hvp(graph, params, tiny_batch, v)), report.eigenvalues[0], rtol=1e-10)

    def test_non_convergence_flagged(self, random_quadratic, unit_batch):
        """Hitting max_iters is reported, not fatal"""
        report = top_eigenpairs(random_quadratic, origin(random_quadratic), unit_batch, k=1, tol=0.0, max_iters=3)
        assert report.converged == [False]
        assert report.iterations == [3]

    @pytest.mark.parametrize('k', [0, MAX_EIGENPAIRS + 1])
    def test_k_range(self, random_quadratic, unit_batch, k):
        """k must lie in [1, 10]"""
        with pytest.raises(ConfigurationError):
            top_eigenpairs(random_quadratic, origin(random_quadratic), unit_batch, k=k)

    def test_k_above_parameter_count(self, unit_batch):
        """k cannot exceed the number of parameters"""
        model = QuadraticModel(np.eye(2))
        with pytest.raises(ConfigurationError):
            top_eigenpairs(model, origin(model), unit_batch, k=3)


class TestHutchinsonTrace:
    """Rademacher trace estimation"""

    def test_diagonal_is_exact(self, diagonal_quadratic, unit_batch):
        """z^T D z = tr(D) for every Rademacher probe"""
        trace, stderr = hutchinson_trace(diagonal_quadratic, origin(diagonal_quadratic), unit_batch, probes=10)
        np.testing.assert_allclose(trace, 5.5, rtol=1e-12)
        assert stderr == pytest.approx(0.0, abs=1e-12)

    def test_unbiased(self, random_quadratic, unit_batch):
        """Estimate lies within a few standard errors of tr(A)"""
        trace, stderr = hutchinson_trace(random_quadratic, origin(random_quadratic), unit_batch, probes=2000, seed=1)
        assert abs(trace - np.trace(random_quadratic.matrix)) <= 5 * stderr

    def test_single_probe_has_no_stderr(self, random_quadratic, unit_batch):
        """Standard error is undefined for one probe"""
        _, stderr = hutchinson_trace(random_quadratic, origin(random_quadratic), unit_batch, probes=1)
        assert np.isnan(stderr)

    def test_workers_do_not_change_the_estimate(self, random_quadratic, unit_batch):
        """Parallel probes give the same mean"""
        params = origin(random_quadratic)
        serial = hutchinson_trace(random_quadratic, params, unit_batch, probes=40, seed=2)
        parallel = hutchinson_trace(random_quadratic, params, unit_batch, probes=40, seed=2, workers=4)
        np.testing.assert_allclose(serial, parallel, rtol=1e-12)

    def test_probes_positive(self, random_quadratic, unit_batch):
        """At least one probe"""
        with pytest.raises(ConfigurationError):
            hutchinson_trace(random_quadratic, origin(random_quadratic), unit_batch, probes=0)


class TestDenseHessian:
    """Column-by-column assembly"""

    def test_quadratic(self, random_quadratic, unit_batch):
        """The dense Hessian of 0.5 theta^T A theta is A"""
        h, asymmetry = dense_hessian(random_quadratic, origin(random_quadratic), unit_batch)
        np.testing.assert_allclose(h, random_quadratic.matrix, atol=1e-12)
        assert asymmetry <= 1e-12

    def test_trace_agrees_with_hutchinson(self, tiny_mlp, tiny_batch):
        """Dense trace lies within the Hutchinson error bars"""
        graph, params = tiny_mlp
        h, asymmetry = dense_hessian(graph, params, tiny_batch)
        assert asymmetry < 1e-8
        trace, stderr = hutchinson_trace(graph, params, tiny_batch, probes=400, seed=3)
        assert abs(trace - np.trace(h)) <= 5 * stderr + 1e-9

    def test_limit(self, random_quadratic, unit_batch):
        """Large models are refused"""
        with pytest.raises(ConfigurationError):
            dense_hessian(random_quadratic, origin(random_quadratic), unit_batch, limit=3)


class TestEvaluationBatch:
    """Fixed seeded Hessian batches"""

    def test_seeded_and_sorted(self, tiny_dataset):
        """Same seed, same samples"""
        a = evaluation_batch(tiny_dataset, 5, seed=1)
        b = evaluation_batch(tiny_dataset, 5, seed=1)
        np.testing.assert_array_equal(a.inputs, b.inputs)
        assert len(a) == 5

    def test_small_split_used_whole(self, tiny_dataset):
        """Requesting more samples than exist returns the whole test split"""
        batch = evaluation_batch(tiny_dataset, 1000)
        np.testing.assert_array_equal(batch.inputs, tiny_dataset.split('test').inputs)


class TestAnalyze:
    """Eigenpairs plus trace"""

    def test_report(self, diagonal_quadratic, unit_batch):
        """The combined report carries spectrum, trace and provenance"""
        report = analyze(diagonal_quadratic, origin(diagonal_quadratic), unit_batch, k=2, probes=8, batch_seed=4,
                         tol=1e-12, max_iters=1000)
        assert report.k == 2
        assert report.probes == 8
        np.testing.assert_allclose(report.trace, 5.5)
        payload = report.to_dict()
        assert payload['batch_seed'] == 4
        assert payload['eigenvalues'] == pytest.approx([5.0, -3.0], rel=1e-6)

    def test_nan_serialized_as_null(self):
        """Undefined standard errors become null in JSON"""
        report = HessianReport(eigenvalues=[1.0], trace=2.0, stderr=float('nan'), probes=1)
        assert json.loads(json.dumps(report.to_dict()))['stderr'] is None
