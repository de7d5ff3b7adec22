import numpy as np
import pytest

from conftest import TINY_MLP
from models import build_model
from services.cka import CkaMatrix, cka, cka_grid, cka_m_sweep, cka_noise_sweep, cov, output_matrix, sample_ids
from services.errors import ConfigurationError


@pytest.fixture
def outputs():
    return np.random.default_rng(0).normal(size=(12, 3))


class TestCov:
    """Centered HSIC-style covariance"""

    def test_matches_explicit_centering(self, outputs):
        """Equals (m-1)^-2 tr(X X^T H Y Y^T H)"""
        other = np.random.default_rng(1).normal(size=(12, 2))
        m = outputs.shape[0]
        h = np.eye(m) - np.ones((m, m)) / m
        expected = np.trace(outputs @ outputs.T @ h @ other @ other.T @ h) / (m - 1) ** 2
        np.testing.assert_allclose(cov(outputs, other), expected, rtol=1e-10)

    def test_vector_inputs(self):
        """One-dimensional outputs are treated as single columns"""
        x = np.array([1.0, 2.0, 4.0])
        np.testing.assert_allclose(cov(x, x), cov(x[:, None], x[:, None]))

    def test_too_few_samples(self):
        """At least two samples"""
        with pytest.raises(ConfigurationError):
            cov(np.ones((1, 2)), np.ones((1, 2)))


class TestCka:
    """Linear CKA"""

    def test_self_similarity(self, outputs):
        """CKA(F, F) = 1"""
        np.testing.assert_allclose(cka(outputs, outputs), 1.0)

    def test_invariances(self, outputs):
        """Isotropic scaling, translation and rotation leave CKA at 1"""
        q, _ = np.linalg.qr(np.random.default_rng(2).normal(size=(3, 3)))
        np.testing.assert_allclose(cka(outputs, 2.5 * outputs + 3.0), 1.0)
        np.testing.assert_allclose(cka(outputs, outputs @ q), 1.0)

    def test_symmetric_and_bounded(self, outputs):
        """CKA(F, G) = CKA(G, F) and lies in [0, 1]"""
        other = np.random.default_rng(3).normal(size=(12, 5))
        value = cka(outputs, other)
        np.testing.assert_allclose(value, cka(other, outputs))
        assert 0.0 <= value <= 1.0

    def test_constant_outputs_undefined(self, outputs):
        """Constant rows give no value rather than zero"""
        assert cka(np.full((12, 3), 0.7), outputs) is None
        assert cka(outputs, np.zeros((12, 3))) is None

    def test_small_but_varying_outputs_are_defined(self, outputs):
        """Tiny magnitudes are not mistaken for constant outputs"""
        np.testing.assert_allclose(cka(1e-9 * outputs, outputs), 1.0)

    def test_row_permutation(self, outputs):
        """Permuting the shared samples of both matrices leaves CKA unchanged"""
        other = np.random.default_rng(4).normal(size=(12, 2))
        perm = np.random.default_rng(5).permutation(12)
        np.testing.assert_allclose(cka(outputs[perm], other[perm]), cka(outputs, other), atol=1e-8)

    def test_m_mismatch(self, outputs):
        """Both matrices must hold the same samples"""
        with pytest.raises(ConfigurationError):
            cka(outputs, outputs[:10])


class TestSampleIds:
    """Shared sample selection"""

    def test_sorted_distinct(self, tiny_dataset):
        """Ids are sorted, distinct and seeded"""
        ids = sample_ids(tiny_dataset, 6, seed=2)
        assert list(ids) == sorted(set(ids))
        assert ids == sample_ids(tiny_dataset, 6, seed=2)

    @pytest.mark.parametrize('m', [1, 13])
    def test_range(self, tiny_dataset, m):
        """m must lie in [2, size of the test split]"""
        with pytest.raises(ConfigurationError):
            sample_ids(tiny_dataset, m)


class TestCkaGrid:
    """Pairwise CKA over trained instances"""

    @pytest.fixture
    def models(self):
        return [build_model(TINY_MLP, seed) for seed in range(3)]

    def test_pairwise(self, models, tiny_dataset):
        """Unit diagonal, symmetric table"""
        result = cka_grid(models, tiny_dataset, m=8)
        table = np.array(result.pairwise, dtype=float)
        np.testing.assert_allclose(np.diag(table), 1.0)
        np.testing.assert_allclose(table, table.T)
        assert result.m == 8

    def test_identical_models(self, tiny_dataset):
        """Two copies of one model are perfectly similar"""
        model = build_model(TINY_MLP, 0)
        result = cka_grid([model, model], tiny_dataset, m=6)
        np.testing.assert_allclose(result.mean_offdiag, 1.0)

    def test_needs_two_models(self, models, tiny_dataset):
        """A single model has nothing to compare with"""
        with pytest.raises(ConfigurationError):
            cka_grid(models[:1], tiny_dataset)

    def test_workers_match_serial(self, models, tiny_dataset):
        """Parallel output collection gives the same table"""
        serial = cka_grid(models, tiny_dataset, m=8, seed=1)
        parallel = cka_grid(models, tiny_dataset, m=8, seed=1, workers=3)
        assert serial.pairwise == parallel.pairwise

    def test_noise_perturbs_outputs(self, models, tiny_dataset):
        """Input noise changes the output matrix"""
        graph, params = models[0]
        ids = sample_ids(tiny_dataset, 6)
        clean = output_matrix(graph, params, tiny_dataset, ids)
        noisy = output_matrix(graph, params, tiny_dataset, ids, noise=0.2)
        assert clean.values.shape == (6, 2)
        assert not np.allclose(clean.values, noisy.values)

    def test_sweeps(self, models, tiny_dataset):
        """One matrix per sweep setting; sigma 0 means clean inputs"""
        by_m = cka_m_sweep(models, tiny_dataset, [4, 8])
        by_noise = cka_noise_sweep(models, tiny_dataset, [0.0, 0.1], m=6)
        assert [mat.m for mat in by_m] == [4, 8]
        assert [mat.noise for mat in by_noise] == [None, 0.1]

    def test_undefined_entries_excluded_from_mean(self):
        """The off-diagonal mean skips undefined entries"""
        matrix = CkaMatrix([[1.0, None, 0.5], [None, None, None], [0.5, None, 1.0]], m=4)
        assert matrix.mean_offdiag == 0.5
        assert CkaMatrix([[None, None], [None, None]], m=4).mean_offdiag is None
