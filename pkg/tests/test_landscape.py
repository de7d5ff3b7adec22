import numpy as np
import pytest

from models import evaluate
from services.autodiff import Layout, ParamVector
from services.errors import ConfigurationError, NumericError
from services.hessian import top_eigenpairs
from services.landscape import Direction, filter_normalize, make_direction, make_direction_pair, scan, steps


class FragileModel:
    """Quadratic bowl that fails numerically for theta_0 > 0.5"""

    def __init__(self):
        self.layout = Layout.from_shapes([('theta', (2,))])

    def build(self, segments, inputs, targets):
        from services import autodiff as ad
        theta = segments['theta']
        if theta.data[0] > 0.5:
            raise NumericError("overflow")
        return ad.total(ad.mul(theta, theta)), None


class TestSteps:
    """Scan coordinates"""

    def test_exact_endpoints(self):
        """nu_min and nu_max are hit exactly"""
        np.testing.assert_array_equal(steps(-1.0, 1.0, 5), [-1.0, -0.5, 0.0, 0.5, 1.0])
        values = steps(-0.3, 0.7, 41)
        assert values[0] == -0.3 and values[-1] == 0.7

    def test_invalid(self):
        """At least two steps over a non-empty interval"""
        with pytest.raises(ConfigurationError):
            steps(-1.0, 1.0, 1)
        with pytest.raises(ConfigurationError):
            steps(1.0, 1.0, 5)


class TestFilterNormalize:
    """Filter-wise direction rescaling"""

    def test_filter_norms_match(self, tiny_mlp):
        """Each direction filter has the norm of the matching parameter filter"""
        _, params = tiny_mlp
        raw = np.random.default_rng(0).normal(size=len(params))
        direction, dead = filter_normalize(raw, params)
        assert dead == 0
        for name in ('fc1.weight', 'fc2.weight'):
            np.testing.assert_allclose(np.linalg.norm(direction.segment(name), axis=1),
                                       np.linalg.norm(params.segment(name), axis=1))

    def test_biases_get_zero_direction(self, tiny_mlp):
        """Bias segments are not perturbed"""
        _, params = tiny_mlp
        direction, _ = filter_normalize(np.ones(len(params)), params)
        assert not np.any(direction.segment('fc1.bias'))
        assert not np.any(direction.segment('fc2.bias'))

    def test_dead_filter(self, tiny_mlp):
        """A zero-norm filter gets a zero direction and is counted"""
        _, params = tiny_mlp
        weight = params.segment('fc1.weight').copy()
        weight[1] = 0.0
        params = params.replace_segment('fc1.weight', weight)
        direction, dead = filter_normalize(np.random.default_rng(1).normal(size=len(params)), params)
        assert dead == 1
        assert not np.any(direction.segment('fc1.weight')[1])


class TestMakeDirection:
    """Random and eigenvector directions"""

    def test_random_is_seeded(self, tiny_mlp):
        """The same seed gives the same direction"""
        graph, params = tiny_mlp
        a = make_direction('random', graph, params, seed=3)
        b = make_direction('random', graph, params, seed=3)
        c = make_direction('random', graph, params, seed=4)
        assert a.vector.equals(b.vector)
        assert not a.vector.equals(c.vector)

    def test_eigen_needs_report(self, tiny_mlp):
        """Eigen directions require enough eigenpairs"""
        graph, params = tiny_mlp
        with pytest.raises(ConfigurationError):
            make_direction('eigen', graph, params)

    def test_eigen_index_range(self, tiny_mlp, tiny_batch):
        """Indices beyond k are rejected"""
        graph, params = tiny_mlp
        report = top_eigenpairs(graph, params, tiny_batch, k=1, max_iters=20)
        assert make_direction('eigen', graph, params, index=1, report=report).vector is report.eigenvectors[0]
        with pytest.raises(ConfigurationError):
            make_direction('eigen', graph, params, index=2, report=report)

    def test_unknown_kind(self, tiny_mlp):
        """Only random and eigen directions exist"""
        graph, params = tiny_mlp
        with pytest.raises(ConfigurationError):
            make_direction('pca', graph, params)

    def test_pair_is_orthogonal(self, tiny_mlp):
        """Random 2D directions are orthogonal"""
        graph, params = tiny_mlp
        sigma, eta = make_direction_pair('random', graph, params, seed=2)
        scale = sigma.vector.norm() * eta.vector.norm()
        assert abs(sigma.vector.dot(eta.vector)) <= 1e-10 * scale


class TestScan:
    """Loss evaluation on the slice grid"""

    def test_centre_is_the_trained_loss(self, tiny_mlp, tiny_dataset):
        """alpha = beta = 0 reproduces L(theta) exactly"""
        graph, params = tiny_mlp
        data = tiny_dataset.split('test')
        sigma = make_direction('random', graph, params, seed=0)
        grid = scan(graph, params, data, sigma, count=5)
        assert grid.losses.shape == (5, 1)
        assert grid.losses[2, 0] == evaluate(graph, params, data)
        assert grid.dims == 1

    def test_eigen_curvature(self, tiny_mlp, tiny_dataset):
        """The second difference along the top eigenvector recovers lambda_1 within 5%"""
        graph, params = tiny_mlp
        batch = tiny_dataset.split('train').as_batch()
        report = top_eigenpairs(graph, params, batch, k=1, tol=1e-12, max_iters=2000)
        h = 1e-3
        grid = scan(graph, params, batch, make_direction('eigen', graph, params, report=report),
                    nu_min=-h, nu_max=h, count=3)
        left, centre, right = grid.slice_1d()
        np.testing.assert_allclose((left - 2 * centre + right) / h ** 2, report.eigenvalues[0], rtol=0.05)

    def test_parameters_untouched(self, tiny_mlp, tiny_dataset):
        """A scan leaves theta and its loss bit-identical"""
        graph, params = tiny_mlp
        data = tiny_dataset.split('test')
        values, before = params.values.copy(), evaluate(graph, params, data)
        sigma, eta = make_direction_pair('random', graph, params, seed=3)
        scan(graph, params, data, sigma, eta, count=3)
        np.testing.assert_array_equal(params.values, values)
        assert evaluate(graph, params, data) == before

    def test_quadratic_profile(self, diagonal_quadratic, unit_batch):
        """Along e_0 the loss is 0.5 * 5 * alpha^2"""
        layout = diagonal_quadratic.layout
        params = ParamVector(np.zeros(layout.n), layout)
        direction = Direction(ParamVector(np.eye(layout.n)[0], layout), 'eigen', index=1)
        grid = scan(diagonal_quadratic, params, unit_batch, direction, nu_min=-2.0, nu_max=2.0, count=9)
        np.testing.assert_allclose(grid.slice_1d(), 2.5 * grid.alphas ** 2, rtol=1e-12)

    def test_two_dimensional(self, tiny_mlp, tiny_dataset):
        """2D grids have count x count cells and one CSV row each"""
        graph, params = tiny_mlp
        sigma, eta = make_direction_pair('random', graph, params, seed=1)
        grid = scan(graph, params, tiny_dataset.split('test'), sigma, eta, count=4)
        assert grid.losses.shape == (4, 4)
        assert len(grid.rows()) == 16
        assert grid.dims == 2
        assert grid.theta_digest == params.digest()

    def test_failed_cells_are_flagged(self, unit_batch):
        """Numeric failures become NaN cells instead of aborting"""
        model = FragileModel()
        params = ParamVector(np.zeros(2), model.layout)
        direction = Direction(ParamVector([1.0, 0.0], model.layout), 'random')
        grid = scan(model, params, unit_batch, direction, count=5)
        assert grid.flagged == [(4, 0)]
        assert np.isnan(grid.losses[4, 0])
        assert np.all(np.isfinite(grid.losses[:4, 0]))

    def test_workers_match_serial(self, tiny_mlp, tiny_dataset):
        """Parallel evaluation gives the same grid"""
        graph, params = tiny_mlp
        sigma = make_direction('random', graph, params, seed=5)
        data = tiny_dataset.split('test')
        serial = scan(graph, params, data, sigma, count=7)
        parallel = scan(graph, params, data, sigma, count=7, workers=3)
        np.testing.assert_array_equal(serial.losses, parallel.losses)
