"""Shared fixtures: quadratic objectives, a tiny MLP and seeded datasets"""
import numpy as np
import pytest

from models import Dataset, LayerSpec, ModelSpec, build_model
from services import autodiff as ad
from services.autodiff import Batch, Layout

TINY_MLP = ModelSpec(
    name='tiny-mlp',
    layers=(
        LayerSpec('dense', 'fc1', 3),
        LayerSpec('sigmoid'),
        LayerSpec('dense', 'fc2', 2),
    ),
    input_shape=(4,),
    task='regress',
)

LINEAR = ModelSpec(name='linear', layers=(LayerSpec('dense', 'fc', 3),), input_shape=(4,))

TARGET_MAP = np.array([[1.0, -0.5, 0.25, 0.0],
                       [0.0, 0.5, -1.0, 0.75]])


class QuadraticModel:
    """loss = 0.5 theta^T A theta over a single segment; the data is ignored"""

    def __init__(self, matrix):
        self.matrix = np.asarray(matrix, dtype=float)
        self.layout = Layout.from_shapes([('theta', (self.matrix.shape[0],))])
        self.name = 'quadratic'

    def build(self, segments, inputs, targets):
        theta = ad.reshape(segments['theta'], (1, self.layout.n))
        quad = ad.total(ad.mul(ad.matmul(theta, self.matrix), theta))
        return ad.scale(quad, 0.5), None


class RingModel:
    """loss = (|theta|^2 - 1)^2; every point of the unit circle is a minimum"""

    def __init__(self):
        self.layout = Layout.from_shapes([('theta', (2,))])

    def build(self, segments, inputs, targets):
        theta = segments['theta']
        radius = ad.sub(ad.total(ad.mul(theta, theta)), 1.0)
        return ad.mul(radius, radius), None


class DoubleWellModel:
    """loss = (x^2 - 1)^2 + y^2; basins at (-1, 0) and (1, 0), saddle of height 1 at the origin"""

    def __init__(self):
        self.layout = Layout.from_shapes([('theta', (2,))])

    @staticmethod
    def surface(x, y):
        return (x ** 2 - 1.0) ** 2 + y ** 2

    def build(self, segments, inputs, targets):
        squares = ad.mul(segments['theta'], segments['theta'])
        well = ad.sub(ad.total(ad.mul(squares, np.array([1.0, 0.0]))), 1.0)
        return ad.add(ad.mul(well, well), ad.total(ad.mul(squares, np.array([0.0, 1.0])))), None


def make_dataset(size: int = 40, n_test: int = 12, seed: int = 0, outputs: int = 2) -> Dataset:
    rng = np.random.default_rng(seed)
    inputs = rng.uniform(0.0, 1.0, size=(size, 4))
    targets = inputs @ TARGET_MAP[:outputs].T if outputs <= 2 else rng.normal(size=(size, outputs))
    tags = np.array(['train'] * (size - n_test) + ['test'] * n_test)
    return Dataset(inputs=inputs, targets=targets, split_tags=tags, seed=seed, task='regress', size=size)


@pytest.fixture
def unit_batch():
    return Batch(np.zeros((1, 1)), np.zeros((1, 1)))


@pytest.fixture
def diagonal_quadratic():
    return QuadraticModel(np.diag([5.0, -3.0, 2.0, 1.0, 0.5]))


@pytest.fixture
def random_quadratic():
    rng = np.random.default_rng(7)
    a = rng.normal(size=(6, 6))
    return QuadraticModel((a + a.T) / 2.0)


@pytest.fixture
def ring_model():
    return RingModel()


@pytest.fixture
def tiny_dataset():
    return make_dataset()


@pytest.fixture
def tiny_mlp():
    return build_model(TINY_MLP, 0)


@pytest.fixture
def linear_model():
    return build_model(LINEAR, 3)


@pytest.fixture
def tiny_batch(tiny_dataset):
    return tiny_dataset.split('train').as_batch()
