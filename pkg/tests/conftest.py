import numpy as np
import pytest

from bayessid.sysmodel import StateSpaceModel, spectral_radius


def make_mimo_model(sigma=0.02):
    """Third-order 2-in 2-out system with a well-damped predictor."""
    A_K = np.array([[0.25, 0.10, 0.00], [0.00, 0.15, -0.12], [0.05, 0.00, 0.05]])
    K = np.array([[0.30, -0.10], [0.12, 0.20], [-0.05, 0.15]])
    C = np.array([[1.0, 0.4, -0.3], [-0.2, 1.0, 0.5]])
    A = A_K + K @ C
    B = np.array([[1.0, 0.2], [-0.3, 0.9], [0.4, -0.5]])
    D = np.array([[0.6, -0.1], [0.2, 0.5]])
    return StateSpaceModel(A, B, C, D, K, sigma * np.eye(2))


def make_deadbeat_siso(sigma=0.0):
    """SISO system whose predictor matrix is nilpotent (A_K^3 = 0), so the
    past-horizon truncation is exact for p >= 3."""
    A = np.array([[0.9, 1.0, 0.0], [-0.26, 0.0, 1.0], [0.024, 0.0, 0.0]])
    K = np.array([[0.9], [-0.26], [0.024]])
    C = np.array([[1.0, 0.0, 0.0]])
    B = np.array([[1.0], [0.5], [-0.3]])
    D = np.array([[0.7]])
    return StateSpaceModel(A, B, C, D, K, np.array([[sigma]]))


def make_siso_model(sigma=0.05):
    """Second-order SISO system with innovations, for sampler tests."""
    A = np.array([[0.6, 0.2], [-0.1, 0.4]])
    B = np.array([[1.0], [0.5]])
    C = np.array([[1.0, -0.5]])
    D = np.array([[0.4]])
    K = np.array([[0.3], [0.1]])
    return StateSpaceModel(A, B, C, D, K, np.array([[sigma]]))


def make_fir_mimo_model():
    """Third-order 2-in 2-out finite-impulse-response benchmark system.

    The shift-form state matrix is nilpotent (memory 3), so a past horizon
    p >= 3 captures the state exactly, and the input/output maps satisfy
    C B b3 = 0 and C A B b3 + C B b2 = 0 (b_k the rows of B), which makes
    the true Markov-parameter matrix orthogonal to the null space of the
    noise-free regressor.  Minimum-norm least squares therefore recovers
    the truth exactly from clean data even though the regressor is rank
    deficient.
    """
    A = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.0, 0.0, 0.0]])
    B = np.array([[1.0, 0.0], [0.8, 0.0], [0.0, 1.2]])
    c1 = np.array([1.0, -0.6])
    C = np.column_stack([c1, (-5.0 / 13.0) * c1, np.zeros(2)])
    D = np.zeros((2, 2))
    K = np.zeros((3, 2))
    return StateSpaceModel(A, B, C, D, K, np.zeros((2, 2)))


@pytest.fixture(scope="session")
def mimo_model():
    model = make_mimo_model()
    assert spectral_radius(model.A) < 1
    assert spectral_radius(model.A_K) < 0.5
    return model


@pytest.fixture(scope="session")
def deadbeat_siso():
    model = make_deadbeat_siso()
    assert np.allclose(np.linalg.matrix_power(model.A_K, 3), 0.0)
    assert spectral_radius(model.A) < 1
    return model


@pytest.fixture(scope="session")
def siso_model():
    return make_siso_model()


def random_block_toeplitz(rng, num_blocks, block_size, scale=0.4):
    """Well-conditioned random BlockToeplitzLower (leading block near I)."""
    from bayessid.structops import BlockToeplitzLower

    fbc = scale * rng.standard_normal((num_blocks * block_size, block_size))
    fbc[:block_size] += np.eye(block_size)
    return BlockToeplitzLower(fbc, block_size, num_blocks)
