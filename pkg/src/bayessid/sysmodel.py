"""State-space models in innovation form and their structured matrices.

Implements simulation of ``x[k+1] = A x[k] + B u[k] + K e[k]``,
``y[k] = C x[k] + D u[k] + e[k]``, the equivalent one-step-ahead predictor
driven by ``z[k] = [u[k]; y[k]]`` through ``A_K = A - K C``, and the
extended observability / block Toeplitz / Markov-parameter matrices built
from a known model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .structops import lower_block_toeplitz_dense, spd_sqrt

STABILITY_TOL = 1e-9


def spectral_radius(M):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.size == 0:
        return 0.0
    return float(np.max(np.abs(np.linalg.eigvals(M))))


@dataclass
class TimeSeries:
    """Paired input/output sequences, one sample per row."""

    u: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        u = np.atleast_2d(np.asarray(self.u, dtype=float))
        y = np.atleast_2d(np.asarray(self.y, dtype=float))
        if np.asarray(self.u).ndim == 1:
            u = np.asarray(self.u, dtype=float)[:, None]
        if np.asarray(self.y).ndim == 1:
            y = np.asarray(self.y, dtype=float)[:, None]
        if u.shape[0] != y.shape[0]:
            raise ValueError(f"u has {u.shape[0]} samples but y has {y.shape[0]}")
        if not (np.isfinite(u).all() and np.isfinite(y).all()):
            raise ValueError("time series contains non-finite entries")
        self.u = u
        self.y = y

    @property
    def length(self):
        return self.u.shape[0]

    @property
    def n_i(self):
        return self.u.shape[1]

    @property
    def n_o(self):
        return self.y.shape[1]

    def segment(self, start, stop):
        return TimeSeries(self.u[start:stop].copy(), self.y[start:stop].copy())


@dataclass
class StateSpaceModel:
    """Innovation-form model ``(A, B, C, D, K, Sigma)``.

    ``Sigma`` is the innovation covariance (symmetric PSD).  Construction
    checks dimensional consistency and that the predictor matrix
    ``A_K = A - K C`` has spectral radius below one; pass
    ``allow_unstable_predictor=True`` to store an unstable estimate anyway.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    K: np.ndarray
    Sigma: np.ndarray
    allow_unstable_predictor: bool = False

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.B = np.atleast_2d(np.asarray(self.B, dtype=float))
        self.C = np.atleast_2d(np.asarray(self.C, dtype=float))
        self.D = np.atleast_2d(np.asarray(self.D, dtype=float))
        self.K = np.atleast_2d(np.asarray(self.K, dtype=float))
        self.Sigma = np.atleast_2d(np.asarray(self.Sigma, dtype=float))
        n_x = self.A.shape[0]
        n_o, n_i = self.D.shape
        if self.A.shape != (n_x, n_x):
            raise ValueError(f"A must be square, got {self.A.shape}")
        checks = {
            "B": (self.B.shape, (n_x, n_i)),
            "C": (self.C.shape, (n_o, n_x)),
            "K": (self.K.shape, (n_x, n_o)),
            "Sigma": (self.Sigma.shape, (n_o, n_o)),
        }
        # empty-state models store 0-sized arrays with consistent trailing dims
        for name, (got, want) in checks.items():
            if got != want and not (0 in got and 0 in want and got == want):
                raise ValueError(f"{name} has shape {got}, expected {want}")
        sig_eigs = np.linalg.eigvalsh(0.5 * (self.Sigma + self.Sigma.T)) if n_o else np.zeros(0)
        if sig_eigs.size and sig_eigs.min() < -1e-10 * max(1.0, abs(sig_eigs).max()):
            raise ValueError("Sigma is not positive semidefinite")
        if not self.allow_unstable_predictor and n_x:
            rho = spectral_radius(self.A_K)
            if rho >= 1.0 - STABILITY_TOL:
                raise ValueError(
                    f"predictor matrix A - K C has spectral radius {rho:.6f} >= 1"
                )

    @property
    def n_x(self):
        return self.A.shape[0]

    @property
    def n_i(self):
        return self.D.shape[1]

    @property
    def n_o(self):
        return self.D.shape[0]

    @property
    def A_K(self):
        return self.A - self.K @ self.C

    @property
    def B_K(self):
        """Predictor input matrix ``[B - K D, K]`` acting on ``z = [u; y]``."""
        return np.hstack([self.B - self.K @ self.D, self.K])


def simulate(model, u, seed=None, x0=None, return_innovations=False):
    """Simulate the innovation-form model driven by ``u``.

    Innovations are ``e[k] ~ N(0, Sigma)`` drawn deterministically from
    ``seed``; ``Sigma = 0`` gives a noise-free run.
    """
    u = np.atleast_2d(np.asarray(u, dtype=float))
    if np.asarray(u).ndim == 1:
        u = np.asarray(u, dtype=float)[:, None]
    if u.shape[1] != model.n_i:
        raise ValueError(f"input has {u.shape[1]} channels, model expects {model.n_i}")
    T = u.shape[0]
    rng = np.random.default_rng(seed)
    S = spd_sqrt(model.Sigma)
    e = rng.standard_normal((T, model.n_o)) @ S
    x = np.zeros(model.n_x) if x0 is None else np.asarray(x0, dtype=float).copy()
    y = np.empty((T, model.n_o))
    A, B, C, D, K = model.A, model.B, model.C, model.D, model.K
    for k in range(T):
        y[k] = C @ x + D @ u[k] + e[k]
        x = A @ x + B @ u[k] + K @ e[k]
    ts = TimeSeries(u.copy(), y)
    if return_innovations:
        return ts, e
    return ts


def predict_one_step(model, data, x0=None, allow_unstable=False):
    """One-step-ahead predictions ``yhat[k|k-1]`` for ``data``.

    Runs ``xhat[k+1] = A_K xhat[k] + B_K z[k]`` with ``z[k] = [u[k]; y[k]]``
    and returns ``yhat[k] = C xhat[k] + D u[k]``.
    """
    if model.n_x and not allow_unstable:
        rho = spectral_radius(model.A_K)
        if rho >= 1.0 - STABILITY_TOL:
            raise ValueError(
                f"one-step predictor is unstable (spectral radius {rho:.6f})"
            )
    AK = model.A_K
    BK = model.B_K
    C, D = model.C, model.D
    x = np.zeros(model.n_x) if x0 is None else np.asarray(x0, dtype=float).copy()
    T = data.length
    yhat = np.empty((T, model.n_o))
    for k in range(T):
        yhat[k] = C @ x + D @ data.u[k]
        z = np.concatenate([data.u[k], data.y[k]])
        x = AK @ x + BK @ z
    return yhat


def extended_observability(model, f):
    """Stack ``[C; C A; ...; C A^(f-1)]``."""
    if f < 1:
        raise ValueError(f"horizon must be >= 1, got {f}")
    blocks = [model.C]
    for _ in range(f - 1):
        blocks.append(blocks[-1] @ model.A)
    return np.vstack(blocks)


def toeplitz_Hf(model, f):
    """Block lower triangular Toeplitz input-to-output map with first block
    column ``[D; C B; C A B; ...]``."""
    if f < 1:
        raise ValueError(f"horizon must be >= 1, got {f}")
    blocks = [model.D]
    CA = model.C
    for _ in range(f - 1):
        blocks.append(CA @ model.B)
        CA = CA @ model.A
    return lower_block_toeplitz_dense(blocks)


def toeplitz_Gf(model, f):
    """Block lower triangular Toeplitz innovation-to-output map, including the
    right factor ``kron(I_f, Sigma^(1/2))``."""
    if f < 1:
        raise ValueError(f"horizon must be >= 1, got {f}")
    S = spd_sqrt(model.Sigma)
    blocks = [np.eye(model.n_o) @ S]
    CA = model.C
    for _ in range(f - 1):
        blocks.append(CA @ model.K @ S)
        CA = CA @ model.A
    return lower_block_toeplitz_dense(blocks)


def markov_Hfp(model, f, p):
    """Markov-parameter matrix mapping past data to future outputs.

    Returns ``(Hfp, Lp1, Lp2)`` where ``Hfp = [Gamma_f @ Lp1, Gamma_f @ Lp2]``
    and ``Lp_i = [A_K^(p-1) B_K_i, ..., B_K_i]`` with ``B_K_1 = B - K D`` and
    ``B_K_2 = K``.  Column ordering matches ``Zp = [Up; Yp]``.
    """
    if f < 1 or p < 1:
        raise ValueError(f"horizons must be >= 1, got f={f}, p={p}")
    Gamma = extended_observability(model, f)
    AK = model.A_K
    B1 = model.B - model.K @ model.D
    B2 = model.K

    def controllability(Bmat):
        cols = [Bmat]
        for _ in range(p - 1):
            cols.insert(0, AK @ cols[0])
        return np.hstack(cols) if cols else np.zeros((model.n_x, 0))

    Lp1 = controllability(B1)
    Lp2 = controllability(B2)
    Hfp = np.hstack([Gamma @ Lp1, Gamma @ Lp2])
    return Hfp, Lp1, Lp2
