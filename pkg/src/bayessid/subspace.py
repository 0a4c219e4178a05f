"""Classical subspace pipeline: Hankel dataset assembly, the least-squares
Markov-parameter estimate, weighted SVD truncation and state-space recovery.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .structops import build_block_hankel, truncated_svd
from .sysmodel import StateSpaceModel, TimeSeries

PINV_RCOND = 1e-10


@dataclass
class HankelDataset:
    """Data blocks for horizons ``(f, p)`` with ``j`` columns.

    ``Yf``/``Uf`` start at sample ``p + n`` in column ``n`` while ``Up``/``Yp``
    start at sample ``n``, so past and future are time aligned and
    ``Zp = [Up; Yp]``.  The raw series is kept for secondary regressions.
    """

    Yf: np.ndarray
    Uf: np.ndarray
    Up: np.ndarray
    Yp: np.ndarray
    Zp: np.ndarray
    f: int
    p: int
    j: int
    n_i: int
    n_o: int
    series: TimeSeries
    _zp_pinv: np.ndarray | None = field(default=None, repr=False)

    @property
    def zp_pinv(self):
        """Minimum-norm pseudo-inverse of ``Zp`` (cached)."""
        if self._zp_pinv is None:
            self._zp_pinv = np.linalg.pinv(self.Zp, rcond=PINV_RCOND)
        return self._zp_pinv


def assemble(data, f, p):
    """Arrange a time series into the past/future Hankel blocks.

    Requires at least ``f + p`` samples and produces ``j = T - f - p + 1``
    columns.
    """
    T = data.length
    if T < f + p:
        raise ValueError(
            f"time series too short: horizons f={f}, p={p} require at least "
            f"{f + p} samples, got {T}"
        )
    j = T - f - p + 1
    Yf = build_block_hankel(data.y, f, j, start_offset=p)
    Uf = build_block_hankel(data.u, f, j, start_offset=p)
    Up = build_block_hankel(data.u, p, j, start_offset=0)
    Yp = build_block_hankel(data.y, p, j, start_offset=0)
    Zp = np.vstack([Up, Yp])
    return HankelDataset(Yf, Uf, Up, Yp, Zp, f, p, j, data.n_i, data.n_o, data)


@dataclass
class LsEstimate:
    """Least-squares Markov-parameter estimate with a rank flag."""

    Hfp: np.ndarray
    Hf: np.ndarray
    regressor_rank: int
    rank_deficient: bool


def ls_markov(ds):
    """Least-squares estimate of ``(Hfp, Hf)`` from ``Yf`` regressed on
    ``[Up; Yp; Uf]``.

    Falls back to the minimum-norm solution when the stacked regressor is
    rank deficient, flagged in the result.
    """
    R = np.vstack([ds.Up, ds.Yp, ds.Uf])
    sol, _, rank, _ = np.linalg.lstsq(R.T, ds.Yf.T, rcond=PINV_RCOND)
    X = sol.T
    m = ds.p * (ds.n_i + ds.n_o)
    return LsEstimate(
        Hfp=X[:, :m],
        Hf=X[:, m:],
        regressor_rank=int(rank),
        rank_deficient=bool(rank < R.shape[0]),
    )


@dataclass
class WeightPair:
    """Row weight ``W1`` (nonsingular) and right weight ``W2``.

    ``W2`` is the matrix the estimate is right-multiplied by before the SVD
    (``Zp`` in the standard scheme); ``None`` means identity.
    """

    W1: np.ndarray
    W2: np.ndarray | None = None


def weighted_truncate(Hfp, weights, r):
    """Rank-``r`` estimate from the truncated SVD of ``W1 @ Hfp @ W2``.

    Returns ``W1^{-1} U_r S_r V_r^T W2^+`` where ``W2^+`` is the minimum-norm
    pseudo-inverse of the right weight.
    """
    W1 = np.asarray(weights.W1, dtype=float)
    A = W1 @ Hfp
    if weights.W2 is not None:
        A = A @ weights.W2
    U, s, Vt = truncated_svd(A, r)
    core = np.linalg.solve(W1, U * s) @ Vt
    if weights.W2 is not None:
        core = core @ np.linalg.pinv(weights.W2, rcond=PINV_RCOND)
    return core


def truncation_factors(Hfp, ds, r, W1=None):
    """Rank-``r`` factors ``(Gamma, Lp)`` of an ``Hfp`` estimate with
    ``Gamma @ Lp @ Zp`` equal to the truncated SVD of ``W1 @ Hfp @ Zp``.

    This is the canonical splitting used both for prior initialization and
    for model recovery: ``Gamma = W1^{-1} U_r S_r^(1/2)``,
    ``Lp = S_r^(1/2) V_r^T Zp^+``.
    """
    A = Hfp @ ds.Zp
    if W1 is not None:
        A = W1 @ A
    U, s, Vt = truncated_svd(A, r)
    sq = np.sqrt(s)
    Gamma = U * sq
    if W1 is not None:
        Gamma = np.linalg.solve(W1, Gamma)
    Lp = (sq[:, None] * Vt) @ ds.zp_pinv
    return Gamma, Lp, s


def default_weights(ds, Sigma_y):
    """Standard weighting: ``W1 = kron(I_f, diag(1/sqrt(diag(Sigma_y))))``
    and ``W2 = Zp``."""
    Sigma_y = np.asarray(Sigma_y, dtype=float)
    d = np.diag(Sigma_y) if Sigma_y.ndim == 2 else Sigma_y
    if np.any(d <= 0):
        raise ValueError("output covariance has nonpositive diagonal entries")
    lam = np.diag(1.0 / np.sqrt(d))
    return WeightPair(W1=np.kron(np.eye(ds.f), lam), W2=ds.Zp)


def row_length(N, n_o, n_i):
    """Hankel row length ``min(15, N // (10 (n_o + n_i)))``, clamped to 2."""
    i = min(15, N // (10 * (n_o + n_i)))
    if i < 2:
        warnings.warn(
            f"row length {i} from N={N}, n_o={n_o}, n_i={n_i} clamped to 2",
            RuntimeWarning,
            stacklevel=2,
        )
        i = 2
    return int(i)


def select_rank(singular_values, threshold=1e-3):
    """Largest rank whose singular value exceeds ``threshold`` times the top one."""
    s = np.asarray(singular_values, dtype=float)
    if s.size == 0 or s[0] <= 0:
        return 0
    return int(np.sum(s > threshold * s[0]))


def recover_system(Gamma, Lp, Hf, ds, n_x):
    """State-space matrices from estimated ``(Gamma, Lp, Hf)`` factors.

    ``C`` is the first block row of ``Gamma``; ``A`` solves the shift
    relation between consecutive block rows; ``B - K D`` and ``K`` are the
    last block columns of the two halves of ``Lp``; ``D`` comes from a
    secondary least squares of the one-step prediction residual on ``u``
    (falling back to the leading block of ``Hf`` if that regression is rank
    deficient).  The result is returned up to state-coordinate similarity and
    may have an unstable predictor, which :func:`~bayessid.sysmodel.predict_one_step`
    rejects by default.
    """
    n_o, n_i, f, p = ds.n_o, ds.n_i, ds.f, ds.p
    u, y = ds.series.u, ds.series.y
    if n_x == 0:
        sol, _, _, _ = np.linalg.lstsq(u, y, rcond=PINV_RCOND)
        D = sol.T
        resid = y - u @ sol
        Sigma = np.atleast_2d(np.cov(resid.T, ddof=0)) if resid.shape[0] > 1 else np.zeros((n_o, n_o))
        empty = np.zeros((0, 0))
        return StateSpaceModel(
            A=empty,
            B=np.zeros((0, n_i)),
            C=np.zeros((n_o, 0)),
            D=D,
            K=np.zeros((0, n_o)),
            Sigma=Sigma,
            allow_unstable_predictor=True,
        )

    Gamma = np.asarray(Gamma, dtype=float)
    if Gamma.shape[0] < 2 * n_o:
        raise ValueError("observability estimate needs at least two block rows")
    top = Gamma[: (f - 1) * n_o]
    if np.linalg.matrix_rank(top, tol=1e-8 * np.linalg.norm(top, 2)) < n_x:
        raise ValueError(
            f"observability stack is rank deficient: cannot solve for {n_x} states"
        )
    C = Gamma[:n_o]
    A, _, _, _ = np.linalg.lstsq(top, Gamma[n_o:], rcond=PINV_RCOND)

    Lp = np.asarray(Lp, dtype=float)
    B1 = Lp[:, (p - 1) * n_i : p * n_i]
    Kg = Lp[:, p * n_i + (p - 1) * n_o :]

    # propagate the predictor without D (it does not enter the state update)
    AK = A - Kg @ C
    T = len(u)
    xhat = np.zeros(n_x)
    pred = np.empty((T, n_o))
    for k in range(T):
        pred[k] = C @ xhat
        xhat = AK @ xhat + B1 @ u[k] + Kg @ y[k]
    skip = min(max(20, 2 * f), max(T - n_i - 1, 0))
    resid = y[skip:] - pred[skip:]
    ureg = u[skip:]
    if np.linalg.matrix_rank(ureg) < n_i:
        D = np.asarray(Hf, dtype=float)[:n_o, :n_i]
    else:
        sol, _, _, _ = np.linalg.lstsq(ureg, resid, rcond=PINV_RCOND)
        D = sol.T
    B = B1 + Kg @ D
    final = resid - ureg @ D.T
    Sigma = np.atleast_2d(np.cov(final.T, ddof=0)) if final.shape[0] > 1 else np.zeros((n_o, n_o))
    return StateSpaceModel(
        A=A, B=B, C=C, D=D, K=Kg, Sigma=Sigma, allow_unstable_predictor=True
    )
