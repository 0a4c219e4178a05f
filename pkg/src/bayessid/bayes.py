"""Gibbs sampler for the Markov-parameter matrix of a MIMO state-space model.

The sampler alternates regularized least-squares draws for the observability
factor ``Gamma``, the Toeplitz input map ``Hf`` and the controllability
factor ``Lp`` with a structured draw of the innovation shaping matrix ``Gf``
(a block lower triangular Toeplitz matrix), then averages ``Gamma @ Lp``
over the chain.

Randomness contract
-------------------
All draws of one chain come from a single ``numpy.random.Generator`` in a
fixed order per sweep:

1. ``standard_normal((i*n_o, r + i*n_i))`` for the joint ``[Gamma, Hf]`` draw,
2. ``standard_normal((i*n_o, r))`` for the extra ``Gamma`` refresh
   (when enabled),
3. ``standard_normal((r, j))`` for the ``Lp`` draw,
4. ``chisquare(dof - arange(n_o))`` then ``standard_normal((n_o, n_o))``
   for the Wishart draw,
5. ``standard_normal((i - 1, n_o, n_o))`` for the remaining ``Gf`` blocks.

Two runs with the same seed and configuration are bit identical.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .structops import (
    BlockToeplitzLower,
    hankel_antidiagonal_counts,
    identity_block_toeplitz,
    spd_sqrt,
    symmetrize,
    toeplitz_expand,
    toeplitz_from_last_block_row,
    toeplitz_inverse,
    truncated_svd,
)
from .subspace import ls_markov

JITTER_SCALE = 1e-10
GF_VARIANTS = ("exact", "independent-approx")


@dataclass
class PriorParams:
    """Regularization matrices of the empirical priors plus the truncation rank."""

    LambdaGamma: np.ndarray
    LambdaL: np.ndarray
    LambdaH: np.ndarray
    rank: int


@dataclass
class GibbsState:
    """Current draws and cached derived quantities of one chain.

    ``log_abs_det_g11`` is ``log |det G11|`` for the (1,1) block of ``Gf``;
    the precision scale ``gamma_scalar = |det G11|^(-2 i)`` and the residual
    precision ``Psi_e = (Gf Gf^T)^(-1)`` are derived from it.  ``Xp`` caches
    ``Lp @ Zp``.
    """

    Gamma: np.ndarray
    Hf: np.ndarray
    Lp: np.ndarray
    Gf: BlockToeplitzLower
    Xp: np.ndarray
    Psi_e: np.ndarray
    log_abs_det_g11: float = 0.0

    @property
    def gamma_scalar(self):
        return math.exp(-2.0 * self.Gf.num_blocks * self.log_abs_det_g11)


@dataclass
class ChainConfig:
    """Gibbs chain settings.

    ``gf_variant`` selects the noise-structure treatment in the ``Gf`` draw:
    ``"independent-approx"`` (default) ignores the Hankel ties between
    residual entries, ``"exact"`` accounts for them.  ``average_mode`` is
    ``"rao-blackwell"`` (average conditional means) or ``"plain"`` (average
    raw draws).  ``extra_gamma_refresh`` redraws ``Gamma`` after the Toeplitz
    projection of ``Hf``; disabling it keeps the joint draw's ``Gamma``.
    """

    total_iterations: int = 500
    burn_in: int = 100
    gf_variant: str = "independent-approx"
    seed: int = 0
    average_mode: str = "rao-blackwell"
    extra_gamma_refresh: bool = True

    def __post_init__(self):
        if not 0 <= self.burn_in < self.total_iterations:
            raise ValueError(
                f"burn-in {self.burn_in} must lie in [0, {self.total_iterations})"
            )
        variant = {"approx": "independent-approx"}.get(self.gf_variant, self.gf_variant)
        if variant not in GF_VARIANTS:
            raise ValueError(f"unknown gf_variant {self.gf_variant!r}")
        self.gf_variant = variant
        if self.average_mode not in ("plain", "rao-blackwell"):
            raise ValueError(f"unknown average_mode {self.average_mode!r}")


def init_chain(ds, r):
    """Empirical priors and initial state from the least-squares estimate.

    Runs the least-squares regression, truncates the SVD of ``Hfp_ls @ Zp``
    at rank ``r`` and sets ``Gamma = U_r S_r^(1/2)``,
    ``Lp = S_r^(1/2) V_r^T Zp^+``, ``Gf = I`` and the three regularizers
    ``LambdaGamma = i n_o S_r^(-1)``, ``LambdaL = j S_r^(-1)``,
    ``LambdaH = I * i^2 n_o n_i / ||Hf_ls||_F^2``.
    """
    i, n_o, n_i, j = ds.f, ds.n_o, ds.n_i, ds.j
    ls = ls_markov(ds)
    W = ls.Hfp @ ds.Zp
    U, s, Vt = truncated_svd(W, r)
    if s[-1] <= 1e-12 * s[0]:
        raise ValueError(
            f"requested rank {r} exceeds the numerical rank of the weighted "
            f"least-squares estimate (singular values {s})"
        )
    sq = np.sqrt(s)
    Gamma1 = U * sq
    Lp1 = (sq[:, None] * Vt) @ ds.zp_pinv
    hf_energy = float(np.sum(ls.Hf**2))
    if hf_energy > 0.0:
        LambdaH = np.eye(i * n_i) * (i * i * n_o * n_i) / hf_energy
    else:
        warnings.warn(
            "least-squares Hf estimate is zero; using identity regularizer",
            RuntimeWarning,
            stacklevel=2,
        )
        LambdaH = np.eye(i * n_i)
    priors = PriorParams(
        LambdaGamma=np.diag(i * n_o / s),
        LambdaL=np.diag(j / s),
        LambdaH=LambdaH,
        rank=r,
    )
    state = GibbsState(
        Gamma=Gamma1,
        Hf=ls.Hf.copy(),
        Lp=Lp1,
        Gf=identity_block_toeplitz(n_o, i),
        Xp=Lp1 @ ds.Zp,
        Psi_e=np.eye(i * n_o),
        log_abs_det_g11=0.0,
    )
    return priors, state


def _conditioned_inv_and_inv_sqrt(S):
    """Inverse and symmetric inverse square root of a nominally SPD matrix.

    Applies the jitter policy: add ``1e-10 * trace / dim`` to the diagonal at
    most twice before giving up.
    """
    S = symmetrize(np.asarray(S, dtype=float))
    n = S.shape[0]
    jittered = 0
    while True:
        w, V = np.linalg.eigh(S)
        if w.min() > 0.0:
            inv = (V / w) @ V.T
            inv_sqrt = (V / np.sqrt(w)) @ V.T
            return inv, inv_sqrt, jittered
        if jittered >= 2:
            raise np.linalg.LinAlgError(
                "matrix stayed indefinite after two jitter attempts"
            )
        S = S + np.eye(n) * (JITTER_SCALE * np.trace(S) / n)
        jittered += 1
        warnings.warn("jittered a near-singular precision matrix", RuntimeWarning, stacklevel=3)


def _scaled_regression(data, X, Lambda, state, xi, row_slice=None):
    """Shared core of the regression draws.

    Computes mean ``data @ X.T @ inv(S)`` and noise ``G @ xi @ inv_sqrt(S)``
    with ``S = Lambda * |det G11|^(2 i) + X @ X.T``, which equals the draw
    ``data @ X.T @ Sigma^(-1) gamma + Gbar @ xi @ Sigma^(-1/2)`` for
    ``Sigma = Lambda + X @ X.T gamma`` written in a form that stays finite
    when ``gamma = |det G11|^(-2 i)`` is enormous.
    """
    g2i = math.exp(2.0 * state.Gf.num_blocks * state.log_abs_det_g11)
    S = Lambda * g2i + X @ X.T
    Sinv, Sinv_sqrt, jittered = _conditioned_inv_and_inv_sqrt(S)
    G = toeplitz_expand(state.Gf)
    if row_slice is not None:
        data = data[row_slice]
        G = G[row_slice]
    mean = (data @ X.T) @ Sinv
    draw = mean + G @ xi @ Sinv_sqrt
    return draw, mean, jittered


@dataclass
class GammaHDraw:
    Gamma: np.ndarray | None
    Hf: np.ndarray
    Gamma_mean: np.ndarray | None
    Hf_mean: np.ndarray
    jittered: int = 0


def step_gamma_h(state, ds, priors, rng, xi=None, last_block_only=False):
    """Joint draw of ``[Gamma, Hf]`` given ``Xp`` and ``Gf``.

    With ``last_block_only`` the regression is evaluated only for the last
    block row (all that the Toeplitz projection of ``Hf`` consumes); the
    noise matrix ``xi`` is drawn with the full shape either way so the
    stream position does not depend on the flag.
    """
    i, n_o, n_i, r = ds.f, ds.n_o, ds.n_i, priors.rank
    X = np.vstack([state.Xp, ds.Uf])
    Lambda = scipy.linalg.block_diag(priors.LambdaGamma, priors.LambdaH)
    if xi is None:
        xi = rng.standard_normal((i * n_o, r + i * n_i))
    row_slice = slice((i - 1) * n_o, i * n_o) if last_block_only else None
    draw, mean, jittered = _scaled_regression(ds.Yf, X, Lambda, state, xi, row_slice)
    if last_block_only:
        return GammaHDraw(None, draw[:, r:], None, mean[:, r:], jittered)
    return GammaHDraw(draw[:, :r], draw[:, r:], mean[:, :r], mean[:, r:], jittered)


def project_Hf(Hf_unprojected, n_o):
    """Project a draw onto the block lower triangular Toeplitz set by
    rebuilding it from its last block row."""
    Hf_unprojected = np.asarray(Hf_unprojected, dtype=float)
    if Hf_unprojected.shape[0] % n_o:
        raise ValueError(
            f"row count {Hf_unprojected.shape[0]} is not a multiple of n_o={n_o}"
        )
    i = Hf_unprojected.shape[0] // n_o
    return toeplitz_from_last_block_row(Hf_unprojected[-n_o:], i)


@dataclass
class RegressionDraw:
    draw: np.ndarray
    mean: np.ndarray
    jittered: int = 0


def step_gamma_refresh(state, ds, priors, rng, xi=None):
    """Redraw ``Gamma`` with ``Hf`` held fixed (post-projection refresh)."""
    i, n_o, r = ds.f, ds.n_o, priors.rank
    if xi is None:
        xi = rng.standard_normal((i * n_o, r))
    data = ds.Yf - state.Hf @ ds.Uf
    draw, mean, jittered = _scaled_regression(data, state.Xp, priors.LambdaGamma, state, xi)
    return RegressionDraw(draw, mean, jittered)


def step_lp(state, ds, priors, rng, xi=None):
    """Draw ``Lp`` given ``Gamma``, ``Hf`` and the residual precision
    ``Psi_e = (Gf Gf^T)^(-1)``.

    The quadratic form ``Gamma^T Psi_e Gamma`` and the data term are
    evaluated through the whitening factor ``Gf^(-1)`` (the state invariant
    ties it to ``Psi_e``), which keeps them numerically positive
    semidefinite even when the noise scale has collapsed.
    """
    r = priors.rank
    if xi is None:
        xi = rng.standard_normal((r, ds.j))
    Minv = toeplitz_expand(toeplitz_inverse(state.Gf))
    W = Minv @ state.Gamma
    S2 = W.T @ W + priors.LambdaL
    S2inv, S2inv_sqrt, jittered = _conditioned_inv_and_inv_sqrt(S2)
    resid = ds.Yf - state.Hf @ ds.Uf
    mean = S2inv @ W.T @ (Minv @ resid) @ ds.zp_pinv
    draw = mean + S2inv_sqrt @ (xi @ ds.zp_pinv)
    return RegressionDraw(draw, mean, jittered)


def sample_wishart(scale, dof, rng):
    """Wishart draw via the Bartlett decomposition.

    Draw order: the ``chisquare`` vector for the diagonal, then a full
    ``(d, d)`` standard-normal block whose strict lower triangle is used.
    Valid for any real ``dof > d - 1``.
    """
    scale = np.atleast_2d(np.asarray(scale, dtype=float))
    d = scale.shape[0]
    if dof <= d - 1:
        raise ValueError(f"Wishart degrees of freedom {dof} must exceed d - 1 = {d - 1}")
    chis = rng.chisquare(df=dof - np.arange(d))
    A = np.tril(rng.standard_normal((d, d)), -1) + np.diag(np.sqrt(chis))
    F = np.linalg.cholesky(scale) @ A
    return F @ F.T


def wishart_dof(variant, i, j, n_o):
    """Degrees of freedom of the ``Gf`` draw for the given residual model."""
    dof = i + j - i * n_o if variant == "exact" else i * j - i * n_o + 1
    if dof <= n_o - 1:
        raise ValueError(
            f"Gf draw infeasible: variant {variant!r} needs more data "
            f"(i={i}, j={j}, n_o={n_o} give dof={dof} <= {n_o - 1})"
        )
    return dof


def _omega_approx(E, i, n_o):
    """Precision of the first block column of ``Gf^(-1)`` when residual
    entries are treated as independent.

    With ``C = E @ E.T`` in blocks, ``Omega[a, b] = sum_l C[l-a, l-b]`` over
    ``l >= max(a, b)``; the quadratic form in the blockwise-transposed first
    block column of ``Gf^(-1)`` then equals ``||Gf^(-1) E||_F^2``.
    """
    C = E @ E.T
    Omega = np.zeros((i * n_o, i * n_o))
    for a in range(i):
        for b in range(a, i):
            acc = np.zeros((n_o, n_o))
            for l in range(b, i):
                acc += C[(l - a) * n_o : (l - a + 1) * n_o, (l - b) * n_o : (l - b + 1) * n_o]
            Omega[a * n_o : (a + 1) * n_o, b * n_o : (b + 1) * n_o] = acc
            if b != a:
                Omega[b * n_o : (b + 1) * n_o, a * n_o : (a + 1) * n_o] = acc.T
    return Omega


def _omega_exact(E, i, n_o, j):
    """Precision of the first block column of ``Gf^(-1)`` honouring the
    Hankel ties between residual entries.

    Never densifies the ``i j x i j`` Hankel projector: the selector normal
    matrix is diagonal (anti-diagonal counts), so the projected regressor is
    accumulated blockwise in ``O(i^2 j n_o)``.
    """
    counts = hankel_antidiagonal_counts(j, i).astype(float)
    HtS = np.zeros((i + j - 1, i * n_o))
    for a in range(i):
        for d in range(i - a):
            Ed = E[d * n_o : (d + 1) * n_o]
            HtS[a + d : a + d + j, a * n_o : (a + 1) * n_o] += Ed.T
    A = HtS / counts[:, None]
    return A.T @ A


def _omega_factor(Omega):
    """Lower triangular factor ``F`` with ``Omega = F.T @ F``, with the
    diagonal jitter policy.

    The factor is the index-reversed upper Cholesky factor of the
    index-reversed matrix.  Lower triangularity is what lets the leading
    block of the sampled first block column carry the Wishart root alone:
    with ``m = F^{-1} N`` the first block of ``m`` depends only on the first
    block of ``N``, so the determinant factor of the density transforms
    cleanly.
    """
    n = Omega.shape[0]
    jittered = 0
    while True:
        try:
            L_rev = np.linalg.cholesky(Omega[::-1, ::-1])
            return L_rev.T[::-1, ::-1], jittered
        except np.linalg.LinAlgError:
            if jittered >= 2:
                raise
            Omega = Omega + np.eye(n) * (JITTER_SCALE * np.trace(Omega) / n)
            jittered += 1
            warnings.warn("jittered a singular residual precision", RuntimeWarning, stacklevel=3)


@dataclass
class StepGfResult:
    Gf: BlockToeplitzLower
    Gf_inv: BlockToeplitzLower
    Omega: np.ndarray
    dof: float
    jittered: int = 0


def step_gf(state, ds, rng, variant="independent-approx"):
    """Draw the innovation shaping matrix ``Gf``.

    Forms the residual ``E = Yf - Gamma Xp - Hf Uf``, assembles the precision
    ``Omega`` of the (blockwise transposed) first block column of
    ``Gf^(-1)``, draws the leading block as the symmetric square root of a
    Wishart variable and the remaining blocks as unit normals, solves against
    the lower triangular factor of ``Omega`` (see :func:`_omega_factor`) and
    inverts the resulting block Toeplitz matrix.
    """
    i, n_o, j = ds.f, ds.n_o, ds.j
    variant = {"approx": "independent-approx"}.get(variant, variant)
    if variant not in GF_VARIANTS:
        raise ValueError(f"unknown gf variant {variant!r}")
    dof = wishart_dof(variant, i, j, n_o)
    E = ds.Yf - state.Gamma @ state.Xp - state.Hf @ ds.Uf
    if variant == "exact":
        Omega = _omega_exact(E, i, n_o, j)
    else:
        Omega = _omega_approx(E, i, n_o)
    factor, jittered = _omega_factor(Omega)
    Theta = sample_wishart(np.eye(n_o), dof, rng)
    blocks = [spd_sqrt(Theta)]
    extra = rng.standard_normal((i - 1, n_o, n_o))
    blocks.extend(extra[k].T for k in range(i - 1))
    stacked = scipy.linalg.solve_triangular(factor, np.vstack(blocks), lower=True)
    # the sampled stack parametrizes the blockwise-transposed first block
    # column of Gf^(-1)
    fbc = np.vstack([stacked[k * n_o : (k + 1) * n_o].T for k in range(i)])
    Gf_inv = BlockToeplitzLower(fbc, n_o, i)
    Gf = toeplitz_inverse(Gf_inv)
    return StepGfResult(Gf, Gf_inv, Omega, dof, jittered)


def prior_density_log(Gf, i=None, n_o=None):
    """Log density of the scale-invariant prior on nonsingular block lower
    triangular Toeplitz matrices: ``-i n_o log |det G11|``."""
    if i is None:
        i = Gf.num_blocks
    if n_o is None:
        n_o = Gf.block_size
    if (i, n_o) != (Gf.num_blocks, Gf.block_size):
        raise ValueError(
            f"dimensions ({i}, {n_o}) do not match the stored blocks "
            f"({Gf.num_blocks}, {Gf.block_size})"
        )
    sign, logdet = np.linalg.slogdet(Gf.block(0))
    if sign == 0:
        raise ValueError("leading block is singular")
    return -float(i * n_o) * logdet


LOGDET_BOUND = 100.0


def _refresh_noise_scale(state, gf_result):
    """Update the cached ``Gf``-derived quantities after a ``Gf`` draw.

    On numerically exact data the drawn noise scale shrinks without bound;
    ``|log det G11|`` is clamped (by rescaling the draw) so the residual
    precision stays inside floating-point range.  The clamp only engages when
    the posterior has collapsed to machine precision.
    """
    Gf, Gf_inv = gf_result.Gf, gf_result.Gf_inv
    sign, logdet = np.linalg.slogdet(Gf.block(0))
    if sign == 0:
        raise np.linalg.LinAlgError("drawn Gf has a singular leading block")
    if abs(logdet) > LOGDET_BOUND:
        n_o = Gf.block_size
        c = math.exp((math.copysign(LOGDET_BOUND, logdet) - logdet) / n_o)
        Gf = BlockToeplitzLower(c * Gf.first_block_column, n_o, Gf.num_blocks)
        Gf_inv = BlockToeplitzLower(
            Gf_inv.first_block_column / c, n_o, Gf_inv.num_blocks
        )
        logdet = math.copysign(LOGDET_BOUND, logdet)
    Minv = toeplitz_expand(Gf_inv)
    state.Gf = Gf
    state.log_abs_det_g11 = float(logdet)
    state.Psi_e = Minv.T @ Minv


@dataclass
class ChainResult:
    """Chain average and per-iteration diagnostics."""

    Hfp: np.ndarray
    Hf: np.ndarray
    logdet_g11_trace: np.ndarray
    gamma_lp_norm_trace: np.ndarray
    config: ChainConfig
    jitter_events: int
    final_state: GibbsState


def run_chain(ds, priors, cfg, initial_state=None):
    """Run the Gibbs chain and average the Markov-parameter estimate.

    Sweep order: joint ``[Gamma, Hf]`` draw, Toeplitz projection of ``Hf``,
    optional ``Gamma`` refresh, ``Lp`` draw, ``Gf`` draw.  Iterations after
    ``burn_in`` contribute to the average: raw ``Gamma @ Lp`` products in
    ``"plain"`` mode, or the half sum ``E[Gamma] Lp_prev + Gamma E[Lp]`` of
    conditional means in ``"rao-blackwell"`` mode.
    """
    if initial_state is None:
        _, state = init_chain(ds, priors.rank)
    else:
        state = initial_state
    rng = np.random.default_rng(cfg.seed)
    n_o, n_i = ds.n_o, ds.n_i
    n_avg = cfg.total_iterations - cfg.burn_in
    Hfp_sum = np.zeros((ds.f * n_o, ds.p * (n_i + n_o)))
    Hf_sum = np.zeros_like(state.Hf)
    logdet_trace = np.empty(cfg.total_iterations)
    norm_trace = np.empty(cfg.total_iterations)
    jitter_events = 0

    for n in range(1, cfg.total_iterations + 1):
        try:
            gh = step_gamma_h(
                state, ds, priors, rng, last_block_only=cfg.extra_gamma_refresh
            )
            state.Hf = toeplitz_from_last_block_row(gh.Hf[-n_o:], ds.f)
            jitter_events += gh.jittered
            if cfg.extra_gamma_refresh:
                ref = step_gamma_refresh(state, ds, priors, rng)
                state.Gamma = ref.draw
                gamma_mean = ref.mean
                jitter_events += ref.jittered
            else:
                state.Gamma = gh.Gamma
                gamma_mean = gh.Gamma_mean
            lp_prev = state.Lp
            lp = step_lp(state, ds, priors, rng)
            state.Lp = lp.draw
            state.Xp = state.Lp @ ds.Zp
            jitter_events += lp.jittered
            gf = step_gf(state, ds, rng, cfg.gf_variant)
            _refresh_noise_scale(state, gf)
            jitter_events += gf.jittered
        except np.linalg.LinAlgError as err:
            raise np.linalg.LinAlgError(f"chain failed at iteration {n}: {err}") from err

        logdet_trace[n - 1] = state.log_abs_det_g11
        norm_trace[n - 1] = np.linalg.norm(state.Gamma @ state.Lp)
        if n > cfg.burn_in:
            if cfg.average_mode == "plain":
                Hfp_sum += state.Gamma @ state.Lp
            else:
                Hfp_sum += 0.5 * (gamma_mean @ lp_prev + state.Gamma @ lp.mean)
            Hf_sum += state.Hf

    return ChainResult(
        Hfp=Hfp_sum / n_avg,
        Hf=Hf_sum / n_avg,
        logdet_g11_trace=logdet_trace,
        gamma_lp_norm_trace=norm_trace,
        config=cfg,
        jitter_events=jitter_events,
        final_state=state,
    )


def _spectral_variance(x):
    """Autocorrelation-corrected variance of the sample mean estimator."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    xc = x - x.mean()
    L = max(1, int(math.sqrt(n)))
    gamma0 = float(xc @ xc) / n
    s = gamma0
    for lag in range(1, min(L, n - 1) + 1):
        cov = float(xc[lag:] @ xc[:-lag]) / n
        s += 2.0 * (1.0 - lag / (L + 1.0)) * cov
    return max(s, 1e-300)


def geweke_zscore(trace, first=0.1, last=0.5):
    """Mean-split convergence statistic between the first ``first`` and last
    ``last`` fractions of a trace, with spectral variance estimates."""
    trace = np.asarray(trace, dtype=float)
    n = len(trace)
    a = trace[: max(2, int(first * n))]
    b = trace[n - max(2, int(last * n)) :]
    va = _spectral_variance(a) / len(a)
    vb = _spectral_variance(b) / len(b)
    return float((a.mean() - b.mean()) / math.sqrt(va + vb))
