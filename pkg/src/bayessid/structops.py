"""Structured linear-algebra kernels for subspace identification.

Conventions used throughout the package:

* ``vec`` is column-major: ``vec(M)`` stacks the columns of ``M``.
* A block lower triangular Toeplitz matrix is stored by its first block
  column.  Block ``(k, l)`` of the dense matrix equals block ``k - l`` of
  the first block column for ``k >= l`` (0-based) and is zero above the
  block diagonal.
* Block Hankel matrices put sample ``m + n`` in block row ``m``,
  column ``n``.

All functions are pure and safe to call concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

DEFAULT_RANK_TOL = 1e-12


def _as_signal(signal):
    sig = np.asarray(signal, dtype=float)
    if sig.ndim == 1:
        sig = sig[:, None]
    if sig.ndim != 2:
        raise ValueError(f"signal must be 1-D or 2-D, got shape {sig.shape}")
    return sig


def build_block_hankel(signal, rows, cols, start_offset=0):
    """Arrange a vector-valued signal in a block Hankel matrix.

    Parameters
    ----------
    signal : array_like, shape (T,) or (T, d)
        Sequence of length-``d`` samples.
    rows, cols : int
        Number of block rows and of columns.
    start_offset : int
        Index of the sample placed in the top-left block.

    Returns
    -------
    ndarray, shape (rows * d, cols)
        Matrix whose block row ``m``, column ``n`` holds
        ``signal[start_offset + m + n]``.
    """
    if rows < 1 or cols < 1:
        raise ValueError(f"rows and cols must be positive, got rows={rows}, cols={cols}")
    if start_offset < 0:
        raise ValueError(f"start_offset must be nonnegative, got {start_offset}")
    sig = _as_signal(signal)
    needed = start_offset + rows + cols - 1
    if sig.shape[0] < needed:
        raise ValueError(
            f"signal too short for block Hankel: rows={rows}, cols={cols}, "
            f"start_offset={start_offset} require {needed} samples, got {sig.shape[0]}"
        )
    return np.vstack(
        [sig[start_offset + m : start_offset + m + cols].T for m in range(rows)]
    )


@dataclass(frozen=True)
class BlockToeplitzLower:
    """Block lower triangular Toeplitz matrix stored by its first block column.

    ``first_block_column`` has shape ``(num_blocks * block_size, block_size)``.
    The dense matrix is nonsingular iff its (1,1) block is nonsingular.
    """

    first_block_column: np.ndarray
    block_size: int
    num_blocks: int

    def __post_init__(self):
        fbc = np.asarray(self.first_block_column, dtype=float)
        expected = (self.num_blocks * self.block_size, self.block_size)
        if fbc.shape != expected:
            raise ValueError(
                f"first_block_column has shape {fbc.shape}, expected {expected}"
            )
        object.__setattr__(self, "first_block_column", fbc)

    @property
    def shape(self):
        n = self.num_blocks * self.block_size
        return (n, n)

    def block(self, k):
        """k-th block of the first block column (0-based)."""
        s = self.block_size
        return self.first_block_column[k * s : (k + 1) * s]


def identity_block_toeplitz(block_size, num_blocks):
    """The identity matrix as a :class:`BlockToeplitzLower`."""
    fbc = np.zeros((num_blocks * block_size, block_size))
    fbc[:block_size] = np.eye(block_size)
    return BlockToeplitzLower(fbc, block_size, num_blocks)


def lower_block_toeplitz_dense(blocks):
    """Dense block lower triangular Toeplitz matrix from its first block column.

    ``blocks`` is a sequence of equally shaped (possibly rectangular) blocks.
    """
    blocks = [np.atleast_2d(np.asarray(b, dtype=float)) for b in blocks]
    br, bc = blocks[0].shape
    i = len(blocks)
    out = np.zeros((i * br, i * bc))
    for k, blk in enumerate(blocks):
        for l in range(i - k):
            out[(k + l) * br : (k + l + 1) * br, l * bc : (l + 1) * bc] = blk
    return out


def toeplitz_expand(t):
    """Dense matrix represented by a :class:`BlockToeplitzLower`."""
    return lower_block_toeplitz_dense([t.block(k) for k in range(t.num_blocks)])


def toeplitz_from_dense(M, block_size):
    """Extract the first block column of a dense matrix into a :class:`BlockToeplitzLower`."""
    M = np.asarray(M, dtype=float)
    if M.shape[0] != M.shape[1] or M.shape[0] % block_size:
        raise ValueError(f"matrix of shape {M.shape} is not square with block size {block_size}")
    return BlockToeplitzLower(M[:, :block_size].copy(), block_size, M.shape[0] // block_size)


def toeplitz_from_last_block_row(row, num_blocks):
    """Rebuild a dense block lower triangular Toeplitz matrix from its last block row.

    ``row`` has shape ``(n_o, num_blocks * n_i)`` and holds the blocks
    ``[T_{num_blocks}, ..., T_1]`` of the first block column in reversed
    order; block ``(k, l)`` of the result equals row block ``num_blocks - 1 - k + l``
    (0-based) for ``k >= l``.
    """
    row = np.atleast_2d(np.asarray(row, dtype=float))
    n_o = row.shape[0]
    if row.shape[1] % num_blocks:
        raise ValueError(
            f"row of width {row.shape[1]} does not split into {num_blocks} blocks"
        )
    n_i = row.shape[1] // num_blocks
    blocks = [
        row[:, (num_blocks - 1 - k) * n_i : (num_blocks - k) * n_i]
        for k in range(num_blocks)
    ]
    return lower_block_toeplitz_dense(blocks)


def toeplitz_multiply(a, b):
    """Product of two :class:`BlockToeplitzLower` matrices (closed under multiply)."""
    if a.block_size != b.block_size or a.num_blocks != b.num_blocks:
        raise ValueError("incompatible block Toeplitz operands")
    return BlockToeplitzLower(
        toeplitz_expand(a) @ b.first_block_column, a.block_size, a.num_blocks
    )


def toeplitz_inverse(t):
    """Inverse of a nonsingular :class:`BlockToeplitzLower`, same structure.

    Uses the block recursion ``S_0 = T_0^{-1}``,
    ``S_l = -T_0^{-1} sum_{k=1..l} T_k S_{l-k}``.
    """
    s = t.block_size
    lu_piv = scipy.linalg.lu_factor(t.block(0))
    blocks = [scipy.linalg.lu_solve(lu_piv, np.eye(s))]
    for l in range(1, t.num_blocks):
        acc = np.zeros((s, s))
        for k in range(1, l + 1):
            acc += t.block(k) @ blocks[l - k]
        blocks.append(-scipy.linalg.lu_solve(lu_piv, acc))
    return BlockToeplitzLower(np.vstack(blocks), s, t.num_blocks)


def toeplitz_transpose_vec_b(t):
    """Stacked block columns of ``toeplitz_expand(t).T`` from the stored blocks.

    Returns the ``(num_blocks**2 * block_size, block_size)`` stack whose block
    ``l * num_blocks + k`` equals ``t.block(l - k).T`` for ``k <= l`` and zero
    otherwise, i.e. the block vectorization of the transposed dense matrix.
    """
    s, i = t.block_size, t.num_blocks
    out = np.zeros((i * i * s, s))
    for l in range(i):
        for k in range(l + 1):
            pos = l * i + k
            out[pos * s : (pos + 1) * s] = t.block(l - k).T
    return out


def toeplitz_selector(i):
    """0/1 matrix ``T`` with ``vec(G) = T @ G[:, 0]`` for every scalar
    lower triangular Toeplitz ``G`` of size ``i x i``."""
    T = np.zeros((i * i, i))
    for l in range(i):
        for k in range(l, i):
            T[l * i + k, k - l] = 1.0
    return T


def toeplitz_transpose_selector(i):
    """0/1 matrix ``W`` with ``vec(G.T) = W @ G[:, 0]`` for every scalar
    lower triangular Toeplitz ``G`` of size ``i x i``."""
    W = np.zeros((i * i, i))
    for l in range(i):
        for k in range(l + 1):
            W[l * i + k, l - k] = 1.0
    return W


def hankel_selector(rows, cols):
    """0/1 matrix ``H`` with ``H @ v = vec(Hankel(v))`` for every vector ``v``
    of length ``rows + cols - 1``; has full column rank ``rows + cols - 1``."""
    H = np.zeros((rows * cols, rows + cols - 1))
    for n in range(cols):
        for k in range(rows):
            H[n * rows + k, k + n] = 1.0
    return H


def hankel_antidiagonal_counts(rows, cols):
    """Number of entries on each anti-diagonal of a ``rows x cols`` matrix.

    Equals the diagonal of ``hankel_selector(rows, cols).T @ hankel_selector(rows, cols)``.
    """
    t = np.arange(rows + cols - 1)
    return np.minimum.reduce([t + 1, np.full_like(t, rows), np.full_like(t, cols), rows + cols - 1 - t])


def block_vec(P, block_width):
    """Stack the block columns of ``P`` vertically.

    Satisfies ``block_vec(Q @ R, w) = kron(I_K, Q) @ block_vec(R, w)`` for any
    conformable ``Q`` and ``R`` with ``K`` block columns of width ``w``.
    """
    P = np.atleast_2d(np.asarray(P, dtype=float))
    if P.shape[1] % block_width:
        raise ValueError(
            f"column count {P.shape[1]} not divisible by block width {block_width}"
        )
    K = P.shape[1] // block_width
    return np.vstack([P[:, k * block_width : (k + 1) * block_width] for k in range(K)])


def truncated_svd(M, r):
    """Best rank-``r`` SVD factors ``(U, s, Vt)`` of ``M``.

    ``U`` is ``(m, r)`` with orthonormal columns, ``s`` the ``r`` largest
    singular values in descending order, ``Vt`` is ``(r, n)`` with orthonormal
    rows; ``U @ diag(s) @ Vt`` is the best rank-``r`` Frobenius approximation.
    """
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if r > min(M.shape):
        raise ValueError(f"rank {r} exceeds matrix dimensions {M.shape}")
    U, s, Vt = np.linalg.svd(M, full_matrices=False)
    return U[:, :r], s[:r], Vt[:r]


def pseudo_determinant(M, rank_tolerance=DEFAULT_RANK_TOL):
    """Product of the singular values of ``M`` above ``rank_tolerance``
    relative to the largest one.

    For full-rank symmetric PSD input this is the ordinary determinant
    magnitude; for the zero matrix the empty product 1 is returned.
    """
    s = np.linalg.svd(np.asarray(M, dtype=float), compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 1.0
    kept = s[s > rank_tolerance * s[0]]
    return float(np.prod(kept))


def log_pseudo_determinant(M, rank_tolerance=DEFAULT_RANK_TOL):
    """Logarithm of :func:`pseudo_determinant`, computed without overflow."""
    s = np.linalg.svd(np.asarray(M, dtype=float), compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0.0
    kept = s[s > rank_tolerance * s[0]]
    return float(np.sum(np.log(kept)))


def symmetrize(M):
    return 0.5 * (M + M.T)


def spd_sqrt(M):
    """Symmetric PSD square root via eigendecomposition."""
    w, V = np.linalg.eigh(symmetrize(np.asarray(M, dtype=float)))
    w = np.clip(w, 0.0, None)
    return (V * np.sqrt(w)) @ V.T


def spd_inv_sqrt(M):
    """Symmetric inverse square root of an SPD matrix.

    Raises ``LinAlgError`` when the smallest eigenvalue is not positive so
    callers can apply their own conditioning policy.
    """
    w, V = np.linalg.eigh(symmetrize(np.asarray(M, dtype=float)))
    if w.min() <= 0.0:
        raise np.linalg.LinAlgError("matrix is not positive definite")
    return (V / np.sqrt(w)) @ V.T
