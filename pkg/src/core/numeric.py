"""Dense numeric helpers shared by every other module.

Vectors, matrices and Tensor3 values are plain float64 numpy arrays of shape
(len,), (rows, cols) and (dim1, dim2, channels). Randomness always flows
through an explicit numpy Generator backed by the counter-based Philox
bit generator, so streams are identical across platforms.
"""

import logging

import numpy as np

from src.errors import ShapeError, ValidationError

logger = logging.getLogger(__name__)

JACOBI_TOL = 1e-10
JACOBI_MAX_SWEEPS = 100
SYMMETRY_TOL = 1e-9


def _checked(x, ndim, name):
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != ndim:
        raise ShapeError(f"{name} expects {ndim} dimensions, got shape {arr.shape}")
    if arr.size == 0:
        raise ShapeError(f"{name} must not be empty")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite entries")
    return arr


def as_vec(x):
    """Validate and return a finite float64 vector"""
    return _checked(x, 1, 'Vec')


def as_mat(x):
    """Validate and return a finite float64 matrix"""
    return _checked(x, 2, 'Mat')


def as_tensor3(x):
    """Validate and return a finite float64 (dim1, dim2, channels) tensor"""
    return _checked(x, 3, 'Tensor3')


def matmul(a, b):
    """Matrix product with explicit dimension checking"""
    a = as_mat(a)
    b = as_mat(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} x {b.shape} do not conform")
    return a @ b


def canonicalize_signs(vectors):
    """Flip each column so its largest-magnitude entry is non-negative (first wins on ties)"""
    vectors = np.array(vectors, dtype=np.float64, copy=True)
    idx = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[idx, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def _off_norm(a):
    return np.sqrt(max(np.sum(a * a) - np.sum(np.diag(a) ** 2), 0.0))


def eigh_symmetric(m):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns (eigenvalues, eigenvectors) with eigenvalues sorted descending and
    eigenvectors as sign-canonicalized columns. Sweeps stop once the
    off-diagonal Frobenius norm drops below 1e-10 (relative to the matrix norm
    when that exceeds one) or after 100 sweeps.
    """
    a = as_mat(m).copy()
    n = a.shape[0]
    if a.shape[1] != n:
        raise ShapeError(f"eigh_symmetric needs a square matrix, got {a.shape}")
    if np.max(np.abs(a - a.T)) > SYMMETRY_TOL:
        raise ValidationError("eigh_symmetric needs a symmetric matrix")
    a = 0.5 * (a + a.T)

    v = np.eye(n)
    tol = JACOBI_TOL * max(1.0, np.linalg.norm(a))
    sweeps = 0
    while sweeps < JACOBI_MAX_SWEEPS and _off_norm(a) >= tol:
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) < 1e-300:
                    continue
                tau = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(tau) / (abs(tau) + np.sqrt(1.0 + tau * tau)) if tau != 0 else 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c

                # A <- J^T A J on rows/cols p, q
                ap = a[:, p].copy()
                aq = a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap = a[p, :].copy()
                aq = a[q, :].copy()
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                a[p, q] = 0.0
                a[q, p] = 0.0

                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
        sweeps += 1

    if sweeps == JACOBI_MAX_SWEEPS:
        logger.warning(f"Jacobi stopped at {sweeps} sweeps, off-diagonal norm {_off_norm(a):.3e}")

    values = np.diag(a).copy()
    order = np.argsort(-values, kind='stable')
    return values[order], canonicalize_signs(v[:, order])


def derive_seed(seed, *stream):
    """Derive an independent 64-bit seed for a named sub-stream"""
    ss = np.random.SeedSequence([int(seed)] + [int(s) for s in stream])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def make_rng(seed, *stream):
    """Philox-backed Generator for (seed, *stream)"""
    ss = np.random.SeedSequence([int(seed)] + [int(s) for s in stream])
    return np.random.Generator(np.random.Philox(ss))


def rng_uniform(rng, low=0.0, high=1.0, size=None):
    return rng.uniform(low, high, size)


def rng_normal(rng, mean=0.0, std=1.0, size=None):
    """Gaussian draws via numpy's ziggurat sampler"""
    return rng.normal(mean, std, size)


def rng_shuffle(rng, n_or_array):
    """Permutation of range(n), or a permuted copy of an array"""
    return rng.permutation(n_or_array)
