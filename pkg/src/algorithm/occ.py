"""nu one-class SVM with a Gaussian kernel.

Training solves the dual
    min 1/2 a^T K a   s.t.  0 <= a_i <= 1/(nu n),  sum a_i = 1
by pairwise SMO (maximal violating pair, lowest index on ties). The decision
value is h(v) = sum_k a_k exp(-gamma ||v - v_k||^2) and a point is novel when
h(v) falls below the threshold rho - epsilon.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from src.config import OCC_DEFAULTS
from src.core.numeric import as_vec
from src.errors import NumericalAbort, ShapeError, ValidationError

logger = logging.getLogger(__name__)

SV_THRESHOLD = 1e-10


@dataclass
class OcSvmModel:
    support_vectors: np.ndarray  # (n_sv, d)
    alphas: np.ndarray           # (n_sv,)
    rho: float
    gamma: float
    nu: float
    n_train: int
    tol: float = OCC_DEFAULTS['tol']

    @property
    def bound(self):
        return 1.0 / (self.nu * self.n_train)


@dataclass
class Verdict:
    label: str    # 'normal' | 'novel'
    score: float  # positive exactly when novel
    h_hat: float

    @property
    def is_novel(self):
        return self.label == 'novel'


def gaussian_kernel(a, b, gamma):
    """exp(-gamma ||a - b||^2)"""
    a = as_vec(a)
    b = as_vec(b)
    if a.shape != b.shape:
        raise ShapeError(f"kernel inputs have lengths {a.shape[0]} and {b.shape[0]}")
    if gamma <= 0:
        raise ValidationError("gamma must be positive")
    d = a - b
    return float(np.exp(-gamma * (d @ d)))


def gram_matrix(x, y, gamma):
    """Kernel matrix between the rows of x and y"""
    return np.exp(-gamma * cdist(x, y, 'sqeuclidean'))


class _KernelRows:
    """Full Gram matrix for small problems, rows on demand otherwise"""

    def __init__(self, x, gamma, cache_limit):
        self.x = x
        self.gamma = gamma
        self.full = gram_matrix(x, x, gamma) if x.shape[0] <= cache_limit else None
        self.diag = np.ones(x.shape[0])

    def row(self, i):
        if self.full is not None:
            return self.full[i]
        return gram_matrix(self.x[i:i + 1], self.x, self.gamma)[0]

    def matvec(self, a):
        if self.full is not None:
            return self.full @ a
        out = np.zeros(self.x.shape[0])
        for i in np.flatnonzero(a):
            out += a[i] * self.row(i)
        return out


def fit_ocsvm(samples, nu=OCC_DEFAULTS['nu'], gamma=None, tol=OCC_DEFAULTS['tol'],
              max_updates=OCC_DEFAULTS['max_updates'], cache_limit=OCC_DEFAULTS['gram_cache_limit']):
    """Fit the one-class dual by SMO. gamma=None selects 1 / feature count."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValidationError("fit_ocsvm needs at least 2 samples as an (n, d) array")
    if not np.all(np.isfinite(x)):
        raise ValidationError("fit_ocsvm received non-finite samples")
    if not 0.0 < nu <= 1.0:
        raise ValidationError(f"nu must lie in (0, 1], got {nu}")
    n, dim = x.shape
    gamma = 1.0 / dim if gamma is None else float(gamma)
    if gamma <= 0:
        raise ValidationError("gamma must be positive")

    bound = 1.0 / (nu * n)
    alpha = np.zeros(n)
    m = min(int(np.floor(nu * n)), n)
    alpha[:m] = bound
    if m < n:
        alpha[m] = 1.0 - m * bound
    alpha = np.clip(alpha, 0.0, bound)

    kernel = _KernelRows(x, gamma, cache_limit)
    grad = kernel.matvec(alpha)

    updates = 0
    while True:
        up = alpha < bound       # may increase
        low = alpha > 0.0        # may decrease
        g_up = np.where(up, grad, np.inf)
        g_low = np.where(low, grad, -np.inf)
        i = int(np.argmin(g_up))
        j = int(np.argmax(g_low))
        gap = g_low[j] - g_up[i]
        if gap < tol:
            break
        if updates >= max_updates:
            raise NumericalAbort(f"SMO did not converge after {max_updates} pair updates (gap {gap:.3e})")

        k_i = kernel.row(i)
        k_j = kernel.row(j)
        curvature = kernel.diag[i] + kernel.diag[j] - 2.0 * k_i[j]
        if curvature <= 0:
            curvature = 1e-12
        step = min(gap / curvature, bound - alpha[i], alpha[j])
        alpha[i] += step
        alpha[j] -= step
        grad += step * (k_i - k_j)
        updates += 1

    alpha = np.clip(alpha, 0.0, bound)
    alpha /= alpha.sum()

    margin = (alpha > SV_THRESHOLD) & (alpha < bound - tol)
    if np.any(margin):
        rho = float(np.median(grad[margin]))
    else:
        support = alpha > SV_THRESHOLD
        rho = float(np.max(grad[support]))
        logger.warning("OC-SVM: no margin support vectors; rho from the largest support decision value")

    keep = alpha > SV_THRESHOLD
    support, weights = _merge_duplicates(x[keep], alpha[keep])
    model = OcSvmModel(support, weights, rho, gamma, float(nu), n, float(tol))
    logger.info(f"OC-SVM fitted: n={n}, dim={dim}, nu={nu:g}, gamma={gamma:.4g}, "
                f"{support.shape[0]} support vectors, rho={rho:.6f}, {updates} SMO updates")
    return model


def _merge_duplicates(support, alpha):
    """Collapse identical support vectors into one, summing their weights (first occurrence order)"""
    _, first, inverse = np.unique(support, axis=0, return_index=True, return_inverse=True)
    if first.size == support.shape[0]:
        return support.copy(), alpha.copy()
    order = np.argsort(first)
    rank = np.empty_like(order)
    rank[order] = np.arange(order.size)
    weights = np.bincount(rank[inverse.ravel()], weights=alpha, minlength=order.size)
    logger.warning(f"OC-SVM: {support.shape[0]} support vectors collapse to {order.size} distinct points")
    return support[first[order]].copy(), weights


def dual_objective(model_or_alphas, gram=None):
    """1/2 a^T K a; a fitted model supplies its own alphas and support-vector Gram matrix"""
    if isinstance(model_or_alphas, OcSvmModel):
        sv = model_or_alphas.support_vectors
        alphas = model_or_alphas.alphas
        if gram is None:
            gram = gram_matrix(sv, sv, model_or_alphas.gamma)
    else:
        alphas = np.asarray(model_or_alphas, dtype=np.float64)
        if gram is None:
            raise ValidationError("dual_objective needs a Gram matrix for raw alphas")
    return 0.5 * float(alphas @ gram @ alphas)


def decision_batch(model, vectors):
    """h(v) for each row of an (N, d) array"""
    v = np.asarray(vectors, dtype=np.float64)
    if v.ndim == 1:
        v = v[None]
    if v.shape[1] != model.support_vectors.shape[1]:
        raise ShapeError(f"decision expects {model.support_vectors.shape[1]} features, got {v.shape[1]}")
    return gram_matrix(v, model.support_vectors, model.gamma) @ model.alphas


def decision(model, v):
    """h(v) = sum_k a_k kappa(v, v_k)"""
    return float(decision_batch(model, as_vec(v))[0])


def threshold(model, epsilon=0.0):
    """Decision values strictly below this are novel"""
    return model.rho - epsilon - model.tol


def scores_from_decisions(model, h_hat, epsilon=0.0):
    """Signed scores (rho - epsilon - tol) - h; positive exactly for novel points"""
    return threshold(model, epsilon) - np.asarray(h_hat, dtype=np.float64)


def classify(model, v, epsilon=0.0):
    """Verdict for one feature vector; ties at the threshold are normal"""
    h_hat = decision(model, v)
    score = float(scores_from_decisions(model, h_hat, epsilon))
    return Verdict('novel' if score > 0 else 'normal', score, h_hat)
