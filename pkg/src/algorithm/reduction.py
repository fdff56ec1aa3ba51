"""Feature-space machinery: PCA, two-directional 2-D PCA, scalarization
and refinement.

Scalarization turns a (n, n, q) feature map into a length-q vector, one
value per filter. Refinement conditions each feature element-wise before the
one-class classifier. Eigen-decompositions go through the Jacobi solver so
fitted bases are sign-canonical and reload bit-identically.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from src.core.numeric import as_mat, eigh_symmetric
from src.errors import ShapeError, ValidationError

logger = logging.getLogger(__name__)

SCALARIZERS = ('max', 'mean', 'twod_pca')
REFINERS = ('scale', 'standard', 'norm', 'none')


@dataclass
class PcaModel:
    mean: np.ndarray        # (n,)
    projection: np.ndarray  # (n, d)
    eigenvalues: np.ndarray  # (n,), all of them, descending

    @property
    def d(self):
        return self.projection.shape[1]

    def retained_variance(self):
        total = float(np.sum(np.clip(self.eigenvalues, 0.0, None)))
        if total == 0.0:
            return 1.0
        return float(np.sum(np.clip(self.eigenvalues[:self.d], 0.0, None)) / total)


def _stack(samples, name):
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"{name} expects a list of equal-length vectors")
    if x.shape[0] < 2:
        raise ValidationError(f"{name} needs at least 2 samples, got {x.shape[0]}")
    if not np.all(np.isfinite(x)):
        raise ValidationError(f"{name} received non-finite samples")
    return x


def fit_pca(samples, d=None, variance_threshold=None):
    """PCA on the 1/|K|-normalized covariance of mean-centred samples.

    Exactly one of `d` (component count) or `variance_threshold` (smallest d
    retaining that fraction of variance) may be given; neither keeps all.
    """
    x = _stack(samples, 'fit_pca')
    n = x.shape[1]
    mean = x.mean(axis=0)
    centred = x - mean
    cov = centred.T @ centred / x.shape[0]
    values, vectors = eigh_symmetric(cov)

    if d is not None and variance_threshold is not None:
        raise ValidationError("give either d or variance_threshold, not both")
    if variance_threshold is not None:
        if not 0.0 < variance_threshold <= 1.0:
            raise ValidationError("variance_threshold must be in (0, 1]")
        positive = np.clip(values, 0.0, None)
        total = positive.sum()
        if total == 0.0:
            d = 1
        else:
            ratios = np.cumsum(positive) / total
            d = int(np.searchsorted(ratios, variance_threshold - 1e-12) + 1)
            d = min(d, n)
    elif d is None:
        d = n
    if not 1 <= d <= n:
        raise ValidationError(f"PCA dimension d={d} outside [1, {n}]")

    model = PcaModel(mean, vectors[:, :d].copy(), values)
    logger.info(f"PCA fitted: {n} -> {d} dims, retained variance {model.retained_variance():.4f}")
    return model


def apply_pca(model, v):
    """(v - mean)^T W for a vector (n,) or a batch (N, n)"""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != model.mean.shape[0]:
        raise ShapeError(f"PCA expects {model.mean.shape[0]} features, got {v.shape[-1]}")
    return (v - model.mean) @ model.projection


@dataclass
class TwoDPcaEntry:
    w: np.ndarray         # (n, d) column-space basis from Sigma_W
    q: np.ndarray         # (n, r) row-space basis from Sigma_Q
    mean_map: np.ndarray  # (n, n)


@dataclass
class TwoDPcaModel:
    entries: List[TwoDPcaEntry]

    @property
    def d(self):
        return self.entries[0].w.shape[1]

    @property
    def r(self):
        return self.entries[0].q.shape[1]


def _fit_2d2pca_entry(maps, d, r):
    maps = np.asarray(maps, dtype=np.float64)
    if maps.ndim != 3 or maps.shape[1] != maps.shape[2]:
        raise ShapeError(f"2D2PCA needs square maps, got {maps.shape[1:]}")
    if maps.shape[0] < 2:
        raise ValidationError("2D2PCA needs at least 2 maps per filter")
    n = maps.shape[1]
    if not (1 <= d <= n and 1 <= r <= n):
        raise ValidationError(f"2D2PCA dims d={d}, r={r} outside [1, {n}]")
    mean_map = maps.mean(axis=0)
    centred = maps - mean_map
    sigma_w = np.einsum('kij,kil->jl', centred, centred) / maps.shape[0]
    sigma_q = np.einsum('kij,klj->il', centred, centred) / maps.shape[0]
    if not np.any(sigma_w):
        logger.warning("2D2PCA: zero covariance for a filter; using the canonical basis")
    _, w = eigh_symmetric(sigma_w)
    _, q = eigh_symmetric(sigma_q)
    return TwoDPcaEntry(w[:, :d].copy(), q[:, :r].copy(), mean_map)


def fit_2d2pca(maps_per_filter, d=1, r=1):
    """One (W_j, Q_j) pair per filter j, fitted on that filter's training maps.

    `maps_per_filter` is a sequence over filters of (N, n, n) arrays, or a
    single (N, n, n, q) feature-map stack.
    """
    if isinstance(maps_per_filter, np.ndarray) and maps_per_filter.ndim == 4:
        maps_per_filter = [maps_per_filter[..., j] for j in range(maps_per_filter.shape[3])]
    entries = [_fit_2d2pca_entry(maps, d, r) for maps in maps_per_filter]
    logger.info(f"2D2PCA fitted for {len(entries)} filters (d={d}, r={r})")
    return TwoDPcaModel(entries)


def apply_2d2pca(model, filter_index, p_j):
    """Q_j^T P_j W_j; the raw map is projected without centring"""
    p_j = as_mat(p_j)
    entry = model.entries[filter_index]
    if p_j.shape != (entry.q.shape[0], entry.w.shape[0]):
        raise ShapeError(f"map {p_j.shape} does not match 2D2PCA model {entry.mean_map.shape}")
    return entry.q.T @ p_j @ entry.w


def scalarize_batch(maps, kind, model=None):
    """(N, n, n, q) feature maps -> (N, q) scalarized features"""
    maps = np.asarray(maps, dtype=np.float64)
    if maps.ndim == 3:
        maps = maps[None]
    if kind == 'max':
        return maps.max(axis=(1, 2))
    if kind == 'mean':
        return maps.mean(axis=(1, 2))
    if kind == 'twod_pca':
        if model is None:
            raise ValidationError("twod_pca scalarization needs a fitted 2D2PCA model")
        if model.d != 1 or model.r != 1:
            raise ValidationError("twod_pca scalarization needs d = r = 1")
        if len(model.entries) != maps.shape[3]:
            raise ShapeError(f"2D2PCA model has {len(model.entries)} filters, maps have {maps.shape[3]}")
        q = np.stack([e.q[:, 0] for e in model.entries], axis=1)  # (n, q)
        w = np.stack([e.w[:, 0] for e in model.entries], axis=1)
        return np.einsum('iq,nijq,jq->nq', q, maps, w)
    raise ValidationError(f"unknown scalarizer '{kind}'")


def scalarize(p, kind, model=None):
    """Scalarize every filter of one (n, n, q) map -> (q,)"""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 3:
        raise ShapeError(f"scalarize expects an (n, n, q) tensor, got {p.shape}")
    return scalarize_batch(p[None], kind, model)[0]


@dataclass
class RefinerModel:
    kind: str
    v_min: Optional[np.ndarray] = None
    v_max: Optional[np.ndarray] = None
    v_mu: Optional[np.ndarray] = None
    v_sigma: Optional[np.ndarray] = None


FLAT_RTOL = 1e-12


def flat_features(model):
    """Mask of features that are constant on the training set, up to rounding"""
    sigma_flat = model.v_sigma <= FLAT_RTOL * np.maximum(1.0, np.abs(model.v_mu))
    span_flat = (model.v_max - model.v_min) <= FLAT_RTOL * np.maximum(1.0, np.abs(model.v_max))
    return sigma_flat | span_flat


def fit_refiner(samples, kind):
    """Per-feature statistics for the scale, standard and norm refiners (none passes through)"""
    if kind not in REFINERS:
        raise ValidationError(f"unknown refiner '{kind}'")
    x = _stack(samples, 'fit_refiner')
    model = RefinerModel(kind, x.min(axis=0), x.max(axis=0), x.mean(axis=0), x.std(axis=0))
    dead = int(np.sum(flat_features(model)))
    if dead:
        logger.warning(f"Refiner: {dead} zero-variance features map to 0")
    return model


def refine(model, v):
    """Element-wise refinement of a vector (q,) or batch (N, q)"""
    v = np.asarray(v, dtype=np.float64)
    if model.kind == 'none':
        return v.copy()
    if v.shape[-1] != model.v_mu.shape[0]:
        raise ShapeError(f"refiner expects {model.v_mu.shape[0]} features, got {v.shape[-1]}")
    flat = flat_features(model)
    span = np.where(flat, 1.0, model.v_max - model.v_min)
    if model.kind == 'scale':
        return (v - model.v_min) / span
    if model.kind == 'standard':
        sigma = np.where(flat, 1.0, model.v_sigma)
        return (v - model.v_mu) / sigma
    if model.kind == 'norm':
        return (v - model.v_mu) / span
    raise ValidationError(f"unknown refiner '{model.kind}'")
