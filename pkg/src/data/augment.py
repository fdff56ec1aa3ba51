"""Synthetic visual disturbances for grayscale frames.

Six kinds: blockages, blur, fog, noise, shift and spatter. A DisturbanceSpec
fixes the sampled parameters and a seed for any per-pixel randomness, so
applying the same spec to the same image always gives the same bytes.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from src.config import DISTURBANCE_KINDS, DISTURBANCE_RANGES
from src.core.numeric import derive_seed, make_rng
from src.data.collector import with_frames
from src.errors import ValidationError

logger = logging.getLogger(__name__)

KIND_STREAMS = {kind: 10 + i for i, kind in enumerate(DISTURBANCE_KINDS)}
PIXEL_STREAM = 1
MAX_OCCLUSION_REDRAWS = 10
SNAP_TOL = 1e-9  # source coordinates this close to a pixel centre sample it exactly


@dataclass(frozen=True)
class DisturbanceSpec:
    kind: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in DISTURBANCE_KINDS:
            raise ValidationError(f"unknown disturbance '{self.kind}', expected one of {DISTURBANCE_KINDS}")

    def to_dict(self):
        return {'kind': self.kind, 'params': self.params, 'seed': self.seed}


def sample_params(kind, rng):
    """Draw one parameter set for `kind` from the configured ranges"""
    ranges = DISTURBANCE_RANGES.get(kind)
    if ranges is None:
        raise ValidationError(f"unknown disturbance '{kind}'")
    if kind == 'blockages':
        lo, hi = ranges['count']
        rects = []
        for _ in range(int(rng.integers(lo, hi + 1))):
            h, w = rng.uniform(*ranges['side_frac'], size=2)
            rects.append({'top': float(rng.uniform(0.0, 1.0 - h)), 'left': float(rng.uniform(0.0, 1.0 - w)),
                          'height': float(h), 'width': float(w)})
        return {'rects': rects, 'fill': ranges['fill']}
    if kind == 'blur':
        return {'radius': float(rng.uniform(*ranges['radius']))}
    if kind == 'fog':
        return {'strength': float(rng.uniform(*ranges['strength'])),
                'octaves': ranges['octaves'], 'base_cells': ranges['base_cells']}
    if kind == 'noise':
        return {'sigma': float(rng.uniform(*ranges['sigma']))}
    if kind == 'shift':
        jitter = rng.uniform(-ranges['jitter_frac'], ranges['jitter_frac'], size=(4, 2))
        return {'corners': jitter.tolist()}
    return {'coverage': float(rng.uniform(*ranges['coverage'])),
            'blob_sigma': ranges['blob_sigma'], 'ink': ranges['ink']}


def draw_spec(kind, seed):
    """A fully sampled spec for `kind` from `seed`"""
    return DisturbanceSpec(kind, sample_params(kind, make_rng(seed)), int(seed))


def _blockages(img, params, rng):
    n = img.shape[0]
    out = img.copy()
    for r in params['rects']:
        top, left = int(round(r['top'] * n)), int(round(r['left'] * n))
        h, w = max(1, int(round(r['height'] * n))), max(1, int(round(r['width'] * n)))
        out[top:top + h, left:left + w] = params['fill']
    return out


def disc_kernel(radius):
    """Normalized disc of the given pixel radius"""
    reach = int(np.ceil(radius))
    yy, xx = np.mgrid[-reach:reach + 1, -reach:reach + 1]
    kernel = (xx * xx + yy * yy <= radius * radius).astype(np.float64)
    return kernel / kernel.sum()


def _blur(img, params, rng):
    return ndimage.convolve(img, disc_kernel(params['radius']), mode='nearest')


def value_noise(n, rng, octaves=3, base_cells=4):
    """Multi-octave value noise in [0, 1]: random lattices, bilinearly upsampled"""
    total = np.zeros((n, n))
    weight = 0.0
    for o in range(octaves):
        cells = base_cells * 2 ** o
        lattice = rng.random((cells + 1, cells + 1))
        coords = np.linspace(0.0, cells, n)
        rows, cols = np.meshgrid(coords, coords, indexing='ij')
        amplitude = 0.5 ** o
        total += amplitude * ndimage.map_coordinates(lattice, [rows, cols], order=1, mode='nearest')
        weight += amplitude
    return total / weight


def _fog(img, params, rng):
    noise = value_noise(img.shape[0], rng, params['octaves'], params['base_cells'])
    mask = np.clip(params['strength'] * noise / noise.mean(), 0.0, 1.0)
    return img * (1.0 - mask) + mask


def _noise(img, params, rng):
    if params['sigma'] == 0.0:
        return img.copy()
    return img + rng.normal(0.0, params['sigma'], size=img.shape)


def homography(src, dst):
    """3x3 H with H @ [src, 1] ~ [dst, 1] for four point pairs"""
    a, b = [], []
    for (x, y), (u, v) in zip(src, dst):
        a.append([x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y])
        a.append([0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y])
        b.extend([u, v])
    h = np.linalg.solve(np.asarray(a), np.asarray(b))
    return np.append(h, 1.0).reshape(3, 3)


def _shift(img, params, rng):
    n = img.shape[0]
    edge = float(n - 1)
    unit = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])  # (col, row) / edge
    moved = unit + np.asarray(params['corners']) * n / edge
    # inverse map, output pixel -> source pixel, solved in unit coordinates
    h = homography(moved, unit)
    rows, cols = np.mgrid[0:n, 0:n].astype(np.float64) / edge
    pts = h @ np.stack([cols.ravel(), rows.ravel(), np.ones(n * n)])
    src = np.stack([pts[1] / pts[2], pts[0] / pts[2]]).reshape(2, n, n) * edge
    snapped = np.round(src)
    src = np.where(np.abs(src - snapped) < SNAP_TOL, snapped, src)
    return ndimage.map_coordinates(img, src, order=1, mode='constant', cval=1.0)


def _spatter(img, params, rng):
    n = img.shape[0]
    field_ = ndimage.gaussian_filter(rng.standard_normal((n, n)), params['blob_sigma'] * n / 64.0)
    mask = field_ > np.quantile(field_, 1.0 - params['coverage'])
    return np.where(mask, np.minimum(img, params['ink']), img)


_APPLY = {
    'blockages': _blockages,
    'blur': _blur,
    'fog': _fog,
    'noise': _noise,
    'shift': _shift,
    'spatter': _spatter,
}


def apply_disturbance(image, spec):
    """Disturbed copy of a grayscale (n, n, 1) image, clamped to [0, 1]"""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 1 or image.shape[0] != image.shape[1]:
        raise ValidationError(f"disturbances need a square grayscale (n, n, 1) image, got {image.shape}")
    rng = make_rng(spec.seed, PIXEL_STREAM)
    out = _APPLY[spec.kind](image[..., 0], spec.params, rng)
    return np.clip(out, 0.0, 1.0)[..., None]


def hides_everything(image, disturbed, dark=0.5):
    """True when the frame had dark pixels and none survive the disturbance"""
    return bool(np.any(image < dark)) and not np.any(disturbed < dark)


def frame_spec(kind, seed, index, attempt=0):
    return draw_spec(kind, derive_seed(seed, KIND_STREAMS[kind], index, attempt))


def disturb_frame(image, kind, seed, index, drop_occluding=False):
    """Disturb frame `index` with its own derived spec; returns (image, spec)"""
    spec = frame_spec(kind, seed, index)
    out = apply_disturbance(image, spec)
    if kind == 'blockages' and drop_occluding:
        for attempt in range(1, MAX_OCCLUSION_REDRAWS + 1):
            if not hides_everything(image, out):
                break
            spec = frame_spec(kind, seed, index, attempt)
            out = apply_disturbance(image, spec)
    return out, spec


def disturbed_copies(images, kind, seed, indices=None, drop_occluding=False):
    """One disturbed copy per image; `indices` gives each image's frame id for seeding"""
    indices = np.arange(len(images)) if indices is None else indices
    out = np.empty_like(np.asarray(images, dtype=np.float64))
    for row, (image, index) in enumerate(zip(images, indices)):
        out[row], _ = disturb_frame(image, kind, seed, int(index), drop_occluding)
    return out


def augment_dataset(dataset, kinds, seed, drop_occluding=False):
    """Append one disturbed copy of every original frame per requested kind.

    Copies keep the source label and join the source frame's split.
    """
    if len(dataset) == 0:
        raise ValidationError("cannot augment an empty dataset")
    for kind in kinds:
        if kind not in DISTURBANCE_KINDS:
            raise ValidationError(f"unknown disturbance '{kind}'")
    originals = np.flatnonzero(np.asarray(dataset.kinds) == 'original')
    done = list(dataset.meta.get('augment_kinds', []))
    for kind in kinds:
        if kind in done:
            logger.warning(f"Dataset already augmented with {kind}; skipping")
            continue
        images = disturbed_copies(dataset.images[originals], kind, seed,
                                  dataset.source_index[originals], drop_occluding).astype(np.float32).astype(np.float64)
        done.append(kind)
        dataset = with_frames(dataset, images, dataset.labels[originals],
                              dataset.source_index[originals], [kind] * len(originals), done)
        logger.info(f"Augmented with {kind}: {len(originals)} frames added, {len(dataset)} total")
    dataset.meta['augment_seed'] = int(seed)
    return dataset
