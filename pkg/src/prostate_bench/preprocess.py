"""Slice preprocessing: CLAHE, resizing to the training grid and z-scoring.

The per-slice pipeline is ``adaptive_hist_eq -> resize``; ``normalize`` runs
at batch time inside the estimator.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from skimage.transform import resize as _sk_resize
from sklearn.base import BaseEstimator, TransformerMixin

from .validation import check_image, check_masks, check_slices
from .volume_io import DatasetId, MaskVolume, Volume

log = logging.getLogger(__name__)


@dataclass(eq=False)
class SliceSample:
    image: np.ndarray
    mask: np.ndarray
    dataset_id: DatasetId
    case_id: str
    slice_index: int
    native_shape: tuple[int, int] | None = None

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        self.mask = np.asarray(self.mask, dtype=np.uint8)
        if self.image.shape != self.mask.shape:
            raise ValueError(f"image shape {self.image.shape} != mask shape {self.mask.shape}")
        if self.native_shape is None:
            self.native_shape = self.image.shape
        self.native_shape = tuple(int(s) for s in self.native_shape)

    @property
    def provenance(self) -> tuple[str, str, int]:
        return (DatasetId(self.dataset_id).value, self.case_id, self.slice_index)

    def replace(self, image=None, mask=None) -> SliceSample:
        return SliceSample(
            self.image if image is None else image,
            self.mask if mask is None else mask,
            self.dataset_id, self.case_id, self.slice_index, self.native_shape,
        )


def _tile_edges(n: int, tiles: int) -> np.ndarray:
    return np.round(np.linspace(0, n, tiles + 1)).astype(int)


def _interp_index(n: int, centers: np.ndarray):
    """Lower/upper tile index and upper weight for every pixel coordinate."""
    pos = np.arange(n, dtype=np.float64)
    hi = np.searchsorted(centers, pos, side="right")
    lo = np.clip(hi - 1, 0, len(centers) - 1)
    hi = np.clip(hi, 0, len(centers) - 1)
    span = centers[hi] - centers[lo]
    w = np.where(span > 0, (pos - centers[lo]) / np.where(span > 0, span, 1.0), 0.0)
    return lo, hi, np.clip(w, 0.0, 1.0)


def tile_mappings(bins: np.ndarray, grid: tuple[int, int], clip_limit: float, nbins: int) -> np.ndarray:
    """Clipped-histogram CDF lookup tables, shape ``(gy, gx, nbins)``."""
    gy, gx = grid
    ey, ex = _tile_edges(bins.shape[0], gy), _tile_edges(bins.shape[1], gx)
    maps = np.empty((gy, gx, nbins))
    for i in range(gy):
        for j in range(gx):
            tile = bins[ey[i]:ey[i + 1], ex[j]:ex[j + 1]]
            hist = np.bincount(tile.ravel(), minlength=nbins).astype(np.float64)
            n = tile.size
            if np.isfinite(clip_limit):
                clip = max(clip_limit * n / nbins, 1.0)
                excess = np.maximum(hist - clip, 0.0).sum()
                hist = np.minimum(hist, clip) + excess / nbins
            maps[i, j] = np.cumsum(hist) / n
    return np.clip(maps, 0.0, 1.0)


def adaptive_hist_eq(image, clip_limit: float = 2.0, grid=(8, 8), nbins: int = 256,
                     value_range=None) -> np.ndarray:
    """Contrast-limited adaptive histogram equalisation.

    The image is first scaled to [0, 1] using ``value_range`` (default: its
    own min/max) and quantised to ``nbins`` levels. Each tile of the
    ``grid`` gets a histogram whose bins are capped at
    ``clip_limit * tile_pixels / nbins``; the clipped excess is spread
    evenly over all bins and the resulting CDF becomes the tile's mapping.
    Pixels blend the mappings of the four nearest tile centres bilinearly.
    ``clip_limit=np.inf`` disables clipping. Output lies in [0, 1].
    """
    img = check_image(image).astype(np.float64)
    if not clip_limit > 0:
        raise ValueError(f"clip_limit must be > 0, got {clip_limit}")
    gy, gx = (int(g) for g in grid)
    if gy < 1 or gx < 1:
        raise ValueError(f"grid must be positive, got {grid}")
    h, w = img.shape
    gy, gx = min(gy, h), min(gx, w)

    lo, hi = (float(img.min()), float(img.max())) if value_range is None else map(float, value_range)
    scaled = (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)
    bins = np.clip((np.clip(scaled, 0.0, 1.0) * nbins).astype(np.int64), 0, nbins - 1)

    maps = tile_mappings(bins, (gy, gx), clip_limit, nbins)
    ey, ex = _tile_edges(h, gy), _tile_edges(w, gx)
    cy = (ey[:-1] + ey[1:] - 1) / 2.0
    cx = (ex[:-1] + ex[1:] - 1) / 2.0
    y0, y1, wy = _interp_index(h, cy)
    x0, x1, wx = _interp_index(w, cx)
    wy, wx = wy[:, None], wx[None, :]
    Y0, Y1, X0, X1 = y0[:, None], y1[:, None], x0[None, :], x1[None, :]
    out = ((1 - wy) * (1 - wx) * maps[Y0, X0, bins]
           + (1 - wy) * wx * maps[Y0, X1, bins]
           + wy * (1 - wx) * maps[Y1, X0, bins]
           + wy * wx * maps[Y1, X1, bins])
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def normalize(image) -> np.ndarray:
    """Per-slice z-score; a constant slice maps to zeros."""
    img = check_image(image).astype(np.float64)
    std = img.std()
    if std == 0 or not np.isfinite(std):
        return np.zeros(img.shape, dtype=np.float32)
    return ((img - img.mean()) / std).astype(np.float32)


def normalize_batch(images: np.ndarray) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64)
    axes = tuple(range(1, x.ndim))
    mean = x.mean(axis=axes, keepdims=True)
    std = x.std(axis=axes, keepdims=True)
    out = np.where(std > 0, (x - mean) / np.where(std > 0, std, 1.0), 0.0)
    return out.astype(np.float32)


def resize_image(image, out) -> np.ndarray:
    image = np.asarray(image)
    out = tuple(int(o) for o in out)
    if image.shape == out:
        return image.astype(np.float32, copy=True)
    downsampling = any(o < s for o, s in zip(out, image.shape))
    return _sk_resize(image.astype(np.float64), out, order=1, mode="edge",
                      anti_aliasing=downsampling, preserve_range=True).astype(np.float32)


def resize_mask(mask, out) -> np.ndarray:
    mask = np.asarray(mask)
    out = tuple(int(o) for o in out)
    if mask.shape == out:
        return mask.astype(np.uint8, copy=True)
    return _sk_resize(mask.astype(np.uint8), out, order=0, mode="edge", anti_aliasing=False,
                      preserve_range=True).astype(np.uint8)


def resize(image, mask, out) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear resize of ``image`` and nearest-neighbour resize of ``mask``."""
    out = tuple(int(o) for o in out)
    if len(out) != 2 or min(out) < 1:
        raise ValueError(f"output size must be two positive ints, got {out}")
    image = np.asarray(image)
    mask = np.asarray(mask)
    if image.shape != mask.shape:
        raise ValueError(f"image shape {image.shape} != mask shape {mask.shape}")
    return resize_image(image, out), resize_mask(mask, out)


def _param(cfg, name, default):
    return getattr(cfg, name, default) if cfg is not None else default


def volume_to_samples(vol: Volume, mask: MaskVolume, cfg=None) -> list[SliceSample]:
    """Split a case into axial :class:`SliceSample` objects at training size.

    ``cfg`` is read for ``resolution``, ``clahe_clip_limit``, ``clahe_grid``
    and ``drop_empty_slices`` (a :class:`~prostate_bench.config.TrainConfig`
    fits). Intensities are scaled to [0, 1] with the volume's min/max before
    per-slice CLAHE.
    """
    if vol.dims != mask.dims:
        raise ValueError(f"volume dims {vol.dims} != mask dims {mask.dims} for case {vol.case_id}")
    res = int(_param(cfg, "resolution", 448))
    clip = float(_param(cfg, "clahe_clip_limit", 2.0))
    grid = tuple(_param(cfg, "clahe_grid", (8, 8)))
    drop_empty = bool(_param(cfg, "drop_empty_slices", False))
    vr = (float(vol.voxels.min()), float(vol.voxels.max()))
    samples = []
    for z in range(vol.depth):
        if drop_empty and not mask.labels[z].any():
            continue
        img = adaptive_hist_eq(vol.voxels[z], clip, grid, value_range=vr)
        img, m = resize(img, mask.labels[z], (res, res))
        samples.append(SliceSample(img, m, vol.dataset_id, vol.case_id, z, vol.dims[1:]))
    return samples


def pipeline_key(vol_source: str, case_id: str, dataset_id, cfg=None) -> str:
    params = {
        "source": str(vol_source),
        "case": case_id,
        "dataset": DatasetId(dataset_id).value,
        "resolution": int(_param(cfg, "resolution", 448)),
        "clip": float(_param(cfg, "clahe_clip_limit", 2.0)),
        "grid": list(_param(cfg, "clahe_grid", (8, 8))),
        "drop_empty": bool(_param(cfg, "drop_empty_slices", False)),
        "channel": int(_param(cfg, "decathlon_channel", 0)),
        "version": 1,
    }
    return hashlib.sha256(json.dumps(params, sort_keys=True).encode()).hexdigest()[:24]


class SampleCache:
    """One compressed ``.npz`` per case under ``directory``."""

    def __init__(self, directory):
        self.directory = Path(directory)

    def _path(self, key: str) -> Path:
        return self.directory / f"{key}.npz"

    def get(self, key: str, dataset_id, case_id: str) -> list[SliceSample] | None:
        path = self._path(key)
        if not path.is_file():
            return None
        with np.load(path) as data:
            images, masks = data["images"], data["masks"]
            indices, native = data["indices"], tuple(data["native_shape"])
        return [SliceSample(images[i], masks[i], dataset_id, case_id, int(indices[i]), native)
                for i in range(len(indices))]

    def put(self, key: str, samples: list[SliceSample]) -> None:
        if not samples:
            return
        self.directory.mkdir(parents=True, exist_ok=True)
        tmp = self._path(key).with_suffix(".tmp.npz")
        np.savez_compressed(
            tmp,
            images=np.stack([s.image for s in samples]),
            masks=np.stack([s.mask for s in samples]),
            indices=np.array([s.slice_index for s in samples]),
            native_shape=np.array(samples[0].native_shape),
        )
        tmp.replace(self._path(key))


class SlicePreprocessor(TransformerMixin, BaseEstimator):
    """Transformer applying CLAHE and resizing to a stack of raw slices.

    ``transform`` takes ``(n, H, W)`` raw intensities and returns
    ``(n, resolution, resolution)`` float32 images in [0, 1]. Stateless; ``fit``
    only validates its parameters.
    """

    def __init__(self, resolution=448, clip_limit=2.0, grid=(8, 8), value_range=None):
        self.resolution = resolution
        self.clip_limit = clip_limit
        self.grid = grid
        self.value_range = value_range

    def fit(self, X, y=None):
        check_slices(X)
        if int(self.resolution) < 1:
            raise ValueError(f"resolution must be >= 1, got {self.resolution}")
        self.n_features_in_ = int(np.prod(np.asarray(X).shape[-2:]))
        return self

    def transform(self, X):
        X = check_slices(X)
        out = (self.resolution, self.resolution)
        return np.stack([
            resize_image(adaptive_hist_eq(x, self.clip_limit, self.grid, value_range=self.value_range), out)
            for x in X
        ])

    def transform_masks(self, y):
        y = check_masks(y)
        return np.stack([resize_mask(m, (self.resolution, self.resolution)) for m in y])


class SliceStandardizer(TransformerMixin, BaseEstimator):
    """Per-slice z-scoring as a transformer (statistics are never pooled)."""

    def fit(self, X, y=None):
        check_slices(X)
        return self

    def transform(self, X):
        return normalize_batch(check_slices(X))
