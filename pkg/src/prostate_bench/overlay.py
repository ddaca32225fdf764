"""Contour overlays for visual inspection: prediction in green, ground truth
in red, drawn over the native-resolution grayscale slice."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .losses import dsc
from .volume_io import DatasetId, MaskVolume, Volume

GREEN = (0, 255, 0)
RED = (255, 0, 0)
# 4-connected structuring element: a contour pixel touches background along an edge.
_CROSS = ndimage.generate_binary_structure(2, 1)


def contour(mask) -> np.ndarray:
    """Boundary pixels of a 2D mask (the mask minus its 4-connected erosion)."""
    m = np.asarray(mask) != 0
    if m.ndim != 2:
        raise ValueError(f"expected a 2D mask, got shape {m.shape}")
    return m & ~ndimage.binary_erosion(m, structure=_CROSS, border_value=0)


def to_gray_rgb(image) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    lo, hi = float(img.min()), float(img.max())
    g = np.zeros(img.shape, np.uint8) if hi <= lo else np.round((img - lo) / (hi - lo) * 255).astype(np.uint8)
    return np.repeat(g[..., None], 3, axis=2)


def render_overlay(image, pred, gt) -> np.ndarray:
    """RGB uint8 slice with the ground-truth contour in red and the
    prediction contour drawn after it in green."""
    image = np.asarray(image)
    if np.shape(pred) != image.shape or np.shape(gt) != image.shape:
        raise ValueError(f"dim mismatch: image {image.shape}, pred {np.shape(pred)}, gt {np.shape(gt)}")
    rgb = to_gray_rgb(image)
    rgb[contour(gt)] = RED
    rgb[contour(pred)] = GREEN
    return rgb


def overlay_filename(dataset_id, case_id: str, slice_index: int, score: float) -> str:
    return f"{DatasetId(dataset_id).value}_{case_id}_slice{slice_index:03d}_dsc{score:.2f}.png"


def write_overlays(volume: Volume, pred: MaskVolume, gt: MaskVolume, out_dir, slices=None) -> list[Path]:
    """One PNG per slice; the filename carries the slice DSC."""
    if pred.labels.shape != volume.voxels.shape or gt.labels.shape != volume.voxels.shape:
        raise ValueError("volume, prediction and ground truth must share dims")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    depth = volume.voxels.shape[0]
    indices = range(depth) if slices is None else slices
    paths = []
    for z in indices:
        if not 0 <= z < depth:
            raise IndexError(f"slice {z} out of range 0..{depth - 1}")
        rgb = render_overlay(volume.voxels[z], pred.labels[z], gt.labels[z])
        path = out_dir / overlay_filename(volume.dataset_id, volume.case_id, z, dsc(pred.labels[z], gt.labels[z]))
        Image.fromarray(rgb, mode="RGB").save(path)
        paths.append(path)
    return paths
