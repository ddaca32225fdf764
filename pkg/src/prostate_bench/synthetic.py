"""Deterministic synthetic stand-ins for the four prostate datasets.

Each family pairs a shape (circles, ellipses, squares, crescents) with its own
"acquisition protocol" (contrast polarity, noise level, bias field,
background texture) so that models trained on one family transfer imperfectly
to the others. Output uses the Promise12 layout:
``CaseNN.mhd`` + ``CaseNN_segmentation.mhd``.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .volume_io import DatasetId, MaskVolume, Volume, write_metaimage

FAMILIES = ("circles", "ellipses", "squares", "crescents")
DATASET_FAMILY = {
    DatasetId.PROMISE12: "circles",
    DatasetId.PROSTATEX: "ellipses",
    DatasetId.ISBI2013: "squares",
    DatasetId.DECATHLON: "crescents",
}
FOREGROUND_RANGE = (0.02, 0.10)
DEFAULT_SHAPE = (8, 448, 448)


@dataclass(frozen=True)
class Protocol:
    background: float
    foreground: float
    noise: float
    bias: float
    stripes: float
    spacing: tuple[float, float, float]


PROTOCOLS = {
    "circles": Protocol(300.0, 700.0, 40.0, 0.0, 0.0, (0.625, 0.625, 3.6)),
    "ellipses": Protocol(350.0, 620.0, 55.0, 0.35, 0.0, (0.5, 0.5, 3.0)),
    "squares": Protocol(650.0, 260.0, 45.0, 0.0, 0.0, (0.6, 0.6, 4.0)),
    "crescents": Protocol(280.0, 680.0, 35.0, 0.0, 90.0, (0.7, 0.7, 3.3)),
}


def _check_family(family: str) -> str:
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}; expected one of {FAMILIES}")
    return family


def case_rng(family: str, seed: int, case_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), FAMILIES.index(family), int(case_index)]))


def case_params(family: str, seed: int, case_index: int, shape=DEFAULT_SHAPE) -> list[dict]:
    """Per-slice shape parameters for one case, in pixel units."""
    _check_family(family)
    depth, h, w = shape
    rng = case_rng(family, seed, case_index)
    scale = min(h, w) / 448.0
    if family == "circles":
        base = {"r": rng.uniform(48, 70)}
    elif family == "ellipses":
        base = {"a": rng.uniform(62, 85), "b": rng.uniform(38, 50), "theta": rng.uniform(0, np.pi)}
    elif family == "squares":
        base = {"s": rng.uniform(90, 125), "theta": rng.uniform(-0.3, 0.3)}
    else:
        base = {"r": rng.uniform(68, 88), "cut": rng.uniform(0.7, 0.8), "phi": rng.uniform(0, 2 * np.pi)}
    cy0, cx0 = (h - 1) / 2 + rng.normal(0, 12 * scale), (w - 1) / 2 + rng.normal(0, 12 * scale)
    out = []
    for z in range(depth):
        # Gland cross-section shrinks toward apex and base.
        size = 0.75 + 0.25 * np.sin(np.pi * (z + 0.5) / depth)
        p = {"cy": cy0 + rng.normal(0, 3 * scale), "cx": cx0 + rng.normal(0, 3 * scale)}
        for k, v in base.items():
            p[k] = v * size * scale if k in ("r", "a", "b", "s") else v
        out.append(p)
    return out


def shape_mask(family: str, p: dict, hw) -> np.ndarray:
    """Analytic mask of one slice, evaluated at pixel centres."""
    h, w = hw
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - p["cy"], xx - p["cx"]
    if family == "circles":
        m = dx ** 2 + dy ** 2 <= p["r"] ** 2
    elif family == "ellipses":
        c, s = np.cos(p["theta"]), np.sin(p["theta"])
        u, v = c * dx + s * dy, -s * dx + c * dy
        m = (u / p["a"]) ** 2 + (v / p["b"]) ** 2 <= 1.0
    elif family == "squares":
        c, s = np.cos(p["theta"]), np.sin(p["theta"])
        u, v = c * dx + s * dy, -s * dx + c * dy
        m = (np.abs(u) <= p["s"] / 2) & (np.abs(v) <= p["s"] / 2)
    elif family == "crescents":
        r = p["r"]
        off = 0.45 * r
        oy, ox = off * np.sin(p["phi"]), off * np.cos(p["phi"])
        m = (dx ** 2 + dy ** 2 <= r ** 2) & ((dx - ox) ** 2 + (dy - oy) ** 2 > (p["cut"] * r) ** 2)
    else:
        raise ValueError(f"unknown family {family!r}")
    return m.astype(np.uint8)


def render_case(family: str, seed: int, case_index: int, shape=DEFAULT_SHAPE) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(int16 image, uint8 mask)`` arrays of shape ``(D, H, W)``."""
    _check_family(family)
    depth, h, w = shape
    proto = PROTOCOLS[family]
    params = case_params(family, seed, case_index, shape)
    noise_rng = np.random.default_rng(np.random.SeedSequence([int(seed), FAMILIES.index(family), int(case_index), 1]))
    mask = np.stack([shape_mask(family, p, (h, w)) for p in params])
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    field = np.ones((h, w))
    if proto.bias:
        ang = noise_rng.uniform(0, 2 * np.pi)
        field = 1.0 + proto.bias * ((np.cos(ang) * xx / w + np.sin(ang) * yy / h) - 0.5)
    texture = np.zeros((h, w))
    if proto.stripes:
        period = noise_rng.uniform(20, 40)
        texture = proto.stripes * np.sin(2 * np.pi * (xx + 0.5 * yy) / period)
    image = np.empty(shape, dtype=np.float64)
    for z in range(depth):
        base = np.where(mask[z] > 0, proto.foreground, proto.background + texture)
        image[z] = base * field + noise_rng.normal(0.0, proto.noise, (h, w))
    image = np.clip(np.round(image), 0, 4095).astype(np.int16)
    return image, mask


def generate_dataset(family: str, n_cases: int, seed: int, out_dir, shape=DEFAULT_SHAPE,
                     dataset_id: DatasetId | str | None = None) -> Path:
    """Write ``n_cases`` MetaImage image/mask pairs for ``family`` under ``out_dir``."""
    _check_family(family)
    if n_cases < 5:
        raise ValueError(f"n_cases must be >= 5, got {n_cases}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if dataset_id is None:
        dataset_id = next(d for d, f in DATASET_FAMILY.items() if f == family)
    spacing = PROTOCOLS[family].spacing
    for i in range(n_cases):
        image, mask = render_case(family, seed, i, shape)
        cid = f"Case{i:02d}"
        write_metaimage(Volume(image, spacing, cid, dataset_id), out / f"{cid}.mhd", element_type="MET_SHORT")
        write_metaimage(MaskVolume(mask, spacing, cid, dataset_id), out / f"{cid}_segmentation.mhd")
    return out


def generate_benchmark(root, n_cases: int = 10, seed: int = 42, shape=DEFAULT_SHAPE) -> dict[str, Path]:
    """One dataset directory per family, named after the dataset it stands in for."""
    root = Path(root)
    return {
        d.value: generate_dataset(fam, n_cases, seed, root / d.value, shape, d)
        for d, fam in DATASET_FAMILY.items()
    }
