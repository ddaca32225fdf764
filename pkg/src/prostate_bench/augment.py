"""Training-time augmentation: rotation, translation, flips, brightness,
contrast and Gaussian noise.

Geometric ops move image and mask together (mask by nearest neighbour);
photometric ops touch the image only. A draw is a pure function of the
``numpy.random.Generator`` handed in, so workers seeded with
:func:`sample_rng` reproduce each other exactly.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .preprocess import SliceSample
from .validation import check_non_negative, check_probability


@dataclass
class AugmentPolicy:
    max_rotation_deg: float = 10.0
    max_translate_frac: float = 0.1
    p_flip_h: float = 0.5
    p_flip_v: float = 0.5
    brightness: float = 0.2
    contrast: float = 0.2
    gaussian_noise_sigma: float = 0.05
    p_rotate: float = 0.5
    p_translate: float = 0.5
    p_brightness: float = 0.5
    p_contrast: float = 0.5
    p_noise: float = 0.5

    def __post_init__(self):
        for name, value in asdict(self).items():
            if name.startswith("p_"):
                setattr(self, name, check_probability(name, value))
            else:
                setattr(self, name, check_non_negative(name, value))

    @classmethod
    def identity(cls) -> AugmentPolicy:
        return cls(**{k: 0.0 for k in asdict(cls())})


@dataclass(frozen=True)
class AugmentParams:
    """One concrete draw of augmentation parameters."""

    angle_deg: float = 0.0
    shift: tuple[float, float] = (0.0, 0.0)
    flip_h: bool = False
    flip_v: bool = False
    brightness: float = 0.0
    contrast: float = 1.0
    noise_sigma: float = 0.0
    noise_seed: int = 0


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Independent stream for (global seed, epoch, sample index)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(epoch), int(index)]))


def draw_params(rng: np.random.Generator, policy: AugmentPolicy, shape) -> AugmentParams:
    # Every op consumes the same number of draws whether or not it fires, so
    # one op's probability never shifts another op's randomness.
    u = rng.random(7)
    angle = rng.uniform(-1.0, 1.0) * policy.max_rotation_deg
    shift = rng.uniform(-1.0, 1.0, size=2) * policy.max_translate_frac * np.asarray(shape, dtype=float)
    bright = rng.uniform(-1.0, 1.0) * policy.brightness
    contrast = 1.0 + rng.uniform(-1.0, 1.0) * policy.contrast
    noise_seed = int(rng.integers(0, 2**31 - 1))
    return AugmentParams(
        angle_deg=float(angle) if u[0] < policy.p_rotate else 0.0,
        shift=(float(shift[0]), float(shift[1])) if u[1] < policy.p_translate else (0.0, 0.0),
        flip_h=bool(u[2] < policy.p_flip_h),
        flip_v=bool(u[3] < policy.p_flip_v),
        brightness=float(bright) if u[4] < policy.p_brightness else 0.0,
        contrast=float(contrast) if u[5] < policy.p_contrast else 1.0,
        noise_sigma=policy.gaussian_noise_sigma if u[6] < policy.p_noise else 0.0,
        noise_seed=noise_seed,
    )


def affine_pair(image, mask, angle_deg: float = 0.0, shift=(0.0, 0.0)):
    """Rotate about the centre then translate by ``shift`` (rows, cols) pixels.

    Out-of-frame pixels take the image minimum and mask 0.
    """
    image = np.asarray(image, dtype=np.float32)
    mask = np.asarray(mask, dtype=np.uint8)
    if angle_deg == 0.0 and shift[0] == 0.0 and shift[1] == 0.0:
        return image.copy(), mask.copy()
    theta = np.deg2rad(angle_deg)
    c, s = np.cos(theta), np.sin(theta)
    # affine_transform maps output coords to input coords: in = R^-1 (out - centre - shift) + centre
    rot_inv = np.array([[c, s], [-s, c]])
    centre = (np.asarray(image.shape, dtype=float) - 1.0) / 2.0
    offset = centre - rot_inv @ (centre + np.asarray(shift, dtype=float))
    fill = float(image.min())
    img = ndimage.affine_transform(image, rot_inv, offset=offset, order=1, mode="constant", cval=fill)
    msk = ndimage.affine_transform(mask, rot_inv, offset=offset, order=0, mode="constant", cval=0)
    return img.astype(np.float32), msk.astype(np.uint8)


def flip_pair(image, mask, horizontal: bool = False, vertical: bool = False):
    image, mask = np.asarray(image), np.asarray(mask)
    if horizontal:
        image, mask = image[:, ::-1], mask[:, ::-1]
    if vertical:
        image, mask = image[::-1, :], mask[::-1, :]
    return np.ascontiguousarray(image), np.ascontiguousarray(mask)


def photometric(image, brightness: float = 0.0, contrast: float = 1.0, noise_sigma: float = 0.0,
                noise_seed: int = 0) -> np.ndarray:
    """Contrast about the mean, additive brightness, then Gaussian noise.

    Magnitudes are relative to the image's dynamic range.
    """
    img = np.asarray(image, dtype=np.float32)
    if brightness == 0.0 and contrast == 1.0 and noise_sigma == 0.0:
        return img.copy()
    span = float(img.max() - img.min()) or 1.0
    mean = float(img.mean())
    out = (img - mean) * contrast + mean + brightness * span
    if noise_sigma > 0:
        out = out + np.random.default_rng(noise_seed).normal(0.0, noise_sigma * span, img.shape)
    return out.astype(np.float32)


def apply_params(s: SliceSample, p: AugmentParams) -> SliceSample:
    image, mask = affine_pair(s.image, s.mask, p.angle_deg, p.shift)
    image, mask = flip_pair(image, mask, p.flip_h, p.flip_v)
    image = photometric(image, p.brightness, p.contrast, p.noise_sigma, p.noise_seed)
    return s.replace(image=image, mask=mask)


def augment_sample(s: SliceSample, rng: np.random.Generator, policy: AugmentPolicy) -> SliceSample:
    return apply_params(s, draw_params(rng, policy, s.image.shape))


def augment_arrays(image, mask, rng: np.random.Generator, policy: AugmentPolicy):
    p = draw_params(rng, policy, np.shape(image))
    image, mask = affine_pair(image, mask, p.angle_deg, p.shift)
    image, mask = flip_pair(image, mask, p.flip_h, p.flip_v)
    return photometric(image, p.brightness, p.contrast, p.noise_sigma, p.noise_seed), mask
