"""Volume containers shared by every loader."""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np


class DatasetId(str, Enum):
    PROMISE12 = "promise12"
    PROSTATEX = "prostatex"
    ISBI2013 = "isbi2013"
    DECATHLON = "decathlon"

    def __str__(self) -> str:
        return self.value


DATASET_IDS = tuple(d.value for d in DatasetId)


class VolumeParseError(ValueError):
    """Raised when an on-disk volume cannot be decoded.

    ``field`` names the header field or structural element at fault, when
    there is one.
    """

    def __init__(self, message: str, field: str | None = None, path=None):
        self.field = field
        self.path = path
        prefix = f"{path}: " if path is not None else ""
        super().__init__(prefix + message)


def as_dataset_id(value) -> DatasetId:
    try:
        return DatasetId(str(value))
    except ValueError:
        raise ValueError(
            f"unknown dataset id {value!r}; expected one of {', '.join(DATASET_IDS)}"
        ) from None


def _check_spacing(spacing) -> tuple[float, float, float]:
    sp = tuple(float(s) for s in spacing)
    if len(sp) != 3:
        raise ValueError(f"spacing must have 3 components, got {len(sp)}")
    if not all(np.isfinite(s) and s > 0 for s in sp):
        raise ValueError(f"spacing components must be > 0, got {sp}")
    return sp


@dataclass(eq=False)
class Volume:
    """A 3D scalar image, indexed ``voxels[z, y, x]``.

    ``spacing`` is ``(dx, dy, dz)`` in millimetres, i.e. in the reverse order
    of the array axes, which is how every supported file format stores it.
    """

    voxels: np.ndarray
    spacing: tuple[float, float, float]
    case_id: str
    dataset_id: DatasetId = DatasetId.PROMISE12
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        vox = np.asarray(self.voxels)
        if vox.ndim == 2:
            vox = vox[np.newaxis]
        if vox.ndim != 3:
            raise ValueError(f"voxels must be 3D, got shape {vox.shape}")
        if min(vox.shape) < 1:
            raise ValueError(f"dims must all be >= 1, got {vox.shape}")
        self.voxels = np.ascontiguousarray(vox, dtype=np.float32)
        self.spacing = _check_spacing(self.spacing)
        self.case_id = str(self.case_id)
        self.dataset_id = as_dataset_id(self.dataset_id)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.voxels.shape)

    @property
    def depth(self) -> int:
        return self.voxels.shape[0]

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.case_id == other.case_id
            and self.dataset_id == other.dataset_id
            and np.allclose(self.spacing, other.spacing, rtol=0, atol=1e-6)
            and np.array_equal(self.voxels, other.voxels)
        )


@dataclass(eq=False)
class MaskVolume:
    """Binary prostate mask paired with a :class:`Volume`.

    Any nonzero label (e.g. separate peripheral and transition zones) is
    collapsed to 1 on construction.
    """

    labels: np.ndarray
    spacing: tuple[float, float, float]
    case_id: str
    dataset_id: DatasetId = DatasetId.PROMISE12

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim == 2:
            lab = lab[np.newaxis]
        if lab.ndim != 3:
            raise ValueError(f"labels must be 3D, got shape {lab.shape}")
        if min(lab.shape) < 1:
            raise ValueError(f"dims must all be >= 1, got {lab.shape}")
        self.labels = np.ascontiguousarray(lab != 0, dtype=np.uint8)
        self.spacing = _check_spacing(self.spacing)
        self.case_id = str(self.case_id)
        self.dataset_id = as_dataset_id(self.dataset_id)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.labels.shape)

    @classmethod
    def from_volume(cls, vol: Volume) -> MaskVolume:
        return cls(vol.voxels, vol.spacing, vol.case_id, vol.dataset_id)

    def __eq__(self, other):
        if not isinstance(other, MaskVolume):
            return NotImplemented
        return (
            self.case_id == other.case_id
            and self.dataset_id == other.dataset_id
            and np.array_equal(self.labels, other.labels)
        )
