"""Readers and writers for the four datasets' on-disk formats."""
from .dicom import load_dicom_series, write_dicom_series
from .manifest import (
    CaseEntry,
    DatasetManifest,
    NoCasesError,
    build_manifest,
    load_case,
    load_image,
    load_mask,
)
from .metaimage import (
    load_metaimage,
    load_metaimage_mask,
    write_metaimage,
    write_metaimage_array,
)
from .nifti import (
    load_nifti,
    load_nifti_channels,
    load_nifti_mask,
    write_nifti,
    write_nifti_array,
)
from .nrrd import load_nrrd_mask
from .volume import (
    DATASET_IDS,
    DatasetId,
    MaskVolume,
    Volume,
    VolumeParseError,
    as_dataset_id,
)

__all__ = [
    "DATASET_IDS",
    "CaseEntry",
    "DatasetId",
    "DatasetManifest",
    "MaskVolume",
    "NoCasesError",
    "Volume",
    "VolumeParseError",
    "as_dataset_id",
    "build_manifest",
    "load_case",
    "load_dicom_series",
    "load_image",
    "load_mask",
    "load_metaimage",
    "load_metaimage_mask",
    "load_nifti",
    "load_nifti_channels",
    "load_nifti_mask",
    "load_nrrd_mask",
    "write_dicom_series",
    "write_metaimage",
    "write_metaimage_array",
    "write_nifti",
    "write_nifti_array",
]
