"""DICOM series assembly (single series, one slice per file)."""
from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
import pydicom
from pydicom.dataset import FileDataset, FileMetaDataset
from pydicom.errors import InvalidDicomError
from pydicom.uid import ExplicitVRLittleEndian, MRImageStorage, generate_uid

from .volume import DatasetId, Volume, VolumeParseError

log = logging.getLogger(__name__)


def _iter_files(directory: Path):
    for p in sorted(directory.rglob("*")):
        if p.is_file() and not p.name.startswith("."):
            yield p


def _read_slices(directory: Path):
    slices = []
    for p in _iter_files(directory):
        try:
            ds = pydicom.dcmread(p)
        except (InvalidDicomError, OSError, EOFError, ValueError):
            log.debug("skipping unreadable file %s", p)
            continue
        if "PixelData" not in ds:
            continue
        slices.append((p, ds))
    return slices


def _slice_positions(datasets) -> np.ndarray | None:
    """Through-plane positions from ImagePositionPatient, or None if absent."""
    try:
        iop = np.asarray(datasets[0].ImageOrientationPatient, dtype=float)
        normal = np.cross(iop[:3], iop[3:])
        return np.array([float(np.dot(np.asarray(ds.ImagePositionPatient, dtype=float), normal))
                         for ds in datasets])
    except (AttributeError, ValueError, TypeError, IndexError):
        return None


def load_dicom_series(directory, dataset_id=DatasetId.ISBI2013, case_id: str | None = None) -> Volume:
    """Assemble every slice file under ``directory`` into one Volume.

    Slices are ordered by their ImagePositionPatient projected on the slice
    normal, falling back to InstanceNumber when positions are missing or not
    distinct.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise VolumeParseError("not a directory", field="path", path=directory)
    slices = _read_slices(directory)
    if not slices:
        raise VolumeParseError("zero readable slices", field="PixelData", path=directory)

    series = {str(getattr(ds, "SeriesInstanceUID", "")) for _, ds in slices}
    if len(series) > 1:
        raise VolumeParseError(f"mixed series: {len(series)} SeriesInstanceUIDs",
                               field="SeriesInstanceUID", path=directory)
    geometry = {(int(ds.Rows), int(ds.Columns)) for _, ds in slices}
    if len(geometry) > 1:
        raise VolumeParseError(f"inconsistent slice geometry {sorted(geometry)}",
                               field="Rows/Columns", path=directory)

    datasets = [ds for _, ds in slices]
    positions = _slice_positions(datasets)
    if positions is not None and len(np.unique(positions)) == len(positions):
        order = np.argsort(positions, kind="stable")
    else:
        positions = None
        order = np.argsort([int(getattr(ds, "InstanceNumber", 0) or 0) for ds in datasets], kind="stable")
    datasets = [datasets[i] for i in order]

    planes = []
    for ds in datasets:
        px = ds.pixel_array.astype(np.float64)
        slope = float(getattr(ds, "RescaleSlope", 1) or 1)
        intercept = float(getattr(ds, "RescaleIntercept", 0) or 0)
        planes.append(px * slope + intercept)
    voxels = np.stack(planes).astype(np.float32)

    first = datasets[0]
    if "PixelSpacing" in first:
        dy, dx = (float(v) for v in first.PixelSpacing)
    else:
        dy = dx = 1.0
    if positions is not None and len(positions) > 1:
        dz = float(np.median(np.diff(np.sort(positions))))
    else:
        dz = float(getattr(first, "SpacingBetweenSlices", 0) or getattr(first, "SliceThickness", 0) or 1.0)
    return Volume(voxels, (dx, dy, dz), case_id or directory.name, dataset_id,
                  meta={"source": str(directory), "series_uid": series.pop()})


def write_dicom_series(vol: Volume, directory, series_uid: str | None = None,
                       instance_order=None) -> Path:
    """Write an integer-valued Volume as one MR slice file per z index.

    Voxels must be integral and fit in int16; pixel data round-trips exactly.
    ``instance_order`` permutes the file names (not the geometry), which lets
    tests check that loading does not depend on directory order.
    """
    directory = Path(directory)
    vox = vol.voxels
    if not np.array_equal(vox, np.round(vox)) or vox.min() < -32768 or vox.max() > 32767:
        raise ValueError("DICOM writer needs integer voxels within int16 range")
    directory.mkdir(parents=True, exist_ok=True)
    uid_seed = [vol.dataset_id.value, vol.case_id]
    series_uid = series_uid or generate_uid(entropy_srcs=uid_seed + ["series"])
    study_uid = generate_uid(entropy_srcs=uid_seed + ["study"])
    frame_uid = generate_uid(entropy_srcs=uid_seed + ["frame"])
    dx, dy, dz = vol.spacing
    depth = vol.depth
    order = list(instance_order) if instance_order is not None else list(range(depth))

    for z in range(depth):
        sop_uid = generate_uid(entropy_srcs=uid_seed + [series_uid, str(z)])
        meta = FileMetaDataset()
        meta.MediaStorageSOPClassUID = MRImageStorage
        meta.MediaStorageSOPInstanceUID = sop_uid
        meta.TransferSyntaxUID = ExplicitVRLittleEndian
        ds = FileDataset(None, {}, file_meta=meta, preamble=b"\x00" * 128)
        ds.SOPClassUID = MRImageStorage
        ds.SOPInstanceUID = sop_uid
        ds.StudyInstanceUID = study_uid
        ds.SeriesInstanceUID = series_uid
        ds.FrameOfReferenceUID = frame_uid
        ds.Modality = "MR"
        ds.PatientID = vol.case_id
        ds.SeriesDescription = "T2W"
        ds.InstanceNumber = z + 1
        ds.ImagePositionPatient = [0.0, 0.0, float(z * dz)]
        ds.ImageOrientationPatient = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0]
        ds.PixelSpacing = [float(dy), float(dx)]
        ds.SliceThickness = float(dz)
        ds.Rows, ds.Columns = vox.shape[1], vox.shape[2]
        ds.SamplesPerPixel = 1
        ds.PhotometricInterpretation = "MONOCHROME2"
        ds.BitsAllocated = 16
        ds.BitsStored = 16
        ds.HighBit = 15
        ds.PixelRepresentation = 1
        ds.RescaleSlope = 1
        ds.RescaleIntercept = 0
        ds.PixelData = np.ascontiguousarray(vox[z], dtype="<i2").tobytes()
        ds.save_as(directory / f"IM{order[z] + 1:04d}.dcm", enforce_file_format=True)
    return directory


def probe_dicom_dir(directory) -> None:
    directory = Path(directory)
    for p in _iter_files(directory):
        try:
            pydicom.dcmread(p, stop_before_pixels=True)
            return
        except (InvalidDicomError, OSError, EOFError, ValueError):
            continue
    raise VolumeParseError("zero readable slices", field="PixelData", path=directory)
