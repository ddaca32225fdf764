"""Minimal NIfTI-1 reader/writer (single-file ``.nii``, optionally gzipped).

Only the parts of the header needed to recover the voxel grid are decoded:
``dim``, ``datatype``, ``pixdim``, ``vox_offset`` and the intensity scaling.
Orientation matrices are ignored; arrays come back indexed ``[z, y, x]``.
"""
from __future__ import annotations

import gzip
import struct
import zlib
from pathlib import Path

import numpy as np

from .volume import DatasetId, MaskVolume, Volume, VolumeParseError

HEADER_SIZE = 348
DATATYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
    768: np.uint32,
    1024: np.int64,
    1280: np.uint64,
}
_DTYPE_TO_CODE = {np.dtype(v): k for k, v in DATATYPES.items()}


def _read_bytes(path: Path) -> bytes:
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            return gzip.decompress(raw)
        except (OSError, EOFError, zlib.error) as exc:
            raise VolumeParseError(f"truncated stream ({exc})", field="gzip", path=path) from None
    return raw


def read_nifti_array(path) -> tuple[np.ndarray, tuple[float, ...], dict]:
    """Decode a NIfTI-1 file.

    Returns the array in file axis order reversed, i.e. ``[t, z, y, x]`` for
    4D data and ``[z, y, x]`` for 3D data, the spatial ``pixdim`` triple and a
    dict of the decoded header fields.
    """
    path = Path(path)
    if not path.is_file():
        raise VolumeParseError("file not found", field="path", path=path)
    blob = _read_bytes(path)
    if len(blob) < HEADER_SIZE:
        raise VolumeParseError("truncated stream: header shorter than 348 bytes", field="header", path=path)

    for endian in "<>":
        if struct.unpack(endian + "i", blob[:4])[0] == HEADER_SIZE:
            break
    else:
        raise VolumeParseError("bad magic: sizeof_hdr is not 348", field="sizeof_hdr", path=path)
    magic = blob[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise VolumeParseError(f"bad magic {magic!r}", field="magic", path=path)
    if magic == b"ni1\x00":
        raise VolumeParseError("two-file (.hdr/.img) NIfTI not supported", field="magic", path=path)

    dim = struct.unpack(endian + "8h", blob[40:56])
    datatype, bitpix = struct.unpack(endian + "2h", blob[70:74])
    pixdim = struct.unpack(endian + "8f", blob[76:108])
    vox_offset, scl_slope, scl_inter = struct.unpack(endian + "3f", blob[108:120])

    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise VolumeParseError(f"dim[0] = {ndim} out of range", field="dim", path=path)
    shape = list(dim[1:1 + ndim])
    if any(s < 1 for s in shape):
        raise VolumeParseError(f"non-positive dim {shape}", field="dim", path=path)
    # Trailing singleton dimensions beyond 4 carry no information here.
    while len(shape) > 4 and shape[-1] == 1:
        shape.pop()
    if len(shape) > 4:
        raise VolumeParseError(f"{len(shape)}D data not supported", field="dim", path=path)
    while len(shape) < 3:
        shape.append(1)

    if datatype not in DATATYPES:
        raise VolumeParseError(f"unsupported datatype code {datatype}", field="datatype", path=path)
    dtype = np.dtype(DATATYPES[datatype]).newbyteorder(endian)

    offset = int(vox_offset) if vox_offset >= HEADER_SIZE else 352
    count = int(np.prod(shape))
    needed = offset + count * dtype.itemsize
    if len(blob) < needed:
        raise VolumeParseError(
            f"truncated stream: need {needed} bytes, have {len(blob)}", field="vox_offset", path=path
        )
    arr = np.frombuffer(blob, dtype=dtype, count=count, offset=offset)
    # NIfTI stores x fastest; a reversed C-order reshape yields [t, z, y, x].
    arr = arr.reshape(shape[::-1])

    if not np.isfinite(scl_slope) or not np.isfinite(scl_inter):
        scl_slope, scl_inter = 0.0, 0.0
    if scl_slope not in (0.0, 1.0) or (scl_slope != 0.0 and scl_inter != 0.0):
        arr = arr.astype(np.float64) * scl_slope + scl_inter

    spacing = tuple(abs(float(p)) if p and np.isfinite(p) else 1.0 for p in pixdim[1:4])
    header = {"dim": dim, "datatype": datatype, "bitpix": bitpix, "pixdim": pixdim,
              "vox_offset": vox_offset, "scl_slope": scl_slope, "scl_inter": scl_inter}
    return arr, spacing, header


def _case_id(path: Path) -> str:
    name = path.name
    for ext in (".nii.gz", ".nii"):
        if name.endswith(ext):
            return name[: -len(ext)]
    return path.stem


def _channels(arr: np.ndarray) -> int:
    return arr.shape[0] if arr.ndim == 4 else 1


def load_nifti_channels(path, channels=None, dataset_id=DatasetId.DECATHLON,
                        case_id: str | None = None) -> list[Volume]:
    """Load one :class:`Volume` per requested channel of a (possibly 4D) file."""
    path = Path(path)
    arr, spacing, header = read_nifti_array(path)
    n = _channels(arr)
    if channels is None:
        channels = range(n)
    out = []
    for c in channels:
        if not 0 <= c < n:
            raise VolumeParseError(f"channel {c} out of range for {n} channel(s)", field="dim", path=path)
        data = arr[c] if arr.ndim == 4 else arr
        out.append(Volume(data.astype(np.float32), spacing, case_id or _case_id(path), dataset_id,
                          meta={"source": str(path), "channel": c, "datatype": header["datatype"]}))
    return out


def load_nifti(path, channel: int = 0, dataset_id=DatasetId.DECATHLON, case_id: str | None = None) -> Volume:
    """Load a NIfTI-1 image; 4D files default to channel 0 (T2 in Decathlon)."""
    return load_nifti_channels(path, [channel], dataset_id, case_id)[0]


def load_nifti_mask(path, dataset_id=DatasetId.DECATHLON, case_id: str | None = None) -> MaskVolume:
    path = Path(path)
    arr, spacing, _ = read_nifti_array(path)
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise VolumeParseError("4D label volume", field="dim", path=path)
        arr = arr[0]
    return MaskVolume(arr, spacing, case_id or _case_id(path), dataset_id)


def write_nifti(vol, path, dtype=None) -> Path:
    """Write a Volume (float32) or MaskVolume (uint8) as NIfTI-1.

    A ``.gz`` suffix gzips the output.
    """
    path = Path(path)
    if isinstance(vol, MaskVolume):
        arr, dtype = vol.labels, dtype or np.uint8
    elif isinstance(vol, Volume):
        arr, dtype = vol.voxels, dtype or np.float32
    else:
        raise TypeError(f"expected Volume or MaskVolume, got {type(vol).__name__}")
    return write_nifti_array(arr, vol.spacing, path, dtype)


def write_nifti_array(arr: np.ndarray, spacing, path, dtype=None) -> Path:
    """Write ``arr`` (``[z, y, x]`` or ``[t, z, y, x]``) to a NIfTI-1 file."""
    path = Path(path)
    arr = np.asarray(arr)
    dtype = np.dtype(dtype or arr.dtype)
    if dtype not in _DTYPE_TO_CODE:
        raise ValueError(f"no NIfTI datatype code for {dtype}")
    if arr.ndim not in (3, 4):
        raise ValueError(f"expected 3D or 4D array, got shape {arr.shape}")
    file_shape = arr.shape[::-1]
    dim = [arr.ndim, *file_shape] + [1] * (7 - arr.ndim)
    pixdim = [1.0, *[float(s) for s in spacing]] + [1.0] * 4

    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, *dim)
    struct.pack_into("<2h", hdr, 70, _DTYPE_TO_CODE[dtype], dtype.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, *pixdim)
    struct.pack_into("<3f", hdr, 108, 352.0, 0.0, 0.0)
    struct.pack_into("<B", hdr, 123, 2)  # xyzt_units: millimetres
    hdr[344:348] = b"n+1\x00"
    data = np.ascontiguousarray(arr, dtype=dtype.newbyteorder("<")).tobytes()
    payload = bytes(hdr) + b"\x00" * 4 + data

    path.parent.mkdir(parents=True, exist_ok=True)
    if path.name.endswith(".gz"):
        # mtime=0 keeps the output byte-reproducible.
        payload = gzip.compress(payload, compresslevel=6, mtime=0)
    path.write_bytes(payload)
    return path


def probe_nifti(path) -> None:
    path = Path(path)
    with (gzip.open(path, "rb") if path.name.endswith(".gz") else open(path, "rb")) as fh:
        try:
            head = fh.read(HEADER_SIZE)
        except (OSError, EOFError) as exc:
            raise VolumeParseError(f"truncated stream ({exc})", field="gzip", path=path) from None
    if len(head) < HEADER_SIZE or head[344:348] not in (b"n+1\x00", b"ni1\x00"):
        raise VolumeParseError("bad magic", field="magic", path=path)
