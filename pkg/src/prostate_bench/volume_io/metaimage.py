"""MetaImage (.mhd/.raw and single-file .mha) reader and writer."""
from __future__ import annotations

import os
import zlib
from pathlib import Path

import numpy as np

from .volume import DatasetId, MaskVolume, Volume, VolumeParseError

ELEMENT_TYPES = {
    "MET_CHAR": np.int8,
    "MET_UCHAR": np.uint8,
    "MET_SHORT": np.int16,
    "MET_USHORT": np.uint16,
    "MET_INT": np.int32,
    "MET_UINT": np.uint32,
    "MET_LONG": np.int32,
    "MET_ULONG": np.uint32,
    "MET_LONG_LONG": np.int64,
    "MET_ULONG_LONG": np.uint64,
    "MET_FLOAT": np.float32,
    "MET_DOUBLE": np.float64,
}
_DTYPE_TO_MET = {
    np.dtype(np.int8): "MET_CHAR",
    np.dtype(np.uint8): "MET_UCHAR",
    np.dtype(np.int16): "MET_SHORT",
    np.dtype(np.uint16): "MET_USHORT",
    np.dtype(np.int32): "MET_INT",
    np.dtype(np.uint32): "MET_UINT",
    np.dtype(np.float32): "MET_FLOAT",
    np.dtype(np.float64): "MET_DOUBLE",
}
_TRUE = {"true", "1", "yes"}


def read_header(header_path) -> tuple[dict[str, str], int]:
    """Parse the ``Key = Value`` header.

    Returns the fields and the byte offset right after the ``ElementDataFile``
    line (where LOCAL data starts in a .mha file).
    """
    path = Path(header_path)
    if not path.is_file():
        raise VolumeParseError("header file not found", field="header", path=path)
    with open(path, "rb") as fh:
        blob = fh.read()
    fields: dict[str, str] = {}
    offset = 0
    while offset < len(blob):
        end = blob.find(b"\n", offset)
        if end < 0:
            end = len(blob)
        raw_line = blob[offset:end]
        offset = end + 1
        try:
            line = raw_line.decode("ascii").strip()
        except UnicodeDecodeError:
            raise VolumeParseError("non-ASCII header line", field="header", path=path)
        if not line:
            continue
        if "=" not in line:
            raise VolumeParseError(f"malformed header line {line!r}", field="header", path=path)
        key, value = (s.strip() for s in line.split("=", 1))
        fields[key] = value
        if key == "ElementDataFile":
            break
    if "ElementDataFile" not in fields:
        raise VolumeParseError("missing ElementDataFile", field="ElementDataFile", path=path)
    return fields, offset


def _ints(fields, key, path) -> list[int]:
    try:
        return [int(v) for v in fields[key].split()]
    except KeyError:
        raise VolumeParseError(f"missing {key}", field=key, path=path) from None
    except ValueError:
        raise VolumeParseError(f"bad {key} {fields[key]!r}", field=key, path=path) from None


def _floats(fields, key, path) -> list[float]:
    try:
        return [float(v) for v in fields[key].split()]
    except ValueError:
        raise VolumeParseError(f"bad {key} {fields[key]!r}", field=key, path=path) from None


def read_metaimage_array(header_path) -> tuple[np.ndarray, tuple[float, float, float], dict]:
    """Decode a MetaImage file to ``(array[z, y, x], (dx, dy, dz), header)``.

    The array keeps the on-disk element type.
    """
    path = Path(header_path)
    fields, data_offset = read_header(path)

    ndims = int(fields.get("NDims", "3"))
    dims = _ints(fields, "DimSize", path)
    if ndims not in (2, 3) or len(dims) != ndims:
        raise VolumeParseError(
            f"DimSize {dims} inconsistent with NDims {ndims} (2 or 3 supported)",
            field="DimSize", path=path,
        )
    if any(d < 1 for d in dims):
        raise VolumeParseError(f"DimSize components must be >= 1, got {dims}", field="DimSize", path=path)
    if int(fields.get("ElementNumberOfChannels", "1")) != 1:
        raise VolumeParseError("multi-channel MetaImage not supported",
                               field="ElementNumberOfChannels", path=path)

    spacing_key = "ElementSpacing" if "ElementSpacing" in fields else "ElementSize"
    spacing = _floats(fields, spacing_key, path) if spacing_key in fields else [1.0] * ndims
    if len(spacing) != ndims:
        raise VolumeParseError(f"{spacing_key} has {len(spacing)} values for NDims {ndims}",
                               field=spacing_key, path=path)
    if ndims == 2:
        dims = dims + [1]
        spacing = spacing + [1.0]

    etype = fields.get("ElementType")
    if etype is None:
        raise VolumeParseError("missing ElementType", field="ElementType", path=path)
    if etype not in ELEMENT_TYPES:
        raise VolumeParseError(f"unsupported element type {etype}", field="ElementType", path=path)
    msb = fields.get("BinaryDataByteOrderMSB", fields.get("ElementByteOrderMSB", "False"))
    dtype = np.dtype(ELEMENT_TYPES[etype]).newbyteorder(">" if msb.lower() in _TRUE else "<")

    data_file = fields["ElementDataFile"]
    if data_file.upper() == "LOCAL":
        with open(path, "rb") as fh:
            fh.seek(data_offset)
            payload = fh.read()
    elif data_file.upper().startswith("LIST") or "%" in data_file:
        raise VolumeParseError(f"multi-file ElementDataFile {data_file!r} not supported",
                               field="ElementDataFile", path=path)
    else:
        raw_path = path.parent / data_file
        if not raw_path.is_file():
            raise VolumeParseError(f"missing raw file {data_file}", field="ElementDataFile", path=path)
        payload = raw_path.read_bytes()

    if fields.get("CompressedData", "False").lower() in _TRUE:
        try:
            payload = zlib.decompress(payload)
        except zlib.error as exc:
            raise VolumeParseError(f"corrupt compressed data ({exc})", field="CompressedData",
                                   path=path) from None
    else:
        header_size = int(fields.get("HeaderSize", "0"))
        expected = int(np.prod(dims)) * dtype.itemsize
        if header_size == -1:
            payload = payload[len(payload) - expected:] if len(payload) >= expected else payload
        elif header_size > 0:
            payload = payload[header_size:]

    expected = int(np.prod(dims)) * dtype.itemsize
    if len(payload) != expected:
        raise VolumeParseError(
            f"raw size mismatch: DimSize {'x'.join(map(str, dims))} of {etype} needs "
            f"{expected} bytes, data holds {len(payload)}",
            field="DimSize", path=path,
        )
    arr = np.frombuffer(payload, dtype=dtype).reshape(dims[::-1])
    return arr, (spacing[0], spacing[1], spacing[2]), fields


def _case_id(path: Path) -> str:
    return path.stem


def load_metaimage(header_path, dataset_id=DatasetId.PROMISE12, case_id: str | None = None) -> Volume:
    """Load a MetaImage image as a float32 :class:`Volume`."""
    path = Path(header_path)
    arr, spacing, fields = read_metaimage_array(path)
    return Volume(arr.astype(np.float32), spacing, case_id or _case_id(path), dataset_id,
                  meta={"source": str(path), "element_type": fields["ElementType"]})


def load_metaimage_mask(header_path, dataset_id=DatasetId.PROMISE12, case_id: str | None = None) -> MaskVolume:
    path = Path(header_path)
    arr, spacing, _ = read_metaimage_array(path)
    return MaskVolume(arr, spacing, case_id or _case_id(path), dataset_id)


def write_metaimage(vol, header_path, element_type: str | None = None, compressed: bool = False) -> Path:
    """Write a :class:`Volume` or :class:`MaskVolume` as a .mhd/.raw pair.

    Volumes default to MET_FLOAT and masks to MET_UCHAR, so a write/read cycle
    reproduces voxels exactly. A ``.mha`` path writes a single LOCAL file.
    """
    path = Path(header_path)
    if isinstance(vol, MaskVolume):
        arr, spacing = vol.labels, vol.spacing
        element_type = element_type or "MET_UCHAR"
    elif isinstance(vol, Volume):
        arr, spacing = vol.voxels, vol.spacing
        element_type = element_type or "MET_FLOAT"
    else:
        raise TypeError(f"expected Volume or MaskVolume, got {type(vol).__name__}")
    return write_metaimage_array(arr, spacing, path, element_type, compressed)


def write_metaimage_array(arr: np.ndarray, spacing, header_path, element_type: str | None = None,
                          compressed: bool = False) -> Path:
    path = Path(header_path)
    arr = np.asarray(arr)
    if arr.ndim != 3:
        raise ValueError(f"expected a 3D array, got shape {arr.shape}")
    if element_type is None:
        element_type = _DTYPE_TO_MET.get(arr.dtype)
        if element_type is None:
            raise ValueError(f"no MetaImage element type for dtype {arr.dtype}")
    if element_type not in ELEMENT_TYPES:
        raise ValueError(f"unsupported element type {element_type}")
    dtype = np.dtype(ELEMENT_TYPES[element_type]).newbyteorder("<")
    data = np.ascontiguousarray(arr, dtype=dtype).tobytes()
    if compressed:
        data = zlib.compress(data, 6)

    local = path.suffix.lower() == ".mha"
    raw_name = "LOCAL" if local else path.stem + (".zraw" if compressed else ".raw")
    d, h, w = arr.shape
    lines = [
        "ObjectType = Image",
        "NDims = 3",
        "BinaryData = True",
        "BinaryDataByteOrderMSB = False",
        f"CompressedData = {compressed}",
    ]
    if compressed:
        lines.append(f"CompressedDataSize = {len(data)}")
    lines += [
        "TransformMatrix = 1 0 0 0 1 0 0 0 1",
        "Offset = 0 0 0",
        "CenterOfRotation = 0 0 0",
        "AnatomicalOrientation = RAI",
        "ElementSpacing = " + " ".join(repr(float(s)) for s in spacing),
        f"DimSize = {w} {h} {d}",
        f"ElementType = {element_type}",
        f"ElementDataFile = {raw_name}",
    ]
    header = ("\n".join(lines) + "\n").encode("ascii")
    path.parent.mkdir(parents=True, exist_ok=True)
    if local:
        path.write_bytes(header + data)
    else:
        path.write_bytes(header)
        (path.parent / raw_name).write_bytes(data)
    return path


def probe_metaimage(header_path) -> None:
    """Cheap readability check: header parses and the data file exists."""
    path = Path(header_path)
    fields, _ = read_header(path)
    data_file = fields["ElementDataFile"]
    if data_file.upper() != "LOCAL" and not os.path.isfile(path.parent / data_file):
        raise VolumeParseError(f"missing raw file {data_file}", field="ElementDataFile", path=path)
