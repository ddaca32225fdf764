"""Reader for the NRRD label maps shipped with the NCI-ISBI 2013 data.

Supports attached or detached data with raw or gzip encoding, which covers
the challenge's segmentation files.
"""
from __future__ import annotations

import gzip
from pathlib import Path

import numpy as np

from .volume import DatasetId, MaskVolume, VolumeParseError

_TYPES = {
    "uchar": np.uint8, "unsigned char": np.uint8, "uint8": np.uint8, "uint8_t": np.uint8,
    "signed char": np.int8, "int8": np.int8, "int8_t": np.int8,
    "short": np.int16, "int16": np.int16, "int16_t": np.int16, "signed short": np.int16,
    "ushort": np.uint16, "unsigned short": np.uint16, "uint16": np.uint16, "uint16_t": np.uint16,
    "int": np.int32, "int32": np.int32, "int32_t": np.int32, "signed int": np.int32,
    "uint": np.uint32, "unsigned int": np.uint32, "uint32": np.uint32, "uint32_t": np.uint32,
    "float": np.float32, "double": np.float64,
}


def read_nrrd_array(path):
    path = Path(path)
    blob = path.read_bytes()
    if not blob.startswith(b"NRRD000"):
        raise VolumeParseError("bad magic", field="magic", path=path)
    sep = blob.find(b"\n\n")
    if sep < 0:
        raise VolumeParseError("header not terminated", field="header", path=path)
    fields = {}
    for line in blob[:sep].decode("ascii", "replace").splitlines()[1:]:
        if line.startswith("#") or ":" not in line:
            continue
        key, value = line.split(":", 1)
        fields[key.strip().lower()] = value.lstrip("=").strip()

    try:
        sizes = [int(s) for s in fields["sizes"].split()]
        dtype = np.dtype(_TYPES[fields["type"].lower()])
    except KeyError as exc:
        raise VolumeParseError(f"missing or unsupported field {exc}", field=str(exc), path=path) from None
    if len(sizes) not in (2, 3):
        raise VolumeParseError(f"{len(sizes)}D NRRD not supported", field="sizes", path=path)
    if fields.get("endian", "little") == "big":
        dtype = dtype.newbyteorder(">")

    if "data file" in fields or "datafile" in fields:
        payload = (path.parent / fields.get("data file", fields.get("datafile"))).read_bytes()
    else:
        payload = blob[sep + 2:]
    encoding = fields.get("encoding", "raw")
    if encoding in ("gzip", "gz"):
        payload = gzip.decompress(payload)
    elif encoding != "raw":
        raise VolumeParseError(f"unsupported encoding {encoding}", field="encoding", path=path)
    expected = int(np.prod(sizes)) * dtype.itemsize
    if len(payload) != expected:
        raise VolumeParseError(f"raw size mismatch: need {expected} bytes, have {len(payload)}",
                               field="sizes", path=path)
    arr = np.frombuffer(payload, dtype=dtype).reshape(sizes[::-1])
    if arr.ndim == 2:
        arr = arr[np.newaxis]

    spacing = [1.0, 1.0, 1.0]
    if "spacings" in fields:
        spacing = [float(s) for s in fields["spacings"].split()] + [1.0]
    elif "space directions" in fields:
        vecs = [v for v in fields["space directions"].replace(")", "").split("(") if v.strip()]
        spacing = [float(np.linalg.norm([float(c) for c in v.split(",")])) for v in vecs]
    return arr, tuple((spacing + [1.0, 1.0, 1.0])[:3])


def load_nrrd_mask(path, dataset_id=DatasetId.ISBI2013, case_id: str | None = None) -> MaskVolume:
    path = Path(path)
    arr, spacing = read_nrrd_array(path)
    return MaskVolume(arr, spacing, case_id or path.name.split(".")[0], dataset_id)
