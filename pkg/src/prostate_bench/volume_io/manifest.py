"""Dataset manifests: the paired (image, mask) case list for one dataset root.

Supported layouts (``layout`` defaults to the dataset's own):

promise12
    ``root/CaseNN.mhd`` with ``root/CaseNN_segmentation.mhd``.
decathlon
    ``root/imagesTr/<id>.nii.gz`` with ``root/labelsTr/<id>.nii.gz``.
isbi2013, prostatex
    one DICOM series directory per case under ``root/images`` (or ``root``),
    masks as ``<id>[suffix].{nrrd,nii,nii.gz,mhd}`` under ``mask_root``,
    ``root/masks`` or ``root/labels``.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

from .dicom import load_dicom_series, probe_dicom_dir
from .metaimage import load_metaimage, load_metaimage_mask, probe_metaimage
from .nifti import load_nifti, load_nifti_mask, probe_nifti
from .nrrd import load_nrrd_mask
from .volume import DatasetId, MaskVolume, Volume, VolumeParseError, as_dataset_id

log = logging.getLogger(__name__)

MANIFEST_FORMAT = "prostate-bench/manifest/1"
_MASK_SUFFIXES = ("_segmentation", "_truth", "_seg", "_mask", "_label")
_MASK_EXTS = (".nii.gz", ".nii", ".nrrd", ".mhd", ".mha")


class NoCasesError(ValueError):
    pass


@dataclass(frozen=True)
class CaseEntry:
    case_id: str
    image_paths: tuple[str, ...]
    mask_paths: tuple[str, ...]


@dataclass
class DatasetManifest:
    dataset_id: DatasetId
    cases: list[CaseEntry]
    modality: str = "T2W"
    root: str = ""
    layout: str = ""
    excluded: list[tuple[str, str]] = field(default_factory=list)

    def __post_init__(self):
        self.dataset_id = as_dataset_id(self.dataset_id)

    @property
    def case_ids(self) -> list[str]:
        return [c.case_id for c in self.cases]

    def __len__(self):
        return len(self.cases)

    def get(self, case_id: str) -> CaseEntry:
        for c in self.cases:
            if c.case_id == case_id:
                return c
        raise KeyError(f"case {case_id!r} not in {self.dataset_id} manifest")

    def to_dict(self) -> dict:
        return {
            "format": MANIFEST_FORMAT,
            "dataset_id": self.dataset_id.value,
            "modality": self.modality,
            "root": self.root,
            "layout": self.layout,
            "cases": [
                {"case_id": c.case_id, "image_paths": list(c.image_paths), "mask_paths": list(c.mask_paths)}
                for c in self.cases
            ],
            "excluded": [list(e) for e in self.excluded],
        }

    @classmethod
    def from_dict(cls, d: dict) -> DatasetManifest:
        if d.get("format") != MANIFEST_FORMAT:
            raise ValueError(f"not a manifest file (format {d.get('format')!r})")
        return cls(
            dataset_id=as_dataset_id(d["dataset_id"]),
            cases=[CaseEntry(c["case_id"], tuple(c["image_paths"]), tuple(c["mask_paths"])) for c in d["cases"]],
            modality=d.get("modality", "T2W"),
            root=d.get("root", ""),
            layout=d.get("layout", ""),
            excluded=[tuple(e) for e in d.get("excluded", [])],
        )

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> DatasetManifest:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _strip_mask_suffix(name: str) -> str:
    for ext in _MASK_EXTS:
        if name.endswith(ext):
            name = name[: -len(ext)]
            break
    for suf in _MASK_SUFFIXES:
        if name.endswith(suf):
            return name[: -len(suf)]
    return name


def _scan_promise12(root: Path):
    images, masks = {}, {}
    for p in sorted(root.iterdir()):
        if p.name.startswith(".") or p.suffix.lower() not in (".mhd", ".mha"):
            continue
        stem = p.stem
        if stem.endswith("_segmentation"):
            masks[stem[: -len("_segmentation")]] = p
        else:
            images[stem] = p
    return images, masks


def _nii_id(p: Path) -> str | None:
    if p.name.startswith("."):
        return None
    for ext in (".nii.gz", ".nii"):
        if p.name.endswith(ext):
            return p.name[: -len(ext)]
    return None


def _scan_decathlon(root: Path):
    images, masks = {}, {}
    for sub, out in (("imagesTr", images), ("labelsTr", masks)):
        d = root / sub
        if d.is_dir():
            for p in sorted(d.iterdir()):
                cid = _nii_id(p)
                if cid:
                    out[cid] = p
    return images, masks


def _scan_dicom(root: Path, mask_root: Path | None):
    image_dir = root / "images" if (root / "images").is_dir() else root
    if mask_root is None:
        mask_root = next((root / n for n in ("masks", "labels") if (root / n).is_dir()), None)
    images, masks = {}, {}
    skip = {"masks", "labels", "images"}
    for p in sorted(image_dir.iterdir()):
        if p.is_dir() and not p.name.startswith(".") and p.name not in skip:
            images[p.name] = p
    if mask_root is not None and mask_root.is_dir():
        for p in sorted(mask_root.iterdir()):
            if p.is_file() and not p.name.startswith(".") and p.name.endswith(_MASK_EXTS):
                masks.setdefault(_strip_mask_suffix(p.name), p)
    return images, masks


_SCANNERS = {"promise12": _scan_promise12, "decathlon": _scan_decathlon}


def probe_image(path: Path) -> None:
    if path.is_dir():
        probe_dicom_dir(path)
    elif path.name.endswith((".nii", ".nii.gz")):
        probe_nifti(path)
    elif path.suffix.lower() in (".mhd", ".mha"):
        probe_metaimage(path)
    elif not path.is_file():
        raise VolumeParseError("missing file", field="path", path=path)


def build_manifest(root, dataset_id, mask_root=None, layout: str | None = None,
                   check_readable: bool = True) -> DatasetManifest:
    """Scan ``root`` for paired cases.

    The case list is sorted lexicographically. Cases without a mask (or, with
    ``check_readable``, whose headers do not parse) are left out, logged and
    recorded in ``manifest.excluded``.
    """
    root = Path(root)
    dataset_id = as_dataset_id(dataset_id)
    layout = layout or dataset_id.value
    if not root.is_dir():
        raise NoCasesError(f"no cases found: {root} is not a directory")
    if layout in _SCANNERS:
        images, masks = _SCANNERS[layout](root)
    elif layout in ("isbi2013", "prostatex"):
        images, masks = _scan_dicom(root, Path(mask_root) if mask_root else None)
    else:
        raise ValueError(f"unknown layout {layout!r}")

    cases, excluded = [], []
    for cid in sorted(set(images) | set(masks)):
        if cid not in masks:
            excluded.append((cid, "no mask"))
        elif cid not in images:
            excluded.append((cid, "no image"))
        else:
            if check_readable:
                try:
                    probe_image(images[cid])
                    probe_image(masks[cid])
                except (VolumeParseError, OSError) as exc:
                    excluded.append((cid, f"unreadable: {exc}"))
                    continue
            cases.append(CaseEntry(cid, (str(images[cid]),), (str(masks[cid]),)))
    for cid, reason in excluded:
        log.warning("%s: excluding case %s (%s)", dataset_id.value, cid, reason)
    if not cases:
        raise NoCasesError(f"no cases found under {root} for layout {layout}")
    return DatasetManifest(dataset_id, cases, root=str(root), layout=layout, excluded=excluded)


def load_image(path, dataset_id, case_id: str, channel: int = 0) -> Volume:
    path = Path(path)
    if path.is_dir():
        return load_dicom_series(path, dataset_id, case_id)
    if path.name.endswith((".nii", ".nii.gz")):
        return load_nifti(path, channel, dataset_id, case_id)
    if path.suffix.lower() in (".mhd", ".mha"):
        return load_metaimage(path, dataset_id, case_id)
    raise VolumeParseError("unrecognised image format", field="path", path=path)


def load_mask(path, dataset_id, case_id: str) -> MaskVolume:
    path = Path(path)
    if path.is_dir():
        return MaskVolume.from_volume(load_dicom_series(path, dataset_id, case_id))
    if path.name.endswith((".nii", ".nii.gz")):
        return load_nifti_mask(path, dataset_id, case_id)
    if path.suffix.lower() in (".mhd", ".mha"):
        return load_metaimage_mask(path, dataset_id, case_id)
    if path.suffix.lower() == ".nrrd":
        return load_nrrd_mask(path, dataset_id, case_id)
    raise VolumeParseError("unrecognised mask format", field="path", path=path)


def load_case(manifest: DatasetManifest, case_id: str, channel: int = 0) -> tuple[Volume, MaskVolume]:
    """Load the image/mask pair of one manifest case, checking their dims agree."""
    entry = manifest.get(case_id)
    vol = load_image(entry.image_paths[0], manifest.dataset_id, case_id, channel)
    mask = load_mask(entry.mask_paths[0], manifest.dataset_id, case_id)
    if vol.dims != mask.dims:
        raise VolumeParseError(f"image dims {vol.dims} != mask dims {mask.dims}", field="dims",
                               path=entry.mask_paths[0])
    return vol, mask
