"""Experiment protocol: seeded case-level splits, the five training runs
(four single-dataset models plus one trained on all training splits) and the
cross-dataset DSC matrix.

Run directory layout::

    <run_root>/manifests/<dataset>.json
    <run_root>/splits/<dataset>.json
    <run_root>/runs/<source>/{config.cfg,checkpoint.pt,log.csv,summary.json}
    <run_root>/matrix/{matrix.csv,matrix.txt,per_case.csv}
    <run_root>/cache/<hash>.npz
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .estimator import UNetSegmenter
from .losses import dsc, slice_dsc
from .model import ModelCheckpoint
from .preprocess import SampleCache, SliceSample, pipeline_key, volume_to_samples
from .volume_io import DatasetId, DatasetManifest, MaskVolume, as_dataset_id, load_case

log = logging.getLogger(__name__)

COMBINED = "combined"
# Column order of the published results table.
TABLE_ORDER = ("promise12", "prostatex", "decathlon", "isbi2013")
SOURCES = TABLE_ORDER + (COMBINED,)
MIN_CASES = 5


class TooFewCasesError(ValueError):
    pass


# -- splits ----------------------------------------------------------------

@dataclass
class SplitSpec:
    dataset_id: DatasetId
    seed: int
    train_cases: list[str]
    val_cases: list[str]
    test_cases: list[str]

    def __post_init__(self):
        self.dataset_id = as_dataset_id(self.dataset_id)
        assert_no_leakage(self)

    @property
    def all_cases(self) -> list[str]:
        return sorted(self.train_cases + self.val_cases + self.test_cases)

    def to_dict(self) -> dict:
        return {"dataset_id": self.dataset_id.value, "seed": self.seed, "train_cases": self.train_cases,
                "val_cases": self.val_cases, "test_cases": self.test_cases}

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> SplitSpec:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(d["dataset_id"], d["seed"], d["train_cases"], d["val_cases"], d["test_cases"])


def assert_no_leakage(split: SplitSpec) -> None:
    parts = {"train": set(split.train_cases), "val": set(split.val_cases), "test": set(split.test_cases)}
    for name, ids in (("train", split.train_cases), ("val", split.val_cases), ("test", split.test_cases)):
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate case in {name} split of {split.dataset_id}")
    for a, b in (("train", "val"), ("train", "test"), ("val", "test")):
        both = parts[a] & parts[b]
        if both:
            raise ValueError(f"case leakage between {a} and {b} in {split.dataset_id}: {sorted(both)}")


def split_sizes(n: int) -> tuple[int, int, int]:
    """(train, val, test): 20% test, then 20% of the rest for validation, floors."""
    n_test = math.floor(0.2 * n)
    n_val = math.floor(0.2 * (n - n_test))
    return n - n_test - n_val, n_val, n_test


def make_split(manifest: DatasetManifest, seed: int) -> SplitSpec:
    """Seeded case-level 80:20 train/test split, then 80:20 train/val."""
    cases = sorted(manifest.case_ids)
    if len(cases) < MIN_CASES:
        raise TooFewCasesError(f"too few cases: {len(cases)} in {manifest.dataset_id}, need >= {MIN_CASES}")
    n_train, n_val, n_test = split_sizes(len(cases))
    # Mix the dataset id into the stream so datasets with equal case names split differently.
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(manifest.dataset_id.value.encode())]))
    perm = [cases[i] for i in rng.permutation(len(cases))]
    return SplitSpec(
        manifest.dataset_id, int(seed),
        train_cases=sorted(perm[n_test + n_val:]),
        val_cases=sorted(perm[n_test:n_test + n_val]),
        test_cases=sorted(perm[:n_test]),
    )


# -- data ------------------------------------------------------------------

@dataclass
class CaseData:
    samples: list[SliceSample]
    mask: MaskVolume

    @property
    def case_id(self) -> str:
        return self.mask.case_id

    @property
    def dataset_id(self) -> DatasetId:
        return self.mask.dataset_id


def load_case_data(manifest: DatasetManifest, case_id: str, cfg: TrainConfig,
                   cache: SampleCache | None = None) -> CaseData:
    """Load, preprocess (through ``cache`` when given) and pair one case."""
    vol, mask = load_case(manifest, case_id, cfg.decathlon_channel)
    samples = None
    if cache is not None:
        key = pipeline_key(manifest.get(case_id).image_paths[0], case_id, manifest.dataset_id, cfg)
        samples = cache.get(key, manifest.dataset_id, case_id)
    if samples is None:
        samples = volume_to_samples(vol, mask, cfg)
        if cache is not None:
            cache.put(key, samples)
    return CaseData(samples, mask)


def flatten(cases: list[CaseData]) -> list[SliceSample]:
    return [s for c in cases for s in c.samples]


# -- training --------------------------------------------------------------

LOG_FIELDS = ("epoch", "stage", "train_loss", "val_dsc", "lr", "seconds")


def _arrays(samples: list[SliceSample]):
    X = np.stack([s.image for s in samples])
    y = np.stack([s.mask for s in samples])
    groups = [f"{DatasetId(s.dataset_id).value}/{s.case_id}" for s in samples]
    return X, y, groups


def train_model(train_samples: list[SliceSample], val_samples: list[SliceSample] | None, cfg: TrainConfig,
                run_dir=None, source: str = "") -> ModelCheckpoint:
    """Run both training stages and return the best-validation checkpoint.

    With ``run_dir``, the resolved config, per-epoch log (CSV), checkpoint and
    a JSON summary are written there.
    """
    cfg.validate()
    if not train_samples:
        raise ValueError("empty training set")
    X, y, _ = _arrays(train_samples)
    Xv = yv = gv = None
    if val_samples:
        Xv, yv, gv = _arrays(val_samples)
    weights = None
    if cfg.balance_sources:
        src = [DatasetId(s.dataset_id).value for s in train_samples]
        counts = {k: src.count(k) for k in set(src)}
        weights = np.array([1.0 / counts[k] for k in src])
    est = UNetSegmenter(cfg).fit(X, y, Xv, yv, groups_val=gv, sample_weight=weights)
    ckpt = est.to_checkpoint(source)
    ckpt.metrics["loss_history"] = [float(v) for v in est.loss_history_]
    ckpt.metrics["epochs"] = len(est.history_)
    if run_dir is not None:
        write_run(run_dir, cfg, ckpt, est.history_)
    return ckpt


def write_run(run_dir, cfg: TrainConfig, ckpt: ModelCheckpoint, history: list[dict]) -> Path:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(run_dir / "config.cfg")
    with open(run_dir / "log.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS, extrasaction="ignore")
        w.writeheader()
        for rec in history:
            w.writerow({k: rec.get(k, "") for k in LOG_FIELDS})
    ckpt.save(run_dir / "checkpoint.pt")
    summary = {"source": ckpt.source, "best_epoch": ckpt.epoch, "best_val_dsc": ckpt.metrics.get("best_val_dsc"),
               "epochs": len(history), "config_hash": ckpt.config_hash}
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    return run_dir


# -- evaluation ------------------------------------------------------------

def evaluate_model(ckpt: ModelCheckpoint | UNetSegmenter, cases: list[CaseData],
                   level: str | None = None) -> list[tuple[str, float]]:
    """Per-case DSC at native resolution (``level='slice'`` averages slice DSCs)."""
    if not cases:
        raise ValueError("empty test split")
    est = ckpt if isinstance(ckpt, UNetSegmenter) else UNetSegmenter.from_checkpoint(ckpt)
    level = level or est._cfg().dsc_level
    out = []
    for case in cases:
        pred = est.predict_mask(case.samples, case.mask.spacing)
        score = dsc(pred, case.mask) if level == "volume" else float(np.mean(slice_dsc(pred, case.mask)))
        out.append((case.case_id, float(score)))
    return out


@dataclass
class CellResult:
    mean: float
    per_case: list[tuple[str, float]]


@dataclass
class EvalMatrix:
    """DSC keyed by (training source, testing dataset); ``None`` marks a hole."""

    sources: list[str]
    datasets: list[str]
    cells: dict[tuple[str, str], CellResult | None] = field(default_factory=dict)

    def get(self, source: str, dataset: str) -> float | None:
        cell = self.cells.get((source, dataset))
        return None if cell is None else cell.mean

    @property
    def holes(self) -> list[tuple[str, str]]:
        return [(s, d) for s in self.sources for d in self.datasets if self.cells.get((s, d)) is None]

    @property
    def complete(self) -> bool:
        return not self.holes

    def diagonal(self) -> list[float]:
        return [self.get(d, d) for d in self.datasets if d in self.sources and self.get(d, d) is not None]

    def off_diagonal(self) -> list[float]:
        return [self.get(s, d) for s in self.sources for d in self.datasets
                if s != COMBINED and s != d and self.get(s, d) is not None]

    def combined_row(self) -> list[float]:
        return [self.get(COMBINED, d) for d in self.datasets if self.get(COMBINED, d) is not None]

    def _fmt(self, v) -> str:
        return "" if v is None else f"{v:.4f}"

    def to_csv(self) -> str:
        """Published-table layout: one column per single-dataset training
        source, one row per testing dataset, then the combined row whose cell
        in column X is the all-data model tested on X."""
        cols = [s for s in self.sources if s != COMBINED]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["testing_dataset"] + [f"trained_on_{c}" for c in cols])
        for d in self.datasets:
            w.writerow([d] + [self._fmt(self.get(c, d)) for c in cols])
        if COMBINED in self.sources:
            w.writerow(["combined_model"] + [self._fmt(self.get(COMBINED, c)) for c in cols])
        return buf.getvalue()

    def per_case_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["training_source", "testing_dataset", "case_id", "dsc"])
        for s in self.sources:
            for d in self.datasets:
                cell = self.cells.get((s, d))
                for cid, v in (cell.per_case if cell else []):
                    w.writerow([s, d, cid, f"{v:.6f}"])
        return buf.getvalue()

    def to_text(self) -> str:
        cols = [s for s in self.sources if s != COMBINED]
        width = max(12, *(len(c) for c in cols))
        label_w = max(16, *(len(d) for d in self.datasets))
        lines = ["DSC by training source (columns) and testing dataset (rows)",
                 " " * label_w + " | " + " | ".join(c.rjust(width) for c in cols)]
        lines.append("-" * len(lines[-1]))
        for d in self.datasets:
            lines.append(d.ljust(label_w) + " | " + " | ".join(
                (self._fmt(self.get(c, d)) or "--").rjust(width) for c in cols))
        if COMBINED in self.sources:
            lines.append("-" * len(lines[1]))
            lines.append("combined model".ljust(label_w) + " | " + " | ".join(
                (self._fmt(self.get(COMBINED, c)) or "--").rjust(width) for c in cols))
            lines.append("(combined row: model trained on all training splits, tested on the column's dataset)")
        if self.holes:
            lines.append("missing cells: " + ", ".join(f"{s}->{d}" for s, d in self.holes))
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "matrix.csv").write_text(self.to_csv(), encoding="utf-8")
        (out_dir / "matrix.txt").write_text(self.to_text(), encoding="utf-8")
        (out_dir / "per_case.csv").write_text(self.per_case_csv(), encoding="utf-8")
        return out_dir


class RunRoot:
    """Path conventions for one benchmark run root."""

    def __init__(self, root):
        self.root = Path(root)

    def manifest(self, dataset) -> Path:
        return self.root / "manifests" / f"{DatasetId(dataset).value}.json"

    def split(self, dataset) -> Path:
        return self.root / "splits" / f"{DatasetId(dataset).value}.json"

    def run(self, source: str) -> Path:
        return self.root / "runs" / source

    def checkpoint(self, source: str) -> Path:
        return self.run(source) / "checkpoint.pt"

    @property
    def cache(self) -> SampleCache:
        return SampleCache(self.root / "cache")

    @property
    def matrix_dir(self) -> Path:
        return self.root / "matrix"

    def datasets(self) -> list[str]:
        """Datasets with both a manifest and a split, in table order."""
        return [d for d in TABLE_ORDER if self.manifest(d).is_file() and self.split(d).is_file()]

    def load_manifest(self, dataset) -> DatasetManifest:
        return DatasetManifest.load(self.manifest(dataset))

    def load_split(self, dataset) -> SplitSpec:
        return SplitSpec.load(self.split(dataset))

    def load_cases(self, dataset, which: str, cfg: TrainConfig) -> list[CaseData]:
        manifest = self.load_manifest(dataset)
        split = self.load_split(dataset)
        ids = {"train": split.train_cases, "val": split.val_cases, "test": split.test_cases}[which]
        if which == "test" and cfg.drop_empty_slices:
            # Test volumes are scored whole.
            cfg = TrainConfig.from_items([("drop_empty_slices", False)], base=cfg)
        missing = set(ids) - set(manifest.case_ids)
        if missing:
            raise KeyError(f"missing cases in {dataset} manifest: {sorted(missing)}")
        return [load_case_data(manifest, cid, cfg, self.cache) for cid in ids]

    def training_data(self, source: str, cfg: TrainConfig):
        """(train, val) sample lists; ``combined`` concatenates every dataset's splits."""
        datasets = self.datasets() if source == COMBINED else [as_dataset_id(source).value]
        if not datasets:
            raise FileNotFoundError(f"no manifests/splits under {self.root}")
        train, val = [], []
        for d in datasets:
            assert_no_leakage(self.load_split(d))
            train += flatten(self.load_cases(d, "train", cfg))
            val += flatten(self.load_cases(d, "val", cfg))
        return train, val


def build_matrix(run_root, sources=SOURCES, datasets=None) -> EvalMatrix:
    """Evaluate every available checkpoint on every dataset's test split.

    Missing checkpoints leave holes (with a warning) instead of failing.
    """
    rr = RunRoot(run_root)
    datasets = list(datasets or rr.datasets())
    if not datasets:
        raise FileNotFoundError(f"no manifests/splits under {rr.root}")
    matrix = EvalMatrix(list(sources), datasets)
    test_cache: dict[tuple, list[CaseData]] = {}
    for src in sources:
        path = rr.checkpoint(src)
        if not path.is_file():
            log.warning("no checkpoint for training source %s (%s); leaving a hole", src, path)
            for d in datasets:
                matrix.cells[(src, d)] = None
            continue
        ckpt = ModelCheckpoint.load(path)
        est = UNetSegmenter.from_checkpoint(ckpt)
        cfg = est._cfg()
        prep_key = (cfg.resolution, cfg.clahe_clip_limit, tuple(cfg.clahe_grid), cfg.decathlon_channel)
        for d in datasets:
            key = (d,) + prep_key
            if key not in test_cache:
                test_cache[key] = rr.load_cases(d, "test", cfg)
            per_case = evaluate_model(est, test_cache[key])
            matrix.cells[(src, d)] = CellResult(float(np.mean([v for _, v in per_case])), per_case)
    return matrix
