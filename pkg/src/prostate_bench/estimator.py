"""scikit-learn style estimator wrapping the U-Net training recipe."""
from __future__ import annotations

import copy
import logging
import math
import time

import numpy as np
import torch
from sklearn.base import BaseEstimator

from .augment import augment_arrays, sample_rng
from .config import TrainConfig
from .losses import combined_loss, dsc
from .model import ModelCheckpoint, UNet, logits_to_mask_volume, predict_logits
from .optim import Ranger, ScheduleSpec, flat_cos_lr
from .preprocess import SliceSample, normalize_batch
from .validation import check_is_fitted, check_masks, check_slices

log = logging.getLogger(__name__)


def seed_everything(seed: int, deterministic: bool = True, num_threads: int | None = 1) -> None:
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    if num_threads:
        torch.set_num_threads(int(num_threads))
    torch.use_deterministic_algorithms(bool(deterministic), warn_only=True)


def _group_dsc(pred: np.ndarray, truth: np.ndarray, groups) -> float:
    if groups is None:
        return dsc(pred, truth)
    groups = np.asarray(groups)
    return float(np.mean([dsc(pred[groups == g], truth[groups == g]) for g in dict.fromkeys(groups.tolist())]))


class UNetSegmenter(BaseEstimator):
    """Binary 2D segmenter: U-Net + Mish, Ranger, Dice/focal/CE loss.

    ``fit`` takes preprocessed slices ``X`` of shape ``(n, H, W)`` (CLAHE'd
    and resized, see :class:`~prostate_bench.preprocess.SlicePreprocessor`) and
    binary masks ``y``. Per-slice z-scoring and augmentation happen inside.
    Training runs two stages of ``epochs_stage1`` and ``epochs_stage2``
    epochs, each with a fresh Ranger optimiser and its own flat+cosine
    schedule (stage 2 starting from ``base_lr * stage2_lr_factor``). With
    validation data the weights of the best validation-DSC epoch are kept.

    Parameters
    ----------
    config : TrainConfig, optional
        Full hyperparameter record; defaults to the published recipe.
        Nested keys are reachable as ``config__base_lr``,
        ``config__model.depth`` and so on.
    verbose : int
        1 logs one line per epoch.
    """

    def __init__(self, config: TrainConfig | None = None, verbose: int = 0):
        self.config = config
        self.verbose = verbose

    def _cfg(self) -> TrainConfig:
        return (self.config or TrainConfig()).validate()

    # -- training ---------------------------------------------------------

    def fit(self, X, y, X_val=None, y_val=None, groups_val=None, sample_weight=None):
        """Train from scratch.

        ``groups_val`` assigns validation slices to cases so that validation
        DSC is computed per case on restacked volumes. ``sample_weight``
        switches epoch ordering to weighted sampling with replacement.
        """
        cfg = self._cfg()
        X = check_slices(X, divisor=cfg.model.divisor)
        y = check_masks(y, X)
        has_val = X_val is not None and len(X_val) > 0
        if has_val:
            X_val = check_slices(X_val, "X_val", divisor=cfg.model.divisor)
            y_val = check_masks(y_val, X_val, "y_val")
        if sample_weight is not None:
            sample_weight = np.asarray(sample_weight, dtype=np.float64)
            if sample_weight.shape != (len(X),) or sample_weight.min() < 0 or sample_weight.sum() <= 0:
                raise ValueError("sample_weight must be non-negative with one entry per sample")

        seed_everything(cfg.seed, cfg.deterministic, cfg.num_threads)
        model = UNet(cfg.model)
        self.model_ = model
        self.history_ = []
        self.loss_history_ = []
        self.n_steps_ = 0
        self.best_epoch_ = 0
        self.best_val_dsc_ = float("nan")
        best_state = copy.deepcopy(model.state_dict())
        best_score = -math.inf

        n = len(X)
        spe = math.ceil(n / cfg.batch_size)
        stages = [(1, cfg.epochs_stage1, cfg.base_lr), (2, cfg.epochs_stage2, cfg.base_lr * cfg.stage2_lr_factor)]
        epoch = 0
        for stage, n_epochs, lr0 in stages:
            if n_epochs == 0:
                continue
            sched = ScheduleSpec(lr0, n_epochs * spe, cfg.flat_fraction, min(cfg.final_lr, lr0))
            opt = Ranger(model.parameters(), lr=lr0, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps,
                         weight_decay=cfg.weight_decay, k=cfg.lookahead_k, alpha=cfg.lookahead_alpha,
                         threshold=cfg.rectify_threshold)
            step_in_stage = 0
            for _ in range(n_epochs):
                epoch += 1
                t0 = time.perf_counter()
                order_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch, 7919]))
                if sample_weight is None:
                    order = order_rng.permutation(n)
                else:
                    order = order_rng.choice(n, size=n, replace=True, p=sample_weight / sample_weight.sum())
                model.train()
                losses = []
                for b in range(spe):
                    idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                    xb, yb = self._batch(X, y, idx, cfg, epoch)
                    lr = flat_cos_lr(step_in_stage, sched)
                    for group in opt.param_groups:
                        group["lr"] = lr
                    opt.zero_grad(set_to_none=True)
                    loss = combined_loss(model(xb), yb, cfg.loss)
                    if not torch.isfinite(loss):
                        raise FloatingPointError(
                            f"non-finite loss {loss.item()} at stage {stage}, epoch {epoch}, "
                            f"batch {b}, lr {lr:.3g}; batch input range "
                            f"[{xb.min().item():.3g}, {xb.max().item():.3g}]"
                        )
                    loss.backward()
                    opt.step()
                    step_in_stage += 1
                    self.n_steps_ += 1
                    losses.append(loss.item())
                self.loss_history_.extend(losses)
                record = {"epoch": epoch, "stage": stage, "train_loss": float(np.mean(losses)), "lr": lr}
                if has_val:
                    score = _group_dsc(self._predict_arrays(X_val, cfg), y_val, groups_val)
                    record["val_dsc"] = score
                    if score > best_score:
                        best_score, best_state = score, copy.deepcopy(model.state_dict())
                        self.best_epoch_, self.best_val_dsc_ = epoch, score
                record["seconds"] = time.perf_counter() - t0
                self.history_.append(record)
                if self.verbose:
                    log.info("epoch %d (stage %d) loss %.4f val_dsc %s", epoch, stage,
                             record["train_loss"], f"{record.get('val_dsc', float('nan')):.4f}")
        if has_val and self.history_:
            model.load_state_dict(best_state)
        else:
            self.best_epoch_ = epoch
        model.eval()
        return self

    def _batch(self, X, y, idx, cfg: TrainConfig, epoch: int):
        images, masks = [], []
        for i in idx:
            img, m = augment_arrays(X[i], y[i], sample_rng(cfg.seed, epoch, int(i)), cfg.augment)
            images.append(img)
            masks.append(m)
        xb = torch.from_numpy(normalize_batch(np.stack(images))[:, None])
        yb = torch.from_numpy(np.stack(masks).astype(np.int64))
        return xb, yb

    # -- inference --------------------------------------------------------

    def _predict_arrays(self, X, cfg) -> np.ndarray:
        return np.argmax(predict_logits(self.model_, X, cfg.batch_size), axis=1).astype(np.uint8)

    def decision_function(self, X) -> np.ndarray:
        """Raw logits, shape ``(n, 2, H, W)``."""
        check_is_fitted(self)
        cfg = self._cfg()
        return predict_logits(self.model_, check_slices(X, divisor=cfg.model.divisor), cfg.batch_size)

    def predict_proba(self, X) -> np.ndarray:
        logits = torch.from_numpy(self.decision_function(X))
        return torch.softmax(logits, dim=1).numpy()

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.decision_function(X), axis=1).astype(np.uint8)

    def score(self, X, y) -> float:
        """DSC of the stacked predictions against ``y``."""
        return dsc(self.predict(X), check_masks(y))

    def predict_mask(self, samples: list[SliceSample], spacing=(1.0, 1.0, 1.0)):
        """Segment one case's ordered slices and return a native-size MaskVolume."""
        check_is_fitted(self)
        logits = self.decision_function(np.stack([s.image for s in samples]))
        return logits_to_mask_volume(logits, samples, spacing)

    # -- persistence ------------------------------------------------------

    def to_checkpoint(self, source: str = "") -> ModelCheckpoint:
        check_is_fitted(self)
        cfg = self._cfg()
        return ModelCheckpoint(
            state_dict=copy.deepcopy(self.model_.state_dict()),
            spec=cfg.model,
            config_hash=cfg.hash(),
            source=source,
            epoch=self.best_epoch_,
            config=cfg.to_dict(),
            metrics={"best_val_dsc": None if math.isnan(self.best_val_dsc_) else self.best_val_dsc_,
                     "n_steps": self.n_steps_},
        )

    @classmethod
    def from_checkpoint(cls, ckpt: ModelCheckpoint) -> UNetSegmenter:
        est = cls(config=TrainConfig.from_dict(ckpt.config))
        est.model_ = ckpt.build_model()
        est.history_ = []
        est.loss_history_ = []
        est.n_steps_ = int(ckpt.metrics.get("n_steps", 0) or 0)
        est.best_epoch_ = ckpt.epoch
        bv = ckpt.metrics.get("best_val_dsc")
        est.best_val_dsc_ = float("nan") if bv is None else float(bv)
        return est
