"""2D U-Net with Mish activations and a 2-class softmax head."""
from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy.special import expit
from torch import nn

from .preprocess import SliceSample, normalize_batch, resize_mask
from .volume_io import DatasetId, MaskVolume

SOFTPLUS_THRESHOLD = 20.0


def _softplus(x: np.ndarray) -> np.ndarray:
    # log1p(exp(x)) overflows for large x, where softplus(x) == x to double precision anyway
    return np.where(x > SOFTPLUS_THRESHOLD, x, np.log1p(np.exp(np.minimum(x, SOFTPLUS_THRESHOLD))))


def mish(x):
    """x * tanh(softplus(x)), elementwise."""
    x = np.asarray(x, dtype=np.float64)
    return x * np.tanh(_softplus(x))


def mish_grad(x):
    """Derivative of :func:`mish`: tanh(sp) + x * sech^2(sp) * sigmoid(x)."""
    x = np.asarray(x, dtype=np.float64)
    t = np.tanh(_softplus(x))
    return t + x * (1.0 - t * t) * expit(x)


class MishFunction(torch.autograd.Function):
    """Mish with the closed-form backward instead of a recorded graph."""

    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return x * torch.tanh(F.softplus(x, threshold=SOFTPLUS_THRESHOLD))

    @staticmethod
    def backward(ctx, grad_out):
        (x,) = ctx.saved_tensors
        t = torch.tanh(F.softplus(x, threshold=SOFTPLUS_THRESHOLD))
        return grad_out * (t + x * (1.0 - t * t) * torch.sigmoid(x))


def mish_torch(x: torch.Tensor) -> torch.Tensor:
    return MishFunction.apply(x)


class Mish(nn.Module):
    def forward(self, x):
        return MishFunction.apply(x)


@dataclass
class ModelSpec:
    depth: int = 4
    base_channels: int = 64
    in_channels: int = 1
    out_classes: int = 2
    norm: str = "batch"
    activation: str = "mish"

    def __post_init__(self):
        if int(self.depth) < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if int(self.base_channels) < 1:
            raise ValueError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.norm not in ("batch", "instance", "group", "none"):
            raise ValueError(f"unknown norm {self.norm!r}")
        if self.activation not in ("mish", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        self.depth = int(self.depth)
        self.base_channels = int(self.base_channels)

    @property
    def divisor(self) -> int:
        return 2 ** self.depth


def _norm(kind: str, ch: int) -> nn.Module:
    if kind == "batch":
        return nn.BatchNorm2d(ch)
    if kind == "instance":
        return nn.InstanceNorm2d(ch, affine=True)
    if kind == "group":
        return nn.GroupNorm(min(8, ch), ch)
    return nn.Identity()


def _act(kind: str) -> nn.Module:
    return Mish() if kind == "mish" else nn.ReLU(inplace=True)


class DoubleConv(nn.Sequential):
    def __init__(self, c_in, c_out, norm, act):
        super().__init__(
            nn.Conv2d(c_in, c_out, 3, padding=1, bias=norm == "none"),
            _norm(norm, c_out),
            _act(act),
            nn.Conv2d(c_out, c_out, 3, padding=1, bias=norm == "none"),
            _norm(norm, c_out),
            _act(act),
        )


class UNet(nn.Module):
    """Encoder/decoder with concatenated skips; logits of shape (B, 2, H, W)."""

    def __init__(self, spec: ModelSpec | None = None):
        super().__init__()
        self.spec = spec = spec or ModelSpec()
        widths = [spec.base_channels * 2 ** k for k in range(spec.depth + 1)]
        self.encoders = nn.ModuleList()
        c_in = spec.in_channels
        for w in widths[:-1]:
            self.encoders.append(DoubleConv(c_in, w, spec.norm, spec.activation))
            c_in = w
        self.bottleneck = DoubleConv(widths[-2], widths[-1], spec.norm, spec.activation)
        self.ups = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for w_hi, w in zip(widths[:0:-1], widths[-2::-1]):
            self.ups.append(nn.ConvTranspose2d(w_hi, w, 2, stride=2))
            self.decoders.append(DoubleConv(2 * w, w, spec.norm, spec.activation))
        self.head = nn.Conv2d(widths[0], spec.out_classes, 1)

    def check_input(self, x: torch.Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise ValueError(f"expected input (B, {self.spec.in_channels}, H, W), got {tuple(x.shape)}")
        d = self.spec.divisor
        h, w = x.shape[-2:]
        if h % d or w % d:
            raise ValueError(
                f"input spatial dims {h}x{w} must be divisible by 2**depth = {d} (depth {self.spec.depth})"
            )

    def forward_features(self, x):
        """Forward pass that also reports encoder and decoder feature shapes."""
        self.check_input(x)
        skips, enc_shapes, dec_shapes = [], [], []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            enc_shapes.append(tuple(x.shape))
            x = F.max_pool2d(x, 2)
        x = self.bottleneck(x)
        for up, dec, skip in zip(self.ups, self.decoders, reversed(skips)):
            x = dec(torch.cat([up(x), skip], dim=1))
            dec_shapes.append(tuple(x.shape))
        return self.head(x), enc_shapes, dec_shapes

    def forward(self, x):
        return self.forward_features(x)[0]


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def forward(model: UNet, batch) -> torch.Tensor:
    """Inference-mode logits for a ``(B, 1, H, W)`` batch."""
    x = torch.as_tensor(np.asarray(batch, dtype=np.float32)) if not torch.is_tensor(batch) else batch
    model.eval()
    with torch.no_grad():
        return model(x)


def predict_logits(model: UNet, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Z-score each slice, run the network in eval mode, return (n, 2, H, W) logits."""
    images = normalize_batch(images)
    out = []
    model.eval()
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            xb = torch.from_numpy(images[i:i + batch_size, None])
            out.append(model(xb).numpy())
    return np.concatenate(out)


def logits_to_mask_volume(logits: np.ndarray, samples: list[SliceSample], spacing=(1.0, 1.0, 1.0)) -> MaskVolume:
    """Argmax per slice, nearest-neighbour back to native size, restack."""
    check_case_samples(samples)
    if len(logits) != len(samples):
        raise ValueError(f"{len(logits)} logit maps for {len(samples)} samples")
    labels = np.argmax(logits, axis=1).astype(np.uint8)
    native = samples[0].native_shape
    planes = [resize_mask(lab, native) for lab in labels]
    s0 = samples[0]
    return MaskVolume(np.stack(planes), spacing, s0.case_id, s0.dataset_id)


def check_case_samples(samples: list[SliceSample]) -> None:
    """One case, slices 0..n-1 in order."""
    if not samples:
        raise ValueError("no samples")
    cases = {(DatasetId(s.dataset_id), s.case_id) for s in samples}
    if len(cases) > 1:
        raise ValueError(f"samples span {len(cases)} cases")
    idx = [s.slice_index for s in samples]
    if idx != sorted(idx):
        raise ValueError(f"samples are not ordered by slice_index: {idx}")
    if idx != list(range(len(idx))):
        raise ValueError(f"missing slices: have indices {idx}, expected 0..{len(idx) - 1}")


def predict_mask(model: UNet, samples: list[SliceSample], spacing=(1.0, 1.0, 1.0), batch_size: int = 8) -> MaskVolume:
    """Slice-wise segmentation of one case, returned at native resolution."""
    check_case_samples(samples)
    logits = predict_logits(model, np.stack([s.image for s in samples]), batch_size)
    return logits_to_mask_volume(logits, samples, spacing)


# -- checkpoints -----------------------------------------------------------

CHECKPOINT_MAGIC = b"PBCKPT"
CHECKPOINT_VERSION = 1


@dataclass
class ModelCheckpoint:
    state_dict: dict
    spec: ModelSpec
    config_hash: str = ""
    source: str = ""
    epoch: int = 0
    config: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    optimizer_state: dict | None = None

    def build_model(self) -> UNet:
        model = UNet(self.spec)
        model.load_state_dict(self.state_dict)
        model.eval()
        return model

    def header(self) -> dict:
        return {
            "format": "prostate-bench/checkpoint",
            "version": CHECKPOINT_VERSION,
            "spec": asdict(self.spec),
            "config_hash": self.config_hash,
            "source": self.source,
            "epoch": self.epoch,
            "config": self.config,
            "metrics": self.metrics,
        }

    def save(self, path) -> Path:
        """Write ``magic | version | header length | JSON header | torch blob``."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        header = json.dumps(self.header(), sort_keys=True).encode("utf-8")
        buf = io.BytesIO()
        torch.save({"state_dict": self.state_dict, "optimizer_state": self.optimizer_state}, buf)
        tmp = path.with_suffix(path.suffix + ".tmp")
        with open(tmp, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<HI", CHECKPOINT_VERSION, len(header)))
            fh.write(header)
            fh.write(buf.getvalue())
        tmp.replace(path)
        return path

    @classmethod
    def load(cls, path) -> ModelCheckpoint:
        path = Path(path)
        with open(path, "rb") as fh:
            if fh.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
                raise ValueError(f"{path}: not a checkpoint file (bad magic)")
            version, n = struct.unpack("<HI", fh.read(6))
            if version != CHECKPOINT_VERSION:
                raise ValueError(f"{path}: unsupported checkpoint version {version}")
            header = json.loads(fh.read(n).decode("utf-8"))
            blob = torch.load(io.BytesIO(fh.read()), map_location="cpu", weights_only=True)
        return cls(
            state_dict=blob["state_dict"],
            spec=ModelSpec(**header["spec"]),
            config_hash=header["config_hash"],
            source=header["source"],
            epoch=header["epoch"],
            config=header["config"],
            metrics=header.get("metrics", {}),
            optimizer_state=blob.get("optimizer_state"),
        )


def state_dict_digest(state_dict: dict) -> str:
    h = hashlib.sha256()
    for k in sorted(state_dict):
        h.update(k.encode())
        h.update(state_dict[k].detach().cpu().numpy().tobytes())
    return h.hexdigest()
