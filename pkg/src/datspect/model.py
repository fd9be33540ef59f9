"""Binary PD/control classifier: backbone + GAP/dense/dropout/sigmoid head.

Two backbones are available. ``inception`` wraps torchvision's Inception v3
feature stack (transfer learning from a pretrained weights file);
``small`` is a three-block CNN trained from scratch, used for desk-scale runs
and tests that must not depend on downloaded weights.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from datspect.augment import AugmentationConfig, augment, sample_rng
from datspect.imaging import read_image
from datspect.labels import LABELS
from datspect.metrics import ScoredPrediction
from datspect.splits import DatasetManifest

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "datspect-checkpoint"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


class ImageLoadError(OSError):
    pass


# -- schedule and loss -------------------------------------------------------


@dataclass(frozen=True)
class StepDecaySchedule:
    initial_lr: float = 1e-3
    final_lr: float = 1e-6
    drop_factor: float = 0.1
    drop_period: int = 125

    def __post_init__(self):
        if not 0 < self.final_lr <= self.initial_lr:
            raise ValueError("need 0 < final_lr <= initial_lr")
        if not 0 < self.drop_factor <= 1:
            raise ValueError("drop_factor must lie in (0, 1]")
        if self.drop_period < 1:
            raise ValueError("drop_period must be >= 1")


def lr_at(s: StepDecaySchedule, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be nonnegative")
    lr = s.initial_lr * s.drop_factor ** (epoch // s.drop_period)
    # 1e-3 * 0.1**3 lands a hair above 1e-6; snap float noise onto the floor
    return s.final_lr if lr <= s.final_lr * (1 + 1e-9) else lr


def bce_loss(y, p, eps: float = 1e-7) -> float:
    """Mean binary cross-entropy with probabilities clipped to [eps, 1 - eps]."""
    y = np.asarray(y, dtype=np.float64)
    p = np.clip(np.asarray(p, dtype=np.float64), eps, 1.0 - eps)
    return float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))))


def bce_from_logits(logits: torch.Tensor, y: torch.Tensor, eps: float = 1e-7) -> torch.Tensor:
    p = torch.sigmoid(logits).clamp(eps, 1.0 - eps)
    return -(y * torch.log(p) + (1.0 - y) * torch.log(1.0 - p)).mean()


# -- network -----------------------------------------------------------------


class FeatureExtractor(nn.Module):
    """Maps an N x 3 x H x W batch to an N x C x h' x w' feature map."""

    out_channels: int
    input_size: tuple[int, int] | None = None

    def set_trainable(self, trainable: bool) -> None:
        for p in self.parameters():
            p.requires_grad_(trainable)


class SmallCNN(FeatureExtractor):
    def __init__(self, widths: Sequence[int] = (16, 32, 64)):
        super().__init__()
        layers = []
        c_in = 3
        for c_out in widths:
            layers += [nn.Conv2d(c_in, c_out, 3, padding=1), nn.ReLU(inplace=True), nn.MaxPool2d(2)]
            c_in = c_out
        self.features = nn.Sequential(*layers)
        self.out_channels = c_in

    def forward(self, x):
        return self.features(x)


class InceptionBackbone(FeatureExtractor):
    """torchvision Inception v3 up to ``Mixed_7c`` (2048 channels at 8x8).

    ``weights`` is a path to a state dict, ``"imagenet"`` for torchvision's
    published weights, or ``None`` for random initialisation.
    """

    input_size = (299, 299)

    def __init__(self, weights: str | None = None):
        super().__init__()
        from torchvision.models import inception_v3

        if weights == "imagenet":
            from torchvision.models import Inception_V3_Weights

            net = inception_v3(weights=Inception_V3_Weights.IMAGENET1K_V1)
        else:
            net = inception_v3(weights=None, aux_logits=False, init_weights=False)
            if weights is not None:
                state = torch.load(weights, map_location="cpu", weights_only=True)
                state = {k: v for k, v in state.items() if not k.startswith(("fc.", "AuxLogits."))}
                net.load_state_dict(state, strict=False)
        names = [
            "Conv2d_1a_3x3", "Conv2d_2a_3x3", "Conv2d_2b_3x3", "maxpool1",
            "Conv2d_3b_1x1", "Conv2d_4a_3x3", "maxpool2",
            "Mixed_5b", "Mixed_5c", "Mixed_5d", "Mixed_6a", "Mixed_6b", "Mixed_6c",
            "Mixed_6d", "Mixed_6e", "Mixed_7a", "Mixed_7b", "Mixed_7c",
        ]  # fmt: skip
        self.features = nn.Sequential(*(getattr(net, n) for n in names))
        self.out_channels = 2048
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))

    def forward(self, x):
        if tuple(x.shape[-2:]) != self.input_size:
            x = F.interpolate(x, size=self.input_size, mode="bilinear", align_corners=False)
        return self.features((x - self.mean) / self.std)


def build_backbone(kind: str, weights: str | None = None) -> FeatureExtractor:
    if kind == "small":
        return SmallCNN()
    if kind == "inception":
        return InceptionBackbone(weights)
    raise ValueError(f"unknown backbone {kind!r}")


class ClassifierHead(nn.Module):
    """GAP -> dense(ReLU) -> dropout -> dense -> logit (sigmoid applied by callers)."""

    def __init__(self, in_channels: int, units: int = 1024, dropout: float = 0.5):
        super().__init__()
        self.dense1 = nn.Linear(in_channels, units)
        self.dropout = nn.Dropout(dropout)
        self.dense2 = nn.Linear(units, 1)

    def forward(self, fmap: torch.Tensor) -> torch.Tensor:
        pooled = fmap.mean(dim=(2, 3))
        return self.dense2(self.dropout(F.relu(self.dense1(pooled)))).squeeze(1)


class Classifier(nn.Module):
    def __init__(self, backbone: FeatureExtractor, head: ClassifierHead):
        super().__init__()
        self.backbone = backbone
        self.head = head

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected N x 3 x H x W input, got {tuple(x.shape)}")
        return self.head(self.backbone(x))


def to_tensor(pixels: np.ndarray) -> torch.Tensor:
    """N x H x W x 3 uint8 -> N x 3 x H x W float in [0, 1]."""
    pixels = np.asarray(pixels)
    if pixels.ndim == 3:
        pixels = pixels[None]
    if pixels.ndim != 4 or pixels.shape[-1] != 3:
        raise ValueError(f"expected (N,) H x W x 3 images, got {pixels.shape}")
    return torch.from_numpy(np.ascontiguousarray(pixels.transpose(0, 3, 1, 2))).float() / 255.0


@torch.no_grad()
def forward(model: Classifier, images: np.ndarray) -> np.ndarray:
    """Inference-mode probabilities for a batch of HxWx3 uint8 images."""
    model.eval()
    return torch.sigmoid(model(to_tensor(images))).double().numpy()


# -- training ----------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 500
    batch_size: int = 16
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-7
    bce_eps: float = 1e-7
    seed: int = 0
    backbone: str = "small"
    backbone_weights: str | None = None
    backbone_mode: str = "fine-tune"
    head_units: int = 1024
    dropout: float = 0.5
    threshold: float = 0.5

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.backbone_mode not in ("frozen", "fine-tune"):
            raise ValueError("backbone_mode must be 'frozen' or 'fine-tune'")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    train_accuracy: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    val_loss: float | None = None
    val_accuracy: float | None = None

    def as_dict(self) -> dict:
        return asdict(self)


def build_model(cfg: TrainConfig) -> Classifier:
    torch.manual_seed(cfg.seed)
    backbone = build_backbone(cfg.backbone, cfg.backbone_weights)
    head = ClassifierHead(backbone.out_channels, cfg.head_units, cfg.dropout)
    backbone.set_trainable(cfg.backbone_mode == "fine-tune")
    return Classifier(backbone, head)


def load_images(m: DatasetManifest) -> tuple[np.ndarray, np.ndarray]:
    """Stack every manifest image; returns (N x H x W x 3 uint8, N targets)."""
    images = []
    for e in m.entries:
        try:
            images.append(read_image(e.image_path))
        except OSError as exc:
            raise ImageLoadError(f"cannot read image for {e.subject_id}: {exc}") from None
    shapes = {im.shape for im in images}
    if len(shapes) > 1:
        raise ImageLoadError(f"images have mixed shapes {sorted(shapes)}")
    targets = np.array([e.label.target for e in m.entries], dtype=np.float32)
    if not images:
        return np.zeros((0, 0, 0, 3), np.uint8), targets
    return np.stack(images), targets


def train(
    train_set: DatasetManifest,
    val_set: DatasetManifest | None = None,
    cfg: TrainConfig | None = None,
    aug: AugmentationConfig | None = None,
    schedule: StepDecaySchedule | None = None,
    model: Classifier | None = None,
    images: tuple[np.ndarray, np.ndarray] | None = None,
) -> tuple[Classifier, TrainHistory]:
    """Adam + step-decay training; augmentation is applied to training batches only.

    ``images`` may carry pre-loaded (pixels, targets) for ``train_set`` to skip disk reads.
    """
    cfg = cfg or TrainConfig()
    aug = aug or AugmentationConfig()
    schedule = schedule or StepDecaySchedule()
    counts = train_set.counts()
    if len(train_set) == 0 or any(counts[lab] == 0 for lab in LABELS):
        raise TrainingError(f"training set needs both classes, got {({k.value: v for k, v in counts.items()})}")
    pixels, targets = images if images is not None else load_images(train_set)
    ids = train_set.subject_ids
    model = model or build_model(cfg)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=schedule.initial_lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps)
    torch.manual_seed(cfg.seed)
    n = len(ids)
    hist = TrainHistory()
    for epoch in range(cfg.epochs):
        lr = lr_at(schedule, epoch)
        for g in opt.param_groups:
            g["lr"] = lr
        order = np.random.Generator(np.random.Philox([cfg.seed, epoch])).permutation(n)
        model.train()
        loss_sum = 0.0
        correct = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            batch = np.stack([augment(pixels[i], aug, sample_rng(cfg.seed, ids[i], epoch)) for i in idx])
            y = torch.from_numpy(targets[idx])
            logits = model(to_tensor(batch))
            loss = bce_from_logits(logits, y, cfg.bce_eps)
            opt.zero_grad()
            loss.backward()
            opt.step()
            loss_sum += loss.item() * len(idx)
            correct += int(((torch.sigmoid(logits) >= cfg.threshold).float() == y).sum())
        hist.train_loss.append(loss_sum / n)
        hist.train_accuracy.append(correct / n)
        hist.lr.append(lr)
        log.debug("epoch %d lr %.2e loss %.4f acc %.4f", epoch, lr, hist.train_loss[-1], hist.train_accuracy[-1])
    if val_set is not None and len(val_set):
        hist.val_loss, hist.val_accuracy, _ = evaluate(model, val_set, cfg)
    return model, hist


def predict(model: Classifier, m: DatasetManifest, images: np.ndarray | None = None, batch_size: int = 64) -> list[ScoredPrediction]:
    """Deterministic, unaugmented scores for every manifest entry."""
    pixels = images if images is not None else load_images(m)[0]
    scores = np.concatenate(
        [forward(model, pixels[i : i + batch_size]) for i in range(0, len(m), batch_size)]
    ) if len(m) else np.zeros(0)
    return [
        ScoredPrediction(e.subject_id, float(s), e.label)
        for e, s in zip(m.entries, np.clip(scores, 0.0, 1.0))
    ]


def evaluate(model: Classifier, m: DatasetManifest, cfg: TrainConfig | None = None):
    """(loss, accuracy, predictions) on an unaugmented set."""
    cfg = cfg or TrainConfig()
    preds = predict(model, m)
    y = [p.truth.target for p in preds]
    s = [p.score for p in preds]
    acc = float(np.mean([(si >= cfg.threshold) == bool(yi) for si, yi in zip(s, y)]))
    return bce_loss(y, s, cfg.bce_eps), acc, preds


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(path: Path, model: Classifier, cfg: TrainConfig, schedule: StepDecaySchedule, history: TrainHistory | None = None, extra: dict | None = None) -> None:
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "backbone": {"kind": cfg.backbone, "weights_ref": cfg.backbone_weights},
            "state_dict": model.state_dict(),
            "train_config": asdict(cfg),
            "schedule": asdict(schedule),
            "schedule_state": {"epochs_run": len(history.lr) if history else 0},
            "history": history.as_dict() if history else None,
            "extra": extra or {},
        },
        path,
    )


def load_checkpoint(path: Path) -> tuple[Classifier, TrainConfig, StepDecaySchedule]:
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if ckpt.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if ckpt.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {ckpt.get('version')}")
    cfg = TrainConfig(**ckpt["train_config"])
    # the stored state dict already holds the backbone weights
    cfg_nofetch = TrainConfig(**{**ckpt["train_config"], "backbone_weights": None})
    model = build_model(cfg_nofetch)
    model.load_state_dict(ckpt["state_dict"])
    model.eval()
    return model, cfg, StepDecaySchedule(**ckpt["schedule"])


def head_loss(head: ClassifierHead, fmap: torch.Tensor, y: torch.Tensor, eps: float = 1e-7) -> torch.Tensor:
    return bce_from_logits(head(fmap), y, eps)


def head_gradients(head: ClassifierHead, fmap: np.ndarray, y: np.ndarray) -> dict[str, np.ndarray]:
    """Closed-form gradients of the mean BCE loss w.r.t. the head parameters.

    Dropout is treated as inactive, and probabilities are assumed to lie
    inside the clipping band, where the clip has zero effect.
    """
    w1 = head.dense1.weight.detach().double().numpy()
    b1 = head.dense1.bias.detach().double().numpy()
    w2 = head.dense2.weight.detach().double().numpy()[0]
    b2 = float(head.dense2.bias.detach().double()[0])
    g = np.asarray(fmap, dtype=np.float64).mean(axis=(2, 3))
    y = np.asarray(y, dtype=np.float64)
    pre = g @ w1.T + b1
    h = np.maximum(pre, 0.0)
    p = 1.0 / (1.0 + np.exp(-(h @ w2 + b2)))
    dz = (p - y) / len(y)
    dpre = np.outer(dz, w2) * (pre > 0)
    return {
        "dense1.weight": dpre.T @ g,
        "dense1.bias": dpre.sum(axis=0),
        "dense2.weight": (dz @ h)[None, :],
        "dense2.bias": np.array([dz.sum()]),
    }


def parameter_count(model: nn.Module, trainable_only: bool = True) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad or not trainable_only)


def expected_steps(n: int, cfg: TrainConfig) -> int:
    return cfg.epochs * math.ceil(n / cfg.batch_size)
