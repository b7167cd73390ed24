"""Downstream defect-recognition training and evaluation, used to quantify
the value of generated data."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import ndimage

from .data import DatasetManifest, load_split_images
from .errors import InvalidDatasetError

ROTATION_DEGREES = 10.0


@dataclass
class TrainRun:
    """One classifier training run; best epoch chosen by validation accuracy."""

    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-4
    seed: int = 0
    patience: int = 5
    channels: int = 1          # 3 replicates grayscale at the input
    widths: tuple[int, ...] = (16, 32, 64)
    augment: bool = True
    history: list[dict] = field(default_factory=list)


def augment(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Rotate uniformly within +/-10 degrees (edge-replicated border) and flip
    each axis independently with probability 1/2."""
    angle = rng.uniform(-ROTATION_DEGREES, ROTATION_DEGREES)
    out = np.asarray(image, dtype=np.float64)
    if angle != 0.0:
        out = ndimage.rotate(out, angle, reshape=False, order=1, mode="nearest")
    if rng.random() < 0.5:
        out = out[:, ::-1]
    if rng.random() < 0.5:
        out = out[::-1, :]
    return np.clip(out, 0.0, 1.0)


class DefectClassifier(nn.Module):
    """Small CNN: strided conv blocks with batch norm, global average pool,
    linear head."""

    def __init__(self, n_classes: int, channels: int = 1,
                 widths: tuple[int, ...] = (16, 32, 64), seed: int = 0):
        super().__init__()
        self.channels = channels
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            blocks = []
            c_in = channels
            for w in widths:
                blocks += [nn.Conv2d(c_in, w, 3, stride=2, padding=1),
                           nn.BatchNorm2d(w), nn.SiLU()]
                c_in = w
            self.body = nn.Sequential(*blocks)
            self.head = nn.Linear(c_in, n_classes)

    def _prepare(self, images) -> torch.Tensor:
        x = torch.as_tensor(np.asarray(images), dtype=torch.float32)
        if x.dim() == 2:
            x = x[None]
        x = x[:, None].repeat(1, self.channels, 1, 1)
        return x

    def features(self, images) -> np.ndarray:
        """Penultimate-layer features (the probe used for Frechet scoring)."""
        self.eval()
        with torch.no_grad():
            h = self.body(self._prepare(images))
            return h.mean(dim=(2, 3)).numpy()

    def forward(self, images) -> torch.Tensor:
        h = self.body(self._prepare(images))
        return self.head(h.mean(dim=(2, 3)))

    def predict(self, images) -> np.ndarray:
        self.eval()
        with torch.no_grad():
            return self.forward(images).argmax(dim=1).numpy()


def mean_cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean of -log p_hat(c | x) over the batch."""
    return F.cross_entropy(logits, labels)


def train_classifier(manifest: DatasetManifest, run: TrainRun
                     ) -> tuple[DefectClassifier, list[dict]]:
    """Minimize cross-entropy on the (augmented) train split, track per-epoch
    validation accuracy, and restore the best-validation checkpoint. The test
    split is never read here."""
    for split in ("train", "val", "test"):
        if not any(e.split == split for e in manifest.entries):
            raise InvalidDatasetError(f"manifest has no {split} split")
    train_x, train_y = load_split_images(manifest, "train")
    if len(set(train_y.tolist())) < 2:
        raise InvalidDatasetError("train split holds fewer than 2 classes")
    val_x, val_y = load_split_images(manifest, "val")
    model = DefectClassifier(len(manifest.classes), channels=run.channels,
                             widths=run.widths, seed=run.seed)
    opt = torch.optim.Adam(model.parameters(), lr=run.lr)
    rng = np.random.default_rng(run.seed)
    history: list[dict] = []
    best_acc, best_state, since_best = -1.0, None, 0
    n = len(train_x)
    for epoch in range(run.epochs):
        order = rng.permutation(n)
        losses = []
        model.train()
        for start in range(0, n, run.batch_size):
            idx = order[start:start + run.batch_size]
            if len(idx) < 2:     # batch norm needs at least 2 samples
                continue
            batch = train_x[idx]
            if run.augment:
                batch = np.stack([augment(img, rng) for img in batch])
            logits = model(batch)
            loss = mean_cross_entropy(logits, torch.from_numpy(train_y[idx]))
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        val_acc = float((model.predict(val_x) == val_y).mean())
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)),
                        "val_acc": val_acc})
        if val_acc > best_acc:
            best_acc, since_best = val_acc, 0
            best_state = copy.deepcopy(model.state_dict())
        else:
            since_best += 1
            if since_best >= run.patience:
                break
    if best_state is not None:
        model.load_state_dict(best_state)
    run.history = history
    return model, history


def evaluate(model: DefectClassifier, manifest: DatasetManifest, split: str
             ) -> tuple[float, np.ndarray]:
    """Accuracy and per-class confusion counts (rows = true class)."""
    images, labels = load_split_images(manifest, split)
    if len(images) == 0:
        raise InvalidDatasetError(f"split {split!r} is empty")
    pred = model.predict(images)
    k = len(manifest.classes)
    confusion = np.zeros((k, k), dtype=np.int64)
    for t, p in zip(labels, pred):
        confusion[t, p] += 1
    return float((pred == labels).mean()), confusion
