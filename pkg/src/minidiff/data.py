"""Dataset ingestion, manifest/split management, and the synthetic defect corpus.

Images are single-channel arrays in [0, 1] throughout; class-per-directory
trees of 8-bit grayscale PNGs on disk. Manifests are line-delimited JSON: one
header record (classes, image size) followed by one record per image.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import InsufficientGeneratedError, InvalidDatasetError, InvalidStateError

SPLITS = ("train", "val", "test")
TEXTURE_KINDS = ("scratch", "pit", "patch", "scale")


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: str
    split: str = "train"
    provenance: str = "real"
    source_id: str | None = None


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    classes: list[str]
    image_size: int
    rejects: list[str] = field(default_factory=list)

    def of_class(self, label: str, split: str | None = None,
                 provenance: str | None = None) -> list[ManifestEntry]:
        return [e for e in self.entries
                if e.label == label
                and (split is None or e.split == split)
                and (provenance is None or e.provenance == provenance)]

    def counts(self) -> dict[str, dict[str, int]]:
        out = {c: {s: 0 for s in SPLITS} for c in self.classes}
        for e in self.entries:
            out[e.label][e.split] += 1
        return out


def _check_hygiene(manifest: DatasetManifest) -> DatasetManifest:
    for e in manifest.entries:
        if e.provenance == "generated" and e.split != "train":
            raise InvalidStateError(
                f"generated entry leaked into {e.split} split: {e.path}")
    return manifest


def load_image(path: str | Path, image_size: int | None = None) -> np.ndarray:
    """Read a PNG as a grayscale float array in [0, 1], resizing if asked."""
    with Image.open(path) as im:
        im = im.convert("L")
        if image_size is not None and im.size != (image_size, image_size):
            im = im.resize((image_size, image_size), Image.BILINEAR)
        return np.asarray(im, dtype=np.float64) / 255.0


def save_image(image: np.ndarray, path: str | Path) -> None:
    """Write a [0, 1] float array as an 8-bit grayscale PNG."""
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8), mode="L").save(path)


def load_split_images(manifest: DatasetManifest, split: str,
                      label: str | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Stack a split's images and integer labels in manifest order."""
    idx = {c: i for i, c in enumerate(manifest.classes)}
    selected = [e for e in manifest.entries
                if e.split == split and (label is None or e.label == label)]
    images = np.stack([load_image(e.path, manifest.image_size) for e in selected])
    labels = np.array([idx[e.label] for e in selected], dtype=np.int64)
    return images, labels


def _split_counts(n: int, ratio) -> tuple[int, int, int]:
    r = [float(x) for x in ratio]
    if len(r) != 3 or any(x < 0 for x in r) or sum(r) <= 0:
        raise ValueError(f"split ratio must be 3 nonnegative numbers, got {ratio!r}")
    if all(float(x) == int(x) for x in r) and int(sum(r)) == n:
        return int(r[0]), int(r[1]), int(r[2])
    total = sum(r)
    n_val = int(round(n * r[1] / total))
    n_test = int(round(n * r[2] / total))
    n_train = n - n_val - n_test
    if n_train < 0:
        raise ValueError(f"ratio {ratio!r} infeasible for {n} items")
    return n_train, n_val, n_test


def otsu_threshold(image: np.ndarray) -> float:
    """Otsu's between-class-variance threshold on a [0, 1] grayscale image."""
    hist, edges = np.histogram(image.ravel(), bins=256, range=(0.0, 1.0))
    hist = hist.astype(np.float64)
    centers = (edges[:-1] + edges[1:]) / 2
    w0 = np.cumsum(hist)
    w1 = w0[-1] - w0
    m0 = np.cumsum(hist * centers)
    mt = m0[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        mu0 = m0 / w0
        mu1 = (mt - m0) / w1
        between = w0 * w1 * (mu0 - mu1) ** 2
    between[~np.isfinite(between)] = -1.0
    # between-class variance plateaus over every cut separating two modes;
    # take the plateau midpoint so the threshold lands between them
    plateau = np.flatnonzero(between >= between.max() - 1e-12)
    k = int(plateau[len(plateau) // 2])
    return float(edges[k + 1])


def billet_roi_crops(image: np.ndarray, out_size: int = 200) -> list[np.ndarray]:
    """Industrial-imagery preprocessing: binarize to find the workpiece region,
    cut it into square sub-images, and resize each to out_size."""
    mask = image > otsu_threshold(image)
    if not mask.any():
        return []
    rows = np.where(mask.any(axis=1))[0]
    cols = np.where(mask.any(axis=0))[0]
    roi = image[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]
    h, w = roi.shape
    side = min(h, w)
    if side < 8:
        return []
    crops = []
    for axis_off in range(0, max(h, w) - side + 1, side):
        sub = roi[axis_off:axis_off + side, :side] if h >= w \
            else roi[:side, axis_off:axis_off + side]
        im = Image.fromarray(np.round(np.clip(sub, 0, 1) * 255).astype(np.uint8), "L")
        crops.append(np.asarray(im.resize((out_size, out_size), Image.BILINEAR),
                                dtype=np.float64) / 255.0)
    return crops


def ingest(root: str | Path, ratio=(8, 1, 1), seed: int = 0,
           image_size: int | None = None) -> DatasetManifest:
    """Build a manifest from a class-per-directory image tree.

    Performs a deterministic stratified split per class at the given ratio
    (proportions, or exact per-split counts when they sum to the class size).
    Every file is validated by decoding it; undecodable files land in the
    manifest's rejects list instead of failing the ingest.
    """
    root = Path(root)
    if not root.is_dir():
        raise InvalidDatasetError(f"dataset root {root} is not a directory")
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not classes:
        raise InvalidDatasetError(f"no class directories under {root}")
    entries: list[ManifestEntry] = []
    rejects: list[str] = []
    inferred_size = image_size
    for ci, label in enumerate(classes):
        files = sorted(p for p in (root / label).iterdir() if p.is_file())
        good: list[str] = []
        for f in files:
            try:
                img = load_image(f, image_size)
            except Exception:
                rejects.append(str(f))
                continue
            if inferred_size is None:
                inferred_size = img.shape[0]
            good.append(str(f))
        if not good:
            raise InvalidDatasetError(f"class directory {root / label} has no images")
        n_train, n_val, n_test = _split_counts(len(good), ratio)
        order = np.random.default_rng([seed, ci]).permutation(len(good))
        assignment = {}
        for k, pos in enumerate(order):
            if k < n_train:
                assignment[pos] = "train"
            elif k < n_train + n_val:
                assignment[pos] = "val"
            else:
                assignment[pos] = "test"
        entries.extend(
            ManifestEntry(path=good[i], label=label, split=assignment[i])
            for i in range(len(good)))
    manifest = DatasetManifest(entries=entries, classes=classes,
                               image_size=int(inferred_size), rejects=rejects)
    return _check_hygiene(manifest)


def subset_train(manifest: DatasetManifest, alpha: float, seed: int = 0) -> DatasetManifest:
    """Keep ceil(alpha * n) real training entries per class; val/test untouched."""
    if not (0.0 < alpha <= 1.0):
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    if alpha == 1.0:
        return manifest
    keep: set[int] = set()
    by_class: dict[str, list[int]] = {c: [] for c in manifest.classes}
    for i, e in enumerate(manifest.entries):
        if e.split == "train" and e.provenance == "real":
            by_class[e.label].append(i)
        else:
            keep.add(i)
    for ci, label in enumerate(manifest.classes):
        idxs = by_class[label]
        k = math.ceil(alpha * len(idxs))
        order = np.random.default_rng([seed, ci]).permutation(len(idxs))
        keep.update(idxs[j] for j in order[:k])
    entries = [e for i, e in enumerate(manifest.entries) if i in keep]
    return _check_hygiene(replace(manifest, entries=entries))


def _pool_by_class(pool: DatasetManifest | list[ManifestEntry],
                   classes: list[str]) -> dict[str, list[ManifestEntry]]:
    entries = pool.entries if isinstance(pool, DatasetManifest) else list(pool)
    out: dict[str, list[ManifestEntry]] = {c: [] for c in classes}
    for e in entries:
        if e.provenance != "generated":
            continue
        if e.label in out:
            out[e.label].append(e)
    return out


def substitute(manifest: DatasetManifest, alpha: float, pool,
               seed: int = 0) -> DatasetManifest:
    """Replace a (1 - alpha) fraction of each class's real training entries with
    generated ones, restoring the original per-class training count."""
    if not (0.0 < alpha <= 1.0):
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    if alpha == 1.0:
        return manifest
    original = {c: len(manifest.of_class(c, split="train")) for c in manifest.classes}
    reduced = subset_train(manifest, alpha, seed=seed)
    gen = _pool_by_class(pool, manifest.classes)
    entries = list(reduced.entries)
    for label in manifest.classes:
        need = original[label] - len(reduced.of_class(label, split="train"))
        avail = gen[label]
        if len(avail) < need:
            raise InsufficientGeneratedError(
                f"class {label}: need {need} generated entries, pool has {len(avail)}")
        entries.extend(replace(e, split="train") for e in avail[:need])
    return _check_hygiene(replace(manifest, entries=entries))


def expand(manifest: DatasetManifest, pool, n: int) -> DatasetManifest:
    """Append n generated entries per class to the training split."""
    if n < 0:
        raise ValueError(f"n must be nonnegative, got {n}")
    if n == 0:
        return manifest
    gen = _pool_by_class(pool, manifest.classes)
    entries = list(manifest.entries)
    for label in manifest.classes:
        avail = gen[label]
        if len(avail) < n:
            raise InsufficientGeneratedError(
                f"class {label}: need {n} generated entries, pool has {len(avail)}")
        entries.extend(replace(e, split="train") for e in avail[:n])
    return _check_hygiene(replace(manifest, entries=entries))


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    with open(path, "w") as f:
        f.write(json.dumps({"classes": manifest.classes,
                            "image_size": manifest.image_size},
                           sort_keys=True) + "\n")
        for e in manifest.entries:
            rec = {"path": e.path, "label": e.label, "split": e.split,
                   "provenance": e.provenance}
            if e.source_id is not None:
                rec["source_id"] = e.source_id
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def load_manifest(path: str | Path, check_paths: bool = True) -> DatasetManifest:
    with open(path) as f:
        lines = [json.loads(line) for line in f if line.strip()]
    if not lines:
        raise InvalidDatasetError(f"empty manifest file {path}")
    head, *records = lines
    entries = [ManifestEntry(path=r["path"], label=r["label"], split=r["split"],
                             provenance=r.get("provenance", "real"),
                             source_id=r.get("source_id"))
               for r in records]
    if check_paths:
        missing = [e.path for e in entries if not os.path.exists(e.path)]
        if missing:
            raise InvalidDatasetError(
                f"{len(missing)} manifest paths missing, first: {missing[0]}")
    return _check_hygiene(DatasetManifest(entries=entries, classes=head["classes"],
                                          image_size=head["image_size"]))


# ---------------------------------------------------------------------------
# Synthetic defect corpus

def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    field_ = ndimage.uniform_filter(rng.standard_normal((size, size)), size=5)
    field_ = (field_ - field_.mean()) / (field_.std() + 1e-9)
    return 0.45 + 0.04 * field_


def _add_line(img: np.ndarray, rng: np.random.Generator, amp: float) -> None:
    # Border-to-border segments keep the per-image line mass consistent.
    size = img.shape[0]
    if rng.random() < 0.5:
        x0, x1 = 0.0, size - 1.0
        y0, y1 = rng.uniform(0, size - 1, size=2)
    else:
        y0, y1 = 0.0, size - 1.0
        x0, x1 = rng.uniform(0, size - 1, size=2)
    xs = np.linspace(x0, x1, 2 * size)
    ys = np.linspace(y0, y1, 2 * size)
    yy, xx = np.mgrid[0:size, 0:size]
    bump = np.zeros_like(img)
    sigma = 0.8
    for x, y in zip(xs, ys):
        bump = np.maximum(bump, np.exp(-((xx - x) ** 2 + (yy - y) ** 2) / (2 * sigma**2)))
    img += amp * bump


def _add_blob(img: np.ndarray, rng: np.random.Generator, amp: float) -> None:
    size = img.shape[0]
    margin = max(1, size // 10)
    cx, cy = rng.uniform(margin, size - 1 - margin, size=2)
    sigma = size / 16.0
    yy, xx = np.mgrid[0:size, 0:size]
    img += amp * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sigma**2))


def _texture(kind: str, rng: np.random.Generator, size: int) -> np.ndarray:
    img = _background(rng, size)
    if kind == "scratch":
        for _ in range(3):
            _add_line(img, rng, amp=rng.uniform(0.42, 0.48))
    elif kind == "pit":
        for _ in range(7):
            _add_blob(img, rng, amp=-rng.uniform(0.46, 0.54))
    elif kind == "patch":
        lo = max(2, (size * 7) // 16)
        hi = max(lo + 1, (size * 17) // 32)
        h = int(rng.integers(lo, hi + 1))
        w = int(rng.integers(lo, hi + 1))
        r = int(rng.integers(0, size - h))
        c = int(rng.integers(0, size - w))
        mask = np.zeros((size, size))
        mask[r:r + h, c:c + w] = 1.0
        img += rng.uniform(0.32, 0.38) * ndimage.uniform_filter(mask, size=3)
    elif kind == "scale":
        band = max(2, (size * 5) // 32)
        for _ in range(2):
            r = int(rng.integers(0, size - band))
            img[r:r + band] += -0.12 + 0.14 * rng.uniform(-1, 1, size=(band, size))
    else:
        raise ValueError(f"unknown texture kind {kind!r}; expected one of {TEXTURE_KINDS}")
    return np.clip(img, 0.0, 1.0)


def synth_corpus(classes, n_per_class: int, size: int, seed: int,
                 root: str | Path) -> DatasetManifest:
    """Write a deterministic procedural defect corpus to <root>/<class>/<name>.png.

    Returns a manifest of the written files (all entries split="train"; run
    ingest on the root to assign splits).
    """
    root = Path(root)
    entries = []
    for ci, kind in enumerate(classes):
        cls_dir = root / kind
        cls_dir.mkdir(parents=True, exist_ok=True)
        for i in range(n_per_class):
            rng = np.random.default_rng([seed, ci, i])
            img = _texture(kind, rng, size)
            path = cls_dir / f"{kind}_{i:04d}.png"
            save_image(img, path)
            entries.append(ManifestEntry(path=str(path), label=kind))
    return DatasetManifest(entries=entries, classes=sorted(classes), image_size=size)
