"""Crops for training the rejection-class proxy."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image

from mergetrain.datasets.manifest import DatasetManifest, ManifestError
from mergetrain.geometry import Box, iou_matrix

log = logging.getLogger(__name__)

CROP_INDEX = "index.jsonl"


@dataclass
class CropRecord:
    pixels: np.ndarray  # (h, w, 3) uint8
    label: int  # 1..K, K+1 = not of interest
    source: str = ""

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[0] < 1 or self.pixels.shape[1] < 1:
            raise ValueError(f"crop from {self.source!r} has empty pixel dimensions {self.pixels.shape}")

    @property
    def size(self) -> tuple[int, int]:
        """(width, height) in pixels."""
        return int(self.pixels.shape[1]), int(self.pixels.shape[0])


def pixel_window(box: Box, width: int, height: int) -> tuple[int, int, int, int] | None:
    """Integer pixel window (x0, y0, x1, y1) under ``box``, clipped to the image; None if empty."""
    x0 = max(0, int(round((box.cx - box.w / 2) * width)))
    y0 = max(0, int(round((box.cy - box.h / 2) * height)))
    x1 = min(width, int(round((box.cx + box.w / 2) * width)))
    y1 = min(height, int(round((box.cy + box.h / 2) * height)))
    if x1 <= x0 or y1 <= y0:
        return None
    return x0, y0, x1, y1


def crop_image(image: np.ndarray, box: Box) -> np.ndarray | None:
    h, w = image.shape[:2]
    win = pixel_window(box, w, h)
    if win is None:
        return None
    x0, y0, x1, y1 = win
    return image[y0:y1, x0:x1]


def proxy_crops(full: DatasetManifest, images, in_classes: Iterable[int], ood_classes: Iterable[int]) -> list[CropRecord]:
    """One crop per annotation of ``in_classes`` (re-indexed 1..K) or ``ood_classes`` (label K+1).

    ``images`` is anything with a ``get(record)`` method returning an RGB array.
    """
    in_sorted = sorted(set(in_classes))
    ood = set(ood_classes)
    if set(in_sorted) & ood:
        raise ManifestError("in-distribution and OoD class sets overlap")
    remap = {c: k + 1 for k, c in enumerate(in_sorted)}
    reject = len(in_sorted) + 1

    out, skipped = [], 0
    for rec in full.records:
        wanted = [a for a in rec.annotations if a.class_id in remap or a.class_id in ood]
        if not wanted:
            continue
        img = images.get(rec)
        for a in wanted:
            patch = crop_image(img, a.box)
            if patch is None:
                skipped += 1
                continue
            label = remap.get(a.class_id, reject)
            out.append(CropRecord(np.ascontiguousarray(patch), label, rec.id))
    if skipped:
        log.warning("skipped %d degenerate crops", skipped)
    return out


def background_crops(full: DatasetManifest, images, n_per_image: int, label: int, rng: np.random.Generator,
                     max_iou: float = 0.1) -> list[CropRecord]:
    """Random object-sized windows that overlap no annotated shape; labeled as rejections."""
    sizes = np.array([[a.box.w, a.box.h] for r in full.records for a in r.annotations])
    if len(sizes) == 0:
        return []
    out = []
    for rec in full.records:
        img = images.get(rec)
        ann = np.array([a.box.as_tuple() for a in rec.annotations]).reshape(-1, 4)
        for _ in range(n_per_image):
            for _ in range(20):
                w, h = sizes[rng.integers(len(sizes))] * rng.uniform(0.7, 1.4, size=2)
                w, h = min(w, 0.9), min(h, 0.9)
                cx, cy = rng.uniform(w / 2, 1 - w / 2), rng.uniform(h / 2, 1 - h / 2)
                cand = np.array([[cx, cy, w, h]])
                if len(ann) and iou_matrix(cand, ann).max() > max_iou:
                    continue
                patch = crop_image(img, Box(cx, cy, w, h))
                if patch is not None:
                    out.append(CropRecord(np.ascontiguousarray(patch), label, rec.id))
                break
    return out


def jittered_crops(full: DatasetManifest, images, in_classes: Iterable[int], copies: int, rng: np.random.Generator,
                   scale: float = 0.15, shift: float = 0.12) -> list[CropRecord]:
    """Loosely-boxed copies of in-distribution crops, mimicking imperfect detector boxes."""
    in_sorted = sorted(set(in_classes))
    remap = {c: k + 1 for k, c in enumerate(in_sorted)}
    out = []
    for rec in full.records:
        anns = [a for a in rec.annotations if a.class_id in remap]
        if not anns:
            continue
        img = images.get(rec)
        for a in anns:
            for _ in range(copies):
                b = a.box
                w = b.w * float(np.exp(rng.uniform(-scale, scale)))
                h = b.h * float(np.exp(rng.uniform(-scale, scale)))
                cx = float(np.clip(b.cx + rng.uniform(-shift, shift) * b.w, 0, 1))
                cy = float(np.clip(b.cy + rng.uniform(-shift, shift) * b.h, 0, 1))
                patch = crop_image(img, Box(cx, cy, w, h))
                if patch is not None and min(patch.shape[:2]) >= 2:
                    out.append(CropRecord(np.ascontiguousarray(patch), remap[a.class_id], rec.id))
    return out


def save_crops(crops: list[CropRecord], root: str | Path) -> None:
    root = Path(root)
    (root / "patches").mkdir(parents=True, exist_ok=True)
    lines = []
    for k, c in enumerate(crops):
        name = f"patches/{k:07d}.png"
        Image.fromarray(c.pixels).save(root / name)
        lines.append(json.dumps({"file": name, "label": c.label, "source": c.source}, sort_keys=True))
    (root / CROP_INDEX).write_text("\n".join(lines) + ("\n" if lines else ""))


def load_crops(root: str | Path) -> list[CropRecord]:
    root = Path(root)
    index = root / CROP_INDEX
    if not index.exists():
        raise FileNotFoundError(f"crop index not found: {index}")
    out = []
    for line in index.read_text().splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        px = np.asarray(Image.open(root / obj["file"]).convert("RGB"))
        out.append(CropRecord(px, int(obj["label"]), obj.get("source", "")))
    return out
