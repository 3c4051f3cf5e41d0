"""Synthetic shapes benchmark: a desk-scale stand-in for merged detection datasets.

Each image is a noisy flat background with a handful of filled shapes.  The
shape kind decides the class; colour and size are nuisance variables.
In-distribution shapes are annotated with tight boxes, out-of-distribution
("clutter") shapes are drawn but only recorded in the store's complete
manifest, which is what proxy crop extraction reads.
"""

from __future__ import annotations

import io
import json
import logging
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from mergetrain.datasets.manifest import Annotation, DatasetManifest, ImageRecord, load_manifest, save_manifest
from mergetrain.geometry import Box, iou_matrix

log = logging.getLogger(__name__)

IN_SHAPES = ("circle", "square", "triangle", "diamond", "cross", "ring")
OOD_SHAPES = ("bar", "ell", "xmark", "hourglass")


class SynthError(RuntimeError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    n_images: int = 100
    canvas: int = 64
    classes: tuple[str, ...] = IN_SHAPES
    ood_classes: tuple[str, ...] = OOD_SHAPES
    objects_per_image: tuple[int, int] = (2, 4)
    ood_per_image: tuple[int, int] = (0, 2)
    size_range: tuple[int, int] = (10, 18)
    aspect_jitter: float = 0.25
    # groups of class ids that are forced to co-occur with this probability
    cooccur_groups: tuple[tuple[int, ...], ...] = ()
    cooccur_prob: float = 0.0
    max_overlap_iou: float = 0.1
    background: tuple[int, int] = (15, 70)
    noise_std: float = 6.0
    seed: int = 0
    id_prefix: str = "img"
    max_retries: int = 200

    def __post_init__(self):
        if len(self.classes) < 2:
            raise ValueError("need at least two in-distribution shape classes")
        unknown = set(self.classes + self.ood_classes) - set(IN_SHAPES + OOD_SHAPES)
        if unknown:
            raise ValueError(f"unknown shape kinds {sorted(unknown)}")
        if set(self.classes) & set(self.ood_classes):
            raise ValueError("in-distribution and OoD shape sets overlap")
        if self.objects_per_image[0] < 1 or self.objects_per_image[0] > self.objects_per_image[1]:
            raise ValueError("objects_per_image must be a range starting at >= 1")
        if self.max_overlap_iou > 0.3:
            raise ValueError("max_overlap_iou above 0.3 breaks the layout contract")
        groups = [set(g) for g in self.cooccur_groups]
        if groups:
            flat = [c for g in self.cooccur_groups for c in g]
            if len(flat) != len(set(flat)) or set(flat) != set(range(1, len(self.classes) + 1)):
                raise ValueError("cooccur_groups must partition the class ids 1..K")

    @property
    def K(self) -> int:
        return len(self.classes)

    def class_table(self) -> dict[int, str]:
        return {k + 1: name for k, name in enumerate(self.classes)}

    def complete_class_table(self) -> dict[int, str]:
        table = self.class_table()
        table.update({self.K + k + 1: name for k, name in enumerate(self.ood_classes)})
        return table

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        for key in ("classes", "ood_classes", "objects_per_image", "ood_per_image", "size_range", "background"):
            if key in d:
                d[key] = tuple(d[key])
        if "cooccur_groups" in d:
            d["cooccur_groups"] = tuple(tuple(g) for g in d["cooccur_groups"])
        return cls(**d)


def draw_shape(kind: str, bbox: tuple[int, int, int, int], canvas: int) -> np.ndarray:
    """Boolean mask of ``kind`` inscribed in the inclusive pixel box ``bbox``."""
    x0, y0, x1, y1 = bbox
    img = Image.new("L", (canvas, canvas), 0)
    d = ImageDraw.Draw(img)
    w, h = x1 - x0 + 1, y1 - y0 + 1
    mx, my = (x0 + x1) / 2, (y0 + y1) / 2
    t = max(1, min(w, h) // 6)
    if kind == "circle":
        d.ellipse([x0, y0, x1, y1], fill=255)
    elif kind == "square":
        d.rectangle([x0, y0, x1, y1], fill=255)
    elif kind == "triangle":
        d.polygon([(x0, y1), (x1, y1), (mx, y0)], fill=255)
    elif kind == "diamond":
        d.polygon([(mx, y0), (x1, my), (mx, y1), (x0, my)], fill=255)
    elif kind == "cross":
        d.rectangle([x0, round(my - t), x1, round(my + t)], fill=255)
        d.rectangle([round(mx - t), y0, round(mx + t), y1], fill=255)
    elif kind == "ring":
        d.ellipse([x0, y0, x1, y1], outline=255, width=max(2, min(w, h) // 5))
    elif kind == "bar":
        d.rectangle([x0, y0, x1, y1], fill=255)
    elif kind == "ell":
        d.rectangle([x0, y0, x0 + 2 * t, y1], fill=255)
        d.rectangle([x0, y1 - 2 * t, x1, y1], fill=255)
    elif kind == "xmark":
        d.line([(x0, y0), (x1, y1)], fill=255, width=2 * t)
        d.line([(x0, y1), (x1, y0)], fill=255, width=2 * t)
    elif kind == "hourglass":
        d.polygon([(x0, y0), (x1, y0), (mx, my)], fill=255)
        d.polygon([(x0, y1), (x1, y1), (mx, my)], fill=255)
    else:
        raise SynthError(f"unknown shape {kind!r}")
    return np.asarray(img) > 0


def mask_box(mask: np.ndarray) -> tuple[int, int, int, int] | None:
    """Pixel corners (x0, y0, x1, y1) of the occupied region, exclusive upper bounds."""
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        return None
    return int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1


def _random_bbox(kind: str, cfg: SynthConfig, rng: np.random.Generator) -> tuple[int, int, int, int]:
    lo, hi = cfg.size_range
    if kind == "bar":
        long_side = int(rng.integers(lo, hi + 1))
        short = int(rng.integers(3, 5))
        w, h = (long_side, short) if rng.random() < 0.5 else (short, long_side)
    else:
        side = int(rng.integers(lo, hi + 1))
        ar = float(np.exp(rng.uniform(-cfg.aspect_jitter, cfg.aspect_jitter)))
        w = max(lo // 2, min(cfg.canvas - 2, round(side * np.sqrt(ar))))
        h = max(lo // 2, min(cfg.canvas - 2, round(side / np.sqrt(ar))))
    x0 = int(rng.integers(0, cfg.canvas - w + 1))
    y0 = int(rng.integers(0, cfg.canvas - h + 1))
    return x0, y0, x0 + w - 1, y0 + h - 1


def _pick_classes(cfg: SynthConfig, rng: np.random.Generator) -> list[int]:
    n = int(rng.integers(cfg.objects_per_image[0], cfg.objects_per_image[1] + 1))
    K = cfg.K
    if cfg.cooccur_groups and n >= len(cfg.cooccur_groups) and rng.random() < cfg.cooccur_prob:
        chosen = [int(rng.choice(g)) for g in cfg.cooccur_groups]
        chosen += [int(c) for c in rng.integers(1, K + 1, size=n - len(chosen))]
        rng.shuffle(chosen)
        return chosen
    return [int(c) for c in rng.integers(1, K + 1, size=n)]


def _render_one(cfg: SynthConfig, index: int):
    rng = np.random.default_rng([cfg.seed, index])
    s = cfg.canvas
    for _ in range(cfg.max_retries):
        classes = _pick_classes(cfg, rng)
        n_ood = int(rng.integers(cfg.ood_per_image[0], cfg.ood_per_image[1] + 1)) if cfg.ood_classes else 0
        kinds = [(c, cfg.classes[c - 1]) for c in classes]
        kinds += [(cfg.K + 1 + int(k), cfg.ood_classes[int(k)]) for k in rng.integers(0, len(cfg.ood_classes), size=n_ood)]

        placed: list[tuple[int, str, np.ndarray, tuple[int, int, int, int]]] = []
        boxes = np.zeros((0, 4))
        ok = True
        for cid, kind in kinds:
            for _ in range(cfg.max_retries):
                bbox = _random_bbox(kind, cfg, rng)
                mask = draw_shape(kind, bbox, s)
                px = mask_box(mask)
                if px is None:
                    continue
                cand = np.array([[(px[0] + px[2]) / 2, (px[1] + px[3]) / 2, px[2] - px[0], px[3] - px[1]]])
                if len(boxes) and iou_matrix(cand, boxes).max() > cfg.max_overlap_iou:
                    continue
                placed.append((cid, kind, mask, px))
                boxes = np.vstack([boxes, cand])
                break
            else:
                if cid <= cfg.K:
                    ok = False
                    break
        if ok and any(cid <= cfg.K for cid, *_ in placed):
            break
    else:
        raise SynthError(f"image {index}: could not satisfy the layout constraint after {cfg.max_retries} retries")

    base = rng.uniform(cfg.background[0], cfg.background[1], size=3)
    img = np.broadcast_to(base, (s, s, 3)).astype(np.float64)
    if cfg.noise_std > 0:
        img = img + rng.normal(0.0, cfg.noise_std, size=(s, s, 3))
    for cid, kind, mask, _ in placed:
        hue_rgb = rng.uniform(0.0, 1.0, size=3)
        color = 120 + 135 * hue_rgb / max(hue_rgb.max(), 1e-6)
        img[mask] = color
    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)

    anns = []
    for cid, kind, mask, (x0, y0, x1, y1) in placed:
        box = Box((x0 + x1) / 2 / s, (y0 + y1) / 2 / s, (x1 - x0) / s, (y1 - y0) / s)
        anns.append(Annotation(box, cid))
    return img, anns


class ImageStore:
    """Images keyed by record id, either in memory or backed by a directory of PNGs.

    ``complete`` is the manifest that also carries the clutter (OoD) boxes.
    """

    def __init__(self, root: str | Path | None = None):
        self.root = Path(root) if root is not None else None
        self._mem: dict[str, np.ndarray] = {}
        self.complete: DatasetManifest | None = None

    @property
    def in_memory(self) -> bool:
        return self.root is None

    def path_for(self, rid: str) -> str:
        return f"mem://{rid}" if self.in_memory else f"images/{rid}.png"

    def put(self, rid: str, img: np.ndarray) -> None:
        self._mem[rid] = img

    def get(self, rec: ImageRecord | str) -> np.ndarray:
        rid = rec if isinstance(rec, str) else rec.id
        if isinstance(rec, ImageRecord) and rec.path.startswith("mem://"):
            # merge() may re-prefix ids; the path still names the stored image
            rid = rec.path[len("mem://"):]
        if rid in self._mem:
            return self._mem[rid]
        if self.root is None:
            raise KeyError(rid)
        rel = rec.path if isinstance(rec, ImageRecord) else self.path_for(rid)
        img = np.asarray(Image.open(self.root / rel).convert("RGB"))
        self._mem[rid] = img
        return img

    def save(self, root: str | Path) -> "ImageStore":
        root = Path(root)
        (root / "images").mkdir(parents=True, exist_ok=True)
        for rid, img in self._mem.items():
            buf = io.BytesIO()
            Image.fromarray(img).save(buf, format="PNG")
            (root / "images" / f"{rid}.png").write_bytes(buf.getvalue())
        if self.complete is not None:
            save_manifest(relocate(self.complete, "images/{}.png"), root / "complete.jsonl")
        out = ImageStore(root)
        out._mem = dict(self._mem)
        out.complete = relocate(self.complete, "images/{}.png") if self.complete is not None else None
        return out

    @classmethod
    def open(cls, root: str | Path) -> "ImageStore":
        store = cls(root)
        complete = Path(root) / "complete.jsonl"
        if complete.exists():
            store.complete = load_manifest(complete)
        return store


def relocate(manifest: DatasetManifest, pattern: str) -> DatasetManifest:
    recs = [replace(r, path=pattern.format(r.id)) for r in manifest.records]
    return DatasetManifest(dict(manifest.class_table), recs, list(manifest.provenance))


def synth_generate(cfg: SynthConfig, store: ImageStore | None = None) -> tuple[ImageStore, DatasetManifest]:
    """Render ``cfg.n_images`` images; returns the store and the detection manifest."""
    store = store if store is not None else ImageStore()
    det_records, all_records = [], []
    for index in range(cfg.n_images):
        rid = f"{cfg.id_prefix}{index:06d}"
        img, anns = _render_one(cfg, index)
        store.put(rid, img)
        path = store.path_for(rid)
        all_records.append(ImageRecord(rid, path, cfg.canvas, cfg.canvas, tuple(anns)))
        det_records.append(ImageRecord(rid, path, cfg.canvas, cfg.canvas, tuple(a for a in anns if a.class_id <= cfg.K)))

    prov = [{"op": "synth_generate", "config": json.loads(json.dumps(cfg.to_dict()))}]
    complete = DatasetManifest(cfg.complete_class_table(), all_records, prov)
    store.complete = complete if store.complete is None else _append(store.complete, complete)
    manifest = DatasetManifest(cfg.class_table(), det_records, list(prov))
    log.info("generated %d images (%d annotations, %d clutter shapes)", len(det_records),
             manifest.num_annotations, complete.num_annotations - manifest.num_annotations)
    return store, manifest


def _append(a: DatasetManifest, b: DatasetManifest) -> DatasetManifest:
    table = dict(a.class_table)
    table.update(b.class_table)
    return DatasetManifest(table, a.records + b.records, a.provenance + b.provenance)
