"""Rejection-class proxy classifier.

A small residual CNN closed by spatial pyramid pooling so crops of any size
map to a fixed-length feature, followed by one linear layer to K + 1 logits.
The last logit is the "not of interest" class.

Crops are grouped by k-means centers over their (width, height) so batches
are shape-homogeneous; at inference every crop is zero-padded up to its
nearest center.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from mergetrain.datasets.crops import CropRecord

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ProxyConfig:
    K: int = 6
    levels: tuple[int, ...] = (1, 2, 4)
    k_c: int = 5
    epochs: int = 12
    lr: float = 2e-3
    batch_size: int = 64
    seed: int = 0
    width: int = 32
    holdout: float = 0.1
    allow_missing_reject: bool = False

    def __post_init__(self):
        if self.K < 2 or not self.levels or self.k_c < 1:
            raise ValueError("need K >= 2, non-empty levels and k_c >= 1")

    @property
    def min_side(self) -> int:
        # the single stride-2 stage must leave at least max(levels) cells for SPP
        return 2 * max(self.levels)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ProxyConfig":
        d = dict(d)
        if "levels" in d:
            d["levels"] = tuple(d["levels"])
        return cls(**d)


# -- aspect clusters and padding ---------------------------------------------


@dataclass(frozen=True)
class AspectCenters:
    centers: tuple[tuple[int, int], ...]  # (width, height) in pixels, sorted

    def __post_init__(self):
        if not self.centers or any(w <= 0 or h <= 0 for w, h in self.centers):
            raise ValueError("aspect centers must be non-empty and positive")

    def __len__(self) -> int:
        return len(self.centers)

    def nearest(self, w: int, h: int) -> tuple[int, int]:
        arr = np.asarray(self.centers, dtype=np.float64)
        d = (arr[:, 0] - w) ** 2 + (arr[:, 1] - h) ** 2
        return self.centers[int(np.argmin(d))]


def _kmeans(points: np.ndarray, k: int, rng: np.random.Generator, iters: int = 100) -> np.ndarray:
    # k-means++ seeding
    centers = [points[rng.integers(len(points))]]
    for _ in range(1, k):
        d2 = np.min(((points[:, None, :] - np.asarray(centers)[None]) ** 2).sum(-1), axis=1)
        if d2.sum() <= 0:
            break
        centers.append(points[rng.choice(len(points), p=d2 / d2.sum())])
    centers = np.asarray(centers, dtype=np.float64)
    for _ in range(iters):
        labels = ((points[:, None, :] - centers[None]) ** 2).sum(-1).argmin(1)
        new = np.array([points[labels == c].mean(0) if np.any(labels == c) else centers[c] for c in range(len(centers))])
        if np.allclose(new, centers):
            break
        centers = new
    return centers


def fit_aspect_clusters(sizes: Sequence[tuple[int, int]], k_c: int, seed: int = 0) -> AspectCenters:
    pts = np.asarray(sizes, dtype=np.float64).reshape(-1, 2)
    if len(pts) < k_c:
        raise ValueError(f"need at least k_c={k_c} sizes, got {len(pts)}")
    distinct = np.unique(pts, axis=0)
    if len(distinct) <= k_c:
        centers = distinct
    else:
        centers = _kmeans(pts, k_c, np.random.default_rng(seed))
    rounded = sorted({(int(math.ceil(w - 1e-9)), int(math.ceil(h - 1e-9))) for w, h in centers})
    return AspectCenters(tuple(rounded))


def pad_to(crop: np.ndarray, w: int, h: int) -> np.ndarray:
    ch, cw = crop.shape[:2]
    if (cw, ch) == (w, h):
        return crop
    out = np.zeros((max(h, ch), max(w, cw)) + crop.shape[2:], dtype=crop.dtype)
    out[:ch, :cw] = crop
    return out


def pad_to_nearest(crop: np.ndarray, centers: AspectCenters) -> tuple[np.ndarray, tuple[int, int]]:
    """Zero-pad ``crop`` (right/bottom) up to its nearest center; never shrinks."""
    h, w = crop.shape[:2]
    if h < 1 or w < 1:
        raise ValueError("empty crop")
    cw, chh = centers.nearest(w, h)
    return pad_to(crop, max(w, cw), max(h, chh)), (cw, chh)


# -- pooling and patch drop --------------------------------------------------


def _bins(n: int, parts: int) -> list[tuple[int, int]]:
    return [((k * n) // parts, ((k + 1) * n) // parts) for k in range(parts)]


def spp_pool(fmap: torch.Tensor, levels: Sequence[int]) -> torch.Tensor:
    """Max-pool a ``[c, h, w]`` (or ``[B, c, h, w]``) map over L x L grids.

    Output is ordered level, bin row, bin column, channel.
    """
    single = fmap.ndim == 3
    x = fmap.unsqueeze(0) if single else fmap
    h, w = x.shape[-2:]
    if h < max(levels) or w < max(levels):
        raise ValueError(f"feature map {h}x{w} smaller than the finest pyramid level {max(levels)}")
    parts = []
    for L in levels:
        for r0, r1 in _bins(h, L):
            for c0, c1 in _bins(w, L):
                parts.append(x[:, :, r0:r1, c0:c1].amax(dim=(-2, -1)))
    out = torch.cat(parts, dim=1)
    return out[0] if single else out


def patch_drop(crop: np.ndarray, s: int, rng: np.random.Generator) -> tuple[np.ndarray, int | None]:
    """Zero one of the ``s x s`` near-equal patches; returns (variant, dropped index).

    Crops smaller than ``s`` pixels on a side come back unchanged with index None.
    """
    h, w = crop.shape[:2]
    if h < s or w < s:
        return crop, None
    k = int(rng.integers(s * s))
    r0, r1 = _bins(h, s)[k // s]
    c0, c1 = _bins(w, s)[k % s]
    out = crop.copy()
    out[r0:r1, c0:c1] = 0
    return out, k


# -- network -----------------------------------------------------------------


class _Residual(nn.Module):
    def __init__(self, c: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c, c, 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(c)
        self.conv2 = nn.Conv2d(c, c, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(c)

    def forward(self, x):
        y = F.relu(self.bn1(self.conv1(x)))
        return F.relu(x + self.bn2(self.conv2(y)))


class ProxyNet(nn.Module):
    def __init__(self, config: ProxyConfig):
        super().__init__()
        c = config.width
        self.levels = tuple(config.levels)
        self.stem = nn.Sequential(nn.Conv2d(3, c // 2, 3, padding=1, bias=False), nn.BatchNorm2d(c // 2), nn.ReLU())
        self.stage1 = _Residual(c // 2)
        self.down = nn.Sequential(nn.Conv2d(c // 2, c, 3, stride=2, padding=1, bias=False), nn.BatchNorm2d(c), nn.ReLU())
        self.stage2 = _Residual(c)
        self.fc = nn.Linear(c * sum(L * L for L in self.levels), config.K + 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.stage2(self.down(self.stage1(self.stem(x))))
        return self.fc(spp_pool(x, self.levels))


def _to_tensor(batch: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(batch.transpose(0, 3, 1, 2))).float().div_(255.0)


class Proxy(Protocol):
    """Anything that maps a shape-homogeneous crop batch to (n, K + 1) probabilities."""

    K: int
    centers: AspectCenters

    def predict(self, batch) -> np.ndarray: ...


class ProxyModel:
    def __init__(self, config: ProxyConfig, centers: AspectCenters, net: ProxyNet | None = None):
        self.config = config
        self.K = config.K
        self.centers = centers
        self.net = net if net is not None else ProxyNet(config)
        self.net.eval()

    def predict(self, batch) -> np.ndarray:
        arr = _stack_homogeneous(batch)
        if arr.shape[1] < self.config.min_side or arr.shape[2] < self.config.min_side:
            arr = np.stack([pad_to(c, max(c.shape[1], self.config.min_side), max(c.shape[0], self.config.min_side))
                            for c in arr])
        self.net.eval()
        with torch.no_grad():
            logits = self.net(_to_tensor(arr)).double()
        return torch.softmax(logits, dim=-1).numpy()

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        torch.save(
            {
                "version": CHECKPOINT_VERSION,
                "kind": "proxy",
                "config": self.config.to_dict(),
                "centers": [list(c) for c in self.centers.centers],
                "state_dict": self.net.state_dict(),
                "extra": extra or {},
            },
            path,
        )

    @classmethod
    def load(cls, path: str | Path) -> "ProxyModel":
        ckpt = torch.load(path, map_location="cpu", weights_only=False)
        if ckpt.get("kind") != "proxy" or ckpt.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path} is not a version-{CHECKPOINT_VERSION} proxy checkpoint")
        cfg = ProxyConfig.from_dict(ckpt["config"])
        model = cls(cfg, AspectCenters(tuple(tuple(c) for c in ckpt["centers"])))
        model.net.load_state_dict(ckpt["state_dict"])
        model.net.eval()
        model.extra = ckpt.get("extra", {})
        return model


def _stack_homogeneous(batch) -> np.ndarray:
    if isinstance(batch, np.ndarray) and batch.ndim == 4:
        return batch
    shapes = {c.shape for c in batch}
    if len(shapes) != 1:
        raise ValueError(f"heterogeneous crop batch: {sorted(shapes)}")
    return np.stack(list(batch))


def ensemble_predict(model: Proxy, crop: np.ndarray, m: int, s: int, rng: np.random.Generator) -> np.ndarray:
    """Mean prediction over ``crop`` and ``m`` patch-dropped copies of it."""
    members = [crop] + [patch_drop(crop, s, rng)[0] for _ in range(m)]
    probs = model.predict(members)
    return probs.mean(axis=0)


# -- training ----------------------------------------------------------------


@dataclass
class ProxyTrainLog:
    epochs: list[dict] = field(default_factory=list)
    holdout_accuracy: float = float("nan")
    per_class_accuracy: dict[int, float] = field(default_factory=dict)
    batch_shapes_homogeneous: bool = True
    n_train: int = 0
    n_holdout: int = 0


def make_batches(crops: Sequence[CropRecord], centers: AspectCenters, batch_size: int,
                 rng: np.random.Generator) -> list[list[int]]:
    """Index batches drawn from one nearest-center bucket each, in shuffled order."""
    buckets: dict[tuple[int, int], list[int]] = {}
    for k, c in enumerate(crops):
        buckets.setdefault(centers.nearest(*c.size), []).append(k)
    batches = []
    for key in sorted(buckets):
        idx = np.array(buckets[key])
        rng.shuffle(idx)
        batches.extend(idx[s:s + batch_size].tolist() for s in range(0, len(idx), batch_size))
    order = rng.permutation(len(batches))
    return [batches[k] for k in order]


def assemble_batch(crops: Sequence[CropRecord], idx: Sequence[int], centers: AspectCenters,
                   min_side: int = 1) -> np.ndarray:
    """Pad every crop of a bucket to a common size: the batch-wise max of the padded sizes."""
    padded = [pad_to_nearest(crops[k].pixels, centers)[0] for k in idx]
    w = max(min_side, max(p.shape[1] for p in padded))
    h = max(min_side, max(p.shape[0] for p in padded))
    return np.stack([pad_to(p, w, h) for p in padded])


def evaluate_proxy(model: ProxyModel, crops: Sequence[CropRecord], batch_size: int = 256) -> tuple[float, dict[int, float]]:
    if not crops:
        return float("nan"), {}
    groups: dict[tuple[int, int], list[int]] = {}
    padded = []
    for k, c in enumerate(crops):
        p, _ = pad_to_nearest(c.pixels, model.centers)
        padded.append(p)
        groups.setdefault(p.shape[:2], []).append(k)
    pred = np.zeros(len(crops), dtype=np.int64)
    for idx in groups.values():
        for s in range(0, len(idx), batch_size):
            chunk = idx[s:s + batch_size]
            pred[chunk] = model.predict([padded[k] for k in chunk]).argmax(1) + 1
    labels = np.array([c.label for c in crops])
    per_class = {int(c): float((pred[labels == c] == c).mean()) for c in np.unique(labels)}
    return float((pred == labels).mean()), per_class


def train_proxy(crops: Sequence[CropRecord], config: ProxyConfig) -> tuple[ProxyModel, ProxyTrainLog]:
    K = config.K
    labels = np.array([c.label for c in crops])
    if len(crops) == 0:
        raise ValueError("no crops to train on")
    bad = sorted(set(labels.tolist()) - set(range(1, K + 2)))
    if bad:
        raise ValueError(f"crop labels {bad} outside 1..{K + 1}")
    if not np.any(labels == K + 1):
        msg = "no rejection-class (K+1) crops; the rejection output would stay untrained"
        if not config.allow_missing_reject:
            raise ValueError(msg)
        log.warning(msg)
    if not np.any(labels <= K):
        raise ValueError("no in-distribution crops")

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    perm = rng.permutation(len(crops))
    n_hold = int(round(config.holdout * len(crops)))
    hold = [crops[k] for k in perm[:n_hold]]
    train = [crops[k] for k in perm[n_hold:]]

    centers = fit_aspect_clusters([c.size for c in train], min(config.k_c, len(train)), config.seed)
    net = ProxyNet(config)
    opt = torch.optim.Adam(net.parameters(), lr=config.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(1, config.epochs))
    tlog = ProxyTrainLog(n_train=len(train), n_holdout=len(hold))

    for epoch in range(config.epochs):
        net.train()
        total, correct, seen = 0.0, 0, 0
        for idx in make_batches(train, centers, config.batch_size, rng):
            batch = assemble_batch(train, idx, centers, config.min_side)
            if len({batch[k].shape for k in range(len(batch))}) != 1:
                tlog.batch_shapes_homogeneous = False
            x = _to_tensor(batch)
            y = torch.tensor([train[k].label - 1 for k in idx])
            logits = net(x)
            loss = F.cross_entropy(logits, y)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
            correct += int((logits.argmax(1) == y).sum())
            seen += len(idx)
        sched.step()
        tlog.epochs.append({"epoch": epoch, "loss": total / seen, "train_accuracy": correct / seen})
        log.info("proxy epoch %d: loss %.4f acc %.3f", epoch, total / seen, correct / seen)

    model = ProxyModel(config, centers, net)
    tlog.holdout_accuracy, tlog.per_class_accuracy = evaluate_proxy(model, hold)
    log.info("proxy holdout accuracy %.4f", tlog.holdout_accuracy)
    return model, tlog
