"""Grid detector with A anchors per cell, its target assignment and losses.

The network emits a raw ``[B, g, g, A, 5 + K]`` volume.  :class:`DetectorOutput`
squashes it into the quantities the losses are written in:

* ``xy``: offsets inside the cell as fractions of the image, in ``[0, 1/g]``
* ``wh``: log-scale factors relative to the anchor (unbounded)
* ``p_obj``: objectness probability
* ``p_cls``: class distribution over K classes

All losses are sums (over anchors and over images); callers that want a
per-image mean divide by the batch size themselves.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn

from mergetrain.datasets.manifest import Annotation
from mergetrain.geometry import Box, iou_matrix, shape_iou

log = logging.getLogger(__name__)

EPS = 1e-7


@dataclass(frozen=True)
class DetectorConfig:
    g: int = 8
    K: int = 6
    anchors: tuple[tuple[float, float], ...] = ((0.16, 0.16), (0.24, 0.24), (0.3, 0.16))
    tau: float = 0.3
    lam_cls: float = 1.0
    lam_coor: float = 1.0
    lam_obj: float = 1.0
    input_size: int = 64
    width: int = 32

    def __post_init__(self):
        if self.g < 2 or self.K < 2 or not self.anchors:
            raise ValueError("need g >= 2, K >= 2 and at least one anchor")
        if not 0 < self.tau < 1:
            raise ValueError("tau must lie in (0, 1)")
        if min(self.lam_cls, self.lam_coor, self.lam_obj) < 0:
            raise ValueError("loss weights must be non-negative")
        if any(w <= 0 or h <= 0 for w, h in self.anchors):
            raise ValueError("anchor sizes must be positive")
        if self.input_size % self.g:
            raise ValueError("input_size must be a multiple of g")

    @property
    def A(self) -> int:
        return len(self.anchors)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["anchors"] = [list(a) for a in self.anchors]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        d = dict(d)
        if "anchors" in d:
            d["anchors"] = tuple(tuple(float(v) for v in a) for a in d["anchors"])
        return cls(**d)


# -- network -----------------------------------------------------------------


def _block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout), nn.LeakyReLU(0.1))


class GridDetector(nn.Module):
    def __init__(self, config: DetectorConfig):
        super().__init__()
        self.config = config
        c = config.width
        layers: list[nn.Module] = [_block(3, c // 2)]
        size, ch = config.input_size, c // 2
        while size > config.g:
            nxt = min(ch * 2, c * 2)
            layers += [nn.MaxPool2d(2), _block(ch, nxt)]
            size //= 2
            ch = nxt
        layers.append(_block(ch, ch))
        self.backbone = nn.Sequential(*layers)
        self.head = nn.Conv2d(ch, config.A * (5 + config.K), 1)
        with torch.no_grad():
            self.head.weight.mul_(0.1)
            self.head.bias.zero_()
            bias = self.head.bias.view(config.A, 5 + config.K)
            bias[:, 4] = -4.0  # start with low objectness everywhere

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        if images.shape[-2:] != (cfg.input_size, cfg.input_size) or images.shape[-3] != 3:
            raise ValueError(f"expected [B, 3, {cfg.input_size}, {cfg.input_size}] input, got {tuple(images.shape)}")
        x = self.head(self.backbone(images))
        b = x.shape[0]
        return x.view(b, cfg.A, 5 + cfg.K, cfg.g, cfg.g).permute(0, 3, 4, 1, 2).contiguous()


@dataclass
class DetectorOutput:
    xy: torch.Tensor  # [..., g, g, A, 2]
    wh: torch.Tensor  # [..., g, g, A, 2]
    p_obj: torch.Tensor  # [..., g, g, A]
    p_cls: torch.Tensor  # [..., g, g, A, K]

    @classmethod
    def from_raw(cls, raw: torch.Tensor, g: int) -> "DetectorOutput":
        return cls(
            xy=torch.sigmoid(raw[..., 0:2]) / g,
            wh=raw[..., 2:4],
            p_obj=torch.sigmoid(raw[..., 4]),
            p_cls=torch.softmax(raw[..., 5:], dim=-1),
        )

    def tensor(self) -> torch.Tensor:
        return torch.cat([self.xy, self.wh, self.p_obj.unsqueeze(-1), self.p_cls], dim=-1)

    def __getitem__(self, idx) -> "DetectorOutput":
        return DetectorOutput(self.xy[idx], self.wh[idx], self.p_obj[idx], self.p_cls[idx])

    def detach(self) -> "DetectorOutput":
        return DetectorOutput(self.xy.detach(), self.wh.detach(), self.p_obj.detach(), self.p_cls.detach())


def preprocess(images: np.ndarray | Sequence[np.ndarray]) -> torch.Tensor:
    """uint8 HWC image(s) -> float [B, 3, H, W] in [0, 1]."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).float().div_(255.0)


def forward(image, model: GridDetector, config: DetectorConfig) -> DetectorOutput:
    """Run ``model`` on one image or a batch; returns the squashed output volume."""
    x = image if isinstance(image, torch.Tensor) else preprocess(image)
    if x.ndim == 3:
        x = x.unsqueeze(0)
    return DetectorOutput.from_raw(model(x), config.g)


# -- targets -----------------------------------------------------------------


@dataclass
class TargetAssignment:
    obj: np.ndarray  # [g, g, A] float targets t
    resp: np.ndarray  # [g, g, A] bool, the responsible anchors
    gt_index: np.ndarray  # [g, g] int, -1 where the cell hosts no gt
    boxes: np.ndarray  # [g, g, A, 4] target (cx, cy, w, h) at responsible anchors
    classes: np.ndarray  # [g, g, A] int class index 0..K-1 at responsible anchors
    collisions: int = 0
    below_tau: int = 0

    @property
    def responsible(self) -> list[tuple[int, int, int]]:
        return [tuple(int(v) for v in idx) for idx in np.argwhere(self.resp)]


def assign_targets(gts: Sequence[Annotation], config: DetectorConfig) -> TargetAssignment:
    g, A = config.g, config.A
    obj = np.zeros((g, g, A), dtype=np.float32)
    resp = np.zeros((g, g, A), dtype=bool)
    gt_index = np.full((g, g), -1, dtype=np.int64)
    boxes = np.zeros((g, g, A, 4), dtype=np.float64)
    classes = np.zeros((g, g, A), dtype=np.int64)

    # larger gts first so a cell collision keeps the larger one
    order = sorted(range(len(gts)), key=lambda k: (-gts[k].box.area, k))
    collisions = below = 0
    occupied: set[tuple[int, int]] = set()
    for k in order:
        box = gts[k].box
        if not 1 <= gts[k].class_id <= config.K:
            raise ValueError(f"class id {gts[k].class_id} outside 1..{config.K}")
        i = min(int(box.cy * g), g - 1)
        j = min(int(box.cx * g), g - 1)
        if (i, j) in occupied:
            collisions += 1
            continue
        occupied.add((i, j))
        ious = [shape_iou(box.w, box.h, aw, ah) for aw, ah in config.anchors]
        a = int(np.argmax(ious))
        if ious[a] <= config.tau:
            below += 1
            continue
        gt_index[i, j] = k
        resp[i, j, a] = True
        obj[i, j, a] = 1.0
        boxes[i, j, a] = box.as_tuple()
        classes[i, j, a] = gts[k].class_id - 1
    if collisions:
        log.debug("%d ground truths dropped by cell collisions", collisions)
    return TargetAssignment(obj, resp, gt_index, boxes, classes, collisions, below)


@dataclass
class BatchTargets:
    """Stacked assignments as tensors, ready for the loss functions."""

    obj: torch.Tensor
    resp: torch.Tensor
    boxes: torch.Tensor
    classes: torch.Tensor

    @classmethod
    def stack(cls, assignments: Sequence[TargetAssignment], dtype=torch.float32) -> "BatchTargets":
        return cls(
            obj=torch.from_numpy(np.stack([a.obj for a in assignments])).to(dtype),
            resp=torch.from_numpy(np.stack([a.resp for a in assignments])),
            boxes=torch.from_numpy(np.stack([a.boxes for a in assignments])).to(dtype),
            classes=torch.from_numpy(np.stack([a.classes for a in assignments])),
        )


def _as_targets(assignment, dtype) -> BatchTargets:
    if isinstance(assignment, BatchTargets):
        return assignment
    if isinstance(assignment, TargetAssignment):
        t = BatchTargets.stack([assignment], dtype)
        return BatchTargets(t.obj[0], t.resp[0], t.boxes[0], t.classes[0])
    return BatchTargets.stack(list(assignment), dtype)


def grid_offsets(g: int, dtype=torch.float32) -> torch.Tensor:
    """[g, g, 1, 2] top-left cell corners (x, y) as image fractions."""
    idx = torch.arange(g, dtype=dtype) / g
    ys, xs = torch.meshgrid(idx, idx, indexing="ij")
    return torch.stack([xs, ys], dim=-1).unsqueeze(2)


def decode_boxes(output: DetectorOutput, config: DetectorConfig) -> torch.Tensor:
    """Image-space (cx, cy, w, h) for every anchor, shape [..., g, g, A, 4]."""
    dtype = output.xy.dtype
    anchors = torch.tensor(config.anchors, dtype=dtype)
    xy = grid_offsets(config.g, dtype) + output.xy
    wh = anchors * torch.exp(output.wh)
    return torch.cat([xy, wh], dim=-1)


def loss_class(assignment, output: DetectorOutput, gts=None) -> torch.Tensor:
    """Negative log-likelihood of the true class at responsible anchors."""
    t = _as_targets(assignment, output.p_cls.dtype)
    p = output.p_cls[t.resp]
    k = t.classes[t.resp]
    if p.numel() == 0:
        return output.p_cls.sum() * 0.0
    picked = p.gather(-1, k.unsqueeze(-1)).squeeze(-1)
    return -torch.log(picked.clamp_min(EPS)).sum()


def loss_coord(assignment, output: DetectorOutput, gts=None, config: DetectorConfig | None = None) -> torch.Tensor:
    """Squared error between decoded boxes and targets at responsible anchors."""
    if config is None:
        raise ValueError("loss_coord needs the detector config for anchor sizes")
    t = _as_targets(assignment, output.xy.dtype)
    pred = decode_boxes(output, config)[t.resp]
    if pred.numel() == 0:
        return output.xy.sum() * 0.0
    return ((t.boxes[t.resp] - pred) ** 2).sum()


def loss_object(assignment, output: DetectorOutput, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Binary cross-entropy of the objectness target over every anchor of every cell.

    ``mask`` (same shape as ``p_obj``) zeroes selected terms; training uses it to
    swap the hard target for a pseudo-label at the anchors that produced one.
    """
    t = _as_targets(assignment, output.p_obj.dtype)
    p = output.p_obj
    terms = -(t.obj * torch.log(p.clamp_min(EPS)) + (1 - t.obj) * torch.log((1 - p).clamp_min(EPS)))
    if mask is not None:
        terms = terms * mask
    return terms.sum()


@dataclass
class LossParts:
    cls: torch.Tensor
    coord: torch.Tensor
    obj: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {"cls": float(self.cls.detach()), "coord": float(self.coord.detach()), "obj": float(self.obj.detach())}


def loss_parts(assignment, output: DetectorOutput, gts, config: DetectorConfig,
               obj_mask: torch.Tensor | None = None) -> LossParts:
    lc = loss_class(assignment, output, gts)
    lr = loss_coord(assignment, output, gts, config)
    lo = loss_object(assignment, output, obj_mask)
    total = config.lam_cls * lc + config.lam_coor * lr + config.lam_obj * lo
    return LossParts(lc, lr, lo, total)


def loss_total(assignment, output: DetectorOutput, gts, config: DetectorConfig) -> torch.Tensor:
    return loss_parts(assignment, output, gts, config).total


# -- decoding ----------------------------------------------------------------


@dataclass
class Detection:
    box: Box
    class_id: int
    score: float
    p_obj: float = 0.0
    source: tuple[int, int, int] = (0, 0, 0)
    p_cls: np.ndarray | None = field(default=None, repr=False)


def nms(boxes: np.ndarray, scores: np.ndarray, iou_thr: float) -> list[int]:
    """Greedy suppression; returns kept indices in descending-score order."""
    order = np.argsort(-scores, kind="stable")
    if iou_thr is None or iou_thr >= 1.0 or len(order) == 0:
        return [int(k) for k in order]
    ious = iou_matrix(boxes, boxes)
    keep: list[int] = []
    suppressed = np.zeros(len(boxes), dtype=bool)
    for k in order:
        if suppressed[k]:
            continue
        keep.append(int(k))
        suppressed |= ious[k] > iou_thr
    return keep


def decode(output: DetectorOutput, config: DetectorConfig, obj_threshold: float = 0.0,
           dedup_iou: float | None = None) -> list[Detection]:
    """Detections for a single image.

    ``dedup_iou=None`` disables suppression.  The result is ordered by
    (i, j, a) when suppression is off and by descending score otherwise.
    """
    with torch.no_grad():
        boxes = decode_boxes(output, config).double().numpy().reshape(-1, 4)
        p_obj = output.p_obj.double().numpy().reshape(-1)
        p_cls = output.p_cls.double().numpy().reshape(-1, config.K)
    g, A = config.g, config.A
    keep = np.nonzero(p_obj >= obj_threshold)[0]
    keep = keep[np.all(np.isfinite(boxes[keep]), axis=1) & (boxes[keep, 2] > 0) & (boxes[keep, 3] > 0)]
    cls = p_cls[keep].argmax(axis=1)
    scores = p_obj[keep] * p_cls[keep].max(axis=1)

    if dedup_iou is not None and dedup_iou < 1.0:
        survivors = []
        for c in np.unique(cls):
            sel = np.nonzero(cls == c)[0]
            survivors.extend(sel[k] for k in nms(boxes[keep[sel]], scores[sel], dedup_iou))
        survivors = sorted(survivors, key=lambda k: (-scores[k], keep[k]))
    else:
        survivors = list(range(len(keep)))

    out = []
    for k in survivors:
        flat = int(keep[k])
        i, rem = divmod(flat, g * A)
        j, a = divmod(rem, A)
        cx, cy, w, h = boxes[flat]
        cx, cy = min(max(float(cx), 0.0), 1.0), min(max(float(cy), 0.0), 1.0)
        out.append(Detection(Box(cx, cy, float(w), float(h)), int(cls[k]) + 1, float(scores[k]),
                             float(p_obj[flat]), (i, j, a), p_cls[flat].copy()))
    return out
