"""On-the-fly pseudo-labels for unlabeled positives, gated by the proxy classifier.

For one image at one epoch: decode the detector's boxes, keep the ones that
stay clear of every ground truth, crop and pad them, average the proxy's
prediction over the crop and ``m`` patch-dropped copies, and emit a soft
label for every crop the proxy confidently puts in one of the K classes.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from mergetrain.datasets.crops import crop_image
from mergetrain.datasets.manifest import Annotation
from mergetrain.detector import Detection, DetectorConfig, DetectorOutput, decode, nms
from mergetrain.geometry import Box, iou_matrix
from mergetrain.proxy import Proxy, pad_to_nearest, patch_drop

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PseudoLabelParams:
    theta1: float = 0.5
    theta2: float = 0.8
    beta: float = 0.0
    m: int = 2
    s: int = 3
    obj_prefilter: float = 0.25
    dedup_iou: float | None = 0.45
    warmup_epochs: int = 2

    def __post_init__(self):
        if not 0 <= self.theta1 <= 1:
            raise ValueError("theta1 must lie in [0, 1]")
        if not 0 < self.theta2 <= 1:
            raise ValueError("theta2 must lie in (0, 1]")
        if not 0 <= self.beta <= 1:
            raise ValueError("beta must lie in [0, 1]")
        if self.m < 0 or self.s < 1 or self.warmup_epochs < 0:
            raise ValueError("need m >= 0, s >= 1, warmup_epochs >= 0")
        if not 0 <= self.obj_prefilter <= 1:
            raise ValueError("obj_prefilter must lie in [0, 1]")
        if self.dedup_iou is not None and not 0 <= self.dedup_iou <= 1:
            raise ValueError("dedup_iou must lie in [0, 1] or be None")

    def strict(self) -> "PseudoLabelParams":
        """Same thresholds with the cost-saving prefilter and dedup switched off."""
        return replace(self, obj_prefilter=0.0, dedup_iou=None)


@dataclass
class PseudoLabel:
    box: Box
    class_probs: np.ndarray  # K entries
    obj_prob: float
    source: tuple[int, int, int]
    epoch: int
    hbar: np.ndarray | None = field(default=None, repr=False)


@dataclass
class PseudoLabelSet:
    labels: list[PseudoLabel]
    epoch: int
    image_id: str = ""
    candidates: int = 0
    gated_out: int = 0
    filtered: int = 0  # dropped by the IoU / objectness / dedup filters
    skipped: int = 0  # degenerate crops

    def __len__(self) -> int:
        return len(self.labels)

    def audit_lines(self) -> list[str]:
        return [
            json.dumps(
                {
                    "epoch": self.epoch,
                    "image": self.image_id,
                    "cell": [lab.source[0], lab.source[1]],
                    "anchor": lab.source[2],
                    "box": {"cx": lab.box.cx, "cy": lab.box.cy, "w": lab.box.w, "h": lab.box.h},
                    "pobj": lab.obj_prob,
                    "pcls": [float(v) for v in lab.class_probs],
                    "hbar": [float(v) for v in lab.hbar] if lab.hbar is not None else None,
                },
                sort_keys=True,
            )
            for lab in self.labels
        ]


def candidate_rois(detections: Sequence[Detection], gts: Sequence[Annotation],
                   params: PseudoLabelParams) -> list[Detection]:
    """Detections far from every ground truth, above the objectness prefilter, deduplicated.

    Output is in canonical (i, j, a) order.
    """
    dets = [d for d in detections if d.p_obj >= params.obj_prefilter]
    if gts and dets:
        ious = iou_matrix(np.array([d.box.as_tuple() for d in dets]), np.array([a.box.as_tuple() for a in gts]))
        far = ious.max(axis=1) <= params.theta1
        dets = [d for d, keep in zip(dets, far) if keep]
    if params.dedup_iou is not None and params.dedup_iou < 1.0 and len(dets) > 1:
        boxes = np.array([d.box.as_tuple() for d in dets])
        scores = np.array([d.p_obj for d in dets])
        dets = [dets[k] for k in nms(boxes, scores, params.dedup_iou)]
    return sorted(dets, key=lambda d: d.source)


def mix_class(p_det: np.ndarray, hbar: np.ndarray, beta: float) -> np.ndarray:
    """Convex mix of the detector's class distribution with the proxy's, rejection mass removed."""
    p_det = np.asarray(p_det, dtype=np.float64)
    hbar = np.asarray(hbar, dtype=np.float64)
    K = len(p_det)
    if hbar.shape != (K + 1,):
        raise ValueError(f"expected a {K + 1}-way proxy vector, got shape {hbar.shape}")
    mass = hbar[:K].sum()
    assert mass > 0, "proxy put all its mass on the rejection class"
    if beta == 1.0:
        return p_det.copy()
    h = hbar[:K] / mass
    if beta == 0.0:
        return h
    return beta * p_det + (1.0 - beta) * h


def pseudo_object(hbar: np.ndarray) -> float:
    """Pseudo objectness: the largest in-distribution entry of the raw proxy vector."""
    hbar = np.asarray(hbar)
    return float(hbar[:-1].max())


def passes_gate(hbar: np.ndarray, theta2: float) -> bool:
    K = len(hbar) - 1
    return int(np.argmax(hbar)) != K and float(hbar[:K].max()) >= theta2


def _ensemble_many(proxy: Proxy, member_lists: list[list[np.ndarray]]) -> list[np.ndarray]:
    """Per-candidate mean over its members, batching all members that share a shape."""
    flat = [(c, k) for c, members in enumerate(member_lists) for k in range(len(members))]
    groups: dict[tuple, list[tuple[int, int]]] = {}
    for c, k in flat:
        groups.setdefault(member_lists[c][k].shape, []).append((c, k))
    probs: dict[tuple[int, int], np.ndarray] = {}
    for shape in sorted(groups):
        keys = groups[shape]
        out = proxy.predict([member_lists[c][k] for c, k in keys])
        for key, row in zip(keys, out):
            probs[key] = np.asarray(row, dtype=np.float64)
    return [np.mean([probs[(c, k)] for k in range(len(members))], axis=0) for c, members in enumerate(member_lists)]


def generate_batch(images: Sequence[np.ndarray], outputs: Sequence[DetectorOutput], gts_list: Sequence[Sequence[Annotation]],
                   proxy: Proxy, params: PseudoLabelParams, epoch: int, rngs: Sequence[np.random.Generator],
                   config: DetectorConfig, image_ids: Sequence[str] | None = None) -> list[PseudoLabelSet]:
    """Pseudo-label sets for several images with one batched pass through the proxy."""
    ids = list(image_ids) if image_ids is not None else [""] * len(images)
    if epoch < params.warmup_epochs:
        return [PseudoLabelSet([], epoch, rid) for rid in ids]

    sets: list[PseudoLabelSet] = []
    members: list[list[np.ndarray]] = []
    owners: list[tuple[int, Detection]] = []
    for n, (img, out, gts, rng) in enumerate(zip(images, outputs, gts_list, rngs)):
        dets = decode(out, config, obj_threshold=params.obj_prefilter, dedup_iou=None)
        dets.sort(key=lambda d: d.source)
        cands = candidate_rois(dets, gts, params)
        pset = PseudoLabelSet([], epoch, ids[n], candidates=len(cands), filtered=config.A * config.g ** 2 - len(cands))
        for det in cands:
            crop = crop_image(img, det.box)
            if crop is None:
                pset.skipped += 1
                continue
            padded, _ = pad_to_nearest(crop, proxy.centers)
            members.append([padded] + [patch_drop(padded, params.s, rng)[0] for _ in range(params.m)])
            owners.append((n, det))
        sets.append(pset)

    hbars = _ensemble_many(proxy, members) if members else []
    for (n, det), hbar in zip(owners, hbars):
        pset = sets[n]
        if not passes_gate(hbar, params.theta2):
            pset.gated_out += 1
            continue
        pset.labels.append(
            PseudoLabel(det.box, mix_class(det.p_cls, hbar, params.beta), pseudo_object(hbar), det.source, epoch, hbar)
        )
    return sets


def generate(image: np.ndarray, detector_output: DetectorOutput, gts: Sequence[Annotation], proxy: Proxy,
             params: PseudoLabelParams, epoch: int, rng: np.random.Generator, config: DetectorConfig,
             image_id: str = "") -> PseudoLabelSet:
    return generate_batch([image], [detector_output], [gts], proxy, params, epoch, [rng], config, [image_id])[0]
