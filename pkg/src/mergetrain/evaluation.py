"""mAP@0.5 evaluation (VOC-style greedy matching, all-point AP) and arm comparison."""

from __future__ import annotations

import hashlib
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch

from mergetrain.datasets.manifest import Annotation, DatasetManifest
from mergetrain.detector import Detection, DetectorConfig, DetectorOutput, GridDetector, decode, preprocess
from mergetrain.geometry import iou_matrix

log = logging.getLogger(__name__)

EVAL_OBJ_THRESHOLD = 0.01
EVAL_DEDUP_IOU = 0.45


def match_detections(dets: Sequence[Detection], gts: Sequence[Annotation], iou_thr: float = 0.5) -> list[bool]:
    """TP/FP flag per detection, detections taken in the given (descending-score) order."""
    flags = []
    used = [False] * len(gts)
    gt_boxes = np.array([g.box.as_tuple() for g in gts]).reshape(-1, 4)
    for d in dets:
        best, best_k = -1.0, -1
        if len(gts):
            ious = iou_matrix(np.array([d.box.as_tuple()]), gt_boxes)[0]
            for k, g in enumerate(gts):
                if used[k] or g.class_id != d.class_id:
                    continue
                if ious[k] >= iou_thr and ious[k] > best:
                    best, best_k = ious[k], k
        if best_k >= 0:
            used[best_k] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def average_precision(flags: Sequence[bool], n_gt: int) -> float:
    """Area under the monotone precision envelope.  NaN when the class has no ground truth."""
    if n_gt < 0:
        raise ValueError("n_gt must be non-negative")
    if n_gt == 0:
        if len(flags):
            warnings.warn("detections for a class with no ground truth; AP undefined", stacklevel=2)
        return float("nan")
    if len(flags) == 0:
        return 0.0
    tp = np.cumsum(np.asarray(flags, dtype=np.float64))
    fp = np.cumsum(~np.asarray(flags, dtype=bool))
    recall = tp / n_gt
    precision = tp / (tp + fp)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for k in range(len(mpre) - 2, -1, -1):
        mpre[k] = max(mpre[k], mpre[k + 1])
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


@dataclass
class EvalReport:
    per_class_ap: dict[int, float]
    mean_ap: float
    n_detections: int
    n_gt: dict[int, int]
    class_table: dict[int, str]
    fingerprint: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        d = asdict(self)
        d["per_class_ap"] = {str(k): v for k, v in self.per_class_ap.items()}
        d["n_gt"] = {str(k): v for k, v in self.n_gt.items()}
        d["class_table"] = {str(k): v for k, v in self.class_table.items()}
        return d


def evaluate_detections(all_dets: Sequence[Sequence[Detection]], manifest: DatasetManifest,
                        iou_thr: float = 0.5, fingerprint: dict | None = None) -> EvalReport:
    """Per-class AP over images; ``all_dets[k]`` belongs to ``manifest.records[k]``."""
    if len(all_dets) != len(manifest.records):
        raise ValueError("one detection list per manifest record is required")
    scored: dict[int, list[tuple[float, int, bool]]] = {c: [] for c in manifest.class_table}
    n_gt = {c: 0 for c in manifest.class_table}
    n_det = 0
    for img_k, (dets, rec) in enumerate(zip(all_dets, manifest.records)):
        for a in rec.annotations:
            n_gt[a.class_id] += 1
        for c in manifest.class_table:
            cdets = sorted((d for d in dets if d.class_id == c), key=lambda d: -d.score)
            if not cdets:
                continue
            flags = match_detections(cdets, [a for a in rec.annotations if a.class_id == c], iou_thr)
            scored[c].extend((d.score, img_k, f) for d, f in zip(cdets, flags))
        n_det += len(dets)
        unknown = {d.class_id for d in dets} - set(manifest.class_table)
        if unknown:
            raise ValueError(f"detections of classes {sorted(unknown)} not in the test class table")

    per_class = {}
    for c, items in scored.items():
        if n_gt[c] == 0:
            if items:
                warnings.warn(f"class {c} has detections but no ground truth; excluded from the mean", stacklevel=2)
            continue
        # stable tie-break by image order keeps the result deterministic
        items.sort(key=lambda t: (-t[0], t[1]))
        per_class[c] = average_precision([f for _, _, f in items], n_gt[c])
    mean = float(np.mean(list(per_class.values()))) if per_class else float("nan")
    return EvalReport(per_class, mean, n_det, n_gt, dict(manifest.class_table), fingerprint or {})


def predict_all(model: GridDetector, config: DetectorConfig, images: np.ndarray, obj_threshold: float = EVAL_OBJ_THRESHOLD,
                dedup_iou: float | None = EVAL_DEDUP_IOU, batch_size: int = 128) -> list[list[Detection]]:
    model.eval()
    out = []
    with torch.no_grad():
        for s in range(0, len(images), batch_size):
            pred = DetectorOutput.from_raw(model(preprocess(images[s:s + batch_size])), config.g)
            out.extend(decode(pred[n], config, obj_threshold, dedup_iou) for n in range(pred.p_obj.shape[0]))
    return out


def state_digest(model: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for k, v in sorted(model.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().cpu().numpy().tobytes())
    return h.hexdigest()[:16]


def evaluate(model: GridDetector, config: DetectorConfig, manifest: DatasetManifest, store,
             obj_threshold: float = EVAL_OBJ_THRESHOLD, dedup_iou: float | None = EVAL_DEDUP_IOU,
             iou_thr: float = 0.5) -> EvalReport:
    if max(manifest.class_table) > config.K:
        raise ValueError(f"test classes {sorted(manifest.class_table)} exceed detector K={config.K}")
    images = np.stack([store.get(r) for r in manifest.records])
    dets = predict_all(model, config, images, obj_threshold, dedup_iou)
    fp = {"obj_threshold": obj_threshold, "dedup_iou": dedup_iou, "iou_thr": iou_thr, "ap": "all-point",
          "model": state_digest(model), "n_images": len(manifest.records)}
    return evaluate_detections(dets, manifest, iou_thr, fp)


# -- comparison --------------------------------------------------------------


@dataclass
class Comparison:
    names: list[str]
    rows: list[tuple[str, list[float]]]  # per class, then "Avg"
    best: list[int]  # column index of the best value per row

    def to_json(self) -> dict:
        return {
            "arms": self.names,
            "rows": [{"class": name, "map50": {n: round(v * 100, 4) for n, v in zip(self.names, vals)}} for name, vals in self.rows],
            "best": {name: self.names[b] for (name, _), b in zip(self.rows, self.best)},
        }

    def render(self) -> str:
        w0 = max(6, max(len(name) for name, _ in self.rows))
        cols = [max(8, len(n) + 1) for n in self.names]
        head = "Object".ljust(w0) + "".join(n.rjust(c + 1) for n, c in zip(self.names, cols))
        lines = [head, "-" * len(head)]
        for (name, vals), b in zip(self.rows, self.best):
            if name == "Avg":
                lines.append("-" * len(head))
            cells = []
            for k, (v, c) in enumerate(zip(vals, cols)):
                txt = f"{v * 100:.2f}" + ("*" if k == b and len(vals) > 1 else "")
                cells.append(txt.rjust(c + 1))
            lines.append(name.ljust(w0) + "".join(cells))
        return "\n".join(lines) + "\n"


def compare(reports: Sequence[tuple[str, EvalReport]]) -> Comparison:
    if not reports:
        raise ValueError("nothing to compare")
    table = reports[0][1].class_table
    for name, r in reports[1:]:
        if r.class_table != table:
            raise ValueError(f"report {name!r} has a different class table")
    classes = sorted(set().union(*(r.per_class_ap.keys() for _, r in reports)))
    rows = []
    for c in classes:
        rows.append((table[c], [r.per_class_ap.get(c, float("nan")) for _, r in reports]))
    rows.append(("Avg", [r.mean_ap for _, r in reports]))
    best = [int(np.nanargmax(vals)) if not all(np.isnan(vals)) else 0 for _, vals in rows]
    return Comparison([n for n, _ in reports], rows, best)


def mean_reports(reports: Sequence[EvalReport]) -> EvalReport:
    """Average several reports (e.g. seeds of one arm) class by class."""
    classes = sorted(set().union(*(r.per_class_ap for r in reports)))
    per_class = {c: float(np.mean([r.per_class_ap[c] for r in reports if c in r.per_class_ap])) for c in classes}
    return EvalReport(
        per_class,
        float(np.mean([r.mean_ap for r in reports])),
        int(sum(r.n_detections for r in reports)),
        dict(reports[0].n_gt),
        dict(reports[0].class_table),
        {"averaged_over": len(reports), "members": [r.fingerprint for r in reports]},
    )


def report_json(report: EvalReport) -> str:
    return json.dumps(report.to_json(), indent=2, sort_keys=True)
