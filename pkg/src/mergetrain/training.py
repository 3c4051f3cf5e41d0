"""Detector training for the three arms: baseline, ours (pseudo-labels) and upper bound."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from mergetrain.datasets.manifest import DatasetManifest
from mergetrain.detector import (
    EPS,
    BatchTargets,
    DetectorConfig,
    DetectorOutput,
    GridDetector,
    assign_targets,
    loss_parts,
    preprocess,
)
from mergetrain.pseudolabel import PseudoLabelParams, PseudoLabelSet, generate_batch
from mergetrain.proxy import Proxy

log = logging.getLogger(__name__)

MODES = ("baseline", "ours", "upper")
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "baseline"
    epochs: int = 30
    batch_size: int = 32
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_steps: tuple[float, ...] = (0.7, 0.9)  # fractions of the run where lr drops 10x
    warmup_iters: int = 100
    grad_clip: float | None = 10.0
    seed: int = 0
    lam_pcls: float = 1.0
    lam_pobj: float = 1.0
    # "replace": the pseudo BCE takes the place of the hard t=0 objectness term at
    # the source anchor; "add": both terms are kept
    pseudo_obj_mode: str = "replace"
    pseudo: PseudoLabelParams = field(default_factory=PseudoLabelParams)
    detector: DetectorConfig = field(default_factory=DetectorConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.lam_pcls < 0 or self.lam_pobj < 0:
            raise ValueError("pseudo-loss weights must be non-negative")
        if self.pseudo_obj_mode not in ("replace", "add"):
            raise ValueError("pseudo_obj_mode must be 'replace' or 'add'")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["detector"] = self.detector.to_dict()
        d["lr_steps"] = list(self.lr_steps)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "detector" in d:
            d["detector"] = DetectorConfig.from_dict(d["detector"])
        if "pseudo" in d:
            d["pseudo"] = PseudoLabelParams(**d["pseudo"])
        if "lr_steps" in d:
            d["lr_steps"] = tuple(d["lr_steps"])
        return cls(**d)


@dataclass
class EpochMetrics:
    epoch: int
    cls: float = 0.0
    coord: float = 0.0
    obj: float = 0.0
    pcls: float = 0.0
    pobj: float = 0.0
    total: float = 0.0
    emitted: int = 0
    gated_out: int = 0
    filtered: int = 0
    dropped_at_gt_anchor: int = 0
    wall_time: float = 0.0
    step_losses: list[float] = field(default_factory=list)

    def log_record(self) -> dict:
        """Deterministic part of the metrics (no wall time, no per-step trace)."""
        d = asdict(self)
        d.pop("wall_time")
        d.pop("step_losses")
        return d


# -- pseudo-label losses -----------------------------------------------------


def loss_pseudo_class(p_tilde, p_det: torch.Tensor) -> torch.Tensor:
    """KL(p_tilde || p_det) summed over labels; ``p_tilde`` is a constant target."""
    target = torch.as_tensor(p_tilde, dtype=p_det.dtype).detach()
    logp = torch.log(p_det.clamp_min(EPS))
    logt = torch.log(torch.where(target > 0, target, torch.ones_like(target)))
    return (target * (logt - logp)).sum()


def loss_pseudo_object(p_tilde_obj, p_obj: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy against a soft objectness target."""
    t = torch.as_tensor(p_tilde_obj, dtype=p_obj.dtype).detach()
    return -(t * torch.log(p_obj.clamp_min(EPS)) + (1 - t) * torch.log((1 - p_obj).clamp_min(EPS))).sum()


# -- data --------------------------------------------------------------------


@dataclass
class TrainData:
    ids: list[str]
    images: np.ndarray  # (N, H, W, 3) uint8
    gts: list[list]
    targets: list  # TargetAssignment per image

    @classmethod
    def build(cls, manifest: DatasetManifest, store, config: DetectorConfig) -> "TrainData":
        manifest.require_nonempty()
        if max(manifest.class_table) > config.K:
            raise TrainingError(f"manifest classes {sorted(manifest.class_table)} exceed detector K={config.K}")
        images = np.stack([store.get(r) for r in manifest.records])
        if images.shape[1:3] != (config.input_size, config.input_size):
            raise TrainingError(f"images are {images.shape[1:3]}, detector expects {config.input_size}")
        gts = [list(r.annotations) for r in manifest.records]
        return cls([r.id for r in manifest.records], images, gts, [assign_targets(g, config) for g in gts])

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class StepResult:
    total: float
    parts: dict[str, float]
    psets: list[PseudoLabelSet]
    dropped_at_gt_anchor: int = 0


def _pseudo_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, 7919, epoch, index])


def train_step(batch_idx: Sequence[int], data: TrainData, model: GridDetector, optimizer: torch.optim.Optimizer,
               config: TrainConfig, epoch: int, proxy: Proxy | None = None) -> StepResult:
    """One update on the images ``batch_idx``.

    Objective (summed over the batch, divided by the batch size): the detector
    loss plus, in mode "ours" after warm-up, the weighted KL and BCE pseudo terms.
    """
    dcfg = config.detector
    model.train()
    x = preprocess(data.images[list(batch_idx)])
    targets = BatchTargets.stack([data.targets[k] for k in batch_idx])
    out = DetectorOutput.from_raw(model(x), dcfg.g)

    psets: list[PseudoLabelSet] = []
    labels: list[tuple[int, object]] = []
    dropped = 0
    use_pseudo = config.mode == "ours" and epoch >= config.pseudo.warmup_epochs
    if use_pseudo:
        if proxy is None:
            raise TrainingError("mode 'ours' needs a proxy")
        det = out.detach()
        psets = generate_batch(
            [data.images[k] for k in batch_idx],
            [det[n] for n in range(len(batch_idx))],
            [data.gts[k] for k in batch_idx],
            proxy,
            config.pseudo,
            epoch,
            [_pseudo_rng(config.seed, epoch, k) for k in batch_idx],
            dcfg,
            [data.ids[k] for k in batch_idx],
        )
        for n, ps in enumerate(psets):
            for lab in ps.labels:
                i, j, a = lab.source
                if targets.resp[n, i, j, a]:
                    dropped += 1
                    continue
                labels.append((n, lab))

    obj_mask = None
    # the hard t=0 term is only handed over when a pseudo objectness term takes its place
    if labels and config.pseudo_obj_mode == "replace" and config.lam_pobj > 0:
        obj_mask = torch.ones_like(targets.obj)
        for n, lab in labels:
            obj_mask[(n,) + lab.source] = 0.0
    parts = loss_parts(targets, out, None, dcfg, obj_mask)
    total = parts.total
    pcls = pobj = None
    if labels:
        n_idx = torch.tensor([n for n, _ in labels])
        i_idx, j_idx, a_idx = (torch.tensor([lab.source[k] for _, lab in labels]) for k in range(3))
        p_det = out.p_cls[n_idx, i_idx, j_idx, a_idx]
        p_o = out.p_obj[n_idx, i_idx, j_idx, a_idx]
        pcls = loss_pseudo_class(np.stack([lab.class_probs for _, lab in labels]), p_det)
        pobj = loss_pseudo_object(np.array([lab.obj_prob for _, lab in labels]), p_o)
        total = total + config.lam_pcls * pcls + config.lam_pobj * pobj

    loss = total / len(batch_idx)
    if not torch.isfinite(loss):
        raise TrainingError(
            f"non-finite loss at epoch {epoch}: parts={parts.as_floats()}, pseudo_cls={pcls}, pseudo_obj={pobj}"
        )
    optimizer.zero_grad()
    loss.backward()
    if config.grad_clip is not None:
        torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
    optimizer.step()

    floats = parts.as_floats()
    floats["pcls"] = float(pcls.detach()) if pcls is not None else 0.0
    floats["pobj"] = float(pobj.detach()) if pobj is not None else 0.0
    return StepResult(float(total.detach()), floats, psets, dropped)


# -- loop --------------------------------------------------------------------


def _lr_at(config: TrainConfig, epoch: int, it: int) -> float:
    lr = config.lr
    for frac in config.lr_steps:
        if epoch >= int(round(frac * config.epochs)):
            lr *= 0.1
    if it < config.warmup_iters:
        lr *= (it + 1) / config.warmup_iters
    return lr


def new_detector(config: TrainConfig) -> GridDetector:
    torch.manual_seed(config.seed)
    return GridDetector(config.detector)


def make_optimizer(model: GridDetector, config: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.SGD(model.parameters(), lr=config.lr, momentum=config.momentum, weight_decay=config.weight_decay)


def save_checkpoint(path: str | Path, model: GridDetector, optimizer, config: TrainConfig, epoch: int, iteration: int) -> None:
    torch.save(
        {
            "version": CHECKPOINT_VERSION,
            "kind": "detector",
            "train_config": config.to_dict(),
            "detector_config": config.detector.to_dict(),
            "state_dict": model.state_dict(),
            "optimizer": optimizer.state_dict() if optimizer is not None else None,
            "epoch": epoch,
            "iteration": iteration,
        },
        path,
    )


def load_checkpoint(path: str | Path) -> dict:
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if ckpt.get("kind") != "detector" or ckpt.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path} is not a version-{CHECKPOINT_VERSION} detector checkpoint")
    return ckpt


def load_detector(path_or_ckpt) -> tuple[GridDetector, DetectorConfig]:
    ckpt = path_or_ckpt if isinstance(path_or_ckpt, dict) else load_checkpoint(path_or_ckpt)
    dcfg = DetectorConfig.from_dict(ckpt["detector_config"])
    model = GridDetector(dcfg)
    model.load_state_dict(ckpt["state_dict"])
    model.eval()
    return model, dcfg


@dataclass
class TrainResult:
    model: GridDetector
    metrics: list[EpochMetrics]
    checkpoint: Path | None = None


def run_training(manifest: DatasetManifest, store, config: TrainConfig, out_dir: str | Path | None = None,
                 proxy: Proxy | None = None, resume: str | Path | None = None) -> TrainResult:
    """Train one arm.  ``manifest`` is the merged set for baseline/ours and the full set for upper."""
    if config.mode == "ours" and proxy is None:
        raise TrainingError("mode 'ours' requires a proxy")
    if config.mode != "ours":
        proxy = None  # baseline and upper never touch the proxy
    if proxy is not None and proxy.K != config.detector.K:
        raise TrainingError(f"proxy has K={proxy.K}, detector has K={config.detector.K}")
    data = TrainData.build(manifest, store, config.detector)

    model = new_detector(config)
    optimizer = make_optimizer(model, config)
    start_epoch, it = 0, 0
    if resume is not None:
        ckpt = load_checkpoint(resume)
        model.load_state_dict(ckpt["state_dict"])
        if ckpt.get("optimizer"):
            optimizer.load_state_dict(ckpt["optimizer"])
        start_epoch, it = int(ckpt["epoch"]), int(ckpt.get("iteration", 0))

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))

    metrics: list[EpochMetrics] = []
    n = len(data)
    for epoch in range(start_epoch, config.epochs):
        t0 = time.perf_counter()
        torch.manual_seed(config.seed * 100003 + epoch)
        order = np.random.default_rng([config.seed, epoch]).permutation(n)
        em = EpochMetrics(epoch)
        audit: list[str] = []
        sums = dict.fromkeys(("cls", "coord", "obj", "pcls", "pobj", "total"), 0.0)
        for s in range(0, n, config.batch_size):
            idx = order[s:s + config.batch_size].tolist()
            for group in optimizer.param_groups:
                group["lr"] = _lr_at(config, epoch, it)
            res = train_step(idx, data, model, optimizer, config, epoch, proxy)
            it += 1
            for k, v in res.parts.items():
                sums[k] += v
            sums["total"] += res.total
            em.step_losses.append(res.total)
            em.dropped_at_gt_anchor += res.dropped_at_gt_anchor
            for ps in res.psets:
                em.emitted += len(ps.labels)
                em.gated_out += ps.gated_out
                em.filtered += ps.filtered
                audit.extend(ps.audit_lines())
        for k, v in sums.items():
            setattr(em, k, v / n)
        em.wall_time = time.perf_counter() - t0
        metrics.append(em)
        log.info("[%s] epoch %d  total %.3f  cls %.3f  coord %.4f  obj %.3f  pseudo %d (%.1fs)",
                 config.mode, epoch, em.total, em.cls, em.coord, em.obj, em.emitted, em.wall_time)

        if out is not None:
            with open(out / "metrics.jsonl", "a") as fh:
                fh.write(json.dumps(em.log_record(), sort_keys=True) + "\n")
            with open(out / "timing.jsonl", "a") as fh:
                fh.write(json.dumps({"epoch": epoch, "wall_time": em.wall_time}) + "\n")
            if config.mode == "ours":
                audit_dir = out / "audit"
                audit_dir.mkdir(exist_ok=True)
                (audit_dir / f"epoch{epoch:03d}.jsonl").write_text("".join(line + "\n" for line in audit))
            save_checkpoint(out / "checkpoint.pt", model, optimizer, config, epoch + 1, it)

    ckpt_path = None
    if out is not None:
        ckpt_path = out / "checkpoint.pt"
        if not ckpt_path.exists():
            save_checkpoint(ckpt_path, model, optimizer, config, start_epoch, it)
    model.eval()
    return TrainResult(model, metrics, ckpt_path)
