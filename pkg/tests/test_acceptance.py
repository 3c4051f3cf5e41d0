"""The eleven acceptance criteria, each at its stated tolerance.

Criterion 1 trains nine detectors at full benchmark scale and takes roughly
a quarter of an hour on one core.
"""

import json
import time
from fractions import Fraction
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest
import torch

from mergetrain import cli
from mergetrain.datasets import SynthConfig, load_manifest, merge, split_and_strip, synth_generate
from mergetrain.detector import DetectorConfig, DetectorOutput, assign_targets, loss_total
from mergetrain.evaluation import average_precision
from mergetrain.geometry import AnchorSpec, Box, containing_cell, decode_to_image, encode_from_image, from_corners, iou
from mergetrain.pseudolabel import PseudoLabelParams, generate, mix_class
from mergetrain.proxy import (
    assemble_batch,
    ensemble_predict,
    fit_aspect_clusters,
    make_batches,
    pad_to_nearest,
)
from mergetrain.datasets import CropRecord
from mergetrain.training import TrainConfig, loss_pseudo_class, loss_pseudo_object, run_training

from acceptance_log import record
from oracles import enumerate_ap, naive_loss, raster_iou
from stubs import PixelProxy, RejectAll
from test_detector import fd_check, random_instance
from test_pseudolabel import CFG as ALG1_CFG, brute_force_alg1, scenario
from test_proxy import Scripted
from test_training import rel_fd_error

SMOKE = Path(__file__).resolve().parents[1] / "configs" / "smoke.json"


@contextmanager
def criterion(number, title):
    state = {"detail": ""}
    try:
        yield state
    except BaseException:
        record(number, title, False, state["detail"])
        raise
    record(number, title, True, state["detail"])


# -- 1 and 8: the full benchmark ---------------------------------------------


@pytest.fixture(scope="module")
def benchmark(tmp_path_factory):
    out = tmp_path_factory.mktemp("acceptance") / "reproduce"
    t0 = time.perf_counter()
    code = cli.main(["reproduce", "--out", str(out)])
    minutes = (time.perf_counter() - t0) / 60
    return out, code, minutes


def test_c01_three_arm_ordering(benchmark):
    out, code, minutes = benchmark
    with criterion(1, "upper >= ours >= baseline on the synthetic benchmark") as c:
        summary = json.loads((out / "summary.json").read_text())
        m = summary["mean_map50"]
        c["detail"] = (f"baseline {m['baseline']:.2f} ours {m['ours']:.2f} upper {m['upper']:.2f} "
                       f"rate {summary['missing_rate']:.3f} {minutes:.1f} min")
        assert summary["train_images"] >= 1500
        assert 0.45 <= summary["missing_rate"] <= 0.55
        assert len(list((out / "runs").glob("ours_s*"))) == 3
        assert m["ours"] - m["baseline"] >= 2.0
        assert m["upper"] - m["ours"] >= -1.0
        assert code == cli.EXIT_OK
        assert minutes <= 45


def test_c08_gating_invariants(benchmark):
    out, _, _ = benchmark
    with criterion(8, "every audited pseudo-label passes both gates") as c:
        merged = load_manifest(out / "data" / "merged.jsonl").by_id()
        n, bad = 0, 0
        for dump in sorted((out / "runs").glob("ours_s*/audit/*.jsonl")):
            for line in dump.read_text().splitlines():
                e = json.loads(line)
                box = Box(**e["box"])
                worst = max((iou(box, a.box) for a in merged[e["image"]].annotations), default=0.0)
                n += 1
                bad += int(e["pobj"] < 0.8 or worst > 0.5)
        c["detail"] = f"{n} labels, {bad} violations"
        assert n > 0 and bad == 0


# -- 2 -----------------------------------------------------------------------


def test_c02_null_pseudo_equivalence():
    with criterion(2, "reject-all proxy reproduces the baseline trajectory bitwise"):
        synth = SynthConfig(n_images=48, seed=5, cooccur_groups=((1, 2, 3), (4, 5, 6)), cooccur_prob=0.8,
                            objects_per_image=(2, 5))
        store, full = synth_generate(synth)
        merged = merge(split_and_strip(full, {1, 2, 3}), split_and_strip(full, {4, 5, 6}))
        cfg = dict(epochs=3, batch_size=16, warmup_iters=5, seed=3, detector=DetectorConfig(width=8),
                   pseudo=PseudoLabelParams(warmup_epochs=0, obj_prefilter=0.0))
        base = run_training(merged, store, TrainConfig(mode="baseline", **cfg))
        ours = run_training(merged, store, TrainConfig(mode="ours", **cfg), proxy=RejectAll(6, ((12, 12),)))
        assert len(base.metrics) == 3
        assert [m.step_losses for m in base.metrics] == [m.step_losses for m in ours.metrics]
        assert sum(m.gated_out for m in ours.metrics) > 0


# -- 3, 4 ----------------------------------------------------------------------


def test_c03_loss_oracle():
    rng = np.random.default_rng(3)
    with criterion(3, "loss_total matches the naive per-anchor oracle within 1e-6") as c:
        worst = 0.0
        for _ in range(100):
            cfg, gts, raw = random_instance(rng, g=4, A=2, K=3)
            got = float(loss_total(assign_targets(gts, cfg), DetectorOutput.from_raw(raw, cfg.g), gts, cfg))
            want = naive_loss(raw.numpy(), [(*a.box.as_tuple(), a.class_id) for a in gts], cfg.g, cfg.anchors,
                              cfg.K, cfg.tau, cfg.lam_cls, cfg.lam_coor, cfg.lam_obj)
            worst = max(worst, abs(got - want))
        # objectness is summed over every one of the A*g^2 anchors
        cfg, _, raw = random_instance(rng, g=4, A=2, K=3)
        obj_only = DetectorConfig(g=4, K=3, anchors=cfg.anchors, lam_cls=0, lam_coor=0, lam_obj=1, input_size=32)
        p = torch.sigmoid(raw[..., 4])
        assert float(loss_total(assign_targets([], obj_only), DetectorOutput.from_raw(raw, 4), [], obj_only)) == \
            pytest.approx(float(-torch.log(1 - p).sum()), rel=1e-9)
        c["detail"] = f"max abs diff {worst:.2e}"
        assert worst <= 1e-6


def test_c04_gradient_checks():
    rng = np.random.default_rng(4)
    with criterion(4, "analytic vs finite-difference gradients, rel err < 1e-4") as c:
        worst = 0.0
        for _ in range(20):
            cfg, gts, raw = random_instance(rng, g=3, A=2, K=3)
            a = assign_targets(gts, cfg)
            worst = max(worst, fd_check(lambda r: loss_total(a, DetectorOutput.from_raw(r, cfg.g), gts, cfg), raw))
        for _ in range(20):
            K, n = int(rng.integers(2, 6)), int(rng.integers(1, 4))
            target = rng.dirichlet(np.ones(K), size=n)
            worst = max(worst, rel_fd_error(lambda z: loss_pseudo_class(target, torch.softmax(z, -1)),
                                            torch.from_numpy(rng.normal(size=(n, K)))))
        for _ in range(20):
            n = int(rng.integers(1, 4))
            t_obj = rng.uniform(0, 1, n)
            worst = max(worst, rel_fd_error(lambda z: loss_pseudo_object(t_obj, torch.sigmoid(z)),
                                            torch.from_numpy(rng.normal(size=n))))
        c["detail"] = f"worst {worst:.2e}"
        assert worst < 1e-4


# -- 5 -------------------------------------------------------------------------


def test_c05_algorithm_equivalence():
    rng = np.random.default_rng(5)
    with criterion(5, "strict pseudo-labeling equals the brute-force transcription") as c:
        emitted = 0
        for trial in range(50):
            image, raw, gts = scenario(rng)
            proxy = PixelProxy(3, centers=((6, 6), (10, 6), (9, 12)), seed=trial)
            params = PseudoLabelParams(theta1=float(rng.uniform(0.2, 0.7)), theta2=float(rng.uniform(0.3, 0.6)),
                                       beta=float(rng.choice([0.0, 0.3])), warmup_epochs=0).strict()
            got = generate(image, DetectorOutput.from_raw(torch.from_numpy(raw), ALG1_CFG.g), gts, proxy, params, 0,
                           np.random.default_rng(trial), ALG1_CFG)
            want = brute_force_alg1(image, raw, gts, proxy, params.theta1, params.theta2, params.beta, params.m,
                                    params.s, np.random.default_rng(trial), ALG1_CFG.g, ALG1_CFG.anchors, ALG1_CFG.K)
            assert [lab.source for lab in got.labels] == [w[0] for w in want]
            for lab, (_, box, p_tilde, p_obj, hbar) in zip(got.labels, want):
                assert lab.box.as_tuple() == pytest.approx(box, abs=1e-12)
                assert np.allclose(lab.class_probs, p_tilde, rtol=0, atol=1e-12)
                assert lab.obj_prob == pytest.approx(p_obj, abs=1e-12)
            emitted += len(want)
        c["detail"] = f"{emitted} labels compared"
        assert emitted > 20


# -- 6 -------------------------------------------------------------------------


def test_c06_geometry():
    rng = np.random.default_rng(6)
    with criterion(6, "IoU equals the raster oracle; decode(encode) round-trips") as c:
        canvas, worst_iou = 32, 0.0
        for _ in range(1000):
            a = (*sorted(rng.choice(canvas + 1, 2, replace=False)), *sorted(rng.choice(canvas + 1, 2, replace=False)))
            b = (*sorted(rng.choice(canvas + 1, 2, replace=False)), *sorted(rng.choice(canvas + 1, 2, replace=False)))
            a, b = (a[0], a[2], a[1], a[3]), (b[0], b[2], b[1], b[3])
            got = iou(from_corners(*(v / canvas for v in a)), from_corners(*(v / canvas for v in b)))
            worst_iou = max(worst_iou, abs(got - raster_iou(a, b, canvas)))
        worst_rt = 0.0
        for _ in range(1000):
            g = int(rng.integers(2, 16))
            box = Box(*rng.uniform(0, 1, 2), *rng.uniform(0.01, 1, 2))
            cell = containing_cell(box, g)
            anchor = AnchorSpec(0, *rng.uniform(0.01, 1, 2))
            back = decode_to_image(encode_from_image(box, cell, anchor), cell, anchor)
            worst_rt = max(worst_rt, max(abs(x - y) for x, y in zip(back.as_tuple(), box.as_tuple())))
        c["detail"] = f"iou diff {worst_iou:.1e}, round-trip {worst_rt:.1e}"
        # the rasterized value is a ratio of integers; only the corner division can round
        assert worst_iou <= 1e-12
        assert worst_rt < 1e-9


# -- 7 -------------------------------------------------------------------------


def test_c07_ensemble_and_mixing():
    rng = np.random.default_rng(7)
    with criterion(7, "ensemble bounded by members; mixing endpoints exact; outputs normalized"):
        for _ in range(1000):
            m = int(rng.integers(0, 5))
            rows = rng.dirichlet(np.ones(4), size=m + 1)
            out = ensemble_predict(Scripted(rows), np.ones((6, 6, 3), np.uint8), m, 3, rng)
            assert np.all(out >= rows.min(0) - 1e-12) and np.all(out <= rows.max(0) + 1e-12)
            assert abs(out.sum() - 1) <= 1e-6
        for _ in range(1000):
            K = int(rng.integers(2, 8))
            p_det, hbar = rng.dirichlet(np.ones(K)), rng.dirichlet(np.ones(K + 1))
            assert np.array_equal(mix_class(p_det, hbar, 1.0), p_det)
            assert np.array_equal(mix_class(p_det, hbar, 0.0), hbar[:K] / hbar[:K].sum())
            assert abs(mix_class(p_det, hbar, float(rng.uniform())).sum() - 1) <= 1e-6


# -- 9 -------------------------------------------------------------------------


def test_c09_preprocessing():
    rng = np.random.default_rng(9)
    with criterion(9, "homogeneous proxy batches; padding keeps every pixel"):
        crops = [CropRecord(rng.integers(0, 255, (h, w, 3), dtype=np.uint8), int(rng.integers(1, 5)), "")
                 for h, w in rng.integers(3, 30, (300, 2))]
        centers = fit_aspect_clusters([c.size for c in crops], 5)
        for b in make_batches(crops, centers, 16, rng):
            arr = assemble_batch(crops, b, centers, 8)
            assert arr.ndim == 4 and arr.shape[0] == len(b)
        for _ in range(500):
            h, w = rng.integers(1, 40, 2)
            crop = rng.integers(0, 256, (h, w, 3), dtype=np.uint8)
            out, _ = pad_to_nearest(crop, centers)
            assert np.array_equal(out[:h, :w], crop)


# -- 10 ------------------------------------------------------------------------


def test_c10_evaluator_oracle():
    with criterion(10, "AP equals the hand-enumerated precision-recall area"):
        assert average_precision([True, False, True], 2) == enumerate_ap([True, False, True], 2)
        assert average_precision([True, False, True], 2) == pytest.approx(5 / 6, abs=2e-16)  # one ulp
        flags = [True, True, False, True, False, False, True, False, True, False]
        exact = Fraction(1, 7) * (1 + 1 + Fraction(3, 4) + Fraction(4, 7) + Fraction(5, 9))
        assert average_precision(flags, 7) == enumerate_ap(flags, 7) == float(exact)


# -- 11 ------------------------------------------------------------------------


def test_c11_reproduce_determinism(tmp_path):
    with criterion(11, "reproduce twice gives identical metrics logs and tables"):
        a, b = tmp_path / "a", tmp_path / "b"
        assert cli.main(["reproduce", "--config", str(SMOKE), "--out", str(a)]) == 0
        assert cli.main(["reproduce", "--config", str(SMOKE), "--out", str(b)]) == 0
        logs = sorted(p.relative_to(a) for p in a.glob("runs/*/metrics.jsonl"))
        assert len(logs) == 3
        for rel in logs:
            assert (a / rel).read_bytes() == (b / rel).read_bytes()
        for name in ("table.txt", "comparison.json", "summary.json"):
            assert (a / name).read_bytes() == (b / name).read_bytes()
