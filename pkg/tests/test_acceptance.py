"""Release acceptance suite: one test per criterion, each logging a PASS/FAIL line."""

import contextlib
import json
import math
import time

import mpmath
import numpy as np
import pytest
from scipy import stats

from conftest import ACCEPTANCE_LINES
from fetrack import cli
from fetrack.femamba import Backbone, BackboneConfig, FEMambaBlock
from fetrack.head import (
    LOSS_WEIGHTS,
    TrackingHead,
    bce_logits_loss,
    focal_loss,
    giou_loss,
    l1_loss,
    ScoreHead,
    weighted_total,
)
from fetrack.metrics import evaluate
from fetrack.numerics import Tensor, check_gradients, ops
from fetrack.prompts import HARD, PromptPool, RoutingNet, generate_prompts, gumbel_select
from fetrack.ssm import (
    ScanInputs,
    discretize_zoh,
    inverse_softplus,
    selective_scan,
    selective_scan_backward,
    selective_scan_chunked,
    selective_scan_ref,
)
from fetrack.synthetic import SyntheticScene, generate_synthetic
from fetrack.tracker import Tracker, TrackerConfig, TrackerState, update_search_scale
from fetrack.model import ModelConfig, TrackerNet


@contextlib.contextmanager
def criterion(n: int, title: str):
    start = time.perf_counter()
    try:
        yield
    except BaseException as exc:
        ACCEPTANCE_LINES.append(f"criterion {n}: FAIL {title} ({type(exc).__name__}: {exc})")
        print(ACCEPTANCE_LINES[-1])
        raise
    line = f"criterion {n}: PASS {title} ({time.perf_counter() - start:.1f}s)"
    ACCEPTANCE_LINES.append(line)
    print(line)


def scan_instance(rng, L, Cin=3, N=4, Bsz=2, dtype=np.float64):
    cast = lambda a: a.astype(dtype)
    inputs = ScanInputs(cast(rng.normal(size=(Bsz, L, Cin))), cast(rng.uniform(0.05, 0.8, (Bsz, L, Cin))),
                        cast(rng.normal(size=(Bsz, L, N))), cast(rng.normal(size=(Bsz, L, N))),
                        cast(rng.normal(size=(Bsz, L, N))))
    return inputs, cast(-rng.uniform(0.3, 2.0, (Cin, N))), cast(rng.normal(size=Cin))


def max_rel(got, ref, floor):
    got, ref = np.asarray(got, np.float64), np.asarray(ref, np.float64)
    return float(np.max(np.abs(got - ref) / np.maximum(np.abs(ref), floor)))


def test_criterion_01_scan_oracle_equivalence():
    with criterion(1, "chunked scan equals reference scan"):
        start = time.perf_counter()
        rng = np.random.default_rng(101)
        combos = [(L, c) for L in (7, 64, 257) for c in (1, 7, 32, L)]
        worst = {np.float64: 0.0, np.float32: 0.0}
        elementwise = 0.0
        for i in range(100):
            L, chunk = combos[i % len(combos)]
            for dtype in worst:
                inputs, A, D = scan_instance(rng, L, dtype=dtype)
                ref = selective_scan_ref(inputs, A, D)
                got = selective_scan_chunked(inputs, A, D, chunk)
                assert got.dtype == dtype
                # normwise: outputs that cancel to ~1e-4 from O(10) terms make
                # the elementwise ratio a measure of one ulp, not of the scan
                worst[dtype] = max(worst[dtype], max_rel(got, ref, float(np.abs(ref).max())))
                if dtype is np.float64:
                    elementwise = max(elementwise, max_rel(got, ref, 1e-8))
        print(f"normwise f64={worst[np.float64]:.2e} f32={worst[np.float32]:.2e} "
              f"elementwise f64={elementwise:.2e}")
        assert worst[np.float64] < 1e-12, worst
        assert worst[np.float32] < 1e-5, worst
        assert time.perf_counter() - start < 30


def test_criterion_02_zoh_quadrature():
    with criterion(2, "ZOH input matrix equals quadrature of the hold integral"):
        rng = np.random.default_rng(202)
        mpmath.mp.dps = 30
        worst = 0.0
        near_singular = 0
        for i in range(1000):
            d = math.exp(rng.uniform(-6, 0.5))
            if i % 5 == 0:
                a = -rng.uniform(1e-3, 1.0) * 1e-8 / d
            else:
                a = -math.exp(rng.uniform(-6, 2))
            b = rng.normal()
            near_singular += abs(a * d) < 1e-8
            quad = float(mpmath.quad(lambda s: mpmath.exp(a * s), [0, d])) * b
            _, bbar = discretize_zoh(np.array([[a]]), np.array([[[b]]]), np.array([[[d]]]))
            worst = max(worst, abs(float(bbar.squeeze()) - quad) / abs(quad))
        assert near_singular >= 150
        assert worst < 1e-10, worst


def test_criterion_03_gradient_suite():
    with criterion(3, "analytic gradients match central finite differences"):
        start = time.perf_counter()
        rng = np.random.default_rng(303)

        inputs, A, D = scan_instance(rng, 8, Cin=3, N=4, Bsz=1)
        t = [Tensor(a, requires_grad=True) for a in (inputs.x, inputs.delta, A, inputs.B, inputs.C, D,
                                                      inputs.prompt)]
        w = Tensor(rng.normal(size=inputs.x.shape))
        errs = check_gradients(lambda: ops.sum(ops.mul(selective_scan(*t), w)), t)
        assert max(errs.values()) < 1e-5, ("scan", errs)

        blk = FEMambaBlock(BackboneConfig(depth=1, dim=8, d_state=4, prompt_dim=4), rng)
        for p in blk.parameters():
            p.data += rng.normal(scale=0.05, size=p.shape)
        for s in (blk.ssm_f, blk.ssm_b):
            s.dt_bias.data[...] = inverse_softplus(rng.uniform(0.3, 0.8, s.dt_bias.shape))
        H = Tensor(rng.normal(size=(1, 12, 8)), requires_grad=True)
        P = Tensor(rng.normal(size=(1, 12, 4)), requires_grad=True)
        wb = Tensor(rng.normal(size=(1, 12, 8)))
        errs = check_gradients(lambda: ops.sum(ops.mul(blk(H, P), wb)), [H, P] + blk.parameters(), eps=1e-4)
        assert max(errs.values()) < 1e-4, ("block", errs)

        head = TrackingHead(8, rng, width=4)
        fr = Tensor(rng.normal(size=(2, 16, 8)), requires_grad=True)
        fe = Tensor(rng.normal(size=(2, 16, 8)), requires_grad=True)
        ws = [Tensor(rng.normal(size=s)) for s in [(2, 4, 4), (2, 4, 4, 2), (2, 4, 4, 2)]]

        def head_loss():
            out = head(fr, fe)
            terms = [ops.sum(ops.mul(m, wm)) for m, wm in zip((out.score, out.offset, out.size), ws)]
            return ops.add(ops.add(terms[0], terms[1]), terms[2])

        errs = check_gradients(head_loss, [fr, fe] + head.parameters())
        assert max(errs.values()) < 1e-4, ("head", errs)

        score = Tensor(rng.uniform(0.05, 0.95, (2, 5, 5)), requires_grad=True)
        errs = check_gradients(lambda: focal_loss(score, [[1, 2], [4, 0]]), [score])
        assert max(errs.values()) < 1e-5, ("focal", errs)
        pred = Tensor(np.array([[0.45, 0.52, 0.3, 0.2], [0.3, 0.6, 0.25, 0.4]]), requires_grad=True)
        gt = np.array([[0.5, 0.55, 0.25, 0.3], [0.7, 0.2, 0.1, 0.2]])
        errs = check_gradients(lambda: ops.add(giou_loss(pred, gt), l1_loss(pred, gt)), [pred])
        assert max(errs.values()) < 1e-5, ("giou+l1", errs)
        sh = ScoreHead(6, 5, rng)
        F = Tensor(rng.normal(size=(4, 7, 6)), requires_grad=True)
        errs = check_gradients(lambda: bce_logits_loss(sh(F), [1, 0, 1, 0]), [F] + sh.parameters())
        assert max(errs.values()) < 1e-5, ("bce", errs)
        assert time.perf_counter() - start < 300


def test_criterion_04_prompt_identity():
    with criterion(4, "zero prompt is a no-op and dL/dP equals dL/dC"):
        rng = np.random.default_rng(404)
        for dtype in (np.float32, np.float64):
            bb = Backbone(BackboneConfig(depth=2, dim=8, d_state=4, prompt_dim=4), np.random.default_rng(1), dtype)
            hr = rng.normal(size=(2, 10, 8)).astype(dtype)
            he = rng.normal(size=(2, 10, 8)).astype(dtype)
            zero = np.zeros((2, 10, 4), dtype=dtype)
            with_zero = bb(hr, he, zero, zero)
            prompt_free = bb(hr, he, None, None)
            for a, b in zip(with_zero, prompt_free):
                assert a.data.dtype == dtype
                np.testing.assert_array_equal(a.data, b.data)

        inputs, A, D = scan_instance(rng, 16, Cin=3, N=4)
        grads = selective_scan_backward(inputs, A, D, rng.normal(size=inputs.x.shape))
        np.testing.assert_array_equal(grads["prompt"], grads["C"])
        assert np.abs(grads["C"]).max() > 0


def test_criterion_05_prompt_generator():
    with criterion(5, "hard one-hot rows, selection frequencies and the single-prompt case"):
        rng = np.random.default_rng(505)
        logp = np.log(rng.dirichlet(np.ones(5), size=(3, 11)))
        hard = gumbel_select(logp, 1.0, seed=9, mode=HARD).data
        assert set(np.unique(hard)) <= {0.0, 1.0}
        np.testing.assert_array_equal(hard.sum(-1), 1.0)

        probs = np.array([0.1, 0.2, 0.3, 0.4])
        n = 10_000
        draws = gumbel_select(np.tile(np.log(probs), (n, 1, 1)), 1.0, seed=12345, mode=HARD).data
        counts = draws.reshape(n, -1).sum(0)
        assert counts.sum() == n
        p_value = stats.chisquare(counts, n * probs).pvalue
        assert p_value > 0.01, (counts, p_value)

        pool = PromptPool(1, 4, rng)
        net = RoutingNet(6, 6, 1, rng)
        h = rng.normal(size=(2, 9, 6))
        p_r, p_e = generate_prompts(h, rng.normal(size=(2, 9, 6)), pool, net, 1.0, seed=3)
        row = pool().data[0]
        for p in (p_r, p_e):
            np.testing.assert_array_equal(p.data, np.broadcast_to(row, p.shape))


def test_criterion_06_loss_constants():
    with criterion(6, "weighted total of (0.1, 0.2, 0.3) is exactly 3.2"):
        assert LOSS_WEIGHTS == (1, 14, 1)
        assert weighted_total(0.1, 0.2, 0.3) == 3.2


def test_criterion_07_metric_oracle():
    with criterion(7, "hand-built 10-frame sequence"):
        gt = np.tile([50.0, 40.0, 100.0, 100.0], (10, 1))
        pred = gt.copy()
        shifts = np.array([0, 10, 19, 20, 24, 40, 50, 55, 100, 200], dtype=float)
        pred[:, 0] += shifts
        # Horizontal shift s on 100x100 boxes: IoU = (100 - s) / (100 + s), zero once s >= 100.
        iou = np.where(shifts < 100, (100 - shifts) / (100 + shifts), 0.0)
        thresholds = [0.05 * k for k in range(21)]
        auc = sum(sum(v > t for v in iou) / 10 for t in thresholds) / 21
        m = evaluate(pred, gt)
        assert m["PR"] == 0.3 and m["NPR"] == 0.3
        assert m["SR@0.5"] == sum(v > 0.5 for v in iou) / 10 == 0.5
        assert m["SR_auc"] == pytest.approx(auc, abs=1e-15)
        assert m["SR_auc"] == pytest.approx(100 / 210, abs=1e-15)


def test_criterion_08_online_rules():
    with criterion(8, "search-scale machine and template-update rule"):
        z = np.zeros((3, 4, 4))
        state = TrackerState(z, z, z.copy(), z.copy(), np.array([0.0, 0, 4, 4]), 4.0, 4.0, 25)
        cfg = TrackerConfig()
        assert (cfg.k, cfg.low_score_threshold, cfg.scale_factor, cfg.update_threshold) == (8, 0.3, 1.5, 0.5)
        table = [(0.2, 1, 4.0)] + [(0.2, r, 4.0) for r in range(2, 8)] + [
            (0.2, 8, 6.0), (0.05, 9, 6.0), (0.3, 0, 4.0), (0.29, 1, 4.0), (0.31, 0, 4.0)]
        for score, run, scale in table:
            update_search_scale(state, score, cfg)
            assert (state.low_score_run, state.search_scale) == (run, scale), (score, run, scale)

        seq = generate_synthetic(SyntheticScene(height=96, width=96, obj_w=20, obj_h=14), 4, seed=8)
        tiny = ModelConfig(depth=1, dim=8, d_state=4, prompt_dim=4, n_prompts=2, template_size=32,
                           search_size=64, head_width=4, head_stages=1, score_hidden=4)
        tracker = Tracker(TrackerNet(tiny, seed=0, precision="f64"), TrackerConfig(update_interval=3))
        ev = seq.event_frames()
        st = tracker.init(seq.frames[0], ev[0], seq.boxes[0])
        # (logit, expected update): sigmoid(0) = 0.5 exactly does not exceed the threshold
        script = [(9.0, False), (9.0, False), (0.0, False), (-2.0, False), (1e-6, True), (9.0, False),
                  (9.0, False), (9.0, True)]
        for step, (logit, expected) in enumerate(script):
            got = tracker.advance_template(st, seq.frames[3], ev[3], seq.boxes[3], logit)
            assert got == expected, (step, logit)
        assert st.n_updates == 2


def test_criterion_09_desk_scale_end_to_end(tmp_path):
    with criterion(9, "synth, train 500 steps, track and eval through the CLI"):
        start = time.perf_counter()
        cfg_path = tmp_path / "run.json"
        cfg_path.write_text(json.dumps({"seed": 0, "n_frames": 20, "model": {"depth": 4, "dim": 96},
                                        "train": {"steps": 500, "lr": 1e-4, "weight_decay": 1e-4}}))
        seq_dir, ckpt, results = tmp_path / "seq", tmp_path / "model", tmp_path / "results.txt"
        common = ["--config", str(cfg_path)]
        assert cli.main(["synth", str(seq_dir)] + common) == 0
        assert cli.main(["train", str(seq_dir), "--out", str(ckpt)] + common) == 0
        losses = json.loads(ckpt.with_suffix(".loss.json").read_text())["losses"]
        assert len(losses) == 500
        initial, final = losses[0], float(np.mean(losses[-10:]))
        print(f"initial_loss={initial:.4f} final_loss={final:.4f} ratio={final / initial:.4f}")
        assert final <= 0.1 * initial
        assert cli.main(["track", str(seq_dir), "--checkpoint", str(ckpt), "--out", str(results)] + common) == 0
        metrics_path = tmp_path / "metrics.txt"
        assert cli.main(["eval", str(results), str(seq_dir), "--out", str(metrics_path)]) == 0
        m = dict(kv.split("=") for kv in metrics_path.read_text().split())
        print(metrics_path.read_text().strip())
        assert float(m["PR"]) == 1.0
        assert float(m["SR@0.5"]) >= 0.9
        assert time.perf_counter() - start < 20 * 60


def _boundary_distance(x, y, box):
    bx, by, w, h = box
    px, py = x + 0.5, y + 0.5
    dx = np.maximum(np.maximum(bx - px, px - (bx + w)), 0)
    dy = np.maximum(np.maximum(by - py, py - (by + h)), 0)
    inside = np.minimum.reduce([px - bx, bx + w - px, py - by, by + h - py])
    return np.where((dx > 0) | (dy > 0), np.hypot(dx, dy), np.abs(inside))


def test_criterion_10_event_generator():
    with criterion(10, "silent static scene, polarity symmetry, edge locality"):
        assert generate_synthetic(SyntheticScene(static=True), 15, seed=1).events.size == 0
        a = generate_synthetic(SyntheticScene(), 20, seed=2)
        b = generate_synthetic(SyntheticScene(flip_polarity=True), 20, seed=2)
        assert a.events.size == b.events.size > 0
        for key in ("t", "x", "y"):
            np.testing.assert_array_equal(a.events[key], b.events[key])
        np.testing.assert_array_equal(a.events["p"], -b.events["p"])
        ev = a.events
        idx = np.searchsorted(a.times_us, ev["t"], side="right")
        near = np.zeros(ev.size, dtype=bool)
        for i in np.unique(idx):
            sel = idx == i
            # an event in [t_{i-1}, t_i) is close to the boundary at either end of its interval
            d = np.minimum(_boundary_distance(ev["x"][sel], ev["y"][sel], a.boxes[i]),
                           _boundary_distance(ev["x"][sel], ev["y"][sel], a.boxes[i - 1]))
            near[sel] = d <= 3
        assert near.mean() >= 0.9, near.mean()
