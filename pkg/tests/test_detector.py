import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adav import autodiff as ad
from adav import detector as det
from adav.detector import ANCHOR, CELL, GRID, Box, Detection


def box_strategy():
    return st.builds(Box, st.floats(0, 128), st.floats(0, 128), st.floats(1, 60), st.floats(1, 60),
                     st.integers(0, 2))


class TestForward:
    def test_output_shape(self, weights64, rng):
        assert det.raw_output(weights64, rng.random((128, 128, 3))).shape == (16, 16, 8)

    def test_batch_shape(self, weights64, rng):
        assert det.raw_output(weights64, rng.random((2, 128, 128, 3))).shape == (2, 16, 16, 8)

    def test_rejects_wrong_size(self, weights64):
        with pytest.raises(ad.ShapeError):
            det.raw_output(weights64, np.zeros((64, 64, 3)))

    def test_zero_weights_give_half_objectness(self, rng):
        w = det.init_weights(0)
        for layer in w.all_layers():
            layer.kernel[:] = 0
            layer.bias[:] = 0
        out = det.raw_output(w, rng.random((128, 128, 3)))
        assert np.all(out[..., det.OBJ] == 0.5)

    def test_activation_ranges(self, weights64, rng):
        out = det.raw_output(weights64, rng.random((128, 128, 3)))
        assert np.all((out[..., :2] > 0) & (out[..., :2] < 1))
        assert np.all(out[..., 2:4] > 0)
        assert np.all((out[..., 4:] > 0) & (out[..., 4:] < 1))

    def test_deterministic_init(self):
        a, b = det.init_weights(5), det.init_weights(5)
        for x, y in zip(a.arrays(), b.arrays()):
            assert x.tobytes() == y.tobytes()

    def test_receptive_field_option(self):
        assert len(det.init_weights(0, extra_layers=0).backbone) == 3
        assert len(det.init_weights(0, extra_layers=2).backbone) == 5


def brute_decode(raw, thr):
    out = []
    for r in range(GRID):
        for c in range(GRID):
            cell = raw[r, c]
            k = int(np.argmax(cell[5:]))
            conf = cell[4] * cell[5 + k]
            if conf < thr:
                continue
            cx, cy = (c + cell[0]) * CELL, (r + cell[1]) * CELL
            w, h = cell[2] * ANCHOR, cell[3] * ANCHOR
            x0, x1 = max(cx - w / 2, 0), min(cx + w / 2, 128)
            y0, y1 = max(cy - h / 2, 0), min(cy + h / 2, 128)
            if x1 > x0 and y1 > y0:
                out.append(((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0, k, conf, r * GRID + c))
    return out


class TestDecode:
    def test_low_objectness_is_empty(self):
        raw = np.full((16, 16, 8), 0.9)
        raw[..., 4] = 0.01
        assert det.decode(raw, 0.5) == []

    def test_cell_formula(self):
        raw = np.zeros((16, 16, 8))
        raw[0, 0] = [0.5, 0.5, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0]
        (d,) = det.decode(raw, 0.5)
        # the 32x32 box centered at (4, 4) is clipped to the frame: [0, 20] x [0, 20]
        unclipped = Box(4.0, 4.0, 32.0, 32.0, 0)
        assert unclipped.corners() == (-12.0, -12.0, 20.0, 20.0)
        assert (d.box.cx, d.box.cy, d.box.w, d.box.h, d.cls) == (10.0, 10.0, 20.0, 20.0, 0)

    def test_interior_cell_formula(self):
        raw = np.zeros((16, 16, 8))
        raw[5, 7] = [0.5, 0.25, 1.0, 0.5, 1.0, 0.0, 0.0, 0.8]
        (d,) = det.decode(raw, 0.5)
        assert (d.box.cx, d.box.cy, d.box.w, d.box.h, d.cls) == (60.0, 42.0, 32.0, 16.0, 2)
        assert d.conf == pytest.approx(0.8)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        raw = rng.random((16, 16, 8))
        raw[..., 2:4] *= 2
        got = [(d.box.cx, d.box.cy, d.box.w, d.box.h, d.cls, d.conf, d.cell) for d in det.decode(raw, 0.3)]
        ref = brute_decode(raw, 0.3)
        assert len(got) == len(ref) > 0
        for g, r in zip(got, ref):
            assert g[4] == r[4] and g[6] == r[6]
            np.testing.assert_allclose(g[:4] + (g[5],), r[:4] + (r[5],), rtol=0, atol=1e-12)


def reference_nms(dets, thr):
    pool = list(dets)
    keep = []
    while pool:
        best = max(pool, key=lambda d: (d.conf, -d.cell))
        keep.append(best)
        pool = [d for d in pool if d is not best and (d.cls != best.cls or det.iou(d.box, best.box) <= thr)]
    return keep


class TestNms:
    def test_single(self):
        d = Detection(Box(10, 10, 5, 5, 0), 0.7)
        assert det.nms([d]) == [d]

    def test_identical_boxes(self):
        a = Detection(Box(10, 10, 5, 5, 0), 0.9, 1)
        b = Detection(Box(10, 10, 5, 5, 0), 0.8, 2)
        assert det.nms([b, a]) == [a]

    def test_other_class_survives(self):
        a = Detection(Box(10, 10, 5, 5, 0), 0.9, 1)
        b = Detection(Box(10, 10, 5, 5, 1), 0.8, 2)
        assert det.nms([a, b]) == [a, b]

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_quadratic_reference(self, seed):
        rng = np.random.default_rng(seed)
        dets = [Detection(Box(*rng.uniform(20, 60, 2), *rng.uniform(10, 30, 2), int(rng.integers(2))),
                          float(rng.random()), i) for i in range(10)]
        assert det.nms(dets, 0.3) == reference_nms(dets, 0.3)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(box_strategy(), st.floats(0.01, 1)), max_size=12))
    def test_survivors_never_overlap_within_class(self, items):
        dets = [Detection(b, c, i) for i, (b, c) in enumerate(items)]
        kept = det.nms(dets, 0.5)
        for i, a in enumerate(kept):
            for b in kept[i + 1 :]:
                assert a.cls != b.cls or det.iou(a.box, b.box) <= 0.5
        assert det.nms(kept, 0.5) == kept


class TestIou:
    def test_self(self):
        b = Box(10, 20, 8, 6)
        assert det.iou(b, b) == 1.0

    def test_disjoint(self):
        assert det.iou(Box(5, 5, 2, 2), Box(50, 50, 2, 2)) == 0.0

    def test_corner_boxes(self):
        # corner boxes [0,2]^2 and [1,3]^2: intersection 1, union 4 + 4 - 1
        a, b = Box(1, 1, 2, 2), Box(2, 2, 2, 2)
        assert det.iou(a, b) == pytest.approx(1 / 7)

    @settings(max_examples=100, deadline=None)
    @given(box_strategy(), box_strategy())
    def test_symmetric_and_bounded(self, a, b):
        v = det.iou(a, b)
        assert 0.0 <= v <= 1.0 + 1e-12
        assert v == pytest.approx(det.iou(b, a))


class TestLosses:
    def test_exact_target_loss_near_zero(self):
        gt = [Box(20, 20, 10, 10, 0)]
        t = det.build_targets(gt)
        raw = np.zeros((16, 16, 8))
        raw[..., 4] = t.occ
        assert det.confidence_loss(raw, gt).item() < 1e-5

    def test_half_everywhere_is_ln2(self):
        raw = np.full((16, 16, 8), 0.5)
        assert det.confidence_loss(raw, [Box(20, 20, 10, 10, 0)]).item() == pytest.approx(math.log(2), abs=1e-12)

    def test_matches_oracle(self, rng):
        raw = rng.uniform(0.01, 0.99, (16, 16, 8))
        gt = [Box(*rng.uniform(0, 127, 2), 10, 10, 1) for _ in range(4)]
        occ = np.zeros((16, 16))
        for b in gt:
            occ[int(b.cy // 8), int(b.cx // 8)] = 1
        ref = 0.0
        for r in range(16):
            for c in range(16):
                p, y = raw[r, c, 4], occ[r, c]
                ref -= y * math.log(p) + (1 - y) * math.log(1 - p)
        assert det.confidence_loss(raw, gt).item() == pytest.approx(ref / 256, abs=1e-9)

    def test_vanishing_loss_oracle(self, rng):
        logits = rng.normal(0, 4, (16, 16, 8))
        gt = [Box(12, 12, 10, 10, 0), Box(100, 40, 10, 10, 1)]
        ref = (max(logits[1, 1, 4] + 3, 0) + max(logits[5, 12, 4] + 3, 0)) / 2
        assert det.vanishing_loss(logits, gt).item() == pytest.approx(ref)

    def test_targets_cell_assignment(self):
        t = det.build_targets([Box(127.9, 0.0, 10, 12, 2)])
        assert t.occ[0, 15] == 1 and t.occ.sum() == 1
        np.testing.assert_allclose(t.box[0, 15], [127.9 / 8 - 15, 0, 10 / 32, 12 / 32])
        assert t.cls[0, 15].tolist() == [0, 0, 1]


@pytest.fixture(scope="module")
def one_frame():
    from adav import scenes
    return scenes.sample_frames([3], 1)


class TestTraining:
    def test_loss_decreases_over_first_steps(self, one_frame):
        log = det.TrainLog()
        det.train_detector(one_frame, epochs=10, lr=3e-3, seed=0, batch_size=1, history=log)
        assert len(log.losses) == 10
        assert all(b < a for a, b in zip(log.losses, log.losses[1:]))

    def test_zero_lr_keeps_weights(self, one_frame):
        init = det.init_weights(4)
        out = det.train_detector(one_frame, epochs=2, lr=0.0, init=init)
        for a, b in zip(init.arrays(), out.arrays()):
            np.testing.assert_array_equal(a, b)

    def test_bit_identical_across_runs(self, one_frame):
        a = det.train_detector(one_frame * 3, epochs=1, seed=9, batch_size=2)
        b = det.train_detector(one_frame * 3, epochs=1, seed=9, batch_size=2)
        for x, y in zip(a.arrays(), b.arrays()):
            assert x.tobytes() == y.tobytes()

    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            det.train_detector([], epochs=1)
