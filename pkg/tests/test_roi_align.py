import numpy as np
import pytest

from cdfkd.kernels import FeatureMap, RoiBox, roi_align
from cdfkd.tensor import Tape, Tensor, sum_all


def bilinear_at(fmap, y, x):
    """Clamped corner-gather bilinear sample of a [C,H,W] float64 array."""
    c, h, w = fmap.shape
    y = min(max(y, 0.0), h - 1.0)
    x = min(max(x, 0.0), w - 1.0)
    y0, x0 = int(np.floor(y)), int(np.floor(x))
    y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
    fy, fx = y - y0, x - x0
    top = fmap[:, y0, x0] * (1 - fx) + fmap[:, y0, x1] * fx
    bot = fmap[:, y1, x0] * (1 - fx) + fmap[:, y1, x1] * fx
    return top * (1 - fy) + bot * fy


def roi_align_oracle(fmap, box, stride, out, samples):
    """Per-bin average of bilinear samples at half-bin-center offsets."""
    c = fmap.shape[0]
    x0, y0, x1, y1 = box.x0 / stride, box.y0 / stride, box.x1 / stride, box.y1 / stride
    bh, bw = (y1 - y0) / out, (x1 - x0) / out
    pooled = np.zeros((c, out, out), dtype=np.float64)
    for i in range(out):
        for j in range(out):
            acc = np.zeros(c, dtype=np.float64)
            for sy in range(samples):
                for sx in range(samples):
                    y = y0 + (i + (sy + 0.5) / samples) * bh
                    x = x0 + (j + (sx + 0.5) / samples) * bw
                    acc += bilinear_at(fmap, y, x)
            pooled[:, i, j] = acc / (samples * samples)
    return pooled


def test_roi_align_matches_brute_force_on_50_cases():
    rng = np.random.default_rng(123)
    worst = 0.0
    for case in range(50):
        c = int(rng.integers(1, 4))
        h, w = int(rng.integers(4, 11)), int(rng.integers(4, 11))
        stride = int(rng.choice([1, 2, 8]))
        fmap = rng.normal(0, 1, (c, h, w))
        out = int(rng.choice([1, 2, 3, 7]))
        samples = int(rng.choice([1, 2, 3]))
        boxes = []
        for _ in range(int(rng.integers(1, 4))):
            bx0 = rng.uniform(0, (w - 1.5) * stride)
            by0 = rng.uniform(0, (h - 1.5) * stride)
            boxes.append(
                RoiBox(bx0, by0, bx0 + rng.uniform(0.4, (w * stride - bx0)), by0 + rng.uniform(0.4, (h * stride - by0)))
            )
        pooled, skipped = roi_align(FeatureMap(Tensor(fmap), stride), boxes, out=out, samples=samples)
        assert skipped == []
        for k, box in enumerate(boxes):
            ref = roi_align_oracle(fmap, box, stride, out, samples)
            worst = max(worst, np.abs(pooled.data[k] - ref).max())
    assert worst < 1e-6, f"worst oracle deviation {worst:.2e}"


def test_roi_align_constant_map_is_constant():
    val = np.float32(1.7)
    fmap = np.full((2, 5, 5), val, dtype=np.float32)
    pooled, _ = roi_align(FeatureMap(Tensor(fmap), stride=4), [RoiBox(1.0, 2.0, 17.0, 13.0)], out=7, samples=2)
    assert np.array_equal(pooled.data, np.full((1, 2, 7, 7), val))


def test_roi_align_whole_map_single_bin():
    rng = np.random.default_rng(7)
    fmap = rng.normal(0, 1, (1, 4, 4))
    box = RoiBox(0.0, 0.0, 4.0, 4.0)
    pooled, _ = roi_align(FeatureMap(Tensor(fmap), stride=1), [box], out=1, samples=2)
    ref = roi_align_oracle(fmap, box, 1, 1, 2)
    assert np.abs(pooled.data[0] - ref).max() < 1e-6
    # P=1, S=2: exactly the mean of 4 bilinear samples at (1,1),(1,3),(3,1),(3,3)
    manual = np.mean([bilinear_at(fmap, y, x)[0] for y in (1.0, 3.0) for x in (1.0, 3.0)])
    assert float(pooled.data[0, 0, 0, 0]) == pytest.approx(manual, abs=1e-6)


def test_roi_align_degenerate_box_is_skipped_not_fatal():
    fmap = np.ones((1, 4, 4), dtype=np.float32)
    wide = RoiBox(0.0, 0.0, 4.0, 4.0)
    thin = RoiBox(1.0, 1.0, 1.0 + 5e-7, 3.0)
    pooled, skipped = roi_align(FeatureMap(Tensor(fmap), stride=1), [wide, thin, wide], out=2, samples=2)
    assert skipped == [1]
    assert pooled.shape == (2, 1, 2, 2)


def test_roi_align_empty_and_all_skipped():
    fmap = FeatureMap(Tensor(np.ones((1, 4, 4), np.float32)), stride=1)
    pooled, skipped = roi_align(fmap, [], out=2, samples=1)
    assert pooled.shape == (0, 1, 2, 2) and skipped == []
    pooled, skipped = roi_align(fmap, [RoiBox(1.0, 1.0, 1.0 + 1e-9, 2.0)], out=2, samples=1)
    assert pooled.shape == (0, 1, 2, 2) and skipped == [0]


def test_roi_align_gradient_mass_is_conserved():
    # every sample's 4 corner weights sum to 1, so grad mass passes through
    rng = np.random.default_rng(3)
    fmap = rng.normal(0, 1, (2, 6, 6)).astype(np.float32)
    boxes = [RoiBox(0.5, 1.0, 4.5, 5.0), RoiBox(2.0, 2.0, 5.5, 4.25)]
    with Tape() as tape:
        t = tape.watch(fmap.copy())
        pooled, _ = roi_align(FeatureMap(t, stride=1), boxes, out=3, samples=2)
        grads = tape.backward(sum_all(pooled))
    assert grads[t.node].sum() == pytest.approx(pooled.data.size, rel=1e-5)
