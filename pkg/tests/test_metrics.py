import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from fundus_uda.data import ImageSample, label_to_masks
from fundus_uda.metrics import asd, boundary, dice, evaluate, evaluate_masks


def brute_dice(a, b):
    inter = sa = sb = 0
    for x, y in zip(a.ravel(), b.ravel()):
        inter += bool(x) and bool(y)
        sa += bool(x)
        sb += bool(y)
    return 1.0 if sa + sb == 0 else 2 * inter / (sa + sb)


def brute_boundary(m):
    H, W = m.shape
    pts = []
    for i in range(H):
        for j in range(W):
            if not m[i, j]:
                continue
            for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                a, b = i + di, j + dj
                if not (0 <= a < H and 0 <= b < W) or not m[a, b]:
                    pts.append((i, j))
                    break
    return pts


def brute_asd(a, b):
    pa, pb = brute_boundary(a), brute_boundary(b)
    d = [min(math.dist(p, q) for q in pb) for p in pa] + [min(math.dist(q, p) for p in pa) for q in pb]
    return sum(d) / len(d)


def blob_pair(rng, size=16):
    out = []
    for _ in range(2):
        m = np.zeros((size, size), bool)
        for _ in range(rng.integers(1, 4)):
            r0, c0 = rng.integers(0, size, 2)
            h, w = rng.integers(1, 8, 2)
            m[r0:r0 + h, c0:c0 + w] = True
        m ^= rng.random((size, size)) < 0.05
        out.append(m)
    return out


def test_dice_examples():
    a = np.zeros((4, 4), bool)
    a[1:3, 0:2] = True
    b = np.roll(a, 1, axis=1)
    assert dice(a, b) == 0.5
    assert dice(a, a) == 1.0
    assert dice(a, ~a) == 0.0
    assert dice(np.zeros((4, 4)), np.zeros((4, 4))) == 1.0


def test_asd_examples():
    a = np.zeros((9, 9), bool)
    b = a.copy()
    a[4, 1] = True
    b[4, 4] = True
    assert asd(a, b) == 3.0
    assert asd(a, a) == 0.0


def test_shape_mismatch():
    with pytest.raises(ValueError):
        dice(np.zeros((4, 4)), np.zeros((4, 5)))
    with pytest.raises(ValueError):
        asd(np.ones((4, 4)), np.ones((5, 4)))


def test_boundary_counts_image_border():
    full = np.ones((5, 5), bool)
    b = boundary(full)
    assert b.sum() == 16 and not b[2, 2]
    assert set(zip(*np.nonzero(b))) == set(brute_boundary(full))


def test_random_pairs_match_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(200):
        a, b = blob_pair(rng)
        assert dice(a, b) == brute_dice(a, b)
        if a.any() and b.any():
            assert abs(asd(a, b) - brute_asd(a, b)) <= 1e-9


@pytest.mark.parametrize("case", ["both_empty", "pred_empty", "gt_empty", "single_pixels", "full"])
def test_degenerate_cases(case):
    z = np.zeros((16, 16), bool)
    one = z.copy()
    one[3, 3] = True
    diag = math.hypot(16, 16)
    if case == "both_empty":
        assert dice(z, z) == 1.0 and asd(z, z) == diag
    elif case == "pred_empty":
        assert dice(z, one) == 0.0 and asd(z, one) == diag
        assert asd(z, one, penalty=7.0) == 7.0
    elif case == "gt_empty":
        assert dice(one, z) == 0.0 and asd(one, z) == diag
    elif case == "single_pixels":
        other = z.copy()
        other[10, 7] = True
        assert asd(one, other) == pytest.approx(brute_asd(one, other), abs=1e-12)
    else:
        full = ~z
        assert dice(full, full) == 1.0 and asd(full, full) == 0.0
        assert asd(full, one) == pytest.approx(brute_asd(full, one), abs=1e-12)


masks16 = arrays(bool, (12, 12), elements=st.booleans())


@settings(max_examples=60, deadline=None)
@given(masks16, masks16)
def test_symmetry(a, b):
    assert dice(a, b) == dice(b, a)
    assert asd(a, b) == pytest.approx(asd(b, a), abs=1e-12)
    assert 0.0 <= dice(a, b) <= 1.0 and asd(a, b) >= 0.0


@settings(max_examples=60, deadline=None)
@given(masks16)
def test_self_agreement(a):
    if a.any():
        assert dice(a, a) == 1.0 and asd(a, a) == 0.0


def test_dice_monotone_in_overlap():
    # |A| + |B| fixed at 8; overlap grows from 0 to 4
    a = np.zeros((4, 8), bool)
    a[0, 0:4] = True
    prev = -1.0
    for shift in range(4, -1, -1):
        b = np.zeros_like(a)
        b[0, shift:shift + 4] = True
        d = dice(a, b)
        assert d >= prev
        prev = d


class Oracle(torch.nn.Module):
    """Returns fixed probability maps regardless of input."""

    def __init__(self, probs):
        super().__init__()
        self.probs = torch.as_tensor(probs, dtype=torch.float32)
        self.i = 0

    def forward(self, x):
        out = self.probs[self.i:self.i + len(x)]
        self.i += len(x)
        return type("Out", (), {"prob": out})()


def labelled(rng, n=5, size=16):
    out = []
    for k in range(n):
        lab = np.zeros((size, size), np.uint8)
        r = rng.integers(3, 6)
        lab[8 - r:8 + r, 8 - r:8 + r] = 1
        lab[7:9, 7:9] = 2
        out.append(ImageSample(rng.uniform(0, 1, (size, size, 3)).astype(np.float32), lab, "target", f"t{k}"))
    return out


def test_ground_truth_probabilities_are_perfect():
    data = labelled(np.random.default_rng(1))
    probs = np.stack([label_to_masks(s.label) for s in data]).astype(np.float32)
    r = evaluate(Oracle(probs), data)
    assert r.dice_cup == r.dice_disc == r.dice_avg == 100.0
    assert r.asd_avg == 0.0 and r.n_images == 5


def test_all_background_gets_penalty():
    data = labelled(np.random.default_rng(2))
    r = evaluate(Oracle(np.zeros((5, 2, 16, 16))), data)
    assert r.dice_avg == 0.0
    assert r.asd_cup == r.asd_disc == pytest.approx(math.hypot(16, 16))
    assert all(row["flags_cup"] == ["empty_mask_penalty"] for row in r.per_image)


def test_averages_are_means_of_per_image_values():
    rng = np.random.default_rng(3)
    data = labelled(rng, 6)
    preds = [rng.random((2, 16, 16)) < 0.3 for _ in data]
    r = evaluate_masks(preds, [s.label for s in data])
    for key in ("dice_cup", "dice_disc", "dice_avg", "asd_cup", "asd_disc", "asd_avg"):
        assert abs(getattr(r, key) - np.mean([row[key] for row in r.per_image])) <= 1e-9


def test_unlabelled_dataset_rejected():
    s = labelled(np.random.default_rng(4), 1)[0].with_(label=None)
    with pytest.raises(ValueError):
        evaluate(Oracle(np.zeros((1, 2, 16, 16))), [s])
