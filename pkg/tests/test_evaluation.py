import json
import math

import numpy as np
import pytest
import torch
from scipy import stats

from cdseg import evaluation
from cdseg.evaluation import (
    dice_jaccard,
    evaluate_cases,
    paired_t_test,
    report_from_cases,
    sliding_window_infer,
    surface_distances,
    surface_voxels,
    write_report,
)
from cdseg.networks import ArchSpec, forward_volume, make_model_pair
from cdseg.phantoms import AnnotatedCase, ObjectSpec, Volume, generate_phantom

from conftest import random_mask
from oracles import coverage_bruteforce, surface_distances_bruteforce

ARCH = ArchSpec(base_width=4, pool_hw=16, d_h=8, mlp_hidden=(32, 16))


# ---------------------------------------------------------------------------
# dice / jaccard
# ---------------------------------------------------------------------------


def test_dice_jaccard_identical(rng):
    m = random_mask(rng, (5, 5, 5))
    assert dice_jaccard(m, m) == (100.0, 100.0)


def test_dice_jaccard_disjoint():
    a = np.zeros((4, 4, 4), dtype=bool)
    b = np.zeros((4, 4, 4), dtype=bool)
    a[0, 0, 0] = True
    b[3, 3, 3] = True
    assert dice_jaccard(a, b) == (0.0, 0.0)


def test_dice_jaccard_partial_overlap():
    a = np.zeros((4, 4, 4), dtype=bool)
    b = np.zeros((4, 4, 4), dtype=bool)
    a[0, 0, 0] = a[0, 0, 1] = True
    b[0, 0, 1] = b[0, 0, 2] = True
    dice, jac = dice_jaccard(a, b)
    assert dice == 50.0
    assert abs(jac - 100.0 / 3.0) < 1e-12


def test_dice_jaccard_empty_conventions():
    empty = np.zeros((3, 3, 3), dtype=bool)
    assert dice_jaccard(empty, empty) == (100.0, 100.0)
    one = empty.copy()
    one[1, 1, 1] = True
    assert dice_jaccard(empty, one) == (0.0, 0.0)


def test_dice_jaccard_identity(rng):
    for _ in range(30):
        a = random_mask(rng, (6, 6, 6), p=float(rng.uniform(0.1, 0.9)))
        b = random_mask(rng, (6, 6, 6), p=float(rng.uniform(0.1, 0.9)))
        dice, jac = dice_jaccard(a, b)
        assert abs(jac - 100.0 * dice / (200.0 - dice)) < 1e-9


def test_dice_jaccard_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        dice_jaccard(np.zeros((2, 2, 2)), np.zeros((3, 3, 3)))


# ---------------------------------------------------------------------------
# surface distances
# ---------------------------------------------------------------------------


def test_surface_identical_masks(rng):
    m = random_mask(rng, (6, 6, 6))
    assert surface_distances(m, m) == (0.0, 0.0)


def test_surface_two_voxels_three_apart():
    a = np.zeros((8, 8, 8), dtype=bool)
    b = np.zeros((8, 8, 8), dtype=bool)
    a[2, 4, 4] = True
    b[5, 4, 4] = True
    assert surface_distances(a, b) == (3.0, 3.0)


def test_surface_matches_bruteforce(rng):
    for _ in range(20):
        a = random_mask(rng, (6, 6, 6), p=float(rng.uniform(0.2, 0.8)))
        b = random_mask(rng, (6, 6, 6), p=float(rng.uniform(0.2, 0.8)))
        spacing = tuple(rng.uniform(0.5, 2.0, size=3))
        got = surface_distances(a, b, spacing)
        want = surface_distances_bruteforce(a, b, spacing)
        assert abs(got[0] - want[0]) < 1e-9
        assert abs(got[1] - want[1]) < 1e-9


def test_surface_symmetry_and_translation(rng):
    a = random_mask(rng, (7, 7, 7), p=0.3)
    b = random_mask(rng, (7, 7, 7), p=0.3)
    assert surface_distances(a, b) == surface_distances(b, a)
    big_a = np.zeros((10, 10, 10), dtype=bool)
    big_b = np.zeros((10, 10, 10), dtype=bool)
    big_a[:7, :7, :7] = a.astype(bool)
    big_b[:7, :7, :7] = b.astype(bool)
    shift_a = np.roll(big_a, (2, 1, 2), axis=(0, 1, 2))
    shift_b = np.roll(big_b, (2, 1, 2), axis=(0, 1, 2))
    assert surface_distances(big_a, big_b) == surface_distances(shift_a, shift_b)
    assert dice_jaccard(big_a, big_b) == dice_jaccard(shift_a, shift_b)


def test_surface_empty_mask_errors():
    m = np.zeros((4, 4, 4), dtype=bool)
    full = np.ones((4, 4, 4), dtype=bool)
    ok = m.copy()
    ok[1, 1, 1] = True
    with pytest.raises(ValueError, match="prediction mask is empty"):
        surface_distances(m, ok)
    with pytest.raises(ValueError, match="truth mask is empty"):
        surface_distances(ok, m)
    with pytest.raises(ValueError, match="fills the grid"):
        surface_distances(full, ok)


def test_surface_voxels_definition(rng):
    from oracles import surface_bruteforce

    for _ in range(10):
        m = random_mask(rng, (6, 6, 6), p=float(rng.uniform(0.2, 0.8)))
        assert np.array_equal(surface_voxels(m), surface_bruteforce(m))


# ---------------------------------------------------------------------------
# sliding window
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def model():
    student, _ = make_model_pair(ARCH, seed=0)
    return student


def test_window_equal_volume_is_single_forward(model):
    x = np.random.default_rng(0).normal(size=(16, 16, 16)).astype(np.float32)
    got = sliding_window_infer(model, x, (16, 16, 16), (8, 8, 8))
    with torch.no_grad():
        out, _ = forward_volume(model, x)
    assert np.abs(got - out.prob.numpy().astype(np.float64)).max() < 1e-7


def test_no_overlap_coverage(model):
    x = np.random.default_rng(1).normal(size=(16, 16, 16)).astype(np.float32)
    counts = coverage_bruteforce((16, 16, 16), (8, 8, 8), (8, 8, 8))
    assert (counts == 1).all()
    got = sliding_window_infer(model, x, (8, 8, 8), (8, 8, 8))
    assert got.shape == (16, 16, 16)
    assert 0.0 < got.min() and got.max() < 1.0


def test_overlap_coverage_matches_bruteforce(model):
    counts = np.zeros((32, 32, 32), dtype=np.int64)
    # reproduce the implementation's tiling rule and compare coverage
    starts = []
    for n, w, s in zip((32, 32, 32), (16, 16, 16), (8, 8, 8)):
        axis = list(range(0, n - w + 1, s))
        if axis[-1] != n - w:
            axis.append(n - w)
        starts.append(axis)
    for x0 in starts[0]:
        for y0 in starts[1]:
            for z0 in starts[2]:
                counts[x0:x0+16, y0:y0+16, z0:z0+16] += 1
    want = coverage_bruteforce((32, 32, 32), (16, 16, 16), (8, 8, 8))
    assert np.array_equal(counts, want)


def test_clamped_final_window(model):
    # indivisible stride: final window must clamp to the boundary
    x = np.random.default_rng(2).normal(size=(24, 16, 16)).astype(np.float32)
    got = sliding_window_infer(model, x, (16, 16, 16), (12, 16, 16))
    assert got.shape == (24, 16, 16)
    counts = coverage_bruteforce((24, 16, 16), (16, 16, 16), (12, 16, 16))
    assert counts.min() >= 1


def test_window_larger_than_volume(model):
    with pytest.raises(ValueError, match="window"):
        sliding_window_infer(model, np.zeros((8, 8, 8), dtype=np.float32), (16, 16, 16), (8, 8, 8))


def test_averaging_order_invariance(model):
    # averaging overlapping probabilities is a commutative reduction: check
    # the implementation against a shuffled-order accumulation
    x = np.random.default_rng(3).normal(size=(24, 16, 16)).astype(np.float32)
    window, stride = (16, 16, 16), (8, 16, 16)
    got = sliding_window_infer(model, x, window, stride)
    acc = np.zeros(x.shape)
    cnt = np.zeros(x.shape)
    order = [(0, 0, 0), (8, 0, 0)]
    for x0, y0, z0 in reversed(order):
        sl = (slice(x0, x0 + 16), slice(y0, y0 + 16), slice(z0, z0 + 16))
        with torch.no_grad():
            out, _ = forward_volume(model, x[sl])
        acc[sl] += out.prob.numpy().astype(np.float64)
        cnt[sl] += 1
    assert np.abs(got - acc / cnt).max() < 1e-7


# ---------------------------------------------------------------------------
# paired t-test
# ---------------------------------------------------------------------------


def test_t_test_hand_computed():
    a = [2.0, 4.0, 7.0]
    b = [1.0, 3.0, 5.0]
    d = np.array(a) - np.array(b)
    t = d.mean() / (d.std(ddof=1) / math.sqrt(3))
    assert abs(t - 4.0) < 1e-12
    want = float(stats.t.sf(t, df=2))
    assert abs(paired_t_test(a, b) - want) < 1e-12


def test_t_test_uniformly_positive_differences():
    b = [70.0, 72.0, 74.0, 76.0, 78.0]
    a = [x + 0.5 + 0.1 * i for i, x in enumerate(b)]
    assert paired_t_test(a, b) < 0.05


def test_t_test_degenerate_inputs():
    with pytest.raises(ValueError, match="zero variance"):
        paired_t_test([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
    with pytest.raises(ValueError, match="zero variance"):
        paired_t_test([2.0, 4.0, 6.0], [1.0, 3.0, 5.0])
    with pytest.raises(ValueError, match="at least 2"):
        paired_t_test([1.0], [0.0])
    with pytest.raises(ValueError, match="equal-length"):
        paired_t_test([1.0, 2.0], [0.0])


def test_t_test_in_open_interval(rng):
    for _ in range(10):
        a = rng.normal(size=6)
        b = rng.normal(size=6)
        if np.std(a - b, ddof=1) == 0:
            continue
        p = paired_t_test(a, b)
        assert 0.0 < p < 1.0


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def test_evaluate_cases_and_report(tmp_path, model):
    cases = [
        generate_phantom((16, 16, 16), seed, ObjectSpec(radius=(3, 6)))
        for seed in (1, 2, 3)
    ]
    report = evaluate_cases(model, cases, (16, 16, 16), (8, 8, 8))
    assert len(report.per_case) == 3
    for m in report.per_case:
        assert 0.0 <= m.dice <= 100.0
        assert 0.0 <= m.jaccard <= m.dice + 1e-12
        if not math.isnan(m.asd):
            assert m.asd <= m.hd95 + 1e-12
    summary = write_report(report, tmp_path, case_ids=[c.case_id for c in cases])
    text = (tmp_path / "per_case.csv").read_text()
    assert text.splitlines()[0] == "case,Dice[%],Jaccard[%],ASD[voxel],95HD[voxel]"
    loaded = json.loads((tmp_path / "summary.json").read_text())
    for col in evaluation.REPORT_COLUMNS:
        assert col in loaded
    assert loaded["n_cases"] == 3


def test_report_handles_degenerate_predictions(tmp_path):
    from cdseg.evaluation import CaseMetrics

    report = report_from_cases(
        [CaseMetrics(0.0, 0.0, float("nan"), float("nan")), CaseMetrics(80.0, 66.7, 1.0, 2.0)]
    )
    assert report.dice == 40.0
    assert report.asd == 1.0  # aggregate over defined values only
    summary = write_report(report, tmp_path)
    loaded = json.loads((tmp_path / "summary.json").read_text())
    assert loaded["per_case"][0]["asd"] is None
