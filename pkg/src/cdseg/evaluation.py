"""Volumetric inference and the four segmentation metrics.

Surfaces are mask voxels with at least one face-adjacent background voxel
inside the grid; distances are voxel-center Euclidean distances between
nearest surface voxels, pooled over both directions for ASD (mean) and
95HD (95th percentile, linear interpolation).
"""

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage, stats
from scipy.spatial import cKDTree

REPORT_COLUMNS = ("Dice[%]", "Jaccard[%]", "ASD[voxel]", "95HD[voxel]")

_FACE6 = ndimage.generate_binary_structure(3, 1)


def sliding_window_infer(model, voxels, window, stride):
    """Average of overlapping window predictions; output matches the input
    shape.  The final window per axis is clamped to the boundary."""
    voxels = np.asarray(voxels)
    shape = voxels.shape
    window = tuple(int(w) for w in window)
    stride = tuple(int(s) for s in stride)
    if any(w > n for w, n in zip(window, shape)):
        raise ValueError(f"window {window} larger than volume {shape}")
    if any(s < 1 for s in stride):
        raise ValueError(f"stride must be >= 1 per axis, got {stride}")

    starts = []
    for n, w, s in zip(shape, window, stride):
        axis_starts = list(range(0, n - w + 1, s))
        if axis_starts[-1] != n - w:
            axis_starts.append(n - w)
        starts.append(axis_starts)

    acc = np.zeros(shape, dtype=np.float64)
    count = np.zeros(shape, dtype=np.float64)
    backbone = model.backbone if hasattr(model, "backbone") else model
    backbone.eval()
    dtype = next(backbone.parameters()).dtype
    with torch.no_grad():
        for x0 in starts[0]:
            for y0 in starts[1]:
                for z0 in starts[2]:
                    sl = (
                        slice(x0, x0 + window[0]),
                        slice(y0, y0 + window[1]),
                        slice(z0, z0 + window[2]),
                    )
                    patch = torch.as_tensor(
                        np.ascontiguousarray(voxels[sl]), dtype=dtype
                    )
                    prob, _, _ = backbone(patch.unsqueeze(0).unsqueeze(0))
                    acc[sl] += prob[0, 0].double().numpy()
                    count[sl] += 1.0
    return acc / count


def dice_jaccard(pred, truth):
    """(Dice %, Jaccard %).  Both-empty masks score (100, 100)."""
    pred = np.asarray(pred).astype(bool)
    truth = np.asarray(truth).astype(bool)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    n_pred = int(pred.sum())
    n_truth = int(truth.sum())
    if n_pred == 0 and n_truth == 0:
        return 100.0, 100.0
    inter = int((pred & truth).sum())
    union = int((pred | truth).sum())
    return 200.0 * inter / (n_pred + n_truth), 100.0 * inter / union


def surface_voxels(mask):
    """Mask voxels with a face-adjacent in-grid background voxel."""
    mask = np.asarray(mask).astype(bool)
    eroded = ndimage.binary_erosion(mask, structure=_FACE6, border_value=1)
    return mask & ~eroded


def surface_distances(pred, truth, spacing=(1.0, 1.0, 1.0)):
    """(ASD, 95HD) over the pooled directed nearest-surface distances."""
    pred = np.asarray(pred).astype(bool)
    truth = np.asarray(truth).astype(bool)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    for name, mask in (("prediction", pred), ("truth", truth)):
        if not mask.any():
            raise ValueError(f"surface distances undefined: {name} mask is empty")
    sp = surface_voxels(pred)
    st = surface_voxels(truth)
    for name, surf in (("prediction", sp), ("truth", st)):
        if not surf.any():
            raise ValueError(
                f"surface distances undefined: {name} mask has no surface "
                "voxels (it fills the grid)"
            )
    spacing = np.asarray(spacing, dtype=np.float64)
    pts_p = np.argwhere(sp) * spacing
    pts_t = np.argwhere(st) * spacing
    d_pt = cKDTree(pts_t).query(pts_p)[0]
    d_tp = cKDTree(pts_p).query(pts_t)[0]
    # summing per direction first keeps ASD exactly symmetric in (pred, truth)
    asd = (d_pt.sum() + d_tp.sum()) / (len(d_pt) + len(d_tp))
    hd95 = np.percentile(np.concatenate([d_pt, d_tp]), 95)
    return float(asd), float(hd95)


def paired_t_test(scores_a, scores_b):
    """One-sided paired t-test p-value for the alternative a > b."""
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"need equal-length 1D score lists, got {a.shape} vs {b.shape}")
    if len(a) < 2:
        raise ValueError(f"need at least 2 paired scores, got {len(a)}")
    diff = a - b
    if np.std(diff, ddof=1) == 0:
        raise ValueError("degenerate paired t-test: differences have zero variance")
    return float(stats.ttest_rel(a, b, alternative="greater").pvalue)


@dataclass
class CaseMetrics:
    dice: float
    jaccard: float
    asd: float    # nan when a mask side is degenerate
    hd95: float


@dataclass
class MetricsReport:
    dice: float
    jaccard: float
    asd: float
    hd95: float
    per_case: list


def _agg(values):
    defined = [v for v in values if not math.isnan(v)]
    return float(np.mean(defined)) if defined else float("nan")


def report_from_cases(per_case):
    return MetricsReport(
        dice=_agg([c.dice for c in per_case]),
        jaccard=_agg([c.jaccard for c in per_case]),
        asd=_agg([c.asd for c in per_case]),
        hd95=_agg([c.hd95 for c in per_case]),
        per_case=list(per_case),
    )


def evaluate_cases(model, cases, window, stride):
    """Sliding-window inference plus all four metrics per test case."""
    per_case = []
    for case in cases:
        prob = sliding_window_infer(model, case.volume.voxels, window, stride)
        pred = prob >= 0.5
        truth = case.mask.astype(bool)
        dice, jac = dice_jaccard(pred, truth)
        try:
            asd, hd95 = surface_distances(pred, truth, case.volume.spacing)
        except ValueError:
            asd, hd95 = float("nan"), float("nan")
        per_case.append(CaseMetrics(dice, jac, asd, hd95))
    return report_from_cases(per_case)


def write_report(report, out_dir, case_ids=None):
    """Per-case CSV plus an aggregate JSON, both using the fixed columns."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ids = case_ids if case_ids is not None else list(range(len(report.per_case)))
    with open(out / "per_case.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("case",) + REPORT_COLUMNS)
        for case_id, m in zip(ids, report.per_case):
            writer.writerow([case_id, m.dice, m.jaccard, m.asd, m.hd95])
    def _jsonable(value):
        if isinstance(value, float) and math.isnan(value):
            return None
        return value

    summary = {
        "Dice[%]": _jsonable(report.dice),
        "Jaccard[%]": _jsonable(report.jaccard),
        "ASD[voxel]": _jsonable(report.asd),
        "95HD[voxel]": _jsonable(report.hd95),
        "n_cases": len(report.per_case),
        "per_case": [
            {k: _jsonable(v) for k, v in asdict(m).items()} for m in report.per_case
        ],
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    return summary
