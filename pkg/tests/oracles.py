"""Independent reference implementations used to check the package.

Everything here is deliberately brute force (exhaustive scans, scalar
loops, central differences) and shares no code with the implementations
under test.
"""

import math

import numpy as np
import torch
from scipy.spatial.distance import cdist


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------


def sdm_bruteforce(mask, spacing=(1.0, 1.0, 1.0)):
    """O(V^2) nearest-opposite-voxel signed distance map, normalized per
    sign class, negative inside."""
    mask = np.asarray(mask).astype(bool)
    if not mask.any():
        return np.ones(mask.shape)
    if mask.all():
        return -np.ones(mask.shape)
    spacing = np.asarray(spacing, dtype=np.float64)
    pts_in = np.argwhere(mask) * spacing
    pts_out = np.argwhere(~mask) * spacing
    d = cdist(pts_in, pts_out)
    d_in = d.min(axis=1)
    d_out = d.min(axis=0)
    out = np.zeros(mask.shape)
    out[mask] = -d_in / d_in.max()
    out[~mask] = d_out / d_out.max()
    return out


def surface_bruteforce(mask):
    """Mask voxels with at least one in-grid face-adjacent background voxel,
    found by explicit neighbor loops."""
    mask = np.asarray(mask).astype(bool)
    out = np.zeros_like(mask)
    nx, ny, nz = mask.shape
    for x in range(nx):
        for y in range(ny):
            for z in range(nz):
                if not mask[x, y, z]:
                    continue
                for dx, dy, dz in ((1,0,0),(-1,0,0),(0,1,0),(0,-1,0),(0,0,1),(0,0,-1)):
                    u, v, w = x + dx, y + dy, z + dz
                    if 0 <= u < nx and 0 <= v < ny and 0 <= w < nz and not mask[u, v, w]:
                        out[x, y, z] = True
                        break
    return out


def surface_distances_bruteforce(pred, truth, spacing=(1.0, 1.0, 1.0)):
    """(ASD, HD95) via exhaustive O(S^2) nearest-surface scans."""
    spacing = np.asarray(spacing, dtype=np.float64)
    pts_p = np.argwhere(surface_bruteforce(pred)) * spacing
    pts_t = np.argwhere(surface_bruteforce(truth)) * spacing
    d = cdist(pts_p, pts_t)
    pooled = np.concatenate([d.min(axis=1), d.min(axis=0)])
    return float(pooled.mean()), float(np.percentile(pooled, 95))


def coverage_bruteforce(shape, window, stride):
    """Per-voxel window coverage counts from an explicit tiling that clamps
    the final window of each axis to the boundary."""
    counts = np.zeros(shape, dtype=np.int64)
    axes = []
    for n, w, s in zip(shape, window, stride):
        pos, starts = 0, []
        while True:
            starts.append(min(pos, n - w))
            if pos >= n - w:
                break
            pos += s
        axes.append(sorted(set(starts)))
    for x0 in axes[0]:
        for y0 in axes[1]:
            for z0 in axes[2]:
                counts[x0:x0 + window[0], y0:y0 + window[1], z0:z0 + window[2]] += 1
    return counts


# ---------------------------------------------------------------------------
# Losses (scalar loops)
# ---------------------------------------------------------------------------


def seg_loss_scalar(q, y, eps=1e-7, smooth=1e-5):
    inter = sq = sy = ce = 0.0
    n = 0
    for qv, yv in zip(np.asarray(q, dtype=np.float64).flat, np.asarray(y, dtype=np.float64).flat):
        qc = min(max(qv, eps), 1.0 - eps)
        inter += qc * yv
        sq += qc
        sy += yv
        ce += -(yv * math.log(qc) + (1.0 - yv) * math.log(1.0 - qc))
        n += 1
    dice = 1.0 - (2.0 * inter + smooth) / (sq + sy + smooth)
    return 0.5 * (dice + ce / n)


def mse_scalar(a, b):
    total = 0.0
    n = 0
    for av, bv in zip(np.asarray(a, dtype=np.float64).flat, np.asarray(b, dtype=np.float64).flat):
        total += (av - bv) ** 2
        n += 1
    return total / n


# ---------------------------------------------------------------------------
# Gradients: central finite differences in float64
# ---------------------------------------------------------------------------


def numeric_grads(f, tensors, eps=1e-5):
    """Central-difference gradients of a scalar-valued f(*tensors)."""
    tensors = [t.detach().clone() for t in tensors]
    grads = []
    for k in range(len(tensors)):
        flat = tensors[k].reshape(-1)
        g = torch.zeros_like(flat)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            f_plus = float(f(*tensors))
            flat[i] = orig - eps
            f_minus = float(f(*tensors))
            flat[i] = orig
            g[i] = (f_plus - f_minus) / (2.0 * eps)
        grads.append(g.reshape(tensors[k].shape))
    return grads


def analytic_grads(f, tensors):
    leaves = [t.detach().clone().requires_grad_(True) for t in tensors]
    out = f(*leaves)
    out.backward()
    return [
        leaf.grad if leaf.grad is not None else torch.zeros_like(leaf)
        for leaf in leaves
    ]


def max_rel_err(analytic, numeric, floor=1e-6):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = torch.clamp(torch.maximum(a.abs(), n.abs()), min=floor)
        worst = max(worst, float(((a - n).abs() / denom).max()))
    return worst


def gradcheck(f, tensors, eps=1e-5, tol=1e-4):
    """True when autograd matches central differences within tol."""
    err = max_rel_err(analytic_grads(f, tensors), numeric_grads(f, tensors, eps))
    return err < tol, err
