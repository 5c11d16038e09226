"""Training objectives.

Supervised fit (Dice+BCE on the mask head, MSE on the distance head),
slice-level temperature contrast between teacher and student embeddings,
pair-wise cosine distillation over encoder positions, probability-map
consistency, and the Gaussian warm-up that scales all unsupervised terms.

Everything is differentiable torch code, dtype-generic, and numerically
stable (log-sum-exp, clamped probabilities).
"""

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch

log = logging.getLogger(__name__)

PROB_EPS = 1e-7
DICE_SMOOTH = 1e-5

LOG_COLUMNS = ("iteration", "sup", "contrast", "pd", "con", "rampup", "total", "lr")


@dataclass
class LossReport:
    """Per-iteration raw term values; `total` folds in the warm-up and
    weights: total = sup + rampup * (lam*contrast + beta*pd + gamma*con)."""

    sup: float
    contrast: float
    pd: float
    con: float
    rampup: float
    total: float


def _check_same_shape(a, b, what):
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def seg_loss(q, y):
    """0.5 * (soft Dice loss + voxel-mean binary cross-entropy)."""
    q = torch.as_tensor(q)
    y = torch.as_tensor(y)
    _check_same_shape(q, y, "seg_loss")
    qc = q.clamp(PROB_EPS, 1.0 - PROB_EPS)
    yf = y.to(qc.dtype)
    inter = (qc * yf).sum()
    dice = 1.0 - (2.0 * inter + DICE_SMOOTH) / (qc.sum() + yf.sum() + DICE_SMOOTH)
    bce = -(yf * qc.log() + (1.0 - yf) * (1.0 - qc).log()).mean()
    return 0.5 * (dice + bce)


def supervised_loss(outputs, labels, alpha):
    """Mean seg loss plus alpha times the mean distance-map MSE over a
    labeled batch."""
    if len(outputs) == 0:
        raise ValueError("supervised_loss: empty labeled batch")
    if len(outputs) != len(labels):
        raise ValueError(f"{len(outputs)} outputs vs {len(labels)} labels")
    seg = 0.0
    mse = 0.0
    for out, case in zip(outputs, labels):
        target_sdm = torch.as_tensor(case.sdm, dtype=out.sdm.dtype)
        _check_same_shape(out.sdm, target_sdm, "supervised_loss")
        seg = seg + seg_loss(out.prob, torch.as_tensor(case.mask))
        mse = mse + ((out.sdm - target_sdm) ** 2).mean()
    n = len(outputs)
    return seg / n + alpha * (mse / n)


def _unit_rows(m, what):
    norms = torch.linalg.vector_norm(m, dim=-1, keepdim=True)
    if (norms == 0).any():
        raise ValueError(f"{what}: zero vector, cosine similarity undefined")
    return m / norms


def info_nce(h_anchor, h_positive, pool, tau):
    """-log softmax of the positive similarity over a pool of B slices.

    Embeddings are L2-normalized before the dot products; the pool must
    contain the positive so the denominator includes the numerator term.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    pool = torch.as_tensor(pool)
    if pool.ndim != 2 or pool.shape[0] < 2:
        raise ValueError(f"pool must be (B>=2, d), got shape {tuple(pool.shape)}")
    h_anchor = torch.as_tensor(h_anchor)
    h_positive = torch.as_tensor(h_positive)
    if not (pool == h_positive).all(dim=-1).any():
        raise ValueError("pool does not contain the positive embedding")
    a = _unit_rows(h_anchor, "anchor")
    p = _unit_rows(h_positive, "positive")
    rows = _unit_rows(pool, "pool")
    logits = rows @ a / tau
    return torch.logsumexp(logits, dim=0) - (a @ p) / tau


def _sample_pool(rng, n, b, keep):
    """b indices out of range(n), always containing `keep`."""
    if b >= n:
        return np.arange(n)
    others = rng.choice(n - 1, size=b - 1, replace=False)
    others[others >= keep] += 1
    return np.concatenate([[keep], others])


def boundary_contrast_loss(h_teacher, h_student, tau, batch_slices=None, seed=0):
    """Symmetric slice contrast averaged over all (case, slice) positives.

    For each positive pair one pool of `batch_slices` slice indices is
    drawn seed-deterministically from the mini-batch (always containing
    the positive) and used for both directions, teacher-anchored over
    student slices and vice versa.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if len(h_teacher) != len(h_student):
        raise ValueError(f"{len(h_teacher)} teacher cases vs {len(h_student)} student")
    for i, (ht, hs) in enumerate(zip(h_teacher, h_student)):
        if ht.shape != hs.shape:
            raise ValueError(
                f"case {i}: teacher {tuple(ht.shape)} vs student {tuple(hs.shape)}"
            )
    if len(h_teacher) == 0 or sum(m.shape[0] for m in h_teacher) == 0:
        raise ValueError("no positive pairs: empty unlabeled batch")

    t_all = _unit_rows(torch.cat(list(h_teacher), dim=0), "teacher embeddings")
    s_all = _unit_rows(torch.cat(list(h_student), dim=0), "student embeddings")
    n = t_all.shape[0]
    b = n if batch_slices is None else int(batch_slices)
    if b < 2:
        raise ValueError(f"pool size must be >= 2, got {b}")
    if b > n:
        raise ValueError(f"pool size {b} exceeds the {n} slices in the batch")

    rng = np.random.default_rng(seed)
    total = 0.0
    for idx in range(n):
        pool_idx = _sample_pool(rng, n, b, idx)
        t_pool = t_all[pool_idx]
        s_pool = s_all[pool_idx]
        pos = (t_all[idx] @ s_all[idx]) / tau
        loss_ts = torch.logsumexp(s_pool @ t_all[idx] / tau, dim=0) - pos
        loss_st = torch.logsumexp(t_pool @ s_all[idx] / tau, dim=0) - pos
        # summing the two directions first keeps the value bit-exactly
        # invariant under swapping the teacher and student sets
        total = total + (loss_ts + loss_st)
    return total / n


def pairwise_distill_loss(v_student, v_teacher):
    """Cosine-similarity softmax distillation over all encoder positions.

    Per case, each student row is scored against every teacher row of the
    same case; the per-row -log softmax values are summed and the case
    sums averaged over the batch.
    """
    if len(v_student) == 0:
        raise ValueError("pairwise_distill_loss: empty batch")
    if len(v_student) != len(v_teacher):
        raise ValueError(f"{len(v_student)} student cases vs {len(v_teacher)} teacher")
    total = 0.0
    for i, (vs, vt) in enumerate(zip(v_student, v_teacher)):
        if vs.shape != vt.shape:
            raise ValueError(
                f"case {i}: student {tuple(vs.shape)} vs teacher {tuple(vt.shape)}"
            )
        sn = _unit_rows(vs, f"hidden pattern (student case {i})")
        tn = _unit_rows(vt, f"hidden pattern (teacher case {i})")
        logits = sn @ tn.T
        per_row = torch.logsumexp(logits, dim=1) - logits.diagonal()
        total = total + per_row.sum()
    return total / len(v_student)


def consistency_loss(out_s, out_t):
    """Mean over cases of the voxel-mean squared error between student and
    teacher probability maps."""
    if len(out_s) == 0:
        raise ValueError("consistency_loss: empty batch")
    if len(out_s) != len(out_t):
        raise ValueError(f"{len(out_s)} student outputs vs {len(out_t)} teacher")
    total = 0.0
    for i, (s, t) in enumerate(zip(out_s, out_t)):
        _check_same_shape(s.prob, t.prob, f"consistency_loss case {i}")
        total = total + ((s.prob - t.prob) ** 2).mean()
    return total / len(out_s)


_rampup_clamp_logged = False


def rampup(t, t_max):
    """Gaussian warm-up exp(-5 (1 - t/t_max)^2), from e^-5 at t=0 to 1 at
    t=t_max.  Out-of-range t is clamped (logged once)."""
    global _rampup_clamp_logged
    if t_max <= 0:
        raise ValueError(f"t_max must be positive, got {t_max}")
    if t < 0 or t > t_max:
        if not _rampup_clamp_logged:
            log.warning("rampup called with t=%s outside [0, %s]; clamping", t, t_max)
            _rampup_clamp_logged = True
        t = min(max(t, 0), t_max)
    return math.exp(-5.0 * (1.0 - t / t_max) ** 2)


def _as_float(value):
    if isinstance(value, torch.Tensor):
        return float(value.detach())
    return float(value)


def total_loss(sup, contrast, pd, con, hp, t, t_max):
    """Combines the four terms into the training objective.

    Returns (report, total) where the report holds plain floats and
    `total` keeps the autograd graph when the inputs are tensors.
    """
    parts = {"sup": sup, "contrast": contrast, "pd": pd, "con": con}
    for name, value in parts.items():
        if not math.isfinite(_as_float(value)):
            raise ValueError(f"non-finite {name} loss: {_as_float(value)}")
    w = rampup(t, t_max)
    total = sup + w * (hp.lam * contrast + hp.beta * pd + hp.gamma * con)
    # the logged total is recomposed in float64 so the report invariant holds
    # regardless of the training dtype
    sup_f, contrast_f, pd_f, con_f = map(_as_float, (sup, contrast, pd, con))
    report = LossReport(
        sup=sup_f,
        contrast=contrast_f,
        pd=pd_f,
        con=con_f,
        rampup=w,
        total=sup_f + w * (hp.lam * contrast_f + hp.beta * pd_f + hp.gamma * con_f),
    )
    return report, total
