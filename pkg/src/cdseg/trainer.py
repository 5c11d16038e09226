"""Mean-teacher semi-supervised training loop.

Each iteration: augment a labeled mini-batch, build two aligned noisy
views of each unlabeled volume, run the student (with gradients) and the
teacher (without), assemble the full objective, take one SGD step on the
student, then EMA-update the teacher.  All randomness is derived from
(config seed, stream id, iteration, item index), so runs replay and
resume bit-identically.
"""

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import losses, networks, phantoms, sdm
from .config import TrainConfig
from .losses import LOG_COLUMNS, LossReport
from .networks import ArchSpec, DropoutMask, DualOutput

# RNG stream ids
_INIT, _BATCH, _AUG, _VIEW, _DROP_S, _DROP_T, _POOL = range(7)


def derive_seed(*key):
    """Stable seed from a tuple of non-negative ints."""
    return int(np.random.SeedSequence(list(key)).generate_state(1)[0])


def lr_schedule(t, cfg):
    """Step decay: base_lr * factor^(t // interval)."""
    if t < 0:
        raise ValueError(f"iteration must be >= 0, got {t}")
    return cfg.base_lr * cfg.lr_decay_factor ** (t // cfg.lr_decay_interval)


class TrainingAborted(RuntimeError):
    """Raised when a loss term goes non-finite; carries the iteration index
    and the last finite report."""

    def __init__(self, iteration, cause, last_report=None):
        super().__init__(f"non-finite loss at iteration {iteration}: {cause}")
        self.iteration = iteration
        self.cause = cause
        self.last_report = last_report


@dataclass
class TrainState:
    student: networks.SegmentationModel
    teacher: networks.SegmentationModel
    optimizer: torch.optim.SGD
    t: int
    cfg: TrainConfig


def _arch_from_config(cfg):
    return ArchSpec(
        base_width=cfg.base_width,
        pool_hw=cfg.pool_hw,
        d_h=cfg.hp.d_h,
    )


def init_state(cfg):
    dtype = getattr(torch, cfg.dtype)
    student, teacher = networks.make_model_pair(
        _arch_from_config(cfg), derive_seed(cfg.seed, _INIT), dtype
    )
    optimizer = torch.optim.SGD(
        student.parameters(),
        lr=cfg.base_lr,
        momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
    )
    return TrainState(student, teacher, optimizer, 0, cfg)


def _to_tensor(voxels, dtype):
    return torch.as_tensor(np.ascontiguousarray(voxels), dtype=dtype)


def train_step(state, labeled_batch, unlabeled_batch, cfg):
    """One optimization step; returns (state, LossReport)."""
    t = state.t
    hp = cfg.hp
    dtype = next(state.student.parameters()).dtype
    n_lab = len(labeled_batch)
    n_unl = len(unlabeled_batch)
    if n_lab == 0:
        raise ValueError("train_step needs at least one labeled case")

    lab = [
        phantoms.augment_case(case, derive_seed(cfg.seed, _AUG, t, i), cfg.crop_shape)
        for i, case in enumerate(labeled_batch)
    ]
    views = [
        phantoms.two_view(
            vol, derive_seed(cfg.seed, _VIEW, t, i), cfg.noise_scale, cfg.crop_shape
        )
        for i, vol in enumerate(unlabeled_batch)
    ]

    student_in = torch.stack(
        [_to_tensor(c.volume.voxels, dtype) for c in lab]
        + [_to_tensor(v_s.voxels, dtype) for v_s, _, _ in views]
    ).unsqueeze(1)
    probs, sdms, hidden = state.student.backbone(student_in)
    lab_out = [DualOutput(probs[i, 0], sdms[i, 0]) for i in range(n_lab)]
    stu_out = [DualOutput(probs[n_lab + i, 0], sdms[n_lab + i, 0]) for i in range(n_unl)]
    v_student = [networks.flatten_hidden(hidden[n_lab + i]) for i in range(n_unl)]

    sup = losses.supervised_loss(lab_out, lab, hp.alpha)

    if n_unl > 0:
        with torch.no_grad():
            teacher_in = torch.stack(
                [_to_tensor(v_t.voxels, dtype) for _, v_t, _ in views]
            ).unsqueeze(1)
            t_probs, t_sdms, t_hidden = state.teacher.backbone(teacher_in)
            tea_out = [DualOutput(t_probs[i, 0], t_sdms[i, 0]) for i in range(n_unl)]
            v_teacher = [networks.flatten_hidden(t_hidden[i]) for i in range(n_unl)]

        h_student, h_teacher = [], []
        for i in range(n_unl):
            view_s = _to_tensor(views[i][0].voxels, dtype)
            if cfg.fuse_sdm:
                feat_s = sdm.boundary_aware_feature(view_s, stu_out[i].sdm)
            else:
                feat_s = view_s
            mask_s = DropoutMask(derive_seed(cfg.seed, _DROP_S, t, i), hp.dropout_p)
            h_student.append(state.student.proj(feat_s, mask_s))
            with torch.no_grad():
                view_t = _to_tensor(views[i][1].voxels, dtype)
                if cfg.fuse_sdm:
                    feat_t = sdm.boundary_aware_feature(view_t, tea_out[i].sdm)
                else:
                    feat_t = view_t
                mask_t = DropoutMask(derive_seed(cfg.seed, _DROP_T, t, i), hp.dropout_p)
                h_teacher.append(state.teacher.proj(feat_t, mask_t))

        contrast = losses.boundary_contrast_loss(
            h_teacher, h_student, hp.tau, hp.batch_slices,
            seed=derive_seed(cfg.seed, _POOL, t),
        )
        pd = losses.pairwise_distill_loss(v_student, v_teacher)
        con = losses.consistency_loss(stu_out, tea_out)
    else:
        contrast = torch.zeros((), dtype=dtype)
        pd = torch.zeros((), dtype=dtype)
        con = torch.zeros((), dtype=dtype)

    try:
        report, total = losses.total_loss(sup, contrast, pd, con, hp, t, cfg.t_max)
    except ValueError as err:
        raise TrainingAborted(t, str(err)) from err

    lr = lr_schedule(t, cfg)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    state.optimizer.step()
    networks.ema_update(state.teacher, state.student, hp.ema_decay)
    state.t = t + 1
    return state, report


def _sample_batch(split, cfg, t):
    rng = np.random.default_rng(derive_seed(cfg.seed, _BATCH, t))
    n_lab = len(split.labeled)
    lab_idx = rng.choice(n_lab, size=cfg.labeled_per_batch, replace=cfg.labeled_per_batch > n_lab)
    labeled = [split.labeled[int(i)] for i in lab_idx]
    unlabeled = []
    if cfg.unlabeled_per_batch > 0:
        n_unl = len(split.unlabeled)
        unl_idx = rng.choice(
            n_unl, size=cfg.unlabeled_per_batch, replace=cfg.unlabeled_per_batch > n_unl
        )
        unlabeled = [split.unlabeled[int(i)] for i in unl_idx]
    return labeled, unlabeled


def write_log(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
        writer.writerows(rows)


def run_training(cfg, split, out_dir=None, resume_from=None):
    """Runs cfg.t_max iterations; returns (final state, list of LossReport).

    Writes log.csv and checkpoints under out_dir when given.  Resuming from
    a checkpoint replays the remaining iterations bit-identically.
    """
    if cfg.num_threads:
        torch.set_num_threads(cfg.num_threads)
    if not split.labeled:
        raise ValueError("training needs at least one labeled case")
    if cfg.unlabeled_per_batch > 0 and not split.unlabeled:
        raise ValueError(
            "config asks for unlabeled cases per batch but the split has none"
        )

    if resume_from is not None:
        data = networks.load_checkpoint(resume_from)
        student, teacher = networks.restore_model_pair(data)
        optimizer = torch.optim.SGD(
            student.parameters(),
            lr=cfg.base_lr,
            momentum=cfg.momentum,
            weight_decay=cfg.weight_decay,
        )
        optimizer.load_state_dict(data["optimizer"])
        state = TrainState(student, teacher, optimizer, data["t"], cfg)
    else:
        state = init_state(cfg)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    reports = []
    rows = []
    last_report = None
    for t in range(state.t, cfg.t_max):
        labeled, unlabeled = _sample_batch(split, cfg, t)
        try:
            state, report = train_step(state, labeled, unlabeled, cfg)
        except TrainingAborted as err:
            err.last_report = last_report
            if out is not None:
                write_log(out / "log.csv", rows)
            raise
        reports.append(report)
        rows.append(
            [t, repr(report.sup), repr(report.contrast), repr(report.pd),
             repr(report.con), repr(report.rampup), repr(report.total),
             repr(lr_schedule(t, cfg))]
        )
        last_report = report
        if out is not None and cfg.checkpoint_every and state.t % cfg.checkpoint_every == 0:
            networks.save_checkpoint(
                out / f"ckpt_{state.t:06d}.pt",
                state.student, state.teacher, state.optimizer, state.t,
            )
    if out is not None:
        write_log(out / "log.csv", rows)
        networks.save_checkpoint(
            out / "ckpt_final.pt",
            state.student, state.teacher, state.optimizer, state.t,
        )
    return state, reports
