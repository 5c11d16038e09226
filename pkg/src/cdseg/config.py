"""Dataclass configuration with lossless JSON round-trips."""

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields


@dataclass
class HyperParams:
    alpha: float = 0.1          # weight of the distance-map regression term
    lam: float = 0.5            # slice-contrast weight
    beta: float = 0.1           # pair-wise distillation weight
    gamma: float = 0.1          # student/teacher consistency weight
    tau: float = 0.5            # contrast temperature
    ema_decay: float = 0.999
    dropout_p: float = 0.1
    batch_slices: int | None = None  # contrast pool size; None = all slices in the batch
    d_h: int = 128


@dataclass
class TrainConfig:
    t_max: int = 500
    labeled_per_batch: int = 2
    unlabeled_per_batch: int = 2
    crop_shape: tuple[int, int, int] = (32, 32, 32)
    base_lr: float = 0.01
    lr_decay_factor: float = 0.1
    lr_decay_interval: int = 250
    momentum: float = 0.9
    weight_decay: float = 5e-4
    noise_scale: float = 0.1
    base_width: int = 8
    pool_hw: int = 128
    fuse_sdm: bool = True       # add the predicted distance map into the contrast features
    dtype: str = "float32"
    seed: int = 0
    checkpoint_every: int = 0   # 0 = final checkpoint only
    num_threads: int = 0        # 0 = leave torch's thread pool alone
    hp: HyperParams = field(default_factory=HyperParams)


@dataclass
class DatasetConfig:
    n_cases: int = 100
    shape: tuple[int, int, int] = (32, 32, 32)
    n_labeled: int = 8
    n_unlabeled: int = 72
    n_test: int = 20
    seed: int = 0
    n_objects: tuple[int, int] = (1, 3)
    radius: tuple[float, float] = (4.0, 9.0)
    intensity: float = 1.0
    noise_sigma: float = 0.3


@dataclass
class ExperimentConfig:
    data_dir: str = "data"
    out_dir: str = "runs/default"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    # Ablations zero one loss weight each; disable_sdm additionally drops the
    # predicted distance map from the contrast features (component ablation).
    disable_contrast: bool = False
    disable_pd: bool = False
    disable_sdm_loss: bool = False
    disable_consistency: bool = False
    disable_sdm: bool = False
    dropout_p: float | None = None
    pool_hw: int | None = None
    eval_window: tuple[int, int, int] | None = None  # None = training crop
    eval_stride: tuple[int, int, int] | None = None  # None = half window


_TUPLE_FIELDS = {"crop_shape", "shape", "n_objects", "radius", "eval_window", "eval_stride"}


def _from_dict(cls, data):
    kwargs = {}
    for f in fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        if f.name == "hp":
            value = _from_dict(HyperParams, value)
        elif f.name == "dataset":
            value = _from_dict(DatasetConfig, value)
        elif f.name == "train":
            value = _from_dict(TrainConfig, value)
        elif f.name in _TUPLE_FIELDS and value is not None:
            value = tuple(value)
        kwargs[f.name] = value
    return cls(**kwargs)


def to_json(cfg, indent=2):
    return json.dumps(asdict(cfg), indent=indent, sort_keys=True)


def from_json(cls, text):
    return _from_dict(cls, json.loads(text))


def config_hash(cfg):
    return hashlib.sha256(json.dumps(asdict(cfg), sort_keys=True).encode()).hexdigest()


def resolve_train_config(cfg: ExperimentConfig) -> TrainConfig:
    """Applies ablation flags and overrides to the training config.

    Flags zero their designated loss weight; every loss term is still
    computed and logged, so one code path serves all variants.
    """
    train = _from_dict(TrainConfig, asdict(cfg.train))
    hp = train.hp
    if cfg.disable_contrast:
        hp.lam = 0.0
    if cfg.disable_pd:
        hp.beta = 0.0
    if cfg.disable_sdm_loss:
        hp.alpha = 0.0
    if cfg.disable_consistency:
        hp.gamma = 0.0
    if cfg.disable_sdm:
        hp.alpha = 0.0
        train.fuse_sdm = False
    if cfg.dropout_p is not None:
        hp.dropout_p = cfg.dropout_p
    if cfg.pool_hw is not None:
        train.pool_hw = cfg.pool_hw
    return train
