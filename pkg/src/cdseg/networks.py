"""Dual-branch 3D segmentation networks, slice projection head, and EMA.

The backbone is a small V-Net-style encoder/decoder with two single-channel
heads sharing the decoder trunk: a sigmoid head for the probability map and
a tanh head for the signed distance map.  The projection head embeds each
2D slice of a boundary-aware feature into a d_h-vector; its only source of
randomness is an explicit dropout mask seed.
"""

import copy
from dataclasses import asdict, dataclass

import torch
from torch import nn

CHECKPOINT_VERSION = 1

# Alpha dropout keeps zero mean / unit variance for standardized inputs by
# replacing dropped entries with this saturation value and rescaling.
_ALPHA_PRIME = -1.7580993408473766


@dataclass(frozen=True)
class ArchSpec:
    """Shape of one network; EMA partners must agree on all fields."""

    in_channels: int = 1
    base_width: int = 8
    levels: int = 3              # stride-2 stages; total downsampling 2**levels
    pool_hw: int = 128
    d_h: int = 128
    mlp_hidden: tuple = (512, 256)

    @property
    def downsample(self):
        return 2 ** self.levels

    @property
    def encoder_channels(self):
        return self.base_width * 2 ** self.levels


@dataclass
class DualOutput:
    prob: torch.Tensor  # (H, W, D) in (0, 1)
    sdm: torch.Tensor   # (H, W, D) in (-1, 1)


@dataclass(frozen=True)
class DropoutMask:
    seed: int
    p: float = 0.1


def _norm(channels):
    return nn.GroupNorm(min(4, channels), channels)


class _ConvBlock(nn.Sequential):
    def __init__(self, cin, cout):
        super().__init__(
            nn.Conv3d(cin, cout, 3, padding=1),
            _norm(cout),
            nn.LeakyReLU(0.01, inplace=True),
        )


class _Down(nn.Sequential):
    def __init__(self, cin, cout):
        super().__init__(
            nn.Conv3d(cin, cout, 2, stride=2),
            _norm(cout),
            nn.LeakyReLU(0.01, inplace=True),
            _ConvBlock(cout, cout),
        )


class _Up(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.up = nn.Sequential(
            nn.ConvTranspose3d(cin, cout, 2, stride=2),
            _norm(cout),
            nn.LeakyReLU(0.01, inplace=True),
        )
        self.merge = _ConvBlock(2 * cout, cout)

    def forward(self, x, skip):
        return self.merge(torch.cat([self.up(x), skip], dim=1))


class DualBranchNet(nn.Module):
    """Encoder/decoder over (B, 1, H, W, D) volumes with two heads."""

    def __init__(self, arch: ArchSpec):
        super().__init__()
        self.arch = arch
        widths = [arch.base_width * 2 ** i for i in range(arch.levels + 1)]
        self.stem = _ConvBlock(arch.in_channels, widths[0])
        self.downs = nn.ModuleList(
            _Down(widths[i], widths[i + 1]) for i in range(arch.levels)
        )
        self.ups = nn.ModuleList(
            _Up(widths[i + 1], widths[i]) for i in reversed(range(arch.levels))
        )
        self.prob_head = nn.Conv3d(widths[0], 1, 1)
        self.sdm_head = nn.Conv3d(widths[0], 1, 1)

    def forward(self, x):
        factor = self.arch.downsample
        for axis, dim in enumerate(x.shape[2:]):
            if dim % factor:
                raise ValueError(
                    f"input dim {axis} is {dim}, not divisible by the "
                    f"network downsampling factor {factor}"
                )
        h = self.stem(x)
        skips = []
        for down in self.downs:
            skips.append(h)
            h = down(h)
        hidden = h
        for up, skip in zip(self.ups, reversed(skips)):
            h = up(h, skip)
        prob = torch.sigmoid(self.prob_head(h))
        sdm = torch.tanh(self.sdm_head(h))
        return prob, sdm, hidden


def alpha_dropout(x, p, seed):
    """Self-normalizing dropout, a pure function of (seed, p, shape).

    Identity at p=0; preserves mean and variance of standardized inputs.
    """
    if not 0 <= p < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if p == 0:
        return x
    gen = torch.Generator().manual_seed(int(seed))
    keep = (torch.rand(x.shape, generator=gen) >= p).to(x.dtype)
    q = 1.0 - p
    a = (q + _ALPHA_PRIME ** 2 * q * p) ** -0.5
    b = -a * p * _ALPHA_PRIME
    return a * (x * keep + _ALPHA_PRIME * (1.0 - keep)) + b


class ProjectionHead(nn.Module):
    """Per-slice embedding: alpha dropout -> per-slice average pooling ->
    3-layer MLP, one d_h row per slice along the depth axis."""

    def __init__(self, arch: ArchSpec):
        super().__init__()
        self.arch = arch
        self.pool = nn.AdaptiveAvgPool2d((arch.pool_hw, arch.pool_hw))
        h1, h2 = arch.mlp_hidden
        self.mlp = nn.Sequential(
            nn.Linear(arch.pool_hw ** 2, h1),
            nn.ReLU(inplace=True),
            nn.Linear(h1, h2),
            nn.ReLU(inplace=True),
            nn.Linear(h2, arch.d_h),
        )

    def forward(self, feature, mask: DropoutMask):
        if feature.ndim != 3 or feature.numel() == 0:
            raise ValueError(f"expected a nonempty 3D feature, got shape {tuple(feature.shape)}")
        x = alpha_dropout(feature, mask.p, mask.seed)
        slices = x.permute(2, 0, 1).unsqueeze(1)       # (D, 1, H, W)
        pooled = self.pool(slices).flatten(start_dim=1)  # (D, pool_hw^2)
        return self.mlp(pooled)                         # (D, d_h)


class SegmentationModel(nn.Module):
    """A backbone and its projection head, treated as one parameter set."""

    def __init__(self, arch: ArchSpec):
        super().__init__()
        self.arch = arch
        self.backbone = DualBranchNet(arch)
        self.proj = ProjectionHead(arch)


def forward_volume(model, voxels):
    """Single-volume forward pass.

    Returns the DualOutput (grids matching the input shape) and the hidden
    pattern: the bottleneck feature map flattened to (H'W'D', D_e) rows.
    """
    backbone = model.backbone if isinstance(model, SegmentationModel) else model
    dtype = next(backbone.parameters()).dtype
    x = torch.as_tensor(voxels, dtype=dtype)
    if x.ndim != 3:
        raise ValueError(f"expected a 3D volume, got shape {tuple(x.shape)}")
    prob, sdm, hidden = backbone(x.unsqueeze(0).unsqueeze(0))
    return DualOutput(prob[0, 0], sdm[0, 0]), flatten_hidden(hidden[0])


def flatten_hidden(hidden):
    """(C, H', W', D') feature map -> (H'W'D', C) rows."""
    c = hidden.shape[0]
    return hidden.permute(1, 2, 3, 0).reshape(-1, c)


def project(feature, mask: DropoutMask, head: ProjectionHead):
    """Slice-embedding matrix of a boundary-aware feature: (D, d_h)."""
    return head(feature, mask)


def ema_update(teacher, student, decay):
    """teacher <- decay * teacher + (1 - decay) * student, entrywise.

    Accumulates in float64 regardless of the parameter dtype.  The student
    is untouched; the updated teacher is returned.
    """
    if not 0.0 <= decay <= 1.0:
        raise ValueError(f"decay must be in [0, 1], got {decay}")
    t_state = teacher.state_dict()
    s_state = student.state_dict()
    if list(t_state.keys()) != list(s_state.keys()):
        extra = set(t_state) ^ set(s_state)
        raise ValueError(f"parameter sets differ, first mismatch: {sorted(extra)[0]}")
    with torch.no_grad():
        for name, t in t_state.items():
            s = s_state[name]
            if t.shape != s.shape:
                raise ValueError(
                    f"tensor {name!r} has shape {tuple(t.shape)} in the teacher "
                    f"but {tuple(s.shape)} in the student"
                )
            mixed = decay * t.double() + (1.0 - decay) * s.double()
            t.copy_(mixed.to(t.dtype))
    return teacher


def make_model_pair(arch, seed, dtype=torch.float32):
    """Student and its EMA teacher, identically initialized; the teacher
    never receives gradients."""
    torch.manual_seed(int(seed))
    student = SegmentationModel(arch).to(dtype)
    teacher = copy.deepcopy(student)
    teacher.requires_grad_(False)
    return student, teacher


# ---------------------------------------------------------------------------
# Checkpoints: one archive holding both parameter sets, optimizer state,
# the iteration clock, and the architecture descriptor.
# ---------------------------------------------------------------------------


def save_checkpoint(path, student, teacher, optimizer, t, extra=None):
    torch.save(
        {
            "version": CHECKPOINT_VERSION,
            "arch": asdict(student.arch),
            "dtype": str(next(student.parameters()).dtype).removeprefix("torch."),
            "student": student.state_dict(),
            "teacher": teacher.state_dict(),
            "optimizer": optimizer.state_dict(),
            "t": int(t),
            "extra": extra or {},
        },
        path,
    )


def load_checkpoint(path):
    data = torch.load(path, map_location="cpu", weights_only=True)
    if data.get("version") != CHECKPOINT_VERSION:
        raise ValueError(
            f"checkpoint version {data.get('version')} != {CHECKPOINT_VERSION}"
        )
    return data


def restore_model_pair(data):
    """Rebuilds (student, teacher) from a loaded checkpoint dict."""
    arch_dict = dict(data["arch"])
    arch_dict["mlp_hidden"] = tuple(arch_dict["mlp_hidden"])
    arch = ArchSpec(**arch_dict)
    dtype = getattr(torch, data["dtype"])
    student = SegmentationModel(arch).to(dtype)
    teacher = SegmentationModel(arch).to(dtype)
    student.load_state_dict(data["student"])
    teacher.load_state_dict(data["teacher"])
    teacher.requires_grad_(False)
    return student, teacher


def check_arch(model, data):
    stored = dict(data["arch"])
    stored["mlp_hidden"] = tuple(stored["mlp_hidden"])
    if stored != asdict(model.arch):
        raise ValueError(
            f"architecture mismatch: checkpoint {stored} vs model {asdict(model.arch)}"
        )
