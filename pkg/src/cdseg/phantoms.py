"""Synthetic 3D phantoms: generation, two-view perturbation, and splits.

Every operation here is a pure function of its inputs and a seed, so
datasets and augmentations replay bit-identically.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import gridio
from . import sdm as sdm_mod


@dataclass
class Volume:
    voxels: np.ndarray  # float32 grid, H x W x D
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    @property
    def shape(self):
        return self.voxels.shape


@dataclass
class AnnotatedCase:
    volume: Volume
    mask: np.ndarray  # uint8 {0,1}, same shape
    sdm: np.ndarray   # float32 in [-1,1], same shape
    case_id: int = -1


@dataclass
class DatasetSplit:
    labeled: list
    unlabeled: list  # Volumes only; annotations stripped
    test: list
    seed: int
    labeled_ids: list = field(default_factory=list)
    unlabeled_ids: list = field(default_factory=list)
    test_ids: list = field(default_factory=list)


@dataclass
class ObjectSpec:
    """Ranges for the random ellipsoids making up a phantom."""

    n_objects: tuple[int, int] = (1, 3)
    radius: tuple[float, float] = (4.0, 9.0)
    intensity: float = 1.0     # additive level inside objects, pre-normalization
    noise_sigma: float = 0.3   # additive Gaussian noise, pre-normalization


@dataclass
class CropRecord:
    """The shared geometric transform applied to both views."""

    offsets: tuple[int, int, int]
    crop_shape: tuple[int, int, int]
    flips: tuple[bool, bool, bool]
    seed: int


def normalize(volume):
    """Zero-mean unit-variance copy; rejects constant volumes."""
    v = volume.voxels.astype(np.float64)
    std = v.std()
    if std == 0:
        raise ValueError("cannot normalize a constant volume")
    out = (v - v.mean()) / std
    return Volume(out.astype(np.float32), volume.spacing)


def generate_phantom(shape, seed, spec=None, spacing=(1.0, 1.0, 1.0), case_id=-1):
    """One phantom: a union of random ellipsoids over a noisy background.

    Deterministic for fixed (shape, seed, spec).  The mask is the ellipsoid
    union, the intensity is object contrast plus Gaussian noise, normalized
    to zero mean / unit variance, and the distance map is computed from the
    mask.
    """
    spec = spec or ObjectSpec()
    shape = tuple(int(n) for n in shape)
    r_lo, r_hi = spec.radius
    for axis, dim in enumerate(shape):
        if dim < 8:
            raise ValueError(f"shape[{axis}]={dim} is below the minimum grid size 8")
        if dim < 2 * r_lo + 2:
            raise ValueError(
                f"shape[{axis}]={dim} cannot contain an ellipsoid of radius {r_lo}"
            )

    rng = np.random.default_rng(seed)
    n_objects = int(rng.integers(spec.n_objects[0], spec.n_objects[1] + 1))
    coords = np.indices(shape, dtype=np.float64)
    mask = np.zeros(shape, dtype=bool)
    for _ in range(n_objects):
        radii = []
        centers = []
        for dim in shape:
            r = rng.uniform(r_lo, min(r_hi, (dim - 2) / 2))
            radii.append(r)
            centers.append(rng.uniform(r, dim - 1 - r))
        dist2 = sum(
            ((coords[a] - centers[a]) / radii[a]) ** 2 for a in range(3)
        )
        mask |= dist2 <= 1.0

    intensity = spec.intensity * mask + rng.normal(0.0, spec.noise_sigma, shape)
    volume = normalize(Volume(intensity.astype(np.float32), tuple(spacing)))
    distance = sdm_mod.signed_distance_map(mask, spacing).astype(np.float32)
    return AnnotatedCase(volume, mask.astype(np.uint8), distance, case_id)


def generate_dataset(n_cases, shape, seed, spec=None, spacing=(1.0, 1.0, 1.0)):
    """n_cases phantoms with per-case seeds derived from (seed, index)."""
    return [
        generate_phantom(
            shape,
            np.random.SeedSequence([seed, idx]).generate_state(1)[0],
            spec,
            spacing,
            case_id=idx,
        )
        for idx in range(n_cases)
    ]


def _apply_geometry(voxels, offsets, crop_shape, flips):
    sl = tuple(slice(o, o + c) for o, c in zip(offsets, crop_shape))
    out = voxels[sl]
    for axis, flip in enumerate(flips):
        if flip:
            out = np.flip(out, axis=axis)
    return np.ascontiguousarray(out)


def _draw_geometry(shape, crop_shape, rng):
    offsets = tuple(
        int(rng.integers(0, dim - c + 1)) for dim, c in zip(shape, crop_shape)
    )
    flips = tuple(bool(rng.integers(0, 2)) for _ in range(3))
    return offsets, flips


def two_view(volume, seed, noise_scale, crop_shape=None):
    """Two noisy views of one volume sharing a single random crop/flip.

    Both views get the same geometry so they stay voxel-aligned; they then
    receive independent additive Gaussian noise fields.  With
    noise_scale=0 the views are bit-identical.
    """
    if noise_scale < 0:
        raise ValueError(f"noise_scale must be >= 0, got {noise_scale}")
    shape = volume.voxels.shape
    crop_shape = tuple(int(c) for c in (crop_shape or shape))
    if any(c > dim for c, dim in zip(crop_shape, shape)):
        raise ValueError(f"crop {crop_shape} larger than volume {shape}")

    rng = np.random.default_rng(seed)
    offsets, flips = _draw_geometry(shape, crop_shape, rng)
    base = _apply_geometry(volume.voxels, offsets, crop_shape, flips)
    record = CropRecord(offsets, crop_shape, flips, seed)
    if noise_scale == 0:
        return (
            Volume(base.copy(), volume.spacing),
            Volume(base.copy(), volume.spacing),
            record,
        )
    eta_s = rng.normal(0.0, noise_scale, crop_shape)
    eta_t = rng.normal(0.0, noise_scale, crop_shape)
    view_s = (base + eta_s).astype(np.float32)
    view_t = (base + eta_t).astype(np.float32)
    return Volume(view_s, volume.spacing), Volume(view_t, volume.spacing), record


def augment_case(case, seed, crop_shape=None):
    """Random crop/flip of a labeled case; the distance map is recomputed
    from the transformed mask so it stays a valid target."""
    shape = case.volume.voxels.shape
    crop_shape = tuple(int(c) for c in (crop_shape or shape))
    if any(c > dim for c, dim in zip(crop_shape, shape)):
        raise ValueError(f"crop {crop_shape} larger than volume {shape}")
    rng = np.random.default_rng(seed)
    offsets, flips = _draw_geometry(shape, crop_shape, rng)
    voxels = _apply_geometry(case.volume.voxels, offsets, crop_shape, flips)
    mask = _apply_geometry(case.mask, offsets, crop_shape, flips)
    distance = sdm_mod.signed_distance_map(mask, case.volume.spacing)
    return AnnotatedCase(
        Volume(voxels, case.volume.spacing),
        mask,
        distance.astype(np.float32),
        case.case_id,
    )


def make_split(cases, n_labeled, n_unlabeled, n_test, seed):
    """Disjoint seed-deterministic partition; unlabeled cases are stripped
    down to bare volumes."""
    needed = n_labeled + n_unlabeled + n_test
    if needed > len(cases):
        raise ValueError(
            f"split needs {needed} cases "
            f"({n_labeled} labeled + {n_unlabeled} unlabeled + {n_test} test) "
            f"but only {len(cases)} are available"
        )
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(cases))
    lab = [int(i) for i in order[:n_labeled]]
    unl = [int(i) for i in order[n_labeled:n_labeled + n_unlabeled]]
    tst = [int(i) for i in order[n_labeled + n_unlabeled:needed]]
    return DatasetSplit(
        labeled=[cases[i] for i in lab],
        unlabeled=[cases[i].volume for i in unl],
        test=[cases[i] for i in tst],
        seed=seed,
        labeled_ids=[cases[i].case_id for i in lab],
        unlabeled_ids=[cases[i].case_id for i in unl],
        test_ids=[cases[i].case_id for i in tst],
    )


# ---------------------------------------------------------------------------
# Dataset directories: per-case grid files plus a JSON manifest.
# ---------------------------------------------------------------------------

MANIFEST_NAME = "manifest.json"


def _case_paths(group, case_id):
    stem = f"{group}/case_{case_id:04d}"
    return {
        "volume": f"{stem}.volume.grid",
        "mask": f"{stem}.mask.grid",
        "sdm": f"{stem}.sdm.grid",
    }


def save_split(split, dirpath, generator_meta=None):
    """Writes one directory per group plus a manifest with shapes, spacing,
    seeds, membership, and per-file checksums."""
    root = Path(dirpath)
    files = {}

    def _write(rel, array, spacing):
        path = root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        gridio.write_grid(path, array, spacing)
        files[rel] = gridio.sha256_file(path)

    for group, cases in (("labeled", split.labeled), ("test", split.test)):
        for case in cases:
            paths = _case_paths(group, case.case_id)
            _write(paths["volume"], case.volume.voxels, case.volume.spacing)
            _write(paths["mask"], case.mask, case.volume.spacing)
            _write(paths["sdm"], case.sdm, case.volume.spacing)
    for vol, case_id in zip(split.unlabeled, split.unlabeled_ids):
        rel = _case_paths("unlabeled", case_id)["volume"]
        _write(rel, vol.voxels, vol.spacing)

    if split.labeled or split.test:
        any_vol = (split.labeled + split.test)[0].volume
    else:
        any_vol = split.unlabeled[0]
    manifest = {
        "format": 1,
        "seed": split.seed,
        "shape": list(any_vol.voxels.shape),
        "spacing": list(any_vol.spacing),
        "sizes": {
            "labeled": len(split.labeled),
            "unlabeled": len(split.unlabeled),
            "test": len(split.test),
        },
        "membership": {
            "labeled": list(split.labeled_ids),
            "unlabeled": list(split.unlabeled_ids),
            "test": list(split.test_ids),
        },
        "generator": generator_meta or {},
        "files": files,
    }
    (root / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_manifest(dirpath):
    return json.loads((Path(dirpath) / MANIFEST_NAME).read_text())


def verify_checksums(dirpath):
    """Returns the list of files whose checksum disagrees with the manifest."""
    root = Path(dirpath)
    manifest = load_manifest(root)
    bad = []
    for rel, digest in manifest["files"].items():
        path = root / rel
        if not path.exists() or gridio.sha256_file(path) != digest:
            bad.append(rel)
    return bad


def load_split(dirpath):
    root = Path(dirpath)
    manifest = load_manifest(root)
    membership = manifest["membership"]

    def _load_case(group, case_id):
        paths = _case_paths(group, case_id)
        voxels, spacing = gridio.read_grid(root / paths["volume"])
        mask, _ = gridio.read_grid(root / paths["mask"])
        distance, _ = gridio.read_grid(root / paths["sdm"])
        return AnnotatedCase(Volume(voxels, spacing), mask, distance, case_id)

    labeled = [_load_case("labeled", i) for i in membership["labeled"]]
    test = [_load_case("test", i) for i in membership["test"]]
    unlabeled = []
    for case_id in membership["unlabeled"]:
        rel = _case_paths("unlabeled", case_id)["volume"]
        voxels, spacing = gridio.read_grid(root / rel)
        unlabeled.append(Volume(voxels, spacing))
    return DatasetSplit(
        labeled=labeled,
        unlabeled=unlabeled,
        test=test,
        seed=manifest["seed"],
        labeled_ids=list(membership["labeled"]),
        unlabeled_ids=list(membership["unlabeled"]),
        test_ids=list(membership["test"]),
    )
