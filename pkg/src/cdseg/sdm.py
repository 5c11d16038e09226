"""Signed distance maps from binary masks, and intensity/geometry fusion.

Convention: distances are voxel-center Euclidean distances to the nearest
voxel of the opposite class, negative inside the object and positive
outside, then normalized per sign class so every map lives in [-1, 1].
"""

import numpy as np
from scipy import ndimage

# Sign carried by voxels inside the object.
INSIDE_SIGN = -1.0


def signed_distance_map(mask, spacing=(1.0, 1.0, 1.0)):
    """Normalized signed distance map of a binary mask.

    Each voxel gets the Euclidean distance (in spacing units) to the
    nearest opposite-class voxel; inside distances are divided by the
    maximum inside distance, outside distances by the maximum outside
    distance, so the result spans [-1, 1] with INSIDE_SIGN inside.

    Degenerate masks follow a fixed convention: all background -> uniform
    +1, all object -> uniform -1.
    """
    mask = np.asarray(mask)
    if mask.ndim != 3:
        raise ValueError(f"expected a 3D mask, got shape {mask.shape}")
    spacing = tuple(float(s) for s in spacing)
    if any(s <= 0 for s in spacing):
        raise ValueError(f"spacing must be positive, got {spacing}")
    inside = mask.astype(bool)
    if not inside.any():
        return np.full(mask.shape, -INSIDE_SIGN)
    if inside.all():
        return np.full(mask.shape, INSIDE_SIGN)

    # distance_transform_edt gives the distance to the nearest zero voxel,
    # so each side's transform is the distance to the opposite class.
    d_inside = ndimage.distance_transform_edt(inside, sampling=spacing)
    d_outside = ndimage.distance_transform_edt(~inside, sampling=spacing)
    out = np.where(
        inside,
        INSIDE_SIGN * d_inside / d_inside[inside].max(),
        -INSIDE_SIGN * d_outside / d_outside[~inside].max(),
    )
    return out


def boundary_aware_feature(x, q_sdm):
    """Element-wise sum of an intensity grid and a signed distance grid.

    Works on numpy arrays and torch tensors alike; no clipping.
    """
    if tuple(x.shape) != tuple(q_sdm.shape):
        raise ValueError(
            f"shape mismatch: intensity {tuple(x.shape)} vs "
            f"distance map {tuple(q_sdm.shape)}"
        )
    return x + q_sdm
