import numpy as np
import pytest
import torch

torch.set_num_threads(min(4, torch.get_num_threads() or 1))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_mask(rng, shape, p=0.4):
    """Blobby random mask, guaranteed nonempty and nonfull."""
    m = rng.random(shape) < p
    if not m.any():
        m[tuple(d // 2 for d in shape)] = True
    if m.all():
        m[0, 0, 0] = False
    return m.astype(np.uint8)
