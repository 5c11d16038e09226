"""Semi-supervised volumetric segmentation on synthetic phantoms.

A mean-teacher pair of dual-head 3D networks (sigmoid mask + tanh signed
distance map) is trained on a few labeled volumes plus many unlabeled ones,
with a boundary-aware slice-contrast loss, a pair-wise feature distillation
loss, and a probability-consistency loss on the unlabeled data.
"""

__version__ = "0.1.0"
