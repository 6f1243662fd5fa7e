"""Learnable hard augmentations for knowledge distillation.

Augmentors are trained adversarially to maximize teacher-student
disagreement while preserving teacher invariance, alternating with student
training on the augmented data.
"""

from . import augmentors, data, diffcore, distill, models

__all__ = ["augmentors", "data", "diffcore", "distill", "models"]
__version__ = "0.1.0"
