"""From-scratch CNN, ViT, and hybrid CNN-ViT pneumonia classifiers.

Everything trains on a small reverse-mode autodiff engine (``tensor``),
with layers, model builders, a deterministic training loop, evaluation
metrics, and theoretical complexity / power-law scaling analysis. The
``pneumonet`` CLI wires the pieces into reproducible experiments.
"""

__version__ = "0.1.0"

from .tensor import Tensor  # noqa: F401
