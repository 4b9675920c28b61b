"""Desk-scale point-map pretraining: synthetic scenes, a LoRA point-map encoder,
contrastive + JEPA losses, and text-driven scene retrieval / view localization."""

from .errors import PomaError

__version__ = "0.1.0"
__all__ = ["PomaError", "__version__"]
