"""Self-distillation pipeline for dense pixel prediction on synthetic scenes."""

__version__ = "0.1.0"
