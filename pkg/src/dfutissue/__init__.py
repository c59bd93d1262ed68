"""Multi-class wound tissue segmentation: hybrid MiT/CNN model, pseudo-label training, losses and metrics."""

__version__ = "0.1.0"
