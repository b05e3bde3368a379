"""Multi-modality to single-modality knowledge distillation for a toy 3D detector."""

__version__ = "0.1.0"
