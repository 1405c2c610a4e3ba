"""Retrieval-aware hybrid distillation at desk scale."""

import torch

torch.set_default_dtype(torch.float64)

__version__ = "0.1.0"
