"""Desk-scale RET-CLIP: tripartite image/report contrastive pre-training.

Left and right fundus images share one ViT-style encoder; their features are
fused into a patient-level feature, and the report's class-token embedding is
decoupled into left, right and patient text features. Training sums a
symmetric InfoNCE loss at each of the three levels.
"""

from .model import (
    BatchFeatures,
    LossBreakdown,
    LossToggles,
    RetClipConfig,
    RetClipModel,
    forward_batch,
    init_params,
    tripartite_loss,
)

__all__ = [
    "BatchFeatures",
    "LossBreakdown",
    "LossToggles",
    "RetClipConfig",
    "RetClipModel",
    "forward_batch",
    "init_params",
    "tripartite_loss",
]

__version__ = "0.1.0"
