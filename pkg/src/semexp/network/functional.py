"""Function-style entry points over the network modules.

Each takes the module holding the weights as its last argument, so tests and
diagnostics can call one stage in isolation.
"""

from __future__ import annotations

import torch

from .blocks import (
    AdaptiveSemanticFusion,
    FrequencyBranch,
    ResidualSpatialMambaGroup,
    SemanticCrossAttention,
    SpatialBranch,
    SpatialMambaBlock,
    VisionMambaModule,
)
from .model import SemanticFeatures


def semantic_features(seg: torch.Tensor, module: SemanticFeatures) -> tuple[torch.Tensor, list[torch.Tensor]]:
    """``F_s`` (the full-resolution conv output) and the projected per-scale pyramid."""
    return module.raw_pyramid(seg)[0], module(seg)


def asf_cross_attention(f_i, f_s, module: SemanticCrossAttention) -> torch.Tensor:
    return module(f_i, f_s)


def frequency_branch(x, module: FrequencyBranch) -> torch.Tensor:
    return module(x)


def spatial_branch(x, module: SpatialBranch) -> torch.Tensor:
    return module(x)


def asf_forward(f_i, f_s, module: AdaptiveSemanticFusion) -> torch.Tensor:
    return module(f_i, f_s)


def vmm_forward(x, module: VisionMambaModule) -> torch.Tensor:
    return module(x)


def smb_forward(x, module: SpatialMambaBlock) -> torch.Tensor:
    return module(x)


def rsmg_forward(x, module: ResidualSpatialMambaGroup) -> torch.Tensor:
    return module(x)
