"""Semantic-aware exposure correction network."""

from .blocks import (
    AdaptiveSemanticFusion,
    FrequencyBranch,
    LayerNorm2d,
    ResidualSpatialMambaGroup,
    SemanticCrossAttention,
    SpatialAttention,
    SpatialBranch,
    SpatialMambaBlock,
    VisionMambaModule,
)
from .functional import (
    asf_cross_attention,
    asf_forward,
    frequency_branch,
    rsmg_forward,
    semantic_features,
    smb_forward,
    spatial_branch,
    vmm_forward,
)
from .model import SIMR, ExposureNet, NetworkConfig, SemanticFeatures, network_forward
from .scan import DIRECTIONS, SelectiveScan2D, selective_scan, ss2d_fold, ss2d_unfold

__all__ = [
    "AdaptiveSemanticFusion",
    "DIRECTIONS",
    "ExposureNet",
    "FrequencyBranch",
    "LayerNorm2d",
    "NetworkConfig",
    "ResidualSpatialMambaGroup",
    "SIMR",
    "SelectiveScan2D",
    "SemanticCrossAttention",
    "SemanticFeatures",
    "SpatialAttention",
    "SpatialBranch",
    "SpatialMambaBlock",
    "VisionMambaModule",
    "asf_cross_attention",
    "asf_forward",
    "frequency_branch",
    "network_forward",
    "rsmg_forward",
    "semantic_features",
    "smb_forward",
    "spatial_branch",
    "vmm_forward",
    "selective_scan",
    "ss2d_fold",
    "ss2d_unfold",
]
