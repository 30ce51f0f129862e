"""The multi-scale semantic-aware exposure correction network."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..exceptions import ContractError
from .blocks import AdaptiveSemanticFusion, LayerNorm2d, ResidualSpatialMambaGroup, conv1x1, conv3x3


@dataclass(frozen=True)
class NetworkConfig:
    num_scales: int = 3
    base_channels: int = 32
    channel_mult: int = 2
    smb_per_rsmg: int = 4
    ssm_state_dim: int = 16
    semantic_channels: int = 4
    attention_mode: str = "gate"
    disable_asf: bool = False
    disable_spatial_attn: bool = False
    scan_chunk: int = 256

    def __post_init__(self):
        for name in ("num_scales", "base_channels", "channel_mult", "smb_per_rsmg",
                     "ssm_state_dim", "semantic_channels", "scan_chunk"):
            if getattr(self, name) < 1:
                raise ContractError(f"NetworkConfig.{name} must be >= 1")
        if self.attention_mode not in ("gate", "softmax"):
            raise ContractError(f"unknown attention_mode {self.attention_mode!r}")

    def channels(self, scale: int) -> int:
        return self.base_channels * self.channel_mult**scale

    @property
    def size_multiple(self) -> int:
        return 2 ** (self.num_scales - 1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown NetworkConfig keys: {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class SemanticFeatures(nn.Module):
    """Segmentation map -> ``F_s`` (one 3x3 conv) -> per-scale pyramid.

    Level ``m`` is the 2x average pool of level ``m-1``; each level then gets
    its own 1x1 projection to that scale's width.
    """

    def __init__(self, cfg: NetworkConfig, project: bool = True):
        super().__init__()
        self.num_scales = cfg.num_scales
        self.conv = conv3x3(cfg.semantic_channels, cfg.base_channels)
        nn.init.zeros_(self.conv.bias)
        self.proj = (
            nn.ModuleList(conv1x1(cfg.base_channels, cfg.channels(m)) for m in range(cfg.num_scales))
            if project
            else None
        )

    def raw_pyramid(self, seg: torch.Tensor) -> list[torch.Tensor]:
        side = 2 ** (self.num_scales - 1)
        if seg.shape[-2] % side or seg.shape[-1] % side:
            raise ContractError(f"segmentation size {tuple(seg.shape[-2:])} not divisible by {side}")
        levels = [self.conv(seg)]
        for _ in range(1, self.num_scales):
            levels.append(F.avg_pool2d(levels[-1], 2))
        return levels

    def forward(self, seg: torch.Tensor) -> list[torch.Tensor]:
        levels = self.raw_pyramid(seg)
        if self.proj is None:
            return levels
        return [p(f) for p, f in zip(self.proj, levels)]


class SIMR(nn.Module):
    """One scale: semantic fusion (or its LN passthrough ablation) then an RSMG."""

    def __init__(self, channels: int, cfg: NetworkConfig):
        super().__init__()
        if cfg.disable_asf:
            self.asf = None
            self.passthrough = LayerNorm2d(channels)
        else:
            self.asf = AdaptiveSemanticFusion(channels, cfg.attention_mode)
        self.rsmg = ResidualSpatialMambaGroup(
            channels, cfg.smb_per_rsmg, cfg.ssm_state_dim, not cfg.disable_spatial_attn, cfg.scan_chunk
        )

    def forward(self, f_i, f_s):
        e = self.passthrough(f_i) if self.asf is None else self.asf(f_i, f_s)
        return self.rsmg(e)


class ExposureNet(nn.Module):
    """U-shaped stack of SIMR blocks with a residual, clamped output head.

    ``forward(image, seg)`` returns ``clamp(image + residual, 0, 1)``. The
    head is zero-initialised, so a fresh network is the identity map.
    """

    def __init__(self, cfg: NetworkConfig | None = None):
        super().__init__()
        cfg = cfg or NetworkConfig()
        self.cfg = cfg
        m = cfg.num_scales
        self.semantic = SemanticFeatures(cfg, project=not cfg.disable_asf)
        self.shallow = conv3x3(3, cfg.base_channels)
        self.encoders = nn.ModuleList(SIMR(cfg.channels(i), cfg) for i in range(m))
        self.down = nn.ModuleList(
            nn.Conv2d(cfg.channels(i), cfg.channels(i + 1), 4, stride=2, padding=1) for i in range(m - 1)
        )
        self.up = nn.ModuleList(
            nn.ConvTranspose2d(cfg.channels(i + 1), cfg.channels(i), 2, stride=2) for i in range(m - 1)
        )
        self.fuse = nn.ModuleList(conv1x1(2 * cfg.channels(i), cfg.channels(i)) for i in range(m - 1))
        self.decoders = nn.ModuleList(SIMR(cfg.channels(i), cfg) for i in range(m - 1))
        self.head = conv3x3(cfg.base_channels, 3)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def _pad(self, x):
        mult = self.cfg.size_multiple
        h, w = x.shape[-2:]
        ph, pw = (-h) % mult, (-w) % mult
        if ph == 0 and pw == 0:
            return x
        if ph >= h or pw >= w:
            raise ContractError(f"input {h}x{w} too small to reflect-pad to a multiple of {mult}")
        return F.pad(x, (0, pw, 0, ph), mode="reflect")

    def residual(self, image: torch.Tensor, seg: torch.Tensor) -> torch.Tensor:
        if image.ndim != 4 or image.shape[1] != 3:
            raise ContractError(f"expected (B, 3, H, W) image, got {tuple(image.shape)}")
        if seg.shape[0] != image.shape[0] or seg.shape[-2:] != image.shape[-2:]:
            raise ContractError("segmentation map is not aligned with the image")
        if seg.shape[1] != self.cfg.semantic_channels:
            raise ContractError(f"expected {self.cfg.semantic_channels} segment channels, got {seg.shape[1]}")
        h, w = image.shape[-2:]
        x = self._pad(image)
        s = self._pad(seg.to(image.dtype))
        sem = self.semantic(s)
        feats = self.shallow(x)
        skips = []
        for i, enc in enumerate(self.encoders):
            feats = enc(feats, sem[i])
            if i < len(self.down):
                skips.append(feats)
                feats = self.down[i](feats)
        for i in reversed(range(len(self.decoders))):
            feats = self.fuse[i](torch.cat([self.up[i](feats), skips[i]], dim=1))
            feats = self.decoders[i](feats, sem[i])
        return self.head(feats)[..., :h, :w]

    def forward(self, image: torch.Tensor, seg: torch.Tensor) -> torch.Tensor:
        return (image + self.residual(image, seg)).clamp(0.0, 1.0)

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def network_forward(image: torch.Tensor, seg: torch.Tensor, cfg: NetworkConfig, model: ExposureNet | None = None):
    """Functional entry point; builds a fresh (identity-at-init) model when none is given."""
    model = model or ExposureNet(cfg)
    if model.cfg != cfg:
        raise ContractError("model was built for a different NetworkConfig")
    return model(image, seg)
