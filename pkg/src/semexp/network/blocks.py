"""Building blocks of the correction network: ASF fusion and the Mamba group."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..exceptions import ContractError
from .scan import SelectiveScan2D


def conv3x3(cin: int, cout: int) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, 3, padding=1)


def conv1x1(cin: int, cout: int) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, 1)


class LayerNorm2d(nn.Module):
    """Layer normalisation over the channel axis of ``(B, C, H, W)`` maps."""

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        x = x.permute(0, 2, 3, 1)
        x = F.layer_norm(x, x.shape[-1:], self.weight, self.bias, self.eps)
        return x.permute(0, 3, 1, 2)


# ---------------------------------------------------------------- ASF


class SemanticCrossAttention(nn.Module):
    """Gate image features with an attention map computed from semantic features.

    ``A = sigmoid(W_q(LN(F_s)))`` (``mode="gate"``) or a softmax attention of
    image queries over semantic keys/values (``mode="softmax"``, quadratic in
    the pixel count). Then ``F_med = Conv(W_kv(LN(F_i)) * A)`` and the output
    is ``LN(F_i + F_med)``.
    """

    def __init__(self, channels: int, mode: str = "gate"):
        super().__init__()
        if mode not in ("gate", "softmax"):
            raise ContractError(f"unknown attention mode {mode!r}")
        self.mode = mode
        self.norm_i = LayerNorm2d(channels)
        self.norm_s = LayerNorm2d(channels)
        self.w_q = conv1x1(channels, channels)
        self.w_kv = conv1x1(channels, channels)
        if mode == "softmax":
            self.w_k = conv1x1(channels, channels)
            self.w_v = conv1x1(channels, channels)
        self.proj = conv3x3(channels, channels)
        self.norm_out = LayerNorm2d(channels)

    def attention_map(self, f_i, f_s):
        if self.mode == "gate":
            return torch.sigmoid(self.w_q(self.norm_s(f_s)))
        b, c, h, w = f_i.shape
        q = self.w_q(self.norm_i(f_i)).flatten(2)
        s = self.norm_s(f_s)
        k = self.w_k(s).flatten(2)
        v = self.w_v(s).flatten(2)
        attn = torch.softmax(q.transpose(1, 2) @ k / c**0.5, dim=-1)  # (b, hw, hw)
        return torch.sigmoid((v @ attn.transpose(1, 2)).reshape(b, c, h, w))

    def forward(self, f_i, f_s):
        if f_i.shape != f_s.shape:
            raise ContractError(f"image/semantic feature shapes differ: {tuple(f_i.shape)} vs {tuple(f_s.shape)}")
        f_med = self.proj(self.w_kv(self.norm_i(f_i)) * self.attention_map(f_i, f_s))
        return self.norm_out(f_i + f_med)


class FrequencyBranch(nn.Module):
    """FFT, refine amplitude and phase separately, inverse FFT, conv, residual."""

    def __init__(self, channels: int):
        super().__init__()
        self.amp = nn.Sequential(conv1x1(channels, channels), nn.GELU(), conv1x1(channels, channels))
        self.pha = nn.Sequential(conv1x1(channels, channels), nn.GELU(), conv1x1(channels, channels))
        self.out = conv3x3(channels, channels)

    def forward(self, x):
        spec = torch.fft.fft2(x, norm="backward")
        # self-conjugate bins of a real map are real up to rounding noise, which would
        # flip their phase between +pi and -pi; snap that noise to +0
        tol = 16 * torch.finfo(x.dtype).eps * spec.abs().amax(dim=(-2, -1), keepdim=True)
        imag = torch.where(spec.imag.abs() <= tol, torch.zeros_like(spec.imag), spec.imag)
        amp = self.amp(spec.abs())
        pha = self.pha(torch.atan2(imag, spec.real))
        # refined amplitudes can be negative, outside torch.polar's domain; build the spectrum directly
        y = torch.fft.ifft2(torch.complex(amp * torch.cos(pha), amp * torch.sin(pha)), s=x.shape[-2:]).real
        return x + self.out(y)


class SpatialBranch(nn.Module):
    """Three 3x3 convolutions with GELU in between (7x7 receptive field)."""

    def __init__(self, channels: int):
        super().__init__()
        self.body = nn.Sequential(
            conv3x3(channels, channels), nn.GELU(), conv3x3(channels, channels), nn.GELU(), conv3x3(channels, channels)
        )

    def forward(self, x):
        return self.body(x)


class AdaptiveSemanticFusion(nn.Module):
    """``E_a = LN(E_l + FP(E_l) + SP(E_l))`` with ``E_l`` from the semantic cross-attention."""

    def __init__(self, channels: int, attention_mode: str = "gate"):
        super().__init__()
        self.cross = SemanticCrossAttention(channels, attention_mode)
        self.freq = FrequencyBranch(channels)
        self.spatial = SpatialBranch(channels)
        self.norm = LayerNorm2d(channels)

    def forward(self, f_i, f_s):
        e_l = self.cross(f_i, f_s)
        return self.norm(e_l + self.freq(e_l) + self.spatial(e_l))


# ------------------------------------------------------------ Mamba group


class SpatialAttention(nn.Module):
    """``x * sigmoid(conv7x7([mean_c(x); max_c(x)]))``."""

    def __init__(self, kernel_size: int = 7):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2)

    def gate(self, x):
        pooled = torch.cat([x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1)
        return torch.sigmoid(self.conv(pooled))

    def forward(self, x):
        return x * self.gate(x)


class VisionMambaModule(nn.Module):
    """Four-direction selective scan, summed, then a 1x1 channel mix."""

    def __init__(self, channels: int, d_state: int = 16, chunk_size: int = 256):
        super().__init__()
        self.ss2d = SelectiveScan2D(channels, d_state, chunk_size=chunk_size)
        self.proj = conv1x1(channels, channels)

    def forward(self, x):
        return self.proj(self.ss2d(x))


class SpatialMambaBlock(nn.Module):
    """``F + D1 + D2`` with ``D1 = Linear(Conv(VMM(LN F)))`` and ``D2 = Conv(SA(Conv(LN F)))``."""

    def __init__(self, channels: int, d_state: int = 16, spatial_attention: bool = True, chunk_size: int = 256):
        super().__init__()
        self.norm1 = LayerNorm2d(channels)
        self.vmm = VisionMambaModule(channels, d_state, chunk_size)
        self.conv1 = conv3x3(channels, channels)
        self.linear = conv1x1(channels, channels)
        self.norm2 = LayerNorm2d(channels)
        self.conv_in = conv3x3(channels, channels)
        self.attn = SpatialAttention() if spatial_attention else nn.Identity()
        self.conv_out = conv3x3(channels, channels)

    def upper(self, x):
        return self.linear(self.conv1(self.vmm(self.norm1(x))))

    def lower(self, x):
        return self.conv_out(self.attn(self.conv_in(self.norm2(x))))

    def forward(self, x):
        return x + self.upper(x) + self.lower(x)


class ResidualSpatialMambaGroup(nn.Module):
    """Stacked SMBs, a 3x3 tail conv and a group-level skip."""

    def __init__(self, channels: int, num_blocks: int = 4, d_state: int = 16,
                 spatial_attention: bool = True, chunk_size: int = 256):
        super().__init__()
        if num_blocks < 1:
            raise ContractError("an RSMG needs at least one SMB")
        self.blocks = nn.Sequential(
            *[SpatialMambaBlock(channels, d_state, spatial_attention, chunk_size) for _ in range(num_blocks)]
        )
        self.tail = conv3x3(channels, channels)

    def forward(self, x):
        return x + self.tail(self.blocks(x))
