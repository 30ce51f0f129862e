"""Unsupervised training objective.

``total = l1 * MSE + l2 * COS + l3 * (b1 * SFC + b2 * IPA)``; every term can
be switched off independently for ablations.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

from .exceptions import ContractError


@dataclass(frozen=True)
class LossWeights:
    beta1: float = 1.0
    beta2: float = 1.0
    lambda1: float = 1.0
    lambda2: float = 0.5
    lambda3: float = 0.1
    epsilon: float = 1e-8
    use_spc: bool = True
    use_sfc: bool = True
    use_ipa: bool = True
    use_cos: bool = True
    gram_mode: str = "l1"

    def __post_init__(self):
        for name in ("beta1", "beta2", "lambda1", "lambda2", "lambda3"):
            if getattr(self, name) < 0:
                raise ContractError(f"loss weight {name} must be >= 0")
        if self.epsilon <= 0:
            raise ContractError("epsilon must be > 0")
        if self.gram_mode not in ("l1", "frobenius"):
            raise ContractError(f"unknown gram_mode {self.gram_mode!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SemanticFeatureTriple:
    """Semantic features of the output, pseudo-GT and input, each ``(B, C, H, W)``."""

    output: torch.Tensor
    pseudo_gt: torch.Tensor
    input: torch.Tensor

    def __post_init__(self):
        shapes = {tuple(t.shape) for t in (self.output, self.pseudo_gt, self.input)}
        if len(shapes) != 1:
            raise ContractError(f"semantic feature shapes differ: {shapes}")


@dataclass
class LossBreakdown:
    mse: float
    cos: float
    sfc: float
    ipa: float
    spc: float
    total: float

    def to_dict(self) -> dict:
        return asdict(self)


def gram(feat: torch.Tensor) -> torch.Tensor:
    """Gram matrix ``X X^T / (H W)`` of a ``(C, H, W)`` map (batched for ``(B, C, H, W)``)."""
    x = feat.flatten(-2)
    return x @ x.transpose(-1, -2) / x.shape[-1]


def _channel_grams(h: torch.Tensor) -> torch.Tensor:
    # each channel treated as its own 1-channel map: (B, C, H, W) -> (B, C, 1, 1)
    return gram(h.unsqueeze(2))


def _as_batched(t: torch.Tensor) -> torch.Tensor:
    return t[None] if t.ndim == 3 else t


def sfc_loss(t: SemanticFeatureTriple, eps: float = 1e-8, gram_mode: str = "l1") -> torch.Tensor:
    """Ratio-form semantic feature consistency, summed over channels, averaged over the batch.

    Per channel ``D(f,g)/(D(f,g)+D(f,l)+eps) + G(f,g)/(G(f,g)+G(f,l)+eps)``,
    where ``D`` is the mean absolute difference of the maps and ``G`` the
    difference of their Gram matrices (mean absolute entry difference, or the
    Frobenius norm).
    """
    f, g, l = (_as_batched(x) for x in (t.output, t.pseudo_gt, t.input))

    def dist(a, b):
        return (a - b).abs().flatten(2).mean(-1)

    def gdist(a, b):
        diff = (_channel_grams(a) - _channel_grams(b)).flatten(2)
        if gram_mode == "frobenius":
            return diff.pow(2).sum(-1).sqrt()
        return diff.abs().mean(-1)

    d_fg, d_fl = dist(f, g), dist(f, l)
    g_fg, g_fl = gdist(f, g), gdist(f, l)
    per_channel = d_fg / (d_fg + d_fl + eps) + g_fg / (g_fg + g_fl + eps)
    return per_channel.sum(1).mean()


def ipa_loss(sim_w, sim_u, sim_o) -> torch.Tensor:
    """``softplus(sim_u - sim_w) + softplus(sim_o - sim_w)``, averaged over a batch."""
    sim_w, sim_u, sim_o = (torch.as_tensor(s, dtype=torch.float64) if not isinstance(s, torch.Tensor) else s
                           for s in (sim_w, sim_u, sim_o))
    return (F.softplus(sim_u - sim_w) + F.softplus(sim_o - sim_w)).mean()


def spc_loss(sfc, ipa, w: LossWeights):
    return w.beta1 * sfc + w.beta2 * ipa


def cos_color_loss(out: torch.Tensor, pgt: torch.Tensor, eps: float = 0.0) -> torch.Tensor:
    """Mean over pixels of ``1 - cos(rgb_out, rgb_pgt)``; pixels where either vector is zero add 0."""
    if out.shape != pgt.shape:
        raise ContractError(f"shape mismatch: {tuple(out.shape)} vs {tuple(pgt.shape)}")
    out, pgt = _as_batched(out), _as_batched(pgt)
    dot = (out * pgt).sum(1)
    n2 = out.pow(2).sum(1) * pgt.pow(2).sum(1)
    valid = n2 > eps
    safe = torch.where(valid, n2, torch.ones_like(n2))
    term = torch.where(valid, 1.0 - dot / safe.sqrt(), torch.zeros_like(n2))
    return term.mean()


def mse_loss(out: torch.Tensor, pgt: torch.Tensor) -> torch.Tensor:
    if out.shape != pgt.shape:
        raise ContractError(f"shape mismatch: {tuple(out.shape)} vs {tuple(pgt.shape)}")
    return (out - pgt).pow(2).mean()


def _sims(sims):
    """Accept a ``(B, 3)`` tensor in (well, under, over) order or a mapping."""
    if isinstance(sims, dict):
        return sims["well"], sims["under"], sims["over"]
    sims = torch.as_tensor(sims)
    return sims[..., 0], sims[..., 1], sims[..., 2]


def total_loss(out, pgt, triple: SemanticFeatureTriple, sims, w: LossWeights = LossWeights()):
    """Weighted objective and its per-term breakdown.

    Disabled terms are not computed and appear as exactly 0 in the breakdown.
    """
    zero = out.new_zeros(())
    mse = mse_loss(out, pgt)
    cos = cos_color_loss(out, pgt) if w.use_cos else zero
    sfc = sfc_loss(triple, w.epsilon, w.gram_mode) if (w.use_spc and w.use_sfc) else zero
    ipa = ipa_loss(*_sims(sims)) if (w.use_spc and w.use_ipa) else zero
    ipa = ipa.to(out.dtype)
    spc = spc_loss(sfc, ipa, w)
    total = w.lambda1 * mse + w.lambda2 * cos + w.lambda3 * spc
    breakdown = LossBreakdown(
        mse=float(mse.detach()),
        cos=float(cos.detach()),
        sfc=float(sfc.detach()),
        ipa=float(ipa.detach()),
        spc=float(spc.detach()),
        total=float(total.detach()),
    )
    return total, breakdown


def semantic_triple(segmenter, conv: torch.nn.Conv2d, out, pgt, inp) -> SemanticFeatureTriple:
    """Semantic features of output, pseudo-GT and input through the network's semantic conv.

    The conv weights are detached so the loss cannot reshape its own feature
    space; gradients still reach ``out`` through the (soft) segmentation.
    """
    weight, bias = conv.weight.detach(), None if conv.bias is None else conv.bias.detach()

    def feats(x):
        seg = segmenter.soft_segment(x).to(weight.dtype)
        return F.conv2d(seg, weight, bias, padding=conv.padding)

    with torch.no_grad():
        h_g, h_l = feats(pgt), feats(inp)
    return SemanticFeatureTriple(feats(out), h_g, h_l)
