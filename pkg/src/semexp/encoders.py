"""Frozen semantic segmenter and vision-language encoder backends.

Two families are provided:

* stub backends, which are deterministic, differentiable and closed-form, so
  every downstream mechanism can be checked against a hand-computable oracle;
* pretrained backends wrapping a FastSAM-style segmenter and a CLIP model.

All backends take ``(B, 3, H, W)`` tensors in [0, 1]. Embeddings are
``(B, dim)`` and unit-normalised.
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .exceptions import BackendError, ContractError

EMBED_DIM = 512
PROMPT_CLASSES = ("well", "under", "over")

# stub statistic layout: (bias, luma, R, G, B, rms contrast); colour stats centred on mid-grey
STUB_STAT_DIM = 6
STUB_BIAS = 0.5
STUB_ANCHOR_LUMA = {"well": 0.5, "under": 0.15, "over": 0.85}


def cosine_sim(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Cosine similarity along the last axis; broadcasts like ``a * b``."""
    if a.shape[-1] != b.shape[-1]:
        raise ContractError(f"embedding dims differ: {a.shape[-1]} vs {b.shape[-1]}")
    na = a.norm(dim=-1)
    nb = b.norm(dim=-1)
    if bool((na == 0).any()) or bool((nb == 0).any()):
        raise ContractError("cosine similarity is undefined for a zero vector")
    return (a * b).sum(-1) / (na * nb)


def _as_batch(images: torch.Tensor) -> torch.Tensor:
    if images.ndim == 3:
        images = images[None]
    if images.ndim != 4 or images.shape[1] != 3:
        raise ContractError(f"expected (B, 3, H, W) images, got {tuple(images.shape)}")
    return images


def _luma(images: torch.Tensor) -> torch.Tensor:
    return 0.299 * images[:, 0] + 0.587 * images[:, 1] + 0.114 * images[:, 2]


# ------------------------------------------------------------------ prompts


@dataclass
class PromptSet:
    """Three learnable prompts, one per exposure class (well, under, over).

    For the stub backend each prompt is a vector in the stub's statistic
    space; for CLIP it is a ``(n_ctx, width)`` block of context-token
    embeddings.
    """

    well: torch.Tensor
    under: torch.Tensor
    over: torch.Tensor
    backend: str = "stub"
    frozen: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        shapes = {tuple(t.shape) for t in (self.well, self.under, self.over)}
        if len(shapes) != 1:
            raise ContractError(f"prompt shapes differ: {shapes}")

    def __getitem__(self, name: str) -> torch.Tensor:
        if name not in PROMPT_CLASSES:
            raise KeyError(name)
        return getattr(self, name)

    def tensors(self) -> list[torch.Tensor]:
        return [self.well, self.under, self.over]

    def trainable(self) -> "PromptSet":
        """Copy whose tensors are leaf tensors that require grad."""
        ps = [t.detach().clone().requires_grad_(True) for t in self.tensors()]
        return PromptSet(*ps, backend=self.backend, meta=dict(self.meta))

    def detached(self) -> "PromptSet":
        ps = [t.detach().clone() for t in self.tensors()]
        return PromptSet(*ps, backend=self.backend, frozen=True, meta=dict(self.meta))

    def digest(self) -> str:
        h = hashlib.sha256(self.backend.encode())
        for t in self.tensors():
            h.update(t.detach().cpu().to(torch.float64).numpy().tobytes())
        return h.hexdigest()[:16]

    def save(self, path) -> Path:
        path = Path(path)
        buf = io.BytesIO()
        np.savez(
            buf,
            **{k: t.detach().cpu().numpy() for k, t in zip(PROMPT_CLASSES, self.tensors())},
            backend=np.array(self.backend),
        )
        path.write_bytes(buf.getvalue())
        return path

    @classmethod
    def load(cls, path) -> "PromptSet":
        try:
            with np.load(Path(path), allow_pickle=False) as data:
                ts = [torch.from_numpy(data[k].copy()) for k in PROMPT_CLASSES]
                backend = str(data["backend"])
        except (OSError, KeyError, ValueError) as exc:
            raise ContractError(f"not a prompt file: {path} ({exc})") from exc
        return cls(*ts, backend=backend, frozen=True)


# -------------------------------------------------------------- segmenters


class StubSegmenter:
    """Equal-width luminance bands, one-hot per pixel.

    :meth:`soft_segment` gives a differentiable relaxation used where a loss
    must pass gradients through the segmentation.
    """

    name = "stub"

    def __init__(self, num_bands: int = 4, temperature: float = 0.05):
        if num_bands < 1:
            raise ContractError("num_bands must be >= 1")
        self.num_bands = num_bands
        self.temperature = temperature

    @property
    def num_channels(self) -> int:
        return self.num_bands

    @torch.no_grad()
    def segment(self, images: torch.Tensor) -> torch.Tensor:
        images = _as_batch(images)
        band = (_luma(images) * self.num_bands).floor().clamp(0, self.num_bands - 1).long()
        return F.one_hot(band, self.num_bands).permute(0, 3, 1, 2).to(images.dtype)

    def soft_segment(self, images: torch.Tensor) -> torch.Tensor:
        images = _as_batch(images)
        centers = (torch.arange(self.num_bands, dtype=images.dtype) + 0.5) / self.num_bands
        dist = (_luma(images)[:, None] - centers[None, :, None, None]).abs()
        return torch.softmax(-dist / self.temperature, dim=1)


class PretrainedSegmenter:
    """FastSAM-backed segmenter; mask channels are the ``num_channels`` largest masks."""

    name = "pretrained"

    def __init__(self, weights, num_channels: int = 4, imgsz: int = 640):
        try:
            from ultralytics import FastSAM  # type: ignore
        except ImportError as exc:
            raise BackendError("pretrained segmenter needs the 'ultralytics' package (FastSAM)") from exc
        if weights is None or not Path(weights).exists():
            raise BackendError(f"segmenter weights not found: {weights}")
        self.model = FastSAM(str(weights))
        self.num_channels_ = num_channels
        self.imgsz = imgsz

    @property
    def num_channels(self) -> int:
        return self.num_channels_

    @torch.no_grad()
    def segment(self, images: torch.Tensor) -> torch.Tensor:
        images = _as_batch(images)
        b, _, h, w = images.shape
        out = torch.zeros(b, self.num_channels, h, w, dtype=images.dtype)
        for i in range(b):
            arr = (images[i].permute(1, 2, 0).clamp(0, 1).numpy()[..., ::-1] * 255).astype(np.uint8)
            res = self.model(arr, imgsz=self.imgsz, retina_masks=True, verbose=False)
            if not res or res[0].masks is None:
                continue
            masks = res[0].masks.data.float().cpu()
            masks = F.interpolate(masks[None], size=(h, w), mode="nearest")[0]
            order = masks.sum(dim=(1, 2)).argsort(descending=True)[: self.num_channels]
            out[i, : len(order)] = masks[order].to(images.dtype)
        return out

    soft_segment = segment


# ------------------------------------------------------- vision-language


class StubVisionLanguageEncoder:
    """Closed-form stand-in for a CLIP image/text pair.

    An image is summarised by the statistic vector
    ``(bias, luma - .5, R - .5, G - .5, B - .5, rms_contrast)`` which a fixed
    matrix with orthonormal columns lifts to ``dim`` dimensions. Prompts live
    in the same statistic space and go through the same matrix, so cosine
    similarities equal cosines between statistic vectors.
    """

    name = "stub"

    def __init__(self, dim: int = EMBED_DIM, seed: int = 0):
        if dim < STUB_STAT_DIM:
            raise ContractError(f"dim must be >= {STUB_STAT_DIM}")
        self.dim = dim
        gen = torch.Generator().manual_seed(seed)
        q, _ = torch.linalg.qr(torch.randn(dim, STUB_STAT_DIM, generator=gen, dtype=torch.float64))
        self.projection = q

    def statistics(self, images: torch.Tensor) -> torch.Tensor:
        images = _as_batch(images)
        luma = _luma(images)
        mean_luma = luma.mean(dim=(1, 2))
        rgb = images.mean(dim=(2, 3))
        contrast = (luma - mean_luma[:, None, None]).pow(2).mean(dim=(1, 2)).add(1e-12).sqrt()
        bias = torch.full_like(mean_luma, STUB_BIAS)
        return torch.stack([bias, mean_luma - 0.5, *(rgb - 0.5).unbind(1), contrast], dim=1)

    def _lift(self, stats: torch.Tensor) -> torch.Tensor:
        z = stats @ self.projection.to(stats.dtype).T
        return z / z.norm(dim=-1, keepdim=True)

    def encode_image(self, images: torch.Tensor) -> torch.Tensor:
        return self._lift(self.statistics(images))

    def encode_prompt(self, params: torch.Tensor, label: str | None = None) -> torch.Tensor:
        if params.shape[-1] != STUB_STAT_DIM:
            raise ContractError(f"stub prompts have {STUB_STAT_DIM} entries, got {params.shape[-1]}")
        if bool((params.norm(dim=-1) == 0).any()):
            raise ContractError("zero prompt vector")
        return self._lift(params)

    def encode_prompts(self, prompts: PromptSet) -> torch.Tensor:
        """``(3, dim)`` embeddings in (well, under, over) order."""
        return torch.stack([self.encode_prompt(prompts[c], c) for c in PROMPT_CLASSES])

    @staticmethod
    def anchor(luma: float, contrast: float = 0.0, dtype=torch.float64) -> torch.Tensor:
        """Statistic vector of a flat grey image with the given luma."""
        d = luma - 0.5
        return torch.tensor([STUB_BIAS, d, d, d, d, contrast], dtype=dtype)

    def anchor_prompts(self) -> PromptSet:
        """Prompts sitting exactly on the well/under/over anchors (luma .5/.15/.85)."""
        ps = [self.anchor(STUB_ANCHOR_LUMA[c]) for c in PROMPT_CLASSES]
        return PromptSet(*ps, backend="stub", frozen=True)

    def init_prompts(self, seed: int = 0, scale: float = 0.1) -> PromptSet:
        """Untrained prompts: the bias direction plus small seeded noise."""
        gen = torch.Generator().manual_seed(seed)
        base = self.anchor(0.5)
        ps = [base + scale * torch.randn(STUB_STAT_DIM, generator=gen, dtype=torch.float64) for _ in PROMPT_CLASSES]
        return PromptSet(*ps, backend="stub")

    def parameters(self) -> list[torch.Tensor]:
        return [self.projection]


CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)
CLASS_NAMES = {"well": "well-exposed", "under": "underexposed", "over": "overexposed"}


class ClipEncoder:
    """CLIP image/text towers with learnable context-token prompts.

    Each prompt is ``[SOS] ctx_1 .. ctx_n <class tokens> [EOS]`` where only
    the ``ctx`` embeddings are trainable. Tower weights are frozen.
    """

    name = "pretrained"

    def __init__(self, model=None, weights=None, tokenizer=None, n_ctx: int = 16, class_token_ids: dict | None = None):
        if model is None:
            if weights is None or not Path(weights).exists():
                raise BackendError(f"CLIP weights not found: {weights}")
            try:
                from transformers import CLIPModel, CLIPTokenizer
            except ImportError as exc:  # pragma: no cover - transformers is a hard dep of this backend
                raise BackendError("pretrained encoder needs the 'transformers' package") from exc
            model = CLIPModel.from_pretrained(str(weights))
            tokenizer = tokenizer or CLIPTokenizer.from_pretrained(str(weights))
        self.model = model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.n_ctx = n_ctx
        tcfg = self.model.config.text_config
        self.width = tcfg.hidden_size
        self.bos = tcfg.bos_token_id
        self.eos = tcfg.eos_token_id
        self.image_size = self.model.config.vision_config.image_size
        if class_token_ids is None:
            if tokenizer is None:
                raise BackendError("a tokenizer or explicit class_token_ids is required")
            class_token_ids = {
                c: tokenizer(CLASS_NAMES[c], add_special_tokens=False)["input_ids"] for c in PROMPT_CLASSES
            }
        self.class_token_ids = {c: list(v) for c, v in class_token_ids.items()}
        self.dim = self.model.config.projection_dim

    # -- image side

    def _preprocess(self, images: torch.Tensor) -> torch.Tensor:
        x = F.interpolate(images, size=(self.image_size, self.image_size), mode="bicubic", align_corners=False)
        mean = torch.tensor(CLIP_MEAN, dtype=x.dtype).view(1, 3, 1, 1)
        std = torch.tensor(CLIP_STD, dtype=x.dtype).view(1, 3, 1, 1)
        return (x - mean) / std

    def encode_image(self, images: torch.Tensor) -> torch.Tensor:
        images = _as_batch(images)
        dtype = next(self.model.parameters()).dtype
        out = self.model.vision_model(pixel_values=self._preprocess(images.to(dtype)))
        z = self.model.visual_projection(out.pooler_output)
        return z / z.norm(dim=-1, keepdim=True)

    # -- text side

    def encode_prompt(self, params: torch.Tensor, label: str) -> torch.Tensor:
        if params.shape != (self.n_ctx, self.width):
            raise ContractError(f"expected ({self.n_ctx}, {self.width}) context, got {tuple(params.shape)}")
        tm = self.model.text_model
        emb = tm.embeddings.token_embedding
        head = emb(torch.tensor([self.bos], dtype=torch.long))
        tail = emb(torch.tensor(self.class_token_ids[label] + [self.eos], dtype=torch.long))
        x = torch.cat([head, params.to(head.dtype), tail], dim=0)[None]
        h = tm.embeddings(inputs_embeds=x)
        n = h.shape[1]
        mask = torch.full((n, n), float("-inf"), dtype=h.dtype).triu(1)[None, None]
        out = tm.encoder(inputs_embeds=h, attention_mask=mask)
        pooled = tm.final_layer_norm(out.last_hidden_state)[:, n - 1]
        z = self.model.text_projection(pooled)[0]
        return z / z.norm()

    def encode_prompts(self, prompts: PromptSet) -> torch.Tensor:
        return torch.stack([self.encode_prompt(prompts[c], c) for c in PROMPT_CLASSES])

    def init_prompts(self, seed: int = 0, std: float = 0.02) -> PromptSet:
        gen = torch.Generator().manual_seed(seed)
        ps = [std * torch.randn(self.n_ctx, self.width, generator=gen) for _ in PROMPT_CLASSES]
        return PromptSet(*ps, backend="pretrained")

    def parameters(self) -> list[torch.Tensor]:
        return list(self.model.parameters())


# ------------------------------------------------------------- selection


def build_segmenter(backend: str = "stub", weights=None, num_channels: int = 4):
    """Return a segmenter for ``segmenter.backend``; never falls back silently."""
    if backend == "stub":
        return StubSegmenter(num_bands=num_channels)
    if backend == "pretrained":
        return PretrainedSegmenter(weights, num_channels=num_channels)
    raise BackendError(f"unknown segmenter backend {backend!r}")


def build_encoder(backend: str = "stub", weights=None, dim: int = EMBED_DIM, seed: int = 0):
    """Return a vision-language encoder for ``encoder.backend``."""
    if backend == "stub":
        return StubVisionLanguageEncoder(dim=dim, seed=seed)
    if backend == "pretrained":
        return ClipEncoder(weights=weights)
    raise BackendError(f"unknown encoder backend {backend!r}")


def parameter_checksum(params) -> str:
    """sha256 over the raw bytes of a sequence of tensors (frozen-weight audits)."""
    h = hashlib.sha256()
    for p in params:
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
