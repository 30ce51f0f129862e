"""Image I/O, the gamma transform, PSNR/SSIM and dataset manifests.

Images travel through the package as ``float64`` arrays of shape ``(H, W, 3)``
in RGB order with values in ``[0, 1]``. The network side works on torch
tensors of shape ``(B, 3, H, W)``; :func:`to_tensor` and :func:`to_image`
convert between the two.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import cv2
import numpy as np
import torch
import torch.nn.functional as F

from .exceptions import ContractError, FormatError, NoEntriesError

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
EXPOSURE_TAGS = ("under", "over", "well", "unknown")

# SSIM constants (canonical single-scale variant, dynamic range 1.0)
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

#: Returned by :func:`psnr` for identical inputs.
PSNR_INFINITE = math.inf


# --------------------------------------------------------------------- I/O


def load_image(path) -> np.ndarray:
    """Read an 8- or 16-bit PNG/JPEG into an ``(H, W, 3)`` float array in [0, 1]."""
    path = Path(path)
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise OSError(f"cannot read image file: {path}")
    if raw.ndim != 3 or raw.shape[2] != 3:
        channels = 1 if raw.ndim == 2 else raw.shape[2]
        raise FormatError(f"{path}: expected 3 channels, got {channels}")
    if raw.dtype == np.uint8:
        peak = 255.0
    elif raw.dtype == np.uint16:
        peak = 65535.0
    else:
        raise FormatError(f"{path}: unsupported sample type {raw.dtype}")
    rgb = cv2.cvtColor(raw, cv2.COLOR_BGR2RGB)
    return rgb.astype(np.float64) / peak


def save_image(path, image) -> Path:
    """Write an image as an 8-bit RGB PNG (values are clipped and rounded)."""
    path = Path(path)
    arr = check_image(image, clip=True)
    codes = np.round(arr * 255.0).astype(np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), cv2.cvtColor(codes, cv2.COLOR_RGB2BGR)):
        raise OSError(f"cannot write image file: {path}")
    return path


def quantize(image) -> np.ndarray:
    """Round-trip ``image`` through 8-bit codes, as saving and reloading would."""
    return np.round(check_image(image, clip=True) * 255.0) / 255.0


def check_image(image, *, clip: bool = False) -> np.ndarray:
    """Validate an ``(H, W, 3)`` image and return it as a float64 array.

    With ``clip=True`` values are clipped into [0, 1] instead of rejected.
    """
    if isinstance(image, torch.Tensor):
        image = image.detach().cpu().numpy()
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ContractError(f"expected an (H, W, 3) image, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ContractError("image contains non-finite values")
    if clip:
        return np.clip(arr, 0.0, 1.0)
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ContractError("image values must lie in [0, 1]")
    return arr


def to_tensor(image, dtype=torch.float32) -> torch.Tensor:
    """``(H, W, 3)`` array -> ``(1, 3, H, W)`` tensor."""
    arr = check_image(image)
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1))).to(dtype)[None]


def to_image(tensor: torch.Tensor) -> np.ndarray:
    """``(1, 3, H, W)`` or ``(3, H, W)`` tensor -> ``(H, W, 3)`` float64 array."""
    t = tensor.detach().cpu()
    if t.ndim == 4:
        if t.shape[0] != 1:
            raise ContractError("to_image expects a single image")
        t = t[0]
    return t.permute(1, 2, 0).to(torch.float64).numpy()


def luminance(image):
    """Rec. 601 luma; works on ``(..., 3)`` arrays and ``(B, 3, H, W)`` tensors."""
    if isinstance(image, torch.Tensor):
        r, g, b = image[:, 0], image[:, 1], image[:, 2]
    else:
        r, g, b = image[..., 0], image[..., 1], image[..., 2]
    return 0.299 * r + 0.587 * g + 0.114 * b


# ------------------------------------------------------------ gamma transform


def gamma_transform(image, gamma):
    """Apply ``1 - (1 - I) ** gamma`` elementwise.

    ``gamma > 1`` brightens, ``gamma < 1`` darkens and ``gamma == 1`` is the
    identity. Works on numpy arrays and (differentiably) on torch tensors;
    ``gamma`` may be a float or a scalar tensor.
    """
    g = float(gamma.detach()) if isinstance(gamma, torch.Tensor) else float(gamma)
    if not g > 0.0 or not math.isfinite(g):
        raise ContractError(f"gamma must be a positive finite number, got {g}")
    if isinstance(image, torch.Tensor):
        base = (1.0 - image).clamp(min=0.0, max=1.0)
        # 0 ** gamma has an undefined d/dgamma; route saturated pixels around pow
        positive = base > 0
        safe = torch.where(positive, base, torch.ones_like(base))
        powed = torch.where(positive, safe**gamma, torch.zeros_like(base))
        # I + (b - b**g) equals 1 - b**g but is exact at g == 1 and at I == 0
        return (image + (base - powed)).clamp(0.0, 1.0)
    arr = np.asarray(image, dtype=np.float64)
    base = np.clip(1.0 - arr, 0.0, 1.0)
    return np.clip(arr + (base - base**g), 0.0, 1.0)


# ----------------------------------------------------------------- metrics


@dataclass(frozen=True)
class QualityReport:
    psnr_db: float
    ssim: float


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB with peak value 1.0.

    Identical inputs return :data:`PSNR_INFINITE`.
    """
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_INFINITE
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> torch.Tensor:
    x = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    g = torch.exp(-(x**2) / (2.0 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim(a, b) -> float:
    """Mean single-scale SSIM over valid 11x11 Gaussian windows, averaged over channels."""
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[0], a.shape[1]) < SSIM_WINDOW:
        raise ContractError(f"SSIM needs both sides >= {SSIM_WINDOW}, got {a.shape[:2]}")
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    x = torch.from_numpy(np.ascontiguousarray(a.transpose(2, 0, 1)))[:, None]
    y = torch.from_numpy(np.ascontiguousarray(b.transpose(2, 0, 1)))[:, None]
    w = _gaussian_window()[None, None]

    def filt(t):
        return F.conv2d(t, w)

    mu_x, mu_y = filt(x), filt(y)
    sxx = filt(x * x) - mu_x**2
    syy = filt(y * y) - mu_y**2
    sxy = filt(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2)
    per_channel = (num / den).mean(dim=(1, 2, 3))
    return float(per_channel.mean())


def quality(a, b) -> QualityReport:
    return QualityReport(psnr_db=psnr(a, b), ssim=ssim(a, b))


# -------------------------------------------------------------- augmentation


def sample_flips(rng: np.random.Generator) -> tuple[bool, bool]:
    """Draw (horizontal, vertical) flip decisions, each with probability 1/2."""
    h, v = rng.random(2) < 0.5
    return bool(h), bool(v)


def resize_and_augment(image, size: int, flips=None, rng_seed=None) -> np.ndarray:
    """Bilinear resize to ``size x size`` (no antialiasing), then flip.

    ``flips`` is a ``(horizontal, vertical)`` pair. When it is ``None`` the
    pair is drawn from a generator seeded with ``rng_seed``.
    """
    if size <= 0:
        raise ContractError(f"size must be positive, got {size}")
    if flips is None:
        flips = sample_flips(np.random.default_rng(rng_seed))
    t = to_tensor(image, dtype=torch.float64)
    if t.shape[-2:] != (size, size):
        t = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False, antialias=False)
    hflip, vflip = flips
    if hflip:
        t = t.flip(-1)
    if vflip:
        t = t.flip(-2)
    return np.clip(to_image(t), 0.0, 1.0)


# ---------------------------------------------------------------- manifests


@dataclass(frozen=True)
class ManifestEntry:
    input: Path
    tag: str = "unknown"
    reference: Path | None = None

    def to_dict(self) -> dict:
        return {
            "input": str(self.input),
            "tag": self.tag,
            "reference": None if self.reference is None else str(self.reference),
        }


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    split: str = "train"

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def by_tag(self, tag: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.tag == tag]

    def correction_inputs(self) -> list[ManifestEntry]:
        """Entries usable as network inputs; well-exposed images are excluded."""
        return [e for e in self.entries if e.tag != "well"]

    def to_json(self, path) -> Path:
        path = Path(path)
        payload = [dict(e.to_dict(), split=self.split) for e in self.entries]
        path.write_text(json.dumps(payload, indent=2))
        return path

    @classmethod
    def from_json(cls, path, split: str | None = None) -> "DatasetManifest":
        payload = json.loads(Path(path).read_text())
        entries = []
        for item in payload:
            tag = item.get("tag", "unknown")
            if tag not in EXPOSURE_TAGS:
                raise ContractError(f"unknown exposure tag {tag!r} in {path}")
            ref = item.get("reference")
            entries.append(ManifestEntry(Path(item["input"]), tag, None if ref is None else Path(ref)))
        if split is None:
            split = payload[0].get("split", "train") if payload else "train"
        return cls(entries, split)


def _images_in(folder: Path) -> list[Path]:
    return sorted(p for p in folder.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def _level_key(path: Path):
    try:
        return (0, int(path.stem), path.name)
    except ValueError:
        return (1, 0, path.name)


DEFAULT_MSEC_SUBSETS = {"under": "under", "over": "over"}


def build_manifest(root, layout: str = "flat", split: str = "train", subsets: dict | None = None) -> DatasetManifest:
    """Index a dataset folder.

    Layouts:

    ``flat``
        every image directly under ``root``; tagged ``unknown``.
    ``msec``
        ``root/{under,over,gt}/<stem>.<ext>``; inputs are paired with the
        ``gt`` file of the same stem when one exists. ``subsets`` maps extra
        folder names to tags (for example ``{"well": "well"}``).
    ``sice``
        ``root/<scene>/<level>.<ext>`` with at least 3 levels per scene. The
        2nd level is the under-exposed input, the last level the over-exposed
        input, and the middle level their reference.
    """
    root = Path(root)
    if not root.is_dir():
        raise ContractError(f"dataset root does not exist: {root}")
    entries: list[ManifestEntry] = []

    if layout == "flat":
        entries = [ManifestEntry(p.resolve(), "unknown") for p in _images_in(root)]
    elif layout == "msec":
        gt_dir = root / "gt"
        refs = {p.stem: p.resolve() for p in _images_in(gt_dir)} if gt_dir.is_dir() else {}
        for folder, tag in sorted((subsets or DEFAULT_MSEC_SUBSETS).items()):
            if tag not in EXPOSURE_TAGS:
                raise ContractError(f"unknown exposure tag {tag!r}")
            sub = root / folder
            if not sub.is_dir():
                continue
            for p in _images_in(sub):
                entries.append(ManifestEntry(p.resolve(), tag, refs.get(p.stem)))
    elif layout == "sice":
        for scene in sorted(d for d in root.iterdir() if d.is_dir()):
            levels = sorted(_images_in(scene), key=_level_key)
            if len(levels) < 3:
                logger.warning("skipping scene %s: %d levels (< 3)", scene.name, len(levels))
                continue
            ref = levels[len(levels) // 2].resolve()
            entries.append(ManifestEntry(levels[1].resolve(), "under", ref))
            entries.append(ManifestEntry(levels[-1].resolve(), "over", ref))
    else:
        raise ContractError(f"unknown layout {layout!r}; expected flat, msec or sice")

    if not entries:
        raise NoEntriesError(f"no entries found under {root} for layout {layout!r}")
    entries.sort(key=lambda e: (str(e.input), e.tag))
    return DatasetManifest(entries, split)


def load_images(paths: Iterable) -> list[np.ndarray]:
    return [load_image(p) for p in paths]


def stack_images(images: Sequence, dtype=torch.float32) -> torch.Tensor:
    """List of equally sized ``(H, W, 3)`` arrays -> ``(B, 3, H, W)`` tensor."""
    return torch.cat([to_tensor(im, dtype) for im in images], dim=0)
