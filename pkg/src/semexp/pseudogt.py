"""CLIP-guided pseudo ground truth: prompt tuning, exposure classification, gamma search."""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .encoders import PROMPT_CLASSES, PromptSet, cosine_sim
from .exceptions import ContractError, NumericError
from .imaging import gamma_transform, load_image, save_image, to_tensor

logger = logging.getLogger(__name__)

GAMMA_BOUNDS = (0.1, 5.0)
GAMMA_START = {"under": 2.0, "over": 0.5}


class ExposureClass(str, enum.Enum):
    WELL = "well"
    UNDER = "under"
    OVER = "over"


@dataclass
class GammaResult:
    gamma: float
    final_similarity: float
    iterations: int
    converged: bool
    history: list[float] = field(default_factory=list, repr=False)


@dataclass
class PromptTuningResult:
    prompts: PromptSet
    epoch_losses: list[float]
    step_losses: list[float]


@dataclass
class PseudoGT:
    image: np.ndarray
    gamma: GammaResult
    exposure: ExposureClass
    sims: dict


def _as_tensor(image) -> torch.Tensor:
    if isinstance(image, torch.Tensor):
        return image if image.ndim == 4 else image[None]
    return to_tensor(image, dtype=torch.float64)


# ----------------------------------------------------------- prompt tuning


def tune_loss(sims: torch.Tensor, labels: torch.Tensor, temperature: float = 1.0) -> torch.Tensor:
    """Triplet cross-entropy over image/prompt cosine similarities.

    ``sims`` is ``(N, 3)`` in (well, under, over) order; ``labels`` indexes
    the true class. Returns the mean over the batch.
    """
    return torch.nn.functional.cross_entropy(sims / temperature, labels)


def tune_prompts(groups: Mapping[str, Sequence], prompts: PromptSet, encoder, steps: int = 200,
                 lr: float = 0.01, batch_size: int | None = None, temperature: float = 1.0,
                 seed: int = 0) -> PromptTuningResult:
    """Fit the three prompts so each image is most similar to its own class prompt.

    ``groups`` maps ``well``/``under``/``over`` to sequences of images. Image
    embeddings are computed once (the towers are frozen); only the prompt
    tensors are optimised, with Adam. One epoch is one pass over all images in
    minibatches of ``batch_size`` (full batch by default).
    """
    for c in PROMPT_CLASSES:
        if c not in groups or len(groups[c]) == 0:
            raise ContractError(f"prompt tuning needs a non-empty {c!r} group")
    feats, labels = [], []
    with torch.no_grad():
        for idx, c in enumerate(PROMPT_CLASSES):
            for im in groups[c]:
                feats.append(encoder.encode_image(_as_tensor(im))[0])
                labels.append(idx)
    feats = torch.stack(feats)
    labels = torch.tensor(labels)
    n = len(labels)
    batch_size = batch_size or n

    if steps <= 0:
        logger.warning("tune_prompts called with steps=%d; prompts left unchanged", steps)
        return PromptTuningResult(prompts.detached(), [], [])

    work = prompts.trainable()
    params = work.tensors()
    opt = torch.optim.Adam(params, lr=lr)
    rng = np.random.default_rng(seed)
    step_losses, epoch_losses, current = [], [], []
    order, cursor = rng.permutation(n), 0
    for _ in range(steps):
        if cursor >= n:
            epoch_losses.append(float(np.mean(current)))
            current, order, cursor = [], rng.permutation(n), 0
        idx = torch.from_numpy(order[cursor : cursor + batch_size])
        cursor += batch_size
        text = encoder.encode_prompts(work).to(feats.dtype)
        sims = cosine_sim(feats[idx, None, :], text[None])
        loss = tune_loss(sims, labels[idx], temperature)
        if not torch.isfinite(loss):
            raise NumericError(f"prompt tuning loss became non-finite at step {len(step_losses)}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        step_losses.append(loss.item())
        current.append(step_losses[-1])
    if current:
        epoch_losses.append(float(np.mean(current)))
    return PromptTuningResult(work.detached(), epoch_losses, step_losses)


def prompt_similarities(image, prompts: PromptSet, encoder) -> torch.Tensor:
    """``(B, 3)`` cosine similarities to the (well, under, over) prompts."""
    img = encoder.encode_image(_as_tensor(image))
    text = encoder.encode_prompts(prompts).to(img.dtype)
    return cosine_sim(img[:, None, :], text[None])


def predict_class(image, prompts: PromptSet, encoder) -> ExposureClass:
    """Three-way prediction (argmax similarity)."""
    with torch.no_grad():
        sims = prompt_similarities(image, prompts, encoder)[0]
    return ExposureClass(PROMPT_CLASSES[int(sims.argmax())])


def classify_exposure(image, prompts: PromptSet, encoder) -> tuple[ExposureClass, dict]:
    """Decide whether ``image`` should be brightened (``under``) or darkened (``over``).

    Only the under/over prompts take part; ties resolve to ``under``.
    """
    with torch.no_grad():
        sims = prompt_similarities(image, prompts, encoder)[0]
    sim_u, sim_o = float(sims[1]), float(sims[2])
    cls = ExposureClass.OVER if sim_o > sim_u else ExposureClass.UNDER
    return cls, {"under": sim_u, "over": sim_o}


# ----------------------------------------------------------- gamma tuning


def gamma_objective(image, gamma, prompts: PromptSet, encoder, target: torch.Tensor | None = None) -> torch.Tensor:
    """Cosine similarity between the gamma-corrected image and the well-exposed prompt."""
    if target is None:
        target = encoder.encode_prompt(prompts.well, "well")
    img = _as_tensor(image)
    emb = encoder.encode_image(gamma_transform(img, gamma))
    return cosine_sim(emb, target.to(emb.dtype)[None])[0]


def tune_gamma(image, prompts: PromptSet, encoder, gamma0: float = 1.0, lr: float = 0.05,
               max_iters: int = 100, tol: float = 1e-4, bounds: tuple[float, float] = GAMMA_BOUNDS,
               max_halvings: int = 40) -> GammaResult:
    """Maximise :func:`gamma_objective` over a scalar gamma by projected gradient ascent.

    Each iteration tries the last accepted step length (starting at ``lr``),
    doubled when the previous step needed no backtracking, clamps into
    ``bounds`` and halves the step until the objective does not decrease.
    Stops when the accepted change is below ``tol``, when no non-decreasing
    step exists, or after ``max_iters``.
    """
    lo, hi = bounds
    if not 0 < lo < hi:
        raise ContractError(f"invalid gamma bounds {bounds}")
    img = _as_tensor(image).detach()
    with torch.no_grad():
        target = encoder.encode_prompt(prompts.well, "well").detach()

    def value_and_grad(g: float) -> tuple[float, float]:
        gt = torch.tensor(g, dtype=torch.float64, requires_grad=True)
        with torch.enable_grad():  # callable from inside no_grad blocks
            f = gamma_objective(img, gt, prompts, encoder, target)
            (grad,) = torch.autograd.grad(f, gt)
        return float(f.detach()), float(grad)

    def value(g: float) -> float:
        with torch.no_grad():
            return float(gamma_objective(img, g, prompts, encoder, target))

    gamma = min(max(float(gamma0), lo), hi)
    f, grad = value_and_grad(gamma)
    history = [f]
    step = lr
    grow = True
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        if not (math.isfinite(f) and math.isfinite(grad)):
            raise NumericError(f"gamma tuning hit a non-finite value at gamma={gamma}")
        trial = 2.0 * step if grow else step
        grow = True
        for _ in range(max_halvings):
            cand = min(max(gamma + trial * grad, lo), hi)
            f_cand = value(cand)
            if f_cand >= f:
                break
            trial *= 0.5
            grow = False
        else:
            converged = True  # no ascent direction left at this resolution
            break
        delta = cand - gamma
        step = trial
        gamma = cand
        f, grad = value_and_grad(gamma)
        history.append(f)
        if abs(delta) < tol:
            converged = True
            break
    return GammaResult(gamma=gamma, final_similarity=f, iterations=it, converged=converged, history=history)


def grid_search_gamma(image, prompts: PromptSet, encoder, grid=None) -> tuple[float, float]:
    """Brute-force argmax of the gamma objective over ``grid`` (0.10..5.00 step 0.01 by default)."""
    if grid is None:
        grid = np.round(np.arange(10, 501) / 100.0, 2)
    img = _as_tensor(image)
    with torch.no_grad():
        target = encoder.encode_prompt(prompts.well, "well")
        vals = [float(gamma_objective(img, float(g), prompts, encoder, target)) for g in grid]
    k = int(np.argmax(vals))
    return float(grid[k]), vals[k]


def generate_pseudo_gt(image, prompts: PromptSet, encoder, **tuner_kw) -> PseudoGT:
    """Classify, tune gamma from the class-specific start, and apply the transform."""
    arr = np.asarray(image, dtype=np.float64)
    cls, sims = classify_exposure(arr, prompts, encoder)
    tuner_kw.setdefault("gamma0", GAMMA_START[cls.value])
    result = tune_gamma(arr, prompts, encoder, **tuner_kw)
    return PseudoGT(gamma_transform(arr, result.gamma), result, cls, sims)


# ------------------------------------------------------------------ cache


class PseudoGTCache:
    """Disk cache of pseudo-GT images keyed by image hash and prompt hash.

    Layout: ``<root>/<sha256(image)>.<prompt_hash>.png`` plus a JSON sidecar
    with the same stem holding gamma, similarities, class and iterations.
    """

    def __init__(self, root, prompts: PromptSet, encoder, **tuner_kw):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.prompts = prompts
        self.encoder = encoder
        self.tuner_kw = tuner_kw
        self.prompt_hash = prompts.digest()

    @staticmethod
    def image_hash(source) -> str:
        if isinstance(source, (str, Path)):
            return hashlib.sha256(Path(source).read_bytes()).hexdigest()
        return hashlib.sha256(np.ascontiguousarray(source, dtype=np.float64).tobytes()).hexdigest()

    def paths(self, source) -> tuple[Path, Path]:
        stem = f"{self.image_hash(source)}.{self.prompt_hash}"
        return self.root / f"{stem}.png", self.root / f"{stem}.json"

    def __contains__(self, source) -> bool:
        png, meta = self.paths(source)
        return png.exists() and meta.exists()

    def get(self, source) -> tuple[np.ndarray, dict]:
        """Return ``(pseudo_gt, sidecar)``, generating and writing it on a miss."""
        png, meta = self.paths(source)
        if png.exists() and meta.exists():
            return load_image(png), json.loads(meta.read_text())
        image = load_image(source) if isinstance(source, (str, Path)) else np.asarray(source, dtype=np.float64)
        pgt = generate_pseudo_gt(image, self.prompts, self.encoder, **self.tuner_kw)
        save_image(png, pgt.image)
        info = {
            "gamma": pgt.gamma.gamma,
            "sims": pgt.sims,
            "class": pgt.exposure.value,
            "iterations": pgt.gamma.iterations,
            "converged": pgt.gamma.converged,
            "final_similarity": pgt.gamma.final_similarity,
        }
        meta.write_text(json.dumps(info, indent=2))
        return load_image(png), info


def gamma_result_dict(result: GammaResult) -> dict:
    d = asdict(result)
    d.pop("history")
    return d
