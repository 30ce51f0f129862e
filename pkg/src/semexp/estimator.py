"""scikit-learn style estimators over the pipeline.

``PromptTuner`` learns the exposure prompts, ``PseudoGTGenerator`` turns
images into gamma-corrected targets, and ``ExposureCorrector`` trains and
applies the correction network.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .encoders import PROMPT_CLASSES, PromptSet, build_encoder, build_segmenter
from .exceptions import ContractError
from .imaging import check_image, psnr
from .losses import LossWeights
from .network import NetworkConfig
from .pseudogt import generate_pseudo_gt, prompt_similarities, tune_prompts
from .training import TrainConfig, Trainer, infer


def check_images(X) -> list[np.ndarray]:
    """Validate a batch: an ``(N, H, W, 3)`` array or a sequence of ``(H, W, 3)`` images."""
    if isinstance(X, np.ndarray) and X.ndim == 3:
        raise ContractError("expected a batch of images; wrap a single image in a list")
    if isinstance(X, np.ndarray) and X.ndim == 4:
        X = list(X)
    if not isinstance(X, Sequence) or len(X) == 0:
        raise ContractError("expected a non-empty sequence of images")
    return [check_image(x) for x in X]


def check_labels(y, n: int) -> list[str]:
    labels = [str(v) for v in y]
    if len(labels) != n:
        raise ContractError(f"{n} images but {len(labels)} labels")
    bad = sorted(set(labels) - set(PROMPT_CLASSES))
    if bad:
        raise ContractError(f"labels must be in {PROMPT_CLASSES}, got {bad}")
    return labels


def _resolve_prompts(prompts, encoder) -> PromptSet:
    if prompts is None:
        if not hasattr(encoder, "anchor_prompts"):
            raise ContractError("prompts are required with a pretrained encoder")
        return encoder.anchor_prompts()
    if isinstance(prompts, PromptTuner):
        check_is_fitted(prompts, "prompts_")
        return prompts.prompts_
    if isinstance(prompts, PromptSet):
        return prompts
    return PromptSet.load(prompts)


class PromptTuner(ClassifierMixin, BaseEstimator):
    """Three-way exposure classifier whose only parameters are the prompts."""

    def __init__(self, steps=200, learning_rate=0.01, batch_size=None, temperature=1.0, seed=0,
                 encoder_backend="stub", encoder_weights=None):
        self.steps = steps
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.temperature = temperature
        self.seed = seed
        self.encoder_backend = encoder_backend
        self.encoder_weights = encoder_weights

    def fit(self, X, y):
        images = check_images(X)
        labels = check_labels(y, len(images))
        self.encoder_ = build_encoder(self.encoder_backend, self.encoder_weights)
        groups = {c: [im for im, l in zip(images, labels) if l == c] for c in PROMPT_CLASSES}
        init = self.encoder_.init_prompts(self.seed)
        result = tune_prompts(groups, init, self.encoder_, self.steps, self.learning_rate,
                              self.batch_size, self.temperature, self.seed)
        self.prompts_ = result.prompts
        self.epoch_losses_ = result.epoch_losses
        self.step_losses_ = result.step_losses
        self.classes_ = np.array(PROMPT_CLASSES)
        return self

    def _sims(self, X) -> torch.Tensor:
        check_is_fitted(self, "prompts_")
        with torch.no_grad():
            return torch.cat([prompt_similarities(im, self.prompts_, self.encoder_) for im in check_images(X)])

    def predict_proba(self, X) -> np.ndarray:
        return torch.softmax(self._sims(X) / self.temperature, dim=-1).numpy()

    def predict(self, X) -> np.ndarray:
        return self.classes_[self._sims(X).argmax(-1).numpy()]


class PseudoGTGenerator(TransformerMixin, BaseEstimator):
    """Stateless transformer: each image -> its gamma-tuned pseudo ground truth.

    After :meth:`transform`, ``gammas_`` and ``classes_`` describe the last batch.
    """

    def __init__(self, prompts=None, encoder_backend="stub", encoder_weights=None, learning_rate=0.05,
                 max_iters=100, tol=1e-4):
        self.prompts = prompts
        self.encoder_backend = encoder_backend
        self.encoder_weights = encoder_weights
        self.learning_rate = learning_rate
        self.max_iters = max_iters
        self.tol = tol

    def fit(self, X=None, y=None):
        self.encoder_ = build_encoder(self.encoder_backend, self.encoder_weights)
        self.prompts_ = _resolve_prompts(self.prompts, self.encoder_)
        return self

    def transform(self, X) -> list[np.ndarray]:
        check_is_fitted(self, "prompts_")
        results = [
            generate_pseudo_gt(im, self.prompts_, self.encoder_, lr=self.learning_rate,
                               max_iters=self.max_iters, tol=self.tol)
            for im in check_images(X)
        ]
        self.gammas_ = np.array([r.gamma.gamma for r in results])
        self.classes_ = [r.exposure.value for r in results]
        return [r.image for r in results]


class ExposureCorrector(TransformerMixin, BaseEstimator):
    """Train the correction network on images, then correct new ones.

    ``fit(X)`` builds pseudo-GT targets itself; ``fit(X, y)`` takes them as
    given. ``score(X, y)`` is the mean PSNR of ``transform(X)`` against
    references ``y``.
    """

    def __init__(self, num_scales=3, base_channels=32, smb_per_rsmg=4, ssm_state_dim=16, semantic_channels=4,
                 attention_mode="gate", disable_asf=False, disable_spatial_attn=False, loss_weights=None,
                 learning_rate=1e-4, batch_size=8, input_size=384, epochs=1, max_steps=None, seed=0,
                 prompts=None, encoder_backend="stub", encoder_weights=None, segmenter_backend="stub",
                 segmenter_weights=None):
        self.num_scales = num_scales
        self.base_channels = base_channels
        self.smb_per_rsmg = smb_per_rsmg
        self.ssm_state_dim = ssm_state_dim
        self.semantic_channels = semantic_channels
        self.attention_mode = attention_mode
        self.disable_asf = disable_asf
        self.disable_spatial_attn = disable_spatial_attn
        self.loss_weights = loss_weights
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.input_size = input_size
        self.epochs = epochs
        self.max_steps = max_steps
        self.seed = seed
        self.prompts = prompts
        self.encoder_backend = encoder_backend
        self.encoder_weights = encoder_weights
        self.segmenter_backend = segmenter_backend
        self.segmenter_weights = segmenter_weights

    def _config(self) -> TrainConfig:
        net = NetworkConfig(
            num_scales=self.num_scales,
            base_channels=self.base_channels,
            smb_per_rsmg=self.smb_per_rsmg,
            ssm_state_dim=self.ssm_state_dim,
            semantic_channels=self.semantic_channels,
            attention_mode=self.attention_mode,
            disable_asf=self.disable_asf,
            disable_spatial_attn=self.disable_spatial_attn,
        )
        weights = self.loss_weights
        if weights is None:
            weights = LossWeights()
        elif isinstance(weights, dict):
            weights = LossWeights(**weights)
        return TrainConfig(
            epochs=self.epochs, max_steps=self.max_steps, learning_rate=self.learning_rate,
            batch_size=self.batch_size, input_size=self.input_size, seed=self.seed,
            encoder_backend=self.encoder_backend, encoder_weights=self.encoder_weights,
            segmenter_backend=self.segmenter_backend, segmenter_weights=self.segmenter_weights,
            network=net, loss=weights,
        )

    def fit(self, X, y=None):
        images = check_images(X)
        cfg = self._config()
        encoder = build_encoder(cfg.encoder_backend, cfg.encoder_weights)
        self.segmenter_ = build_segmenter(cfg.segmenter_backend, cfg.segmenter_weights, cfg.network.semantic_channels)
        prompts = _resolve_prompts(self.prompts, encoder)
        if y is None:
            targets = [generate_pseudo_gt(im, prompts, encoder).image for im in images]
        else:
            targets = check_images(y)
        trainer = Trainer(cfg, images, targets, prompts, encoder, self.segmenter_)
        self.loss_curve_ = [trainer.train_step().breakdown for _ in range(trainer.total_steps())]
        self.model_ = trainer.model.eval()
        self.config_ = cfg
        return self

    def transform(self, X) -> list[np.ndarray]:
        check_is_fitted(self, "model_")
        return [infer(self.model_, self.segmenter_, im) for im in check_images(X)]

    def predict(self, X) -> list[np.ndarray]:
        return self.transform(X)

    def score(self, X, y) -> float:
        outs = self.transform(X)
        refs = check_images(y)
        if len(refs) != len(outs):
            raise ContractError(f"{len(outs)} images but {len(refs)} references")
        return float(np.mean([psnr(o, r) for o, r in zip(outs, refs)]))
