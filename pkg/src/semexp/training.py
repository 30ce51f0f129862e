"""Training loop, checkpoints and the evaluation harness."""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import zipfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .encoders import PromptSet, build_encoder, build_segmenter, cosine_sim, parameter_checksum
from .exceptions import ContractError, IntegrityError, NumericError
from .imaging import (
    DatasetManifest,
    check_image,
    load_image,
    psnr,
    quantize,
    resize_and_augment,
    sample_flips,
    ssim,
    to_image,
    to_tensor,
)
from .losses import LossBreakdown, LossWeights, semantic_triple, total_loss
from .network import ExposureNet, NetworkConfig
from .pseudogt import PseudoGTCache

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "semexp-checkpoint/1"


# ------------------------------------------------------------------ config


@dataclass
class TrainConfig:
    """Every knob of a training run; loadable from JSON, overridable by ``key=value`` strings.

    ``epochs`` has no default and must be set. ``max_steps`` optionally caps
    the run inside the epoch budget.
    """

    epochs: int | None = None
    max_steps: int | None = None
    learning_rate: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.99)
    batch_size: int = 8
    input_size: int | None = 384
    seed: int = 0
    checkpoint_every: int = 500
    train_manifest: str | None = None
    val_manifest: str | None = None
    prompts: str | None = None
    pgt_cache: str | None = None
    out_dir: str = "runs/default"
    encoder_backend: str = "stub"
    encoder_weights: str | None = None
    segmenter_backend: str = "stub"
    segmenter_weights: str | None = None
    network: NetworkConfig = field(default_factory=NetworkConfig)
    loss: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if isinstance(self.network, dict):
            self.network = NetworkConfig.from_dict(self.network)
        if isinstance(self.loss, dict):
            self.loss = LossWeights(**self.loss)
        self.betas = tuple(float(b) for b in self.betas)
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        if not self.learning_rate >= 0 or not math.isfinite(self.learning_rate):
            raise ContractError("learning_rate must be a finite non-negative number")
        if self.epochs is not None and self.epochs < 1:
            raise ContractError("epochs must be >= 1")
        if self.max_steps is not None and self.max_steps < 0:
            raise ContractError("max_steps must be >= 0")
        if self.input_size is not None and self.input_size < 1:
            raise ContractError("input_size must be >= 1")
        if self.checkpoint_every < 1:
            raise ContractError("checkpoint_every must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path

    def with_overrides(self, overrides: Sequence[str]) -> "TrainConfig":
        """Apply ``key=value`` strings; nested keys use dots (``network.base_channels=8``).

        Values are parsed as JSON when possible and kept as strings otherwise.
        """
        d = self.to_dict()
        for item in overrides:
            if "=" not in item:
                raise ContractError(f"override {item!r} is not key=value")
            key, raw = item.split("=", 1)
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            target = d
            *parents, leaf = key.split(".")
            for p in parents:
                if not isinstance(target.get(p), dict):
                    raise ContractError(f"unknown config section {p!r} in override {item!r}")
                target = target[p]
            if leaf not in target:
                raise ContractError(f"unknown config key {key!r}")
            target[leaf] = value
        return TrainConfig.from_dict(d)


# -------------------------------------------------------------- checkpoints


def _tensor_bytes(t: torch.Tensor) -> bytes:
    return t.detach().cpu().contiguous().numpy().tobytes()


def _npy(t: torch.Tensor) -> bytes:
    buf = io.BytesIO()
    np.save(buf, t.detach().cpu().contiguous().numpy(), allow_pickle=False)
    return buf.getvalue()


def _optimizer_tensors(opt: torch.optim.Optimizer) -> tuple[dict, dict]:
    sd = opt.state_dict()
    tensors, scalars = {}, {}
    for idx, st in sd["state"].items():
        for k, v in st.items():
            if isinstance(v, torch.Tensor):
                tensors[f"optim/{idx}/{k}"] = v
            else:
                scalars[f"{idx}/{k}"] = v
    groups = [dict(g, betas=list(g["betas"])) if "betas" in g else dict(g) for g in sd["param_groups"]]
    return tensors, {"param_groups": groups, "scalars": scalars}


def save_checkpoint(path, model: ExposureNet, optimizer: torch.optim.Optimizer | None = None,
                    state: dict | None = None, extra: dict | None = None) -> Path:
    """Write a zip holding every tensor as ``.npy`` plus a JSON manifest.

    The manifest records name, shape, dtype and sha256 per tensor, the
    network config and its hash, optimizer hyper-parameters and any
    JSON-serialisable trainer ``state``.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {f"model/{k}": v for k, v in model.state_dict().items()}
    opt_meta = None
    if optimizer is not None:
        opt_tensors, opt_meta = _optimizer_tensors(optimizer)
        tensors.update(opt_tensors)
    entries = [
        {
            "name": name,
            "shape": list(t.shape),
            "dtype": str(t.dtype).replace("torch.", ""),
            "sha256": hashlib.sha256(_tensor_bytes(t)).hexdigest(),
        }
        for name, t in tensors.items()
    ]
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "config": model.cfg.to_dict(),
        "config_hash": model.cfg.digest(),
        "tensors": entries,
        "optimizer": opt_meta,
        "state": state or {},
        "extra": extra or {},
    }
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=2))
        for name, t in tensors.items():
            zf.writestr(f"{name}.npy", _npy(t))
    tmp.replace(path)
    return path


@dataclass
class Checkpoint:
    config: NetworkConfig
    model_state: dict
    optimizer_state: dict | None
    state: dict
    extra: dict

    def build_model(self) -> ExposureNet:
        model = ExposureNet(self.config)
        model.load_state_dict(self.model_state)
        return model


def read_checkpoint(path, expected: NetworkConfig | None = None, force: bool = False) -> Checkpoint:
    """Read and verify a checkpoint.

    Every tensor is checked against its recorded sha256, shape and dtype. A
    config hash different from ``expected`` is refused unless ``force``.
    """
    path = Path(path)
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            if manifest.get("format") != CHECKPOINT_FORMAT:
                raise IntegrityError(f"{path}: unsupported checkpoint format {manifest.get('format')!r}")
            cfg = NetworkConfig.from_dict(manifest["config"])
            if cfg.digest() != manifest["config_hash"]:
                raise IntegrityError(f"{path}: config does not match its recorded hash")
            if expected is not None and expected.digest() != manifest["config_hash"]:
                msg = f"{path}: checkpoint was written for a different network config"
                if not force:
                    raise IntegrityError(msg + " (use force to override)")
                logger.warning(msg + "; loading anyway")
            tensors = {}
            for entry in manifest["tensors"]:
                arr = np.load(io.BytesIO(zf.read(entry["name"] + ".npy")), allow_pickle=False)
                t = torch.from_numpy(arr.copy())
                if hashlib.sha256(_tensor_bytes(t)).hexdigest() != entry["sha256"]:
                    raise IntegrityError(f"{path}: checksum mismatch for tensor {entry['name']}")
                if list(t.shape) != entry["shape"] or str(t.dtype).replace("torch.", "") != entry["dtype"]:
                    raise IntegrityError(f"{path}: shape/dtype mismatch for tensor {entry['name']}")
                tensors[entry["name"]] = t
    except IntegrityError:
        raise
    except (zipfile.BadZipFile, KeyError, ValueError, OSError, EOFError) as exc:
        raise IntegrityError(f"{path}: corrupt checkpoint ({exc})") from exc

    model_state = {k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")}
    opt_state = None
    meta = manifest.get("optimizer")
    if meta is not None:
        state: dict = {}
        for k, v in tensors.items():
            if k.startswith("optim/"):
                _, idx, key = k.split("/", 2)
                state.setdefault(int(idx), {})[key] = v
        for k, v in meta["scalars"].items():
            idx, key = k.split("/", 1)
            state.setdefault(int(idx), {})[key] = v
        groups = [dict(g, betas=tuple(g["betas"])) if "betas" in g else g for g in meta["param_groups"]]
        opt_state = {"state": state, "param_groups": groups}
    return Checkpoint(cfg, model_state, opt_state, manifest.get("state", {}), manifest.get("extra", {}))


def load_checkpoint(path, cfg: NetworkConfig | None = None, force: bool = False) -> ExposureNet:
    """Rebuild the network stored at ``path`` (bit-identical parameters)."""
    ckpt = read_checkpoint(path, cfg, force)
    model = ExposureNet(cfg if (cfg is not None and force) else ckpt.config)
    try:
        model.load_state_dict(ckpt.model_state)
    except RuntimeError as exc:
        raise IntegrityError(f"{path}: parameters do not fit the network config ({exc})") from exc
    model.eval()
    return model


# ------------------------------------------------------------------ trainer


@dataclass
class StepRecord:
    step: int
    breakdown: LossBreakdown

    def to_json(self) -> str:
        b = self.breakdown
        return json.dumps({"step": self.step, "mse": b.mse, "cos": b.cos, "sfc": b.sfc, "ipa": b.ipa, "total": b.total})


class Trainer:
    """Owns the network, optimizer and data order for one run.

    ``inputs`` and ``targets`` are paired lists of ``(H, W, 3)`` images (the
    targets are the fixed pseudo-GT). Images are resized once to
    ``input_size``; each epoch draws a fresh permutation and per-image flips
    from a generator seeded by ``cfg.seed``, and the same flips are applied to
    an input and its target.
    """

    def __init__(self, cfg: TrainConfig, inputs: Sequence, targets: Sequence, prompts: PromptSet | None = None,
                 encoder=None, segmenter=None, model: ExposureNet | None = None):
        if len(inputs) != len(targets):
            raise ContractError(f"{len(inputs)} inputs but {len(targets)} targets")
        if len(inputs) == 0:
            raise ContractError("no training images")
        self.cfg = cfg
        torch.manual_seed(cfg.seed)
        self.model = model if model is not None else ExposureNet(cfg.network)
        self.encoder = encoder or build_encoder(cfg.encoder_backend, cfg.encoder_weights)
        self.segmenter = segmenter or build_segmenter(
            cfg.segmenter_backend, cfg.segmenter_weights, cfg.network.semantic_channels
        )
        if prompts is None:
            if not hasattr(self.encoder, "anchor_prompts"):
                raise ContractError("prompts are required with a pretrained encoder")
            logger.warning("no prompts given; using the stub encoder's anchor prompts")
            prompts = self.encoder.anchor_prompts()
        self.prompts = prompts.detached()
        with torch.no_grad():
            self.text = self.encoder.encode_prompts(self.prompts).detach()
        self._frozen_sum = self.frozen_checksum()

        self.inputs = [self._prepare(x) for x in inputs]
        self.targets = [self._prepare(y) for y in targets]
        for x, y in zip(self.inputs, self.targets):
            if x.shape != y.shape:
                raise ContractError(f"input/target sizes differ: {x.shape} vs {y.shape}")
        if cfg.input_size is None and len({x.shape for x in self.inputs}) > 1 and cfg.batch_size > 1:
            raise ContractError("images of different sizes need input_size or batch_size=1")

        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=cfg.learning_rate, betas=cfg.betas)
        self.rng = np.random.default_rng(cfg.seed)
        self.step = 0
        self.epoch = 0
        self.order: list[int] = []
        self.flips: list[tuple[bool, bool]] = []
        self.cursor = 0

    def _prepare(self, image) -> np.ndarray:
        arr = check_image(image)
        if self.cfg.input_size is not None:
            arr = resize_and_augment(arr, self.cfg.input_size, flips=(False, False))
        return arr

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.inputs) / self.cfg.batch_size)

    def total_steps(self) -> int:
        if self.cfg.epochs is None:
            if self.cfg.max_steps is None:
                raise ContractError("TrainConfig.epochs must be set explicitly")
            return self.cfg.max_steps
        total = self.cfg.epochs * self.steps_per_epoch
        return total if self.cfg.max_steps is None else min(total, self.cfg.max_steps)

    def frozen_checksum(self) -> str:
        return parameter_checksum(list(self.prompts.tensors()) + list(self.encoder.parameters()))

    # -- data order
    def _next_indices(self) -> list[int]:
        if self.cursor >= len(self.order):
            self.order = [int(i) for i in self.rng.permutation(len(self.inputs))]
            self.flips = [sample_flips(self.rng) for _ in self.order]
            self.cursor = 0
            self.epoch += 1
        idx = list(range(self.cursor, min(self.cursor + self.cfg.batch_size, len(self.order))))
        self.cursor = idx[-1] + 1
        return idx

    def _batch(self, positions) -> tuple[torch.Tensor, torch.Tensor]:
        xs, ys = [], []
        for pos in positions:
            i, (hf, vf) = self.order[pos], self.flips[pos]
            x, y = self.inputs[i], self.targets[i]
            if hf:
                x, y = x[:, ::-1], y[:, ::-1]
            if vf:
                x, y = x[::-1], y[::-1]
            xs.append(to_tensor(x))
            ys.append(to_tensor(y))
        return torch.cat(xs), torch.cat(ys)

    # -- optimisation
    def compute_loss(self, inp: torch.Tensor, pgt: torch.Tensor):
        seg = self.segmenter.segment(inp)
        out = self.model(inp, seg)
        triple = semantic_triple(self.segmenter, self.model.semantic.conv, out, pgt, inp)
        emb = self.encoder.encode_image(out)
        sims = cosine_sim(emb[:, None, :], self.text.to(emb.dtype)[None])
        return total_loss(out, pgt, triple, sims, self.cfg.loss)

    def train_step(self) -> StepRecord:
        inp, pgt = self._batch(self._next_indices())
        self.model.train()
        loss, breakdown = self.compute_loss(inp, pgt)
        if not torch.isfinite(loss):
            raise NumericError(f"non-finite loss at step {self.step + 1}")
        self.optimizer.zero_grad()
        loss.backward()
        self.optimizer.step()
        self.step += 1
        return StepRecord(self.step, breakdown)

    # -- state
    def state(self) -> dict:
        return {
            "step": self.step,
            "epoch": self.epoch,
            "cursor": self.cursor,
            "order": self.order,
            "flips": [list(f) for f in self.flips],
            "rng": self.rng.bit_generator.state,
            "train_config": self.cfg.to_dict(),
            "prompt_digest": self.prompts.digest(),
        }

    def save(self, path) -> Path:
        return save_checkpoint(path, self.model, self.optimizer, self.state())

    def restore(self, path, force: bool = False) -> None:
        """Load model, optimizer and data-order state so the run continues exactly."""
        ckpt = read_checkpoint(path, self.cfg.network, force)
        self.model.load_state_dict(ckpt.model_state)
        if ckpt.optimizer_state is not None:
            self.optimizer.load_state_dict(ckpt.optimizer_state)
        s = ckpt.state
        self.step, self.epoch, self.cursor = s["step"], s["epoch"], s["cursor"]
        self.order = list(s["order"])
        self.flips = [tuple(f) for f in s["flips"]]
        self.rng.bit_generator.state = s["rng"]

    def run(self, out_dir=None, log_path=None, val_manifest: DatasetManifest | None = None) -> "TrainResult":
        """Train up to :meth:`total_steps`, logging JSON lines and checkpointing.

        On a non-finite loss the run aborts with :class:`NumericError`; the
        last checkpoint written before that step stays on disk untouched.
        """
        out = Path(out_dir or self.cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        log_path = Path(log_path) if log_path else out / "train_log.jsonl"
        last = out / "last.ckpt"
        best = out / "best.ckpt"
        best_score = -math.inf
        records: list[StepRecord] = []
        total = self.total_steps()
        with open(log_path, "a") as log:
            while self.step < total:
                rec = self.train_step()
                records.append(rec)
                log.write(rec.to_json() + "\n")
                log.flush()
                if self.step % self.cfg.checkpoint_every == 0 or self.step == total:
                    self.save(last)
                    if val_manifest is not None:
                        report = evaluate(val_manifest, self.model, self.segmenter, self.cfg.input_size)
                        score = report.groups["average"]["psnr"]
                        if score > best_score:
                            best_score = score
                            self.save(best)
        if self.frozen_checksum() != self._frozen_sum:
            raise IntegrityError("frozen prompts or encoder weights changed during training")
        if not last.exists():
            self.save(last)
        return TrainResult(last, log_path, records, best if best.exists() else None)


@dataclass
class TrainResult:
    checkpoint: Path
    log_path: Path
    records: list[StepRecord]
    best_checkpoint: Path | None = None

    @property
    def losses(self) -> list[float]:
        return [r.breakdown.total for r in self.records]


def train(cfg: TrainConfig, resume=None, force: bool = False) -> TrainResult:
    """Run training from a config: manifest, pseudo-GT cache, loop, checkpoints.

    Well-exposed entries are excluded from the training inputs. Pseudo-GT
    images are taken from the cache under ``cfg.pgt_cache`` (default
    ``<out_dir>/pgt``) and generated on first touch.
    """
    if cfg.epochs is None:
        raise ContractError("TrainConfig.epochs must be set explicitly (there is no default)")
    if cfg.train_manifest is None:
        raise ContractError("TrainConfig.train_manifest is required")
    manifest = DatasetManifest.from_json(cfg.train_manifest)
    entries = manifest.correction_inputs()
    if not entries:
        raise ContractError(f"{cfg.train_manifest} has no under/over/unknown entries to train on")
    encoder = build_encoder(cfg.encoder_backend, cfg.encoder_weights)
    segmenter = build_segmenter(cfg.segmenter_backend, cfg.segmenter_weights, cfg.network.semantic_channels)
    prompts = PromptSet.load(cfg.prompts) if cfg.prompts else None
    if prompts is None:
        if not hasattr(encoder, "anchor_prompts"):
            raise ContractError("TrainConfig.prompts is required with a pretrained encoder")
        prompts = encoder.anchor_prompts()
    cache = PseudoGTCache(cfg.pgt_cache or Path(cfg.out_dir) / "pgt", prompts, encoder)
    inputs, targets = [], []
    for e in entries:
        inputs.append(load_image(e.input))
        targets.append(cache.get(e.input)[0])
    trainer = Trainer(cfg, inputs, targets, prompts, encoder, segmenter)
    if resume is not None:
        trainer.restore(resume, force)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    val = DatasetManifest.from_json(cfg.val_manifest) if cfg.val_manifest else None
    return trainer.run(out, val_manifest=val)


# -------------------------------------------------------------- evaluation


def infer(model: ExposureNet, segmenter, image, size: int | None = None) -> np.ndarray:
    """Correct one ``(H, W, 3)`` image; ``size`` optionally resizes it first."""
    arr = check_image(image)
    if size is not None:
        arr = resize_and_augment(arr, size, flips=(False, False))
    dtype = next(model.parameters()).dtype
    x = to_tensor(arr, dtype)
    model.eval()
    with torch.no_grad():
        y = model(x, segmenter.segment(x))
    return to_image(y)


@dataclass
class ImageResult:
    input: str
    tag: str
    psnr: float
    ssim: float


@dataclass
class EvalReport:
    """Per-image metrics and per-group means.

    ``groups`` maps each tag present, plus ``average``, to ``{psnr, ssim,
    count}``. ``average`` is the mean of the ``under`` and ``over``
    aggregates when both exist, otherwise the mean over all scored images.
    """

    images: list[ImageResult]
    groups: dict
    skipped: int = 0
    skipped_inputs: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "images": [asdict(r) for r in self.images],
            "groups": self.groups,
            "skipped": self.skipped,
            "skipped_inputs": self.skipped_inputs,
        }

    def to_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, default=_json_float))
        return path

    def table(self) -> str:
        lines = [f"{'group':<10}{'count':>7}{'PSNR':>12}{'SSIM':>10}"]
        for name, g in self.groups.items():
            lines.append(f"{name:<10}{g['count']:>7}{g['psnr']:>12.4f}{g['ssim']:>10.4f}")
        if self.skipped:
            lines.append(f"skipped (no reference): {self.skipped}")
        return "\n".join(lines)


def _json_float(x):
    return str(x)


def aggregate(results: Sequence[ImageResult]) -> dict:
    """Group means per tag plus the ``average`` group."""
    groups: dict = {}
    for tag in sorted({r.tag for r in results}):
        rs = [r for r in results if r.tag == tag]
        groups[tag] = {
            "psnr": float(np.mean([r.psnr for r in rs])),
            "ssim": float(np.mean([r.ssim for r in rs])),
            "count": len(rs),
        }
    if "under" in groups and "over" in groups:
        u, o = groups["under"], groups["over"]
        groups["average"] = {
            "psnr": (u["psnr"] + o["psnr"]) / 2,
            "ssim": (u["ssim"] + o["ssim"]) / 2,
            "count": u["count"] + o["count"],
        }
    elif results:
        groups["average"] = {
            "psnr": float(np.mean([r.psnr for r in results])),
            "ssim": float(np.mean([r.ssim for r in results])),
            "count": len(results),
        }
    return groups


def evaluate(manifest: DatasetManifest, checkpoint, segmenter=None, size: int | None = None) -> EvalReport:
    """Run inference on every entry with a reference and score PSNR/SSIM.

    ``checkpoint`` is a path or an :class:`ExposureNet`. Entries without a
    reference are skipped with a warning and counted. Outputs are scored after
    8-bit quantisation. When ``size`` is given,
    input and reference are both resized to ``size x size``.
    """
    model = checkpoint if isinstance(checkpoint, ExposureNet) else load_checkpoint(checkpoint)
    segmenter = segmenter or build_segmenter("stub", None, model.cfg.semantic_channels)
    results, skipped = [], []
    for e in manifest:
        if e.reference is None:
            logger.warning("no reference for %s; skipped", e.input)
            skipped.append(str(e.input))
            continue
        ref = load_image(e.reference)
        if size is not None:
            ref = resize_and_augment(ref, size, flips=(False, False))
        out = quantize(infer(model, segmenter, load_image(e.input), size))  # score what a saved PNG holds
        results.append(ImageResult(str(e.input), e.tag, psnr(out, ref), ssim(out, ref)))
    return EvalReport(results, aggregate(results), len(skipped), skipped)


__all__ = [
    "TrainConfig",
    "Trainer",
    "TrainResult",
    "StepRecord",
    "Checkpoint",
    "save_checkpoint",
    "read_checkpoint",
    "load_checkpoint",
    "train",
    "infer",
    "evaluate",
    "aggregate",
    "EvalReport",
    "ImageResult",
]
