"""Command-line entry point: ``semexp <subcommand> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import random
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .encoders import PromptSet, build_encoder, build_segmenter, cosine_sim
from .imaging import IMAGE_SUFFIXES, build_manifest, DatasetManifest, load_image, save_image, to_tensor
from .losses import semantic_triple, total_loss
from .pseudogt import PseudoGTCache, generate_pseudo_gt, tune_prompts
from .training import TrainConfig, evaluate, infer, load_checkpoint, train

logger = logging.getLogger("semexp")


class UsageError(Exception):
    """Bad arguments detected after parsing; maps to exit code 2."""


def _seed(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)


def _dir(path: str | None, flag: str) -> Path:
    if path is None or not Path(path).is_dir():
        raise UsageError(f"{flag}: directory not found: {path}")
    return Path(path)


def _file(path: str | None, flag: str) -> Path:
    if path is None or not Path(path).is_file():
        raise UsageError(f"{flag}: file not found: {path}")
    return Path(path)


def _images(folder: Path) -> list[Path]:
    return sorted(p for p in folder.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def _load_prompts(path: str | None, encoder) -> PromptSet:
    if path is None:
        if not hasattr(encoder, "anchor_prompts"):
            raise UsageError("--prompts is required with a pretrained encoder")
        logger.warning("no --prompts given; using the stub encoder's anchor prompts")
        return encoder.anchor_prompts()
    return PromptSet.load(_file(path, "--prompts"))


# --------------------------------------------------------------- commands


def cmd_tune_prompts(args) -> int:
    dirs = {c: _dir(getattr(args, c), f"--{c}") for c in ("well", "under", "over")}
    encoder = build_encoder(args.encoder_backend, args.encoder_weights)
    groups = {c: [load_image(p) for p in _images(d)] for c, d in dirs.items()}
    for c, ims in groups.items():
        if not ims:
            raise UsageError(f"--{c}: no images in {dirs[c]}")
    init = PromptSet.load(_file(args.init, "--init")) if args.init else encoder.init_prompts(args.seed)
    result = tune_prompts(groups, init, encoder, steps=args.steps, lr=args.lr,
                          batch_size=args.batch_size, temperature=args.temperature, seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    result.prompts.save(out)
    curve = Path(args.curve) if args.curve else out.with_suffix(".loss.csv")
    with open(curve, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "mean_loss"])
        for i, v in enumerate(result.epoch_losses, 1):
            w.writerow([i, f"{v:.10g}"])
    print(f"prompts -> {out}  loss curve -> {curve}  epochs={len(result.epoch_losses)}")
    return 0


def cmd_gen_pgt(args) -> int:
    src = _dir(args.input, "--input")
    encoder = build_encoder(args.encoder_backend, args.encoder_weights)
    prompts = _load_prompts(args.prompts, encoder)
    cache = PseudoGTCache(args.cache, prompts, encoder)
    created = 0
    for p in _images(src):
        if p in cache:
            continue
        _, info = cache.get(p)
        created += 1
        logger.info("%s: %s gamma=%.4f", p.name, info["class"], info["gamma"])
    print(f"pseudo-GT cache {args.cache}: {created} new, {len(_images(src)) - created} cached")
    return 0


def cmd_train(args) -> int:
    cfg = TrainConfig.from_file(_file(args.config, "--config")) if args.config else TrainConfig()
    overrides = list(args.set or [])
    for flag, key in (("epochs", "epochs"), ("max_steps", "max_steps"), ("lr", "learning_rate"),
                      ("batch_size", "batch_size"), ("out_dir", "out_dir"), ("manifest", "train_manifest"),
                      ("prompts", "prompts"), ("seed", "seed")):
        value = getattr(args, flag)
        if value is not None:
            overrides.append(f"{key}={json.dumps(value)}")
    cfg = cfg.with_overrides(overrides)
    if cfg.epochs is None:
        raise UsageError("epochs must be set (config key 'epochs' or --epochs); there is no default")
    if cfg.train_manifest is None:
        raise UsageError("a training manifest is required (config key 'train_manifest' or --manifest)")
    _file(cfg.train_manifest, "--manifest")
    _seed(cfg.seed)
    result = train(cfg, resume=args.resume, force=args.force)
    print(f"checkpoint -> {result.checkpoint}  log -> {result.log_path}  steps={len(result.records)}")
    return 0


def cmd_infer(args) -> int:
    src = _dir(args.input, "--input")
    model = load_checkpoint(_file(args.checkpoint, "--checkpoint"))
    segmenter = build_segmenter(args.segmenter_backend, args.segmenter_weights, model.cfg.semantic_channels)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = _images(src)
    for p in paths:
        save_image(out / f"{p.stem}.png", infer(model, segmenter, load_image(p), args.size))
    print(f"{len(paths)} images -> {out}")
    return 0


def cmd_eval(args) -> int:
    if args.manifest:
        manifest = DatasetManifest.from_json(_file(args.manifest, "--manifest"))
    elif args.data_root:
        manifest = build_manifest(_dir(args.data_root, "--data-root"), args.layout, split="test")
    else:
        raise UsageError("one of --manifest or --data-root is required")
    model = load_checkpoint(_file(args.checkpoint, "--checkpoint"))
    segmenter = build_segmenter(args.segmenter_backend, args.segmenter_weights, model.cfg.semantic_channels)
    report = evaluate(manifest, model, segmenter, args.size)
    print(report.table())
    if args.json:
        report.to_json(args.json)
    return 0


def _stats(t: torch.Tensor) -> dict:
    t = t.detach().double()
    return {"shape": list(t.shape), "mean": t.mean().item(), "std": t.std().item() if t.numel() > 1 else 0.0,
            "min": t.min().item(), "max": t.max().item()}


def cmd_inspect(args) -> int:
    model = load_checkpoint(_file(args.checkpoint, "--checkpoint"))
    image_path = _file(args.image, "--image")
    segmenter = build_segmenter(args.segmenter_backend, args.segmenter_weights, model.cfg.semantic_channels)
    encoder = build_encoder(args.encoder_backend, args.encoder_weights)
    prompts = _load_prompts(args.prompts, encoder)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    image = load_image(image_path)
    x = to_tensor(image)
    stats: dict = {}

    def record(name):
        def hook(module, inputs, output):
            if isinstance(output, torch.Tensor) and name not in stats:
                stats[name] = _stats(output)
        return hook

    # top-level stages and their direct children (each SIMR, down/up conv, head)
    hooks = [mod.register_forward_hook(record(name)) for name, mod in model.named_modules()
             if name and name.count(".") <= 1]
    model.eval()
    with torch.no_grad():
        seg = segmenter.segment(x)
        y = model(x, seg)
        pgt = to_tensor(generate_pseudo_gt(image, prompts, encoder).image)
        triple = semantic_triple(segmenter, model.semantic.conv, y, pgt, x)
        emb = encoder.encode_image(y)
        sims = cosine_sim(emb[:, None, :], encoder.encode_prompts(prompts).to(emb.dtype)[None])
        _, breakdown = total_loss(y, pgt, triple, sims)
    for h in hooks:
        h.remove()
    (out / "activations.json").write_text(json.dumps(stats, indent=2))
    (out / "loss_breakdown.json").write_text(json.dumps(breakdown.to_dict(), indent=2))
    with open(out / "activations.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["module", "mean", "std", "min", "max"])
        for name, s in stats.items():
            w.writerow([name, s["mean"], s["std"], s["min"], s["max"]])
    save_image(out / "output.png", y[0].permute(1, 2, 0).double().numpy())
    print(json.dumps(breakdown.to_dict()))
    return 0


# ----------------------------------------------------------------- parser


def _backend_flags(p, encoder=True, segmenter=True):
    if encoder:
        p.add_argument("--encoder-backend", default="stub", choices=["stub", "pretrained"])
        p.add_argument("--encoder-weights", default=None, help="local path or hub id for the pretrained encoder")
    if segmenter:
        p.add_argument("--segmenter-backend", default="stub", choices=["stub", "pretrained"])
        p.add_argument("--segmenter-weights", default=None, help="path to segmenter weights")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="semexp", description="Semantic-aware exposure correction pipeline.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log at INFO level")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("tune-prompts", help="learn well/under/over prompts from example folders")
    p.add_argument("--well", required=True, help="folder of well-exposed images")
    p.add_argument("--under", required=True, help="folder of under-exposed images")
    p.add_argument("--over", required=True, help="folder of over-exposed images")
    p.add_argument("--out", required=True, help="output prompt file (e.g. prompts.bin)")
    p.add_argument("--curve", default=None, help="loss-curve CSV (default: <out>.loss.csv)")
    p.add_argument("--init", default=None, help="start from an existing prompt file")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--batch-size", type=int, default=None, help="default: full batch")
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    _backend_flags(p, segmenter=False)
    p.set_defaults(func=cmd_tune_prompts)

    p = sub.add_parser("gen-pgt", help="generate (or reuse) cached pseudo ground truth")
    p.add_argument("--input", required=True, help="folder of input images")
    p.add_argument("--prompts", default=None, help="prompt file from tune-prompts")
    p.add_argument("--cache", required=True, help="cache folder")
    p.add_argument("--seed", type=int, default=0)
    _backend_flags(p, segmenter=False)
    p.set_defaults(func=cmd_gen_pgt)

    p = sub.add_parser("train", help="train the correction network")
    p.add_argument("--config", default=None, help="JSON file with TrainConfig keys")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key; dotted for nested (network.base_channels=8)")
    p.add_argument("--manifest", default=None, help="training manifest JSON")
    p.add_argument("--prompts", default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--out-dir", default=None)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--force", action="store_true", help="accept a checkpoint with a different config hash")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="correct every image in a folder")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=None, help="resize to SIZE x SIZE first")
    p.add_argument("--seed", type=int, default=0)
    _backend_flags(p, encoder=False)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="PSNR/SSIM against references, grouped by exposure")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", default=None, help="manifest JSON with references")
    p.add_argument("--data-root", default=None, help="dataset folder (alternative to --manifest)")
    p.add_argument("--layout", default="msec", choices=["flat", "msec", "sice"])
    p.add_argument("--json", default=None, help="write the report as JSON")
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    _backend_flags(p, encoder=False)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="activation statistics and loss breakdown for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="folder for activations.json/.csv, loss_breakdown.json")
    p.add_argument("--prompts", default=None)
    p.add_argument("--seed", type=int, default=0)
    _backend_flags(p)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # argparse exits with 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.seed is not None:
        _seed(args.seed)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"semexp {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # any runtime failure maps to exit code 1
        logger.debug("failure", exc_info=True)
        print(f"semexp {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
