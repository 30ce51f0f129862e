import json
import math
import zipfile

import numpy as np
import pytest
import torch

from semexp.exceptions import ContractError, IntegrityError, NumericError
from semexp.encoders import StubSegmenter
from semexp.imaging import DatasetManifest, ManifestEntry, load_image, psnr, save_image, ssim
from semexp.network import ExposureNet, NetworkConfig
from semexp.training import (
    ImageResult,
    TrainConfig,
    Trainer,
    aggregate,
    evaluate,
    infer,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
    train,
)

from conftest import TINY, make_image


def tiny_config(**kw):
    base = dict(epochs=50, max_steps=6, learning_rate=1e-3, batch_size=2, input_size=16,
                checkpoint_every=3, network=TINY)
    base.update(kw)
    return TrainConfig(**base)


def data(n=4):
    inputs = [make_image(m, seed=i) for i, m in enumerate(np.linspace(0.1, 0.9, n))]
    targets = [make_image(0.5, seed=10 + i) for i in range(n)]
    return inputs, targets


def trainer(cfg=None, **kw):
    inputs, targets = data()
    return Trainer(cfg or tiny_config(**kw), inputs, targets)


# ------------------------------------------------------------------ config


def test_config_roundtrip_and_overrides(tmp_path):
    cfg = tiny_config()
    back = TrainConfig.from_file(cfg.save(tmp_path / "c.json"))
    assert back == cfg
    over = cfg.with_overrides(["learning_rate=0.5", "network.base_channels=4", "loss.use_ipa=false", "out_dir=x"])
    assert over.learning_rate == 0.5 and over.network.base_channels == 4
    assert over.loss.use_ipa is False and over.out_dir == "x"


@pytest.mark.parametrize("bad", [["nokey"], ["missing=1"], ["network.nope=1"], ["bogus.x=1"]])
def test_bad_overrides(bad):
    with pytest.raises(ContractError):
        tiny_config().with_overrides(bad)


def test_config_validation():
    with pytest.raises(ContractError):
        TrainConfig(batch_size=0)
    with pytest.raises(ContractError):
        TrainConfig(learning_rate=float("nan"))
    with pytest.raises(ContractError):
        TrainConfig.from_dict({"epochs": 1, "unknown": 2})
    with pytest.raises(ContractError):
        Trainer(TrainConfig(network=TINY, input_size=16), *data()).total_steps()


# ----------------------------------------------------------------- trainer


def test_zero_learning_rate_leaves_parameters_untouched():
    t = trainer(learning_rate=0.0)
    before = {k: v.clone() for k, v in t.model.state_dict().items()}
    for _ in range(10):
        t.train_step()
    assert all(torch.equal(before[k], v) for k, v in t.model.state_dict().items())


def test_steps_and_epochs():
    t = trainer(max_steps=None, epochs=3)
    assert t.steps_per_epoch == 2 and t.total_steps() == 6
    assert trainer(max_steps=4, epochs=3).total_steps() == 4


def test_frozen_parts_unchanged_and_log_written(tmp_path):
    t = trainer()
    before = t.frozen_checksum()
    res = t.run(tmp_path)
    assert t.frozen_checksum() == before
    lines = [json.loads(x) for x in res.log_path.read_text().splitlines()]
    assert [x["step"] for x in lines] == list(range(1, 7))
    assert set(lines[0]) == {"step", "mse", "cos", "sfc", "ipa", "total"}
    assert res.checkpoint.exists()


def test_nan_aborts_and_keeps_last_checkpoint(tmp_path, monkeypatch):
    t = trainer()
    real = t.compute_loss

    def poisoned(inp, pgt):
        loss, b = real(inp, pgt)
        return (loss * math.nan if t.step >= 4 else loss), b

    monkeypatch.setattr(t, "compute_loss", poisoned)
    with pytest.raises(NumericError):
        t.run(tmp_path)
    assert read_checkpoint(tmp_path / "last.ckpt").state["step"] == 3


def test_seeded_runs_repeat_and_resume_matches(tmp_path):
    a = trainer().run(tmp_path / "a").losses
    b = trainer().run(tmp_path / "b").losses
    assert a == b

    first = trainer(max_steps=3)
    first.run(tmp_path / "c")
    resumed = trainer()
    resumed.restore(tmp_path / "c" / "last.ckpt")
    rest = resumed.run(tmp_path / "d").losses
    assert np.allclose(rest, a[3:], atol=1e-6, rtol=0)


def test_mismatched_pairs_rejected():
    inputs, targets = data()
    with pytest.raises(ContractError):
        Trainer(tiny_config(), inputs, targets[:-1])
    with pytest.raises(ContractError):
        Trainer(tiny_config(), [], [])


# ------------------------------------------------------------- checkpoints


def test_checkpoint_roundtrip(tmp_path):
    t = trainer()
    t.train_step()
    path = t.save(tmp_path / "m.ckpt")
    model = load_checkpoint(path)
    assert not model.training
    for k, v in t.model.state_dict().items():
        assert torch.equal(model.state_dict()[k], v)
    ckpt = read_checkpoint(path)
    assert ckpt.state["step"] == 1 and ckpt.optimizer_state is not None
    with zipfile.ZipFile(path) as zf:
        assert all(not n.endswith((".pkl", ".pt")) for n in zf.namelist())


def test_tampered_tensor_is_detected(tmp_path):
    path = save_checkpoint(tmp_path / "m.ckpt", ExposureNet(TINY))
    bad = tmp_path / "bad.ckpt"
    with zipfile.ZipFile(path) as src, zipfile.ZipFile(bad, "w") as dst:
        victim = next(n for n in src.namelist() if n.endswith(".npy"))
        for name in src.namelist():
            blob = src.read(name)
            if name == victim:
                blob = blob[:-1] + bytes([blob[-1] ^ 1])
            dst.writestr(name, blob)
    with pytest.raises(IntegrityError):
        read_checkpoint(bad)


def test_truncated_file_and_config_mismatch(tmp_path):
    path = save_checkpoint(tmp_path / "m.ckpt", ExposureNet(TINY))
    (tmp_path / "cut.ckpt").write_bytes(path.read_bytes()[:200])
    with pytest.raises(IntegrityError):
        read_checkpoint(tmp_path / "cut.ckpt")
    other = NetworkConfig(num_scales=2, base_channels=4, smb_per_rsmg=1)
    with pytest.raises(IntegrityError):
        read_checkpoint(path, expected=other)
    assert read_checkpoint(path, expected=other, force=True).config == TINY


# -------------------------------------------------------------- evaluation


def _identity_model():
    model = ExposureNet(TINY)
    torch.nn.init.zeros_(model.head.weight)
    torch.nn.init.zeros_(model.head.bias)
    return model


def _pairs(tmp_path, specs):
    entries = []
    for i, (tag, m_in, m_ref) in enumerate(specs):
        inp = save_image(tmp_path / f"in{i}.png", make_image(m_in, seed=i))
        ref = None if m_ref is None else save_image(tmp_path / f"ref{i}.png", make_image(m_ref, seed=50 + i))
        entries.append(ManifestEntry(inp, tag, ref))
    return DatasetManifest(entries, "test")


def test_evaluate_self_reference_is_perfect(tmp_path):
    entries = []
    for i in range(3):
        p = save_image(tmp_path / f"a{i}.png", make_image(0.4, seed=i))
        entries.append(ManifestEntry(p, "under", p))
    report = evaluate(DatasetManifest(entries), _identity_model())
    assert all(math.isinf(r.psnr) and r.ssim == pytest.approx(1.0, abs=1e-9) for r in report.images)


def test_identity_network_reports_raw_metrics(tmp_path):
    manifest = _pairs(tmp_path, [("under", 0.2, 0.5), ("over", 0.8, 0.5)])
    report = evaluate(manifest, _identity_model())
    for r, e in zip(report.images, manifest):
        raw_in, raw_ref = load_image(e.input), load_image(e.reference)
        assert r.psnr == pytest.approx(psnr(raw_in, raw_ref), abs=1e-9)
        assert r.ssim == pytest.approx(ssim(raw_in, raw_ref), abs=1e-9)


def test_average_is_mean_of_under_and_over():
    rs = [ImageResult("a", "under", 20.0, 0.8), ImageResult("b", "under", 22.0, 0.9),
          ImageResult("c", "over", 18.0, 0.7)]
    g = aggregate(rs)
    assert g["under"]["psnr"] == 21.0 and g["over"]["psnr"] == 18.0
    assert g["average"]["psnr"] == 19.5  # not the pooled mean 20.0
    assert g["average"]["ssim"] == pytest.approx((0.85 + 0.7) / 2)
    assert aggregate([ImageResult("a", "unknown", 10.0, 0.5)])["average"]["psnr"] == 10.0


def test_missing_references_are_skipped_and_counted(tmp_path, caplog):
    manifest = _pairs(tmp_path, [("under", 0.2, 0.5), ("over", 0.8, None), ("over", 0.7, 0.5)])
    report = evaluate(manifest, _identity_model())
    assert len(report.images) == 2 and report.skipped == 1
    assert "no reference" in caplog.text
    assert "skipped" in report.table()
    out = json.loads(report.to_json(tmp_path / "r.json").read_text())
    assert out["skipped"] == 1 and set(out["groups"]) == {"under", "over", "average"}


def test_infer_resizes_and_keeps_range():
    out = infer(_identity_model(), StubSegmenter(), make_image(0.3, size=20), size=16)
    assert out.shape == (16, 16, 3) and out.min() >= 0.0 and out.max() <= 1.0


# ---------------------------------------------------------------- pipeline


def test_train_from_manifest(tmp_path):
    manifest = _pairs(tmp_path, [("under", 0.15, 0.5), ("over", 0.85, 0.5), ("well", 0.5, 0.5)])
    mpath = manifest.to_json(tmp_path / "m.json")
    cfg = tiny_config(train_manifest=str(mpath), val_manifest=str(mpath), out_dir=str(tmp_path / "run"),
                      max_steps=2, checkpoint_every=1)
    res = train(cfg)
    assert len(res.losses) == 2 and res.best_checkpoint is not None
    assert (tmp_path / "run" / "config.json").exists()
    assert len(list((tmp_path / "run" / "pgt").glob("*.png"))) == 2  # well entry excluded
    with pytest.raises(ContractError):
        train(TrainConfig(train_manifest=str(mpath)))
