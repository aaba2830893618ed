import csv
import json

import numpy as np
import pytest
import torch

from dips import backbones, pipeline
from dips.cli import main
from dips.config import RunConfig
from dips.data import ManifestDataset, SyntheticDatasetSpec, generate_synthetic_dataset
from dips.errors import ConfigurationError, InvalidInputError, TrainingAbortedError
from dips.metrics import EvalRecord, evaluate_records
from dips.model import read_checkpoint


@pytest.fixture(scope="module")
def data_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny") / "data"
    spec = SyntheticDatasetSpec(num_images=40, image_size=32, split_fractions=(0.6, 0.2, 0.2), seed=1)
    generate_synthetic_dataset(spec, root)
    return root


def tiny_config(root, **over):
    values = {
        "data.root": str(root), "data.image_size": "32", "data.resize_to": "36",
        "model.base_channels": "4", "model.max_channels": "16",
        "optim.batch_size": "8", "optim.epochs": "2", "train.val_every": "1",
        "sampler.fg_count": "4", "sampler.bg_count": "4",
    }
    values.update(over)
    return RunConfig.from_flat(values)


def state_equal(a, b):
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


@pytest.fixture(scope="module")
def trained(data_root, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = tiny_config(data_root, **{"train.log_harvest": "true"})
    return cfg, pipeline.train(cfg, out)


def test_train_writes_artifacts(trained):
    cfg, res = trained
    assert res.checkpoint.is_file() and res.last_checkpoint.is_file()
    log = [json.loads(line) for line in (res.out_dir / "train_log.jsonl").read_text().splitlines()]
    assert [e["epoch"] for e in log] == [0, 1]
    for e in log:
        assert {"cpa", "crf", "cls", "total", "fallbacks", "val_pxap"} <= set(e)
        assert e["loss_set"] == "cpa+crf+cls"
    assert RunConfig.from_file(res.out_dir / "config.txt") == cfg
    assert set(res.frozen_digests) == {"classifier"}


def test_resume_continues_identically(trained, data_root, tmp_path):
    cfg, res = trained
    one = cfg.updated({"optim.epochs": 1, "train.log_harvest": False})
    pipeline.train(one, tmp_path / "a")
    resumed = pipeline.train(cfg.updated({"train.log_harvest": False}), tmp_path / "a",
                             resume=tmp_path / "a" / "last.pt")
    assert [e["epoch"] for e in resumed.history] == [0, 1]
    a = read_checkpoint(resumed.last_checkpoint)["model_state"]
    b = read_checkpoint(res.last_checkpoint)["model_state"]
    assert state_equal(a, b)


def test_cached_harvest_is_byte_identical(trained, tmp_path):
    cfg, res = trained
    for epoch in (0, 1):
        path = pipeline.harvest_cache_path(tmp_path / "cache", epoch)
        pipeline.harvest_epoch(cfg, epoch, path)
        assert path.read_bytes() == (res.out_dir / f"harvest_epoch{epoch:03d}.jsonl").read_bytes()
    cached = pipeline.train(cfg.updated({"harvest.cache_dir": str(tmp_path / "cache"),
                                         "train.log_harvest": False}), tmp_path / "run")
    a = read_checkpoint(cached.last_checkpoint)["model_state"]
    b = read_checkpoint(res.last_checkpoint)["model_state"]
    assert state_equal(a, b)


def test_sampling_before_augmentation_switch(data_root, tmp_path):
    cfg = tiny_config(data_root, **{"train.sample_after_augment": "false", "optim.epochs": "1"})
    res = pipeline.train(cfg, tmp_path)
    assert res.history[0]["cpa"] > 0


def test_nan_loss_aborts(data_root, tmp_path, monkeypatch):
    monkeypatch.setattr(pipeline, "partial_cross_entropy", lambda p, l: p.sum() * float("nan"))
    with pytest.raises(TrainingAbortedError) as err:
        pipeline.train(tiny_config(data_root), tmp_path)
    assert err.value.term == "cpa"


def test_configuration_mismatches(data_root, tmp_path):
    with pytest.raises(ConfigurationError):
        pipeline.train(tiny_config(data_root, **{"backbone.patch_size": "5"}), tmp_path / "a")
    with pytest.raises(ConfigurationError):
        pipeline.train(tiny_config(data_root, **{"data.augment": "false", "data.image_size": "64"}), tmp_path / "b")
    with pytest.raises(ConfigurationError):
        pipeline.train(tiny_config(tmp_path / "nowhere"), tmp_path / "c")
    with pytest.raises(ConfigurationError):
        pipeline.train(tiny_config(data_root, **{"backbone.provider": "pretrained",
                                                 "backbone.checkpoint": str(tmp_path / "x.pth")}), tmp_path / "d")


def test_infer_without_attention_provider(trained, data_root, tmp_path, monkeypatch):
    _, res = trained

    def forbidden(*a, **k):
        raise AssertionError("attention provider constructed at inference")

    monkeypatch.setattr(backbones.SyntheticAttentionProvider, "__init__", forbidden)
    monkeypatch.setattr(backbones.PretrainedAttentionProvider, "__init__", forbidden)
    monkeypatch.setattr(pipeline, "build_attention_provider", forbidden)
    manifest = data_root / "test.txt"
    pipeline.infer(res.checkpoint, manifest, tmp_path / "p1")
    pipeline.infer(res.checkpoint, manifest, tmp_path / "p2")
    ds = ManifestDataset(data_root, "test")
    for r in ds.records:
        m1 = np.load(tmp_path / "p1" / f"{r.image_id}.npy")
        assert m1.shape == (32, 32) and m1.min() >= 0 and m1.max() <= 1
        assert np.array_equal(m1, np.load(tmp_path / "p2" / f"{r.image_id}.npy"))
    assert (tmp_path / "p1" / "scores.csv").read_bytes() == (tmp_path / "p2" / "scores.csv").read_bytes()
    with pytest.raises(ConfigurationError):
        pipeline.infer(tmp_path / "missing.pt", manifest, tmp_path / "p3")


def test_evaluate_wraps_library_and_checks_ids(trained, data_root, tmp_path):
    _, res = trained
    manifest = data_root / "test.txt"
    pipeline.infer(res.checkpoint, manifest, tmp_path / "pred")
    got = pipeline.evaluate(tmp_path / "pred", manifest, tmp_path / "eval", tag="cpa+crf")
    direct = evaluate_records(pipeline.load_records(tmp_path / "pred", manifest))
    assert got == direct
    values, tag = pipeline.read_metrics(tmp_path / "eval" / "metrics.csv")
    assert tag == "cpa+crf" and values == direct
    assert (tmp_path / "eval" / "sweep_maxboxacc.png").is_file()
    with open(tmp_path / "eval" / "sweep_maxboxacc.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["threshold", "boxacc@0.3", "boxacc@0.5", "boxacc@0.7"] and len(rows) == 101

    first = ManifestDataset(data_root, "test").records[0].image_id
    (tmp_path / "pred" / f"{first}.npy").unlink()
    with pytest.raises(InvalidInputError, match=first):
        pipeline.load_records(tmp_path / "pred", manifest)


def test_ground_truth_predictions_score_perfectly(data_root, tmp_path):
    ds = ManifestDataset(data_root, "test")
    for i, r in enumerate(ds.records):
        np.save(tmp_path / f"{r.image_id}.npy", ds[i].mask.astype(np.float32))
    out = pipeline.evaluate(tmp_path, data_root / "test.txt", tmp_path / "eval", plot=False)
    assert out["new_maxboxacc"] == 1.0 and out["pxap"] == 1.0


def test_cli_end_to_end(tmp_path, capsys):
    data = tmp_path / "data"
    assert main(["generate-data", str(data), "--num-images", "20", "--image-size", "32"]) == 0
    assert main(["generate-data", str(data), "--num-images", "20"]) == 2
    assert "not empty" in capsys.readouterr().err
    conf = tmp_path / "c.txt"
    tiny_config(data, **{"optim.epochs": "1"}).save(conf)
    assert main(["train", "--config", str(conf), "--out", str(tmp_path / "run"), "--losses", "cpa+crf"]) == 0
    assert main(["train", "--config", str(conf), "--out", str(tmp_path / "run")]) == 2
    assert main(["harvest", "--config", str(conf), "--out", str(tmp_path / "cache")]) == 0
    assert (tmp_path / "cache" / "harvest_epoch000.jsonl").is_file()
    assert main(["infer", str(tmp_path / "run" / "best.pt"), str(data / "test.txt"),
                 "--out", str(tmp_path / "pred")]) == 0
    assert main(["evaluate", str(tmp_path / "pred"), str(data / "test.txt"), "--out", str(tmp_path / "eval"),
                 "--tag", "cpa+crf"]) == 0
    assert "pxap" in capsys.readouterr().out
    assert main(["plot", str(tmp_path / "eval" / "sweep_maxboxacc.csv"), "--out", str(tmp_path / "s.png")]) == 0
    assert (tmp_path / "s.png").stat().st_size > 0
    assert main(["ablate", "--config", str(conf), "--out", str(tmp_path / "abl"),
                 "--loss-sets", "full", "cpa+crf", "--seeds", "0"]) == 0
    with open(tmp_path / "abl" / "ablation.csv") as fh:
        tags = [r["loss_set"] for r in csv.DictReader(fh)]
    assert tags == ["cpa+crf+cls", "cpa+crf"]
    _, tag = pipeline.read_metrics(tmp_path / "abl" / "cpa+crf_seed0" / "eval" / "metrics.csv")
    assert tag == "cpa+crf"
