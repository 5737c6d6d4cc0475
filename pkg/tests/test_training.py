import math

import numpy as np
import pytest
import torch

from icssn import training
from icssn.config import SynthConfig
from icssn.data import Splits, generate_synthetic_dataset, prepare_splits, split_dataset
from icssn.segmentation import pixel_cross_entropy
from icssn.training import (CLASSIFICATION, PHASE_ORDER, SEGMENTATION, Checkpoint,
                            ConvergenceCriterion, TrainingDiverged, TransferError, build_networks,
                            encoder_hash, named_arrays, run_iterative_training, train_branch,
                            transfer_encoder)


@pytest.fixture(scope="module")
def tiny_splits():
    cfg = SynthConfig(tile_size=32, n_landslide=9, n_slope=6, blob_radius=(5, 10), rim_width=2)
    samples = generate_synthetic_dataset(cfg, seed=0)
    return prepare_splits(samples, split_dataset(samples, seed=0), augment_ops=())


@pytest.fixture
def nets(tiny_cfg):
    return build_networks(tiny_cfg, seed=0)


def test_cosine_schedule():
    assert training.cosine_lr(0.007, 0, 100) == 0.007
    assert training.cosine_lr(0.007, 50, 100) == pytest.approx(0.0035)
    assert training.cosine_lr(0.007, 99, 100) < 0.007 * 1e-3


def test_criterion_patience_one():
    c = ConvergenceCriterion(patience=1)
    assert c.step(1.0) == (True, False)
    assert c.step(2.0) == (False, True)


def test_criterion_min_delta():
    c = ConvergenceCriterion(patience=2, min_delta=0.1)
    c.step(1.0)
    assert c.step(0.95) == (False, False)
    assert c.step(0.85) == (True, False)


@pytest.mark.parametrize("branch", [CLASSIFICATION, SEGMENTATION])
def test_frozen_encoder_unchanged(branch, tiny_cfg, nets, tiny_splits):
    net = nets[0] if branch == CLASSIFICATION else nets[1]
    before = encoder_hash(net)
    head_before = {k: v for k, v in named_arrays(net).items() if not k.startswith("encoder/")}
    train_branch(net, branch, tiny_splits.train, tiny_splits.val, tiny_cfg, freeze_encoder=True,
                 max_epochs=2)
    assert encoder_hash(net) == before
    after = named_arrays(net)
    assert any(not torch.equal(after[k], v) for k, v in head_before.items())
    assert all(p.requires_grad for p in net.encoder.parameters())


def test_joint_training_moves_encoder(tiny_cfg, nets, tiny_splits):
    before = encoder_hash(nets[1])
    train_branch(nets[1], SEGMENTATION, tiny_splits.train, tiny_splits.val, tiny_cfg, max_epochs=1)
    assert encoder_hash(nets[1]) != before


def test_patience_stops_on_worsening(tiny_cfg, nets, tiny_splits, monkeypatch):
    calls = {"val": 0}

    def fake_epoch(net, data, cfg, seed, optimizer=None):
        if optimizer is None:
            calls["val"] += 1
            return float(calls["val"])      # strictly worsening
        return 0.5

    monkeypatch.setitem(training.EPOCH_FNS, SEGMENTATION, fake_epoch)
    tiny_cfg.training.patience = 1
    ckpt, hist = train_branch(nets[1], SEGMENTATION, tiny_splits.train, tiny_splits.val, tiny_cfg,
                              max_epochs=10)
    assert len(hist) == 2
    assert ckpt.metadata["epoch"] == 0 and ckpt.metadata["best_val_loss"] == 1.0


def test_returns_best_validation_weights(tiny_cfg, nets, tiny_splits, monkeypatch):
    vals = iter([3.0, 1.0, 2.0, 2.5])
    snapshots = []

    def fake_epoch(net, data, cfg, seed, optimizer=None):
        if optimizer is None:
            snapshots.append(encoder_hash(net))
            return next(vals)
        with torch.no_grad():
            for p in net.parameters():
                p.add_(0.01)
        return 0.0

    monkeypatch.setitem(training.EPOCH_FNS, SEGMENTATION, fake_epoch)
    ckpt, _ = train_branch(nets[1], SEGMENTATION, tiny_splits.train, tiny_splits.val, tiny_cfg,
                           max_epochs=4)
    assert encoder_hash(nets[1]) == snapshots[1]
    assert ckpt.metadata["epoch"] == 1


def test_lr_follows_cosine(tiny_cfg, nets, tiny_splits):
    tiny_cfg.training.patience = 100
    _, hist = train_branch(nets[0], CLASSIFICATION, tiny_splits.train, tiny_splits.val, tiny_cfg,
                           max_epochs=3)
    lr0 = tiny_cfg.training.lr_classification
    assert [h["lr"] for h in hist] == [lr0 * 0.5 * (1 + math.cos(math.pi * e / 3)) for e in range(3)]


def test_nan_loss_aborts_with_checkpoint(tiny_cfg, nets, tiny_splits, tmp_path, monkeypatch):
    monkeypatch.setitem(training.EPOCH_FNS, SEGMENTATION,
                        lambda net, data, cfg, seed, optimizer=None: float("nan"))
    with pytest.raises(TrainingDiverged) as err:
        train_branch(nets[1], SEGMENTATION, tiny_splits.train, tiny_splits.val, tiny_cfg,
                     max_epochs=3, out_dir=tmp_path)
    assert err.value.checkpoint_path.exists()
    assert Checkpoint.load(err.value.checkpoint_path).metadata["diagnostic"] == "non-finite loss"


def test_lambda_zero_reproduces_baseline(tiny_cfg, tiny_splits, monkeypatch):
    tiny_cfg.socl.lam = 0.0
    tiny_cfg.training.patience = 100
    _, seg = build_networks(tiny_cfg, seed=1)
    _, hist_a = train_branch(seg, SEGMENTATION, tiny_splits.train, tiny_splits.val, tiny_cfg,
                             max_epochs=2)
    monkeypatch.setattr(training, "segmentation_loss",
                        lambda logits, mask, f, cfg, seed=0: pixel_cross_entropy(logits, mask))
    _, seg = build_networks(tiny_cfg, seed=1)
    _, hist_b = train_branch(seg, SEGMENTATION, tiny_splits.train, tiny_splits.val, tiny_cfg,
                             max_epochs=2)
    assert [h["train_loss"] for h in hist_a] == [h["train_loss"] for h in hist_b]
    assert [h["val_loss"] for h in hist_a] == [h["val_loss"] for h in hist_b]


# --- transfer ----------------------------------------------------------------------

def test_transfer_bit_identical_and_isolated(nets):
    cls_net, seg_net = nets
    decoder_before = {k: v for k, v in named_arrays(seg_net).items() if k.startswith("decoder/")}
    assert encoder_hash(cls_net) != encoder_hash(seg_net)
    ckpt = Checkpoint.from_module(cls_net)
    transfer_encoder(ckpt, seg_net)
    src, dst = named_arrays(cls_net), named_arrays(seg_net)
    assert sum(not torch.equal(src[k], dst[k]) for k in src if k.startswith("encoder/")) == 0
    assert all(torch.equal(dst[k], v) for k, v in decoder_before.items())
    h = encoder_hash(seg_net)
    transfer_encoder(ckpt, seg_net)
    assert encoder_hash(seg_net) == h


def test_transfer_mismatch_lists_names(tiny_cfg, nets):
    other = tiny_cfg
    other.encoder.output_channels = 32
    _, wide = build_networks(other)
    with pytest.raises(TransferError) as err:
        transfer_encoder(nets[0], wide)
    assert "encoder/aspp" in str(err.value)


def test_checkpoint_roundtrip(nets, tmp_path):
    ckpt = Checkpoint.from_module(nets[0], branch=CLASSIFICATION, round=1)
    path = ckpt.save(tmp_path / "c.pt")
    assert path.with_suffix(".json").exists()
    back = Checkpoint.load(path)
    assert back.metadata == {"branch": CLASSIFICATION, "round": 1}
    assert set(back.params) == set(ckpt.params)
    assert any(k.startswith("encoder/backbone/") for k in back.params)
    assert any(k.startswith("encoder/aspp/") for k in back.params)
    assert any(k.startswith("encoder/se/") for k in back.params)
    assert {"classifier/fc1/weight", "classifier/fc2/weight"} <= set(back.params)
    assert any(k.startswith("decoder/") for k in Checkpoint.from_module(nets[1]).params)


# --- the alternating schedule -----------------------------------------------------------

CAPS = {CLASSIFICATION: 1, SEGMENTATION: 1, "warmup": 1}


def phases(log):
    return [(e["round"], e["branch"], e["phase"]) for e in log]


def test_one_round_sequence(tiny_cfg, tiny_splits):
    res = run_iterative_training(tiny_splits, tiny_cfg, rounds=1, epoch_caps=CAPS)
    assert phases(res.round_log) == [(1, b, p) for b, p in PHASE_ORDER]


def test_two_rounds_invariants(tiny_cfg, tiny_splits, tmp_path):
    tiny_cfg.training.min_delta = -1.0   # never stop early
    res = run_iterative_training(tiny_splits, tiny_cfg, rounds=2, epoch_caps=CAPS, out_dir=tmp_path)
    assert phases(res.round_log) == [(r, b, p) for r in (1, 2) for b, p in PHASE_ORDER]
    log = res.round_log
    for k, e in enumerate(log):
        if e["branch"] == "transfer":
            # the destination now carries the source's encoder
            assert e["encoder_hash"] == log[k - 1]["encoder_hash"]
    assert encoder_hash(res.cls_net) == encoder_hash(res.seg_net)
    assert (tmp_path / "rounds.json").exists()
    assert (tmp_path / "classification.pt").exists() and (tmp_path / "segmentation.pt").exists()
    assert len(list((tmp_path / "checkpoints").glob("state_*.pt"))) == 12


def test_bit_reproducible(tiny_cfg, tiny_splits):
    a = run_iterative_training(tiny_splits, tiny_cfg, rounds=1, epoch_caps=CAPS)
    b = run_iterative_training(tiny_splits, tiny_cfg, rounds=1, epoch_caps=CAPS)
    untimed = lambda e: [{k: v for k, v in h.items() if k != "seconds"}  # noqa: E731
                         for h in e.get("history", [])]
    for x, y in zip(a.round_log, b.round_log):
        assert untimed(x) == untimed(y)
        assert x.get("test_metrics") == y.get("test_metrics")
        assert x["encoder_hash"] == y["encoder_hash"]


def test_resume_matches_uninterrupted(tiny_cfg, tiny_splits, tmp_path):
    full = run_iterative_training(tiny_splits, tiny_cfg, rounds=1, epoch_caps=CAPS, out_dir=tmp_path)
    state = tmp_path / "checkpoints" / "state_r1_3.pt"
    resumed = run_iterative_training(tiny_splits, tiny_cfg, rounds=1, epoch_caps=CAPS, resume=state)
    assert phases(resumed.round_log) == phases(full.round_log)
    assert encoder_hash(resumed.seg_net) == encoder_hash(full.seg_net)
    assert named_arrays(resumed.cls_net).keys() == named_arrays(full.cls_net).keys()
    for k, v in named_arrays(full.cls_net).items():
        assert torch.equal(v, named_arrays(resumed.cls_net)[k]), k


def test_stops_when_no_branch_improves(tiny_cfg, tiny_splits, monkeypatch):
    monkeypatch.setitem(training.EPOCH_FNS, CLASSIFICATION, lambda *a, **k: 1.0)
    monkeypatch.setitem(training.EPOCH_FNS, SEGMENTATION, lambda *a, **k: 1.0)
    res = run_iterative_training(tiny_splits, tiny_cfg, rounds=3, epoch_caps=CAPS, track_test=False)
    assert max(e["round"] for e in res.round_log) == 2


def test_evaluate_reports(tiny_cfg, nets, tiny_splits):
    seg = training.evaluate_segmentation(nets[1], tiny_splits.test, tiny_cfg)
    assert {"PA", "precision", "recall", "landslide_IoU", "slope_IoU", "mIoU", "F1",
            "acc_landslide", "acc_slope", "acc_avg", "conventions"} <= set(seg)
    cls = training.evaluate_classification(nets[0], tiny_splits.test, tiny_cfg)
    assert {"accuracy", "precision", "recall", "F1"} <= set(cls)
    assert isinstance(tiny_splits, Splits) and np.isfinite(cls["accuracy"])
