"""Alternating training of the classification and segmentation branches.

Each round runs, in order:

1. classification, joint training (encoder trainable)
2. encoder transfer classification -> segmentation
3. segmentation warm-up (encoder frozen)
4. segmentation joint training
5. encoder transfer segmentation -> classification
6. classification warm-up (encoder frozen)

Rounds repeat until neither branch's best validation loss improves or
``max_rounds`` is reached. Every phase writes a resumable checkpoint.
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import os
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .classification import (ClassificationNet, classification_loss_from_log_probs, form_pairs,
                             infer_object_label)
from .config import Config
from .data import seed_for
from .encoder import to_tensor
from .metrics import binary_metrics, segmentation_report
from .segmentation import SegmentationNet, segmentation_loss

log = logging.getLogger(__name__)

CLASSIFICATION = "classification"
SEGMENTATION = "segmentation"
PHASE_ORDER = (
    (CLASSIFICATION, "joint"),
    ("transfer", "classification->segmentation"),
    (SEGMENTATION, "warmup"),
    (SEGMENTATION, "joint"),
    ("transfer", "segmentation->classification"),
    (CLASSIFICATION, "warmup"),
)


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, checkpoint_path=None):
        super().__init__(msg)
        self.checkpoint_path = checkpoint_path


class TransferError(ValueError):
    pass


# --- parameter namespaces ----------------------------------------------------

def named_arrays(module):
    """Flat ``a/b/c`` names for every parameter and buffer."""
    return {k.replace(".", "/"): v.detach().cpu().clone() for k, v in module.state_dict().items()}


def load_named_arrays(module, arrays, strict=True):
    state = {k.replace("/", "."): v for k, v in arrays.items()}
    module.load_state_dict(state, strict=strict)


def encoder_arrays(arrays):
    return {k: v for k, v in arrays.items() if k.startswith("encoder/")}


def params_hash(arrays):
    h = hashlib.sha256()
    for k in sorted(arrays):
        h.update(k.encode())
        h.update(arrays[k].contiguous().numpy().tobytes())
    return h.hexdigest()


def encoder_hash(module):
    return params_hash(encoder_arrays(named_arrays(module)))


@dataclass
class Checkpoint:
    params: dict
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_module(cls, module, **metadata):
        return cls(named_arrays(module), dict(metadata))

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        _atomic_write(path, lambda fh: torch.save(self.params, fh))
        meta = json.dumps(self.metadata, indent=2, default=_jsonable).encode()
        _atomic_write(path.with_suffix(".json"), lambda fh: fh.write(meta))
        return path

    @classmethod
    def load(cls, path):
        path = Path(path)
        params = torch.load(path, map_location="cpu", weights_only=True)
        meta_path = path.with_suffix(".json")
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        return cls(params, meta)


def _jsonable(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    return str(x)


def _atomic_write(path, write):
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            write(fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def transfer_encoder(src, dst):
    """Copy encoder arrays from ``src`` (Checkpoint or module) into module ``dst``."""
    source = encoder_arrays(src.params if isinstance(src, Checkpoint) else named_arrays(src))
    target = encoder_arrays(named_arrays(dst))
    bad = sorted(set(source) ^ set(target))
    bad += sorted(k for k in set(source) & set(target) if source[k].shape != target[k].shape)
    if bad:
        raise TransferError("encoder namespaces differ: " + ", ".join(bad[:20])
                            + (" ..." if len(bad) > 20 else ""))
    with torch.no_grad():
        state = dst.encoder.state_dict()
        for k, v in source.items():
            state[k[len("encoder/"):].replace("/", ".")].copy_(v)


def set_encoder_frozen(net, frozen):
    for p in net.encoder.parameters():
        p.requires_grad_(not frozen)


def apply_modes(net, frozen):
    net.train()
    if frozen:
        # keep BatchNorm running statistics fixed as well
        net.encoder.eval()


# --- convergence ---------------------------------------------------------------

class ConvergenceCriterion:
    """Stops after ``patience`` epochs without a val-loss gain above ``min_delta``."""

    def __init__(self, patience=8, min_delta=1e-4):
        if patience < 1:
            raise ValueError("patience must be >= 1")
        self.patience = patience
        self.min_delta = min_delta
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, value):
        """Record ``value``; returns (improved, converged)."""
        if value < self.best - self.min_delta:
            self.best = value
            self.bad_epochs = 0
            return True, False
        self.bad_epochs += 1
        return False, self.bad_epochs >= self.patience


def cosine_lr(lr0, epoch, max_epochs):
    return lr0 * 0.5 * (1 + math.cos(math.pi * epoch / max_epochs))


# --- batching ------------------------------------------------------------------

def _batches(items, size):
    for k in range(0, len(items), size):
        yield items[k:k + size]


def _images(samples, device):
    return to_tensor(np.stack([s.image for s in samples])).to(device)


def _masks(samples, device):
    return torch.as_tensor(np.stack([s.mask for s in samples]), dtype=torch.long, device=device)


def _pair_tensors(pairs, device):
    a = _images([p.a for p in pairs], device)
    b = _images([p.b for p in pairs], device)
    y = torch.tensor([p.joint_label for p in pairs], dtype=torch.long, device=device)
    return a, b, y


def classification_epoch(net, train, cfg, seed, optimizer=None):
    """One pass of balanced pairs; returns mean loss. No optimizer -> evaluation."""
    device = cfg.training.device
    pairs = form_pairs(train, seed)
    if optimizer is not None:
        order = np.random.default_rng(seed_for(seed, "order")).permutation(len(pairs))
        pairs = [pairs[k] for k in order]
    total, n = 0.0, 0
    for chunk in _batches(pairs, cfg.training.batch_size):
        a, b, y = _pair_tensors(chunk, device)
        with torch.set_grad_enabled(optimizer is not None):
            loss = classification_loss_from_log_probs(net(a, b), y)
        if optimizer is not None:
            if not torch.isfinite(loss):
                return float("nan")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
        total += loss.item() * len(chunk)
        n += len(chunk)
    return total / max(n, 1)


def segmentation_epoch(net, train, cfg, seed, optimizer=None):
    device = cfg.training.device
    order = np.arange(len(train))
    if optimizer is not None:
        order = np.random.default_rng(seed_for(seed, "order")).permutation(len(train))
    items = [train[k] for k in order]
    total, n = 0.0, 0
    for k, chunk in enumerate(_batches(items, cfg.training.batch_size)):
        x, m = _images(chunk, device), _masks(chunk, device)
        with torch.set_grad_enabled(optimizer is not None):
            logits, f = net(x)
            loss = segmentation_loss(logits, m, f, cfg.socl, seed=seed_for(seed, "batch", k))
        if optimizer is not None:
            if not torch.isfinite(loss):
                return float("nan")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
        total += loss.item() * len(chunk)
        n += len(chunk)
    return total / max(n, 1)


EPOCH_FNS = {CLASSIFICATION: classification_epoch, SEGMENTATION: segmentation_epoch}


# --- evaluation ----------------------------------------------------------------

@torch.no_grad()
def predict_masks(net, samples, batch_size=8, device="cpu"):
    net.eval()
    out = []
    for chunk in _batches(samples, batch_size):
        out.extend(net.predict(_images(chunk, device)).cpu().numpy().astype(np.uint8))
    return out


def evaluate_segmentation(net, samples, cfg: Config):
    preds = predict_masks(net, samples, cfg.training.batch_size, cfg.training.device)
    return segmentation_report(preds, [s.mask for s in samples],
                               hit=cfg.segmentation.landslide_hit_threshold,
                               fp=cfg.segmentation.slope_fp_threshold)


@torch.no_grad()
def classify_samples(net, samples, batch_size=8, device="cpu"):
    """Self-paired inference; returns (labels, landslide probabilities)."""
    net.eval()
    labels, probs = [], []
    for chunk in _batches(samples, batch_size):
        for p in net.self_pair(_images(chunk, device)).cpu().numpy():
            lab, mass = infer_object_label(p)
            labels.append(lab)
            probs.append(mass)
    return labels, probs


def evaluate_classification(net, samples, cfg: Config):
    labels, _ = classify_samples(net, samples, cfg.training.batch_size, cfg.training.device)
    return binary_metrics(labels, [s.label for s in samples])


EVALUATORS = {CLASSIFICATION: evaluate_classification, SEGMENTATION: evaluate_segmentation}


# --- one branch ----------------------------------------------------------------

def train_branch(net, branch, train, val, cfg: Config, freeze_encoder=False, max_epochs=None,
                 phase="joint", round_idx=1, seed=0, out_dir=None):
    """Train ``net`` until convergence or the epoch cap; keep the best-val weights.

    Returns ``(checkpoint, history)``. With ``freeze_encoder`` the encoder's
    parameters and BatchNorm statistics are left untouched.
    """
    tc = cfg.training
    lr0 = tc.lr_classification if branch == CLASSIFICATION else tc.lr_segmentation
    if max_epochs is None:
        max_epochs = tc.epochs_classification if branch == CLASSIFICATION else tc.epochs_segmentation
    run_epoch = EPOCH_FNS[branch]
    torch.manual_seed(seed_for(seed, round_idx, branch, phase))

    set_encoder_frozen(net, freeze_encoder)
    trainable = [p for p in net.parameters() if p.requires_grad]
    optimizer = torch.optim.SGD(trainable, lr=lr0, momentum=tc.momentum,
                                weight_decay=tc.weight_decay)
    criterion = ConvergenceCriterion(tc.patience, tc.min_delta)
    best_state = copy.deepcopy(net.state_dict())
    best_epoch, history = 0, []
    val_seed = seed_for(seed, "validation")
    try:
        for epoch in range(max_epochs):
            lr = cosine_lr(lr0, epoch, max_epochs) if tc.schedule == "cosine" else lr0
            for group in optimizer.param_groups:
                group["lr"] = lr
            apply_modes(net, freeze_encoder)
            t0 = time.perf_counter()
            train_loss = run_epoch(net, train, cfg, seed_for(seed, round_idx, branch, phase, epoch),
                                   optimizer)
            if not math.isfinite(train_loss):
                path = None
                if out_dir is not None:
                    path = Checkpoint.from_module(
                        net, branch=branch, round=round_idx, phase=phase, epoch=epoch,
                        config_hash=cfg.hash(), diagnostic="non-finite loss",
                    ).save(Path(out_dir) / f"diverged_{branch}_r{round_idx}_{phase}.pt")
                raise TrainingDiverged(
                    f"{branch}/{phase} round {round_idx}: non-finite loss at epoch {epoch}", path)
            net.eval()
            val_loss = run_epoch(net, val, cfg, val_seed) if val else train_loss
            improved, converged = criterion.step(val_loss)
            if improved:
                best_state = copy.deepcopy(net.state_dict())
                best_epoch = epoch
            history.append({"epoch": epoch, "lr": lr, "train_loss": train_loss,
                            "val_loss": val_loss, "seconds": time.perf_counter() - t0})
            log.info("%s/%s r%d e%d lr=%.5f train=%.4f val=%.4f", branch, phase, round_idx,
                     epoch, lr, train_loss, val_loss)
            if converged:
                break
        net.load_state_dict(best_state)
    finally:
        set_encoder_frozen(net, False)
    net.eval()
    ckpt = Checkpoint.from_module(
        net, branch=branch, round=round_idx, phase=phase, epoch=best_epoch,
        epochs_run=len(history), config_hash=cfg.hash(),
        best_val_loss=criterion.best if history else None,
    )
    return ckpt, history


# --- alternating schedule ------------------------------------------------------------

def build_networks(cfg: Config, seed=0):
    torch.manual_seed(seed_for(seed, "init", CLASSIFICATION))
    cls_net = ClassificationNet(cfg.encoder, cfg.classifier).to(cfg.training.device)
    torch.manual_seed(seed_for(seed, "init", SEGMENTATION))
    seg_net = SegmentationNet(cfg.encoder, cfg.segmentation).to(cfg.training.device)
    return cls_net, seg_net


@dataclass
class TrainingResult:
    classification: Checkpoint
    segmentation: Checkpoint
    round_log: list
    cls_net: object = None
    seg_net: object = None


def _state_blob(cls_net, seg_net, round_log, position, cfg, seed):
    params = {f"classification/{k}": v for k, v in named_arrays(cls_net).items()}
    params.update({f"segmentation/{k}": v for k, v in named_arrays(seg_net).items()})
    meta = {"round_log": round_log, "position": position, "config": cfg.to_dict(),
            "config_hash": cfg.hash(), "seed": seed}
    return Checkpoint(params, meta)


def _split_blob(ckpt):
    parts = {CLASSIFICATION: {}, SEGMENTATION: {}}
    for k, v in ckpt.params.items():
        branch, name = k.split("/", 1)
        parts[branch][name] = v
    return parts


def run_iterative_training(splits, cfg: Config, out_dir=None, seed=None, rounds=None,
                           resume=None, epoch_caps=None, track_test=True, nets=None):
    """Run the alternating schedule; returns a TrainingResult with the round log.

    ``epoch_caps`` may override the per-phase epoch limits with keys
    ``classification``, ``segmentation`` and ``warmup``.
    """
    tc = cfg.training
    seed = tc.seed if seed is None else seed
    max_rounds = rounds or tc.max_rounds
    caps = {CLASSIFICATION: tc.epochs_classification, SEGMENTATION: tc.epochs_segmentation,
            "warmup": tc.warmup_epochs}
    caps.update(epoch_caps or {})
    out = Path(out_dir) if out_dir is not None else None
    cls_net, seg_net = nets or build_networks(cfg, seed)

    round_log, start = [], (1, 0)
    best = {CLASSIFICATION: [], SEGMENTATION: []}
    if resume is not None:
        blob = resume if isinstance(resume, Checkpoint) else Checkpoint.load(resume)
        parts = _split_blob(blob)
        load_named_arrays(cls_net, parts[CLASSIFICATION])
        load_named_arrays(seg_net, parts[SEGMENTATION])
        round_log = list(blob.metadata["round_log"])
        r, k = blob.metadata["position"]
        start = (r, k + 1) if k + 1 < len(PHASE_ORDER) else (r + 1, 0)
        for e in round_log:
            if e["phase"] == "joint":
                best[e["branch"]].append(e["best_val_loss"])
        log.info("resuming at round %d step %d", *start)

    nets_by_branch = {CLASSIFICATION: cls_net, SEGMENTATION: seg_net}
    r = start[0]
    while r <= max_rounds:
        first = start[1] if r == start[0] else 0
        for k in range(first, len(PHASE_ORDER)):
            kind, phase = PHASE_ORDER[k]
            entry = {"round": r, "step": k + 1, "branch": kind, "phase": phase}
            t0 = time.perf_counter()
            if kind == "transfer":
                src, dst = phase.split("->")
                transfer_encoder(nets_by_branch[src], nets_by_branch[dst])
                entry["encoder_hash"] = encoder_hash(nets_by_branch[dst])
            else:
                net = nets_by_branch[kind]
                warm = phase == "warmup"
                before = encoder_hash(net) if warm else None
                ckpt, hist = train_branch(
                    net, kind, splits.train, splits.val, cfg, freeze_encoder=warm,
                    max_epochs=caps["warmup"] if warm else caps[kind], phase=phase,
                    round_idx=r, seed=seed, out_dir=out,
                )
                if warm and encoder_hash(net) != before:
                    raise RuntimeError(f"{kind} warm-up modified the frozen encoder")
                entry.update(epochs_run=len(hist), best_epoch=ckpt.metadata["epoch"],
                             best_val_loss=ckpt.metadata["best_val_loss"], history=hist,
                             encoder_hash=encoder_hash(net))
                entry["val_metrics"] = EVALUATORS[kind](net, splits.val, cfg)
                if track_test and splits.test:
                    entry["test_metrics"] = EVALUATORS[kind](net, splits.test, cfg)
                if phase == "joint":
                    best[kind].append(ckpt.metadata["best_val_loss"])
                if out is not None:
                    ckpt.save(out / "checkpoints" / f"r{r}_{k + 1}_{kind}_{phase}.pt")
            entry["seconds"] = time.perf_counter() - t0
            round_log.append(entry)
            if out is not None:
                _state_blob(cls_net, seg_net, round_log, (r, k), cfg, seed).save(
                    out / "checkpoints" / f"state_r{r}_{k + 1}.pt")
                write_round_log(round_log, out / "rounds.json")
        if r > 1 and not _improved(best, tc.min_delta):
            log.info("no branch improved in round %d; stopping", r)
            break
        r += 1

    meta = {"config_hash": cfg.hash(), "config": cfg.to_dict(), "seed": seed,
            "rounds_run": round_log[-1]["round"] if round_log else 0}
    result = TrainingResult(
        Checkpoint.from_module(cls_net, branch=CLASSIFICATION, phase="final", **meta),
        Checkpoint.from_module(seg_net, branch=SEGMENTATION, phase="final", **meta),
        round_log, cls_net, seg_net,
    )
    if out is not None:
        result.classification.save(out / "classification.pt")
        result.segmentation.save(out / "segmentation.pt")
    return result


def _improved(best, min_delta):
    for losses in best.values():
        if len(losses) >= 2 and losses[-1] < min(losses[:-1]) - min_delta:
            return True
    return False


def write_round_log(round_log, path):
    path = Path(path)
    data = json.dumps(round_log, indent=2, default=_jsonable).encode()
    _atomic_write(path, lambda fh: fh.write(data))
