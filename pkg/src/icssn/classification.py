"""Siamese object classifier over the four landslide/slope pair combinations."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ClassifierConfig, EncoderConfig
from .data import LANDSLIDE, SLOPE, seed_for
from .encoder import Encoder

log = logging.getLogger(__name__)

LL, LS, SL, SS = 0, 1, 2, 3
JOINT_NAMES = ("LL", "LS", "SL", "SS")
EPS = 1e-12


def joint_label(label_a, label_b):
    return 2 * (label_a == SLOPE) + (label_b == SLOPE)


def slot_labels(joint):
    return (LANDSLIDE if joint in (LL, LS) else SLOPE,
            LANDSLIDE if joint in (LL, SL) else SLOPE)


@dataclass
class PairSample:
    a: object
    b: object
    joint_label: int

    def __post_init__(self):
        if joint_label(self.a.label, self.b.label) != self.joint_label:
            raise ValueError(f"pair ({self.a.id}, {self.b.id}) mislabelled as "
                             f"{JOINT_NAMES[self.joint_label]}")


class _Cycler:
    """Endless draws from a pool, reshuffled each pass."""

    def __init__(self, items, rng):
        self.items = list(items)
        self.rng = rng
        self.order = []

    def next(self, avoid=None):
        if not self.order:
            self.order = list(self.rng.permutation(len(self.items)))
        k = self.order.pop()
        if avoid is not None and self.items[k] is avoid and len(self.items) > 1:
            if not self.order:
                self.order = list(self.rng.permutation(len(self.items)))
            k2 = self.order.pop()
            self.order.append(k)
            k = k2
        return self.items[k]


def form_pairs(batch, seed=0, n_pairs=None):
    """Pair samples so the four joint classes appear in (near) equal numbers.

    The joint classes are visited round-robin from a seeded random start;
    members are drawn from per-class pools that reshuffle once exhausted, so
    every sample is used before any is reused.
    """
    rng = np.random.default_rng(seed_for(seed, "pairs"))
    landslides = [s for s in batch if s.label == LANDSLIDE]
    slopes = [s for s in batch if s.label == SLOPE]
    n = len(batch) if n_pairs is None else n_pairs
    if not landslides or not slopes:
        if batch:
            log.warning("single-class batch: only same-class pairs can be formed")
        pool = _Cycler(landslides or slopes, rng)
        out = []
        for _ in range(n):
            a = pool.next()
            out.append(PairSample(a, pool.next(avoid=a), LL if landslides else SS))
        return out
    pools = {LANDSLIDE: _Cycler(landslides, rng), SLOPE: _Cycler(slopes, rng)}
    order = list(rng.permutation(4))
    out = []
    for k in range(n):
        joint = int(order[k % 4])
        la, lb = slot_labels(joint)
        a = pools[la].next()
        b = pools[lb].next(avoid=a if la == lb else None)
        out.append(PairSample(a, b, joint))
    return out


def _pool(f, how):
    return f.amax(dim=(2, 3)) if how == "max" else f.mean(dim=(2, 3))


class PairClassifier(nn.Module):
    """Global pooling of both slot features, concatenated, then FC layers."""

    def __init__(self, channels, cfg: ClassifierConfig):
        super().__init__()
        self.cfg = cfg
        n_out = 4 if cfg.head == "joint" else 2
        dims = [2 * channels] + [cfg.hidden_units] * (cfg.fc_layers - 1) + [n_out]
        for k in range(cfg.fc_layers):
            self.add_module(f"fc{k + 1}", nn.Linear(dims[k], dims[k + 1]))

    @property
    def last(self):
        return getattr(self, f"fc{self.cfg.fc_layers}")

    def forward(self, fa, fb):
        x = torch.cat([_pool(fa, self.cfg.pooling), _pool(fb, self.cfg.pooling)], dim=1)
        for k in range(self.cfg.fc_layers):
            x = getattr(self, f"fc{k + 1}")(x)
            if k + 1 < self.cfg.fc_layers:
                x = F.relu(x)
        return x


def head_log_probs(out, head):
    """Raw head output -> log-probabilities over (LL, LS, SL, SS)."""
    if head == "joint":
        return F.log_softmax(out, dim=-1)
    # independent landslide/slope decision per slot
    la, sa = F.logsigmoid(out[..., 0]), F.logsigmoid(-out[..., 0])
    lb, sb = F.logsigmoid(out[..., 1]), F.logsigmoid(-out[..., 1])
    return torch.stack([la + lb, la + sb, sa + lb, sa + sb], dim=-1)


class ClassificationNet(nn.Module):
    """One encoder applied to both pair slots (weights shared structurally)."""

    def __init__(self, enc_cfg: EncoderConfig | None = None, cls_cfg: ClassifierConfig | None = None):
        super().__init__()
        cls_cfg = cls_cfg or ClassifierConfig()
        cls_cfg.validate()
        self.encoder = Encoder(enc_cfg)
        self.classifier = PairClassifier(self.encoder.out_channels, cls_cfg)

    @property
    def head(self):
        return self.classifier

    def encode_pair(self, a, b):
        return self.encoder(a), self.encoder(b)

    def forward(self, a, b):
        """Log-probabilities over the four joint classes."""
        if a.shape != b.shape:
            raise ValueError(f"pair tiles differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")
        fa, fb = self.encode_pair(a, b)
        return head_log_probs(self.classifier(fa, fb), self.classifier.cfg.head)

    def classify_pair(self, a, b):
        return self.forward(a, b).exp()

    def self_pair(self, x):
        """Self-paired probabilities from a single encoder pass."""
        f = self.encoder(x)
        return head_log_probs(self.classifier(f, f), self.classifier.cfg.head).exp()


def classification_loss(probs, labels):
    """Mean -log p(label), with p clamped at 1e-12."""
    probs = torch.as_tensor(probs)
    labels = torch.as_tensor(labels, dtype=torch.long)
    if probs.ndim == 1:
        probs, labels = probs[None], labels.reshape(1)
    picked = probs.gather(1, labels[:, None]).squeeze(1)
    return -picked.clamp_min(EPS).log().mean()


def classification_loss_from_log_probs(log_probs, labels):
    picked = log_probs.gather(1, labels[:, None]).squeeze(1)
    return -picked.clamp_min(math.log(EPS)).mean()


def infer_object_label(probs):
    """Map self-paired 4-way probabilities to (label, landslide probability).

    LL -> landslide and SS -> slope; when LS or SL wins, the slot-A landslide
    mass p(LL) + p(LS) decides.
    """
    p = np.asarray(probs, dtype=np.float64)
    mass = float(p[LL] + p[LS])
    top = int(np.argmax(p))
    if top == LL:
        return LANDSLIDE, mass
    if top == SS:
        return SLOPE, mass
    return (LANDSLIDE if mass >= 0.5 else SLOPE), mass
