"""Segmentation branch: decoder, block-level contrastive labels and losses."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import EncoderConfig, SegmentationConfig, SoclConfig
from .data import seed_for
from .encoder import Encoder

NEGATIVE, POSITIVE, IRRELEVANT = 0, 1, 2
EPS = 1e-12
UNIT_TOL = 1e-6


def block_counts(mask, block=8):
    """Number of class-1 pixels in each ``block``x``block`` cell."""
    mask = np.asarray(mask)
    h, w = mask.shape[-2:]
    if h % block or w % block:
        raise ValueError(f"mask {h}x{w} is not divisible into {block}x{block} blocks")
    m = (mask == 1).astype(np.int64)
    lead = m.shape[:-2]
    return m.reshape(*lead, h // block, block, w // block, block).sum(axis=(-3, -1))


def derive_socl_labels(mask, block=8, lo=7, hi=57):
    """Per-block N/P/I labels: n < lo -> N, lo <= n <= hi -> P, n > hi -> I."""
    n = block_counts(mask, block)
    grid = np.full(n.shape, POSITIVE, dtype=np.int64)
    grid[n < lo] = NEGATIVE
    grid[n > hi] = IRRELEVANT
    return grid


@dataclass
class SoclPairBatch:
    """Unit vectors for the contrastive term.

    Anchor ``i`` is contrasted with ``positives[pos_mask[i]]`` and
    ``negatives[neg_mask[i]]``.
    """
    anchors: torch.Tensor
    positives: torch.Tensor
    negatives: torch.Tensor
    pos_mask: torch.Tensor
    neg_mask: torch.Tensor
    tau: float = 0.1
    pos_coords: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))
    neg_coords: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))

    @property
    def empty(self):
        return bool(self.anchors.shape[0] == 0 or not self.pos_mask.any())

    @classmethod
    def shared(cls, anchors, positives, negatives, tau, self_excluded=False, **coords):
        """Every anchor sees all positives (minus itself) and all negatives."""
        a, m, k = anchors.shape[0], positives.shape[0], negatives.shape[0]
        pos_mask = torch.ones(a, m, dtype=torch.bool, device=anchors.device)
        if self_excluded:
            pos_mask &= ~torch.eye(a, m, dtype=torch.bool, device=anchors.device)
        neg_mask = torch.ones(a, k, dtype=torch.bool, device=anchors.device)
        return cls(anchors, positives, negatives, pos_mask, neg_mask, tau, **coords)


def _take(rng, idx, n):
    if len(idx) <= n:
        return idx[rng.permutation(len(idx))]
    return idx[rng.choice(len(idx), size=n, replace=False)]


def _positive_blocks(grid, strategy):
    if strategy == "edge":
        return np.argwhere(grid == POSITIVE)
    if strategy == "center":
        return np.argwhere(grid == IRRELEVANT)
    raise ValueError(strategy)


def _hybrid(rng, grid, n):
    pools = [np.argwhere(grid == POSITIVE), np.argwhere(grid == IRRELEVANT)]
    pools = [p[rng.permutation(len(p))] for p in pools]
    used = [0, 0]
    picked = []
    while len(picked) < n and (used[0] < len(pools[0]) or used[1] < len(pools[1])):
        k = int(rng.random() < 0.5)
        if used[k] >= len(pools[k]):
            k = 1 - k
        picked.append(pools[k][used[k]])
        used[k] += 1
    return np.array(picked, dtype=np.int64).reshape(-1, 3)


def select_socl_pairs(f, grid, cfg: SoclConfig, seed=0):
    """Sample positive/negative blocks across the batch and gather unit features.

    ``f`` is (B, C, h, w) and ``grid`` (B, h, w). Each selected positive acts
    as an anchor against the other positives and all selected negatives.
    """
    if f.ndim == 3:
        f = f[None]
    grid = np.asarray(grid)
    if grid.ndim == 2:
        grid = grid[None]
    if tuple(grid.shape) != (f.shape[0], f.shape[2], f.shape[3]):
        raise ValueError(f"feature map {tuple(f.shape)} is not aligned with SOCL grid {grid.shape}")
    rng = np.random.default_rng(seed_for(seed, "socl"))
    if cfg.strategy == "hybrid":
        pos = _hybrid(rng, grid, cfg.n_pos)
    else:
        pos = _take(rng, _positive_blocks(grid, cfg.strategy), cfg.n_pos)
    neg = _take(rng, np.argwhere(grid == NEGATIVE), cfg.n_neg)
    unit = F.normalize(f, dim=1)

    def gather(coords):
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        b, y, x = (torch.as_tensor(coords[:, k], device=f.device) for k in range(3))
        return unit[b, :, y, x]

    positives = gather(pos)
    return SoclPairBatch.shared(positives, positives, gather(neg), cfg.tau, self_excluded=True,
                               pos_coords=pos.reshape(-1, 3), neg_coords=neg.reshape(-1, 3))


def _check_unit(name, v):
    if v.numel() and (v.norm(dim=-1) - 1).abs().max() > UNIT_TOL:
        raise ValueError(f"{name} are not unit vectors")


def supervised_contrastive_loss(batch: SoclPairBatch, check_unit=True):
    """Mean over anchors of the mean per-positive InfoNCE term.

    Anchors with no positive are skipped; an empty batch gives 0.
    Returns ``(loss, empty_flag)``.
    """
    a, p, n = batch.anchors, batch.positives, batch.negatives
    if check_unit:
        for name, v in (("anchors", a), ("positives", p), ("negatives", n)):
            _check_unit(name, v)
    has_pos = batch.pos_mask.any(dim=1)
    if batch.empty:
        return a.sum() * 0.0 if a.numel() else torch.zeros((), dtype=a.dtype), True
    pos_logits = a @ p.T / batch.tau
    neg_logits = (a @ n.T / batch.tau).masked_fill(~batch.neg_mask, -math.inf)
    # log(exp(s+) + sum exp(s-)) for every (anchor, positive) pair
    stacked = torch.cat([pos_logits[..., None],
                         neg_logits[:, None, :].expand(-1, p.shape[0], -1)], dim=-1)
    per_pair = torch.logsumexp(stacked, dim=-1) - pos_logits
    per_pair = per_pair.masked_fill(~batch.pos_mask, 0.0)
    per_anchor = per_pair.sum(dim=1)[has_pos] / batch.pos_mask.sum(dim=1)[has_pos]
    return per_anchor.mean(), False


def pixel_cross_entropy(logits, mask):
    """Pixel-averaged binary cross-entropy of the class-1 softmax probability.

    ``logits`` is (B, 2, H, W) or (2, H, W); probabilities are clamped to
    [1e-12, 1 - 1e-12].
    """
    mask = torch.as_tensor(mask)
    if logits.ndim == 3:
        logits = logits[None]
    if mask.ndim == 2:
        mask = mask[None]
    if logits.shape[1] != 2 or tuple(mask.shape) != (logits.shape[0], *logits.shape[2:]):
        raise ValueError(f"logits {tuple(logits.shape)} do not match mask {tuple(mask.shape)}")
    logp = F.log_softmax(logits, dim=1).clamp(math.log(EPS), math.log1p(-EPS))
    y = mask.to(logits.dtype)
    return -(y * logp[:, 1] + (1 - y) * logp[:, 0]).mean()


@dataclass
class SegLossParts:
    total: torch.Tensor
    ce: torch.Tensor
    contrastive: torch.Tensor
    empty: bool


def segmentation_loss(logits, mask, f, cfg: SoclConfig, seed=0, details=False):
    """CE + lam * contrastive, with SOCL blocks derived from ``mask``."""
    ce = pixel_cross_entropy(logits, mask)
    if cfg.lam == 0:
        zero = torch.zeros((), dtype=ce.dtype)
        return SegLossParts(ce, ce, zero, True) if details else ce
    m = mask.detach().cpu().numpy() if torch.is_tensor(mask) else np.asarray(mask)
    grid = derive_socl_labels(m, cfg.block, cfg.lo, cfg.hi)
    batch = select_socl_pairs(f, grid, cfg, seed)
    con, empty = supervised_contrastive_loss(batch)
    total = ce if empty else ce + cfg.lam * con
    return SegLossParts(total, ce, con, empty) if details else total


class Decoder(nn.Module):
    """Two transposed convolutions (x4 then x2) with BN/ReLU/dropout, then 1x1 to 2 classes."""

    def __init__(self, channels=256, dropout=0.1, n_classes=2):
        super().__init__()
        mid = max(channels // 2, 1)
        self.up1 = nn.ConvTranspose2d(channels, channels, 8, stride=4, padding=2, bias=False)
        self.bn1 = nn.BatchNorm2d(channels)
        self.drop1 = nn.Dropout2d(dropout)
        self.up2 = nn.ConvTranspose2d(channels, mid, 4, stride=2, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(mid)
        self.drop2 = nn.Dropout2d(dropout)
        self.classify = nn.Conv2d(mid, n_classes, 1)

    def forward(self, f):
        x = self.drop1(F.relu(self.bn1(self.up1(f))))
        x = self.drop2(F.relu(self.bn2(self.up2(x))))
        return self.classify(x)


class SegmentationNet(nn.Module):
    def __init__(self, enc_cfg: EncoderConfig | None = None, seg_cfg: SegmentationConfig | None = None):
        super().__init__()
        seg_cfg = seg_cfg or SegmentationConfig()
        self.encoder = Encoder(enc_cfg)
        self.decoder = Decoder(self.encoder.out_channels, seg_cfg.decoder_dropout)

    @property
    def head(self):
        return self.decoder

    def forward(self, x):
        """Returns (logits at input resolution, encoder features)."""
        f = self.encoder(x)
        return self.decoder(f), f

    def predict(self, x):
        logits, _ = self.forward(x)
        return logits.argmax(dim=1)
