"""Grad-CAM over the final encoder feature map of either branch."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .classification import ClassificationNet, head_log_probs
from .encoder import to_tensor
from .segmentation import SegmentationNet


@dataclass
class Heatmap:
    values: np.ndarray
    target: object
    flagged: bool = False


def _normalize(cam):
    lo, hi = float(cam.min()), float(cam.max())
    if hi - lo <= 0:
        return np.zeros_like(cam), True
    return (cam - lo) / (hi - lo), False


def _segmentation_score(net, f, mask):
    out = net.decoder(f)[0]
    if mask is not None:
        region = torch.as_tensor(np.asarray(mask), dtype=torch.bool)
    else:
        region = out.argmax(0) == 1
    if not region.any():
        region = torch.ones_like(out[1], dtype=torch.bool)
    return out[1][region].sum()


def grad_cam(net, image, target=None, mask=None):
    """Heatmap in [0, 1] at image resolution.

    For a ClassificationNet ``target`` is a joint class index (LL=0 .. SS=3)
    scored on the self-paired image; default is the predicted class. For a
    SegmentationNet the score is the sum of landslide logits over ``mask``
    (ground truth), or over predicted landslide pixels when no mask is given.
    """
    net.eval()
    x = to_tensor(image) if isinstance(image, np.ndarray) else image
    h, w = x.shape[-2:]
    with torch.enable_grad():
        f = net.encoder(x).detach().requires_grad_(True)
        if isinstance(net, ClassificationNet):
            raw = net.classifier(f, f)[0]
            logp = head_log_probs(raw, net.classifier.cfg.head)
            if target is None:
                target = int(logp.argmax())
            # pre-softmax score where there is one
            score = raw[target] if net.classifier.cfg.head == "joint" else logp[target]
        elif isinstance(net, SegmentationNet):
            target = "landslide" if target is None else target
            score = _segmentation_score(net, f, mask)
        else:
            raise TypeError(f"unsupported branch {type(net).__name__}")
        (grad,) = torch.autograd.grad(score, f)
    if not torch.any(grad != 0):
        return Heatmap(np.zeros((h, w)), target, True)
    weights = grad.mean(dim=(2, 3), keepdim=True)
    cam = F.relu((weights * f.detach()).sum(dim=1, keepdim=True))
    cam = F.interpolate(cam, size=(h, w), mode="bilinear", align_corners=False)[0, 0]
    values, flat = _normalize(cam.numpy().astype(np.float64))
    return Heatmap(values, target, flat)


def overlay(image, heat, alpha=0.4):
    """Alpha-blend a jet-coloured heatmap over an RGB uint8 image."""
    import matplotlib

    colours = matplotlib.colormaps["jet"](heat)[..., :3] * 255.0
    blended = (1 - alpha) * image.astype(np.float64) + alpha * colours
    return np.clip(np.round(blended), 0, 255).astype(np.uint8)


def save_heatmap(heatmap, image, out_path):
    """Writes ``<out>`` (overlay) and ``<out stem>_raw.png`` (grey heatmap)."""
    from pathlib import Path

    out = Path(out_path)
    Image.fromarray(overlay(image, heatmap.values)).save(out)
    raw = np.round(heatmap.values * 255).astype(np.uint8)
    raw_path = out.with_name(out.stem + "_raw.png")
    Image.fromarray(raw).save(raw_path)
    return out, raw_path
