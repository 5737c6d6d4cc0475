"""Parameter and FLOP counts per branch (informational)."""
from __future__ import annotations

import torch
from torch.utils.flop_counter import FlopCounterMode

from .classification import ClassificationNet
from .config import Config
from .segmentation import SegmentationNet


def count_parameters(module, trainable_only=True):
    return sum(p.numel() for p in module.parameters() if p.requires_grad or not trainable_only)


def count_flops(net, size=512):
    """Forward FLOPs for one ``size``x``size`` RGB input (multiply-add = 2 FLOPs).

    Runs on the meta device, so no memory is allocated for activations.
    """
    x = torch.empty(1, 3, size, size, device="meta")
    net = net.to("meta").eval()
    with FlopCounterMode(display=False) as counter, torch.no_grad():
        if isinstance(net, ClassificationNet):
            net(x, x)
        else:
            net(x)
    return counter.get_total_flops()


def complexity_report(cfg: Config | None = None, size=512):
    cfg = cfg or Config()
    out = {}
    with torch.device("meta"):
        nets = {"classification": ClassificationNet(cfg.encoder, cfg.classifier),
                "segmentation": SegmentationNet(cfg.encoder, cfg.segmentation)}
    for name, net in nets.items():
        flops = count_flops(net, size)
        out[name] = {
            "params": count_parameters(net),
            "params_M": count_parameters(net) / 1e6,
            "GFLOPs": flops / 1e9,
            "GMACs": flops / 2e9,
            "input": [size, size, 3],
        }
    return out
