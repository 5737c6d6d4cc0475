"""Shared feature extractor: dilated ResNet, ASPP and SE, output stride 8."""
from __future__ import annotations

import logging

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import EncoderConfig

log = logging.getLogger(__name__)

OUTPUT_STRIDE = 8

_LAYOUTS = {18: ("basic", (2, 2, 2, 2)), 50: ("bottleneck", (3, 4, 6, 3)),
            101: ("bottleneck", (3, 4, 23, 3))}


class BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, inplanes, planes, stride=1, dilation=1, downsample=None):
        super().__init__()
        self.conv1 = nn.Conv2d(inplanes, planes, 3, stride, padding=dilation,
                               dilation=dilation, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.relu = nn.ReLU(inplace=True)
        self.conv2 = nn.Conv2d(planes, planes, 3, 1, padding=dilation,
                               dilation=dilation, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.downsample = downsample

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + identity)


class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, inplanes, planes, stride=1, dilation=1, downsample=None):
        super().__init__()
        self.conv1 = nn.Conv2d(inplanes, planes, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, stride, padding=dilation,
                               dilation=dilation, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.conv3 = nn.Conv2d(planes, planes * 4, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(planes * 4)
        self.relu = nn.ReLU(inplace=True)
        self.downsample = downsample

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        return self.relu(out + identity)


class ResNetBackbone(nn.Module):
    """ResNet with stages 3 and 4 dilated instead of strided.

    Module names follow torchvision so its pretrained weights load directly
    when ``base_width`` is 64.
    """

    def __init__(self, depth=101, base_width=64):
        super().__init__()
        kind, blocks = _LAYOUTS[depth]
        self.block = BasicBlock if kind == "basic" else Bottleneck
        self.inplanes = base_width
        self.dilation = 1
        self.conv1 = nn.Conv2d(3, base_width, 7, 2, 3, bias=False)
        self.bn1 = nn.BatchNorm2d(base_width)
        self.relu = nn.ReLU(inplace=True)
        self.maxpool = nn.MaxPool2d(3, 2, 1)
        w = base_width
        self.layer1 = self._make_layer(w, blocks[0])
        self.layer2 = self._make_layer(w * 2, blocks[1], stride=2)
        self.layer3 = self._make_layer(w * 4, blocks[2], dilate=2)
        self.layer4 = self._make_layer(w * 8, blocks[3], dilate=2)
        self.channels2 = w * 2 * self.block.expansion
        self.channels4 = w * 8 * self.block.expansion
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            elif isinstance(m, nn.BatchNorm2d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    def _make_layer(self, planes, n, stride=1, dilate=1):
        block = self.block
        first_dilation = self.dilation
        self.dilation *= dilate
        downsample = None
        if stride != 1 or dilate != 1 or self.inplanes != planes * block.expansion:
            downsample = nn.Sequential(
                nn.Conv2d(self.inplanes, planes * block.expansion, 1, stride, bias=False),
                nn.BatchNorm2d(planes * block.expansion),
            )
        layers = [block(self.inplanes, planes, stride, first_dilation, downsample)]
        self.inplanes = planes * block.expansion
        layers += [block(self.inplanes, planes, dilation=self.dilation) for _ in range(1, n)]
        return nn.Sequential(*layers)

    def forward(self, x):
        if x.shape[-1] % OUTPUT_STRIDE or x.shape[-2] % OUTPUT_STRIDE:
            raise ValueError(f"input size {tuple(x.shape[-2:])} is not divisible by {OUTPUT_STRIDE}")
        x = self.maxpool(self.relu(self.bn1(self.conv1(x))))
        x = self.layer1(x)
        f2 = self.layer2(x)
        f4 = self.layer4(self.layer3(f2))
        return f2, f4


class ASPP(nn.Module):
    """Parallel dilated 3x3 branches (rate 1 is a 1x1 branch) plus image pooling."""

    def __init__(self, in_channels, out_channels=256, dilations=(1, 6, 12, 18)):
        super().__init__()
        self.dilations = tuple(dilations)
        self.branches = nn.ModuleList()
        for d in self.dilations:
            k = 1 if d == 1 else 3
            self.branches.append(nn.Sequential(
                nn.Conv2d(in_channels, out_channels, k, padding=0 if k == 1 else d,
                          dilation=d, bias=False),
                nn.BatchNorm2d(out_channels),
                nn.ReLU(inplace=True),
            ))
        # no norm on the pooled branch: BatchNorm over a 1x1 map breaks at batch size 1
        self.pool = nn.Conv2d(in_channels, out_channels, 1)
        nn.init.zeros_(self.pool.bias)
        self.project = nn.Sequential(
            nn.Conv2d(out_channels * (len(self.dilations) + 1), out_channels, 1, bias=False),
            nn.BatchNorm2d(out_channels),
            nn.ReLU(inplace=True),
        )
        self._warned = set()

    def _branch(self, seq, d, x):
        conv = seq[0]
        h, w = x.shape[-2:]
        if d > 1 and d >= h and d >= w:
            # every off-centre tap lands in the zero padding
            if d not in self._warned:
                log.info("ASPP rate %d exceeds %dx%d map; using centre tap only", d, h, w)
                self._warned.add(d)
            x = F.conv2d(x, conv.weight[:, :, 1:2, 1:2])
        else:
            x = conv(x)
        return seq[2](seq[1](x))

    def forward(self, x):
        outs = [self._branch(seq, d, x) for seq, d in zip(self.branches, self.dilations)]
        pooled = F.relu(self.pool(F.adaptive_avg_pool2d(x, 1)))
        outs.append(pooled.expand(-1, -1, x.shape[-2], x.shape[-1]))
        return self.project(torch.cat(outs, dim=1))


class SEBlock(nn.Module):
    """Squeeze-and-excitation: channel gates from a global-average bottleneck."""

    def __init__(self, channels, reduction=16):
        super().__init__()
        self.fc1 = nn.Linear(channels, max(channels // reduction, 1))
        self.fc2 = nn.Linear(max(channels // reduction, 1), channels)

    def gates(self, x):
        s = x.mean(dim=(2, 3))
        return torch.sigmoid(self.fc2(F.relu(self.fc1(s))))

    def forward(self, x):
        return x * self.gates(x)[:, :, None, None]


class Encoder(nn.Module):
    """concat(layer2, layer4) -> ASPP -> SE; features at 1/8 input resolution."""

    def __init__(self, cfg: EncoderConfig | None = None):
        super().__init__()
        cfg = cfg or EncoderConfig()
        cfg.validate()
        self.cfg = cfg
        self.backbone = ResNetBackbone(cfg.backbone_depth, cfg.base_width)
        in_ch = self.backbone.channels2 + self.backbone.channels4
        self.aspp = ASPP(in_ch, cfg.output_channels, cfg.aspp_dilations)
        self.se = SEBlock(cfg.output_channels, cfg.se_reduction)
        self.out_channels = cfg.output_channels
        if cfg.pretrained:
            load_pretrained_backbone(self.backbone, cfg)

    def forward(self, x):
        f2, f4 = self.backbone(x)
        return self.se(self.aspp(torch.cat([f2, f4], dim=1)))


def load_pretrained_backbone(backbone, cfg):
    """Copy torchvision ImageNet weights into the backbone if they are obtainable."""
    if cfg.base_width != 64:
        log.warning("pretrained weights need base_width=64; keeping random init")
        return False
    try:
        import torchvision
        ctor = getattr(torchvision.models, f"resnet{cfg.backbone_depth}")
        state = ctor(weights="DEFAULT").state_dict()
    except Exception as exc:  # offline, missing cache, ...
        log.warning("pretrained weights unavailable (%s); keeping random init", exc)
        return False
    state = {k: v for k, v in state.items() if not k.startswith("fc.")}
    backbone.load_state_dict(state)
    return True


# ImageNet statistics; inputs are scaled to [0, 1] first
MEAN = torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1)
STD = torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1)


def to_tensor(images, dtype=torch.float32):
    """uint8 HxWx3 (or NxHxWx3) arrays -> normalized NCHW tensor."""
    x = torch.as_tensor(images)
    if x.ndim == 3:
        x = x[None]
    x = x.permute(0, 3, 1, 2).to(dtype) / 255.0
    return (x - MEAN.to(dtype)) / STD.to(dtype)
