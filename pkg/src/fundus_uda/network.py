"""Small encoder / multi-rate context / decoder segmentation network.

The encoder downsamples by 8, the context block runs parallel dilated
convolutions and its output is exposed as the feature map used for class
prototypes. Two sigmoid channels are predicted: 0 = cup, 1 = disc.
"""
from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_VERSION = 1
PROB_CLAMP = 1e-7


@dataclass
class SegmentationOutput:
    prob: torch.Tensor  # B x 2 x H x W
    feature: torch.Tensor  # B x C_f x H/8 x W/8
    logits: torch.Tensor


def _conv(cin, cout, stride=1, dilation=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=dilation, dilation=dilation),
        nn.ReLU(inplace=True),
    )


class Encoder(nn.Module):
    def __init__(self, width):
        super().__init__()
        self.stage1 = nn.Sequential(_conv(3, width), _conv(width, width, stride=2))
        self.stage2 = nn.Sequential(_conv(width, 2 * width, stride=2), _conv(2 * width, 2 * width))
        self.stage3 = nn.Sequential(_conv(2 * width, 4 * width, stride=2), _conv(4 * width, 4 * width))

    def forward(self, x):
        s1 = self.stage1(x)
        s2 = self.stage2(s1)
        return s1, s2, self.stage3(s2)


class MultiRateContext(nn.Module):
    """Parallel atrous branches plus an image-pooling branch, concatenated and projected."""

    def __init__(self, cin, cout, rates=(2, 4, 6)):
        super().__init__()
        branch = cout // 2
        self.branches = nn.ModuleList([nn.Sequential(nn.Conv2d(cin, branch, 1), nn.ReLU(inplace=True))])
        self.branches.extend(_conv(cin, branch, dilation=r) for r in rates)
        self.pool = nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Conv2d(cin, branch, 1), nn.ReLU(inplace=True))
        self.project = nn.Sequential(nn.Conv2d(branch * (len(rates) + 2), cout, 1), nn.ReLU(inplace=True))

    def forward(self, x):
        outs = [b(x) for b in self.branches]
        outs.append(self.pool(x).expand(-1, -1, *x.shape[-2:]))
        return self.project(torch.cat(outs, dim=1))


class Decoder(nn.Module):
    def __init__(self, width, n_classes=2):
        super().__init__()
        self.fuse4 = _conv(4 * width + 2 * width, 2 * width)
        self.fuse2 = _conv(2 * width + width, width)
        self.head = nn.Conv2d(width, n_classes, 1)

    def forward(self, ctx, s1, s2, size):
        x = F.interpolate(ctx, size=s2.shape[-2:], mode="bilinear", align_corners=False)
        x = self.fuse4(torch.cat([x, s2], dim=1))
        x = F.interpolate(x, size=s1.shape[-2:], mode="bilinear", align_corners=False)
        x = self.fuse2(torch.cat([x, s1], dim=1))
        return F.interpolate(self.head(x), size=size, mode="bilinear", align_corners=False)


class SegNet(nn.Module):
    def __init__(self, base_width: int = 16, input_size: Optional[int] = None, feature_tap: str = "context"):
        super().__init__()
        if input_size is not None and input_size % 8:
            raise ValueError(f"input resolution {input_size} is not divisible by 8")
        if feature_tap not in ("context", "encoder"):
            raise ValueError(f"unknown feature tap {feature_tap!r}")
        self.base_width = base_width
        self.feature_tap = feature_tap
        self.encoder = Encoder(base_width)
        self.context = MultiRateContext(4 * base_width, 4 * base_width)
        self.decoder = Decoder(base_width)

    def forward(self, x: torch.Tensor) -> SegmentationOutput:
        h, w = x.shape[-2:]
        if h % 8 or w % 8:
            raise ValueError(f"input resolution {h}x{w} is not divisible by 8")
        s1, s2, s3 = self.encoder(x)
        ctx = self.context(s3)
        logits = self.decoder(ctx, s1, s2, (h, w))
        feature = ctx if self.feature_tap == "context" else s3
        return SegmentationOutput(torch.sigmoid(logits), feature, logits)

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        return {name: list(getattr(self, name).parameters()) for name in ("encoder", "context", "decoder")}

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def seg_loss(prob: torch.Tensor, target: torch.Tensor, kind: str = "bce") -> torch.Tensor:
    """Mean binary cross-entropy over pixels and both class channels.

    ``target`` holds the binary (cup, disc) masks with the same shape as ``prob``.
    """
    if prob.shape != target.shape:
        raise ValueError(f"shape mismatch: prob {tuple(prob.shape)} vs target {tuple(target.shape)}")
    p = prob.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    loss = -(target * torch.log(p) + (1.0 - target) * torch.log(1.0 - p)).mean()
    if kind == "bce_dice":
        dims = tuple(range(2, prob.ndim))
        inter = (prob * target).sum(dims)
        dice = (2 * inter + 1.0) / (prob.sum(dims) + target.sum(dims) + 1.0)
        loss = loss + (1.0 - dice).mean()
    elif kind != "bce":
        raise ValueError(f"unknown seg loss {kind!r}")
    return loss


# --------------------------------------------------------------------------
# Checkpoints

def save_checkpoint(path, modules: dict[str, nn.Module], stage: str, config: Optional[dict] = None,
                    extra: Optional[dict] = None) -> str:
    """Write named modules to one container file; returns a content id."""
    groups = {}
    for name, module in modules.items():
        if isinstance(module, SegNet):
            for gname, sub in (("encoder", module.encoder), ("context", module.context),
                               ("decoder", module.decoder)):
                groups[f"{name}.{gname}"] = sub.state_dict()
        else:
            groups[name] = module.state_dict()
    payload = {"format_version": CHECKPOINT_VERSION, "stage": stage, "config": config or {},
               "groups": groups, "extra": extra or {}}
    buf = io.BytesIO()
    torch.save(payload, buf)
    data = buf.getvalue()
    Path(path).write_bytes(data)
    return checkpoint_id(groups)


def checkpoint_id(groups: dict) -> str:
    h = hashlib.sha256()
    for key in sorted(groups):
        for pname, t in sorted(groups[key].items()):
            h.update(f"{key}.{pname}".encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()[:16]


def load_checkpoint(path) -> dict:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload.get('format_version')}")
    return payload


def restore_segnet(payload: dict, name: str = "model", **kwargs) -> SegNet:
    cfg = payload.get("config", {})
    net = SegNet(base_width=cfg.get("base_width", 16), feature_tap=cfg.get("feature_tap", "context"), **kwargs)
    for gname in ("encoder", "context", "decoder"):
        getattr(net, gname).load_state_dict(payload["groups"][f"{name}.{gname}"])
    return net


def state_digest(module: nn.Module) -> str:
    """Checksum of all parameters; used to assert which side of a GAN step moved."""
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
