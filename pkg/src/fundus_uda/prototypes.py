"""Class prototypes by masked global average pooling, and their cosine consistency loss."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np
import torch
import torch.nn.functional as F

CLASSES = ("cup", "disc")


@dataclass
class ClassPrototype:
    vector: torch.Tensor  # C_f
    class_id: str
    source_kind: str = "original"  # original | synthesized


def class_masks(labels: torch.Tensor) -> dict[str, torch.Tensor]:
    """Binary float masks per class from a (B x) H x W integer label map."""
    return {"cup": (labels == 2).float(), "disc": (labels >= 1).float()}


def downsample_class_mask(label, class_id: str, h: int, w: int) -> torch.Tensor:
    """Area-average the class mask down to ``h x w`` and keep cells that are at least half covered."""
    label = torch.as_tensor(np.asarray(label) if not torch.is_tensor(label) else label)
    if class_id not in CLASSES:
        raise ValueError(f"unknown class {class_id!r}")
    mask = class_masks(label)[class_id]
    H, W = mask.shape[-2:]
    if h > H or w > W:
        raise ValueError(f"cannot downsample {H}x{W} mask to {h}x{w}")
    lead = mask.shape[:-2]
    frac = F.adaptive_avg_pool2d(mask.reshape(-1, 1, H, W), (h, w)).reshape(*lead, h, w)
    return (frac >= 0.5).float()


def class_prototype(feature: torch.Tensor, mask: torch.Tensor, norm: str = "total") -> torch.Tensor:
    """Masked pooling of ``feature`` (... x C x h x w) with ``mask`` (... x h x w).

    ``norm="total"`` divides by h*w, ``norm="area"`` by the mask area.
    An empty mask gives the zero vector.
    """
    if feature.shape[-2:] != mask.shape[-2:]:
        raise ValueError(f"feature {tuple(feature.shape[-2:])} and mask {tuple(mask.shape[-2:])} differ")
    mask = mask.to(feature.dtype)
    summed = (feature * mask.unsqueeze(-3)).sum(dim=(-2, -1))
    if norm == "total":
        return summed / (feature.shape[-2] * feature.shape[-1])
    if norm == "area":
        area = mask.sum(dim=(-2, -1)).unsqueeze(-1)
        return summed / area.clamp_min(1.0)
    raise ValueError(f"unknown prototype norm {norm!r}")


def batch_prototypes(feature: torch.Tensor, labels: torch.Tensor, norm: str = "total",
                     source_kind: str = "original") -> dict[str, Optional[ClassPrototype]]:
    """Per-class prototypes averaged over the batch; ``None`` for classes absent from every label."""
    h, w = feature.shape[-2:]
    out: dict[str, Optional[ClassPrototype]] = {}
    for c in CLASSES:
        m = downsample_class_mask(labels, c, h, w)
        if m.sum() == 0:
            out[c] = None
            continue
        out[c] = ClassPrototype(class_prototype(feature, m, norm).mean(dim=0), c, source_kind)
    return out


def _vec(p):
    return p.vector if isinstance(p, ClassPrototype) else p


def consistency_loss(protos_orig: Mapping, protos_synth: Mapping, epsilon: float = 1e-8) -> torch.Tensor:
    """Sum over classes of ``1 - cos(p_orig, p_synth)`` with the norm product floored at ``epsilon``.

    Classes whose prototype is ``None`` on either side are skipped.
    """
    terms = []
    for c in CLASSES:
        a, b = protos_orig.get(c), protos_synth.get(c)
        if a is None or b is None:
            continue
        a, b = _vec(a), _vec(b)
        denom = torch.clamp(a.norm() * b.norm(), min=epsilon)
        terms.append(1.0 - (a * b).sum() / denom)
    if not terms:
        return torch.zeros(())
    return torch.stack(terms).sum()
