"""Dice and average surface distance for cup / disc masks."""
from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np
import torch
from scipy import ndimage

from .data import ImageSample, cup_mask, disc_mask, stack_pixels

_CROSS = ndimage.generate_binary_structure(2, 1)
_SQUARE = ndimage.generate_binary_structure(2, 2)


def dice(pred: np.ndarray, gt: np.ndarray) -> float:
    pred, gt = np.asarray(pred, bool), np.asarray(gt, bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    total = pred.sum() + gt.sum()
    if total == 0:
        return 1.0
    return 2.0 * np.logical_and(pred, gt).sum() / total


def boundary(mask: np.ndarray, connectivity: int = 4) -> np.ndarray:
    """Mask pixels with at least one background neighbour; outside the image counts as background."""
    mask = np.asarray(mask, bool)
    structure = _CROSS if connectivity == 4 else _SQUARE
    return mask & ~ndimage.binary_erosion(mask, structure=structure, border_value=0)


def _dist_to(points_mask: np.ndarray, target_boundary: np.ndarray) -> np.ndarray:
    # EDT of the complement gives the exact distance to the nearest boundary pixel.
    return ndimage.distance_transform_edt(~target_boundary)[points_mask]


def asd(pred: np.ndarray, gt: np.ndarray, connectivity: int = 4, penalty: float | None = None) -> float:
    """Symmetric average surface distance in pixels.

    Pooled mean over both boundary sets of the distance to the other set's
    boundary. If either mask is empty the image diagonal (or ``penalty``) is
    returned.
    """
    pred, gt = np.asarray(pred, bool), np.asarray(gt, bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if not pred.any() or not gt.any():
        return float(np.hypot(*pred.shape)) if penalty is None else float(penalty)
    bp, bg = boundary(pred, connectivity), boundary(gt, connectivity)
    d = np.concatenate([_dist_to(bp, bg), _dist_to(bg, bp)])
    return float(d.mean())


@dataclass
class EvalResult:
    dice_cup: float
    dice_disc: float
    dice_avg: float
    asd_cup: float
    asd_disc: float
    asd_avg: float
    n_images: int
    per_image: list = field(default_factory=list)

    def to_dict(self, per_image: bool = False) -> dict:
        d = asdict(self)
        if not per_image:
            d.pop("per_image")
        return d


def evaluate_masks(preds: Sequence[np.ndarray], labels: Sequence[np.ndarray], ids: Sequence[str] | None = None,
                   connectivity: int = 4) -> EvalResult:
    """``preds``: per-image 2 x H x W binary (cup, disc); ``labels``: integer label maps."""
    rows = []
    for i, (pred, label) in enumerate(zip(preds, labels)):
        row = {"id": ids[i] if ids else str(i)}
        for ch, name, gt in ((0, "cup", cup_mask(label)), (1, "disc", disc_mask(label))):
            p = np.asarray(pred[ch], bool)
            row[f"dice_{name}"] = 100.0 * dice(p, gt)
            row[f"asd_{name}"] = asd(p, gt, connectivity)
            flags = []
            if not p.any() and not gt.any():
                flags.append("both_empty")
            elif not p.any() or not gt.any():
                flags.append("empty_mask_penalty")
            row[f"flags_{name}"] = flags
        rows.append(row)
    if not rows:
        raise ValueError("nothing to evaluate")

    def mean(key):
        return float(np.mean([r[key] for r in rows]))

    dc, dd, ac, ad = mean("dice_cup"), mean("dice_disc"), mean("asd_cup"), mean("asd_disc")
    for r in rows:
        r["dice_avg"] = (r["dice_cup"] + r["dice_disc"]) / 2
        r["asd_avg"] = (r["asd_cup"] + r["asd_disc"]) / 2
    return EvalResult(dc, dd, mean("dice_avg"), ac, ad, mean("asd_avg"), len(rows), rows)


@torch.no_grad()
def predict_probs(model, samples: Sequence[ImageSample], batch_size: int = 16) -> np.ndarray:
    was_training = model.training
    model.eval()
    out = []
    for i in range(0, len(samples), batch_size):
        x = torch.from_numpy(stack_pixels(samples[i:i + batch_size]))
        out.append(model(x).prob.numpy())
    model.train(was_training)
    return np.concatenate(out)


def evaluate(model, dataset: Sequence[ImageSample], threshold: float = 0.5, connectivity: int = 4) -> EvalResult:
    if any(s.label is None for s in dataset):
        raise ValueError("evaluate needs a labelled dataset")
    probs = predict_probs(model, dataset)
    return evaluate_masks(probs >= threshold, [s.label for s in dataset], [s.id for s in dataset], connectivity)


def format_table(results: dict[str, EvalResult]) -> str:
    """Cup / Disc / Average x Dice / ASD table, one row per named result."""
    head = f"{'Method':<28}|{'Dice Cup':>9}{'Disc':>8}{'Avg':>8} |{'ASD Cup':>9}{'Disc':>8}{'Avg':>8}"
    lines = [head, "-" * len(head)]
    for name, r in results.items():
        lines.append(f"{name:<28}|{r.dice_cup:9.2f}{r.dice_disc:8.2f}{r.dice_avg:8.2f} |"
                     f"{r.asd_cup:9.2f}{r.asd_disc:8.2f}{r.asd_avg:8.2f}")
    return "\n".join(lines)
