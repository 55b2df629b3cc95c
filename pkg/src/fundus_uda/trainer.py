"""Stage-1 adaptation training, pseudo labelling and stage-2 cross-style self-training."""
from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from .adversarial import PatchDiscriminator, discriminator_step, generator_adv_loss, self_information
from .config import RunConfig
from .data import ImageSample, label_to_masks, stack_pixels
from .metrics import EvalResult, evaluate, predict_probs
from .network import SegNet, SegmentationOutput, seg_loss
from .prototypes import batch_prototypes, consistency_loss

logger = logging.getLogger(__name__)

COMPONENTS = ("seg_source", "seg_synth", "adv_d1", "adv_d2", "con", "total", "disc_d1", "disc_d2")


@dataclass
class PseudoLabelSet:
    masks: np.ndarray  # N x 2 x H x W uint8, channels (cup, disc)
    ids: list[str]
    gamma: float
    source_model_tag: str = ""

    def label_maps(self) -> list[np.ndarray]:
        """Integer label maps; the disc is widened to contain the cup."""
        cup = self.masks[:, 0].astype(bool)
        disc = self.masks[:, 1].astype(bool) | cup
        return list((disc.astype(np.uint8) + cup.astype(np.uint8)))


@dataclass
class StageReport:
    stage: str
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    validation: Optional[dict] = None
    wall_time: float = 0.0
    lambda_adv: float = 0.5

    def epoch_means(self, epoch: int) -> dict:
        rows = [s for s in self.steps if s["epoch"] == epoch]
        return {k: float(np.mean([r[k] for r in rows])) for k in rows[0] if k not in ("epoch", "step")}


def _tensors(samples: Sequence[ImageSample]):
    x = torch.from_numpy(stack_pixels(samples))
    if samples[0].label is None:
        return x, None, None
    labels = torch.from_numpy(np.stack([s.label for s in samples]).astype(np.int64))
    masks = torch.from_numpy(np.stack([label_to_masks(s.label) for s in samples]))
    return x, labels, masks


class _Cycler:
    """Reshuffled index stream over ``n`` items drawn ``size`` at a time."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n, self.rng, self.buf = n, rng, np.empty(0, dtype=np.int64)

    def take(self, size: int) -> np.ndarray:
        while len(self.buf) < size:
            self.buf = np.concatenate([self.buf, self.rng.permutation(self.n)])
        out, self.buf = self.buf[:size], self.buf[size:]
        return out


def default_steps_per_epoch(cfg: RunConfig, pool: int) -> int:
    return cfg.steps_per_epoch or max(1, math.ceil(pool / cfg.batch_size))


def build_model(cfg: RunConfig, seed: int) -> SegNet:
    torch.manual_seed(seed)
    return SegNet(cfg.base_width, cfg.working_resolution, cfg.feature_tap)


def _scheduler(opt, cfg: RunConfig, total_steps: int):
    """Per-step learning-rate schedule: constant, or polynomial decay towards zero."""
    warm = int(round(cfg.lr_warmup * total_steps))
    if cfg.lr_schedule == "constant" and warm == 0:
        return None
    power = cfg.lr_power if cfg.lr_schedule == "poly" else 0.0

    def factor(i):
        ramp = min(1.0, (i + 1) / warm) if warm else 1.0
        return ramp * max(0.0, 1.0 - i / max(total_steps, 1)) ** power

    return torch.optim.lr_scheduler.LambdaLR(opt, factor)


def _step(opt, sched):
    opt.step()
    if sched is not None:
        sched.step()


def _disc_optimizer(D, cfg: RunConfig):
    if cfg.disc_optimizer == "adam":
        return torch.optim.Adam(D.parameters(), lr=cfg.disc_lr, betas=(0.9, 0.99))
    return torch.optim.SGD(D.parameters(), lr=cfg.disc_lr)


def train_stage1(source: Sequence[ImageSample], synth: Sequence[ImageSample], target: Sequence[ImageSample],
                 cfg: RunConfig, seed: Optional[int] = None, init_model: Optional[SegNet] = None,
                 epochs: Optional[int] = None, val: Optional[Sequence[ImageSample]] = None):
    """Optimise seg(source) + seg(synth) + lambda * (adv1 + adv2) + con, alternating with D steps.

    Synthesized images are paired with the source image they were made from.
    Switches in ``cfg`` drop terms for ablations. Returns
    ``(model, {"D1": D1, "D2": D2}, StageReport)``.
    """
    seed = cfg.seed if seed is None else seed
    epochs = cfg.epochs_stage1 if epochs is None else epochs
    synth = list(synth) if cfg.use_smsi else []
    use_adv = cfg.use_adversarial and len(target) > 0
    use_cpc = cfg.use_cpc and len(synth) > 0
    if any(s.label is None for s in source):
        raise ValueError("stage 1 needs labelled source images")

    model = copy.deepcopy(init_model) if init_model is not None else build_model(cfg, seed)
    model.train()
    torch.manual_seed(seed + 1)
    D1 = PatchDiscriminator() if use_adv and synth else None
    D2 = PatchDiscriminator() if use_adv else None
    opt_g = torch.optim.Adam(model.parameters(), lr=cfg.seg_lr, betas=(0.9, 0.99))
    opt_d1 = _disc_optimizer(D1, cfg) if D1 else None
    opt_d2 = _disc_optimizer(D2, cfg) if D2 else None

    xs, ls, ms = _tensors(source)
    src_index = {s.id: i for i, s in enumerate(source)}
    if synth:
        xy, ly, my = _tensors(synth)
        pair = np.array([src_index[s.meta["origin_id"]] for s in synth])
    xt = _tensors(target)[0] if use_adv else None

    # Independent streams so that switching a term off does not perturb the others.
    rng_src, rng_syn, rng_tgt = (np.random.default_rng([seed, k]) for k in range(3))
    cyc_src = _Cycler(len(source), rng_src)
    cyc_syn = _Cycler(len(synth), rng_syn) if synth else None
    cyc_tgt = _Cycler(len(target), rng_tgt) if use_adv else None
    steps = default_steps_per_epoch(cfg, cfg.few_shot * cfg.n_betas * cfg.k_amplitude_groups)
    bs, lam = cfg.batch_size, cfg.lambda_adv
    sch_g = _scheduler(opt_g, cfg, epochs * steps)
    sch_d1 = _scheduler(opt_d1, cfg, epochs * steps) if opt_d1 else None
    sch_d2 = _scheduler(opt_d2, cfg, epochs * steps) if opt_d2 else None

    report = StageReport("stage1", lambda_adv=lam)
    t0 = time.time()
    for epoch in range(epochs):
        for step in range(steps):
            if synth:
                iy = cyc_syn.take(bs)
                isrc = pair[iy]
            else:
                isrc = cyc_src.take(bs)
            rec = dict.fromkeys(COMPONENTS, 0.0)
            if synth:
                # One pass over the source batch and its paired synthesized batch.
                out = model(torch.cat([xs[isrc], xy[iy]]))
                out_s = SegmentationOutput(*(t[:bs] for t in (out.prob, out.feature, out.logits)))
                out_y = SegmentationOutput(*(t[bs:] for t in (out.prob, out.feature, out.logits)))
            else:
                out_s = model(xs[isrc])
            l_src = seg_loss(out_s.prob, ms[isrc], cfg.seg_loss)
            total = l_src
            rec["seg_source"] = l_src.item()
            if synth:
                l_syn = seg_loss(out_y.prob, my[iy], cfg.seg_loss)
                total = total + l_syn
                rec["seg_synth"] = l_syn.item()
                if use_cpc:
                    p_s = batch_prototypes(out_s.feature, ls[isrc], cfg.prototype_norm, "original")
                    p_y = batch_prototypes(out_y.feature, ly[iy], cfg.prototype_norm, "synthesized")
                    l_con = consistency_loss(p_s, p_y, cfg.consistency_eps)
                    total = total + l_con
                    rec["con"] = l_con.item()
            if use_adv:
                it = cyc_tgt.take(bs)
                out_t = model(xt[it])
                info_t = self_information(out_t.prob)
                adv1 = generator_adv_loss(D1, None, info_t) if D1 else info_t.new_zeros(())
                adv2 = generator_adv_loss(None, D2, info_t)
                total = total + lam * (adv1 + adv2)
                rec["adv_d1"], rec["adv_d2"] = adv1.item(), adv2.item()
            rec["total"] = total.item()
            if not math.isfinite(rec["total"]):
                raise FloatingPointError(f"non-finite stage-1 loss at epoch {epoch} step {step}: {rec}")
            opt_g.zero_grad(set_to_none=True)
            total.backward()
            _step(opt_g, sch_g)

            if use_adv:
                info_t = info_t.detach()
                if D1:
                    rec["disc_d1"] = discriminator_step(D1, opt_d1, self_information(out_y.prob.detach()), info_t)
                    if sch_d1:
                        sch_d1.step()
                rec["disc_d2"] = discriminator_step(D2, opt_d2, self_information(out_s.prob.detach()), info_t)
                if sch_d2:
                    sch_d2.step()
            rec["epoch"], rec["step"] = epoch, step
            report.steps.append(rec)
        report.epochs.append({"epoch": epoch, **report.epoch_means(epoch)})
        logger.debug("stage1 epoch %d total %.4f", epoch, report.epochs[-1]["total"])
    report.wall_time = time.time() - t0
    if val:
        report.validation = evaluate(model, val, cfg.eval_threshold, cfg.asd_connectivity).to_dict()
    model.eval()
    return model, {"D1": D1, "D2": D2}, report


def generate_pseudo_labels(model: SegNet, images: Sequence[ImageSample], gamma: float = 0.75,
                           model_tag: str = "") -> PseudoLabelSet:
    """Per-pixel, per-class indicator ``P >= gamma`` in inference mode."""
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must lie in (0, 1), got {gamma}")
    probs = predict_probs(model, images)
    return PseudoLabelSet((probs >= gamma).astype(np.uint8), [s.id for s in images], gamma, model_tag)


def pseudo_labels_from_probs(probs: np.ndarray, gamma: float) -> np.ndarray:
    return (np.asarray(probs) >= gamma).astype(np.uint8)


def train_stage2(theta1: SegNet, target: Sequence[ImageSample], synth_t2s: Sequence[ImageSample],
                 cfg: RunConfig, seed: Optional[int] = None, epochs: Optional[int] = None,
                 mode: Optional[str] = None, gamma: Optional[float] = None):
    """Re-train a copy of ``theta1`` on pseudo-labelled targets and their source-styled copies.

    ``mode="plain"`` trains on the targets alone. Labels carried by the
    samples are never read; supervision comes only from the pseudo labels.
    Returns ``(model, StageReport, pseudo_label_sets)``.
    """
    seed = cfg.seed if seed is None else seed
    epochs = cfg.epochs_stage2 if epochs is None else epochs
    mode = mode or cfg.stage2_mode
    gamma = cfg.gamma if gamma is None else gamma
    if mode not in ("cssl", "plain"):
        raise ValueError(f"unknown stage-2 mode {mode!r}")

    pl_t = generate_pseudo_labels(theta1, target, gamma, "theta1")
    sets = {"target": pl_t}
    synth_t2s = list(synth_t2s) if mode == "cssl" else []
    if synth_t2s:
        if cfg.copy_labels:
            by_id = {i: m for i, m in zip(pl_t.ids, pl_t.masks)}
            masks = np.stack([by_id[s.meta["origin_id"]] for s in synth_t2s])
            sets["synth"] = PseudoLabelSet(masks, [s.id for s in synth_t2s], gamma, "theta1:copied")
        else:
            sets["synth"] = generate_pseudo_labels(theta1, synth_t2s, gamma, "theta1")
    for name, pl in sets.items():
        if pl.masks.sum() == 0:
            logger.warning("stage 2: pseudo labels for %s contain no foreground at gamma=%.2f", name, gamma)

    model = copy.deepcopy(theta1)
    model.train()
    report = StageReport(f"stage2-{mode}")
    if epochs == 0:
        model.eval()
        return model, report, sets

    opt = torch.optim.Adam(model.parameters(), lr=cfg.stage2_lr, betas=(0.9, 0.99))
    xt = torch.from_numpy(stack_pixels(target))
    yt = torch.from_numpy(pl_t.masks.astype(np.float32))
    if synth_t2s:
        xy = torch.from_numpy(stack_pixels(synth_t2s))
        yy = torch.from_numpy(sets["synth"].masks.astype(np.float32))
    rng_t, rng_y = (np.random.default_rng([seed, 10 + k]) for k in range(2))
    cyc_t = _Cycler(len(target), rng_t)
    cyc_y = _Cycler(len(synth_t2s), rng_y) if synth_t2s else None
    steps = default_steps_per_epoch(cfg, len(target) * cfg.n_betas_stage2 * cfg.k_amplitude_groups_stage2)
    sched = _scheduler(opt, cfg, epochs * steps)
    bs = cfg.batch_size
    t0 = time.time()
    for epoch in range(epochs):
        for step in range(steps):
            it = cyc_t.take(bs)
            l_t = seg_loss(model(xt[it]).prob, yt[it], cfg.seg_loss)
            total = l_t
            rec = {"seg_target": l_t.item(), "seg_synth": 0.0}
            if synth_t2s:
                iy = cyc_y.take(bs)
                l_y = seg_loss(model(xy[iy]).prob, yy[iy], cfg.seg_loss)
                total = total + l_y
                rec["seg_synth"] = l_y.item()
            rec["total"] = total.item()
            if not math.isfinite(rec["total"]):
                raise FloatingPointError(f"non-finite stage-2 loss at epoch {epoch} step {step}: {rec}")
            opt.zero_grad(set_to_none=True)
            total.backward()
            _step(opt, sched)
            rec["epoch"], rec["step"] = epoch, step
            report.steps.append(rec)
        report.epochs.append({"epoch": epoch, **report.epoch_means(epoch)})
    report.wall_time = time.time() - t0
    model.eval()
    return model, report, sets


def finetune(model: SegNet, samples: Sequence[ImageSample], cfg: RunConfig, epochs: int, seed: int = 0) -> SegNet:
    """Plain supervised fine-tuning of a copy of ``model`` (used inside the band search)."""
    model = copy.deepcopy(model)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=cfg.seg_lr, betas=(0.9, 0.99))
    x, _, m = _tensors(samples)
    cyc = _Cycler(len(samples), np.random.default_rng(seed))
    steps = math.ceil(len(samples) / cfg.batch_size)
    sched = _scheduler(opt, cfg, epochs * steps)
    for _ in range(epochs * steps):
        idx = cyc.take(min(cfg.batch_size, len(samples)))
        loss = seg_loss(model(x[idx]).prob, m[idx], cfg.seg_loss)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        _step(opt, sched)
    model.eval()
    return model


def mean_dice(model: SegNet, samples: Sequence[ImageSample], cfg: RunConfig) -> float:
    """Average of cup and disc Dice as a fraction in [0, 1]."""
    return evaluate(model, samples, cfg.eval_threshold, cfg.asd_connectivity).dice_avg / 100.0
