"""End-to-end orchestration: band search, stylization, both training stages and evaluation.

Every step writes its artifact into the run directory. A step is skipped when
its artifact already exists and nothing upstream was recomputed in the same
invocation, which makes any run resumable.
"""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from . import __version__
from .config import RunConfig, save_config
from .data import ImageSample, desk_domains, fingerprint, load_dataset, strip_labels
from .fourier import average_amplitude, expand_dataset, stylize
from .metrics import EvalResult, evaluate, format_table
from .network import load_checkpoint, restore_segnet, save_checkpoint
from .search import StylePolicy, split_folds, search_beta
from .trainer import (
    PseudoLabelSet, finetune, generate_pseudo_labels, mean_dice, train_stage1, train_stage2,
)

logger = logging.getLogger(__name__)

STEPS = ("warmup", "search_s2t", "stylize_s2t", "stage1", "search_t2s", "stylize_t2s",
         "pseudo_label", "stage2", "evaluate")

ABLATION_ROWS = ("source_only", "adversarial", "smsi", "cpc", "plain_pl", "cssl")
ABLATION_LABELS = {
    "source_only": "Source only",
    "adversarial": "Adversarial (Xs, Xt)",
    "smsi": "+ SMSI (Xs, Xs->t)",
    "cpc": "+ Class-prototype consistency",
    "plain_pl": "+ Plain pseudo label (Xt)",
    "cssl": "+ CSSL (Xt, Xt->s)",
}


@dataclass
class Datasets:
    source: list[ImageSample]
    target: list[ImageSample]  # unlabelled training targets
    test: list[ImageSample]  # labelled held-out targets


def build_datasets(cfg: RunConfig, seed: int, source_dir=None, target_dir=None, test_dir=None) -> Datasets:
    """Real directories when given, otherwise the synthetic desk-scale domains."""
    if source_dir:
        kw = dict(working_resolution=cfg.working_resolution, center_crop=cfg.center_crop,
                  normalize=cfg.normalize)
        src = load_dataset(source_dir, "source", few_shot=cfg.few_shot, seed=seed, **kw)
        tgt = strip_labels(load_dataset(target_dir, "target", **kw))
        test = load_dataset(test_dir, "test", **kw)
        if any(s.label is None for s in test):
            raise ValueError(f"{test_dir}: test images need masks")
        return Datasets(src, tgt, test)
    d = desk_domains(seed, cfg)
    return Datasets(d["source"], strip_labels(d["target"]), d["test"])


# --------------------------------------------------------------------------
# band search

def make_search_hooks(warm_model, labeled: Sequence[ImageSample], amp_pool: Sequence[ImageSample],
                      cfg: RunConfig, seed: int):
    """Hooks for :func:`search_beta`.

    A trial stylizes the fold's training images with the fold's mean amplitude
    of ``amp_pool`` at the proposed beta, fine-tunes the warm model on them and
    scores Dice on the stylized validation images against their labels.
    """
    amp_cache = {}

    def group(fold):
        if fold.index not in amp_cache:
            amp_cache[fold.index] = average_amplitude([amp_pool[i] for i in fold.target_train], 1)[0]
        return amp_cache[fold.index]

    def trainer_hook(beta, fold):
        g = group(fold)
        train = [stylize(labeled[i], g, beta, cfg.swap_dc) for i in fold.source_train]
        return finetune(warm_model, train, cfg, cfg.finetune_epochs, seed)

    def evaluator_hook(model, beta, fold):
        g = group(fold)
        val = [stylize(labeled[i], g, beta, cfg.swap_dc) for i in fold.source_val]
        return mean_dice(model, val, cfg)

    return trainer_hook, evaluator_hook


def run_search(warm_model, labeled, amp_pool, cfg: RunConfig, seed: int, n_betas: int) -> StylePolicy:
    folds = split_folds(labeled, amp_pool, cfg.search_folds, seed)
    trainer_hook, evaluator_hook = make_search_hooks(warm_model, labeled, amp_pool, cfg, seed)
    return search_beta(trainer_hook, evaluator_hook, folds, cfg.trials_per_fold, n_betas, seed,
                       n_startup=cfg.tpe_n_startup, good_quantile=cfg.tpe_good_quantile, n_ei=cfg.tpe_n_ei)


def pseudo_labeled(samples: Sequence[ImageSample], pl: PseudoLabelSet) -> list[ImageSample]:
    return [s.with_(label=lab) for s, lab in zip(samples, pl.label_maps())]


def source_only_config(cfg: RunConfig) -> RunConfig:
    return cfg.replace(use_adversarial=False, use_smsi=False, use_cpc=False)


# --------------------------------------------------------------------------
# persistence helpers

def save_samples(path, samples: Sequence[ImageSample]) -> None:
    labels = np.stack([s.label if s.label is not None else np.full(s.shape, 255, np.uint8) for s in samples])
    np.savez_compressed(path, pixels=np.stack([s.pixels for s in samples]), labels=labels,
                        ids=np.array([s.id for s in samples]), domains=np.array([s.domain for s in samples]),
                        meta=np.array([json.dumps(s.meta) for s in samples]))


def load_samples(path) -> list[ImageSample]:
    z = np.load(path)
    out = []
    for px, lab, sid, dom, meta in zip(z["pixels"], z["labels"], z["ids"], z["domains"], z["meta"]):
        out.append(ImageSample(px, None if (lab == 255).all() else lab, str(dom), str(sid), json.loads(str(meta))))
    return out


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def write_report(path, report) -> None:
    with open(path, "w") as fh:
        for rec in report.steps:
            fh.write(json.dumps({"stage": report.stage, **rec}) + "\n")
        fh.write(json.dumps({"stage": report.stage, "summary": report.epochs[-1] if report.epochs else {},
                             "wall_time": report.wall_time}) + "\n")


# --------------------------------------------------------------------------
# full pipeline

ARTIFACTS = {
    "warmup": "warm.pt",
    "search_s2t": "policy_s2t.txt",
    "stylize_s2t": "synth_s2t.npz",
    "stage1": "stage1.pt",
    "search_t2s": "policy_t2s.txt",
    "stylize_t2s": "synth_t2s.npz",
    "pseudo_label": "pseudo_labels.npz",
    "stage2": "stage2.pt",
    "evaluate": "eval.json",
}


class Pipeline:
    """Step-wise runner over one run directory.

    ``run()`` executes every step; ``run(["stage2"])`` only the named ones,
    which then need their upstream artifacts on disk.
    """

    def __init__(self, cfg: RunConfig, run_dir, data: Optional[Datasets] = None, seed: Optional[int] = None,
                 log: Callable[[str], None] = logger.info):
        self.cfg = cfg
        self.seed = cfg.seed if seed is None else seed
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.data = data or build_datasets(cfg, self.seed)
        self.log = log
        self.paths = {k: self.run_dir / v for k, v in ARTIFACTS.items()}
        self.manifest_path = self.run_dir / "manifest.json"
        self.manifest = {
            "config": cfg.to_dict(), "seed": self.seed, "code_version": __version__,
            "datasets": {k: fingerprint(getattr(self.data, k)) for k in ("source", "target", "test")},
            "executed_steps": [], "completed_steps": [], "artifacts": {},
        }
        save_config(cfg, self.run_dir / "config.yaml")

    # -- helpers
    def _need(self, step: str) -> Path:
        path = self.paths[step]
        if not path.exists():
            raise FileNotFoundError(f"{path} missing; run the {step!r} step first")
        return path

    def load_model(self, step: str):
        return restore_segnet(load_checkpoint(self._need(step))).eval()

    def _write_manifest(self):
        arts = {}
        for step, path in self.paths.items():
            if path.exists():
                arts[step] = {"path": path.name, "sha256": file_hash(path)}
        for extra in sorted(self.run_dir.glob("report_*.jsonl")) + [self.run_dir / "eval_table.txt"]:
            if extra.exists():
                arts[extra.stem] = {"path": extra.name, "sha256": file_hash(extra)}
        self.manifest["artifacts"] = arts
        if self.paths["evaluate"].exists():
            ev = json.loads(self.paths["evaluate"].read_text())
            self.manifest["eval"] = {k: v for k, v in ev.items() if k != "per_image"}
        for key in ("search_s2t", "search_t2s"):
            if self.paths[key].exists():
                self.manifest.setdefault("policies", {})[key] = StylePolicy.load(self.paths[key]).betas
        self.manifest_path.write_text(json.dumps(self.manifest, indent=1))

    # -- steps
    def warmup(self):
        model, _, report = train_stage1(self.data.source, [], [], source_only_config(self.cfg), self.seed)
        save_checkpoint(self.paths["warmup"], {"model": model}, "source_only", self.cfg.to_dict())
        write_report(self.run_dir / "report_warmup.jsonl", report)

    def search_s2t(self):
        policy = run_search(self.load_model("warmup"), self.data.source, self.data.target, self.cfg,
                            self.seed, self.cfg.n_betas)
        policy.save(self.paths["search_s2t"])

    def stylize_s2t(self):
        groups = average_amplitude(self.data.target, self.cfg.k_amplitude_groups, self.seed)
        synth = expand_dataset(self.data.source, StylePolicy.load(self._need("search_s2t")), groups, self.cfg.swap_dc)
        save_samples(self.paths["stylize_s2t"], synth)

    def stage1(self):
        synth = load_samples(self._need("stylize_s2t"))
        model, discs, report = train_stage1(self.data.source, synth, self.data.target, self.cfg, self.seed)
        mods = {"model": model, **{k: v for k, v in discs.items() if v is not None}}
        save_checkpoint(self.paths["stage1"], mods, "stage1", self.cfg.to_dict())
        write_report(self.run_dir / "report_stage1.jsonl", report)

    def search_t2s(self):
        if self.cfg.t2s_policy == "reuse":
            StylePolicy.load(self._need("search_s2t")).save(self.paths["search_t2s"])
            return
        theta1 = self.load_model("stage1")
        pl = generate_pseudo_labels(theta1, self.data.target, self.cfg.gamma)
        policy = run_search(theta1, pseudo_labeled(self.data.target, pl), self.data.source, self.cfg,
                            self.seed, self.cfg.n_betas_stage2)
        policy.save(self.paths["search_t2s"])

    def stylize_t2s(self):
        groups = average_amplitude(self.data.source, self.cfg.k_amplitude_groups_stage2, self.seed)
        synth = expand_dataset(self.data.target, StylePolicy.load(self._need("search_t2s")), groups, self.cfg.swap_dc)
        save_samples(self.paths["stylize_t2s"], synth)

    def pseudo_label(self):
        theta1 = self.load_model("stage1")
        pl_t = generate_pseudo_labels(theta1, self.data.target, self.cfg.gamma, "stage1")
        pl_y = generate_pseudo_labels(theta1, load_samples(self._need("stylize_t2s")), self.cfg.gamma, "stage1")
        np.savez_compressed(self.paths["pseudo_label"], target=pl_t.masks, target_ids=np.array(pl_t.ids),
                            synth=pl_y.masks, synth_ids=np.array(pl_y.ids), gamma=self.cfg.gamma)

    def stage2(self):
        theta1 = self.load_model("stage1")
        self._need("pseudo_label")
        if self.cfg.stage2_mode == "none":
            model = theta1
        else:
            synth = load_samples(self._need("stylize_t2s"))
            model, report, _ = train_stage2(theta1, self.data.target, synth, self.cfg, self.seed)
            write_report(self.run_dir / "report_stage2.jsonl", report)
        save_checkpoint(self.paths["stage2"], {"model": model}, "stage2", self.cfg.to_dict())

    def evaluate(self):
        result = evaluate(self.load_model("stage2"), self.data.test, self.cfg.eval_threshold,
                          self.cfg.asd_connectivity)
        self.paths["evaluate"].write_text(json.dumps(result.to_dict(per_image=True), indent=1))
        (self.run_dir / "eval_table.txt").write_text(format_table({"full model": result}) + "\n")

    # -- driver
    def run(self, steps: Optional[Sequence[str]] = None, resume: bool = True,
            force: Sequence[str] = ()) -> dict:
        """Run ``steps`` (default: all) in order and return the manifest.

        With ``resume`` a step whose artifact exists is skipped unless an
        earlier step was recomputed in this call or it is listed in ``force``.
        """
        chosen = list(STEPS) if steps is None else [s for s in STEPS if s in steps]
        unknown = set(steps or ()) - set(STEPS)
        if unknown:
            raise ValueError(f"unknown steps {sorted(unknown)}")
        dirty = False
        for name in chosen:
            artifact = self.paths[name]
            if resume and artifact.exists() and not dirty and name not in force:
                self.log(f"[{name}] reuse {artifact.name}")
            else:
                t0 = time.time()
                try:
                    getattr(self, name)()
                except Exception as exc:
                    self.manifest["failed_step"] = f"{name}: {exc!r}"
                    self._write_manifest()
                    raise
                dirty = True
                self.manifest["executed_steps"].append(name)
                self.log(f"[{name}] done in {time.time() - t0:.1f}s")
            self.manifest["completed_steps"].append(name)
            self._write_manifest()
        return self.manifest


def run_pipeline(cfg: RunConfig, run_dir, data: Optional[Datasets] = None, seed: Optional[int] = None,
                 log: Callable[[str], None] = logger.info) -> dict:
    """Run (or resume) every step and return the experiment manifest."""
    return Pipeline(cfg, run_dir, data, seed, log).run()

# --------------------------------------------------------------------------
# ablation ladder

def run_ablation(cfg: RunConfig, seed: int, data: Optional[Datasets] = None,
                 log: Callable[[str], None] = logger.info) -> dict:
    """Evaluate every ladder row for one seed. Returns row -> EvalResult plus models/policies."""
    data = data or build_datasets(cfg, seed)
    results: dict[str, EvalResult] = {}
    t0 = time.time()

    def ev(model):
        return evaluate(model, data.test, cfg.eval_threshold, cfg.asd_connectivity)

    warm, _, _ = train_stage1(data.source, [], [], source_only_config(cfg), seed)
    results["source_only"] = ev(warm)
    log(f"seed {seed} source_only {results['source_only'].dice_avg:.2f} ({time.time() - t0:.0f}s)")

    adv_cfg = cfg.replace(use_adversarial=True, use_smsi=False, use_cpc=False)
    model, _, _ = train_stage1(data.source, [], data.target, adv_cfg, seed)
    results["adversarial"] = ev(model)
    log(f"seed {seed} adversarial {results['adversarial'].dice_avg:.2f} ({time.time() - t0:.0f}s)")

    policy = run_search(warm, data.source, data.target, cfg, seed, cfg.n_betas)
    groups = average_amplitude(data.target, cfg.k_amplitude_groups, seed)
    synth = expand_dataset(data.source, policy, groups, cfg.swap_dc)
    log(f"seed {seed} policy {[round(b, 4) for b in policy.betas]} ({time.time() - t0:.0f}s)")

    model, _, _ = train_stage1(data.source, synth, data.target,
                               cfg.replace(use_adversarial=True, use_smsi=True, use_cpc=False), seed)
    results["smsi"] = ev(model)
    log(f"seed {seed} smsi {results['smsi'].dice_avg:.2f} ({time.time() - t0:.0f}s)")

    theta1, _, _ = train_stage1(data.source, synth, data.target,
                                cfg.replace(use_adversarial=True, use_smsi=True, use_cpc=True), seed)
    results["cpc"] = ev(theta1)
    log(f"seed {seed} cpc {results['cpc'].dice_avg:.2f} ({time.time() - t0:.0f}s)")

    model, _, _ = train_stage2(theta1, data.target, [], cfg, seed, mode="plain")
    results["plain_pl"] = ev(model)
    synth_t2s, policy_t2s = stylize_back(theta1, data, cfg, seed, policy)
    model, _, _ = train_stage2(theta1, data.target, synth_t2s, cfg, seed, mode="cssl")
    results["cssl"] = ev(model)
    log(f"seed {seed} plain_pl {results['plain_pl'].dice_avg:.2f} cssl {results['cssl'].dice_avg:.2f} "
        f"({time.time() - t0:.0f}s)")
    return {"results": results, "theta1": theta1, "policy_s2t": policy, "policy_t2s": policy_t2s,
            "synth_t2s": synth_t2s, "data": data}


def stylize_back(theta1, data: Datasets, cfg: RunConfig, seed: int, policy_s2t: StylePolicy):
    """Source-styled copies of the targets, with a searched or reused band policy."""
    if cfg.t2s_policy == "reuse":
        policy = policy_s2t
    else:
        pl = generate_pseudo_labels(theta1, data.target, cfg.gamma)
        policy = run_search(theta1, pseudo_labeled(data.target, pl), data.source, cfg, seed, cfg.n_betas_stage2)
    groups = average_amplitude(data.source, cfg.k_amplitude_groups_stage2, seed)
    return expand_dataset(data.target, policy, groups, cfg.swap_dc), policy


def summarize_ablation(per_seed: Sequence[dict]) -> dict[str, dict]:
    """Mean over seeds of every row's metrics."""
    out = {}
    for row in ABLATION_ROWS:
        rs = [p[row] for p in per_seed]
        out[row] = {k: float(np.mean([getattr(r, k) for r in rs]))
                    for k in ("dice_cup", "dice_disc", "dice_avg", "asd_cup", "asd_disc", "asd_avg")}
    return out


def ablation_table(summary: dict[str, dict]) -> str:
    results = {ABLATION_LABELS[k]: EvalResult(**v, n_images=0) for k, v in summary.items()}
    return format_table(results)


# --------------------------------------------------------------------------
# gamma sweep

def gamma_sweep(cfg: RunConfig, gammas: Sequence[float], theta1, data: Datasets, synth_t2s,
                seed: Optional[int] = None) -> list[dict]:
    """Re-run stage 2 for each threshold; one row per gamma."""
    if not gammas:
        raise ValueError("no gammas")
    seed = cfg.seed if seed is None else seed
    rows = []
    for g in gammas:
        model, _, _ = train_stage2(theta1, data.target, synth_t2s, cfg, seed, gamma=g)
        r = evaluate(model, data.test, cfg.eval_threshold, cfg.asd_connectivity)
        rows.append({"gamma": float(g), **r.to_dict()})
    return rows


def plot_gamma_sweep(rows: Sequence[dict], path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    g = [r["gamma"] for r in rows]
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(8, 3))
    a1.plot(g, [r["dice_avg"] for r in rows], "o-")
    a1.set_xlabel("gamma")
    a1.set_ylabel("Dice [%]")
    a2.plot(g, [r["asd_avg"] for r in rows], "o-", color="C1")
    a2.set_xlabel("gamma")
    a2.set_ylabel("ASD [px]")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def unimodal_deviation(values: Sequence[float]) -> float:
    """Smallest max-abs deviation of ``values`` from any unimodal (rise-then-fall) sequence.

    For each candidate peak the best fit is an L-infinity isotonic regression
    on each side; for a non-decreasing fit the optimum is half the largest
    drop below a running maximum.
    """
    v = np.asarray(values, float)

    def inc_dev(x):
        # max over i<j of (x_i - x_j) / 2
        run, worst = -np.inf, 0.0
        for xi in x:
            run = max(run, xi)
            worst = max(worst, (run - xi) / 2)
        return worst

    best = np.inf
    for peak in range(len(v)):
        best = min(best, max(inc_dev(v[:peak + 1]), inc_dev(v[peak:][::-1])))
    return float(best)
