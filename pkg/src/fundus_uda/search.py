"""Band-parameter policy search: K-fold splitting, a TPE proposer and policy assembly."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import norm

logger = logging.getLogger(__name__)

LOW, HIGH = 0.0, 1.0
_EDGE = 1e-6  # keeps draws strictly inside the open interval


@dataclass(frozen=True)
class TrialRecord:
    beta: float
    score: float
    fold_index: int
    trial_index: int = 0

    @property
    def id(self) -> str:
        return f"fold{self.fold_index}/trial{self.trial_index}"


@dataclass
class StylePolicy:
    betas: list[float]
    provenance: list[str] = field(default_factory=list)
    records: list[TrialRecord] = field(default_factory=list)
    errors: list[str] = field(default_factory=list)

    def save(self, path) -> None:
        lines = ["# band-parameter policy: one beta per line"]
        lines += [f"# {pid}" for pid in self.provenance]
        lines += [f"# error: {e}" for e in self.errors]
        lines += [repr(float(b)) for b in self.betas]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "StylePolicy":
        betas, prov = [], []
        for line in Path(path).read_text().splitlines():
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                if line[1:].strip().startswith("fold"):
                    prov.append(line[1:].strip())
                continue
            b = float(line)
            if not 0.0 < b < 1.0:
                raise ValueError(f"{path}: beta {b} outside (0, 1)")
            betas.append(b)
        return cls(betas, prov)


@dataclass(frozen=True)
class Fold:
    source_train: np.ndarray
    source_val: np.ndarray
    target_train: np.ndarray
    target_val: np.ndarray
    index: int = 0


def _kfold(n: int, K: int, rng: np.random.Generator) -> list[np.ndarray]:
    return [np.sort(part) for part in np.array_split(rng.permutation(n), K)]


def split_folds(source: Sequence, target: Sequence, K: int, seed: int = 0) -> list[Fold]:
    """Seeded K-fold partition of both sets; fold ``i`` validates on part ``i``.

    Remainders go to the first folds (10 items, K=3 -> sizes 4, 3, 3).
    """
    if K < 2:
        raise ValueError("need K >= 2 folds")
    if len(source) < K or len(target) < K:
        raise ValueError(f"K={K} exceeds dataset size ({len(source)} source, {len(target)} target)")
    rng = np.random.default_rng(seed)
    s_parts, t_parts = _kfold(len(source), K, rng), _kfold(len(target), K, rng)
    folds = []
    for i in range(K):
        s_tr = np.sort(np.concatenate([p for j, p in enumerate(s_parts) if j != i]))
        t_tr = np.sort(np.concatenate([p for j, p in enumerate(t_parts) if j != i]))
        folds.append(Fold(s_tr, s_parts[i], t_tr, t_parts[i], i))
    return folds


# --------------------------------------------------------------------------
# Tree-structured Parzen estimator over (0, 1)

class _Parzen:
    """Truncated Gaussian mixture on (LOW, HIGH) with a broad prior component."""

    def __init__(self, points: np.ndarray, others: np.ndarray = (), prior_weight: float = 1.0):
        points = np.sort(np.asarray(points, float))
        n = len(points)
        span = HIGH - LOW
        if n == 1:
            # A lone kernel takes its spacing from the nearest observation outside the set.
            gaps = np.abs(np.asarray(others, float) - points[0])
            gaps = gaps[gaps > 0]
            sigmas = np.array([gaps.min() if len(gaps) else span])
        else:
            padded = np.concatenate([[LOW], points, [HIGH]])
            sigmas = np.maximum(points - padded[:-2], padded[2:] - points)
        sigmas = np.clip(sigmas, span / min(100.0, n + 1.0), span)
        self.mus = np.concatenate([points, [(LOW + HIGH) / 2]])
        self.sigmas = np.concatenate([sigmas, [span]])
        w = np.concatenate([np.ones(n), [prior_weight]])
        self.weights = w / w.sum()
        self._a = (LOW - self.mus) / self.sigmas
        self._b = (HIGH - self.mus) / self.sigmas
        self._mass = norm.cdf(self._b) - norm.cdf(self._a)

    def pdf(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_1d(x)[:, None]
        comp = norm.pdf((x - self.mus) / self.sigmas) / (self.sigmas * self._mass)
        return comp @ self.weights

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        idx = rng.choice(len(self.mus), size=size, p=self.weights)
        # Inverse-CDF sampling of the truncated component.
        lo, hi = norm.cdf(self._a[idx]), norm.cdf(self._b[idx])
        u = lo + rng.uniform(size=size) * (hi - lo)
        x = self.mus[idx] + self.sigmas[idx] * norm.ppf(u)
        return np.clip(x, LOW + _EDGE, HIGH - _EDGE)


def _uniform(rng: np.random.Generator) -> float:
    return float(rng.uniform(LOW + _EDGE, HIGH - _EDGE))


def tpe_suggest(history: Sequence[TrialRecord], rng: np.random.Generator, n_startup: int = 8,
                good_quantile: float = 0.25, n_ei: int = 24) -> float:
    """Propose the next beta (scores are maximised)."""
    if len(history) < n_startup:
        return _uniform(rng)
    betas = np.array([r.beta for r in history], float)
    scores = np.array([r.score for r in history], float)
    n_good = max(1, int(math.ceil(good_quantile * len(history))))
    order = np.argsort(-scores, kind="stable")
    good, bad = betas[order[:n_good]], betas[order[n_good:]]
    if len(bad) == 0 or np.ptp(betas) == 0.0:
        return _uniform(rng)
    l, g = _Parzen(good, bad), _Parzen(bad, good)
    cand = l.sample(rng, n_ei)
    ratio = np.log(l.pdf(cand) + 1e-300) - np.log(g.pdf(cand) + 1e-300)
    return float(cand[int(np.argmax(ratio))])


def run_tpe(objective: Callable[[float], float], n_trials: int, rng: np.random.Generator,
            fold_index: int = 0, **tpe_kwargs) -> list[TrialRecord]:
    history: list[TrialRecord] = []
    for t in range(n_trials):
        beta = tpe_suggest(history, rng, **tpe_kwargs)
        score = float(objective(beta))
        if not math.isfinite(score):
            raise FloatingPointError(f"non-finite objective at beta={beta}")
        history.append(TrialRecord(beta, score, fold_index, t))
    return history


def search_beta(trainer_hook: Callable, evaluator_hook: Callable, folds: Sequence, trials_per_fold: int,
                n_betas: int = 3, seed: int = 0, **tpe_kwargs) -> StylePolicy:
    """Per fold, run a TPE search maximising validation Dice and keep the fold's best beta.

    ``trainer_hook(beta, fold)`` returns a model fine-tuned on synthesized
    data; ``evaluator_hook(model, beta, fold)`` returns its validation Dice.
    Fold winners are ranked by score to fill ``n_betas`` slots; if there are
    fewer folds than slots the best remaining trials pad the policy.
    """
    all_records: list[TrialRecord] = []
    winners: list[TrialRecord] = []
    errors: list[str] = []
    for i, fold in enumerate(folds):
        fold_index = getattr(fold, "index", i)
        rng = np.random.default_rng([seed, fold_index])

        def objective(beta, fold=fold):
            return evaluator_hook(trainer_hook(beta, fold), beta, fold)

        try:
            records = run_tpe(objective, trials_per_fold, rng, fold_index, **tpe_kwargs)
        except Exception as exc:  # a failing fold must not sink the others
            logger.warning("fold %d aborted: %s", fold_index, exc)
            errors.append(f"fold{fold_index}: {exc!r}")
            continue
        all_records.extend(records)
        winners.append(max(records, key=lambda r: r.score))
        logger.info("fold %d best beta %.4f (dice %.4f)", fold_index, winners[-1].beta, winners[-1].score)
    if not winners:
        raise RuntimeError(f"all {len(folds)} folds failed: {errors}")

    chosen = sorted(winners, key=lambda r: -r.score)[:n_betas]
    if len(chosen) < n_betas:
        rest = sorted((r for r in all_records if r not in chosen), key=lambda r: -r.score)
        chosen += rest[:n_betas - len(chosen)]
    betas, prov = [], []
    for r in chosen:
        if r.beta in betas:
            logger.warning("duplicate beta %.6f collapsed", r.beta)
            continue
        betas.append(r.beta)
        prov.append(f"{r.id} beta={r.beta:.6f} dice={r.score:.6f}")
    return StylePolicy(betas, prov, all_records, errors)
