"""Run configuration, presets and config-file loading."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

import yaml


@dataclass
class RunConfig:
    # data
    working_resolution: int = 64
    few_shot: int = 10
    n_target_train: int = 60
    n_target_test: int = 40
    center_crop: Optional[float] = None  # fraction of the shorter side kept, real data only
    normalize: bool = False

    # style synthesis
    n_betas: int = 3
    k_amplitude_groups: int = 5
    n_betas_stage2: int = 3
    k_amplitude_groups_stage2: int = 1
    swap_dc: bool = True
    t2s_policy: str = "search"  # search | reuse

    # policy search
    search_folds: int = 3
    trials_per_fold: int = 12
    finetune_epochs: int = 5
    tpe_n_startup: int = 8
    tpe_good_quantile: float = 0.25
    tpe_n_ei: int = 24

    # network
    base_width: int = 16
    feature_tap: str = "context"  # context | encoder
    seg_loss: str = "bce"  # bce | bce_dice

    # stage 1
    lambda_adv: float = 0.5
    seg_lr: float = 1e-3
    lr_schedule: str = "poly"  # poly | constant, applied per step in every stage
    lr_power: float = 0.9
    lr_warmup: float = 0.3  # fraction of the steps spent ramping the learning rate up linearly
    disc_lr: float = 2.5e-5
    disc_optimizer: str = "sgd"  # sgd | adam
    batch_size: int = 8
    epochs_stage1: int = 40
    steps_per_epoch: Optional[int] = None  # None: size of the expanded source set / batch
    prototype_norm: str = "total"  # total | area
    consistency_eps: float = 1e-8

    # ablation switches
    use_adversarial: bool = True
    use_smsi: bool = True
    use_cpc: bool = True
    stage2_mode: str = "cssl"  # cssl | plain | none

    # stage 2
    gamma: float = 0.75
    stage2_lr: float = 2e-3
    epochs_stage2: int = 10
    copy_labels: bool = False

    # evaluation
    eval_threshold: float = 0.5
    asd_connectivity: int = 4

    seed: int = 0
    preset: str = "desk"

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.working_resolution % 8:
            raise ValueError("working_resolution must be divisible by 8")
        if self.stage2_mode not in ("cssl", "plain", "none"):
            raise ValueError(f"unknown stage2_mode {self.stage2_mode!r}")
        if self.lr_schedule not in ("poly", "constant"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.disc_optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown disc_optimizer {self.disc_optimizer!r}")
        if self.prototype_norm not in ("total", "area"):
            raise ValueError(f"unknown prototype_norm {self.prototype_norm!r}")

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


PRESETS: dict[str, dict[str, Any]] = {
    # Desk scale: the discriminators learn too slowly under plain SGD at the
    # full-scale rate to give the generator a useful signal, so they get Adam
    # and the adversarial weight is reduced accordingly.
    "desk": dict(disc_optimizer="adam", disc_lr=1e-4, lambda_adv=0.1),
    # Full-scale schedule for real fundus data.
    "paper": dict(
        preset="paper",
        working_resolution=512,
        epochs_stage1=200,
        epochs_stage2=20,
        base_width=32,
        trials_per_fold=30,
        finetune_epochs=5,
    ),
}


def preset(name: str, **overrides) -> RunConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return RunConfig(**{**PRESETS[name], **overrides})


def _flatten(d: dict, out: dict) -> dict:
    # Nested sections are only for readability; keys are unique across sections.
    for key, value in d.items():
        if isinstance(value, dict):
            _flatten(value, out)
        else:
            out[key.replace("-", "_")] = value
    return out


def load_config(path: str | Path, **overrides) -> RunConfig:
    """Load a YAML config file (optionally nested in sections) on top of its preset."""
    raw = yaml.safe_load(Path(path).read_text()) or {}
    flat = _flatten(raw, {})
    known = {f.name for f in fields(RunConfig)}
    unknown = set(flat) - known
    if unknown:
        raise KeyError(f"unknown config keys: {sorted(unknown)}")
    merged = {**flat, **{k: v for k, v in overrides.items() if v is not None}}
    return preset(merged.pop("preset", "desk"), **merged)


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
