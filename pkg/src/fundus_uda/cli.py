"""Command-line entry point: ``fundus-uda <subcommand> [options]``.

Settings are layered preset < ``--config`` file < per-field flags. Every
RunConfig field has a ``--field-name`` flag.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .config import PRESETS, RunConfig, load_config, preset
from .data import SOURCE_STYLE, TARGET_STYLE, gen_synthetic_domain, load_dataset, save_dataset
from .fourier import average_amplitude, expand_dataset
from .metrics import evaluate, format_table
from .network import load_checkpoint, restore_segnet
from .search import StylePolicy

RUN_DIR_ENV = "FUNDUS_UDA_RUN_DIR"
DEFAULT_GAMMAS = (0.65, 0.70, 0.75, 0.80, 0.85)

log = logging.getLogger("fundus_uda")

_OPTIONAL_TYPES = {"center_crop": float, "steps_per_epoch": int}


def _str2bool(v: str) -> bool:
    if v.lower() in ("1", "true", "yes", "on"):
        return True
    if v.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {v!r}")


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("run configuration overrides")
    for f in dataclasses.fields(RunConfig):
        if f.name in ("seed", "preset"):
            continue  # global flags
        default = f.default
        kind = _OPTIONAL_TYPES.get(f.name, type(default))
        if kind is bool:
            kind = _str2bool
        group.add_argument(f"--{f.name.replace('_', '-')}", dest=f"cfg_{f.name}", type=kind, default=None,
                           metavar=kind.__name__.upper().lstrip("_"), help=f"(default {default!r})")


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="YAML config file")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--run-dir", type=Path, default=None,
                        help=f"run directory (default ${RUN_DIR_ENV} or ./runs/default)")
    parser.add_argument("--preset", choices=sorted(PRESETS), default=None)
    parser.add_argument("--source-dir", type=Path, help="labelled source images (default: synthetic data)")
    parser.add_argument("--target-dir", type=Path, help="unlabelled target training images")
    parser.add_argument("--test-dir", type=Path, help="labelled target test images")
    parser.add_argument("-v", "--verbose", action="store_true")
    _add_config_flags(parser)


def build_config(args) -> RunConfig:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.config:
        if args.preset:
            overrides["preset"] = args.preset
        return load_config(args.config, **overrides)
    return preset(args.preset or "desk", **overrides)


def run_dir(args) -> Path:
    return args.run_dir or Path(os.environ.get(RUN_DIR_ENV, "runs/default"))


def _datasets(args, cfg):
    from .pipeline import build_datasets

    dirs = (args.source_dir, args.target_dir, args.test_dir)
    if any(dirs) and not all(dirs):
        raise ValueError("--source-dir, --target-dir and --test-dir go together")
    return build_datasets(cfg, cfg.seed, *dirs)


def _pipeline(args):
    from .pipeline import Pipeline

    cfg = build_config(args)
    return Pipeline(cfg, run_dir(args), _datasets(args, cfg), log=log.info)


# --------------------------------------------------------------------------
# subcommands

def cmd_gen_synth(args):
    cfg = build_config(args)
    style = SOURCE_STYLE if args.domain == "source" else TARGET_STYLE
    samples = gen_synthetic_domain(style, args.count, cfg.seed, cfg.working_resolution)
    save_dataset(samples, args.out, manifest=True)
    print(f"wrote {len(samples)} {args.domain} images to {args.out}")


def cmd_stylize(args):
    cfg = build_config(args)
    content = load_dataset(args.input, "test", cfg.working_resolution)
    domain = "target" if args.direction == "t2s" else "source"
    content = [s.with_(domain=domain) for s in content]
    style = load_dataset(args.amplitude, "test", cfg.working_resolution)
    if args.policy:
        betas = StylePolicy.load(args.policy).betas
    elif args.beta:
        betas = args.beta
    else:
        raise ValueError("give --beta (repeatable) or --policy")
    k = args.k_groups or (cfg.k_amplitude_groups if args.direction == "s2t" else cfg.k_amplitude_groups_stage2)
    groups = average_amplitude(style, k, cfg.seed)
    out = expand_dataset(content, betas, groups, cfg.swap_dc)
    out_dir = Path(args.out)
    # ids contain '@'; keep file names portable
    renamed = [s.with_(id=s.id.replace("@", "_")) for s in out]
    save_dataset(renamed, out_dir)
    sidecar = {
        "betas": list(betas), "k_groups": k, "swap_dc": cfg.swap_dc, "direction": args.direction,
        "groups": [{"index": g.group_index, "members": list(g.member_ids)} for g in groups],
        "images": [{"file": f"{r.id}.png", **s.meta} for r, s in zip(renamed, out)],
    }
    (out_dir / "stylize.json").write_text(json.dumps(sidecar, indent=1))
    print(f"wrote {len(out)} stylized images to {out_dir}")


def cmd_search_beta(args):
    pipe = _pipeline(args)
    if args.direction == "s2t":
        pipe.run(["warmup", "search_s2t"], force=["search_s2t"])
        path = pipe.paths["search_s2t"]
    else:
        pipe.run(["search_t2s"], force=["search_t2s"])
        path = pipe.paths["search_t2s"]
    print(path.read_text(), end="")


def cmd_train_stage1(args):
    pipe = _pipeline(args)
    pipe.run(["stylize_s2t", "stage1"], force=["stage1"])
    print(f"stage-1 checkpoint: {pipe.paths['stage1']}")


def cmd_pseudo_label(args):
    from .data import label_to_mask
    from PIL import Image

    pipe = _pipeline(args)
    pipe.run(["stylize_t2s", "pseudo_label"], force=["pseudo_label"])
    z = np.load(pipe.paths["pseudo_label"])
    print(f"pseudo labels at gamma={float(z['gamma'])}: {len(z['target_ids'])} target, "
          f"{len(z['synth_ids'])} source-styled -> {pipe.paths['pseudo_label']}")
    if args.export:
        out = Path(args.export)
        out.mkdir(parents=True, exist_ok=True)
        for sid, m in zip(z["target_ids"], z["target"]):
            # disc channel 1, cup channel 0; cup pixels outside the disc are kept as disc
            label = np.maximum(m[1], 2 * m[0]).astype(np.uint8)
            Image.fromarray(label_to_mask(label)).save(out / f"{sid}.png")


def cmd_train_stage2(args):
    pipe = _pipeline(args)
    pipe.run(["stage2"], force=["stage2"])
    print(f"stage-2 checkpoint: {pipe.paths['stage2']}")


def cmd_evaluate(args):
    cfg = build_config(args)
    ckpt = args.checkpoint or run_dir(args) / "stage2.pt"
    model = restore_segnet(load_checkpoint(ckpt)).eval()
    test = _datasets(args, cfg).test
    result = evaluate(model, test, cfg.eval_threshold, cfg.asd_connectivity)
    print(format_table({Path(ckpt).stem: result}))
    out = args.json or Path(ckpt).with_suffix(".eval.json")
    Path(out).write_text(json.dumps(result.to_dict(per_image=True), indent=1))
    print(f"records: {out}")


def cmd_run_pipeline(args):
    pipe = _pipeline(args)
    manifest = pipe.run(resume=not args.no_resume)
    print((pipe.run_dir / "eval_table.txt").read_text(), end="")
    print(f"manifest: {pipe.manifest_path} (executed: {', '.join(manifest['executed_steps']) or 'nothing'})")


def cmd_gamma_sweep(args):
    from .pipeline import gamma_sweep, load_samples, plot_gamma_sweep

    pipe = _pipeline(args)
    gammas = args.gammas if args.gammas is not None else list(DEFAULT_GAMMAS)
    theta1 = pipe.load_model("stage1")
    synth = load_samples(pipe._need("stylize_t2s"))
    rows = gamma_sweep(pipe.cfg, gammas, theta1, pipe.data, synth)
    (pipe.run_dir / "gamma_sweep.json").write_text(json.dumps(rows, indent=1))
    lines = [f"{'gamma':>6} {'Dice cup':>9} {'Dice disc':>9} {'Dice avg':>9} {'ASD avg':>8}"]
    lines += [f"{r['gamma']:6.2f} {r['dice_cup']:9.2f} {r['dice_disc']:9.2f} {r['dice_avg']:9.2f} {r['asd_avg']:8.2f}"
              for r in rows]
    (pipe.run_dir / "gamma_sweep.txt").write_text("\n".join(lines) + "\n")
    plot_gamma_sweep(rows, pipe.run_dir / "gamma_sweep.png")
    print("\n".join(lines))


def cmd_ablate(args):
    from .pipeline import ABLATION_ROWS, ablation_table, run_ablation, summarize_ablation

    cfg = build_config(args)
    out = run_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    per_seed, t0 = [], time.time()
    for seed in args.seeds:
        scfg = cfg.replace(seed=seed)
        res = run_ablation(scfg, seed, _datasets(args, scfg), log=log.info)["results"]
        per_seed.append(res)
    summary = summarize_ablation(per_seed)
    record = {"seeds": args.seeds, "mean": summary, "wall_time": time.time() - t0,
              "per_seed": [{row: r[row].to_dict() for row in ABLATION_ROWS} for r in per_seed]}
    (out / "ablation.json").write_text(json.dumps(record, indent=1))
    table = ablation_table(summary)
    (out / "ablation.txt").write_text(table + "\n")
    print(table)


# --------------------------------------------------------------------------

def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fundus-uda", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        _common(p)
        p.set_defaults(func=fn)
        return p

    p = add("gen-synth", cmd_gen_synth, "render a synthetic fundus-like domain to a directory")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--domain", choices=("source", "target"), default="source")
    p.add_argument("--count", type=int, default=10)

    p = add("stylize", cmd_stylize, "Fourier-stylize a directory with another directory's amplitude")
    p.add_argument("--input", type=Path, required=True, help="content images (masks carried over)")
    p.add_argument("--amplitude", type=Path, required=True, help="images whose mean amplitude is used")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--beta", type=float, action="append", help="band parameter; repeat for several")
    p.add_argument("--policy", type=Path, help="policy file written by search-beta")
    p.add_argument("--k-groups", type=int, default=None)
    p.add_argument("--direction", choices=("s2t", "t2s"), default="s2t")

    p = add("search-beta", cmd_search_beta, "TPE search of the band parameter")
    p.add_argument("--direction", choices=("s2t", "t2s"), default="s2t")
    add("train-stage1", cmd_train_stage1, "stylize sources and run adversarial stage-1 training")
    p = add("pseudo-label", cmd_pseudo_label, "threshold stage-1 predictions into pseudo labels")
    p.add_argument("--export", type=Path, help="also write target pseudo labels as PNG masks")
    add("train-stage2", cmd_train_stage2, "cross-style self-training from the stage-1 model")
    p = add("evaluate", cmd_evaluate, "Dice / ASD of a checkpoint on the labelled test set")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--json", type=Path)
    p = add("run-pipeline", cmd_run_pipeline, "every step end to end, resuming from the run directory")
    p.add_argument("--no-resume", action="store_true")
    p = add("gamma-sweep", cmd_gamma_sweep, "re-run stage 2 for several pseudo-label thresholds")
    p.add_argument("--gammas", type=float, nargs="*", default=None)
    p = add("ablate", cmd_ablate, "ablation ladder averaged over seeds")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except (FileNotFoundError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
