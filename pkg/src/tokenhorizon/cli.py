"""Command-line entry point: ``tokenhorizon {train,profile,sweep,flops}``."""

from __future__ import annotations

import argparse
import configparser
import json
import os
import sys
from dataclasses import fields
from functools import partial
from importlib import metadata

import numpy as np

from . import efficiency
from .engine.checkpoint_io import CheckpointError, load_checkpoint, save_checkpoint
from .engine.config import ConfigError
from .engine.forward import NumericError
from .engine.train import TrainingError
from .harness import experiments as ex
from .harness.plots import result_svgs
from .harness.recipes import MODEL_PRESETS, TrainRecipe, accuracy, held_out, preset_arch, train_model
from .harness.tasks import KINDS, TaskDataset
from .information import (
    aggregate_stats,
    detect_horizon,
    information_profile,
    profiles_to_csv,
    stats_to_csv,
)
from .pruning.schedule import EMPTY, preset_names, resolve_schedule

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_ASSERT, EXIT_NOT_FOUND = 0, 2, 3, 4, 5
OUT_ENV = "TOKENHORIZON_OUT"


class UsageError(ConfigError):
    pass


class AssertionFailure(Exception):
    pass


def tool_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


# -- output plumbing -------------------------------------------------------------

class Outputs:
    """Writes a manifest first, then outputs that each reference it."""

    def __init__(self, out_dir: str, stem: str, force: bool):
        self.out_dir, self.stem, self.force = out_dir, stem, force
        self.manifest_name = f"{stem}.manifest.json"

    def _path(self, name):
        return os.path.join(self.out_dir, name)

    def check(self, names):
        if self.force:
            return
        existing = [n for n in [self.manifest_name, *names] if os.path.exists(self._path(n))]
        if existing:
            raise ConfigError(f"{', '.join(existing)} already exist in {self.out_dir}; "
                              "pass --force to overwrite")

    def write_manifest(self, manifest: dict):
        os.makedirs(self.out_dir, exist_ok=True)
        with open(self._path(self.manifest_name), "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_csv(self, name, body: str):
        with open(self._path(name), "w", newline="") as fh:
            fh.write(f"# manifest: {self.manifest_name}\n")
            fh.write(body)
        return self._path(name)

    def write_text(self, name, body: str):
        with open(self._path(name), "w", newline="") as fh:
            fh.write(body)
        return self._path(name)


def make_manifest(command, args, config_path=None, seeds=(), checkpoint=None, out_dir=None,
                  **extra) -> dict:
    manifest = {
        "command": command,
        "config": config_path,
        "seeds": list(seeds),
        "checkpoint": checkpoint,
        "output_dir": out_dir,
        "tool_version": tool_version(),
    }
    manifest.update(extra)
    return manifest


def _out_dir(args) -> str:
    return args.out_dir or os.environ.get(OUT_ENV) or "results"


def _read_ini(path, section) -> dict:
    if path is None:
        return {}
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    parser = configparser.ConfigParser()
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    if not parser.has_section(section):
        raise ConfigError(f"config {path} has no [{section}] section")
    return dict(parser[section])


def _floats(text) -> list[float]:
    return [float(t) for t in str(text).replace(",", " ").split()]


def _ints(text) -> list[int]:
    return [int(t) for t in str(text).replace(",", " ").split()]


def _words(text) -> list[str]:
    return str(text).replace(",", " ").split()


def _load_ckpt(path):
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    return load_checkpoint(path)


# -- train -----------------------------------------------------------------------

RECIPE_TYPES = {f.name: f.type for f in fields(TrainRecipe)}


def recipe_from(args) -> TrainRecipe:
    values = {}
    for key, raw in _read_ini(args.config, "train").items():
        if key not in RECIPE_TYPES:
            raise ConfigError(f"unknown [train] key {key!r}")
        values[key] = raw
    for key in ("preset", "steps", "lr", "batch", "n_train", "optimizer", "precision"):
        if getattr(args, key, None) is not None:
            values[key] = getattr(args, key)
    if args.task is not None:
        values["tasks"] = KINDS if args.task == "both" else (args.task,)
    typed = {}
    for key, raw in values.items():
        kind = RECIPE_TYPES[key]
        if key == "tasks":
            typed[key] = tuple(_words(raw)) if isinstance(raw, str) else tuple(raw)
        elif "int" in str(kind):
            typed[key] = int(raw)
        elif "float" in str(kind):
            typed[key] = float(raw)
        else:
            typed[key] = str(raw)
    if typed.get("steps", 1) == 0:
        raise ConfigError("no training requested")
    return TrainRecipe(**typed)


def cmd_train(args) -> int:
    recipe = recipe_from(args)
    out_path = args.output
    out_dir = os.path.dirname(os.path.abspath(out_path))
    outputs = Outputs(out_dir, os.path.basename(out_path), args.force)
    outputs.check([os.path.basename(out_path)])
    outputs.write_manifest(make_manifest(
        "train", args, args.config, [args.seed], None, out_dir,
        recipe={f.name: getattr(recipe, f.name) for f in fields(TrainRecipe)}))
    ckpt, losses = train_model(recipe, args.seed, log_every=args.log_every)
    save_checkpoint(ckpt, out_path)
    print(f"trained {recipe.preset} for {recipe.steps} steps; final loss "
          f"{np.mean(losses[-50:]):.4f}; checkpoint {ckpt.fingerprint()} -> {out_path}")
    width = ckpt.arch.width
    for task in recipe.tasks:
        acc = accuracy(ckpt, held_out(task, args.eval_samples, width, recipe.grid_side,
                                      recipe.n_colors))
        print(f"held-out {task} accuracy: {acc:.4f}")
    return EXIT_OK


# -- profile ---------------------------------------------------------------------

def _dataset(args, task, width) -> TaskDataset:
    if getattr(args, "dataset", None):
        if not os.path.exists(args.dataset):
            raise FileNotFoundError(args.dataset)
        ds = TaskDataset.load(args.dataset)
        if ds.width != width:
            ds = TaskDataset(ds.kinds, ds.grids, ds.rows, ds.cols, ds.labels, ds.grid_side,
                             ds.n_colors, width, ds.encoder_seed, ds.seed)
        return ds.subset(range(min(len(ds), args.samples)))
    return held_out(task, args.samples, width, seed=args.seed)


def _profile_one(i, ckpt, dataset):
    return information_profile(ckpt, dataset[i])


def cmd_profile(args) -> int:
    ckpt = _load_ckpt(args.checkpoint)
    ds = _dataset(args, args.task, ckpt.arch.width)
    stem = f"profile-{args.task}"
    outputs = Outputs(_out_dir(args), stem, args.force)
    names = [f"{stem}.csv", f"{stem}-stats.csv"]
    outputs.check(names)
    outputs.write_manifest(make_manifest(
        "profile", args, None, [args.seed], ckpt.fingerprint(), outputs.out_dir,
        task=args.task, samples=len(ds), dataset=ds.fingerprint(), tau=args.tau,
        persistence=args.persistence))
    profiles = ex.map_samples(partial(_profile_one, ckpt=ckpt, dataset=ds), range(len(ds)),
                              args.threads)
    stats = aggregate_stats(profiles)
    p_text = np.mean([p.text_baseline for p in profiles], axis=0)
    outputs.write_csv(names[0], profiles_to_csv(profiles))
    outputs.write_csv(names[1], stats_to_csv(stats, p_text))
    horizon = detect_horizon(stats, args.tau, args.persistence)
    shown = "none" if horizon is None else horizon
    print(f"information horizon: {shown} (tau={args.tau:g}, persistence={args.persistence}, "
          f"{len(ds)} samples)")
    return EXIT_OK


# -- sweep -----------------------------------------------------------------------

SWEEP_DEFAULTS = {
    "samples": "200",
    "ratios": "0.25 0.5 0.75",
    "retain_ratios": "0.25 0.5 0.75",
    "layers": "",
    "strategies": "Random AttentionTopK MaxMinDiversity LowDuplication Withdraw",
    "schedules": "toy-maxmin toy-maxmin-vtw toy-maxmin-random",
    "tasks": "lookup majority",
    "task": "lookup",
    "n_profile": "200",
    "tau": "0.001",
}


def cmd_sweep(args) -> int:
    exp = ex.ALIASES.get(args.experiment, args.experiment)
    if exp not in ex.EXPERIMENTS:
        known = ", ".join(f"{k} ({v})" for k, v in ex.ALIASES.items())
        raise UsageError(f"unknown experiment {args.experiment!r}; choose from {known}")
    cfg = dict(SWEEP_DEFAULTS)
    for key, raw in _read_ini(args.config, "sweep").items():
        if key not in cfg:
            raise ConfigError(f"unknown [sweep] key {key!r}")
        cfg[key] = raw
    if args.samples is not None:
        cfg["samples"] = str(args.samples)
    if not args.checkpoint:
        raise ConfigError("sweep needs --checkpoint")
    ckpts = [_load_ckpt(p) for p in args.checkpoint]
    ckpt = ckpts[0]
    n = int(cfg["samples"])
    tau = float(cfg["tau"])
    layers = _ints(cfg["layers"]) if cfg["layers"].strip() else list(range(ckpt.arch.n_layers + 1))

    stem = f"sweep-{exp}"
    outputs = Outputs(_out_dir(args), stem, args.force)
    outputs.check([f"{stem}.csv"])
    outputs.write_manifest(make_manifest(
        "sweep", args, args.config, [args.seed], " ".join(c.fingerprint() for c in ckpts),
        outputs.out_dir, experiment=exp, settings=cfg))

    def data(task, width):
        return held_out(task, n, width, seed=args.seed)

    if exp == "info-prune":
        result = ex.run_info_prune_curve(ckpt, data(cfg["task"], ckpt.arch.width),
                                         _floats(cfg["ratios"]), layers, args.seed, args.threads)
    elif exp == "strategy":
        result = ex.run_strategy_eval(ckpt, data(cfg["task"], ckpt.arch.width),
                                      _words(cfg["strategies"]), _floats(cfg["retain_ratios"]),
                                      layers, args.seed, tau=tau, workers=args.threads)
    elif exp == "withdraw":
        result = ex.run_withdraw_sweep(
            ckpt, {t: data(t, ckpt.arch.width) for t in _words(cfg["tasks"])},
            int(cfg["n_profile"]), tau, args.seed, args.threads)
    elif exp == "schedule":
        schedules = [resolve_schedule(s) for s in _words(cfg["schedules"])]
        result = ex.run_schedule_bench(ckpt, data(cfg["task"], ckpt.arch.width), schedules,
                                       args.seed, args.threads)
    else:
        if len(ckpts) < 2:
            raise ConfigError("the capacity experiment needs two --checkpoint files, smaller first")
        named = {f"{os.path.basename(p)}": c for p, c in zip(args.checkpoint, ckpts)}
        result = ex.run_capacity_comparison(
            named, {k: {t: data(t, c.arch.width) for t in _words(cfg["tasks"])}
                    for k, c in named.items()},
            int(cfg["n_profile"]), tau, args.seed, args.threads)

    path = outputs.write_csv(f"{stem}.csv", result.to_csv())
    for name, svg in result_svgs(result).items():
        outputs.write_text(f"{name}.svg", svg)
    for key in sorted(result.summary):
        print(f"{key}: {ex._fmt(result.summary[key])}")
    print(f"wrote {path}")

    if exp == "withdraw" and "lookup.empirical_horizon" in result.summary:
        emp = result.summary["lookup.empirical_horizon"]
        det = result.summary["lookup.detected_horizon"]
        if det is None or det < emp - 2:
            print(f"horizon consistency FAILED: detected {det} vs empirical {emp}")
            raise AssertionFailure("detected horizon disagrees with the withdraw curve")
        print(f"horizon consistency ok: detected {det} vs empirical {emp}")
    return EXIT_OK


# -- flops -----------------------------------------------------------------------

def _flops_arch(args):
    if args.arch in efficiency.ARCH_PRESETS:
        return (efficiency.ARCH_PRESETS[args.arch],
                efficiency.PRESET_VISUAL_TOKENS[args.arch], efficiency.LLAVA_N_TEXT)
    if args.arch in MODEL_PRESETS:
        return preset_arch(args.arch), 16, 5
    if os.path.exists(args.arch):
        return load_checkpoint(args.arch).arch, 16, 5
    known = sorted(efficiency.ARCH_PRESETS) + sorted(MODEL_PRESETS)
    raise ConfigError(f"unknown arch {args.arch!r}; use one of {known} or a checkpoint path")


def cmd_flops(args) -> int:
    arch, n_visual, n_text = _flops_arch(args)
    n_visual = args.n_visual if args.n_visual is not None else n_visual
    n_text = args.n_text if args.n_text is not None else n_text
    schedule = resolve_schedule(args.schedule)
    stem = f"flops-{os.path.basename(args.arch)}-{schedule.name}"
    outputs = Outputs(_out_dir(args), stem, args.force)
    outputs.check([f"{stem}.csv"])
    outputs.write_manifest(make_manifest(
        "flops", args, None, [], None, outputs.out_dir, arch=args.arch,
        schedule=schedule.name, n_text=n_text, n_visual=n_visual, bytes=args.bytes))
    base = efficiency.flops_estimate(arch, EMPTY, n_text, n_visual, args.bytes)
    rep = efficiency.flops_estimate(arch, schedule, n_text, n_visual, args.bytes)
    rows = [("none", base)] if schedule.actions else []
    rows.append((schedule.name, rep))
    body = efficiency.reports_to_csv(rows)
    path = outputs.write_csv(f"{stem}.csv", body)
    print(body, end="")
    reduction = 100.0 * efficiency.relative_reduction(rep, base)
    print(f"relative FLOPs reduction vs unpruned: {reduction:.2f}%")
    print(f"wrote {path}")
    if args.expect_reduction is not None:
        if abs(reduction - args.expect_reduction) > args.band:
            print(f"reduction check FAILED: {reduction:.2f}% not within "
                  f"{args.expect_reduction:g} +/- {args.band:g}")
            raise AssertionFailure("FLOPs reduction outside the expected band")
        print(f"reduction check ok: within {args.expect_reduction:g} +/- {args.band:g}")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tokenhorizon",
        description="Visual-token information, horizon detection and pruning schedules "
                    "on a desk-scale multimodal transformer.")
    parser.add_argument("--version", action="version", version=tool_version())
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, threads=True):
        p.add_argument("--out-dir", help=f"output directory (default ${OUT_ENV} or ./results)")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")
        p.add_argument("--seed", type=int, default=0)
        if threads:
            p.add_argument("--threads", type=int, default=1,
                           help="worker processes; results do not depend on it")

    p = sub.add_parser("train", help="train a toy model")
    p.add_argument("--task", choices=[*KINDS, "both"], default=None)
    p.add_argument("--preset", choices=sorted(MODEL_PRESETS), default=None)
    p.add_argument("--config", help="INI file with a [train] section")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--n-train", dest="n_train", type=int)
    p.add_argument("--optimizer", choices=["adam", "sgd"])
    p.add_argument("--precision", choices=["single", "double"])
    p.add_argument("--eval-samples", type=int, default=1000)
    p.add_argument("--log-every", type=int, default=0)
    p.add_argument("-o", "--output", default="model.ckpt", help="checkpoint path")
    p.add_argument("--force", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train, out_dir=None)

    p = sub.add_parser("profile", help="information profiles and horizon")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", choices=KINDS, default="lookup")
    p.add_argument("--dataset", help="dataset file (default: generated held-out split)")
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--tau", type=float, default=1e-3)
    p.add_argument("--persistence", type=int, default=2)
    common(p)
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("sweep", help="run an experiment: " + ", ".join(ex.EXPERIMENTS))
    p.add_argument("experiment", help="experiment id: " + ", ".join(
        f"{k}/{v}" for k, v in ex.ALIASES.items()))
    p.add_argument("--checkpoint", action="append", default=[],
                   help="checkpoint path (twice for capacity, smaller model first)")
    p.add_argument("--config", help="INI file with a [sweep] section")
    p.add_argument("--samples", type=int)
    common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("flops", help="analytic FLOPs and KV-cache report")
    p.add_argument("--arch", default="llava-7b",
                   help="llava-7b, qwen25vl-7b, a toy preset, or a checkpoint path")
    p.add_argument("--schedule", default="none",
                   help="preset name or schedule file; presets: " + ", ".join(preset_names()))
    p.add_argument("--n-text", type=int)
    p.add_argument("--n-visual", type=int)
    p.add_argument("--bytes", type=int, default=2, help="bytes per cached element")
    p.add_argument("--expect-reduction", type=float, help="expected reduction in percent")
    p.add_argument("--band", type=float, default=10.0, help="tolerance in percentage points")
    common(p, threads=False)
    p.set_defaults(func=cmd_flops)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: file not found: {exc.filename or exc}", file=sys.stderr)
        return EXIT_NOT_FOUND
    except (ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, TrainingError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except AssertionFailure as exc:
        print(f"assertion failed: {exc}", file=sys.stderr)
        return EXIT_ASSERT


if __name__ == "__main__":
    sys.exit(main())
