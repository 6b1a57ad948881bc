"""Command-line front end.

Five subcommands cover the full workflow:

    sal simulate      generate a dataset file of simulated measurements
    sal train         fit a sub-sampling design (and reconstruction net)
    sal eval          score a trained design against baselines, write CSV
    sal export-design write a trained design as a portable text file
    sal render        export maps of one record as PGM / raw images

Configuration comes from small JSON files plus a few overriding flags; any
unrecognized config key is an error. All failures print a single
``error: ...`` line to stderr, exit with status 1, and remove whatever
output files this invocation had started to write.
"""

from __future__ import annotations

import argparse
import json
import shutil
import sys
from pathlib import Path

import numpy as np

from .beamform import write_map_pgm, write_map_raw
from .dataset import make_dataset, read_dataset, write_dataset
from .simulate import ArrayConfig, SceneSampler
from .subsample import read_design, write_design
from .taskmodel import load_checkpoint, save_checkpoint
from .train import (TrainConfig, baseline_random_best, evaluate_design,
                    reconstruct_maps, train, uniform_design_values,
                    write_history, write_metrics_csv)

HISTORY_NAME = "history.json"
CHECKPOINT_NAME = "model.salc"


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems through the common error path."""

    def error(self, message):
        raise CliError(message)


# ---------------------------------------------------------------------------
# config files

def _bool(v):
    if not isinstance(v, bool):
        raise ValueError(f"expected true/false, got {v!r}")
    return v


def _optional_float(v):
    return None if v is None else float(v)


SIMULATE_KEYS = {
    "n_tx": int, "n_rx": int, "n_range": int, "n_azimuth": int,
    "f_start": float, "f_stop": float, "element_pitch": _optional_float,
    "n_train": int, "n_test": int, "noise_sigma": float,
    "min_reflectors": int, "max_reflectors": int,
    "amp_min": float, "amp_max": float,
    "range_margin": float, "sin_azimuth_limit": float,
}

TRAIN_KEYS = {
    "scenario": str, "budget": int, "epochs": int, "batch_size": int,
    "learning_rate": float, "design_lr": _optional_float,
    "temperature": float, "use_model": _bool, "model_depth": int,
    "model_channels": int, "model_kernel": int,
}

GEOMETRY_KEYS = ("n_tx", "n_rx", "n_range", "n_azimuth", "f_start", "f_stop",
                 "element_pitch")
SAMPLER_KEYS = ("min_reflectors", "max_reflectors", "amp_min", "amp_max",
                "range_margin", "sin_azimuth_limit")


def load_config(path, allowed: dict) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise CliError(f"config file {path} not found")
    except json.JSONDecodeError as e:
        raise CliError(f"config file {path} is not valid JSON: {e}")
    if not isinstance(data, dict):
        raise CliError(f"config file {path} must hold a JSON object")
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise CliError(f"unknown config key(s) in {path}: "
                       f"{', '.join(unknown)}")
    out = {}
    for key, value in data.items():
        try:
            out[key] = allowed[key](value)
        except (TypeError, ValueError) as e:
            raise CliError(f"config key {key!r}: {e}")
    return out


# ---------------------------------------------------------------------------
# output tracking

class Outputs:
    """Paths created by this invocation, removed again if it fails."""

    def __init__(self):
        self.paths = []

    def claim(self, path, force: bool, kind="output") -> Path:
        path = Path(path)
        if path.exists() and not force:
            raise CliError(f"{kind} {path} already exists "
                           f"(pass --force to replace)")
        if path.parent != Path("."):
            path.parent.mkdir(parents=True, exist_ok=True)
        self.paths.append(path)
        return path

    def discard_all(self):
        for path in self.paths:
            try:
                if path.is_dir():
                    shutil.rmtree(path)
                elif path.exists():
                    path.unlink()
            except OSError:
                pass


# ---------------------------------------------------------------------------
# subcommands

def cmd_simulate(args, outputs: Outputs):
    cfg_dict = load_config(args.config, SIMULATE_KEYS) if args.config else {}
    geometry = {k: v for k, v in cfg_dict.items() if k in GEOMETRY_KEYS}
    sampler_args = {k: v for k, v in cfg_dict.items() if k in SAMPLER_KEYS}
    n_train = args.train if args.train is not None \
        else cfg_dict.get("n_train")
    n_test = args.test if args.test is not None else cfg_dict.get("n_test")
    if n_train is None or n_test is None:
        raise CliError("simulate: n_train and n_test must come from the "
                       "config or --train/--test")
    if "noise_sigma" not in cfg_dict:
        raise CliError("simulate: the config must set noise_sigma")
    cfg = ArrayConfig(**geometry)
    sampler = SceneSampler(**sampler_args)
    out = outputs.claim(args.out, args.force, kind="dataset")
    data = make_dataset(cfg, n_train, n_test, cfg_dict["noise_sigma"],
                        master_seed=args.seed, threads=args.threads,
                        sampler=sampler)
    write_dataset(out, data, force=True)
    print(f"wrote {out}: {n_train} train + {n_test} test records, "
          f"{cfg.n_tx}x{cfg.n_rx} array, {cfg.n_range} tones")


def cmd_train(args, outputs: Outputs):
    cfg_dict = load_config(args.config, TRAIN_KEYS) if args.config else {}
    if args.scenario is not None:
        cfg_dict["scenario"] = args.scenario
    if args.budget is not None:
        cfg_dict["budget"] = args.budget
    try:
        tcfg = TrainConfig(**cfg_dict)
    except ValueError as e:
        raise CliError(str(e))
    data = read_dataset(args.data)
    run_dir = outputs.claim(args.out, args.force, kind="run directory")
    if run_dir.exists():
        shutil.rmtree(run_dir)
    run_dir.mkdir(parents=True)

    def progress(epoch, loss):
        print(f"epoch {epoch + 1}/{tcfg.epochs}  loss {loss:.6f}")

    result = train(data, tcfg, master_seed=args.seed, progress=progress)
    write_history(run_dir / HISTORY_NAME, result)
    if result.model is not None:
        save_checkpoint(run_dir / CHECKPOINT_NAME, result.model)
    values = ", ".join(str(v) for v in result.history["final_design"])
    print(f"final design ({tcfg.scenario}, budget {tcfg.budget}): {values}")
    print(f"wrote {run_dir}")


def _load_run(run_dir):
    run_dir = Path(run_dir)
    history_path = run_dir / HISTORY_NAME
    if not history_path.exists():
        raise CliError(f"{history_path} not found; is {run_dir} a run "
                       f"directory?")
    history = json.loads(history_path.read_text())
    model = None
    checkpoint = run_dir / CHECKPOINT_NAME
    if checkpoint.exists():
        model = load_checkpoint(checkpoint)
    return history, model


def cmd_eval(args, outputs: Outputs):
    data = read_dataset(args.data)
    history, model = _load_run(args.run)
    scenario = history["scenario"]
    budget = int(history["budget"])
    if int(history["n_rx"]) != data.cfg.n_rx:
        raise CliError(f"run was trained with n_rx={history['n_rx']} but the "
                       f"dataset has n_rx={data.cfg.n_rx}")
    learned = np.asarray(history["final_design"])
    tcfg = TrainConfig(scenario=scenario, budget=budget, use_model=False)
    random_best, _ = baseline_random_best(
        data, tcfg, k=args.baselines, master_seed=args.seed,
        select_on_test=args.select_on_test)
    uniform = uniform_design_values(scenario, data.cfg.n_rx, budget)

    designs = [("learned", learned), ("random_best", random_best),
               ("uniform", uniform)]
    rows = []
    for name, values in designs:
        report = evaluate_design(data.test_records, scenario, values,
                                 data.cfg)
        rows.append((scenario, name, budget, args.seed, report))
    if model is not None:
        for name, values in designs:
            report = evaluate_design(data.test_records, scenario, values,
                                     data.cfg, model)
            rows.append((scenario, f"{name}+recon", budget, args.seed,
                         report))
    out = outputs.claim(args.out, args.force, kind="metrics file")
    write_metrics_csv(out, rows)
    for _, variant, _, _, report in rows:
        print(f"{variant:>18}: psnr {report.psnr_mean:6.2f} "
              f"+- {report.psnr_ci:4.2f} dB   ssim {report.ssim_mean:.4f} "
              f"+- {report.ssim_ci:.4f}")
    print(f"wrote {out}")


def cmd_export_design(args, outputs: Outputs):
    history, _ = _load_run(args.run)
    out = outputs.claim(args.out, args.force, kind="design file")
    write_design(out, history["scenario"], int(history["budget"]),
                 int(history["n_rx"]), history["final_design"])
    print(f"wrote {out}")


def _panel(values: np.ndarray) -> np.ndarray:
    peak = values.max()
    return values / peak if peak > 0 else np.zeros_like(values)


def cmd_render(args, outputs: Outputs):
    data = read_dataset(args.data)
    records = data.train_records if args.use_train_split else \
        data.test_records
    if not 0 <= args.index < len(records):
        raise CliError(f"record index {args.index} out of range "
                       f"(split holds {len(records)} records)")
    rec = records[args.index]

    maps = [("reference", rec.reference_map)]
    if args.design is not None:
        meta, values = read_design(args.design)
        if meta["n_rx"] != data.cfg.n_rx:
            raise CliError(f"design expects n_rx={meta['n_rx']}, dataset "
                           f"has {data.cfg.n_rx}")
        sub = reconstruct_maps([rec], meta["scenario"], values, data.cfg)[0]
        maps.append(("subsampled", sub))
        if args.checkpoint is not None:
            model = load_checkpoint(args.checkpoint)
            recon = reconstruct_maps([rec], meta["scenario"], values,
                                     data.cfg, model)[0]
            maps.append(("reconstructed", recon))
    elif args.checkpoint is not None:
        raise CliError("render: --checkpoint requires --design")

    prefix = Path(args.out)
    for name, values in maps:
        pgm = outputs.claim(f"{prefix}_{name}.pgm", args.force)
        raw = outputs.claim(f"{prefix}_{name}.raw", args.force)
        write_map_pgm(pgm, values)
        write_map_raw(raw, values)
    separator = np.ones((rec.reference_map.shape[0], 1))
    panels = []
    for i, (_, values) in enumerate(maps):
        if i:
            panels.append(separator)
        panels.append(_panel(values))
    panel_path = outputs.claim(f"{prefix}_panel.pgm", args.force)
    write_map_pgm(panel_path, np.hstack(panels))
    print(f"wrote {len(maps)} map(s) and panel under {prefix}_*")


# ---------------------------------------------------------------------------
# argument wiring

def build_parser() -> _Parser:
    parser = _Parser(prog="sal", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a dataset file")
    p.add_argument("--config", help="JSON file of geometry / scene keys")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="dataset file to write")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--train", type=int, help="override n_train")
    p.add_argument("--test", type=int, help="override n_test")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="fit a design to a dataset")
    p.add_argument("--data", required=True, help="dataset file")
    p.add_argument("--config", help="JSON file of training keys")
    p.add_argument("--scenario", choices=("discrete", "continuous"))
    p.add_argument("--budget", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="run directory to create")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a run against baselines")
    p.add_argument("--data", required=True, help="dataset file")
    p.add_argument("--run", required=True, help="run directory from train")
    p.add_argument("--seed", type=int, default=0,
                   help="seed for the random baseline designs")
    p.add_argument("--baselines", type=int, default=10,
                   help="random designs to draw for best-of-k")
    p.add_argument("--select-on-test", action="store_true",
                   help="pick the best random design on the test split "
                        "instead of held-out train records")
    p.add_argument("--out", required=True, help="metrics CSV to write")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-design",
                       help="write a run's final design as text")
    p.add_argument("--run", required=True, help="run directory from train")
    p.add_argument("--out", required=True, help="design file to write")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_export_design)

    p = sub.add_parser("render", help="export maps of one record as images")
    p.add_argument("--data", required=True, help="dataset file")
    p.add_argument("--index", type=int, default=0,
                   help="record index within the split")
    p.add_argument("--use-train-split", action="store_true",
                   help="take the record from the train split")
    p.add_argument("--design", help="design file (adds the sub-sampled map)")
    p.add_argument("--checkpoint",
                   help="model checkpoint (adds the reconstructed map)")
    p.add_argument("--out", required=True, help="output path prefix")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_render)
    return parser


def main(argv=None) -> int:
    outputs = Outputs()
    try:
        args = build_parser().parse_args(argv)
        args.func(args, outputs)
        return 0
    except KeyboardInterrupt:
        outputs.discard_all()
        print("error: interrupted", file=sys.stderr)
        return 1
    except SystemExit:
        raise
    except Exception as e:   # noqa: BLE001 - single reporting path by design
        outputs.discard_all()
        message = " ".join(str(e).split()) or type(e).__name__
        print(f"error: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
