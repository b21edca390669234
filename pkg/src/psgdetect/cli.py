"""Command-line orchestration of the four experiments.

    psgdetect generate --out data/desk
    psgdetect train --experiment fm --dataset data/desk
    psgdetect train --experiment se --dataset data/desk
    psgdetect train --experiment pt --dataset data/desk
    psgdetect train --experiment ft --dataset data/desk
    psgdetect evaluate --dataset data/desk
    psgdetect selftest

Exit codes: 0 ok, 1 failure, 2 usage.  Run directories land under
``--run-root`` (or $PSGDETECT_RUN_ROOT, default ./runs); each is
self-describing via run.json and re-runnable to bit-identical logs.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import __version__, dsp, evalstats, synthdata, training
from . import events as ev
from . import model as mo
from .loss import LossConfig
from .nncore import OptimizerConfig
from .selftest import SUITES, run_selftest
from .synthdata import CANONICAL_CHANNELS, GeneratorConfig, PartitionSpec

RUN_ROOT_ENV = "PSGDETECT_RUN_ROOT"
CHECKPOINT_FILE = "model.ckpt"
THRESHOLD_FILE = "threshold.json"
RUN_FILE = "run.json"
METRICS_FILE = "metrics.csv"


class CliError(Exception):
    """Operational failure: reported, exit code 1."""


@dataclass(frozen=True)
class ExperimentSpec:
    name: str
    channels: tuple
    init: str                # "fresh" | "from_checkpoint"
    trainable_policy: str    # "all" | "input_layers_only"
    train_split: str
    eval_split: str
    test_split: str


EXPERIMENTS = {
    "fm": ExperimentSpec("FM", CANONICAL_CHANNELS, "fresh", "all",
                         "train1", "eval1", "test2"),
    "se": ExperimentSpec("SE", ("EEG-C3",), "fresh", "all",
                         "train2", "eval2", "test2"),
    "pt": ExperimentSpec("PT", ("EEG-C3",), "from_checkpoint",
                         "input_layers_only", "train2", "eval2", "test2"),
    "ft": ExperimentSpec("FT", ("EEG-C3",), "from_checkpoint", "all",
                         "train2", "eval2", "test2"),
}

DEFAULT_CONFIG = {
    "generator": {
        "n_records": 60,
        "record_duration_s": 600.0,
        "channel_sample_rate_hz": 256.0,
        "events_per_record": 20.0,
        "event_duration_range_s": [3.0, 15.0],
        "event_snr": 1.0,
        "background_spectrum_exponent": 1.0,
        "rng_seed": 0,
    },
    "partition": {
        "train1": 16, "eval1": 4, "test1": 40,
        "train2": 16, "eval2": 4, "test2": 20,
        "rng_seed": 0,
    },
    "model": {
        "base_maps": 2,
        "kernel_size": 3,
        "stride": 2,
        "n_blocks": 6,
        "n_classes": 1,
        "windows_per_anchor": 1,
        "anchor_pool": 15,
        "rng_seed": 0,
    },
    "train": {
        "batch_size": 8,
        "max_steps": 600,
        "eval_every": 50,
        "patience": 6,
        "segment_duration_s": 60.0,
        "threshold_grid": [round(0.05 * i, 2) for i in range(1, 20)],
        "rng_seed": 0,
        "val_segments": 32,
    },
    "optimizer": {
        "learning_rate": 1e-3,
        "beta1": 0.9,
        "beta2": 0.999,
        "epsilon": 1e-8,
    },
    "loss": {"alpha": 0.25, "gamma": 2.0},
    "evaluation": {"iou_threshold": 0.5},
}


def _merge(base: dict, override: dict, path="") -> dict:
    out = dict(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise CliError(f"unknown config field {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise CliError(f"config field {where!r} must be a table")
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = value
    return out


def load_config(path) -> dict:
    if path is None:
        return json.loads(json.dumps(DEFAULT_CONFIG))
    try:
        with open(path) as fh:
            user = json.load(fh)
    except FileNotFoundError:
        raise CliError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise CliError(f"config file {path} is not valid JSON: {e}")
    return _merge(DEFAULT_CONFIG, user)


def _run_root(args) -> Path:
    if getattr(args, "run_root", None):
        return Path(args.run_root)
    return Path(os.environ.get(RUN_ROOT_ENV, "runs"))


def _prepare_dir(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise CliError(
                f"output directory {path} is not empty (pass --force to reuse)"
            )
    path.mkdir(parents=True, exist_ok=True)


def _json_dump(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- generate ----------------------------------------------------------------

def cmd_generate(args) -> int:
    cfg = load_config(args.config)
    gen = GeneratorConfig(**{
        **cfg["generator"],
        "event_duration_range_s": tuple(cfg["generator"]["event_duration_range_s"]),
    })
    part = PartitionSpec(**cfg["partition"])
    out = Path(args.out)
    _prepare_dir(out, args.force)
    manifest = synthdata.generate_dataset(gen, part, out)
    counts = {k: len(v) for k, v in manifest["partitions"].items()}
    print(f"wrote {sum(counts[k] for k in ('train1', 'eval1', 'test1'))} "
          f"records to {out}")
    print("partitions:", json.dumps(counts, sort_keys=True))
    return 0


# -- train -------------------------------------------------------------------

def _load_split(dataset_dir: Path, manifest: dict, split: str, channels):
    ids = manifest["partitions"].get(split)
    if ids is None:
        raise CliError(f"dataset has no partition {split!r}")
    records = []
    for rid in ids:
        path = synthdata.record_path(dataset_dir, manifest, rid)
        rec = synthdata.load_record(path, channels=list(channels))
        records.append(dsp.preprocess_record(rec))
    return records


def _model_config(cfg: dict, n_channels: int) -> tuple[mo.ModelConfig, int]:
    params = dict(cfg["model"])
    seed = params.pop("rng_seed")
    segment_samples = round(
        cfg["train"]["segment_duration_s"] * dsp.TARGET_RATE_HZ
    )
    return (
        mo.ModelConfig(
            in_channels=n_channels, segment_samples=segment_samples, **params
        ),
        seed,
    )


def _fm_checkpoint_path(args) -> Path:
    if args.fm_run:
        return Path(args.fm_run) / CHECKPOINT_FILE
    return _run_root(args) / "fm" / CHECKPOINT_FILE


def cmd_train(args) -> int:
    spec = EXPERIMENTS[args.experiment]
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["model"]["rng_seed"] = args.seed
        cfg["train"]["rng_seed"] = args.seed
    if args.max_steps is not None:
        cfg["train"]["max_steps"] = args.max_steps

    dataset_dir = Path(args.dataset)
    manifest = synthdata.load_manifest(dataset_dir)
    run_dir = Path(args.run_dir) if args.run_dir \
        else _run_root(args) / args.experiment
    _prepare_dir(run_dir, args.force)

    train_records = _load_split(
        dataset_dir, manifest, spec.train_split, spec.channels
    )
    eval_records = _load_split(
        dataset_dir, manifest, spec.eval_split, spec.channels
    )

    model_cfg, model_seed = _model_config(cfg, len(spec.channels))
    source_id = None
    if spec.init == "from_checkpoint":
        fm_path = _fm_checkpoint_path(args)
        if not fm_path.exists():
            raise CliError(
                f"{spec.name} needs a trained FM checkpoint at {fm_path}; "
                f"run `psgdetect train --experiment fm` first "
                f"(or point --fm-run at an existing FM run directory)"
            )
        source = mo.load_model(fm_path)
        source_id = mo.checkpoint_id(fm_path)
        source.provenance = {
            **(source.provenance or {}), "checkpoint_id": source_id,
        }
        model = mo.replace_input_layers(
            source, len(spec.channels), rng_seed=model_seed
        )
        if model.config.segment_samples != model_cfg.segment_samples:
            raise CliError(
                f"FM checkpoint was trained on segments of "
                f"{model.config.segment_samples} samples, config asks for "
                f"{model_cfg.segment_samples}"
            )
    else:
        model = mo.build(model_cfg, rng_seed=model_seed)
    model.set_trainable(spec.trainable_policy)

    train_cfg = training.TrainConfig(
        **{k: tuple(v) if k == "threshold_grid" else v
           for k, v in cfg["train"].items()}
    )
    loss_cfg = LossConfig(**cfg["loss"])
    opt_cfg = OptimizerConfig(**cfg["optimizer"])

    print(f"[{spec.name}] training on {len(train_records)} records "
          f"({len(spec.channels)} channel(s), policy {spec.trainable_policy})")
    result = training.train(
        model, train_records, eval_records, train_cfg, loss_cfg, opt_cfg
    )
    print(f"[{spec.name}] best validation loss {result.best_val_loss:.5f} "
          f"at step {result.best_step} ({result.steps_run} steps run)")

    sweep = training.threshold_sweep(
        model, eval_records, train_cfg.threshold_grid,
        train_cfg.segment_duration_s,
        match_iou=cfg["evaluation"]["iou_threshold"],
    )
    tau = min((t for t in sweep if sweep[t] == max(sweep.values())))
    print(f"[{spec.name}] selected threshold {tau} "
          f"(mean eval F1 {sweep[tau]:.3f})")

    training.write_metrics_csv(run_dir / METRICS_FILE, result.metrics)
    mo.save_model(
        model, run_dir / CHECKPOINT_FILE,
        extra={
            "experiment": spec.name,
            "tau": tau,
            "best_val_loss": result.best_val_loss,
            "best_step": result.best_step,
        },
    )
    _json_dump(run_dir / THRESHOLD_FILE, {
        "tau": tau,
        "sweep": {repr(t): sweep[t] for t in sorted(sweep)},
        "eval_split": spec.eval_split,
    })
    _json_dump(run_dir / RUN_FILE, {
        "experiment": asdict(spec),
        "config": cfg,
        "dataset": str(dataset_dir),
        "partition_seed": manifest["partition_seed"],
        "generator_config": manifest["generator_config"],
        "source_checkpoint": source_id,
        "package_version": __version__,
        "result": {
            "best_val_loss": result.best_val_loss,
            "best_step": result.best_step,
            "steps_run": result.steps_run,
            "tau": tau,
        },
    })
    return 0


# -- evaluate ----------------------------------------------------------------

def _run_dir_for(args, key: str) -> Path:
    override = dict(args.run or [])
    if key in override:
        return Path(override[key])
    return _run_root(args) / key


def cmd_evaluate(args) -> int:
    dataset_dir = Path(args.dataset)
    manifest = synthdata.load_manifest(dataset_dir)
    iou = load_config(args.config)["evaluation"]["iou_threshold"]

    run_dirs = {}
    missing = []
    for key in EXPERIMENTS:
        d = _run_dir_for(args, key)
        if (d / CHECKPOINT_FILE).exists() and (d / RUN_FILE).exists():
            run_dirs[key] = d
        else:
            missing.append(key)
    if missing:
        raise CliError(
            "missing completed runs for: " + ", ".join(missing)
            + "; train them first (psgdetect train --experiment <name>)"
        )

    out_dir = Path(args.out) if args.out else _run_root(args) / "report"
    _prepare_dir(out_dir, args.force)

    records_by_channels = {}
    per_experiment_metrics = {}
    per_experiment_summary = {}
    for key, run_dir in run_dirs.items():
        spec = EXPERIMENTS[key]
        with open(run_dir / RUN_FILE) as fh:
            run_info = json.load(fh)
        seg_dur = run_info["config"]["train"]["segment_duration_s"]
        tau = run_info["result"]["tau"]
        if spec.channels not in records_by_channels:
            records_by_channels[spec.channels] = _load_split(
                dataset_dir, manifest, spec.test_split, spec.channels
            )
        records = records_by_channels[spec.channels]
        model = mo.load_model(run_dir / CHECKPOINT_FILE)

        metrics = []
        detected_lines = []
        for rec in records:
            detected = training.detect_record(model, rec, tau, seg_dur)
            metrics.append(
                evalstats.record_metrics(
                    detected, rec.events, iou, record_id=rec.record_id
                )
            )
            detected_lines.extend((rec.record_id, e) for e in detected)
        ev.write_events(out_dir / f"events_{spec.name}.txt", detected_lines)
        per_experiment_metrics[spec.name] = metrics
        agg = evalstats.aggregate(metrics)
        per_experiment_summary[spec.name] = {"tau": tau, **agg}
        print(f"[{spec.name}] tau {tau}  "
              f"F1 {agg['f1']['mean']:.3f} +/- {agg['f1']['std']:.3f}  "
              f"over {agg['n_records']} records")

    comparison = evalstats.compare_experiments(
        {name: per_experiment_metrics[name] for name in ("SE", "FT", "PT")}
    )

    agg_only = {
        name: {k: v for k, v in summ.items() if k != "tau"}
        for name, summ in per_experiment_summary.items()
    }
    table = evalstats.format_results_table(agg_only)
    lines = [table, ""]
    for field, cmp_res in comparison.items():
        lines.append(
            f"{field}: Kruskal-Wallis H={cmp_res.h:.4f} p={cmp_res.p:.4g}"
        )
        for (a, b), pr in cmp_res.pairwise.items():
            lines.append(
                f"  {a} vs {b}: U={pr.u:.1f} p_adj={pr.p_adj:.4g} "
                f"[{pr.marker}]"
            )
    n_excluded = max(
        s["n_excluded"] for s in per_experiment_summary.values()
    )
    lines.append("")
    lines.append(
        f"{n_excluded} record(s) without scored events excluded from metrics"
    )
    report_text = "\n".join(lines)
    print(report_text)

    report = {
        "dataset": str(dataset_dir),
        "iou_threshold": iou,
        "package_version": __version__,
        "per_experiment": per_experiment_summary,
        "comparison": {
            field: {
                "groups": list(res.groups),
                "h": res.h,
                "p": res.p,
                "pairwise": {
                    f"{a}/{b}": asdict(pr)
                    for (a, b), pr in res.pairwise.items()
                },
            }
            for field, res in comparison.items()
        },
        "records": {
            name: [asdict(m) for m in ms]
            for name, ms in per_experiment_metrics.items()
        },
        "n_excluded": n_excluded,
    }
    _json_dump(out_dir / "report.json", report)
    (out_dir / "report.txt").write_text(report_text + "\n")
    evalstats.write_results_csv(out_dir / "results.csv", agg_only)
    print(f"report written to {out_dir}")
    return 0


# -- selftest ----------------------------------------------------------------

def cmd_selftest(args) -> int:
    suites = args.suite or None
    return 0 if run_selftest(suites) else 1


# -- entry point ---------------------------------------------------------------

def _parse_run_override(text: str):
    if "=" not in text:
        raise argparse.ArgumentTypeError(
            f"expected EXPERIMENT=DIR, got {text!r}"
        )
    key, _, value = text.partition("=")
    if key not in EXPERIMENTS:
        raise argparse.ArgumentTypeError(
            f"unknown experiment {key!r}; choose from {list(EXPERIMENTS)}"
        )
    return key, value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="psgdetect",
        description="Arousal-event detection experiments on synthetic PSG",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset")
    p.add_argument("--out", required=True, help="dataset directory")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--force", action="store_true",
                   help="reuse a non-empty output directory")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one experiment")
    p.add_argument("--experiment", required=True, choices=list(EXPERIMENTS))
    p.add_argument("--dataset", required=True)
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--run-dir", help="run directory (default <run-root>/<exp>)")
    p.add_argument("--run-root")
    p.add_argument("--fm-run", help="FM run directory for pt/ft surgery")
    p.add_argument("--seed", type=int,
                   help="override model and sampling seeds")
    p.add_argument("--max-steps", type=int)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="metrics + statistics on test2")
    p.add_argument("--dataset", required=True)
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--run", action="append", type=_parse_run_override,
                   metavar="EXP=DIR", help="override a run directory")
    p.add_argument("--run-root")
    p.add_argument("--out", help="report directory (default <run-root>/report)")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("selftest", help="run built-in verification suites")
    p.add_argument("--suite", action="append", choices=list(SUITES),
                   help="run only the named suite (repeatable)")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (synthdata.ConfigError, synthdata.PartitionError,
            mo.ConfigurationError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except training.TrainingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        print(json.dumps(e.diagnostics, indent=2, default=str),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
