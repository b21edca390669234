#!/usr/bin/env python3
"""Train the single-channel experiments over several seeds and tabulate
the fine-tuning vs from-scratch F1 ordering on test2.

Reuses one FM checkpoint as the transfer source for every seed; only the
single-channel model init and batch sampling vary.

    python scripts/seed_sweep.py --dataset data/desk --run-root runs/sweep \
        --seeds 0 1 2
"""

import argparse
import json
import sys
from pathlib import Path

from psgdetect import cli, dsp, evalstats, synthdata, training
from psgdetect import model as mo


def test_f1(run_dir: Path, dataset: Path, manifest, cache: dict) -> float:
    run = json.loads((run_dir / "run.json").read_text())
    channels = tuple(run["experiment"]["channels"])
    seg_dur = run["config"]["train"]["segment_duration_s"]
    tau = run["result"]["tau"]
    if channels not in cache:
        cache[channels] = [
            dsp.preprocess_record(
                synthdata.load_record(
                    synthdata.record_path(dataset, manifest, rid),
                    channels=list(channels),
                )
            )
            for rid in manifest["partitions"]["test2"]
        ]
    model = mo.load_model(run_dir / "model.ckpt")
    metrics = [
        evalstats.record_metrics(
            training.detect_record(model, rec, tau, seg_dur),
            rec.events, record_id=rec.record_id,
        )
        for rec in cache[channels]
    ]
    return evalstats.aggregate(metrics)["f1"]["mean"]


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--dataset", required=True)
    ap.add_argument("--config", default=None)
    ap.add_argument("--run-root", default="runs/sweep")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--fm-run", default=None,
                    help="existing FM run to reuse (default: train one)")
    args = ap.parse_args()

    root = Path(args.run_root)
    dataset = Path(args.dataset)
    manifest = synthdata.load_manifest(dataset)
    base = ["--dataset", args.dataset, "--force"]
    if args.config:
        base += ["--config", args.config]

    fm_run = args.fm_run
    if fm_run is None:
        fm_run = str(root / "fm")
        rc = cli.main(["train", "--experiment", "fm",
                       "--run-dir", fm_run] + base)
        if rc != 0:
            return rc

    cache: dict = {}
    wins = 0
    rows = []
    for seed in args.seeds:
        scores = {}
        for exp in ("se", "ft"):
            run_dir = root / f"{exp}_seed{seed}"
            rc = cli.main(
                ["train", "--experiment", exp, "--run-dir", str(run_dir),
                 "--fm-run", fm_run, "--seed", str(seed)] + base
            )
            if rc != 0:
                return rc
            scores[exp] = test_f1(run_dir, dataset, manifest, cache)
        ordered = scores["ft"] > scores["se"]
        wins += ordered
        rows.append((seed, scores["se"], scores["ft"], ordered))

    print(f"\n{'seed':>4} {'SE F1':>8} {'FT F1':>8}  FT>SE")
    for seed, se, ft, ordered in rows:
        print(f"{seed:>4} {se:>8.3f} {ft:>8.3f}  {'yes' if ordered else 'no'}")
    print(f"fine-tuning beats single-EEG on {wins}/{len(rows)} seeds")
    return 0 if wins * 2 > len(rows) else 1


if __name__ == "__main__":
    sys.exit(main())
