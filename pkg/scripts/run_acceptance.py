"""Resumable driver for the benchmark runs behind the acceptance checks.

Trains every (criterion, scenario, seed) combination and appends one line
per finished run to runs/acceptance/results.csv. Re-running skips
combinations already present, so the job can be interrupted at any time.

Profiles:
  paper  - the reference configuration (full-width networks, 500 epochs).
           Roughly an hour per run on a fast multi-core machine.
  desk   - narrow networks and a short schedule for slow single-core
           machines. Accuracy lands a few points below the reference.

Usage:
  python scripts/run_acceptance.py [--profile desk|paper] [--out DIR]
                                   [--only criterion1,criterion2,...]
"""

from __future__ import annotations

import argparse
import csv
import sys
import time
from pathlib import Path

import torch

torch.set_num_threads(1)

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from diva.config import ExperimentConfig
from diva.data import build_scenario, load_mnist_train
from diva.evaluation import accuracy
from diva.model import save_checkpoint
from diva.trainer import train

RESULTS_COLUMNS = [
    "criterion", "label", "profile", "test_domain", "scenario",
    "objective", "seed", "accuracy", "epochs", "seconds",
]

PROFILES = {
    "paper": dict(width_scale=1.0, max_epochs=500, warmup_epochs=100, patience=100),
    "desk": dict(width_scale=0.0625, max_epochs=60, warmup_epochs=20, patience=60),
}

N_SEEDS = 5


def tasks():
    """Every run needed by acceptance criteria 1-4, cheapest bands first."""
    out = []
    # criterion 2: labeled {0,15,30,45}, test 75, unlabeled 60 when semi-supervised
    for seed in range(N_SEEDS):
        out.append(dict(
            criterion="criterion2", label="extra60_supervised", seed=seed,
            test_domain=5, mode="none", objective="diva",
            labeled_domains=(0, 1, 2, 3), extra_domain=None,
        ))
        out.append(dict(
            criterion="criterion2", label="extra60_semisupervised", seed=seed,
            test_domain=5, mode="extra_domain", objective="ss_diva",
            labeled_domains=(0, 1, 2, 3), extra_domain=4,
        ))
    # criterion 3: single-latent ablation on the two extrapolation domains
    for seed in range(N_SEEDS):
        for dom in (0, 5):
            out.append(dict(
                criterion="criterion3", label="vae_ablation", seed=seed,
                test_domain=dom, mode="none", objective="vae_ablation",
                labeled_domains=None, extra_domain=None,
            ))
    # criterion 1: the full supervised table (also reused by criteria 3 and 4)
    for seed in range(N_SEEDS):
        for dom in range(6):
            out.append(dict(
                criterion="criterion1", label="supervised", seed=seed,
                test_domain=dom, mode="none", objective="diva",
                labeled_domains=None, extra_domain=None,
            ))
    return out


def done_keys(results_path: Path) -> set[tuple]:
    if not results_path.exists():
        return set()
    with open(results_path, newline="", encoding="utf-8") as f:
        return {
            (row["label"], int(row["test_domain"]), int(row["seed"]))
            for row in csv.DictReader(f)
        }


def main() -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("--profile", choices=sorted(PROFILES), default="desk")
    parser.add_argument("--out", default="runs/acceptance")
    parser.add_argument("--only", default="", help="comma-separated criteria filter")
    parser.add_argument("--mnist", default="data/mnist")
    args = parser.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results_path = out / "results.csv"
    profile = PROFILES[args.profile]
    (out / "profile.txt").write_text(
        f"profile = {args.profile}\n"
        + "".join(f"{k} = {v}\n" for k, v in profile.items()),
        encoding="utf-8",
    )
    only = {c for c in args.only.split(",") if c}

    images, labels = load_mnist_train(args.mnist)
    finished = done_keys(results_path)
    todo = [
        t for t in tasks()
        if (not only or t["criterion"] in only)
        and (t["label"], t["test_domain"], t["seed"]) not in finished
    ]
    print(f"{len(finished)} runs cached, {len(todo)} to go", flush=True)

    new_file = not results_path.exists()
    with open(results_path, "a", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=RESULTS_COLUMNS)
        if new_file:
            writer.writeheader()
            f.flush()
        for task in todo:
            config = ExperimentConfig(
                test_domain=task["test_domain"],
                scenario_mode=task["mode"],
                extra_domain=-1 if task["extra_domain"] is None else task["extra_domain"],
                objective=task["objective"],
                seed=task["seed"],
                **profile,
            )
            scenario = build_scenario(
                images, labels,
                test_domain=task["test_domain"],
                mode=task["mode"],
                seed=task["seed"],
                per_class=config.per_class,
                extra_domain=task["extra_domain"],
                labeled_domains=task["labeled_domains"],
            )
            tic = time.perf_counter()
            ckpt, log = train(scenario, config)
            acc = accuracy(ckpt, scenario.test)
            seconds = time.perf_counter() - tic
            writer.writerow(dict(
                criterion=task["criterion"], label=task["label"],
                profile=args.profile, test_domain=task["test_domain"],
                scenario=task["mode"], objective=task["objective"],
                seed=task["seed"], accuracy=repr(acc),
                epochs=len(log.rows), seconds=round(seconds, 1),
            ))
            f.flush()
            print(
                f"{task['label']} domain={task['test_domain']} seed={task['seed']}: "
                f"acc={acc:.4f} ({seconds:.0f}s)",
                flush=True,
            )
            # the disentanglement probes (criterion 4) need one saved model
            if (
                task["label"] == "supervised"
                and task["test_domain"] == 0
                and task["seed"] == 0
            ):
                save_checkpoint(ckpt, out / "probe_model.ckpt")
    print("all runs complete", flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
