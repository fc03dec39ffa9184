"""Command-line surface for reproducible experiments.

Commands: prepare-data, train, eval, embed, generate, probe, benchmark.
Values come from a flat key=value config file; command-line flags override
file values, which override built-in defaults.

Exit codes: 0 success, 1 usage error, 2 data error, 3 training failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
import torch

from . import reference
from .config import ConfigError, ExperimentConfig
from .data import (
    IdxError,
    ScenarioError,
    Scenario,
    build_scenario,
    load_mnist_train,
    load_scenario,
    save_scenario,
)
from .evaluation import (
    accuracy,
    embeddings_csv,
    export_embeddings,
    partial_reconstruct,
    probe,
    run_benchmark,
    sample_prior,
    swap_generate,
    write_pgm,
    write_pgm_grid,
)
from .model import CheckpointError, load_checkpoint, save_checkpoint
from .trainer import TrainingDivergedError, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_TRAINING = 3


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="key=value config file")
    parser.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a single config value (repeatable)",
    )
    parser.add_argument("--seed", type=int, help="override config.seed")
    parser.add_argument("--output-dir", help="override config.output_dir")


def _load_config(args) -> ExperimentConfig:
    config = (
        ExperimentConfig.from_file(args.config)
        if args.config
        else ExperimentConfig()
    )
    overrides = "\n".join(args.set)
    if overrides:
        merged = config.to_text() + overrides
        config = ExperimentConfig.from_text(merged)
    if args.seed is not None:
        config = config.replace(seed=args.seed)
    if args.output_dir is not None:
        config = config.replace(output_dir=args.output_dir)
    return config


def _out_dir(config: ExperimentConfig) -> Path:
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _get_scenario(config: ExperimentConfig) -> Scenario:
    if config.scenario_dir and (Path(config.scenario_dir) / "manifest.txt").exists():
        return load_scenario(config.scenario_dir)
    images, labels = load_mnist_train(config.mnist_dir)
    return build_scenario(
        images,
        labels,
        test_domain=config.test_domain,
        mode=config.scenario_mode,
        seed=config.seed,
        per_class=config.per_class,
        unlabeled_factor=config.unlabeled_factor,
        extra_domain=config.extra_domain if config.extra_domain >= 0 else None,
    )


def cmd_prepare_data(args) -> int:
    config = _load_config(args)
    images, labels = load_mnist_train(config.mnist_dir)
    scenario = build_scenario(
        images,
        labels,
        test_domain=config.test_domain,
        mode=config.scenario_mode,
        seed=config.seed,
        per_class=config.per_class,
        unlabeled_factor=config.unlabeled_factor,
        extra_domain=config.extra_domain if config.extra_domain >= 0 else None,
    )
    target = Path(config.scenario_dir) if config.scenario_dir else _out_dir(config) / "scenario"
    save_scenario(scenario, target)
    unl = 0 if scenario.unlabeled is None else len(scenario.unlabeled)
    print(
        f"scenario written to {target}: labeled={len(scenario.labeled)} "
        f"unlabeled={unl} test={len(scenario.test)} "
        f"train_domains={scenario.train_domains}"
    )
    return EXIT_OK


def cmd_train(args) -> int:
    config = _load_config(args)
    scenario = _get_scenario(config)
    ckpt, log = train(scenario, config)
    out = _out_dir(config)
    ckpt_path = out / f"model_seed{config.seed}.ckpt"
    save_checkpoint(ckpt, ckpt_path)
    metrics_path = out / f"metrics_seed{config.seed}.csv"
    log.save(metrics_path)
    print(f"checkpoint: {ckpt_path}")
    print(f"metrics: {metrics_path}")
    print(f"epochs_run: {len(log.rows)}")
    return EXIT_OK


def cmd_eval(args) -> int:
    config = _load_config(args)
    ckpt = load_checkpoint(args.checkpoint)
    scenario = _get_scenario(config)
    acc = accuracy(ckpt, scenario.test)
    print(f"test_domain={scenario.test_domain} accuracy={acc:.4f}")
    return EXIT_OK


def cmd_embed(args) -> int:
    config = _load_config(args)
    ckpt = load_checkpoint(args.checkpoint)
    scenario = _get_scenario(config)
    table = export_embeddings(ckpt, scenario.test, args.subspace)
    out = _out_dir(config) / f"embeddings_{args.subspace}.csv"
    out.write_text(embeddings_csv(table), encoding="utf-8")
    print(f"embeddings: {out} ({table.shape[0]} rows)")
    return EXIT_OK


def cmd_generate(args) -> int:
    config = _load_config(args)
    ckpt = load_checkpoint(args.checkpoint)
    out = _out_dir(config)
    if args.mode == "samples":
        images = sample_prior(ckpt, args.domain, args.label, config.seed, args.count)
        for i, img in enumerate(images):
            write_pgm(img, out / f"sample_{i:03d}.pgm")
        print(f"wrote {len(images)} samples to {out}")
        return EXIT_OK

    scenario = _get_scenario(config)
    x = torch.from_numpy(scenario.test.images[: args.count]).unsqueeze(1).to(torch.float32)
    if args.mode == "swap-class":
        rows = [x.numpy()[:, 0]]
        for target in range(ckpt.config.num_classes):
            rows.append(swap_generate(ckpt, x, ("y", target), config.seed)[:, 0])
        grid = np.concatenate(rows)
        path = out / "swap_class.pgm"
        write_pgm_grid(grid, path, rows=len(rows), cols=args.count)
    elif args.mode == "swap-domain":
        rows = [x.numpy()[:, 0]]
        for target in range(ckpt.config.num_domains):
            rows.append(swap_generate(ckpt, x, ("d", target), config.seed)[:, 0])
        grid = np.concatenate(rows)
        path = out / "swap_domain.pgm"
        write_pgm_grid(grid, path, rows=len(rows), cols=args.count)
    else:  # partial
        masks = [("d", "x", "y"), ("d",), ("x",), ("y",)]
        rows = [x.numpy()[:, 0]]
        rows += [partial_reconstruct(ckpt, x, keep)[:, 0] for keep in masks]
        grid = np.concatenate(rows)
        path = out / "partial_reconstruction.pgm"
        write_pgm_grid(grid, path, rows=len(rows), cols=args.count)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_probe(args) -> int:
    config = _load_config(args)
    ckpt = load_checkpoint(args.checkpoint)
    scenario = _get_scenario(config)
    majority = None
    for subspace in ("d", "x", "y"):
        acc, majority = probe(
            ckpt, scenario.labeled, scenario.test, subspace, seed=config.seed
        )
        print(f"probe_z{subspace}_accuracy={acc:.4f}")
    print(f"majority_baseline={majority:.4f}")
    return EXIT_OK


def cmd_benchmark(args) -> int:
    config = _load_config(args)
    images, labels = load_mnist_train(config.mnist_dir)
    report = run_benchmark(
        config,
        test_domain=config.test_domain,
        scenario_mode=config.scenario_mode,
        n_seeds=args.n_seeds,
        mnist=(images, labels),
        jobs=args.jobs,
    )
    out = _out_dir(config) / f"benchmark_domain{config.test_domain}.csv"
    out.write_text(report.to_csv(), encoding="utf-8")
    ref = reference.SUPERVISED_DIVA.get(config.test_domain)
    if config.scenario_mode == "none" and ref is not None:
        print(f"reference: {ref[0]:.1f} +/- {ref[1]:.1f}")
    print(
        f"measured: {100 * report.mean_acc:.1f} +/- {100 * report.stderr:.1f} "
        f"({report.n_seeds} seeds)"
    )
    print(f"report: {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="diva",
        description="Domain-invariant VAE experiments on rotated MNIST",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare-data", help="build and persist a scenario")
    _add_common(p)
    p.set_defaults(func=cmd_prepare_data)

    p = sub.add_parser("train", help="train a model on the configured scenario")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="held-out-domain accuracy of a checkpoint")
    _add_common(p)
    p.add_argument("checkpoint")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("embed", help="export posterior-mean embeddings as CSV")
    _add_common(p)
    p.add_argument("checkpoint")
    p.add_argument("--subspace", choices=("d", "x", "y"), default="y")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("generate", help="prior samples / swaps / partial recon")
    _add_common(p)
    p.add_argument("checkpoint")
    p.add_argument(
        "--mode",
        choices=("samples", "swap-class", "swap-domain", "partial"),
        default="samples",
    )
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--domain", type=int, default=0)
    p.add_argument("--label", type=int, default=0)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("probe", help="subspace predictiveness probes")
    _add_common(p)
    p.add_argument("checkpoint")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("benchmark", help="multi-seed accuracy benchmark")
    _add_common(p)
    p.add_argument("--n-seeds", type=int, default=5)
    p.add_argument("--jobs", type=int, default=1, help="parallel per-seed workers")
    p.set_defaults(func=cmd_benchmark)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (IdxError, ScenarioError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDivergedError as exc:
        print(f"error: training: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except ValueError as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
