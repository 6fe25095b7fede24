#!/usr/bin/env python3
"""
RAVEN Workbench Command Line
============================

Usage:
    python3 raven_cli.py verify   [--seed 7] [--quick] [--out-dir runs/verify]
    python3 raven_cli.py train    --dataset mnist --regime raven --epochs 20 --subsample 10000
    python3 raven_cli.py attack   --dataset mnist --out-dir runs/mnist_raven --delta-grid 0.1
    python3 raven_cli.py evaluate --dataset mnist --out-dir runs/mnist_raven [--export-latents]
    python3 raven_cli.py report   runs/ --out-dir runs/report
    python3 raven_cli.py sweep    --dataset fmnist --sigma-grid 0.01,0.04,0.1 --select-delta 0.1

Settings come from built-in defaults, then --config (KEY=value file, see
raven_config.template), then RAVEN_DATA_DIR, then flags.

Exit codes:
    0  success
    1  verification failure (an identity did not hold)
    2  usage or configuration error
    3  missing or unreadable input file
    4  numerical failure (divergence, non-finite values)

Every failure prints one line `error: <kind>: <message>` on stderr.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import ValidationError

from dataset_io import (Dataset, DatasetError, IdxFormatError, load_idx, locate_split_files, split_train_test,
                        subsample, synth_blobs)
from math_oracles import QuadratureError, SuiteSize, run_verification_suite
from raven_config import (SWEEP_SIGMAS, SYNTH_LAYOUT, ConfigError, RunManifest, RunSettings,
                          parse_float_list, resolve_settings, validation_message)
from report_charts import ReportError, format_summary, render_report
from robustness import (AttackConfig, attack_batch, evaluate, extract_representations, fit_linear_probe,
                        write_latents)
from tensor_core import NonFiniteError, RavenError
from trainer import AugmentationSpec, TrainConfig, TrainingDivergedError, train
from vae_model import MANIFEST_NAME, CheckpointError, VaeModel

logger = logging.getLogger("raven_cli")

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_CONFIG = 2
EXIT_MISSING_FILE = 3
EXIT_NUMERICAL = 4

DATA_SEED = 0
BANNER = "=" * 70

# flag dest -> RunSettings field
SETTING_FLAGS = ("dataset", "data_dir", "regime", "sigma_aug", "noise_std", "epochs", "batch_size", "lr",
                 "latent_dim", "hidden_dims", "delta_grid", "objective", "seed", "out_dir", "subsample",
                 "test_subsample", "gmm_components", "gmm_samples", "attack_iterations", "random_start",
                 "workers", "recon_likelihood")


class VerificationFailed(RavenError):
    pass


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _common_flags() -> argparse.ArgumentParser:
    """Run-setting flags shared by every subcommand; all default to None so config files apply"""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="KEY=value run file (see raven_config.template)")
    common.add_argument("--dataset", choices=["mnist", "fmnist", "synth"], default=None)
    common.add_argument("--data-dir", default=None, help="Directory with IDX files (default: $RAVEN_DATA_DIR)")
    common.add_argument("--regime", choices=["vanilla", "noise_vae", "raven", "raven_gmm"], default=None)
    common.add_argument("--sigma-aug", default=None,
                        help="Augmentation-kernel std: one value, or a comma list of one per latent dimension")
    common.add_argument("--noise-std", type=float, default=None, help="Std of the input pair noise")
    common.add_argument("--epochs", type=int, default=None)
    common.add_argument("--batch-size", type=int, default=None)
    common.add_argument("--lr", type=float, default=None, help="RAdam learning rate")
    common.add_argument("--latent-dim", type=int, default=None)
    common.add_argument("--hidden-dims", default=None, help="Comma list of hidden widths, e.g. 500,250")
    common.add_argument("--delta-grid", default=None, help="Comma list of attack budgets")
    common.add_argument("--objective", choices=["kl", "w2", "both"], default=None)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out-dir", default=None)
    common.add_argument("--subsample", type=int, default=None, help="Stratified training subsample size")
    common.add_argument("--test-subsample", type=int, default=None)
    common.add_argument("--gmm-components", type=int, default=None)
    common.add_argument("--gmm-samples", type=int, default=None)
    common.add_argument("--attack-iterations", type=int, default=None)
    common.add_argument("--random-start", action="store_true", default=None)
    common.add_argument("--workers", type=int, default=None, help="Attack worker processes")
    common.add_argument("--recon-likelihood", choices=["bernoulli-cross-entropy", "gaussian-mse"], default=None)
    common.add_argument("--verbose", action="store_true", help="Debug logging on stderr")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_flags()
    parser = argparse.ArgumentParser(prog="raven", description="RAVEN robust VAE workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    verify = sub.add_parser("verify", parents=[common], help="Check every closed form against numerical oracles")
    verify.add_argument("--quick", action="store_true", help="Reduced instance counts and sample sizes")

    train_p = sub.add_parser("train", parents=[common], help="Train one model")
    train_p.add_argument("--resume", default=None, help="Checkpoint directory to continue from")

    for name, text in (("attack", "PGD attacks on the test set, per-sample results"),
                       ("evaluate", "Linear probe, adversarial accuracy grid, MSE and latent distances")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--checkpoint", default=None, help="Checkpoint directory (default: <out-dir>/checkpoint)")
        if name == "evaluate":
            p.add_argument("--export-latents", action="store_true",
                           help="Write latents_clean.csv and latents_noisy.csv")

    report = sub.add_parser("report", parents=[common], help="SVG curves and mean ± std tables from accuracy CSVs")
    report.add_argument("inputs", nargs="+", help="accuracy.csv files or directories containing them")

    sweep = sub.add_parser("sweep", parents=[common], help="Train and evaluate RAVEN over a grid of sigma_aug")
    sweep.add_argument("--sigma-grid", default=None, help="Comma list of stds (default 0.01,0.04,0.1,0.2,0.4,1)")
    sweep.add_argument("--select-delta", type=float, default=None,
                       help="Budget at which the best sigma is chosen (default: largest in the grid)")
    return parser


def settings_from_args(args: argparse.Namespace) -> RunSettings:
    overrides = {name: getattr(args, name, None) for name in SETTING_FLAGS}
    return resolve_settings(args.config, overrides)


def configure_logging(verbose: bool) -> None:
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", force=True)


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------

def load_datasets(settings: RunSettings) -> Tuple[Dataset, Dataset, Dict[str, Path]]:
    """Train and test splits plus the input files to hash into the manifest"""
    inputs: Dict[str, Path] = {}
    if settings.dataset == "synth":
        layout = SYNTH_LAYOUT
        full = synth_blobs(classes=layout["classes"], per_class=layout["per_class"], dim=layout["dim"],
                           separation=layout["separation"], seed=DATA_SEED)
        train_ds, test_ds = split_train_test(full, layout["test_fraction"], seed=DATA_SEED)
    else:
        for split in ("train", "test"):
            images, labels = locate_split_files(settings.dataset, settings.data_dir, split)
            inputs[f"{split}_images"], inputs[f"{split}_labels"] = images, labels
        train_ds = load_idx(inputs["train_images"], inputs["train_labels"], settings.dataset, "train")
        test_ds = load_idx(inputs["test_images"], inputs["test_labels"], settings.dataset, "test")
    if settings.subsample is not None:
        train_ds = subsample(train_ds, settings.subsample, seed=DATA_SEED)
    if settings.test_subsample is not None:
        test_ds = subsample(test_ds, settings.test_subsample, seed=DATA_SEED)
    return train_ds, test_ds, inputs


def train_config(settings: RunSettings, **changes: Any) -> TrainConfig:
    values = dict(regime=settings.regime, epochs=settings.epochs, batch_size=settings.batch_size,
                  learning_rate=settings.lr, seed=settings.seed, hidden_dims=tuple(settings.hidden_dims),
                  latent_dim=settings.latent_dim, sigma_aug=settings.sigma_aug_stds(),
                  recon_likelihood=settings.recon_likelihood, gmm_components=settings.gmm_components,
                  gmm_samples=settings.gmm_samples, augmentation=AugmentationSpec(noise_std=settings.noise_std))
    values.update(changes)
    try:
        return TrainConfig(**values)
    except ValidationError as e:
        raise ConfigError(validation_message(e)) from e


def attack_template(settings: RunSettings) -> AttackConfig:
    return AttackConfig(iterations=settings.attack_iterations, seed=settings.seed,
                        random_start=settings.random_start)


def checkpoint_dir(args: argparse.Namespace, settings: RunSettings) -> Path:
    return Path(args.checkpoint) if args.checkpoint else Path(settings.out_dir) / "checkpoint"


def load_checkpoint(path: Path) -> Tuple[VaeModel, Dict[str, Any]]:
    if not (path / MANIFEST_NAME).is_file():
        raise FileNotFoundError(f"no checkpoint at {path}")
    model, _, manifest = VaeModel.load(path)
    return model, manifest.get("metadata", {})


def print_banner(title: str, stream=None) -> None:
    stream = stream or sys.stdout
    print(f"\n{BANNER}\n{title}\n{BANNER}", file=stream)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_verify(args: argparse.Namespace, settings: RunSettings) -> int:
    size = SuiteSize.quick() if args.quick else SuiteSize()
    print_banner(f"VERIFY: closed forms vs oracles (seed {settings.seed}{', quick' if args.quick else ''})",
                 sys.stderr)
    results = run_verification_suite(settings.seed, size)
    frame = pd.DataFrame([r.as_row() for r in results],
                         columns=["identity", "instance_seed", "error", "tolerance", "passed"])

    if args.out_dir:
        manifest = RunManifest.create("verify", settings, quick=args.quick)
        frame["run_hash"] = manifest.hash
        out_dir = Path(settings.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        frame.to_csv(out_dir / "verify.csv", index=False)
        manifest.write(out_dir)
        print(f"✓ results written to {out_dir / 'verify.csv'}", file=sys.stderr)
    else:
        frame.to_csv(sys.stdout, index=False)

    failed = frame[~frame["passed"]]
    for identity, group in frame.groupby("identity", sort=False):
        mark = "✓" if group["passed"].all() else "✗"
        print(f"{mark} {identity:<40} {int(group['passed'].sum())}/{len(group)}", file=sys.stderr)
    if len(failed):
        raise VerificationFailed(f"{len(failed)} of {len(frame)} checks failed: "
                                 f"{', '.join(sorted(failed['identity'].unique()))}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace, settings: RunSettings) -> int:
    config = train_config(settings)
    train_ds, _, inputs = load_datasets(settings)
    manifest = RunManifest.create("train", settings, inputs)
    out_dir = Path(settings.out_dir)

    print_banner(f"TRAIN {config.regime.upper()} on {settings.dataset} ({len(train_ds)} images)")
    print(f"  run hash   : {manifest.hash}")
    print(f"  sigma_aug  : {config.sigma_aug}")
    print(f"  epochs     : {config.epochs}  batch {config.batch_size}  lr {config.learning_rate}")
    result = train(config, train_ds, out_dir, run_hash=manifest.hash, resume=args.resume)
    manifest.write(out_dir)

    last = result.metrics.iloc[-1] if len(result.metrics) else None
    print(f"✓ {result.steps} steps over {result.epochs_completed} epochs")
    if last is not None:
        print(f"  final bound: {last['total']:.4f}")
    print(f"  checkpoint : {result.checkpoint}")
    print(f"  metrics    : {result.metrics_path}")
    return EXIT_OK


def cmd_attack(args: argparse.Namespace, settings: RunSettings) -> int:
    checkpoint = checkpoint_dir(args, settings)
    model, _ = load_checkpoint(checkpoint)
    _, test_ds, inputs = load_datasets(settings)
    manifest = RunManifest.create("attack", settings, {**inputs, "checkpoint": checkpoint / MANIFEST_NAME})
    template = attack_template(settings)

    print_banner(f"ATTACK {checkpoint} ({len(test_ds)} test images)")
    rows = []
    for objective in settings.objectives():
        for delta in settings.delta_grid:
            if delta == 0.0:
                continue
            cfg = template.model_copy(update={"budget": float(delta), "objective": objective})
            results = attack_batch(model, test_ds.images, cfg, settings.workers)
            for i, r in enumerate(results):
                rows.append({"objective": objective, "delta": delta, "sample": i, "label": int(test_ds.labels[i]),
                             "dissimilarity": r.objective, "max_abs_eps": float(np.max(np.abs(r.epsilon))),
                             "failed": r.failed, "run_hash": manifest.hash})
            values = [r.objective for r in results if not r.failed]
            print(f"  {objective} δ={delta:<6g} mean dissimilarity {np.mean(values) if values else float('nan'):.4f}")

    out_dir = Path(settings.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(rows, columns=["objective", "delta", "sample", "label", "dissimilarity", "max_abs_eps",
                                        "failed", "run_hash"])
    frame.to_csv(out_dir / "attack.csv", index=False)
    manifest.write(out_dir)
    print(f"✓ {len(frame)} attacked samples written to {out_dir / 'attack.csv'}")
    return EXIT_OK


def run_evaluation(model: VaeModel, regime: str, train_ds: Dataset, test_ds: Dataset, settings: RunSettings,
                   run_hash: str):
    probe = fit_linear_probe(extract_representations(model, train_ds), train_ds.labels)
    return evaluate(model, probe, test_ds, settings.delta_grid, settings.objectives(),
                    attack=attack_template(settings), noise_std=settings.noise_std, noise_seed=settings.seed,
                    workers=settings.workers, regime=regime, run_hash=run_hash)


def cmd_evaluate(args: argparse.Namespace, settings: RunSettings) -> int:
    checkpoint = checkpoint_dir(args, settings)
    model, metadata = load_checkpoint(checkpoint)
    train_ds, test_ds, inputs = load_datasets(settings)
    manifest = RunManifest.create("evaluate", settings, {**inputs, "checkpoint": checkpoint / MANIFEST_NAME})
    regime = metadata.get("regime", settings.regime)
    out_dir = Path(settings.out_dir)

    print_banner(f"EVALUATE {regime.upper()} ({checkpoint})")
    report = run_evaluation(model, regime, train_ds, test_ds, settings, manifest.hash)
    paths = report.write(out_dir)
    if args.export_latents:
        noisy = test_ds.images + settings.noise_std * np.random.default_rng(settings.seed).standard_normal(
            test_ds.images.shape)
        write_latents(out_dir / "latents_clean.csv", extract_representations(model, test_ds), test_ds.labels)
        write_latents(out_dir / "latents_noisy.csv", extract_representations(model, noisy), test_ds.labels)
    manifest.write(out_dir)

    print(f"  clean accuracy       : {100 * report.clean_accuracy:.2f}%")
    for row in report.adversarial:
        print(f"  {row.objective} δ={row.delta:<6g}        : {100 * row.accuracy:.2f}%")
    print(f"  reconstruction MSE   : {report.recon_mse:.4f}")
    print(f"  latent-pair distance : {report.latent_pair_distance_mean:.4f} ± {report.latent_pair_distance_std:.4f}")
    if report.probe_degenerate:
        print("⚠ probe is degenerate (single class in the training split)")
    print(f"✓ report written to {paths['json']}")
    return EXIT_OK


def cmd_report(args: argparse.Namespace, settings: RunSettings) -> int:
    out_dir = Path(settings.out_dir)
    outputs = render_report(args.inputs, out_dir)
    summary = pd.read_csv(outputs["summary"])
    manifest = RunManifest.create("report", settings, {"summary": outputs["summary"]}, inputs_given=args.inputs)
    manifest.write(out_dir)

    print_banner("ACCURACY UNDER ATTACK (mean ± std across runs, %)")
    print(format_summary(summary))
    for name, path in outputs.items():
        print(f"✓ {name:<8} {path}")
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace, settings: RunSettings) -> int:
    sigmas = parse_float_list(args.sigma_grid) if args.sigma_grid else list(SWEEP_SIGMAS)
    positive = [d for d in settings.delta_grid if d > 0]
    select = args.select_delta if args.select_delta is not None else (max(positive) if positive else 0.0)
    if select not in settings.delta_grid:
        raise ConfigError(f"--select-delta {select} is not in the delta grid {settings.delta_grid}")

    train_ds, test_ds, inputs = load_datasets(settings)
    manifest = RunManifest.create("sweep", settings, inputs, sigma_grid=sigmas, select_delta=select)
    out_dir = Path(settings.out_dir)
    print_banner(f"SIGMA_AUG SWEEP on {settings.dataset}: {sigmas}")

    rows = []
    for sigma in sigmas:
        config = train_config(settings, regime="raven", sigma_aug=[sigma])
        run_dir = out_dir / f"sigma_{sigma:g}"
        result = train(config, train_ds, run_dir, run_hash=manifest.hash)
        report = run_evaluation(result.model, "raven", train_ds, test_ds, settings, manifest.hash)
        report.write(run_dir)
        for row in report.adversarial:
            rows.append({"sigma_aug": sigma, "objective": row.objective, "delta": row.delta,
                         "accuracy": row.accuracy, "clean_accuracy": report.clean_accuracy,
                         "recon_mse": report.recon_mse,
                         "latent_pair_distance": report.latent_pair_distance_mean, "run_hash": manifest.hash})
        print(f"  σ={sigma:<6g} clean {100 * report.clean_accuracy:.2f}%  MSE {report.recon_mse:.4f}")

    frame = pd.DataFrame(rows)
    out_dir.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out_dir / "sweep.csv", index=False)
    at_select = frame[np.isclose(frame["delta"], select)].groupby("sigma_aug")["accuracy"].mean()
    best = float(at_select.idxmax())
    with open(out_dir / "sweep_best.json", "w") as f:
        json.dump({"select_delta": select, "best_sigma_aug": best, "accuracy": float(at_select.max()),
                   "run_hash": manifest.hash}, f, indent=2, sort_keys=True)
    manifest.write(out_dir)
    print(f"✓ best sigma_aug at δ={select:g}: {best:g} ({100 * at_select.max():.2f}%)")
    return EXIT_OK


COMMANDS: Dict[str, Callable[[argparse.Namespace, RunSettings], int]] = {
    "verify": cmd_verify,
    "train": cmd_train,
    "attack": cmd_attack,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
    "sweep": cmd_sweep,
}


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

def _fail(code: int, kind: str, message: Any) -> int:
    logger.debug("%s failure", kind, exc_info=True)
    print(f"error: {kind}: {message}", file=sys.stderr)
    return code


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    """Run one subcommand and map failures to exit codes"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    configure_logging(args.verbose)
    try:
        settings = settings_from_args(args)
        return COMMANDS[args.command](args, settings)
    except VerificationFailed as e:
        return _fail(EXIT_VERIFY_FAILED, "verification", e)
    except (ConfigError, DatasetError) as e:
        return _fail(EXIT_CONFIG, "config", e)
    except FileNotFoundError as e:
        return _fail(EXIT_MISSING_FILE, "missing-file", e)
    except (IdxFormatError, CheckpointError, ReportError) as e:
        return _fail(EXIT_MISSING_FILE, "bad-input", e)
    except TrainingDivergedError as e:
        return _fail(EXIT_NUMERICAL, "diverged", e)
    except (NonFiniteError, QuadratureError) as e:
        return _fail(EXIT_NUMERICAL, "numerical", e)
    except RavenError as e:
        return _fail(EXIT_NUMERICAL, type(e).__name__, e)


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
