"""Command-line interface: train, eval, ber-sweep, energy-curve, acc-energy.

Every CSV output gets a key=value manifest sidecar (<csv>.manifest) recording
the command, all resolved parameters, the master seed, package version,
output paths and wall-clock duration. With identical flags and seed all CSV
outputs are byte-identical.

Exit codes: 0 success, 2 usage error, 3 data/format error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .errors import FormatError, NumericError
from .bitcore import load_model, save_model
from .faultsim import SweepResult, accuracy, ber_sweep
from .mnist_io import load_dataset
from .mtj import (
    INTRINSIC_ONLY,
    WITH_DEVICE_VARIATIONS,
    MtjDeviceParams,
    energy_ber_curve,
    load_device_config,
)
from .trainer import MNIST_LAYER_SIZES, TrainConfig, export_model, train

_MODE_FLAGS = {"intrinsic": INTRINSIC_ONLY, "variations": WITH_DEVICE_VARIATIONS}


class UsageError(Exception):
    pass


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_bers(text: str) -> list[float]:
    items = [p for p in text.split(",") if p.strip()]
    if not items:
        raise UsageError("--bers needs at least one value")
    try:
        return [float(p) for p in items]
    except ValueError as exc:
        raise UsageError(f"--bers: not a number in {text!r}") from exc


def _write_csv(path: Path, header: str, rows: list[str]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        f.write(header + "\n")
        for row in rows:
            f.write(row + "\n")


@dataclass
class RunManifest:
    """Reproducibility record written next to every CSV output."""

    command: str
    params: dict
    seed: int | None
    outputs: list[Path]
    duration_s: float
    versions: dict = field(
        default_factory=lambda: {"bitflip_bnn": __version__, "numpy": np.__version__}
    )

    def to_text(self) -> str:
        lines = [f"command={self.command}"]
        for key in sorted(self.params):
            lines.append(f"param.{key}={_fmt(self.params[key])}")
        if self.seed is not None:
            lines.append(f"seed={self.seed}")
        for i, out in enumerate(self.outputs):
            lines.append(f"output.{i}={out}")
        for name in sorted(self.versions):
            lines.append(f"version.{name}={self.versions[name]}")
        lines.append(f"duration_s={self.duration_s!r}")
        return "\n".join(lines) + "\n"

    def write_beside(self, csv_path: Path) -> None:
        Path(str(csv_path) + ".manifest").write_text(self.to_text())


def _write_manifest(
    csv_path: Path, command: str, params: dict, outputs: list[Path], started: float
) -> None:
    manifest = RunManifest(
        command=command,
        params=params,
        seed=params.get("seed"),
        outputs=outputs,
        duration_s=time.monotonic() - started,
    )
    manifest.write_beside(csv_path)


def _sibling(path: Path, tag: str) -> Path:
    if path.suffix:
        return path.with_name(path.stem + tag + path.suffix)
    return path.with_name(path.name + tag)


def _device_params(args) -> MtjDeviceParams:
    if getattr(args, "device", None):
        return load_device_config(args.device)
    return MtjDeviceParams.nominal()


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    started = time.monotonic()
    train_set = load_dataset(args.data_dir, "train")
    test_set = load_dataset(args.data_dir, "test")
    if args.limit is not None:
        if args.limit < 1:
            raise UsageError("--limit must be >= 1")
        train_set = train_set.take(args.limit)
    config = TrainConfig(
        epochs=args.epochs, batch_size=args.batch, learning_rate=args.lr, seed=args.seed
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    log_path = Path(str(out) + ".log.csv")

    def progress(epoch, loss, acc):
        print(f"epoch {epoch}: train_loss={loss:.4f} test_accuracy={acc:.4f}", file=sys.stderr)

    latent, history = train(
        train_set, config, MNIST_LAYER_SIZES, test_set, log_path=log_path, progress=progress
    )
    save_model(export_model(latent), out)
    params = {
        "data_dir": args.data_dir,
        "out": str(out),
        "epochs": args.epochs,
        "batch": args.batch,
        "lr": args.lr,
        "seed": args.seed,
        "limit": args.limit if args.limit is not None else "",
    }
    _write_manifest(log_path, "train", params, [out, log_path], started)
    print(f"model written to {out}; final test accuracy {history[-1][2]!r}")
    return 0


def cmd_eval(args) -> int:
    model = load_model(args.model)
    test_set = load_dataset(args.data_dir, "test")
    acc = accuracy(model, test_set)
    print(f"accuracy={acc!r}")
    return 0


def _sweep_rows(result: SweepResult) -> tuple[list[str], list[str]]:
    trial_rows = []
    summary_rows = []
    for bi, ber in enumerate(result.bers):
        for ti in range(result.trials):
            trial_rows.append(f"{ber!r},{ti},{float(result.accuracies[bi, ti])!r}")
        summary_rows.append(
            f"{ber!r},{float(result.mean_accuracy[bi])!r},{float(result.std_accuracy[bi])!r}"
        )
    return trial_rows, summary_rows


def cmd_ber_sweep(args) -> int:
    started = time.monotonic()
    model = load_model(args.model)
    test_set = load_dataset(args.data_dir, "test")
    bers = _parse_bers(args.bers)
    if sorted(bers) != bers:
        raise UsageError("--bers must be sorted ascending")
    for ber in bers:
        if not 0.0 <= ber <= 1.0:
            raise UsageError(f"BER {ber} outside [0,1]")
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")

    result = ber_sweep(model, test_set, bers, args.trials, args.seed)
    trial_rows, summary_rows = _sweep_rows(result)
    out = Path(args.out)
    trials_path = _sibling(out, "_trials")
    _write_csv(out, "ber,mean_accuracy,std_accuracy", summary_rows)
    _write_csv(trials_path, "ber,trial,accuracy", trial_rows)
    params = {
        "model": args.model,
        "data_dir": args.data_dir,
        "bers": args.bers,
        "trials": args.trials,
        "seed": args.seed,
    }
    _write_manifest(out, "ber-sweep", params, [out, trials_path], started)
    print(f"sweep written to {out} (per-trial rows in {trials_path})")
    return 0


def cmd_energy_curve(args) -> int:
    started = time.monotonic()
    params = _device_params(args)
    bers = _parse_bers(args.bers)
    for ber in bers:
        if not 0.0 < ber < 1.0:
            raise UsageError(f"target BER {ber} outside (0,1)")
    if args.samples < 1:
        raise UsageError("--samples must be >= 1")
    mode = _MODE_FLAGS[args.mode]
    points = energy_ber_curve(params, bers, args.samples, args.seed, mode)
    rows = [
        f"{p.ber!r},{p.t_pulse * 1e9!r},{p.energy_mean * 1e15!r},"
        f"{p.energy_std * 1e15!r},{p.variability_mode}"
        for p in points
    ]
    out = Path(args.out)
    _write_csv(out, "ber,t_pulse_ns,energy_mean_fj,energy_std_fj,mode", rows)
    manifest_params = {
        "device": args.device or "<built-in nominal device>",
        "bers": args.bers,
        "samples": args.samples,
        "mode": args.mode,
        "seed": args.seed,
    }
    _write_manifest(out, "energy-curve", manifest_params, [out], started)
    print(f"energy curve written to {out}")
    return 0


def cmd_acc_energy(args) -> int:
    started = time.monotonic()
    model = load_model(args.model)
    test_set = load_dataset(args.data_dir, "test")
    device = _device_params(args)
    bers = _parse_bers(args.bers)
    for ber in bers:
        if not 0.0 < ber < 1.0:
            raise UsageError(f"target BER {ber} outside (0,1): the energy model needs (0,1)")
    if args.trials < 1 or args.samples < 1:
        raise UsageError("--trials and --samples must be >= 1")
    mode = _MODE_FLAGS[args.mode]

    ascending = sorted(bers)
    sweep = ber_sweep(model, test_set, ascending, args.trials, args.seed)
    curve = energy_ber_curve(device, bers, args.samples, args.seed, mode)
    acc_by_ber = {
        ber: (float(sweep.mean_accuracy[i]), float(sweep.std_accuracy[i]))
        for i, ber in enumerate(ascending)
    }
    rows = []
    for point in curve:  # descending BER, ascending energy
        mean_acc, std_acc = acc_by_ber[point.ber]
        rows.append(
            f"{point.ber!r},{point.energy_mean * 1e15!r},{mean_acc!r},{std_acc!r}"
        )
    out = Path(args.out)
    _write_csv(out, "ber,energy_mean_fj,mean_accuracy,std_accuracy", rows)
    params = {
        "model": args.model,
        "data_dir": args.data_dir,
        "device": args.device or "<built-in nominal device>",
        "bers": args.bers,
        "trials": args.trials,
        "samples": args.samples,
        "mode": args.mode,
        "seed": args.seed,
    }
    _write_manifest(out, "acc-energy", params, [out], started)
    print(f"accuracy-energy curve written to {out}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bitflip-bnn",
        description="Binarized neural network fault-injection and MRAM energy experiments",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the MNIST binarized network")
    p.add_argument("--data-dir", required=True, help="directory with the four MNIST IDX files")
    p.add_argument("--out", required=True, help="output model file (BNN1 format)")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch", type=int, default=100)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--limit", type=int, default=None, help="cap the training set size")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="clean accuracy of a model on the test split")
    p.add_argument("--model", required=True)
    p.add_argument("--data-dir", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ber-sweep", help="accuracy vs weight bit error rate")
    p.add_argument("--model", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--bers", required=True, help="comma-separated BERs, ascending")
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="summary CSV path")
    p.set_defaults(func=cmd_ber_sweep)

    p = sub.add_parser("energy-curve", help="programming energy per bit vs BER")
    p.add_argument("--device", default=None, help="device config file (key=value)")
    p.add_argument("--bers", required=True, help="comma-separated target BERs in (0,1)")
    p.add_argument("--samples", type=int, default=100000)
    p.add_argument("--mode", choices=sorted(_MODE_FLAGS), default="intrinsic")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_energy_curve)

    p = sub.add_parser("acc-energy", help="join accuracy sweep with energy curve")
    p.add_argument("--model", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--device", default=None)
    p.add_argument("--bers", required=True)
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--samples", type=int, default=100000)
    p.add_argument("--mode", choices=sorted(_MODE_FLAGS), default="intrinsic")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_acc_energy)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
