"""Command-line entry point: generate, train, eval, predict.

Exit codes: 0 success, 2 usage, 3 numeric failure, 4 I/O or input-contract error.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from . import __version__
from .container import ContainerError, atomic_write_bytes
from .data import KINDS, ModelHashError, read_dataset, simulate_imus, generate_motion, write_dataset
from .experiments import ABLATIONS, ablated_weights, evaluate
from .inference import Predictor
from .metrics import merge_reports
from .model import ModelError, load_model, reference_model
from .network import load_checkpoint, save_checkpoint
from .stream import PredictionWriter, StreamRecordError, predict_stream, read_records
from .training import NumericalError, TrainConfig, train, write_loss_log

MODEL_ENV = "KINPRED_MODEL"
BUILTIN_MODEL = "builtin:humanoid20"

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("kinpred")


class UsageError(Exception):
    pass


class InputError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config: dict
    seeds: list[int]
    inputs: list[str]
    outputs: list[str]
    started: float
    seconds: float = 0.0
    version: str = field(default_factory=lambda: describe_version())
    extra: dict = field(default_factory=dict)

    def write(self, path) -> None:
        atomic_write_bytes(path, (json.dumps(asdict(self), indent=2, default=str) + "\n").encode())


def describe_version() -> str:
    """``git describe``-style string when run from a checkout, else the package version."""
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=here, capture_output=True, text=True, timeout=5, check=True,
        )
        return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        return __version__


def _resolve_model(args):
    path = args.model or os.environ.get(MODEL_ENV)
    if not path:
        raise UsageError(f"--model is required (or set {MODEL_ENV})")
    if path == BUILTIN_MODEL:
        return reference_model(), path
    try:
        return load_model(path), path
    except OSError as exc:
        raise InputError(f"cannot read model file {path}: {exc}") from exc


def _load_config(args) -> dict:
    if not getattr(args, "config", None):
        return {}
    try:
        with open(args.config) as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise InputError(f"cannot read config {args.config}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {args.config} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise UsageError("config file must hold a JSON object")
    return cfg


def _read_datasets(paths, model):
    seqs = []
    for p in paths:
        try:
            seqs.append(read_dataset(p, expected_model_hash=model.hash(), strict=True))
        except ModelHashError as exc:
            raise InputError(str(exc)) from exc
    return seqs


def _load_ckpt(path, model):
    ckpt = load_checkpoint(path)
    if ckpt.model_hash and ckpt.model_hash != model.hash():
        raise InputError(f"checkpoint {path} was trained for model {ckpt.model_hash}, got {model.hash()}")
    if ckpt.params.descriptor.n != model.n:
        raise InputError(f"checkpoint predicts {ckpt.params.descriptor.n} joints, model has {model.n}")
    return ckpt


# -- commands ---------------------------------------------------------------------


def cmd_generate(args, model, model_path, started) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    kinds = list(KINDS) if args.kind == ["all"] else args.kind
    written, seeds = [], []
    for kind in kinds:
        for r in range(args.repeats):
            seed = args.seed + r
            seq = generate_motion(model, kind, args.duration, args.rate, seed, transitions=args.transitions)
            seq = simulate_imus(
                model, seq, args.noise, args.noise_ori if args.noise_ori is not None else args.noise / 10.0,
                seed=seed + 10_000, gravity=not args.gravity_free,
            )
            path = out / f"{kind}{'_trans' if args.transitions else ''}_seed{seed}.kpd"
            write_dataset(seq, path)
            written.append(str(path))
            seeds.append(seed)
            log.info("wrote %s (%d frames)", path, len(seq))
    cfg = {k: getattr(args, k) for k in ("kind", "duration", "rate", "repeats", "noise", "noise_ori", "transitions", "gravity_free")}
    cfg["model"] = model_path
    RunManifest("generate", args.argv, cfg, seeds, [model_path], written, started, time.time() - started).write(
        out / "manifest.json"
    )
    return EXIT_OK


_TRAIN_FLAGS = {
    "epochs": "epochs", "batch_size": "batch_size", "lr": "lr0", "lr_step": "lr_step_epochs",
    "lr_gamma": "lr_gamma", "stride": "stride", "horizon": "K", "window": "M",
}


def _train_config(args) -> TrainConfig:
    cfg = _load_config(args)
    names = {f.name for f in fields(TrainConfig)}
    unknown = set(cfg) - names
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    for flag, key in _TRAIN_FLAGS.items():
        if getattr(args, flag) is not None:
            cfg[key] = getattr(args, flag)
    if args.hidden is not None:
        h = args.hidden
        cfg.update(inertial_hidden=h, buffer_hidden=h, shared_hidden=2 * h, head_hidden=h)
    if args.no_buffer:
        cfg["use_buffer"] = False
    cfg["seed"] = args.seed
    try:
        config = TrainConfig(**cfg)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training configuration: {exc}") from exc
    config.weights = ablated_weights(config.weights, args.ablate)
    return config


def cmd_train(args, model, model_path, started) -> int:
    config = _train_config(args)
    data = _read_datasets(args.data, model)
    val = _read_datasets(args.val, model) if args.val else None
    result = train(model, data, config, val)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, result.checkpoint)
    loss_log = Path(args.loss_log) if args.loss_log else out.with_suffix(".loss.csv")
    write_loss_log(result.log, loss_log)
    RunManifest(
        "train", args.argv, {**config.to_json(), "ablate": args.ablate, "model": model_path}, [config.seed],
        [model_path, *args.data, *(args.val or [])], [str(out), str(loss_log)], started, time.time() - started,
    ).write(str(out) + ".manifest.json")
    return EXIT_OK


def cmd_eval(args, model, model_path, started) -> int:
    ckpt = _load_ckpt(args.checkpoint, model)
    data = _read_datasets(args.data, model)
    subset = None if args.subset == "auto" else (
        tuple(sorted(model.lower_joints)) if args.subset == "lower" else tuple(range(model.n))
    )
    reports = [
        evaluate(model, ckpt.params, seq, closed_loop=not args.open_loop, refine=not args.no_refine,
                 joint_subset=subset, epsilon=args.epsilon)
        for seq in data
    ]
    report = merge_reports(reports)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    json_path, csv_path = out.with_suffix(".json"), out.with_suffix(".csv")
    atomic_write_bytes(json_path, report.to_json().encode())
    atomic_write_bytes(csv_path, report.to_csv().encode())
    cfg = {"refine": not args.no_refine, "open_loop": args.open_loop, "subset": args.subset, "epsilon": args.epsilon}
    RunManifest(
        "eval", args.argv, {**cfg, "model": model_path}, [args.seed], [model_path, args.checkpoint, *args.data],
        [str(json_path), str(csv_path)], started, time.time() - started,
    ).write(str(out) + ".manifest.json")
    if not args.quiet:
        print(report.to_csv(), end="")
    return EXIT_OK


def cmd_predict(args, model, model_path, started) -> int:
    ckpt = _load_ckpt(args.checkpoint, model)
    K = ckpt.params.descriptor.K
    if args.horizon_dump is not None and not 0 <= args.horizon_dump < K:
        raise UsageError(f"--horizon-dump must lie in 0..{K - 1}")
    predictor = Predictor(ckpt.params, model, refine=not args.no_refine, epsilon=args.epsilon)
    with contextlib.ExitStack() as stack:
        fin = sys.stdin.buffer if args.input == "-" else stack.enter_context(open(args.input, "rb"))
        if args.output == "-":
            fout = sys.stdout
        else:
            Path(args.output).parent.mkdir(parents=True, exist_ok=True)
            fout = stack.enter_context(open(args.output, "w", newline=""))
        writer = PredictionWriter(fout, model.n, args.format, args.horizon_dump, args.horizon_stride)
        records = read_records(fin, model.D, model.n)
        for index, t, pred in predict_stream(predictor, records):
            writer.write(index, t, pred)
    if args.output != "-":
        cfg = {"refine": not args.no_refine, "epsilon": args.epsilon, "format": args.format,
               "horizon_dump": args.horizon_dump, "horizon_stride": args.horizon_stride, "model": model_path}
        RunManifest(
            "predict", args.argv, cfg, [args.seed], [model_path, args.checkpoint, args.input], [args.output],
            started, time.time() - started, extra={"records": writer.count},
        ).write(args.output + ".manifest.json")
    return EXIT_OK


# -- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--model", help=f"model description file, or {BUILTIN_MODEL}; default ${MODEL_ENV}")
    common.add_argument("--seed", type=int, default=0, help="single source of randomness")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="kinpred", description="Physics-informed joint kinematics prediction from 5 IMUs.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="write synthetic datasets")
    g.add_argument("--kind", nargs="+", default=["forward_walk"], choices=[*KINDS, "all"])
    g.add_argument("--duration", type=float, default=60.0, help="seconds")
    g.add_argument("--rate", type=float, default=60.0, help="Hz")
    g.add_argument("--repeats", type=int, default=1, help="files per kind, seeds seed..seed+repeats-1")
    g.add_argument("--noise", type=float, default=0.0, help="accelerometer noise sigma, m/s^2")
    g.add_argument("--noise-ori", type=float, default=None, help="orientation noise sigma, rad (default noise/10)")
    g.add_argument("--transitions", action="store_true", help="alternate standing and the gait")
    g.add_argument("--gravity-free", action="store_true", help="simulate free instead of proper acceleration")
    g.add_argument("--out", default="data")

    t = sub.add_parser("train", parents=[common], help="train a predictor")
    t.add_argument("--data", nargs="+", required=True)
    t.add_argument("--val", nargs="*")
    t.add_argument("--out", default="checkpoint.kpc")
    t.add_argument("--loss-log", default=None)
    t.add_argument("--config", help="JSON file of training settings; flags override it")
    t.add_argument("--ablate", choices=sorted(ABLATIONS), default="fkdk",
                   help="which kinematics losses stay on (none, fk, dk, fkdk)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--lr-step", type=int)
    t.add_argument("--lr-gamma", type=float)
    t.add_argument("--stride", type=int)
    t.add_argument("--horizon", type=int, help="prediction steps K")
    t.add_argument("--window", type=int, help="input window M")
    t.add_argument("--hidden", type=int, help="branch/head width; the shared trunk gets twice this")
    t.add_argument("--no-buffer", action="store_true", help="inertial-only network")

    e = sub.add_parser("eval", parents=[common], help="closed-loop evaluation report")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", nargs="+", required=True)
    e.add_argument("--out", default="report")
    e.add_argument("--no-refine", action="store_true", help="push raw first-step predictions into the buffer")
    e.add_argument("--open-loop", action="store_true", help="true past states in the buffer instead of predictions")
    e.add_argument("--subset", choices=["auto", "lower", "all"], default="auto")
    e.add_argument("--epsilon", type=float, default=1e-4)
    e.add_argument("--quiet", action="store_true")

    r = sub.add_parser("predict", parents=[common], help="stream per-step predictions")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--input", default="-", help="dataset file or JSON lines; - for stdin")
    r.add_argument("--output", default="-")
    r.add_argument("--format", choices=["jsonl", "csv"], default="jsonl")
    r.add_argument("--horizon-dump", type=int, default=None, help="also emit the state this many frames ahead")
    r.add_argument("--horizon-stride", type=int, default=0, help="JSON only: every k-th horizon step")
    r.add_argument("--no-refine", action="store_true")
    r.add_argument("--epsilon", type=float, default=1e-4)
    return p


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    # recorded in manifests so a run can be repeated exactly
    args.argv = ["kinpred", *(sys.argv[1:] if argv is None else argv)]
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    started = time.time()
    try:
        model, model_path = _resolve_model(args)
        return COMMANDS[args.command](args, model, model_path, started)
    except UsageError as exc:
        parser.error(str(exc))  # exits 2
    except BrokenPipeError:
        # downstream reader closed early (e.g. `| head`); not an error
        os.dup2(os.open(os.devnull, os.O_WRONLY), sys.stdout.fileno())
        return EXIT_OK
    except (NumericalError, FloatingPointError) as exc:
        print(f"kinpred: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, StreamRecordError, ModelError, ContainerError, OSError) as exc:
        print(f"kinpred: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
