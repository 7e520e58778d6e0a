"""Reusable experiment drivers shared by the scripts, the CLI and the acceptance suite."""
from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from .data import RecordedSequence, generate_motion, simulate_imus
from .inference import Predictor, run_closed_loop
from .losses import LossWeights
from .metrics import MetricsReport, compute_metrics, default_joint_subset
from .model import RigidBodyModel
from .network import Checkpoint, PredictorParams, forward
from .training import TrainConfig, WindowSource, train

ABLATIONS = {
    "none": (0.0, 0.0),
    "fk": (1.0, 0.0),
    "dk": (0.0, 1.0),
    "fkdk": (1.0, 1.0),
}


# the trend experiment weighs the kinematics terms like the data terms; at the
# training default (0.1) they are a few percent of the loss at this budget
ABLATION_WEIGHTS = LossWeights(1.0, 1.0, 1.0, 1.0)


def ablated_weights(base: LossWeights, ablate: str) -> LossWeights:
    """Keep the FK/DK weights of ``base`` for the enabled terms, zero the others."""
    if ablate not in ABLATIONS:
        raise ValueError(f"unknown ablation {ablate!r}; choose from {sorted(ABLATIONS)}")
    fk, dk = ABLATIONS[ablate]
    return replace(base, fk=base.fk * fk, dk=base.dk * dk)


def synthetic_sequence(model, kind, duration, seed, noise_acc=0.05, noise_ori=0.005, transitions=False):
    seq = generate_motion(model, kind, duration=duration, seed=seed, transitions=transitions)
    return simulate_imus(model, seq, noise_acc=noise_acc, noise_ori=noise_ori, seed=seed + 10_000)


def open_loop_predictions(params: PredictorParams, seq: RecordedSequence, batch: int = 512):
    """Predictions at every full window with the true past states in the buffer."""
    desc = params.descriptor
    src = WindowSource([seq], desc.M, 1)
    anchors = src.anchors
    out = []
    for start in range(0, len(src), batch):
        idx = np.arange(start, min(start + batch, len(src)))
        windows, buffers = src.inputs(idx)
        pred, _ = forward(params, windows, buffers)
        out.append(pred)
    return anchors, np.concatenate(out)


def evaluate(
    model: RigidBodyModel,
    params: PredictorParams,
    seq: RecordedSequence,
    closed_loop: bool = True,
    refine: bool = True,
    joint_subset=None,
    steps=(1, 30, 60),
    epsilon: float = 1e-4,
) -> MetricsReport:
    subset = default_joint_subset(model, seq.kind) if joint_subset is None else joint_subset
    steps = tuple(t for t in steps if t <= params.descriptor.K)
    if closed_loop:
        res = run_closed_loop(Predictor(params, model, refine=refine, epsilon=epsilon), seq)
        anchors, preds = res.anchors, res.predictions
    else:
        anchors, preds = open_loop_predictions(params, seq)
    return compute_metrics(model, anchors, preds, seq, subset, steps)


# -- overfit oracle ----------------------------------------------------------------


@dataclass
class OverfitResult:
    checkpoint: Checkpoint
    report: MetricsReport
    log: list
    seconds: float


def overfit(model: RigidBodyModel, frames: int = 200, epochs: int = 500, seed: int = 0,
            closed_loop: bool = True, config: TrainConfig | None = None) -> OverfitResult:
    """Train the full-size network on one short forward-walk clip and score it on that same clip."""
    rate = 60.0
    seq = synthetic_sequence(model, "forward_walk", frames / rate, seed)
    # the step schedule spreads the usual five halvings over the longer run
    config = config or TrainConfig(epochs=epochs, lr_step_epochs=max(1, epochs // 5), seed=seed)
    t0 = time.perf_counter()
    res = train(model, [seq], config)
    rep = evaluate(model, res.checkpoint.params, seq, closed_loop=closed_loop, steps=(1,))
    return OverfitResult(res.checkpoint, rep, res.log, time.perf_counter() - t0)


# -- FK/DK loss ablation (buffer disabled, first-step predictions) -------------------


@dataclass
class AblationResult:
    seeds: list[int]
    vrmse_lin: dict[str, list[float]]  # variant -> per-seed t=1 linear vRMSE
    reports: dict[str, list[MetricsReport]]
    seconds: float

    def medians(self) -> dict[str, float]:
        return {k: float(np.median(v)) for k, v in self.vrmse_lin.items()}


def small_config(**kw) -> TrainConfig:
    """Desk-scale network and schedule used by the trend experiments."""
    base = dict(
        epochs=12, batch_size=128, lr0=2e-3, lr_step_epochs=4, K=20,
        inertial_hidden=64, buffer_hidden=64, shared_hidden=128, head_hidden=64,
    )
    base.update(kw)
    return TrainConfig(**base)


def loss_ablation(
    model: RigidBodyModel,
    seeds=(0, 1, 2, 3, 4),
    variants=("none", "fkdk"),
    config: TrainConfig | None = None,
    train_seconds: float = 30.0,
    test_seconds: float = 20.0,
    train_kinds=("side_step", "forward_walk"),
    log=print,
) -> AblationResult:
    """Train one model per (seed, variant) without the buffer; score t=1 on held-out side-stepping."""
    config = config or small_config(weights=ABLATION_WEIGHTS)
    t0 = time.perf_counter()
    vr = {v: [] for v in variants}
    reps = {v: [] for v in variants}
    for seed in seeds:
        train_set = [
            synthetic_sequence(model, kind, train_seconds, 1000 * seed + i) for i, kind in enumerate(train_kinds)
        ]
        test = synthetic_sequence(model, "side_step", test_seconds, 1000 * seed + 500)
        for v in variants:
            cfg = replace(config, seed=seed, use_buffer=False, weights=ablated_weights(config.weights, v))
            ckpt = train(model, train_set, cfg).checkpoint
            rep = evaluate(model, ckpt.params, test, closed_loop=False, steps=(1,))
            vr[v].append(rep[1]["vRMSE_lin"])
            reps[v].append(rep)
            log(f"seed {seed} {v:>5}: vRMSE_lin(t=1) {rep[1]['vRMSE_lin']:.4f} m/s")
    return AblationResult(list(seeds), vr, reps, time.perf_counter() - t0)


# -- buffer ablation on stand/walk transitions ----------------------------------


@dataclass
class BufferAblationResult:
    seeds: list[int]
    vmae: dict[str, list[float]]  # variant -> per-seed first-step vMAE (deg/s)
    seconds: float

    def medians(self) -> dict[str, float]:
        return {k: float(np.median(v)) for k, v in self.vmae.items()}


def buffer_ablation(
    model: RigidBodyModel,
    seeds=(0, 1, 2, 3, 4),
    config: TrainConfig | None = None,
    train_seconds: float = 30.0,
    test_seconds: float = 20.0,
    kind: str = "side_step",
    log=print,
) -> BufferAblationResult:
    """Refined-buffer closed loop vs the inertial-only network on a stand/walk transition sequence.

    Also reports the buffered network with the optimizer switched off.
    """
    config = config or small_config()
    t0 = time.perf_counter()
    out = {"refined_buffer": [], "unrefined_buffer": [], "no_buffer": []}
    for seed in seeds:
        train_set = [
            synthetic_sequence(model, kind, train_seconds, 1000 * seed + 1, transitions=True),
            synthetic_sequence(model, "forward_walk", train_seconds, 1000 * seed + 2, transitions=True),
        ]
        test = synthetic_sequence(model, kind, test_seconds, 1000 * seed + 600, transitions=True)
        with_buf = train(model, train_set, replace(config, seed=seed, use_buffer=True)).checkpoint
        no_buf = train(model, train_set, replace(config, seed=seed, use_buffer=False)).checkpoint
        runs = {
            "refined_buffer": (with_buf, True),
            "unrefined_buffer": (with_buf, False),
            "no_buffer": (no_buf, False),
        }
        for name, (ckpt, refine) in runs.items():
            rep = evaluate(model, ckpt.params, test, closed_loop=True, refine=refine, steps=(1,))
            out[name].append(rep[1]["vMAE"])
        log(f"seed {seed}: " + ", ".join(f"{k} {v[-1]:.2f}" for k, v in out.items()) + " deg/s")
    return BufferAblationResult(list(seeds), out, time.perf_counter() - t0)


# -- latency ----------------------------------------------------------------------


def latency_benchmark(model: RigidBodyModel, ckpt: Checkpoint, seq: RecordedSequence, refine: bool = True):
    """Per-step wall-clock seconds of the closed loop (forward + refinement + buffer push)."""
    res = run_closed_loop(Predictor(ckpt.params, model, refine=refine), seq)
    return res.step_seconds
