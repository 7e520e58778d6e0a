"""Windowing, Adam with a step learning-rate schedule, and the training loop."""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .data import RecordedSequence
from .losses import LinkReferenceWindow, LossWeights, loss_terms, total_loss
from .model import RigidBodyModel
from .network import (
    Checkpoint,
    Descriptor,
    Normalization,
    PredictorParams,
    backward,
    forward,
    init_params,
)

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "lr", "L_pos", "L_vel", "L_FK", "L_DK", "L_total", "val_total")


class TrajectoryTooShortError(ValueError):
    pass


class NumericalError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 256
    lr0: float = 1e-3
    lr_step_epochs: int = 5
    lr_gamma: float = 0.5
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    M: int = 10
    K: int = 60
    stride: int = 1
    inertial_hidden: int = 256
    buffer_hidden: int = 256
    shared_hidden: int = 512
    head_hidden: int = 256
    use_buffer: bool = True

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        elif isinstance(self.weights, (list, tuple)):
            self.weights = LossWeights(*self.weights)
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1 or self.lr_step_epochs < 1 or self.stride < 1:
            raise ValueError("batch_size, lr_step_epochs and stride must be >= 1")
        if not self.lr0 > 0:
            raise ValueError("lr0 must be positive")
        if not 0 < self.lr_gamma <= 1:
            raise ValueError("lr_gamma must be in (0, 1]")

    def descriptor(self, model: RigidBodyModel) -> Descriptor:
        return Descriptor.for_model(
            model,
            M=self.M,
            N=model.D,
            K=self.K,
            inertial_hidden=self.inertial_hidden,
            buffer_hidden=self.buffer_hidden,
            shared_hidden=self.shared_hidden,
            head_hidden=self.head_hidden,
            use_buffer=self.use_buffer,
        )

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class TrainingSample:
    window: np.ndarray  # (M, N, F)
    buffer: np.ndarray  # (M-1, 2, n), ground truth
    target: np.ndarray  # (K, 2, n)
    link_refs: LinkReferenceWindow
    anchor: int  # current timestep m


class WindowSource:
    """All valid (m-M+1 .. m+K-1) windows of one or more sequences, gathered by index."""

    def __init__(self, sequences: Sequence[RecordedSequence], M: int, K: int, stride: int = 1):
        if not sequences:
            raise ValueError("no sequences")
        self.M, self.K = M, K
        self.links = tuple(sequences[0].links)
        anchors, offset = [], 0
        for seq in sequences:
            T = len(seq)
            if T < M + K:
                raise TrajectoryTooShortError(f"sequence of {T} frames is shorter than M+K = {M + K}")
            # L - M - K + 1 windows per sequence of length L: a sequence of exactly M + K
            # frames gives one
            anchors.append(offset + np.arange(M - 1, T - K, stride))
            offset += T
        self.anchors = np.concatenate(anchors)
        cat = lambda name: np.concatenate([getattr(s, name) for s in sequences])  # noqa: E731
        self.imu = np.concatenate([s.imu_features for s in sequences])
        self.states = np.stack([cat("s"), cat("sdot")], axis=1)  # (T, 2, n)
        self.link_pos, self.link_rot, self.link_twist = cat("link_pos"), cat("link_rot"), cat("link_twist")
        self.base_pos, self.base_rot = cat("base_pos"), cat("base_rot")
        self.base_twist = np.concatenate([cat("base_lin"), cat("base_ang")], axis=-1)

    def __len__(self) -> int:
        return self.anchors.size

    def inputs(self, idx):
        m = self.anchors[np.asarray(idx)]
        past = m[:, None] + np.arange(-self.M + 1, 1)
        return self.imu[past], self.states[past[:, :-1]]

    def batch(self, idx):
        m = self.anchors[np.asarray(idx)]
        windows, buffers = self.inputs(idx)
        fut = m[:, None] + np.arange(self.K)
        refs = LinkReferenceWindow(
            links=self.links,
            link_pos=self.link_pos[fut],
            link_rot=self.link_rot[fut],
            link_twist=self.link_twist[fut],
            base_pos=self.base_pos[fut],
            base_rot=self.base_rot[fut],
            base_twist=self.base_twist[fut],
        )
        return windows, buffers, self.states[fut], refs


def make_windows(trajectory: RecordedSequence, config: TrainConfig) -> list[TrainingSample]:
    src = WindowSource([trajectory], config.M, config.K, config.stride)
    out = []
    for i in range(len(src)):
        w, b, y, r = src.batch([i])
        refs = LinkReferenceWindow(
            r.links, r.link_pos[0], r.link_rot[0], r.link_twist[0], r.base_pos[0], r.base_rot[0], r.base_twist[0]
        )
        out.append(TrainingSample(w[0], b[0], y[0], refs, int(src.anchors[i])))
    return out


# -- optimizer -------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, params: PredictorParams) -> "AdamState":
        flat = params.flat()
        return cls({k: np.zeros_like(a) for k, a in flat.items()}, {k: np.zeros_like(a) for k, a in flat.items()})


def adam_step(params: PredictorParams, grads: PredictorParams, state: AdamState, lr: float):
    """In-place bias-corrected Adam update; bumps ``params.version``."""
    p_flat, g_flat = params.flat(), grads.flat()
    if p_flat.keys() != g_flat.keys():
        raise ValueError("gradient layers do not match parameters")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for k, p in p_flat.items():
        g = g_flat[k]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {k}")
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    params.version += 1
    return params, state


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    return config.lr0 * config.lr_gamma ** (epoch // config.lr_step_epochs)


# -- training loop ---------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[dict]


def batch_loss(model, params, weights: LossWeights, windows, buffers, targets, refs, backprop=True):
    pred, cache = forward(params, windows, buffers)
    terms = loss_terms(model, pred, targets, refs, need_fk=weights.fk > 0, need_dk=weights.dk > 0)
    value, grad = total_loss(weights, terms)
    grads = backward(params, cache, grad)[0] if backprop else None
    return value, terms.values, grads


def evaluate_loss(model, params, source: WindowSource, weights: LossWeights, batch_size: int = 256) -> float:
    """Sample-weighted mean total loss over every window of ``source``."""
    total = 0.0
    for start in range(0, len(source), batch_size):
        idx = np.arange(start, min(start + batch_size, len(source)))
        value, _, _ = batch_loss(model, params, weights, *source.batch(idx), backprop=False)
        total += value * idx.size
    return total / len(source)


def fit_normalization(source: WindowSource) -> Normalization:
    windows, buffers = source.inputs(np.arange(len(source)))
    return Normalization.fit(windows, buffers)


def train(
    model: RigidBodyModel,
    dataset: Sequence[RecordedSequence],
    config: TrainConfig,
    val_dataset: Sequence[RecordedSequence] | None = None,
) -> TrainResult:
    source = WindowSource(dataset, config.M, config.K, config.stride)
    val_source = WindowSource(val_dataset, config.M, config.K, config.stride) if val_dataset else None
    desc = config.descriptor(model)
    params = init_params(desc, config.seed, n=model.n)
    params.norm = fit_normalization(source)
    state = AdamState.zeros(params)
    rng = np.random.default_rng(config.seed + 1)
    weights = config.weights
    rows = []
    for epoch in range(config.epochs):
        lr = lr_at_epoch(config, epoch)
        perm = rng.permutation(len(source))
        sums = np.zeros(5)
        for b, start in enumerate(range(0, len(perm), config.batch_size)):
            idx = perm[start:start + config.batch_size]
            value, comps, grads = batch_loss(model, params, weights, *source.batch(idx))
            if not np.isfinite(value) or not np.all(np.isfinite(comps)):
                raise NumericalError(
                    f"non-finite loss at epoch {epoch}, batch {b} (first sample anchors "
                    f"{source.anchors[idx[:5]].tolist()}): L_pos={comps[0]}, L_vel={comps[1]}, "
                    f"L_FK={comps[2]}, L_DK={comps[3]}"
                )
            adam_step(params, grads, state, lr)
            sums += np.append(comps, value) * idx.size
        means = sums / len(source)
        row = dict(zip(LOG_COLUMNS[2:7], means.tolist()))
        row.update(epoch=epoch, lr=lr)
        row["val_total"] = evaluate_loss(model, params, val_source, weights) if val_source else float("nan")
        rows.append(row)
        log.info("epoch %d lr %.2e total %.5f val %.5f", epoch, lr, row["L_total"], row["val_total"])
    ckpt = Checkpoint(params, model.hash(), config.to_json())
    return TrainResult(ckpt, rows)


def write_loss_log(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        w.writeheader()
        for row in rows:
            w.writerow({k: row[k] for k in LOG_COLUMNS})
