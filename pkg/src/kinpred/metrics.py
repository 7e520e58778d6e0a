"""Joint-space and link-space prediction errors at selected horizon steps."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .data import RecordedSequence
from .kinematics import link_frames, rotation_angle, twists_from_frames
from .model import RigidBodyModel

EVAL_STEPS = (1, 30, 60)
METRIC_NAMES = ("pMAE", "vMAE", "pRMSE", "oRMSE", "vRMSE_lin", "vRMSE_ang")
UNITS = {"pMAE": "deg", "vMAE": "deg/s", "pRMSE": "m", "oRMSE": "deg", "vRMSE_lin": "m/s", "vRMSE_ang": "deg/s"}
LOCOMOTION = ("forward_walk", "backward_walk", "side_step", "stand")


class AlignmentError(ValueError):
    pass


@dataclass
class MetricsReport:
    steps: tuple[int, ...]
    values: dict[int, dict[str, float]] = field(default_factory=dict)
    counts: dict[int, int] = field(default_factory=dict)

    def __getitem__(self, step: int) -> dict[str, float]:
        return self.values[step]

    def to_json(self) -> str:
        return json.dumps(
            {"units": UNITS, "steps": {str(t): {**self.values[t], "count": self.counts[t]} for t in self.steps}},
            indent=2,
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["t", *METRIC_NAMES, "count"])
        for t in self.steps:
            w.writerow([t, *(repr(self.values[t][k]) for k in METRIC_NAMES), self.counts[t]])
        return buf.getvalue()


def default_joint_subset(model: RigidBodyModel, kind: str) -> tuple[int, ...]:
    """Lower-body joints for locomotion kinds, all joints for whole-body tasks."""
    if kind in LOCOMOTION:
        return tuple(sorted(model.lower_joints))
    return tuple(range(model.n))


def compute_metrics(
    model: RigidBodyModel,
    anchors,
    predictions,
    reference: RecordedSequence,
    joint_subset,
    steps=EVAL_STEPS,
) -> MetricsReport:
    """Errors of K-step predictions made at timesteps ``anchors`` against ``reference``.

    Step t compares prediction index t-1 with frame anchor + t - 1; pairs
    running past the end of the reference are skipped. Link quantities come
    from FK/DK of the predicted joint states with the reference base motion.
    """
    anchors = np.asarray(anchors, dtype=int)
    predictions = np.asarray(predictions, dtype=float)
    subset = list(joint_subset)
    if not subset:
        raise ValueError("empty joint subset")
    if predictions.ndim != 4 or predictions.shape[0] != anchors.shape[0] or predictions.shape[2:] != (2, model.n):
        raise AlignmentError(f"predictions {predictions.shape} do not align with {anchors.shape[0]} anchors")
    T = len(reference)
    if anchors.size and (anchors.min() < 0 or anchors.max() >= T):
        raise AlignmentError("anchor outside reference sequence")
    K = predictions.shape[1]
    links = list(reference.links)
    report = MetricsReport(tuple(steps))
    for t in steps:
        if not 1 <= t <= K:
            raise ValueError(f"step {t} outside horizon 1..{K}")
        frame = anchors + t - 1
        ok = frame < T
        if not np.any(ok):
            raise AlignmentError(f"no prediction reaches step {t} within the reference")
        fr_idx = frame[ok]
        pred = predictions[ok, t - 1]
        s_hat, sd_hat = pred[:, 0], pred[:, 1]
        perr = np.abs(s_hat[:, subset] - reference.s[fr_idx][:, subset])
        verr = np.abs(sd_hat[:, subset] - reference.sdot[fr_idx][:, subset])
        fr = link_frames(model, reference.base_pos[fr_idx], reference.base_rot[fr_idx], s_hat)
        dp = fr.link_pos[:, links] - reference.link_pos[fr_idx]
        ang = rotation_angle(fr.link_rot[:, links], reference.link_rot[fr_idx])
        tw = twists_from_frames(model, fr, links, reference.base_lin[fr_idx], reference.base_ang[fr_idx], sd_hat)
        dv = tw - reference.link_twist[fr_idx]
        report.values[t] = {
            "pMAE": float(np.degrees(perr.mean())),
            "vMAE": float(np.degrees(verr.mean())),
            "pRMSE": float(np.sqrt(np.mean(np.sum(dp**2, axis=-1)))),
            "oRMSE": float(np.degrees(np.sqrt(np.mean(ang**2)))),
            "vRMSE_lin": float(np.sqrt(np.mean(np.sum(dv[..., :3] ** 2, axis=-1)))),
            "vRMSE_ang": float(np.degrees(np.sqrt(np.mean(np.sum(dv[..., 3:] ** 2, axis=-1))))),
        }
        report.counts[t] = int(ok.sum())
    return report


def merge_reports(reports: list[MetricsReport]) -> MetricsReport:
    """Pool reports over several sequences: MAEs as count-weighted means, RMSEs via mean squares."""
    if not reports:
        raise ValueError("no reports to merge")
    steps = reports[0].steps
    out = MetricsReport(steps)
    for t in steps:
        counts = np.array([r.counts[t] for r in reports], dtype=float)
        total = counts.sum()
        vals = {}
        for name in METRIC_NAMES:
            x = np.array([r.values[t][name] for r in reports])
            if name.endswith("MAE"):
                vals[name] = float(counts @ x / total)
            else:
                vals[name] = float(np.sqrt(counts @ x**2 / total))
        out.values[t] = vals
        out.counts[t] = int(total)
    return out
