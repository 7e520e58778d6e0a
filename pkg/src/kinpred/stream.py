"""Per-timestep record streams for online prediction.

Input is either a dataset file (see :mod:`kinpred.data`) or JSON lines, one
object per timestep::

    {"t": 0.0167,                      # optional timestamp, seconds
     "imu_acc": [[ax, ay, az], ...],   # D rows, sensor frame
     "imu_ori": [[r00, ..., r22], ...],# D rows, row-major sensor-to-inertial
     "base_pos": [x, y, z], "base_rot": [[...], [...], [...]],
     "base_twist": [vx, vy, vz, wx, wy, wz],
     "link_twist": [[vx, vy, vz, wx, wy, wz], ...],   # D rows
     "s": [...], "sdot": [...]}       # required on the first M-1 records only

The first M-1 records seed the joint-state buffer; every later record yields
one output record.
"""
from __future__ import annotations

import csv
import io
import json
import tempfile
from dataclasses import dataclass
from typing import IO, Iterable, Iterator

import numpy as np

from .data import DATASET_MAGIC, RecordedSequence, read_dataset
from .inference import Predictor, StepInput, init_buffer, step


class StreamRecordError(ValueError):
    def __init__(self, index: int, message: str):
        super().__init__(f"record {index}: {message}")
        self.index = index


@dataclass
class StreamRecord:
    t: float
    imu: np.ndarray  # (D, 12)
    base_pos: np.ndarray
    base_rot: np.ndarray
    base_twist: np.ndarray
    link_twist: np.ndarray  # (D, 6)
    state: np.ndarray | None = None  # (2, n) if present


def _array(obj: dict, key: str, shape, index: int, required: bool = True):
    if key not in obj:
        if required:
            raise StreamRecordError(index, f"missing field {key!r}")
        return None
    try:
        a = np.asarray(obj[key], dtype=float)
    except (TypeError, ValueError) as exc:
        raise StreamRecordError(index, f"field {key!r} is not numeric") from exc
    if a.size == int(np.prod(shape)) and a.shape != tuple(shape) and key in ("base_rot",):
        a = a.reshape(shape)
    if a.shape != tuple(shape):
        raise StreamRecordError(index, f"field {key!r} has shape {a.shape}, expected {tuple(shape)}")
    if not np.all(np.isfinite(a)):
        raise StreamRecordError(index, f"field {key!r} contains NaN or inf")
    return a


def parse_record(obj, index: int, D: int, n: int, rate: float = 60.0) -> StreamRecord:
    if not isinstance(obj, dict):
        raise StreamRecordError(index, "record is not a JSON object")
    acc = obj.get("imu_acc")
    if acc is None or np.ndim(acc) < 1 or len(acc) != D:
        got = "none" if acc is None else (len(acc) if np.ndim(acc) >= 1 else "scalar")
        raise StreamRecordError(index, f"expected {D} IMU readings, got {got}")
    acc = _array(obj, "imu_acc", (D, 3), index)
    ori = _array(obj, "imu_ori", (D, 9), index)
    s = _array(obj, "s", (n,), index, required=False)
    sd = _array(obj, "sdot", (n,), index, required=False)
    state = None if s is None or sd is None else np.stack([s, sd])
    return StreamRecord(
        t=float(obj.get("t", index / rate)),
        imu=np.concatenate([acc, ori], axis=-1),
        base_pos=_array(obj, "base_pos", (3,), index),
        base_rot=_array(obj, "base_rot", (3, 3), index),
        base_twist=_array(obj, "base_twist", (6,), index),
        link_twist=_array(obj, "link_twist", (D, 6), index),
        state=state,
    )


def sequence_records(seq: RecordedSequence) -> Iterator[StreamRecord]:
    imu = seq.imu_features
    twist = seq.base_twist
    for i in range(len(seq)):
        yield StreamRecord(
            i / seq.rate, imu[i], seq.base_pos[i], seq.base_rot[i], twist[i], seq.link_twist[i],
            np.stack([seq.s[i], seq.sdot[i]]),
        )


def record_to_json(rec: StreamRecord) -> str:
    return json.dumps({
        "t": rec.t,
        "imu_acc": rec.imu[:, :3].tolist(),
        "imu_ori": rec.imu[:, 3:].tolist(),
        "base_pos": rec.base_pos.tolist(),
        "base_rot": rec.base_rot.tolist(),
        "base_twist": rec.base_twist.tolist(),
        "link_twist": rec.link_twist.tolist(),
        **({} if rec.state is None else {"s": rec.state[0].tolist(), "sdot": rec.state[1].tolist()}),
    })


def read_records(fh: IO[bytes], D: int, n: int) -> Iterator[StreamRecord]:
    """Records from a binary handle holding either a dataset file or JSON lines."""
    head = fh.peek(len(DATASET_MAGIC))[: len(DATASET_MAGIC)] if hasattr(fh, "peek") else b""
    if head == DATASET_MAGIC:
        # the container reader validates lengths and checksums on a whole file
        with tempfile.NamedTemporaryFile(suffix=".kpd") as tmp:
            tmp.write(fh.read())
            tmp.flush()
            yield from sequence_records(read_dataset(tmp.name))
        return
    for index, line in enumerate(io.TextIOWrapper(fh, encoding="utf-8")):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise StreamRecordError(index, f"invalid JSON ({exc.msg})") from exc
        yield parse_record(obj, index, D, n)


def predict_stream(predictor: Predictor, records: Iterable[StreamRecord]) -> Iterator[tuple[int, float, np.ndarray]]:
    """Yield (record index, timestamp, K-step prediction) for every record after the seed."""
    M = predictor.M
    window: list[np.ndarray] = []
    seed: list[np.ndarray] = []
    buffer = None
    for index, rec in enumerate(records):
        window.append(rec.imu)
        if len(window) > M:
            window.pop(0)
        if buffer is None:
            if rec.state is None:
                raise StreamRecordError(index, f"the first {M - 1} records must carry s and sdot")
            seed.append(rec.state)
            if len(seed) == M - 1:
                buffer = init_buffer(seed, M)
            continue
        inp = StepInput(np.stack(window), rec.base_pos, rec.base_rot, rec.base_twist, rec.link_twist)
        pred, _ = step(predictor, buffer, inp)
        yield index, rec.t, pred


def output_fields(n: int, ahead: int | None) -> list[str]:
    cols = ["index", "t"] + [f"s_{j}" for j in range(n)] + [f"sdot_{j}" for j in range(n)]
    if ahead is not None:
        cols += [f"s_ahead_{j}" for j in range(n)] + [f"sdot_ahead_{j}" for j in range(n)]
    return cols


class PredictionWriter:
    """Writes refined first steps (and optionally the state ``ahead`` frames later) as JSON lines or CSV."""

    def __init__(self, fh: IO[str], n: int, fmt: str = "jsonl", ahead: int | None = None, horizon_stride: int = 0):
        if fmt not in ("jsonl", "csv"):
            raise ValueError(f"unknown output format {fmt!r}")
        self.fh, self.n, self.fmt, self.ahead, self.stride = fh, n, fmt, ahead, horizon_stride
        self.count = 0
        if fmt == "csv":
            self._csv = csv.writer(fh)
            self._csv.writerow(output_fields(n, ahead))

    def write(self, index: int, t: float, pred: np.ndarray) -> None:
        first = pred[0]
        if self.fmt == "csv":
            row = [index, repr(t), *map(repr, first[0]), *map(repr, first[1])]
            if self.ahead is not None:
                row += [*map(repr, pred[self.ahead, 0]), *map(repr, pred[self.ahead, 1])]
            self._csv.writerow(row)
        else:
            out = {"index": index, "t": t, "s": first[0].tolist(), "sdot": first[1].tolist()}
            if self.ahead is not None:
                out["ahead"] = self.ahead
                out["s_ahead"] = pred[self.ahead, 0].tolist()
                out["sdot_ahead"] = pred[self.ahead, 1].tolist()
            if self.stride:
                out["horizon"] = pred[:: self.stride].tolist()
            self.fh.write(json.dumps(out) + "\n")
        self.count += 1

