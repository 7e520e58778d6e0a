"""Dual-branch fully connected predictor with hand-written backprop.

Topology::

    inertial window (M*N*F) --FC+elu--> Hi --+
                                              +--concat--FC+elu--FC+elu--+--upper head--> K*2*n_upper
    joint buffer ((M-1)*2*n) --FC+elu--> Hb --+                          +--lower head--> K*2*n_lower

Each head is FC+elu followed by an affine output layer. Head outputs are
scattered back to joint order through the model's upper/lower partition.

Parameter count for widths (Hi, Hb, Hs, Hh), input I = M*N*F, buffer B = (M-1)*2*n::

    (I+1)*Hi + (B+1)*Hb + (Hi+Hb+1)*Hs + (Hs+1)*Hs
      + sum over non-empty heads of (Hs+1)*Hh + (Hh+1)*K*2*n_head

With ``use_buffer=False`` the buffer branch is dropped and Hb counts as 0.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .container import read_container, write_container

CHECKPOINT_MAGIC = b"KPCKPT\0\0"


class ShapeError(ValueError):
    pass


class StaleCacheError(RuntimeError):
    pass


@dataclass(frozen=True)
class Descriptor:
    upper_joints: tuple[int, ...]
    lower_joints: tuple[int, ...]
    M: int = 10
    N: int = 5
    F: int = 12
    K: int = 60
    inertial_hidden: int = 256
    buffer_hidden: int = 256
    shared_hidden: int = 512
    head_hidden: int = 256
    use_buffer: bool = True

    def __post_init__(self):
        object.__setattr__(self, "upper_joints", tuple(int(i) for i in self.upper_joints))
        object.__setattr__(self, "lower_joints", tuple(int(i) for i in self.lower_joints))
        joints = self.upper_joints + self.lower_joints
        if sorted(joints) != list(range(len(joints))):
            raise ShapeError("upper/lower joints must partition 0..n-1")
        if min(self.M, self.N, self.F, self.K) < 1 or self.M < 2:
            raise ShapeError("M >= 2 and N, F, K >= 1 required")
        for w in (self.inertial_hidden, self.shared_hidden, self.head_hidden):
            if w < 1:
                raise ShapeError("layer widths must be positive")
        if self.use_buffer and self.buffer_hidden < 1:
            raise ShapeError("buffer_hidden must be positive when the buffer branch is used")

    @property
    def n(self) -> int:
        return len(self.upper_joints) + len(self.lower_joints)

    @classmethod
    def for_model(cls, model, **kw) -> "Descriptor":
        return cls(upper_joints=model.upper_joints, lower_joints=model.lower_joints, **kw)

    def heads(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(name, idx) for name, idx in (("upper", self.upper_joints), ("lower", self.lower_joints)) if idx]

    def layer_shapes(self) -> dict[str, tuple[int, int]]:
        """(out, in) per layer, in initialization order."""
        hb = self.buffer_hidden if self.use_buffer else 0
        shapes = {"inertial": (self.inertial_hidden, self.M * self.N * self.F)}
        if self.use_buffer:
            shapes["buffer"] = (hb, (self.M - 1) * 2 * self.n)
        shapes["shared1"] = (self.shared_hidden, self.inertial_hidden + hb)
        shapes["shared2"] = (self.shared_hidden, self.shared_hidden)
        for name, idx in self.heads():
            shapes[f"{name}1"] = (self.head_hidden, self.shared_hidden)
            shapes[f"{name}2"] = (self.K * 2 * len(idx), self.head_hidden)
        return shapes

    def param_count(self) -> int:
        return sum(o * i + o for o, i in self.layer_shapes().values())

    def to_json(self) -> dict:
        d = asdict(self)
        d["upper_joints"] = list(self.upper_joints)
        d["lower_joints"] = list(self.lower_joints)
        return d


@dataclass
class Normalization:
    inertial_mean: np.ndarray  # (N, F)
    inertial_std: np.ndarray
    buffer_mean: np.ndarray  # (2, n)
    buffer_std: np.ndarray

    @classmethod
    def identity(cls, desc: Descriptor) -> "Normalization":
        return cls(np.zeros((desc.N, desc.F)), np.ones((desc.N, desc.F)), np.zeros((2, desc.n)), np.ones((2, desc.n)))

    @classmethod
    def fit(cls, windows: np.ndarray, buffers: np.ndarray, floor: float = 0.05) -> "Normalization":
        """Per-feature statistics over all samples and timesteps.

        The std is floored (rad, rad/s, m/s^2 and rotation entries alike): a
        feature that barely moves in training, such as a pelvis rotation entry
        at a fixed heading, would otherwise blow small test-time offsets up by
        orders of magnitude.
        """
        def stats(x):
            mu = x.mean(axis=(0, 1))
            sd = x.std(axis=(0, 1))
            return mu, np.maximum(sd, floor)

        im, isd = stats(windows)
        bm, bsd = stats(buffers)
        return cls(im, isd, bm, bsd)


@dataclass
class PredictorParams:
    descriptor: Descriptor
    weights: dict[str, np.ndarray]
    biases: dict[str, np.ndarray]
    norm: Normalization
    version: int = field(default=0, compare=False)

    def copy(self) -> "PredictorParams":
        return PredictorParams(
            self.descriptor,
            {k: v.copy() for k, v in self.weights.items()},
            {k: v.copy() for k, v in self.biases.items()},
            Normalization(*(np.array(a, copy=True) for a in asdict_arrays(self.norm))),
            self.version,
        )

    def astype(self, dtype) -> "PredictorParams":
        """Copy with every array cast; :func:`forward` computes in the weights' dtype."""
        return PredictorParams(
            self.descriptor,
            {k: v.astype(dtype) for k, v in self.weights.items()},
            {k: v.astype(dtype) for k, v in self.biases.items()},
            Normalization(*(np.asarray(a).astype(dtype) for a in asdict_arrays(self.norm))),
            self.version,
        )

    def flat(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.weights:
            out[f"W_{k}"] = self.weights[k]
            out[f"b_{k}"] = self.biases[k]
        return out

    def count(self) -> int:
        return sum(v.size for v in self.flat().values())


def asdict_arrays(norm: Normalization):
    return norm.inertial_mean, norm.inertial_std, norm.buffer_mean, norm.buffer_std


def elu(x):
    x = np.asarray(x)
    if x.dtype.kind != "f":
        x = x.astype(float)
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def elu_prime(x):
    x = np.asarray(x, dtype=float)
    return np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0)))


def init_params(desc: Descriptor, seed: int, n: int | None = None) -> PredictorParams:
    if n is not None and n != desc.n:
        raise ShapeError(f"descriptor covers {desc.n} joints, model has {n}")
    rng = np.random.default_rng(seed)
    weights, biases = {}, {}
    for name, (out_dim, in_dim) in desc.layer_shapes().items():
        bound = np.sqrt(1.0 / in_dim)
        weights[name] = rng.uniform(-bound, bound, size=(out_dim, in_dim))
        biases[name] = np.zeros(out_dim)
    return PredictorParams(desc, weights, biases, Normalization.identity(desc))


def zeros_like_params(params: PredictorParams) -> PredictorParams:
    return PredictorParams(
        params.descriptor,
        {k: np.zeros_like(v) for k, v in params.weights.items()},
        {k: np.zeros_like(v) for k, v in params.biases.items()},
        params.norm,
    )


@dataclass
class ActivationCache:
    params_id: int
    params_version: int
    batched: bool
    batch: int
    acts: dict[str, np.ndarray]


def forward(params: PredictorParams, window, buffer=None):
    """Predict (K, 2, n) joint states; a leading batch axis is optional."""
    desc = params.descriptor
    dtype = params.weights["inertial"].dtype
    window = np.asarray(window, dtype=dtype)
    batched = window.ndim == 4
    if not batched:
        window = window[None]
    if window.shape[1:] != (desc.M, desc.N, desc.F):
        raise ShapeError(f"window shape {window.shape[1:]} != {(desc.M, desc.N, desc.F)}")
    B = window.shape[0]
    nrm = params.norm
    W, b = params.weights, params.biases
    acts: dict[str, np.ndarray] = {}
    x_in = ((window - nrm.inertial_mean) / nrm.inertial_std).reshape(B, -1)
    acts["x_inertial"] = x_in
    z = x_in @ W["inertial"].T + b["inertial"]
    acts["z_inertial"] = z
    h = elu(z)
    if desc.use_buffer:
        if buffer is None:
            raise ShapeError("buffer input required by this descriptor")
        buffer = np.asarray(buffer, dtype=dtype)
        if not batched:
            buffer = buffer[None]
        if buffer.shape != (B, desc.M - 1, 2, desc.n):
            raise ShapeError(f"buffer shape {buffer.shape} != {(B, desc.M - 1, 2, desc.n)}")
        x_b = ((buffer - nrm.buffer_mean) / nrm.buffer_std).reshape(B, -1)
        acts["x_buffer"] = x_b
        zb = x_b @ W["buffer"].T + b["buffer"]
        acts["z_buffer"] = zb
        h = np.concatenate([h, elu(zb)], axis=1)
    acts["h_concat"] = h
    z1 = h @ W["shared1"].T + b["shared1"]
    acts["z_shared1"] = z1
    h1 = elu(z1)
    acts["h_shared1"] = h1
    z2 = h1 @ W["shared2"].T + b["shared2"]
    acts["z_shared2"] = z2
    h2 = elu(z2)
    acts["h_shared2"] = h2
    pred = np.zeros((B, desc.K, 2, desc.n), dtype=dtype)
    for name, idx in desc.heads():
        zh = h2 @ W[f"{name}1"].T + b[f"{name}1"]
        acts[f"z_{name}1"] = zh
        hh = elu(zh)
        acts[f"h_{name}1"] = hh
        y = hh @ W[f"{name}2"].T + b[f"{name}2"]
        pred[:, :, :, list(idx)] = y.reshape(B, desc.K, 2, len(idx))
    cache = ActivationCache(id(params), params.version, batched, B, acts)
    return (pred if batched else pred[0]), cache


def backward(params: PredictorParams, cache: ActivationCache, cotangent):
    """Gradients of <cotangent, forward output> w.r.t. every parameter and the raw buffer input."""
    if cache.params_id != id(params) or cache.params_version != params.version:
        raise StaleCacheError("activation cache does not belong to these parameters (or they changed)")
    desc = params.descriptor
    g = np.asarray(cotangent, dtype=float)
    if not cache.batched:
        g = g[None]
    if g.shape != (cache.batch, desc.K, 2, desc.n):
        raise ShapeError(f"cotangent shape {g.shape} does not match cached forward")
    A, W = cache.acts, params.weights
    gW, gb = {}, {}
    gh2 = np.zeros_like(A["h_shared2"])
    for name, idx in desc.heads():
        gy = g[:, :, :, list(idx)].reshape(cache.batch, -1)
        gW[f"{name}2"] = gy.T @ A[f"h_{name}1"]
        gb[f"{name}2"] = gy.sum(axis=0)
        gz = (gy @ W[f"{name}2"]) * elu_prime(A[f"z_{name}1"])
        gW[f"{name}1"] = gz.T @ A["h_shared2"]
        gb[f"{name}1"] = gz.sum(axis=0)
        gh2 += gz @ W[f"{name}1"]
    gz2 = gh2 * elu_prime(A["z_shared2"])
    gW["shared2"] = gz2.T @ A["h_shared1"]
    gb["shared2"] = gz2.sum(axis=0)
    gz1 = (gz2 @ W["shared2"]) * elu_prime(A["z_shared1"])
    gW["shared1"] = gz1.T @ A["h_concat"]
    gb["shared1"] = gz1.sum(axis=0)
    gc = gz1 @ W["shared1"]
    hi = desc.inertial_hidden
    gzi = gc[:, :hi] * elu_prime(A["z_inertial"])
    gW["inertial"] = gzi.T @ A["x_inertial"]
    gb["inertial"] = gzi.sum(axis=0)
    g_buffer = None
    if desc.use_buffer:
        gzb = gc[:, hi:] * elu_prime(A["z_buffer"])
        gW["buffer"] = gzb.T @ A["x_buffer"]
        gb["buffer"] = gzb.sum(axis=0)
        g_buffer = (gzb @ W["buffer"]).reshape(cache.batch, desc.M - 1, 2, desc.n) / params.norm.buffer_std
        if not cache.batched:
            g_buffer = g_buffer[0]
    grads = PredictorParams(desc, gW, gb, params.norm)
    return grads, g_buffer


# -- checkpoints ---------------------------------------------------------------


@dataclass
class Checkpoint:
    params: PredictorParams
    model_hash: str = ""
    config: dict = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()[:16]


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    p = ckpt.params
    arrays = dict(p.flat())
    arrays.update(
        norm_inertial_mean=p.norm.inertial_mean,
        norm_inertial_std=p.norm.inertial_std,
        norm_buffer_mean=p.norm.buffer_mean,
        norm_buffer_std=p.norm.buffer_std,
    )
    meta = {
        "kind": "checkpoint",
        "descriptor": p.descriptor.to_json(),
        "model_hash": ckpt.model_hash,
        "config": ckpt.config,
        "config_hash": ckpt.config_hash,
    }
    write_container(path, CHECKPOINT_MAGIC, meta, arrays)


def load_checkpoint(path) -> Checkpoint:
    meta, arrays = read_container(path, CHECKPOINT_MAGIC)
    desc = Descriptor(**meta["descriptor"])
    names = desc.layer_shapes()
    weights = {k: arrays[f"W_{k}"] for k in names}
    biases = {k: arrays[f"b_{k}"] for k in names}
    norm = Normalization(
        arrays["norm_inertial_mean"], arrays["norm_inertial_std"], arrays["norm_buffer_mean"], arrays["norm_buffer_std"]
    )
    return Checkpoint(PredictorParams(desc, weights, biases, norm), meta.get("model_hash", ""), meta.get("config", {}))
