"""Turn-level reward network r(s, a) with hand-written backprop, AdamW and checkpoints.

The network is a plain MLP over concatenated state/action features, kept
in float64 so finite-difference gradient checks are meaningful.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import losses as L
from .traj import Step, Trajectory

LOSS_IDS = ("GE", "RRD", "LI", "GELI", "RUDDER_RETURN", "IRCR")

_ACTIVATIONS = {
    "tanh": (np.tanh, lambda z, a: 1.0 - a * a),
    "relu": (lambda z: np.maximum(z, 0.0), lambda z, a: (z > 0).astype(np.float64)),
}


class NumericalError(ArithmeticError):
    """Non-finite values where finite ones are required."""


@dataclass
class RewardNetParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"layer {i}: weight {w.shape} and bias {b.shape} do not compose")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ValueError(f"layer {i} input {w.shape[0]} != previous output "
                                 f"{self.weights[i - 1].shape[1]}")
        if self.weights[-1].shape[1] != 1:
            raise ValueError("final layer must have a single output")

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def feature_dim(self) -> int:
        return self.input_dim // 2

    def tensors(self) -> list[np.ndarray]:
        """Parameters in canonical order ``W0, b0, W1, b1, ...``."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def tensor_names(self) -> list[str]:
        names = []
        for i in range(len(self.weights)):
            names += [f"W{i}", f"b{i}"]
        return names

    @classmethod
    def from_tensors(cls, tensors: Sequence[np.ndarray], activation: str) -> "RewardNetParams":
        return cls([np.array(t, dtype=np.float64) for t in tensors[0::2]],
                   [np.array(t, dtype=np.float64) for t in tensors[1::2]], activation)

    def copy(self) -> "RewardNetParams":
        return RewardNetParams.from_tensors(self.tensors(), self.activation)

    def zeros_like(self) -> "RewardNetParams":
        return RewardNetParams.from_tensors([np.zeros_like(t) for t in self.tensors()],
                                            self.activation)

    # duck-typed predictor interface shared with baselines
    def step_rewards(self, traj: Trajectory) -> np.ndarray:
        return predict(self, traj.joint)


def init_params(feature_dim: int, hidden: Sequence[int] = (64, 64), activation: str = "tanh",
                seed: int = 0, zero_output: bool = False) -> RewardNetParams:
    """Glorot-uniform weights, zero biases. Input is state and action features side by side.

    ``zero_output`` zeroes the final layer so the untrained network predicts 0
    everywhere; with small per-step reward scales this avoids spending most
    of training unlearning a random O(1) initial function.
    """
    rng = np.random.default_rng(seed)
    sizes = [2 * feature_dim, *hidden, 1]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    if zero_output:
        weights[-1][:] = 0.0
    return RewardNetParams(weights, biases, activation)


def _forward(params: RewardNetParams, X: np.ndarray):
    act, _ = _ACTIVATIONS[params.activation]
    h = X
    cache = [(None, X)]
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w + b
        h = z if i == last else act(z)
        cache.append((z, h))
    return h[:, 0], cache


def _backward(params: RewardNetParams, cache, dout: np.ndarray) -> RewardNetParams:
    _, dact = _ACTIVATIONS[params.activation]
    n_layers = len(params.weights)
    gw, gb = [None] * n_layers, [None] * n_layers
    delta = dout.reshape(-1, 1)
    for i in reversed(range(n_layers)):
        z, h = cache[i + 1]
        if i != n_layers - 1:
            delta = delta * dact(z, h)
        h_in = cache[i][1]
        gw[i] = h_in.T @ delta
        gb[i] = delta.sum(axis=0)
        if i:
            delta = delta @ params.weights[i].T
    return RewardNetParams(gw, gb, params.activation)


def predict(params: RewardNetParams, X: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != params.input_dim:
        raise ValueError(f"input has {X.shape[1]} features, network expects {params.input_dim}")
    return _forward(params, X)[0]


def reward_forward(params: RewardNetParams, step: Step) -> float:
    """Scalar reward for one (state, action) step."""
    if 2 * step.dim != params.input_dim:
        raise ValueError(f"step feature dimension {step.dim} does not match network "
                         f"input {params.input_dim} (= 2 x feature dim)")
    return float(predict(params, step.joint_features)[0])


def _split(values: np.ndarray, lengths: Sequence[int]) -> list[np.ndarray]:
    return np.split(values, np.cumsum(lengths)[:-1])


def _labeled(batch: Sequence[Trajectory]):
    """Flat positions (into the concatenated step array) and labels of labeled steps."""
    pos, labels, offset = [], [], 0
    for traj in batch:
        for t, step in enumerate(traj.steps):
            if step.mm_label is not None:
                pos.append(offset + t)
                labels.append(step.mm_label)
        offset += len(traj)
    return np.array(pos, dtype=np.int64), labels


def loss_gradient(params: RewardNetParams, batch: Sequence[Trajectory], loss_id: str,
                  cfg: L.GeliConfig | None = None, *, draw: int = 0,
                  step_targets: Sequence[np.ndarray] | None = None
                  ) -> tuple[float, RewardNetParams]:
    """Loss value and its exact gradient with respect to every parameter.

    ``draw`` selects the RRD index subsets (fresh per optimizer step);
    ``step_targets`` holds per-step regression targets for ``IRCR``.
    """
    if loss_id not in LOSS_IDS:
        raise ValueError(f"unknown loss {loss_id!r}; expected one of {LOSS_IDS}")
    if not batch:
        raise ValueError("empty batch")
    cfg = cfg or L.GeliConfig()
    returns = np.array([t.global_return for t in batch])
    lengths = [len(t) for t in batch]

    if loss_id == "RUDDER_RETURN":
        X = np.vstack([L.rudder_prefix_inputs(t) for t in batch])
    else:
        X = np.vstack([t.joint for t in batch])
    if X.shape[1] != params.input_dim:
        raise ValueError(f"batch has {X.shape[1]} joint features, network expects {params.input_dim}")
    out, cache = _forward(params, X)
    per_traj = _split(out, lengths)
    dout = np.zeros_like(out)

    def ge_family():
        if cfg.rrd_k is not None and loss_id in ("RRD", "GELI"):
            subsets = L.draw_subsets(lengths, cfg.rrd_k, cfg.rng_seed, draw)
            return L.loss_rrd_and_grad(per_traj, returns, subsets)
        return L.loss_ge_and_grad(per_traj, returns)

    if loss_id in ("GE", "RRD"):
        if loss_id == "RRD" and cfg.rrd_k is None:
            raise ValueError("RRD loss needs GeliConfig.rrd_k")
        value, g = ge_family()
        dout[:] = np.concatenate(g)
    elif loss_id == "RUDDER_RETURN":
        value, g = L.loss_rudder_return_and_grad(per_traj, returns)
        dout[:] = np.concatenate(g)
    elif loss_id == "IRCR":
        if step_targets is None:
            raise ValueError("IRCR loss needs per-step targets")
        value, g = L.step_regression_and_grad(out, np.concatenate(step_targets))
        dout[:] = g
    else:
        pos, labels = _labeled(batch)
        if not labels:
            raise ValueError(f"{loss_id} loss on a batch with no labeled steps")
        li_value, li_g = L.loss_li_and_grad(out[pos], labels)
        if loss_id == "LI":
            value = li_value
            dout[pos] = li_g
        else:
            ge_value, ge_g = ge_family()
            value = L.loss_geli(ge_value, li_value, cfg.lam)
            dout[:] = cfg.lam * np.concatenate(ge_g)
            dout[pos] += (1.0 - cfg.lam) * li_g

    return float(value), _backward(params, cache, dout)


def rudder_prefix_predictions(params: RewardNetParams, traj: Trajectory) -> np.ndarray:
    """Return-predictor outputs for prefixes of length 0..T; the empty prefix predicts 0."""
    return np.concatenate([[0.0], predict(params, L.rudder_prefix_inputs(traj))])


@dataclass
class RudderModel:
    """Step rewards as differences of a learned prefix return predictor."""
    predictor: RewardNetParams

    def step_rewards(self, traj: Trajectory) -> np.ndarray:
        return L.rudder_credit(rudder_prefix_predictions(self.predictor, traj))


# ------------------------------------------------------------ AdamW ----

@dataclass
class AdamWState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def for_params(cls, tensors: Sequence[np.ndarray], **hyper) -> "AdamWState":
        return cls([np.zeros_like(t) for t in tensors], [np.zeros_like(t) for t in tensors], **hyper)

    def copy(self) -> "AdamWState":
        return replace(self, first_moment=[m.copy() for m in self.first_moment],
                       second_moment=[v.copy() for v in self.second_moment])


def adamw_update(tensors: Sequence[np.ndarray], state: AdamWState, grads: Sequence[np.ndarray],
                 names: Sequence[str] | None = None) -> tuple[list[np.ndarray], AdamWState]:
    """One AdamW step on a flat list of tensors. Inputs are not modified."""
    names = names or [f"tensor{i}" for i in range(len(tensors))]
    if not (len(tensors) == len(grads) == len(state.first_moment)):
        raise ValueError("parameter, gradient and optimizer-state lists differ in length")
    for name, p, g in zip(names, tensors, grads):
        if p.shape != np.shape(g):
            raise ValueError(f"{name}: gradient shape {np.shape(g)} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in {name}")

    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(tensors, grads, state.first_moment, state.second_moment):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        p = p * (1.0 - state.lr * state.weight_decay)
        p = p - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        new_p.append(p)
        new_m.append(m)
        new_v.append(v)
    return new_p, replace(state, first_moment=new_m, second_moment=new_v, step_count=t)


def adamw_step(params: RewardNetParams, state: AdamWState, grads: RewardNetParams
               ) -> tuple[RewardNetParams, AdamWState]:
    tensors, state = adamw_update(params.tensors(), state, grads.tensors(), params.tensor_names())
    return RewardNetParams.from_tensors(tensors, params.activation), state


# ------------------------------------------------------- checkpoints ----

MAGIC = b"GELI-CKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Unreadable, truncated or wrong-version checkpoint file."""


def write_arrays(path: str | Path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Write named float64 arrays plus a JSON manifest, atomically."""
    manifest = dict(meta)
    manifest["arrays"] = [{"name": k, "shape": list(np.shape(v))} for k, v in arrays.items()]
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(header)), header]
    for v in arrays.values():
        data = np.ascontiguousarray(v, dtype="<f8")
        chunks.append(struct.pack("<Q", data.size))
        chunks.append(data.tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(tmp, path)


def read_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    blob = Path(path).read_bytes()
    if not blob.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic bytes)")
    off = len(MAGIC)
    if len(blob) < off + 8:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack_from("<II", blob, off)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    off += 8
    if len(blob) < off + hlen:
        raise CheckpointError(f"{path}: truncated header")
    manifest = json.loads(blob[off:off + hlen].decode("utf-8"))
    off += hlen
    arrays = {}
    for entry in manifest["arrays"]:
        if len(blob) < off + 8:
            raise CheckpointError(f"{path}: truncated before array {entry['name']}")
        (count,) = struct.unpack_from("<Q", blob, off)
        off += 8
        expected = int(np.prod(entry["shape"], dtype=np.int64))
        if count != expected:
            raise CheckpointError(f"{path}: array {entry['name']} has {count} values, "
                                  f"manifest says {expected}")
        end = off + 8 * count
        if len(blob) < end:
            raise CheckpointError(f"{path}: truncated inside array {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(blob[off:end], dtype="<f8").astype(np.float64).reshape(
            entry["shape"])
        off = end
    if off != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - off} trailing bytes")
    return arrays, manifest


_OPT_FIELDS = ("step_count", "lr", "beta1", "beta2", "eps", "weight_decay")


def save_checkpoint(params: RewardNetParams, state: AdamWState | None, path: str | Path,
                    kind: str = "reward_net", extra: dict | None = None) -> None:
    """``extra`` is stored verbatim in the JSON header (e.g. method tag, epoch)."""
    arrays = dict(zip(params.tensor_names(), params.tensors()))
    meta = dict(extra or {})
    meta.update({"kind": kind, "activation": params.activation, "n_layers": len(params.weights)})
    if state is not None:
        for name, m, v in zip(params.tensor_names(), state.first_moment, state.second_moment):
            arrays[f"adam_m/{name}"] = m
            arrays[f"adam_v/{name}"] = v
        meta["optimizer"] = {k: getattr(state, k) for k in _OPT_FIELDS}
    write_arrays(path, arrays, meta)


def load_checkpoint(path: str | Path) -> tuple[RewardNetParams, AdamWState | None]:
    arrays, meta = read_arrays(path)
    n = meta["n_layers"]
    names = [f"{p}{i}" for i in range(n) for p in ("W", "b")]
    try:
        params = RewardNetParams.from_tensors([arrays[k] for k in names], meta["activation"])
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing array {exc}") from exc
    state = None
    if "optimizer" in meta:
        opt = meta["optimizer"]
        state = AdamWState([arrays[f"adam_m/{k}"] for k in names],
                           [arrays[f"adam_v/{k}"] for k in names],
                           step_count=int(opt["step_count"]),
                           **{k: float(opt[k]) for k in _OPT_FIELDS if k != "step_count"})
    return params, state
