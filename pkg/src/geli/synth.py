"""Synthetic delayed-reward conversations with hidden per-turn rewards.

Each turn has a latent quality ``q``; its features are a fixed noisy
nonlinear embedding of ``q``, its true reward is ``reward_scale * q``, and a
binary proxy label agrees with "reward above the dataset median" with
probability ``proxy_accuracy_p``. Only the episode sum (plus optional noise)
is exposed as the trajectory return.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from .traj import Dataset, Step, Trajectory

HIGH_VALUE_RATE = 0.2
HIGH_VALUE_MEAN = 2.0


@dataclass(frozen=True)
class EnvConfig:
    horizon_T: int = 20
    feature_dim: int = 16
    num_trajectories: int = 600
    proxy_accuracy_p: float = 0.9
    return_noise_sigma: float = 0.0
    seed: int = 42
    reward_scale: float = 1.0
    feature_noise: float = 0.1

    def validate(self) -> None:
        if self.horizon_T < 1:
            raise ValueError(f"horizon_T must be >= 1, got {self.horizon_T}")
        if self.feature_dim < 1:
            raise ValueError(f"feature_dim must be >= 1, got {self.feature_dim}")
        if self.num_trajectories < 1:
            raise ValueError(f"num_trajectories must be >= 1, got {self.num_trajectories}")
        if not 0.5 <= self.proxy_accuracy_p <= 1.0:
            raise ValueError(f"proxy_accuracy_p must lie in [0.5, 1], got {self.proxy_accuracy_p}")
        if self.return_noise_sigma < 0:
            raise ValueError("return_noise_sigma must be non-negative")
        if self.reward_scale <= 0:
            raise ValueError("reward_scale must be positive")
        if self.feature_noise < 0:
            raise ValueError("feature_noise must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class GroundTruth:
    per_step_true_rewards: tuple[np.ndarray, ...]

    def __len__(self):
        return len(self.per_step_true_rewards)

    def flat(self) -> np.ndarray:
        return np.concatenate(self.per_step_true_rewards)


@dataclass(frozen=True)
class Embedding:
    """Fixed map from latent quality to a feature vector."""
    slope: np.ndarray
    offset: np.ndarray

    def __call__(self, q: np.ndarray) -> np.ndarray:
        return np.tanh(0.5 * np.multiply.outer(q, self.slope) + self.offset)


def _streams(seed: int):
    # separate streams so the vocabulary and datasets can be regenerated independently
    return (np.random.default_rng([seed, 0]), np.random.default_rng([seed, 1]),
            np.random.default_rng([seed, 2]))


def make_embedding(cfg: EnvConfig) -> Embedding:
    rng = _streams(cfg.seed)[0]
    return Embedding(rng.normal(size=cfg.feature_dim), rng.normal(scale=0.5, size=cfg.feature_dim))


def sample_quality(rng: np.random.Generator, size) -> np.ndarray:
    high = rng.random(size) < HIGH_VALUE_RATE
    return rng.normal(size=size) + HIGH_VALUE_MEAN * high


def generate(cfg: EnvConfig, sample_seed: int | None = None) -> tuple[Dataset, GroundTruth]:
    """Sample a dataset. ``sample_seed`` draws fresh trajectories under the same
    feature embedding as ``cfg.seed`` (used for held-out evaluation sets)."""
    cfg.validate()
    embed = make_embedding(cfg)
    rng = _streams(cfg.seed if sample_seed is None else sample_seed)[1]
    n, T, D = cfg.num_trajectories, cfg.horizon_T, cfg.feature_dim

    q = sample_quality(rng, (n, T))
    actions = embed(q) + cfg.feature_noise * rng.normal(size=(n, T, D))
    # state = mean of the previous turns' features (dialogue history), zeros at t=0
    csum = np.cumsum(actions, axis=1)
    states = np.zeros_like(actions)
    states[:, 1:] = csum[:, :-1] / np.arange(1, T)[None, :, None]

    g = cfg.reward_scale * q
    above = g > np.median(g)
    u = rng.random((n, T))
    labels = np.where(above, u < cfg.proxy_accuracy_p, u < 1.0 - cfg.proxy_accuracy_p).astype(int)
    noise = cfg.return_noise_sigma * rng.normal(size=n)

    trajs = []
    for i in range(n):
        steps = tuple(Step(states[i, t], actions[i, t], int(labels[i, t])) for t in range(T))
        trajs.append(Trajectory(steps, float(g[i].sum() + noise[i])))
    truth = GroundTruth(tuple(g[i].copy() for i in range(n)))
    return Dataset(tuple(trajs), meta={"env": cfg.to_dict()}), truth


@dataclass(frozen=True)
class ActionVocab:
    """Discrete action set for policy adaptation: fixed features and hidden true rewards."""
    features: np.ndarray
    true_rewards: np.ndarray

    @property
    def size(self) -> int:
        return self.features.shape[0]


def make_action_vocab(cfg: EnvConfig, size: int = 8) -> ActionVocab:
    embed = make_embedding(cfg)
    rng = _streams(cfg.seed)[2]
    q = np.sort(sample_quality(rng, size))
    feats = embed(q) + cfg.feature_noise * rng.normal(size=(size, cfg.feature_dim))
    return ActionVocab(feats, cfg.reward_scale * q)


# ----------------------------------------------------------- oracle ----

@dataclass(frozen=True)
class OracleReport:
    pearson_r: float
    per_step_mse: float
    sign_agreement: float
    degenerate: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def oracle_compare(pred: np.ndarray, true: np.ndarray) -> OracleReport:
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    true = np.asarray(true, dtype=np.float64).reshape(-1)
    if pred.size != true.size:
        raise ValueError(f"{pred.size} predictions but {true.size} true rewards")
    if pred.size < 2:
        raise ValueError("oracle evaluation needs at least two steps")
    pc = pred - pred.mean()
    tc = true - true.mean()
    sp, st = np.sqrt(pc @ pc), np.sqrt(tc @ tc)
    degenerate = sp == 0 or st == 0
    r = 0.0 if degenerate else float(np.clip(pc @ tc / (sp * st), -1.0, 1.0))
    # least-squares affine alignment of pred onto true; slope 0 for a constant predictor
    slope = 0.0 if sp == 0 else (pc @ tc) / (sp * sp)
    resid = tc - slope * pc
    mse = float(np.mean(resid ** 2))
    agree = float(np.mean((pred > np.median(pred)) == (true > np.median(true))))
    return OracleReport(r, mse, agree, bool(degenerate))


def oracle_eval(model, dataset: Dataset, truth: GroundTruth) -> OracleReport:
    """Compare a model's per-step rewards with the hidden true rewards."""
    if len(dataset) != len(truth):
        raise ValueError(f"dataset has {len(dataset)} trajectories, truth has {len(truth)}")
    pred = []
    for traj, g in zip(dataset, truth.per_step_true_rewards):
        r = np.asarray(model.step_rewards(traj))
        if r.shape != g.shape:
            raise ValueError("truth is not aligned with the dataset")
        pred.append(r)
    return oracle_compare(np.concatenate(pred), truth.flat())


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    ac, bc = a - a.mean(), b - b.mean()
    den = np.sqrt((ac @ ac) * (bc @ bc))
    return 0.0 if den == 0 else float(ac @ bc / den)


def pearson_difference_ci(pred_a: Sequence[np.ndarray], pred_b: Sequence[np.ndarray],
                          truth: GroundTruth, n_boot: int = 2000, level: float = 0.95,
                          seed: int = 0) -> tuple[float, float, float]:
    """Paired bootstrap over trajectories of corr(a, g) - corr(b, g).

    Both predictors are scored on the same steps, so trajectories are
    resampled jointly. Returns (observed difference, lower, upper).
    """
    g = truth.per_step_true_rewards
    if not (len(pred_a) == len(pred_b) == len(g)) or len(g) < 2:
        raise ValueError("need aligned predictions for at least two trajectories")
    lengths = np.array([len(x) for x in g])
    A, B, G = (np.concatenate([np.asarray(x, dtype=np.float64) for x in v]) for v in (pred_a, pred_b, g))
    starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    observed = _pearson(A, G) - _pearson(B, G)
    rng = np.random.default_rng(seed)
    diffs = np.empty(n_boot)
    for k in range(n_boot):
        pick = rng.integers(0, len(g), len(g))
        idx = np.concatenate([np.arange(starts[i], starts[i] + lengths[i]) for i in pick])
        diffs[k] = _pearson(A[idx], G[idx]) - _pearson(B[idx], G[idx])
    tail = (1.0 - level) / 2.0
    lo, hi = np.quantile(diffs, [tail, 1.0 - tail])
    return observed, float(lo), float(hi)


def proxy_mutual_information(labels: np.ndarray, true_rewards: np.ndarray) -> float:
    """Plug-in mutual information (nats) between labels and above-median reward."""
    x = np.asarray(labels).astype(int).reshape(-1)
    y = (np.asarray(true_rewards) > np.median(true_rewards)).astype(int).reshape(-1)
    joint = np.zeros((2, 2))
    np.add.at(joint, (x, y), 1.0)
    joint /= joint.sum()
    px, py = joint.sum(1, keepdims=True), joint.sum(0, keepdims=True)
    nz = joint > 0
    return float(np.sum(joint[nz] * np.log(joint[nz] / (px @ py)[nz])))


# ----------------------------------------------------------- files ----

def write_truth(truth: GroundTruth, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for g in truth.per_step_true_rewards:
            fh.write(json.dumps({"g": [float(x) for x in g]}, separators=(",", ":")))
            fh.write("\n")


def load_truth(path: str | Path) -> GroundTruth:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rows.append(np.asarray(json.loads(line)["g"], dtype=np.float64))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}: line {lineno}: bad truth record") from exc
    return GroundTruth(tuple(rows))


def subset_truth(truth: GroundTruth, indices: Sequence[int]) -> GroundTruth:
    return GroundTruth(tuple(truth.per_step_true_rewards[i] for i in indices))
