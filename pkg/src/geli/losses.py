"""Return-decomposition and shaping objectives over per-step predicted rewards.

Every loss here takes predicted rewards (one array per trajectory, or one
flat array of labeled steps) and is a pure function of its inputs. The
``*_and_grad`` variants additionally return d(loss)/d(reward), which
:mod:`geli.reward_net` chains into parameter gradients.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class GeliConfig:
    lam: float = 0.5
    rrd_k: int | None = 8
    rng_seed: int = 0
    ircr_norm: str = "minmax"  # or "zscore"

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.rrd_k is not None and self.rrd_k < 1:
            raise ValueError(f"rrd_k must be positive, got {self.rrd_k}")
        if self.ircr_norm not in ("minmax", "zscore"):
            raise ValueError(f"unknown IRCR normalization {self.ircr_norm!r}")


def _as_arrays(rewards_per_step) -> list[np.ndarray]:
    out = [np.asarray(r, dtype=np.float64).reshape(-1) for r in rewards_per_step]
    for i, r in enumerate(out):
        if r.size == 0:
            raise ValueError(f"trajectory {i} has no steps")
    return out


def _check_aligned(rewards: list[np.ndarray], returns) -> np.ndarray:
    returns = np.asarray(returns, dtype=np.float64).reshape(-1)
    if len(rewards) != returns.size:
        raise ValueError(f"{len(rewards)} reward lists but {returns.size} returns")
    if not rewards:
        raise ValueError("empty batch")
    return returns


# ---------------------------------------------------------------- GE ----

def loss_ge_and_grad(rewards_per_step, returns) -> tuple[float, list[np.ndarray]]:
    rewards = _as_arrays(rewards_per_step)
    returns = _check_aligned(rewards, returns)
    n = len(rewards)
    resid = returns - np.array([r.sum() for r in rewards])
    grads = [np.full(r.shape, -2.0 * e / n) for r, e in zip(rewards, resid)]
    return float(np.mean(resid ** 2)), grads


def loss_ge(rewards_per_step, returns) -> float:
    """Mean over trajectories of ``(R - sum_t r_t)**2``."""
    return loss_ge_and_grad(rewards_per_step, returns)[0]


# --------------------------------------------------------------- RRD ----

def sample_index_subset(T: int, K: int, rng: np.random.Generator) -> np.ndarray:
    """K distinct indices drawn uniformly from range(T), returned sorted."""
    if K < 1:
        raise ValueError(f"subset size must be at least 1, got {K}")
    if K > T:
        raise ValueError(f"subset size {K} exceeds horizon {T}")
    return np.sort(rng.choice(T, size=K, replace=False))


def subset_rng(seed: int, draw: int, index: int) -> np.random.Generator:
    """Independent stream per (seed, draw, trajectory index); order-free across workers."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, int(draw), int(index)])


def rrd_estimate(rewards: np.ndarray, subset: np.ndarray) -> float:
    """Monte-Carlo estimate ``T/|I| * sum_{t in I} r_t`` of the episode sum."""
    rewards = np.asarray(rewards, dtype=np.float64)
    return rewards.size / len(subset) * float(rewards[subset].sum())


def loss_rrd_and_grad(rewards_per_step, returns, subsets: Sequence[np.ndarray]
                      ) -> tuple[float, list[np.ndarray]]:
    rewards = _as_arrays(rewards_per_step)
    returns = _check_aligned(rewards, returns)
    if len(subsets) != len(rewards):
        raise ValueError("need one index subset per trajectory")
    n = len(rewards)
    total = 0.0
    grads = []
    for r, R, idx in zip(rewards, returns, subsets):
        scale = r.size / len(idx)
        e = R - scale * r[idx].sum()
        total += e * e
        g = np.zeros_like(r)
        # indices are distinct, so plain assignment suffices
        g[idx] = -2.0 * e * scale / n
        grads.append(g)
    return total / n, grads


def draw_subsets(lengths: Sequence[int], K: int, seed: int, draw: int = 0) -> list[np.ndarray]:
    return [sample_index_subset(T, K, subset_rng(seed, draw, i)) for i, T in enumerate(lengths)]


def loss_rrd(rewards_per_step, returns, K: int, rng: np.random.Generator | None = None,
             *, seed: int = 0, draw: int = 0, subsets=None) -> float:
    """Randomized return decomposition loss with one fresh index subset per trajectory.

    Subsets come from ``subsets`` if given, else from ``rng`` if given, else
    from per-trajectory streams keyed on ``(seed, draw, index)``.
    """
    rewards = _as_arrays(rewards_per_step)
    if subsets is None:
        if rng is not None:
            subsets = [sample_index_subset(r.size, K, rng) for r in rewards]
        else:
            subsets = draw_subsets([r.size for r in rewards], K, seed, draw)
    return loss_rrd_and_grad(rewards, returns, subsets)[0]


# ---------------------------------------------------------------- LI ----

def gamma_score(mm_label) -> float:
    """Indicator score: 1 for a positive-affect label, 0 otherwise."""
    if mm_label is None:
        raise ValueError("gamma_score needs a label; filter unlabeled steps first")
    if mm_label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {mm_label!r}")
    return 1.0 if mm_label == 1 else 0.0


def step_regression_and_grad(rewards, targets) -> tuple[float, np.ndarray]:
    r = np.asarray(rewards, dtype=np.float64).reshape(-1)
    y = np.asarray(targets, dtype=np.float64).reshape(-1)
    if r.size != y.size:
        raise ValueError(f"{r.size} rewards but {y.size} targets")
    if r.size == 0:
        raise ValueError("no steps to regress on")
    d = y - r
    return float(np.mean(d ** 2)), -2.0 * d / r.size


def loss_li_and_grad(rewards_per_labeled_step, labels) -> tuple[float, np.ndarray]:
    if len(labels) == 0:
        raise ValueError("LI loss needs at least one labeled step")
    targets = [gamma_score(lab) for lab in labels]
    return step_regression_and_grad(rewards_per_labeled_step, targets)


def loss_li(rewards_per_labeled_step, labels) -> float:
    """Mean over labeled steps of ``(gamma(label) - r)**2``."""
    return loss_li_and_grad(rewards_per_labeled_step, labels)[0]


def loss_geli(ge_part: float, li_part: float, lam: float) -> float:
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    return lam * ge_part + (1.0 - lam) * li_part


# -------------------------------------------------------- baselines ----

def ircr_proxy(dataset, norm: str = "minmax") -> list[np.ndarray]:
    """Uniform redistribution: every step carries its trajectory's normalized return."""
    returns = np.array([t.global_return for t in dataset], dtype=np.float64)
    if returns.size == 0:
        raise ValueError("empty dataset")
    if norm == "minmax":
        lo, hi = returns.min(), returns.max()
        if hi == lo:
            raise ValueError("all returns are equal; IRCR is undefined, use the Mean baseline")
        scaled = (returns - lo) / (hi - lo)
    elif norm == "zscore":
        sd = returns.std()
        if sd == 0:
            raise ValueError("all returns are equal; IRCR is undefined, use the Mean baseline")
        scaled = (returns - returns.mean()) / sd
    else:
        raise ValueError(f"unknown IRCR normalization {norm!r}")
    return [np.full(len(t), v) for t, v in zip(dataset, scaled)]


def rudder_credit(prefix_predictions) -> np.ndarray:
    """Per-step credit as the difference of consecutive prefix return predictions."""
    p = np.asarray(prefix_predictions, dtype=np.float64).reshape(-1)
    if p.size < 2:
        raise ValueError("need predictions for at least the empty and one nonempty prefix")
    return np.diff(p)


def rudder_prefix_inputs(traj) -> np.ndarray:
    """Return-predictor inputs for prefixes of length 1..T.

    Row k concatenates the state features of step k with the running sum of
    action features over steps 0..k, so an additive return is representable.
    """
    states = np.stack([s.state_features for s in traj.steps])
    actions = np.cumsum(np.stack([s.action_features for s in traj.steps]), axis=0)
    return np.hstack([states, actions])


def loss_rudder_return_and_grad(prefix_predictions_per_traj, returns
                                ) -> tuple[float, list[np.ndarray]]:
    """Mean over trajectories of the mean over nonempty prefixes of ``(R - f(prefix))**2``."""
    preds = _as_arrays(prefix_predictions_per_traj)
    returns = _check_aligned(preds, returns)
    n = len(preds)
    total = 0.0
    grads = []
    for p, R in zip(preds, returns):
        d = R - p
        total += float(np.mean(d ** 2))
        grads.append(-2.0 * d / (p.size * n))
    return total / n, grads
