"""Softmax policy over a discrete action vocabulary, adapted with clipped PPO and a KL anchor."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .reward_net import AdamWState, NumericalError, adamw_update, predict, write_arrays, read_arrays
from .synth import ActionVocab


@dataclass(frozen=True)
class PPOConfig:
    clip_range: float = 0.2
    kl_coeff: float = 0.05
    lr: float = 1.4e-5
    batch_size: int = 24
    use_score_norm: bool = True
    epochs_per_batch: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.clip_range <= 0:
            raise ValueError("clip_range must be positive")
        if self.kl_coeff < 0:
            raise ValueError("kl_coeff must be non-negative")
        if self.batch_size < 1 or self.epochs_per_batch < 1:
            raise ValueError("batch_size and epochs_per_batch must be >= 1")


@dataclass
class PolicyParams:
    """Logits ``state @ weight + bias`` over ``num_actions`` actions."""
    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ValueError(f"weight {self.weight.shape} and bias {self.bias.shape} do not compose")

    @classmethod
    def uniform(cls, state_dim: int, num_actions: int) -> "PolicyParams":
        return cls(np.zeros((state_dim, num_actions)), np.zeros(num_actions))

    @property
    def num_actions(self) -> int:
        return self.bias.shape[0]

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.weight.copy(), self.bias.copy())

    def logits(self, states: np.ndarray) -> np.ndarray:
        z = np.atleast_2d(states) @ self.weight + self.bias
        if not np.all(np.isfinite(z)):
            raise NumericalError("non-finite policy logits")
        return z


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass(frozen=True)
class Rollout:
    states: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray

    def __len__(self):
        return self.actions.shape[0]

    def __iter__(self) -> Iterator[tuple[np.ndarray, int, float]]:
        for s, a, lp in zip(self.states, self.actions, self.log_probs):
            yield s, int(a), float(lp)


def rollout(policy: PolicyParams, states: np.ndarray, rng: np.random.Generator) -> Rollout:
    """Sample one action per state by inverse CDF and record its exact log-probability."""
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    if states.shape[0] == 0:
        raise ValueError("rollout needs at least one state")
    logp = log_softmax(policy.logits(states))
    cdf = np.cumsum(np.exp(logp), axis=1)
    u = rng.random(states.shape[0])[:, None] * cdf[:, -1:]
    actions = np.minimum((u >= cdf).sum(axis=1), policy.num_actions - 1)
    return Rollout(states, actions, logp[np.arange(len(actions)), actions])


def _kl_terms(logp: np.ndarray, logq: np.ndarray):
    p = np.exp(logp)
    if np.any(~np.isfinite(logq) & (p > 0)):
        raise NumericalError("reference assigns zero probability where the policy does not")
    per_state = np.sum(p * (logp - logq), axis=1)
    return p, per_state


def kl_divergence(policy: PolicyParams, reference: PolicyParams, states: np.ndarray) -> float:
    """Mean over states of KL(policy || reference)."""
    if policy.num_actions != reference.num_actions:
        raise ValueError("policy and reference disagree on the action vocabulary")
    states = np.atleast_2d(states)
    _, per_state = _kl_terms(log_softmax(policy.logits(states)), log_softmax(reference.logits(states)))
    # exact zero for identical policies; tiny negative round-off is clipped
    return float(max(np.mean(per_state), 0.0))


def advantages(rewards: np.ndarray, use_score_norm: bool) -> np.ndarray:
    r = np.asarray(rewards, dtype=np.float64)
    if not np.all(np.isfinite(r)):
        raise NumericalError("non-finite rewards")
    a = r - r.mean()
    if use_score_norm and r.size > 1:
        sd = r.std()
        a = a / sd if sd > 0 else np.zeros_like(a)
    return a


def ppo_objective_and_grad(policy: PolicyParams, reference: PolicyParams, batch: Rollout,
                           adv: np.ndarray, cfg: PPOConfig):
    """Clipped surrogate minus ``kl_coeff * KL``, and its gradient in (weight, bias)."""
    S = batch.states
    n = len(batch)
    logp = log_softmax(policy.logits(S))
    logq = log_softmax(reference.logits(S))
    idx = np.arange(n)
    ratio = np.exp(logp[idx, batch.actions] - batch.log_probs)
    if not np.all(np.isfinite(ratio)):
        raise NumericalError("non-finite probability ratio")
    clipped = np.clip(ratio, 1.0 - cfg.clip_range, 1.0 + cfg.clip_range)
    surr = np.minimum(ratio * adv, clipped * adv)
    p, kl_s = _kl_terms(logp, logq)
    objective = float(surr.mean() - cfg.kl_coeff * kl_s.mean())

    # gradient only flows through the unclipped branch when it is the active minimum
    active = ratio * adv <= clipped * adv
    onehot = np.zeros_like(p)
    onehot[idx, batch.actions] = 1.0
    g_surr = (active * ratio * adv)[:, None] * (onehot - p)
    g_kl = p * (logp - logq - kl_s[:, None])
    G = (g_surr - cfg.kl_coeff * g_kl) / n
    clip_frac = float(np.mean(np.abs(ratio - 1.0) > cfg.clip_range))
    return objective, S.T @ G, G.sum(axis=0), clip_frac


@dataclass(frozen=True)
class PPOStats:
    mean_reward: float
    kl: float
    clip_fraction: float
    objective: float


def new_optimizer(policy: PolicyParams, cfg: PPOConfig) -> AdamWState:
    return AdamWState.for_params([policy.weight, policy.bias], lr=cfg.lr, weight_decay=0.0)


def ppo_update(policy: PolicyParams, reference: PolicyParams, batch: Rollout, rewards,
               cfg: PPOConfig, opt_state: AdamWState | None = None
               ) -> tuple[PolicyParams, PPOStats, AdamWState]:
    """Several epochs of Adam ascent on the clipped surrogate for one rollout batch."""
    if len(batch) < 1:
        raise ValueError("empty rollout batch")
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.shape != (len(batch),):
        raise ValueError(f"{rewards.shape[0]} rewards for {len(batch)} rollout records")
    adv = advantages(rewards, cfg.use_score_norm)
    opt = opt_state if opt_state is not None else new_optimizer(policy, cfg)
    cur = policy
    clip_frac = 0.0
    objective = 0.0
    for _ in range(cfg.epochs_per_batch):
        objective, gW, gb, clip_frac = ppo_objective_and_grad(cur, reference, batch, adv, cfg)
        (W, b), opt = adamw_update([cur.weight, cur.bias], opt, [-gW, -gb], ["weight", "bias"])
        cur = PolicyParams(W, b)
    stats = PPOStats(float(rewards.mean()), kl_divergence(cur, reference, batch.states),
                     clip_frac, objective)
    return cur, stats, opt


# ------------------------------------------------------ evaluation ----

def pair_rewards(reward_params, states: np.ndarray, action_ids: np.ndarray,
                 vocab: ActionVocab) -> np.ndarray:
    """Learned reward for each (state, chosen action) pair."""
    X = np.hstack([np.atleast_2d(states), vocab.features[action_ids]])
    return predict(reward_params, X)


def expected_true_return(policy: PolicyParams, episodes: np.ndarray, vocab: ActionVocab
                         ) -> tuple[float, float]:
    """Exact per-episode expected true return under the policy; (mean, standard error over episodes).

    ``episodes`` has shape (n_episodes, T, state_dim).
    """
    episodes = np.asarray(episodes, dtype=np.float64)
    if episodes.ndim != 3 or episodes.shape[0] == 0:
        raise ValueError("need a nonempty (episodes, T, state_dim) array")
    n, T, D = episodes.shape
    probs = np.exp(log_softmax(policy.logits(episodes.reshape(n * T, D))))
    per_ep = (probs @ vocab.true_rewards).reshape(n, T).sum(axis=1)
    se = per_ep.std(ddof=1) / np.sqrt(n) if n > 1 else 0.0
    return float(per_ep.mean()), float(se)


def evaluate_policy(policy: PolicyParams, episodes: np.ndarray, vocab: ActionVocab,
                    seed: int = 0, samples_per_episode: int = 1) -> tuple[float, float]:
    """Monte-Carlo mean true episode return of sampled actions, with its standard error."""
    episodes = np.asarray(episodes, dtype=np.float64)
    if episodes.ndim != 3 or episodes.shape[0] == 0:
        raise ValueError("need a nonempty (episodes, T, state_dim) array")
    n, T, D = episodes.shape
    rng = np.random.default_rng(seed)
    flat = np.repeat(episodes.reshape(n * T, D), samples_per_episode, axis=0)
    acts = rollout(policy, flat, rng).actions
    g = vocab.true_rewards[acts].reshape(n, T, samples_per_episode).sum(axis=1).reshape(-1)
    se = g.std(ddof=1) / np.sqrt(g.size) if g.size > 1 else 0.0
    return float(g.mean()), float(se)


def best_action_policy(state_dim: int, vocab: ActionVocab, margin: float = 1e3) -> PolicyParams:
    """Near-deterministic policy on the highest true-reward action."""
    b = np.zeros(vocab.size)
    b[int(np.argmax(vocab.true_rewards))] = margin
    return PolicyParams(np.zeros((state_dim, vocab.size)), b)


def save_policy(policy: PolicyParams, path) -> None:
    write_arrays(path, {"weight": policy.weight, "bias": policy.bias}, {"kind": "policy"})


def load_policy(path) -> PolicyParams:
    arrays, meta = read_arrays(path)
    if meta.get("kind") != "policy":
        raise ValueError(f"{path} is not a policy checkpoint")
    return PolicyParams(arrays["weight"], arrays["bias"])
