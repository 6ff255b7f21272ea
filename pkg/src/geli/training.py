"""Reward-function training per credit-assignment method."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import losses as L
from . import reward_net as R
from .evaluation import ConstantBaseline, fit_constant_baseline
from .traj import Dataset

log = logging.getLogger(__name__)

METHODS = ("GE_RRD", "GE_IRCR", "GE_RUDDER", "LI_ONLY", "GELI_RRD_VA")
BASELINES = ("Mean", "Mode")
_LOSS_FOR = {"GE_RRD": "RRD", "GE_IRCR": "IRCR", "GE_RUDDER": "RUDDER_RETURN",
             "LI_ONLY": "LI", "GELI_RRD_VA": "GELI"}
_NEEDS_LABELS = ("LI_ONLY", "GELI_RRD_VA")


@dataclass(frozen=True)
class RewardTrainConfig:
    lr: float = 1e-3
    lr_schedule: str = "linear"  # or "constant"
    batch_size_li: int = 32
    batch_size_ge: int = 1
    epochs: int = 20
    eval_every: int = 1
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "tanh"
    weight_decay: float = 0.0
    init_seed: int = 0
    zero_output_init: bool = True


@dataclass(frozen=True)
class MethodSpec:
    """A row of the comparison grid: a method name plus its RRD subset size, if any."""
    method: str
    rrd_k: int | None = None

    @property
    def tag(self) -> str:
        if self.method == "GE_RRD" and self.rrd_k is not None:
            return f"GE_RRD_K{self.rrd_k}"
        return self.method

    @classmethod
    def parse(cls, text: str) -> "MethodSpec":
        """``GE_RRD:32`` style tokens; a bare ``GE_RRD_K32`` tag also parses."""
        text = text.strip()
        name, _, k = text.partition(":")
        if not k and name.startswith("GE_RRD_K"):
            name, k = "GE_RRD", name[len("GE_RRD_K"):]
        if name not in METHODS + BASELINES:
            raise ValueError(f"unknown method {name!r}")
        return cls(name, int(k) if k else None)


@dataclass
class TrainResult:
    model: object
    params: R.RewardNetParams | None
    state: R.AdamWState | None
    curve: list[dict] = field(default_factory=list)


def _batch_size(method: str, cfg: RewardTrainConfig) -> int:
    return cfg.batch_size_li if method in _NEEDS_LABELS else cfg.batch_size_ge


def _lr_at(cfg: RewardTrainConfig, step: int, total: int) -> float:
    if cfg.lr_schedule == "constant":
        return cfg.lr
    if cfg.lr_schedule == "linear":
        return cfg.lr * max(0.0, 1.0 - step / max(total, 1))
    raise ValueError(f"unknown lr schedule {cfg.lr_schedule!r}")


def wrap_model(method: str, params: R.RewardNetParams):
    return R.RudderModel(params) if method == "GE_RUDDER" else params


def initial_state(spec: MethodSpec, train: Dataset, cfg: RewardTrainConfig
                  ) -> tuple[R.RewardNetParams, R.AdamWState]:
    params = R.init_params(train.feature_dim, cfg.hidden, cfg.activation, cfg.init_seed,
                           zero_output=cfg.zero_output_init)
    state = R.AdamWState.for_params(params.tensors(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    return params, state


def train_reward(spec: MethodSpec, train: Dataset, cfg: RewardTrainConfig, geli: L.GeliConfig,
                 *, seed: int = 0, on_log: Callable[[dict], None] | None = None,
                 start: tuple[R.RewardNetParams, R.AdamWState] | None = None,
                 start_epoch: int = 0,
                 on_epoch: Callable[[int, R.RewardNetParams, R.AdamWState], None] | None = None
                 ) -> TrainResult:
    """Train one method on ``train``.

    Constant baselines are fitted in closed form. Network methods run
    ``cfg.epochs`` epochs of AdamW over seeded shuffles; resuming from
    ``start`` at ``start_epoch`` reproduces the uninterrupted run. ``on_log``
    receives each curve record; ``on_epoch(epoch, params, state)`` runs after
    every epoch, after ``on_log``, so callers can snapshot.
    """
    if spec.method in BASELINES:
        model = fit_constant_baseline(train, spec.method.lower())
        return TrainResult(model, None, None, [])
    if spec.method in _NEEDS_LABELS and not train.has_labels():
        raise ValueError(f"method {spec.method} needs multimodal labels, dataset has none")

    loss_id = _LOSS_FOR[spec.method]
    if spec.method == "GE_RRD":
        geli = L.GeliConfig(geli.lam, spec.rrd_k or geli.rrd_k, geli.rng_seed, geli.ircr_norm)
    if loss_id == "RRD" or loss_id == "GELI":
        min_T = min(len(t) for t in train)
        if geli.rrd_k is not None and geli.rrd_k > min_T:
            raise ValueError(f"RRD subset size {geli.rrd_k} exceeds shortest horizon {min_T}")

    targets = L.ircr_proxy(train, geli.ircr_norm) if loss_id == "IRCR" else None
    params, state = start if start is not None else initial_state(spec, train, cfg)
    bs = _batch_size(spec.method, cfg)
    n = len(train)
    total_steps = cfg.epochs * ((n + bs - 1) // bs)
    curve = []
    for epoch in range(start_epoch, cfg.epochs):
        order = np.random.default_rng([seed, epoch]).permutation(n)
        losses = []
        for lo in range(0, n, bs):
            idx = order[lo:lo + bs]
            batch = [train[i] for i in idx]
            tg = [targets[i] for i in idx] if targets is not None else None
            state.lr = _lr_at(cfg, state.step_count, total_steps)
            value, grads = R.loss_gradient(params, batch, loss_id, geli, draw=state.step_count,
                                           step_targets=tg)
            params, state = R.adamw_step(params, state, grads)
            losses.append(value)
        if (epoch + 1) % cfg.eval_every == 0 or epoch + 1 == cfg.epochs:
            model = wrap_model(spec.method, params)
            sums = np.array([model.step_rewards(t).sum() for t in train])
            rec = {"method": spec.tag, "epoch": epoch + 1, "step": state.step_count,
                   "loss": float(np.mean(losses)),
                   "l_ge_train": float(np.mean((train.returns - sums) ** 2))}
            curve.append(rec)
            if on_log:
                on_log(rec)
            log.debug("%s epoch %d loss %.6g", spec.tag, epoch + 1, rec["loss"])
        if on_epoch:
            on_epoch(epoch + 1, params, state)
    return TrainResult(wrap_model(spec.method, params), params, state, curve)
