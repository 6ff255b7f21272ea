"""Pipeline stages over one work directory.

Layout of a work directory::

    manifest.json            config snapshot, seeds, per-stage hashes and timestamps
    dataset.jsonl            all generated trajectories (schema records with vectors)
    truth.jsonl              hidden per-step rewards, aligned by line
    splits.json              trajectory indices of the train / test / policy parts
    checkpoints/<tag>.ckpt   one trained reward function per method
    checkpoints/policy.ckpt  adapted policy
    logs/train_<tag>.jsonl   training curves
    logs/rl_curve.jsonl      policy adaptation curve
    eval/<tag>.json          test-split metrics, plus <tag>.steps.jsonl raw predictions
    eval/policy.json         reference vs adapted true return
    reports/report.{csv,json}, reports/policy.json

Each stage records the sha256 of its inputs and outputs. Rerunning a finished
stage is a no-op; a stage whose inputs no longer match what the upstream stage
wrote refuses to run. ``force`` reruns a stage and drops every later record.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import shutil
import time
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import policy as P
from . import reward_net as R
from .config import ExperimentConfig
from .evaluation import ConstantBaseline, EvalReport, dump_step_rewards, emit_report, evaluate
from .synth import generate, load_truth, make_action_vocab, subset_truth, write_truth
from .training import BASELINES, MethodSpec, TrainResult, train_reward, wrap_model
from .traj import Dataset, FeatureSpec, SplitTag, TrajectoryFormatError, load_jsonl, split_indices, write_jsonl

log = logging.getLogger(__name__)

STAGES = ("generate", "train-reward", "eval-reward", "adapt-policy", "report")
MANIFEST_FORMAT = 1
ORACLE_REWARD = "ORACLE"
POLICY_SNAPSHOT_EVERY = 50

# config sections each stage depends on (cumulative down the pipeline)
_STAGE_SECTIONS = {
    "generate": ("seed", "env", "split"),
    "train-reward": ("seed", "env", "split", "geli", "reward_train", "experiment"),
    "eval-reward": ("seed", "env", "split", "geli", "reward_train", "experiment"),
    "adapt-policy": ("seed", "env", "split", "geli", "reward_train", "experiment", "ppo", "adapt"),
    "report": ("seed", "env", "split", "geli", "reward_train", "experiment", "ppo", "adapt"),
}


class PipelineError(RuntimeError):
    exit_code = 1


class MissingPrerequisite(PipelineError):
    """A stage input is absent, unreadable or was modified after it was written."""
    exit_code = 3


class WorkdirBusy(PipelineError):
    pass


class StageConflict(PipelineError):
    """Existing results were produced from a different configuration."""


# ------------------------------------------------------------ files ----

def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def atomic_write_text(path: str | Path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _atomic(path: Path, writer: Callable[[Path], None]) -> None:
    tmp = path.with_name(path.name + ".tmp")
    writer(tmp)
    os.replace(tmp, path)


def _canonical_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _append_jsonl(path: Path, rec: dict) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")


def _read_jsonl(path: Path) -> list[dict]:
    if not path.exists():
        return []
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


@dataclass(frozen=True)
class Layout:
    root: Path
    cfg: ExperimentConfig

    @property
    def manifest(self) -> Path:
        return self.root / "manifest.json"

    @property
    def lock(self) -> Path:
        return self.root / ".lock"

    @property
    def dataset(self) -> Path:
        return self.root / self.cfg.paths.dataset

    @property
    def truth(self) -> Path:
        return self.root / "truth.jsonl"

    @property
    def splits(self) -> Path:
        return self.root / "splits.json"

    @property
    def checkpoints(self) -> Path:
        return self.root / self.cfg.paths.checkpoints

    @property
    def logs(self) -> Path:
        return self.root / "logs"

    @property
    def eval(self) -> Path:
        return self.root / "eval"

    @property
    def reports(self) -> Path:
        return self.root / self.cfg.paths.reports

    def checkpoint(self, tag: str) -> Path:
        return self.checkpoints / f"{tag}.ckpt"

    def partial_checkpoint(self, tag: str) -> Path:
        return self.checkpoints / f"{tag}.partial.ckpt"

    def train_log(self, tag: str) -> Path:
        return self.logs / f"train_{tag}.jsonl"

    def eval_json(self, tag: str) -> Path:
        return self.eval / f"{tag}.json"

    def eval_steps(self, tag: str) -> Path:
        return self.eval / f"{tag}.steps.jsonl"

    @property
    def policy_checkpoint(self) -> Path:
        return self.checkpoints / "policy.ckpt"

    @property
    def policy_partial(self) -> Path:
        return self.checkpoints / "policy.partial.ckpt"

    @property
    def rl_curve(self) -> Path:
        return self.logs / "rl_curve.jsonl"

    @property
    def policy_eval(self) -> Path:
        return self.eval / "policy.json"

    def rel(self, path: Path) -> str:
        return path.relative_to(self.root).as_posix()


# --------------------------------------------------------- manifest ----

class Manifest:
    def __init__(self, data: dict | None = None):
        self.data = data or {"format": MANIFEST_FORMAT, "stages": {}}

    @classmethod
    def load(cls, path: Path) -> "Manifest":
        if not path.exists():
            return cls()
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise MissingPrerequisite(f"{path}: corrupt manifest ({exc})") from exc
        if data.get("format") != MANIFEST_FORMAT:
            raise MissingPrerequisite(f"{path}: unsupported manifest format {data.get('format')}")
        return cls(data)

    def save(self, path: Path) -> None:
        atomic_write_text(path, _canonical_json(self.data))

    @property
    def stages(self) -> dict:
        return self.data.setdefault("stages", {})

    def drop_from(self, stage: str) -> None:
        for name in STAGES[STAGES.index(stage):]:
            self.stages.pop(name, None)


def stage_key(cfg: ExperimentConfig, stage: str) -> str:
    d = cfg.to_dict()
    sub = {k: d[k] for k in _STAGE_SECTIONS[stage]}
    return hashlib.sha256(json.dumps(sub, sort_keys=True, default=list).encode()).hexdigest()


# ------------------------------------------------------------- lock ----

def _pid_alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


@contextmanager
def workdir_lock(path: Path):
    """Exclusive per-workdir lock; a lock left by a dead process is taken over."""
    for _ in range(2):
        try:
            fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            break
        except FileExistsError:
            try:
                pid = int(path.read_text().strip() or 0)
            except (OSError, ValueError):
                pid = 0
            if pid and _pid_alive(pid):
                raise WorkdirBusy(f"{path.parent} is locked by running process {pid}") from None
            log.warning("removing stale lock %s (pid %s)", path, pid or "unknown")
            path.unlink(missing_ok=True)
    else:
        raise WorkdirBusy(f"could not acquire {path}")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        path.unlink(missing_ok=True)


# ---------------------------------------------------------- context ----

@dataclass
class Context:
    cfg: ExperimentConfig
    layout: Layout
    manifest: Manifest
    force: bool = False
    partial: bool = False

    def save_manifest(self) -> None:
        self.manifest.save(self.layout.manifest)

    def _hashes(self, paths) -> dict[str, str]:
        return {self.layout.rel(p): sha256_file(p) for p in sorted(paths)}

    def verify_inputs(self, stage: str, upstream: str, names: list[str] | None = None) -> dict[str, str]:
        """Check upstream outputs on disk still match the hashes recorded for them."""
        rec = self.manifest.stages.get(upstream)
        if rec is None or "finished" not in rec:
            raise MissingPrerequisite(f"stage {stage!r} needs {upstream!r} to have completed")
        wanted = rec["outputs"] if names is None else {n: rec["outputs"].get(n) for n in names}
        for rel, digest in wanted.items():
            path = self.layout.root / rel
            if digest is None or not path.exists():
                raise MissingPrerequisite(f"stage {stage!r}: missing input {rel}")
            if sha256_file(path) != digest:
                raise MissingPrerequisite(
                    f"stage {stage!r}: {rel} changed since {upstream!r} wrote it; rerun {upstream!r} with --force")
        return dict(wanted)

    def outputs_intact(self, rec: dict) -> bool:
        for rel, digest in rec.get("outputs", {}).items():
            path = self.layout.root / rel
            if not path.exists() or sha256_file(path) != digest:
                return False
        return True

    def run_stage(self, stage: str, inputs: Callable[[], dict[str, str]],
                  body: Callable[[], list[Path]], extra: Callable[[], dict] | None = None) -> bool:
        """Run ``body`` unless the stage already completed for this config. Returns True if it ran."""
        key = stage_key(self.cfg, stage)
        rec = self.manifest.stages.get(stage)
        if rec is not None and not self.force:
            if rec.get("config_hash") != key:
                raise StageConflict(f"stage {stage!r} was run with a different configuration; use --force")
            if "finished" in rec:
                current_inputs = inputs()
                if current_inputs == rec.get("inputs") and self.outputs_intact(rec):
                    log.info("%s: up to date", stage)
                    return False
        in_hashes = inputs()
        self.manifest.drop_from(stage)
        record = {"config_hash": key, "started": _now(), "inputs": in_hashes}
        self.manifest.stages[stage] = record
        self.save_manifest()
        log.info("%s: running", stage)
        outputs = body()
        record["outputs"] = self._hashes(outputs)
        if extra is not None:
            record.update(extra())
        record["finished"] = _now()
        self.save_manifest()
        return True


def open_context(cfg: ExperimentConfig, force: bool = False, partial: bool = False) -> Context:
    root = cfg.resolve_workdir()
    layout = Layout(root, cfg)
    return Context(cfg, layout, Manifest.load(layout.manifest), force, partial)


# ------------------------------------------------------ data access ----

def load_parts(ctx: Context) -> dict:
    """Dataset, ground truth and split indices for the work directory."""
    lay = ctx.layout
    try:
        ds = load_jsonl(lay.dataset, FeatureSpec(dimension=ctx.cfg.env.feature_dim))
        truth = load_truth(lay.truth)
        splits = json.loads(lay.splits.read_text(encoding="utf-8"))
    except (OSError, TrajectoryFormatError, ValueError) as exc:
        raise MissingPrerequisite(f"cannot read generated data: {exc}") from exc
    out = {}
    for name, tag in (("train", SplitTag.REWARD_TRAIN), ("test", SplitTag.REWARD_TEST),
                      ("policy", SplitTag.POLICY_TRAIN)):
        idx = splits[name]
        out[name] = Dataset(tuple(ds[i] for i in idx), tag)
        out[name + "_truth"] = subset_truth(truth, idx)
    return out


# ------------------------------------------------------------ stages ----

def cmd_generate(ctx: Context) -> bool:
    cfg, lay = ctx.cfg, ctx.layout
    rec = ctx.manifest.stages.get("generate")
    if not ctx.force:
        if rec is None and lay.root.exists() and any(p.name != ".lock" for p in lay.root.iterdir()):
            raise StageConflict(f"{lay.root} is not empty and holds no run from this config; use --force")

    def body():
        lay.root.mkdir(parents=True, exist_ok=True)
        ds, truth = generate(cfg.env)
        train, test, pol = split_indices(len(ds), cfg.split_fractions, cfg.seed)
        _atomic(lay.dataset, lambda p: write_jsonl(ds, p))
        _atomic(lay.truth, lambda p: write_truth(truth, p))
        atomic_write_text(lay.splits, _canonical_json(
            {"train": train.tolist(), "test": test.tolist(), "policy": pol.tolist()}))
        return [lay.dataset, lay.truth, lay.splits]

    def extra():
        return {"seeds": {"seed": cfg.seed, "env.seed": cfg.env.seed, "geli.rng_seed": cfg.geli.rng_seed,
                          "ppo.seed": cfg.ppo.seed}}

    lay.root.mkdir(parents=True, exist_ok=True)
    ctx.manifest.data["config"] = cfg.to_text()
    ctx.manifest.data["config_hash"] = cfg.content_hash()
    return ctx.run_stage("generate", lambda: {}, body, extra)


def _data_inputs(ctx: Context, stage: str) -> dict[str, str]:
    return ctx.verify_inputs(stage, "generate")


def _save_baseline(model: ConstantBaseline, path: Path, meta: dict) -> None:
    R.write_arrays(path, {"value": np.array([model.per_step_value])},
                   dict(meta, kind="baseline", baseline=model.kind))


def load_reward_model(path: Path, spec: MethodSpec):
    """Evaluable model for a method checkpoint: a constant baseline or a (wrapped) network."""
    try:
        arrays, meta = R.read_arrays(path)
        if meta.get("kind") == "baseline":
            return ConstantBaseline(meta["baseline"], float(arrays["value"][0])), None
        params, _ = R.load_checkpoint(path)
    except FileNotFoundError as exc:
        raise MissingPrerequisite(f"missing checkpoint {path}") from exc
    except (R.CheckpointError, KeyError, json.JSONDecodeError) as exc:
        raise MissingPrerequisite(f"unusable checkpoint {path}: {exc}") from exc
    return wrap_model(spec.method, params), params


def _train_one(ctx: Context, spec: MethodSpec, parts: dict, key: str) -> None:
    cfg, lay = ctx.cfg, ctx.layout
    final, partial, log_path = lay.checkpoint(spec.tag), lay.partial_checkpoint(spec.tag), lay.train_log(spec.tag)
    if final.exists():
        _, meta = R.read_arrays(final)
        if meta.get("train_key") == key:
            log.info("train-reward: %s already trained", spec.tag)
            return
    meta = {"method": spec.tag, "train_key": key}
    if spec.method in BASELINES:
        res = train_reward(spec, parts["train"], cfg.reward_train, cfg.geli, seed=cfg.seed)
        _save_baseline(res.model, final, meta)
        atomic_write_text(log_path, "")
        return

    start, start_epoch = None, 0
    if partial.exists():
        _, pmeta = R.read_arrays(partial)
        if pmeta.get("train_key") == key:
            start, start_epoch = R.load_checkpoint(partial), int(pmeta["epoch"])
            log.info("train-reward: resuming %s at epoch %d", spec.tag, start_epoch)
    # keep only curve records the resumed state has already passed
    kept = [r for r in _read_jsonl(log_path) if r["epoch"] <= start_epoch]
    atomic_write_text(log_path, "".join(json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n"
                                        for r in kept))

    def on_epoch(epoch: int, params: R.RewardNetParams, state: R.AdamWState) -> None:
        R.save_checkpoint(params, state, partial, extra=dict(meta, epoch=epoch))

    res: TrainResult = train_reward(spec, parts["train"], cfg.reward_train, cfg.geli, seed=cfg.seed,
                                    start=start, start_epoch=start_epoch,
                                    on_log=lambda rec: _append_jsonl(log_path, rec), on_epoch=on_epoch)
    R.save_checkpoint(res.params, res.state, final, extra=dict(meta, epoch=cfg.reward_train.epochs))
    partial.unlink(missing_ok=True)


def cmd_train_reward(ctx: Context) -> bool:
    lay = ctx.layout
    key_holder = {}

    def inputs():
        return _data_inputs(ctx, "train-reward")

    def body():
        lay.checkpoints.mkdir(parents=True, exist_ok=True)
        lay.logs.mkdir(parents=True, exist_ok=True)
        if ctx.force:
            for spec in ctx.cfg.method_specs:
                lay.checkpoint(spec.tag).unlink(missing_ok=True)
                lay.partial_checkpoint(spec.tag).unlink(missing_ok=True)
        parts = load_parts(ctx)
        key = hashlib.sha256((stage_key(ctx.cfg, "train-reward")
                              + json.dumps(inputs(), sort_keys=True)).encode()).hexdigest()
        outputs, failed = [], {}
        for spec in ctx.cfg.method_specs:
            try:
                _train_one(ctx, spec, parts, key)
            except (R.NumericalError, ValueError) as exc:
                if not ctx.partial:
                    if isinstance(exc, R.NumericalError):
                        raise
                    raise PipelineError(f"train-reward: {spec.tag}: {exc}") from exc
                log.error("train-reward: %s failed: %s", spec.tag, exc)
                failed[spec.tag] = str(exc)
                continue
            outputs += [lay.checkpoint(spec.tag), lay.train_log(spec.tag)]
        key_holder["failed"] = failed
        return outputs

    return ctx.run_stage("train-reward", inputs, body,
                         lambda: {"failed": key_holder["failed"]} if key_holder.get("failed") else {})


def cmd_eval_reward(ctx: Context) -> bool:
    lay = ctx.layout

    def inputs():
        h = _data_inputs(ctx, "eval-reward")
        h.update(ctx.verify_inputs("eval-reward", "train-reward"))
        return h

    def body():
        lay.eval.mkdir(parents=True, exist_ok=True)
        parts = load_parts(ctx)
        outputs = []
        trained = ctx.manifest.stages["train-reward"]["outputs"]
        for spec in ctx.cfg.method_specs:
            ckpt = lay.checkpoint(spec.tag)
            if lay.rel(ckpt) not in trained:
                if ctx.partial:
                    log.warning("eval-reward: no checkpoint for %s, skipped", spec.tag)
                    continue
                raise MissingPrerequisite(f"no trained checkpoint for {spec.tag}")
            model, _ = load_reward_model(ckpt, spec)
            rep = evaluate(model, parts["test"], spec.tag, parts["test_truth"])
            atomic_write_text(lay.eval_json(spec.tag), _canonical_json(rep.to_dict()))
            _atomic(lay.eval_steps(spec.tag), lambda p: dump_step_rewards(model, parts["test"], p))
            outputs += [lay.eval_json(spec.tag), lay.eval_steps(spec.tag)]
        return outputs

    return ctx.run_stage("eval-reward", inputs, body)


def _policy_states(parts: dict) -> np.ndarray:
    return np.vstack([s.state_features for t in parts["policy"] for s in t.steps])


def _eval_episodes(cfg: ExperimentConfig) -> np.ndarray:
    env = dataclasses.replace(cfg.env, num_trajectories=cfg.adapt.eval_episodes)
    ds, _ = generate(env, sample_seed=cfg.seed + cfg.adapt.eval_seed_offset)
    return np.stack([np.vstack([s.state_features for s in t.steps]) for t in ds])


def _reward_fn(ctx: Context) -> Callable[[np.ndarray, np.ndarray, object], np.ndarray]:
    name = ctx.cfg.adapt.reward_method
    if name.upper() == ORACLE_REWARD:
        return lambda states, actions, vocab: vocab.true_rewards[actions]
    spec = MethodSpec.parse(name)
    if spec.method in BASELINES or spec.method == "GE_RUDDER":
        raise PipelineError(f"adapt.reward_method {name!r} does not score single (state, action) pairs")
    _, params = load_reward_model(ctx.layout.checkpoint(spec.tag), spec)
    return lambda states, actions, vocab: P.pair_rewards(params, states, actions, vocab)


def _policy_arrays(policy: P.PolicyParams, opt: R.AdamWState | None) -> dict:
    arrays = {"weight": policy.weight, "bias": policy.bias}
    if opt is not None:
        for name, m, v in zip(("weight", "bias"), opt.first_moment, opt.second_moment):
            arrays[f"adam_m/{name}"] = m
            arrays[f"adam_v/{name}"] = v
    return arrays


def adapt_policy(cfg: ExperimentConfig, states: np.ndarray, reward_fn, *, on_update=None,
                 start: tuple[P.PolicyParams, R.AdamWState] | None = None, start_update: int = 0
                 ) -> tuple[P.PolicyParams, P.PolicyParams, R.AdamWState]:
    """PPO loop against ``reward_fn``; returns (policy, reference, optimizer state)."""
    vocab = make_action_vocab(cfg.env, cfg.adapt.vocab_size)
    reference = P.PolicyParams.uniform(states.shape[1], vocab.size)
    if start is None:
        policy, opt = reference.copy(), P.new_optimizer(reference, cfg.ppo)
    else:
        policy, opt = start
    bs = min(cfg.ppo.batch_size, states.shape[0])
    for u in range(start_update, cfg.adapt.updates):
        rng = np.random.default_rng([cfg.ppo.seed, 3, u])
        idx = rng.choice(states.shape[0], bs, replace=False)
        batch = P.rollout(policy, states[idx], rng)
        rewards = reward_fn(batch.states, batch.actions, vocab)
        policy, stats, opt = P.ppo_update(policy, reference, batch, rewards, cfg.ppo, opt)
        if on_update is not None:
            on_update(u + 1, policy, opt, stats, vocab, reference)
    return policy, reference, opt


def cmd_adapt_policy(ctx: Context) -> bool:
    cfg, lay = ctx.cfg, ctx.layout

    def inputs():
        h = _data_inputs(ctx, "adapt-policy")
        if cfg.adapt.reward_method.upper() != ORACLE_REWARD:
            tag = MethodSpec.parse(cfg.adapt.reward_method).tag
            h.update(ctx.verify_inputs("adapt-policy", "train-reward", [lay.rel(lay.checkpoint(tag))]))
        return h

    def body():
        lay.checkpoints.mkdir(parents=True, exist_ok=True)
        lay.logs.mkdir(parents=True, exist_ok=True)
        lay.eval.mkdir(parents=True, exist_ok=True)
        parts = load_parts(ctx)
        states = _policy_states(parts)
        episodes = _eval_episodes(cfg)
        reward_fn = _reward_fn(ctx)
        key = hashlib.sha256((stage_key(cfg, "adapt-policy")
                              + json.dumps(inputs(), sort_keys=True)).encode()).hexdigest()

        start, start_update = None, 0
        if lay.policy_partial.exists() and not ctx.force:
            arrays, meta = R.read_arrays(lay.policy_partial)
            if meta.get("adapt_key") == key:
                o = meta["optimizer"]
                opt = R.AdamWState([arrays["adam_m/weight"], arrays["adam_m/bias"]],
                                   [arrays["adam_v/weight"], arrays["adam_v/bias"]],
                                   step_count=int(o["step_count"]), lr=float(o["lr"]),
                                   weight_decay=float(o["weight_decay"]))
                start = (P.PolicyParams(arrays["weight"], arrays["bias"]), opt)
                start_update = int(meta["update"])
                log.info("adapt-policy: resuming at update %d", start_update)
        kept = [r for r in _read_jsonl(lay.rl_curve) if r["update"] <= start_update]
        atomic_write_text(lay.rl_curve, "".join(
            json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n" for r in kept))

        def on_update(u, policy, opt, stats, vocab, reference):
            true_ret, se = P.expected_true_return(policy, episodes, vocab)
            _append_jsonl(lay.rl_curve, {
                "update": u, "mean_reward": stats.mean_reward, "kl": stats.kl,
                "clip_fraction": stats.clip_fraction, "objective": stats.objective,
                "true_return": true_ret, "true_return_se": se})
            if u % POLICY_SNAPSHOT_EVERY == 0 and u < cfg.adapt.updates:
                R.write_arrays(lay.policy_partial, _policy_arrays(policy, opt), {
                    "kind": "policy_partial", "adapt_key": key, "update": u,
                    "optimizer": {"step_count": opt.step_count, "lr": opt.lr,
                                  "weight_decay": opt.weight_decay}})

        policy, reference, _ = adapt_policy(cfg, states, reward_fn, on_update=on_update,
                                            start=start, start_update=start_update)
        P.save_policy(policy, lay.policy_checkpoint)
        lay.policy_partial.unlink(missing_ok=True)
        atomic_write_text(lay.policy_eval, _canonical_json(
            policy_summary(cfg, policy, reference, episodes)))
        return [lay.policy_checkpoint, lay.rl_curve, lay.policy_eval]

    return ctx.run_stage("adapt-policy", inputs, body)


def policy_summary(cfg: ExperimentConfig, policy: P.PolicyParams, reference: P.PolicyParams,
                   episodes: np.ndarray) -> dict:
    vocab = make_action_vocab(cfg.env, cfg.adapt.vocab_size)
    seed = cfg.seed + cfg.adapt.eval_seed_offset
    out = {"reward_method": cfg.adapt.reward_method, "updates": cfg.adapt.updates,
           "eval_episodes": int(episodes.shape[0])}
    for name, pol in (("reference", reference), ("adapted", policy)):
        exact, exact_se = P.expected_true_return(pol, episodes, vocab)
        mc, mc_se = P.evaluate_policy(pol, episodes, vocab, seed=seed, samples_per_episode=4)
        out[name] = {"expected_true_return": exact, "expected_true_return_se": exact_se,
                     "sampled_true_return": mc, "sampled_true_return_se": mc_se}
    flat = episodes.reshape(-1, episodes.shape[-1])
    out["final_kl"] = P.kl_divergence(policy, reference, flat)
    out["improvement"] = out["adapted"]["expected_true_return"] - out["reference"]["expected_true_return"]
    return out


def cmd_report(ctx: Context) -> bool:
    lay = ctx.layout

    def inputs():
        try:
            h = ctx.verify_inputs("report", "eval-reward")
        except MissingPrerequisite as exc:
            raise MissingPrerequisite(f"no evaluation artifacts to report: {exc}") from exc
        if "adapt-policy" in ctx.manifest.stages:
            h.update(ctx.verify_inputs("report", "adapt-policy", [lay.rel(lay.policy_eval)]))
        return h

    def body():
        lay.reports.mkdir(parents=True, exist_ok=True)
        evaluated = ctx.manifest.stages["eval-reward"]["outputs"]
        rows: list[EvalReport | str] = []
        for spec in ctx.cfg.method_specs:
            path = lay.eval_json(spec.tag)
            if lay.rel(path) not in evaluated:
                if not ctx.partial:
                    raise MissingPrerequisite(f"no evaluation for {spec.tag}; use --partial for a gap row")
                rows.append(spec.tag)
                continue
            rows.append(EvalReport.from_dict(json.loads(path.read_text(encoding="utf-8"))))
        if all(isinstance(r, str) for r in rows):
            raise MissingPrerequisite("no evaluation artifacts to report")
        csv_path, json_path = emit_report(rows, lay.reports / "report")
        outputs = [csv_path, json_path]
        if lay.policy_eval.exists() and "adapt-policy" in ctx.manifest.stages:
            dst = lay.reports / "policy.json"
            shutil.copyfile(lay.policy_eval, dst)
            outputs.append(dst)
        return outputs

    return ctx.run_stage("report", inputs, body)


COMMANDS = {
    "generate": cmd_generate,
    "train-reward": cmd_train_reward,
    "eval-reward": cmd_eval_reward,
    "adapt-policy": cmd_adapt_policy,
    "report": cmd_report,
}


def run_stages(cfg: ExperimentConfig, stages, force: bool = False, partial: bool = False) -> list[str]:
    """Run ``stages`` in order under the workdir lock; returns the stages that actually ran."""
    ctx = open_context(cfg, force, partial)
    ctx.layout.root.mkdir(parents=True, exist_ok=True)
    ran = []
    with workdir_lock(ctx.layout.lock):
        ctx.manifest = Manifest.load(ctx.layout.manifest)
        for stage in stages:
            if COMMANDS[stage](ctx):
                ran.append(stage)
    return ran
