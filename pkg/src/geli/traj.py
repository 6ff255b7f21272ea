"""Episodic trajectory data model, JSONL ingestion, splitting and text hashing."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class TrajectoryFormatError(ValueError):
    """Raised when a trajectory file or record violates the schema."""


class SplitTag(str, Enum):
    REWARD_TRAIN = "reward_train"
    REWARD_TEST = "reward_test"
    POLICY_TRAIN = "policy_train"


@dataclass(frozen=True)
class FeatureSpec:
    dimension: int = 256
    mode: str = "precomputed"  # or "hashed_text"
    hash_seed: int = 0

    def __post_init__(self):
        if self.dimension <= 0:
            raise ValueError(f"feature dimension must be positive, got {self.dimension}")
        if self.mode not in ("precomputed", "hashed_text"):
            raise ValueError(f"unknown feature mode {self.mode!r}")


@dataclass(frozen=True, eq=False)
class Step:
    state_features: np.ndarray
    action_features: np.ndarray
    mm_label: int | None = None
    raw_state_text: str | None = None
    raw_action_text: str | None = None

    def __post_init__(self):
        s = np.asarray(self.state_features, dtype=np.float64)
        a = np.asarray(self.action_features, dtype=np.float64)
        if s.ndim != 1 or a.ndim != 1 or s.shape != a.shape:
            raise TrajectoryFormatError(
                f"state/action features must be 1-D of equal length, got {s.shape} and {a.shape}")
        if self.mm_label is not None and self.mm_label not in (0, 1):
            raise TrajectoryFormatError(f"mm_label must be 0, 1 or None, got {self.mm_label!r}")
        s.setflags(write=False)
        a.setflags(write=False)
        object.__setattr__(self, "state_features", s)
        object.__setattr__(self, "action_features", a)

    @property
    def dim(self) -> int:
        return self.state_features.shape[0]

    @property
    def joint_features(self) -> np.ndarray:
        return np.concatenate([self.state_features, self.action_features])


@dataclass(frozen=True, eq=False)
class Trajectory:
    steps: tuple[Step, ...]
    global_return: float

    def __post_init__(self):
        steps = tuple(self.steps)
        if not steps:
            raise TrajectoryFormatError("a trajectory needs at least one step")
        if not math.isfinite(self.global_return):
            raise TrajectoryFormatError(f"global return must be finite, got {self.global_return}")
        if len({s.dim for s in steps}) != 1:
            raise TrajectoryFormatError("steps within a trajectory disagree on feature dimension")
        object.__setattr__(self, "steps", steps)
        object.__setattr__(self, "global_return", float(self.global_return))

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def horizon(self) -> int:
        return len(self.steps)

    @property
    def dim(self) -> int:
        return self.steps[0].dim

    @cached_property
    def joint(self) -> np.ndarray:
        """(T, 2*D) read-only matrix of concatenated state/action features."""
        m = np.stack([s.joint_features for s in self.steps])
        m.setflags(write=False)
        return m

    def labels(self) -> list[int | None]:
        return [s.mm_label for s in self.steps]


@dataclass(frozen=True, eq=False)
class Dataset:
    trajectories: tuple[Trajectory, ...]
    split_tag: SplitTag = SplitTag.REWARD_TRAIN
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        trajs = tuple(self.trajectories)
        if not trajs:
            raise TrajectoryFormatError("dataset is empty")
        dims = {t.dim for t in trajs}
        if len(dims) != 1:
            raise TrajectoryFormatError(f"trajectories disagree on feature dimension: {sorted(dims)}")
        object.__setattr__(self, "trajectories", trajs)
        object.__setattr__(self, "split_tag", SplitTag(self.split_tag))

    def __len__(self) -> int:
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)

    def __getitem__(self, i):
        return self.trajectories[i]

    @property
    def feature_dim(self) -> int:
        return self.trajectories[0].dim

    @property
    def returns(self) -> np.ndarray:
        return np.array([t.global_return for t in self.trajectories])

    def with_tag(self, tag: SplitTag | str) -> "Dataset":
        return Dataset(self.trajectories, SplitTag(tag), dict(self.meta))

    def has_labels(self) -> bool:
        return any(s.mm_label is not None for t in self.trajectories for s in t.steps)


def _token_bucket(token: str, dimension: int, seed: int) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8,
                             key=int(seed).to_bytes(8, "little", signed=True)).digest()
    return int.from_bytes(digest, "little") % dimension


def hash_featurize(text: str, spec: FeatureSpec) -> np.ndarray:
    """Bag-of-tokens hashing into ``spec.dimension`` buckets, L2-normalized.

    Tokens are whitespace-separated and bucketed with a seeded BLAKE2b hash,
    so the mapping is stable across processes and platforms. Empty text maps
    to the zero vector.
    """
    if spec.mode != "hashed_text":
        raise ValueError("hash_featurize requires a FeatureSpec in hashed_text mode")
    vec = np.zeros(spec.dimension, dtype=np.float64)
    for tok in text.split():
        vec[_token_bucket(tok, spec.dimension, spec.hash_seed)] += 1.0
    norm = np.linalg.norm(vec)
    if norm > 0:
        vec /= norm
    return vec


def _parse_step(raw: dict, spec: FeatureSpec, history: list[str], lineno: int) -> Step:
    if not isinstance(raw, dict):
        raise TrajectoryFormatError(f"line {lineno}: step must be an object")
    state, action = raw.get("state"), raw.get("action")
    state_vec, action_vec = raw.get("state_vec"), raw.get("action_vec")
    mm = raw.get("mm")
    if mm is not None and mm not in (0, 1):
        raise TrajectoryFormatError(f"line {lineno}: mm must be 0, 1 or null, got {mm!r}")

    if (state is None) == (state_vec is None) or (action is None) == (action_vec is None):
        raise TrajectoryFormatError(
            f"line {lineno}: exactly one of state/state_vec and of action/action_vec must be set")

    if spec.mode == "precomputed":
        if state_vec is None or action_vec is None:
            raise TrajectoryFormatError(
                f"line {lineno}: step lacks state_vec/action_vec required in precomputed mode")
        s = np.asarray(state_vec, dtype=np.float64)
        a = np.asarray(action_vec, dtype=np.float64)
        if s.shape != (spec.dimension,) or a.shape != (spec.dimension,):
            raise TrajectoryFormatError(
                f"line {lineno}: feature dimension {s.shape}/{a.shape} does not match {spec.dimension}")
        return Step(s, a, mm, state, action)

    if state is None or action is None:
        raise TrajectoryFormatError(
            f"line {lineno}: step lacks state/action text required in hashed_text mode")
    # state features hash the whole dialogue prefix, not just the latest turn
    prefix = " ".join(history + [state])
    s = hash_featurize(prefix, spec)
    a = hash_featurize(action, spec)
    history.extend([state, action])
    return Step(s, a, mm, state, action)


def parse_record(line: str, spec: FeatureSpec, lineno: int = 1) -> Trajectory:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise TrajectoryFormatError(f"line {lineno}: malformed JSON ({exc.msg})") from exc
    if not isinstance(obj, dict) or "return" not in obj or "steps" not in obj:
        raise TrajectoryFormatError(f"line {lineno}: record needs 'return' and 'steps'")
    ret = obj["return"]
    if isinstance(ret, bool) or not isinstance(ret, (int, float)):
        raise TrajectoryFormatError(f"line {lineno}: return must be a number")
    raw_steps = obj["steps"]
    if not isinstance(raw_steps, list) or not raw_steps:
        raise TrajectoryFormatError(f"line {lineno}: steps must be a nonempty list")
    history: list[str] = []
    steps = [_parse_step(r, spec, history, lineno) for r in raw_steps]
    try:
        return Trajectory(tuple(steps), float(ret))
    except TrajectoryFormatError as exc:
        raise TrajectoryFormatError(f"line {lineno}: {exc}") from exc


def load_jsonl(path: str | Path, spec: FeatureSpec,
               split_tag: SplitTag | str = SplitTag.REWARD_TRAIN) -> Dataset:
    """Read one trajectory per line. Blank lines are skipped."""
    trajs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            trajs.append(parse_record(line, spec, lineno))
    if not trajs:
        raise TrajectoryFormatError(f"{path}: empty dataset")
    return Dataset(tuple(trajs), split_tag)


def _floats(vec: np.ndarray) -> list[float]:
    # repr round-trips doubles exactly through json
    return [float(x) for x in vec]


def trajectory_record(traj: Trajectory, with_vectors: bool = True) -> dict:
    """Schema record for ``traj``; either vectors or raw text is written, never both."""
    steps = []
    for s in traj.steps:
        steps.append({
            "state": None if with_vectors else s.raw_state_text,
            "action": None if with_vectors else s.raw_action_text,
            "state_vec": _floats(s.state_features) if with_vectors else None,
            "action_vec": _floats(s.action_features) if with_vectors else None,
            "mm": s.mm_label,
        })
    return {"return": traj.global_return, "steps": steps}


def write_jsonl(dataset: Dataset | Iterable[Trajectory], path: str | Path,
                with_vectors: bool = True) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for traj in dataset:
            fh.write(json.dumps(trajectory_record(traj, with_vectors), separators=(",", ":")))
            fh.write("\n")


def split_indices(n: int, fractions: Sequence[float], seed: int) -> tuple[np.ndarray, ...]:
    """Seeded shuffle of ``range(n)`` cut into three parts by ``fractions``."""
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise ValueError(f"need three positive fractions, got {tuple(fractions)}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")
    order = np.random.default_rng(seed).permutation(n)
    n0 = int(round(fractions[0] * n))
    n1 = int(round(fractions[1] * n))
    sizes = (n0, n1, n - n0 - n1)
    if min(sizes) <= 0:
        raise ValueError(f"split of {n} trajectories by {tuple(fractions)} leaves an empty part {sizes}")
    return tuple(np.split(order, np.cumsum(sizes)[:-1]))


def split_dataset(d: Dataset, fractions: Sequence[float], seed: int
                  ) -> tuple[Dataset, Dataset, Dataset]:
    """Partition trajectories (never steps) into reward-train, reward-test and policy-train sets."""
    parts = split_indices(len(d), fractions, seed)
    tags = (SplitTag.REWARD_TRAIN, SplitTag.REWARD_TEST, SplitTag.POLICY_TRAIN)
    return tuple(Dataset(tuple(d.trajectories[i] for i in idx), tag) for idx, tag in zip(parts, tags))
