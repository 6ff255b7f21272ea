"""Decomposition error, conditional-reward gap, constant baselines and report files."""

from __future__ import annotations

import csv
import io
import json
import math
from collections import Counter
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from .synth import GroundTruth, OracleReport, oracle_eval
from .traj import Dataset, Trajectory

CSV_COLUMNS = ("method_tag", "l_ge_mse", "l_ge_mae", "mean_r_pos", "mean_r_nonpos",
               "delta_r_li", "oracle_pearson", "oracle_mse", "oracle_sign_agreement")
GAP = "NA"


@dataclass(frozen=True)
class ConstantBaseline:
    kind: str
    per_step_value: float

    def step_rewards(self, traj: Trajectory) -> np.ndarray:
        return np.full(len(traj), self.per_step_value)


@dataclass(frozen=True)
class StepRewardModel:
    """Adapter for a bare callable ``traj -> per-step rewards``."""
    fn: object

    def step_rewards(self, traj):
        return np.asarray(self.fn(traj), dtype=np.float64)


@dataclass
class EvalReport:
    method_tag: str
    l_ge_mse: float
    l_ge_mae: float
    delta_r_li: float
    mean_reward_positive: float
    mean_reward_nonpositive: float
    oracle: OracleReport | None = None

    def row(self) -> dict:
        o = self.oracle
        return {
            "method_tag": self.method_tag,
            "l_ge_mse": self.l_ge_mse,
            "l_ge_mae": self.l_ge_mae,
            "mean_r_pos": self.mean_reward_positive,
            "mean_r_nonpos": self.mean_reward_nonpositive,
            "delta_r_li": self.delta_r_li,
            "oracle_pearson": o.pearson_r if o else None,
            "oracle_mse": o.per_step_mse if o else None,
            "oracle_sign_agreement": o.sign_agreement if o else None,
        }

    def to_dict(self) -> dict:
        d = asdict(self)
        d["oracle"] = self.oracle.to_dict() if self.oracle else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        d = dict(d)
        if d.get("oracle"):
            d["oracle"] = OracleReport(**d["oracle"])
        return cls(**d)


def _rewards(model, dataset: Dataset) -> list[np.ndarray]:
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    return [np.asarray(model.step_rewards(t), dtype=np.float64) for t in dataset]


def eval_decomposition(model, dataset: Dataset) -> tuple[float, float]:
    """(MSE, MAE) between each return and the sum of the model's step rewards."""
    sums = np.array([r.sum() for r in _rewards(model, dataset)])
    resid = dataset.returns - sums
    return float(np.mean(resid ** 2)), float(np.mean(np.abs(resid)))


def conditional_means(rewards: Sequence[np.ndarray], dataset: Dataset) -> tuple[float, float]:
    pos, neg = [], []
    for r, traj in zip(rewards, dataset):
        for value, step in zip(r, traj.steps):
            if step.mm_label == 1:
                pos.append(value)
            elif step.mm_label == 0:
                neg.append(value)
    if not pos:
        raise ValueError("no positive-affect (label 1) steps to condition on")
    if not neg:
        raise ValueError("no non-positive (label 0) steps to condition on")
    return float(np.mean(pos)), float(np.mean(neg))


def eval_delta_li(model, dataset: Dataset) -> dict:
    """Mean predicted reward on positive-labeled minus non-positive-labeled steps."""
    mp, mn = conditional_means(_rewards(model, dataset), dataset)
    return {"mean_reward_positive": mp, "mean_reward_nonpositive": mn, "delta_r_li": mp - mn}


def evaluate(model, dataset: Dataset, method_tag: str, truth: GroundTruth | None = None
             ) -> EvalReport:
    mse, mae = eval_decomposition(model, dataset)
    delta = eval_delta_li(model, dataset)
    oracle = oracle_eval(model, dataset, truth) if truth is not None else None
    return EvalReport(method_tag, mse, mae, delta["delta_r_li"], delta["mean_reward_positive"],
                      delta["mean_reward_nonpositive"], oracle)


# -------------------------------------------------------- baselines ----

def value_grid_step(values: np.ndarray) -> float:
    """Resolution used to bucket returns before taking a mode.

    If the distinct values sit on a lattice (every gap an integer multiple
    of the smallest gap) that lattice spacing is used; otherwise a
    Freedman-Diaconis histogram width.
    """
    u = np.unique(values)
    if u.size < 2:
        return 1.0
    gaps = np.diff(u)
    g = gaps.min()
    ratios = gaps / g
    if np.allclose(ratios, np.round(ratios), atol=1e-9, rtol=0):
        return float(g)
    q75, q25 = np.percentile(values, [75, 25])
    width = 2.0 * (q75 - q25) * values.size ** (-1.0 / 3.0)
    return float(width) if width > 0 else float(g)


def fit_constant_baseline(dataset: Dataset, kind: str) -> ConstantBaseline:
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    returns = dataset.returns
    lengths = np.array([len(t) for t in dataset], dtype=np.float64)
    if kind == "mean":
        return ConstantBaseline("mean", float(np.mean(returns / lengths)))
    if kind == "mode":
        step = value_grid_step(returns)
        cells = np.round(returns / step).astype(np.int64)
        counts = Counter(cells.tolist())
        best = max(counts.values())
        mode_cell = min(c for c, k in counts.items() if k == best)
        return ConstantBaseline("mode", float(mode_cell * step / lengths.mean()))
    raise ValueError(f"unknown baseline kind {kind!r}; expected 'mean' or 'mode'")


# ---------------------------------------------------------- reports ----

def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else str(v)
    return str(v)


BASELINE_NOTE = ("Mean/Mode rows are artifact-defined constant per-step predictors: mean of R/T, "
                 "and the grid-rounded modal return divided by the mean horizon.")


def report_tables(reports: Sequence[EvalReport | str]) -> tuple[str, str]:
    """CSV and JSON text for one row per method; bare strings become gap rows."""
    if not reports:
        raise ValueError("no reports to emit")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    rows = []
    for rep in reports:
        if isinstance(rep, str):
            row = {c: GAP for c in CSV_COLUMNS}
            row["method_tag"] = rep
        else:
            row = rep.row()
        rows.append(row)
        writer.writerow([_cell(row[c]) for c in CSV_COLUMNS])
    doc = {"columns": list(CSV_COLUMNS), "rows": rows, "notes": [BASELINE_NOTE]}
    return buf.getvalue(), json.dumps(doc, indent=2, sort_keys=False) + "\n"


def emit_report(reports: Sequence[EvalReport | str], path: str | Path) -> tuple[Path, Path]:
    """Write ``<path>.csv`` and ``<path>.json``; returns both paths."""
    path = Path(path)
    csv_text, json_text = report_tables(reports)
    csv_path, json_path = path.with_suffix(".csv"), path.with_suffix(".json")
    try:
        csv_path.write_text(csv_text, encoding="utf-8")
        json_path.write_text(json_text, encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc}") from exc
    return csv_path, json_path


def dump_step_rewards(model, dataset: Dataset, path: str | Path) -> None:
    """Raw per-step predictions with labels, one trajectory per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for r, traj in zip(_rewards(model, dataset), dataset):
            rec = {"return": traj.global_return, "r": [float(x) for x in r],
                   "mm": traj.labels()}
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def report_from_dump(path: str | Path) -> dict:
    """Recompute the decomposition and gap metrics from a per-step dump."""
    resid, pos, neg = [], [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            resid.append(rec["return"] - math.fsum(rec["r"]))
            for value, lab in zip(rec["r"], rec["mm"]):
                (pos if lab == 1 else neg if lab == 0 else []).append(value)
    resid = np.array(resid)
    return {"l_ge_mse": float(np.mean(resid ** 2)), "l_ge_mae": float(np.mean(np.abs(resid))),
            "delta_r_li": float(np.mean(pos) - np.mean(neg))}
