"""On-disk formats: JSONL trajectory files, JSON checkpoints, CSV tables.

Floats are written with Python's shortest round-trip repr, so reading a file
back reproduces every value bit for bit.  MISSING observations are ``null``.
"""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .model import PomdpParams, Trajectory
from .solver import ValueFunction

DATASET_FORMAT = "pcpomdp-trajectories"
CHECKPOINT_FORMAT = "pcpomdp-checkpoint"
FORMAT_VERSION = 1


class FormatError(ValueError):
    pass


def _nullable(x: np.ndarray):
    """Nested lists with NaN mapped to None."""
    if x.ndim == 0:
        v = float(x)
        return None if math.isnan(v) else v
    return [_nullable(r) for r in x]


def _from_nullable(x) -> np.ndarray:
    return np.array(x, dtype=object).astype(float) if x is not None else None


# ---------------------------------------------------------------- datasets


def dataset_header(n_actions: int, n_dims: int, gamma: float, **extra) -> dict:
    head = {"format": DATASET_FORMAT, "version": FORMAT_VERSION, "n_actions": int(n_actions),
            "n_dims": int(n_dims), "gamma": float(gamma)}
    head.update(extra)
    return head


def trajectory_record(tr: Trajectory) -> dict:
    return {
        "id": tr.id,
        "actions": [int(a) for a in tr.actions],
        "observations": _nullable(tr.observations),
        "rewards": [float(r) for r in tr.rewards],
        "behavior_probs": None if tr.behavior_probs is None else _nullable(tr.behavior_probs),
    }


def write_dataset(path, dataset: Sequence[Trajectory], n_actions: int, n_dims: Optional[int] = None,
                  gamma: float = 0.9, **extra) -> Path:
    path = Path(path)
    if n_dims is None:
        if not dataset:
            raise ValueError("n_dims is required for an empty dataset")
        n_dims = dataset[0].n_dims
    with path.open("w") as f:
        f.write(json.dumps(dataset_header(n_actions, n_dims, gamma, **extra), sort_keys=True) + "\n")
        for tr in dataset:
            f.write(json.dumps(trajectory_record(tr), sort_keys=True) + "\n")
    return path


def read_dataset(path) -> Tuple[dict, List[Trajectory]]:
    """Returns ``(header, trajectories)``."""
    path = Path(path)
    with path.open() as f:
        lines = [ln for ln in f if ln.strip()]
    if not lines:
        raise FormatError(f"{path}: empty file")
    header = json.loads(lines[0])
    if header.get("format") != DATASET_FORMAT:
        raise FormatError(f"{path}: not a trajectory file")
    if header.get("version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {header.get('version')}")
    D = header["n_dims"]
    out = []
    for i, ln in enumerate(lines[1:], start=2):
        rec = json.loads(ln)
        try:
            obs = _from_nullable(rec["observations"]).reshape(-1, D)
            beh = rec.get("behavior_probs")
            out.append(Trajectory(rec["actions"], obs, rec["rewards"],
                                  behavior_probs=None if beh is None else _from_nullable(beh),
                                  id=rec.get("id")))
        except (KeyError, ValueError) as e:
            raise FormatError(f"{path}:{i}: {e}") from e
    return header, out


# ------------------------------------------------------------- checkpoints


def params_to_dict(p: PomdpParams) -> dict:
    return {"tau0": p.tau0.tolist(), "tau": p.tau.tolist(), "mu": p.mu.tolist(), "sigma": p.sigma.tolist(),
            "reward": p.reward.tolist(), "gamma": float(p.gamma), "initial_action": int(p.initial_action)}


def params_from_dict(d: dict) -> PomdpParams:
    return PomdpParams(np.array(d["tau0"]), np.array(d["tau"]), np.array(d["mu"]), np.array(d["sigma"]),
                       np.array(d["reward"]), gamma=d["gamma"], initial_action=d["initial_action"])


def value_function_to_dict(vf: ValueFunction) -> dict:
    return {"alphas": vf.alphas.tolist(), "action_dists": vf.action_dists.tolist(),
            "beliefs": vf.beliefs.tolist(), "temperature": float(vf.temperature), "soft": bool(vf.soft)}


def value_function_from_dict(d: dict) -> ValueFunction:
    return ValueFunction(np.array(d["alphas"]), np.array(d["action_dists"]), np.array(d["beliefs"]),
                         temperature=d["temperature"], soft=d["soft"])


def _clean(x):
    """JSON-safe copy: non-finite floats become strings so output stays strict JSON."""
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else repr(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def dumps(obj) -> str:
    return json.dumps(_clean(obj), sort_keys=True, indent=1) + "\n"


def write_checkpoint(path, params: PomdpParams, vf: Optional[ValueFunction] = None, **meta) -> Path:
    doc = {"format": CHECKPOINT_FORMAT, "version": FORMAT_VERSION, "params": params_to_dict(params),
           "value_function": None if vf is None else value_function_to_dict(vf), "meta": meta}
    path = Path(path)
    path.write_text(dumps(doc))
    return path


def read_checkpoint(path):
    """Returns ``(params, value_function or None, meta)``."""
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{path}: not a checkpoint")
    if doc.get("version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {doc.get('version')}")
    vf = doc.get("value_function")
    return params_from_dict(doc["params"]), None if vf is None else value_function_from_dict(vf), doc.get("meta", {})


# -------------------------------------------------------------------- CSV


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def write_csv(path, rows: Iterable[dict], columns: Sequence[str]) -> Path:
    path = Path(path)
    with path.open("w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _cell(row.get(k, "")) for k in columns})
    return path


TRACE_COLUMNS = ("restart", "iteration", "loglik_rescaled", "policy_value", "ess_total", "total", "wall_time")


def write_trace(path, trace: Sequence[dict]) -> Path:
    return write_csv(path, trace, TRACE_COLUMNS)
