"""Input checks shared by the estimators and the command line."""
from __future__ import annotations

from typing import List, Optional, Sequence

import numpy as np

from .model import PomdpParams, Trajectory


def check_dataset(dataset, n_actions: Optional[int] = None, n_dims: Optional[int] = None,
                  require_behavior: bool = False, min_size: int = 1) -> List[Trajectory]:
    """Validated list of trajectories with consistent shapes."""
    if isinstance(dataset, Trajectory):
        dataset = [dataset]
    data = list(dataset)
    if len(data) < min_size:
        raise ValueError(f"need at least {min_size} trajectories, got {len(data)}")
    for i, tr in enumerate(data):
        if not isinstance(tr, Trajectory):
            raise TypeError(f"item {i} is {type(tr).__name__}, expected Trajectory")
        if n_dims is not None and tr.n_dims != n_dims:
            raise ValueError(f"trajectory {i} has {tr.n_dims} observation dims, expected {n_dims}")
        if n_actions is not None and tr.actions.max(initial=0) >= n_actions:
            raise ValueError(f"trajectory {i} uses action {tr.actions.max()} >= n_actions={n_actions}")
        if require_behavior and tr.behavior_probs is None:
            raise ValueError(f"trajectory {i} has no behavior_probs")
        if n_actions is not None and tr.behavior_probs is not None and tr.behavior_probs.shape[1] != n_actions:
            raise ValueError(f"trajectory {i} behavior_probs width differs from n_actions={n_actions}")
    if n_dims is None and data:
        D = data[0].n_dims
        if any(tr.n_dims != D for tr in data):
            raise ValueError("observation dimension differs across trajectories")
    return data


def check_compatible(params: PomdpParams, dataset: Sequence[Trajectory]) -> None:
    check_dataset(dataset, n_actions=params.n_actions, n_dims=params.n_dims)


def check_probability(x, name: str, closed: bool = True) -> float:
    x = float(x)
    ok = 0.0 <= x <= 1.0 if closed else 0.0 <= x < 1.0
    if not ok:
        raise ValueError(f"{name} must lie in [0, 1{']' if closed else ')'}, got {x}")
    return x


def check_positive_int(x, name: str, minimum: int = 1) -> int:
    if isinstance(x, (bool, np.bool_)) or int(x) != x or x < minimum:
        raise ValueError(f"{name} must be an integer >= {minimum}, got {x!r}")
    return int(x)
