"""Command line: ``pcpomdp {generate,train,evaluate,forecast,respecify-reward}``.

Run configs are flat JSON objects; ``--set key=value`` overrides single keys
(values are parsed as JSON, falling back to plain strings).  Every output of
``train`` lands under one run directory next to a ``manifest.json`` that
lists each artifact with its seed.  No output carries timestamps or wall
times, so repeated runs with the same seed are byte-identical.

Exit codes: 0 success, 2 config error, 3 numerical failure, 4 partial run.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import envs
from .exceptions import NumericalError
from .io import (FormatError, dumps, read_checkpoint, read_dataset, write_checkpoint, write_csv,
                 write_dataset)
from .model import Trajectory, forecast, learn_rewards, log_marginal_likelihood, n_observed
from .objective import MODES, ObjectiveConfig, policy_probs, train
from .ope import cwpdis_value
from .solver import solve_hard
from .validation import check_compatible, check_dataset

log = logging.getLogger("pcpomdp")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_PARTIAL = 0, 2, 3, 4

RESULT_COLUMNS = ("fold", "mode", "lambda", "lambda_ess", "status", "train_loglik_per_scalar",
                  "test_loglik_per_scalar", "cwpdis_value_test", "ess_total_test")
CLI_TRACE_COLUMNS = ("restart", "iteration", "loglik_rescaled", "policy_value", "ess_total", "total")
FORECAST_COLUMNS = ("dimension", "horizon", "mae", "n")
DEFAULT_LAMBDAS = (10 ** -2.5, 10 ** -1.5, 10 ** -0.5)


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------ rewards


@dataclass
class PiecewiseLinearReward:
    """Reward as a piecewise-linear function of one observation dimension.

    Inputs outside the breakpoints are clamped to the end values.
    """

    dimension: int
    breakpoints: List[Tuple[float, float]]
    r_min: float = -math.inf
    r_max: float = math.inf

    def __post_init__(self):
        pts = [(float(x), float(r)) for x, r in self.breakpoints]
        if not pts:
            raise ConfigError("reward needs at least one breakpoint")
        xs = [x for x, _ in pts]
        if any(b <= a for a, b in zip(xs, xs[1:])):
            raise ConfigError("reward breakpoints must have strictly increasing x")
        if any(not self.r_min <= r <= self.r_max for _, r in pts):
            raise ConfigError(f"reward values must lie in [{self.r_min}, {self.r_max}]")
        self.breakpoints = pts
        self.dimension = int(self.dimension)

    @classmethod
    def from_dict(cls, d: dict) -> "PiecewiseLinearReward":
        d = dict(d)
        unknown = set(d) - {"dimension", "breakpoints", "r_min", "r_max"}
        if unknown:
            raise ConfigError(f"unknown reward keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from e

    def __call__(self, x):
        xs, rs = zip(*self.breakpoints)
        return np.interp(x, xs, rs)

    def apply(self, dataset: Sequence[Trajectory]) -> List[Trajectory]:
        """Rewards from the next observation of ``dimension`` (the current one
        on the final step), carrying the last observed value over MISSING
        entries.  Steps with nothing observed yet get reward 0."""
        out = []
        for tr in dataset:
            if self.dimension >= tr.n_dims:
                raise ConfigError(f"reward dimension {self.dimension} >= n_dims {tr.n_dims}")
            x = tr.observations[:, self.dimension].copy()
            last = np.nan
            for t in range(len(x)):
                last = x[t] if not np.isnan(x[t]) else last
                x[t] = last
            nxt = np.append(x[1:], x[-1])
            r = np.where(np.isnan(nxt), 0.0, self(np.nan_to_num(nxt)))
            out.append(Trajectory(tr.actions, tr.observations, r, tr.behavior_probs, tr.id))
        return out


# ------------------------------------------------------------------- config


_OBJECTIVE_KEYS = {f.name for f in fields(ObjectiveConfig)} - {"lam", "lam_ess", "mode", "seed", "delta",
                                                                "n_states"}


@dataclass
class RunConfig:
    dataset: Optional[str] = None
    env: Optional[str] = None
    n_traj: int = 1000
    env_seed: int = 0
    env_options: dict = field(default_factory=dict)
    n_states: int = 2
    n_actions: Optional[int] = None
    n_dims: Optional[int] = None
    modes: List[str] = field(default_factory=lambda: list(MODES))
    lambdas: List[float] = field(default_factory=lambda: list(DEFAULT_LAMBDAS))
    lambda_ess: List[float] = field(default_factory=lambda: [0.0])
    delta: float = 0.0
    folds: int = 1
    out_dir: str = "run"
    seed: int = 0
    reward: Optional[dict] = None
    objective: dict = field(default_factory=dict)

    def validate(self, base: Path = Path(".")) -> "RunConfig":
        if (self.dataset is None) == (self.env is None):
            raise ConfigError("exactly one of 'dataset' and 'env' must be given")
        if self.dataset is not None and not (base / self.dataset).exists():
            raise ConfigError(f"dataset not found: {self.dataset}")
        if self.env is not None and self.env not in envs.VARIANTS:
            raise ConfigError(f"env must be one of {envs.VARIANTS}")
        if not self.modes or not self.lambdas or not self.lambda_ess:
            raise ConfigError("modes, lambdas and lambda_ess must be non-empty")
        bad = [m for m in self.modes if m not in MODES]
        if bad:
            raise ConfigError(f"unknown modes {bad}")
        if self.folds < 1:
            raise ConfigError("folds must be >= 1")
        if any(x < 0 for x in list(self.lambdas) + list(self.lambda_ess)):
            raise ConfigError("lambdas must be non-negative")
        unknown = set(self.objective) - _OBJECTIVE_KEYS
        if unknown:
            raise ConfigError(f"unknown objective keys: {sorted(unknown)}")
        if self.reward is not None:
            PiecewiseLinearReward.from_dict(self.reward)
        self.objective_config(self.modes[0], self.lambdas[0], self.lambda_ess[0])
        return self

    def objective_config(self, mode, lam, lam_ess) -> ObjectiveConfig:
        try:
            return ObjectiveConfig(lam=lam, lam_ess=lam_ess, mode=mode, seed=self.seed, delta=self.delta,
                                   n_states=self.n_states, **self.objective)
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        """Flat document: ObjectiveConfig fields may sit at top level."""
        d = dict(d)
        known = {f.name for f in fields(cls)}
        obj = dict(d.pop("objective", {}))
        for k in list(d):
            if k in _OBJECTIVE_KEYS and k not in known:
                obj[k] = d.pop(k)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(objective=obj, **d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(d.pop("objective"))
        return d


def _parse_value(s: str):
    try:
        return json.loads(s)
    except json.JSONDecodeError:
        return s


def load_run_config(path: Optional[str], overrides: Sequence[str] = ()) -> RunConfig:
    doc = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
    for item in overrides:
        key, sep, val = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        doc[key.strip()] = _parse_value(val)
    base = Path(path).parent if path is not None else Path(".")
    return RunConfig.from_dict(doc).validate(base)


# ------------------------------------------------------------------ helpers


def fold_splits(ids: Sequence[str], folds: int, seed: int) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Deterministic ``(train_idx, test_idx)`` pairs; the test parts partition
    the dataset.  ``folds=1`` trains and tests on everything."""
    n = len(ids)
    if folds == 1:
        idx = np.arange(n)
        return [(idx, idx)]
    if folds > n:
        raise ConfigError(f"folds={folds} exceeds dataset size {n}")
    order = np.argsort(np.asarray([str(i) for i in ids]), kind="stable")
    perm = order[np.random.default_rng(seed).permutation(n)]
    parts = np.array_split(perm, folds)
    return [(np.sort(np.concatenate(parts[:k] + parts[k + 1:])), np.sort(parts[k])) for k in range(folds)]


def _grid(cfg: RunConfig):
    """Cells as ``(mode, lam, lam_ess)``.  Two-stage ignores both weights and
    value-only ignores ``lam``, so those collapse to a single column value."""
    cells = []
    for mode in cfg.modes:
        if mode == "two_stage":
            cells.append((mode, 0.0, 0.0))
        elif mode == "value_only":
            cells += [(mode, math.inf, e) for e in cfg.lambda_ess]
        else:
            cells += [(mode, lam, e) for lam in cfg.lambdas for e in cfg.lambda_ess]
    return cells


def _load_data(cfg: RunConfig, base: Path):
    if cfg.dataset is not None:
        header, data = read_dataset(base / cfg.dataset)
        A, gamma = header["n_actions"], header["gamma"]
    else:
        spec = envs.TigerSpec(cfg.env, **cfg.env_options)
        data, A, gamma = envs.generate_tiger_dataset(spec, cfg.n_traj, seed=cfg.env_seed), 3, spec.gamma
    if cfg.n_actions is not None and cfg.n_actions != A:
        raise ConfigError(f"n_actions={cfg.n_actions} but data has {A}")
    data = check_dataset(data, n_actions=A, n_dims=cfg.n_dims)
    if cfg.reward is not None:
        data = PiecewiseLinearReward.from_dict(cfg.reward).apply(data)
    return data, A, gamma


def _per_scalar(data, params):
    return log_marginal_likelihood(data, params) / n_observed(data)


def _ope(data, params, vf, delta, gamma):
    if vf is None or any(tr.behavior_probs is None for tr in data):
        return float("nan"), float("nan")
    rep = cwpdis_value(data, policy_probs(data, params, vf, delta), gamma)
    return rep.value, rep.ess_total


def _fmt(x):
    return f"{x:g}" if math.isfinite(x) else "inf"


# ----------------------------------------------------------------- commands


def cmd_generate(args) -> int:
    opts = {}
    if args.missing_frac is not None:
        opts["missing_frac"] = args.missing_frac
    if args.n_dims is not None:
        opts["n_dims"] = args.n_dims
    spec = envs.TigerSpec(args.env, **opts)
    data = envs.generate_tiger_dataset(spec, args.n, seed=args.seed)
    write_dataset(args.out, data, n_actions=3, n_dims=spec.n_dims, gamma=spec.gamma)
    print(f"wrote {len(data)} trajectories to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, args.set or [])
    base = Path(args.config).parent if args.config else Path(".")
    out = Path(args.out) if args.out else base / cfg.out_dir
    data, A, gamma = _load_data(cfg, base)
    cfg.objective.setdefault("gamma", gamma)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out / "traces").mkdir(exist_ok=True)
    (out / "config.json").write_text(dumps(cfg.to_dict()))
    artifacts = [{"path": "config.json", "kind": "config", "seed": cfg.seed}]
    ids = [tr.id if tr.id is not None else str(i) for i, tr in enumerate(data)]
    rows, failures, n_cells = [], 0, 0
    for fold, (tr_idx, te_idx) in enumerate(fold_splits(ids, cfg.folds, cfg.seed)):
        train_set, test_set = [data[i] for i in tr_idx], [data[i] for i in te_idx]
        (out / f"fold{fold}.json").write_text(dumps({"train": [ids[i] for i in tr_idx],
                                                     "test": [ids[i] for i in te_idx]}))
        artifacts.append({"path": f"fold{fold}.json", "kind": "split", "seed": cfg.seed})
        for ci, (mode, lam, lam_ess) in enumerate(_grid(cfg)):
            n_cells += 1
            name = f"fold{fold}_{mode}_{ci:02d}"
            row = {"fold": fold, "mode": mode, "lambda": _fmt(lam), "lambda_ess": _fmt(lam_ess)}
            ocfg = cfg.objective_config(mode, 1.0 if math.isinf(lam) else lam, lam_ess)
            log.info("cell %s: mode=%s lambda=%s lambda_ess=%s", name, mode, row["lambda"], row["lambda_ess"])
            try:
                res = train(train_set, ocfg, A)
                value, ess = _ope(test_set, res.params, res.value_function, ocfg.delta, ocfg.gamma)
                row.update(status="ok", train_loglik_per_scalar=_per_scalar(train_set, res.params),
                           test_loglik_per_scalar=_per_scalar(test_set, res.params),
                           cwpdis_value_test=value, ess_total_test=ess)
            except (NumericalError, FloatingPointError) as e:
                failures += 1
                log.warning("cell %s failed: %s", name, e)
                row.update(status=f"failed: {e}".replace("\n", " "))
                rows.append(row)
                continue
            write_checkpoint(out / "checkpoints" / f"{name}.json", res.params, res.value_function,
                             mode=mode, lam=lam, lam_ess=lam_ess, fold=fold, seed=cfg.seed,
                             best_restart=res.best_restart, objective=list(res.objective))
            write_csv(out / "traces" / f"{name}.csv", res.trace, CLI_TRACE_COLUMNS)
            artifacts += [{"path": f"checkpoints/{name}.json", "kind": "checkpoint", "seed": cfg.seed},
                          {"path": f"traces/{name}.csv", "kind": "trace", "seed": cfg.seed}]
            rows.append(row)
            # rewrite after each cell so a killed run keeps finished rows
            write_csv(out / "results.csv", rows, RESULT_COLUMNS)
    write_csv(out / "results.csv", rows, RESULT_COLUMNS)
    artifacts.append({"path": "results.csv", "kind": "results", "seed": cfg.seed})
    (out / "manifest.json").write_text(dumps({"artifacts": artifacts, "n_cells": n_cells, "failed": failures}))
    print(f"{n_cells - failures}/{n_cells} cells succeeded; results in {out / 'results.csv'}")
    if failures == n_cells:
        return EXIT_NUMERICAL
    return EXIT_PARTIAL if failures else EXIT_OK


def _dataset_or_env(args, n_actions_hint=None):
    if (args.dataset is None) == (args.env is None):
        raise ConfigError("give exactly one of --dataset and --env")
    if args.dataset is not None:
        header, data = read_dataset(args.dataset)
        return header["gamma"], data, None
    spec = envs.TigerSpec(args.env)
    return spec.gamma, envs.generate_tiger_dataset(spec, args.n, seed=args.seed), spec


def cmd_evaluate(args) -> int:
    gamma, data, spec = _dataset_or_env(args)
    report = {}
    if args.policy == "behavior":
        data = check_dataset(data, require_behavior=True)
        report["ope"] = cwpdis_value(data, [tr.behavior_probs for tr in data], gamma).to_dict()
    else:
        if args.checkpoint is None:
            raise ConfigError("--checkpoint is required for --policy model")
        params, vf, _ = read_checkpoint(args.checkpoint)
        if vf is None:
            raise ConfigError("checkpoint has no value function")
        check_compatible(params, data)
        if not args.no_ope:
            data = check_dataset(data, require_behavior=True)
            report["ope"] = cwpdis_value(data, policy_probs(data, params, vf, args.delta), gamma).to_dict()
        if args.rollouts:
            if spec is None:
                raise ConfigError("rollouts need --env")
            policy = envs.ModelPolicy(params, vf, delta=args.delta)
            mean, se = envs.rollout_evaluate(policy, spec, args.rollouts, seed=args.seed)
            report["rollout"] = {"mean": mean, "stderr": se, "n": args.rollouts}
    text = dumps(report)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def forecast_mae(dataset: Sequence[Trajectory], params, prefix: int, horizon: int):
    """Rows ``{dimension, horizon, mae, n}`` over non-MISSING ground truth."""
    D = params.n_dims
    err = np.zeros((horizon, D))
    cnt = np.zeros((horizon, D), dtype=int)
    for tr in dataset:
        h = min(horizon, tr.n_steps - prefix)
        if h < 1:
            continue
        pred = forecast(tr, prefix, h, params)
        truth = tr.observations[prefix: prefix + h]
        ok = ~np.isnan(truth)
        err[:h] += np.where(ok, np.abs(pred - np.nan_to_num(truth)), 0.0)
        cnt[:h] += ok
    if not cnt.any():
        raise ConfigError(f"no trajectory is longer than the prefix ({prefix})")
    return [{"dimension": d, "horizon": k + 1, "mae": err[k, d] / cnt[k, d] if cnt[k, d] else float("nan"),
             "n": int(cnt[k, d])} for d in range(D) for k in range(horizon)]


def cmd_forecast(args) -> int:
    params, _, _ = read_checkpoint(args.checkpoint)
    _, data = read_dataset(args.dataset)
    check_compatible(params, data)
    rows = forecast_mae(data, params, args.prefix, args.horizon)
    write_csv(args.out, rows, FORECAST_COLUMNS)
    print(f"wrote {len(rows)} rows to {args.out}")
    return EXIT_OK


def respecify_reward(params, dataset, k_obs=100, seed=0, delta=0.0, **solver_kw):
    """Keep dynamics and emissions, refit rewards to ``dataset``, re-plan
    with hard-mode backups and evaluate off-policy."""
    R = learn_rewards(dataset, params)
    new = params.replace(reward=R)
    vf = solve_hard(new, k_obs=k_obs, seed=seed, **solver_kw)
    value, ess = _ope(dataset, new, vf, delta, new.gamma)
    return new, vf, value, ess


def cmd_respecify_reward(args) -> int:
    params, vf_old, meta = read_checkpoint(args.checkpoint)
    header, data = read_dataset(args.dataset)
    data = check_dataset(data)
    check_compatible(params, data)
    if args.reward_spec:
        try:
            spec = json.loads(Path(args.reward_spec).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read reward spec: {e}") from e
        data = PiecewiseLinearReward.from_dict(spec).apply(data)
    elif any(not np.all(np.isfinite(tr.rewards)) for tr in data):
        raise ConfigError("dataset rewards are missing or non-finite")
    new, vf, value, ess = respecify_reward(params, data, k_obs=args.k_obs, seed=args.seed, delta=args.delta)
    old_value = _ope(data, params, vf_old, args.delta, params.gamma)[0]
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_checkpoint(out / "checkpoint.json", new, vf, source=str(args.checkpoint), seed=args.seed)
    report = {"cwpdis_value": value, "ess_total": ess, "original_policy_value": old_value}
    (out / "report.json").write_text(dumps(report))
    sys.stdout.write(dumps(report))
    return EXIT_OK


# --------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pcpomdp", description="Learn POMDPs from batch data and evaluate their policies.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic tiger dataset as JSONL")
    g.add_argument("--env", choices=envs.VARIANTS, default="irrelevant_noise")
    g.add_argument("--n", type=int, default=1000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--missing-frac", type=float)
    g.add_argument("--n-dims", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train every fold x mode x lambda cell of a run config")
    t.add_argument("--config")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    t.add_argument("--out", help="run directory (default: the config's out_dir)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="off-policy and rollout evaluation of a checkpoint")
    e.add_argument("--checkpoint")
    e.add_argument("--dataset")
    e.add_argument("--env", choices=envs.VARIANTS)
    e.add_argument("--n", type=int, default=1000, help="trajectories to generate with --env")
    e.add_argument("--policy", choices=("model", "behavior"), default="model")
    e.add_argument("--rollouts", type=int, default=0)
    e.add_argument("--no-ope", action="store_true")
    e.add_argument("--delta", type=float, default=0.0)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    f = sub.add_parser("forecast", help="per-horizon forecast error table")
    f.add_argument("--checkpoint", required=True)
    f.add_argument("--dataset", required=True)
    f.add_argument("--prefix", type=int, required=True)
    f.add_argument("--horizon", type=int, required=True)
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_forecast)

    r = sub.add_parser("respecify-reward", help="refit rewards with frozen dynamics and re-plan")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--dataset", required=True)
    r.add_argument("--reward-spec")
    r.add_argument("--k-obs", type=int, default=100)
    r.add_argument("--delta", type=float, default=0.0)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out-dir", required=True)
    r.set_defaults(func=cmd_respecify_reward)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FormatError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
