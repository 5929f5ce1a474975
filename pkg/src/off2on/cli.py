"""``off2on`` command line: gen-data, train-offline, finetune, eval, analyze.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Failures print one line ``off2on: error: <category>: <message>`` to stderr.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from .agents import EnsembleAgent
from .config import dump_config, parse_config
from .data import (BehaviorBundle, ConfigurationError, DatasetError, TIERS, generate_dataset,
                   load_dataset, save_dataset)
from .envs import ENV_CONFIGS, make_env
from .nn import ContractError, TrainingDivergence
from .pipeline import (Evaluator, fqe_initialize, finetune_online, read_metrics, train_behavior,
                       train_offline_ensemble)

CONFIG_NAME = "config.json"
OFFLINE_CKPT = "offline.npz"
FINAL_CKPT = "final.npz"
METRICS_NAME = "metrics.jsonl"


class UsageError(Exception):
    pass


def _behavior_env(env_id: str) -> str:
    # sparse behaviour policies learn on the shaped layout
    return "point_mass_sparse_shaped" if env_id == "point_mass_sparse" else env_id


def cmd_gen_data(args) -> None:
    env = make_env(args.env)
    behavior = None
    if args.tier != "random":
        if args.behavior is not None:
            behavior = BehaviorBundle.load(args.behavior)
        else:
            behavior = train_behavior(_behavior_env(args.env), args.behavior_steps, args.seed)
            behavior.save(Path(str(args.out) + ".behavior.npz"))
    ds = generate_dataset(env, args.tier, args.size, np.random.default_rng(args.seed), behavior, args.seed)
    save_dataset(ds, args.out)
    print(json.dumps({"out": str(args.out), "transitions": len(ds),
                      "behavior_return": ds.metadata["behavior_return"]}))


def _flags(args, keys) -> dict:
    return {k: getattr(args, k, None) for k in keys}


def cmd_train_offline(args) -> None:
    ds = load_dataset(args.data)
    flags = _flags(args, ("ensemble_size", "seed", "offline_steps", "q_init"))
    cfg = parse_config(args.config, {**flags, "dataset": str(args.data), "env_id": ds.env_id})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ens = train_offline_ensemble(cfg, ds)
    if cfg.q_init == "fqe":
        ens = fqe_initialize(cfg, ens, ds)
    ens.save(out / OFFLINE_CKPT)
    dump_config(cfg, out / CONFIG_NAME)
    print(json.dumps({"checkpoint": str(out / OFFLINE_CKPT)}))


def cmd_finetune(args) -> None:
    ckpt = Path(args.ckpt)
    config_path = args.config
    if config_path is None and (ckpt.parent / CONFIG_NAME).exists():
        config_path = ckpt.parent / CONFIG_NAME
    flags = {"sampling_strategy": args.strategy, "total_steps": args.steps, "seed": args.seed,
             "finetune_objective": args.objective, "dataset": args.data, "checkpoint": str(ckpt)}
    cfg = parse_config(config_path, flags)
    if cfg.dataset is None:
        raise UsageError("no dataset: pass --data or use a checkpoint whose run directory has one")
    ds = load_dataset(cfg.dataset)
    ens = EnsembleAgent.load(ckpt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / CONFIG_NAME)
    state: list = []
    finetune_online(cfg, ens, ds, metrics_path=out / METRICS_NAME, checkpoint_dir=out, state_out=state)
    state[0].ens.save(out / FINAL_CKPT)
    last = state[0].records[-1]
    print(json.dumps({"metrics": str(out / METRICS_NAME), "final_return": last.eval_return,
                      "final_score": last.eval_score}))


def cmd_eval(args) -> None:
    ens = EnsembleAgent.load(args.ckpt)
    env = make_env(args.env)
    if env.obs_dim != ens.cfg.obs_dim:
        raise ConfigurationError(f"checkpoint observation size {ens.cfg.obs_dim} does not fit {args.env}")
    mean, std, score = Evaluator(env, args.episodes, args.seed)(ens.act)
    print(json.dumps({"mean": mean, "std": std, "score": score}))


def analyze_runs(run_dirs, report) -> list[dict]:
    """Aggregate metrics across runs, grouped by strategy, objective and ensemble size."""
    groups: dict[tuple, dict[int, list[dict]]] = defaultdict(lambda: defaultdict(list))
    for d in run_dirs:
        header, records = read_metrics(Path(d) / METRICS_NAME)
        c = header["config"]
        key = (c["sampling_strategy"], c["finetune_objective"], c["ensemble_size"])
        for r in records:
            groups[key][r["step"]].append(r)
    rows = []
    for (strategy, objective, n), by_step in sorted(groups.items()):
        for step in sorted(by_step):
            rs = by_step[step]
            ret = np.array([r["eval_return"] for r in rs])
            score = np.array([r["eval_score"] for r in rs])
            frac = [r["offline_fraction"] for r in rs if r.get("offline_fraction") is not None]
            rows.append({"strategy": strategy, "objective": objective, "ensemble_size": n, "step": step,
                         "runs": len(rs), "return_mean": ret.mean(), "return_std": ret.std(),
                         "score_mean": score.mean(), "score_std": score.std(),
                         "offline_fraction_mean": float(np.mean(frac)) if frac else ""})
    Path(report).parent.mkdir(parents=True, exist_ok=True)
    with open(report, "w", newline="") as fh:
        fields = ["strategy", "objective", "ensemble_size", "step", "runs", "return_mean", "return_std",
                  "score_mean", "score_std", "offline_fraction_mean"]
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)
    return rows


def cmd_analyze(args) -> None:
    rows = analyze_runs(args.runs, args.report)
    print(json.dumps({"report": str(args.report), "rows": len(rows)}))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="off2on", description="Offline-to-online RL with balanced replay.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate an offline dataset")
    g.add_argument("--env", required=True, choices=sorted(k for k in ENV_CONFIGS if "shaped" not in k))
    g.add_argument("--tier", required=True, choices=TIERS)
    g.add_argument("--size", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", type=Path, required=True)
    g.add_argument("--behavior", type=Path, help="behaviour bundle for the medium tiers")
    g.add_argument("--behavior-steps", type=int, default=12_000)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train-offline", help="train the offline CQL ensemble")
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--out", type=Path, required=True)
    t.add_argument("--config", type=Path)
    t.add_argument("--ensemble-size", dest="ensemble_size", type=int)
    t.add_argument("--steps", dest="offline_steps", type=int)
    t.add_argument("--q-init", dest="q_init", choices=("cql", "fqe"))
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train_offline)

    f = sub.add_parser("finetune", help="fine-tune a checkpoint online")
    f.add_argument("--ckpt", type=Path, required=True)
    f.add_argument("--out", type=Path, required=True)
    f.add_argument("--config", type=Path)
    f.add_argument("--data", type=str)
    f.add_argument("--strategy", choices=("balanced", "uniform", "online_only"))
    f.add_argument("--objective", choices=("sac", "cql_reg"))
    f.add_argument("--steps", type=int)
    f.add_argument("--seed", type=int)
    f.set_defaults(func=cmd_finetune)

    e = sub.add_parser("eval", help="evaluate a checkpoint with the deterministic mean action")
    e.add_argument("--ckpt", type=Path, required=True)
    e.add_argument("--env", required=True, choices=sorted(ENV_CONFIGS))
    e.add_argument("--episodes", type=int, default=10)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", help="aggregate run directories into a CSV report")
    a.add_argument("--runs", type=Path, nargs="+", required=True)
    a.add_argument("--report", type=Path, required=True)
    a.set_defaults(func=cmd_analyze)
    return p


def _fail(category: str, msg, code: int) -> int:
    print(f"off2on: error: {category}: {msg}".replace("\n", " "), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        args.func(args)
    except UsageError as exc:
        return _fail("usage", exc, 2)
    except ConfigurationError as exc:
        return _fail("config", exc, 2)
    except DatasetError as exc:
        return _fail("dataset", exc, 1)
    except TrainingDivergence as exc:
        return _fail("divergence", exc, 1)
    except (ContractError, OSError) as exc:
        return _fail("runtime", exc, 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
