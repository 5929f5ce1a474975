"""Offline ensemble training, online fine-tuning, evaluation and analyses."""
from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
from scipy.stats import rankdata

from .agents import (ActorCritic, AgentConfig, CqlParams, EnsembleAgent, fqe_update, sac_update)
from .data import (BehaviorBundle, Batch, ConfigurationError, Dataset, Transition, rollout,
                   uniform_policy)
from .envs import PointMass, make_env, scripted_controller
from .nn import ContractError, MlpNetwork, TrainingDivergence, gaussian_sample, polyak_update
from .replay import OFFLINE, DensityRatioEstimator, PriorityBuffer, SampleStats

STRATEGIES = ("balanced", "uniform", "online_only")
Q_INITS = ("cql", "fqe")
OBJECTIVES = ("sac", "cql_reg")
DENOMINATORS = ("offline", "union")


@dataclass
class RunConfig:
    env_id: str = "point_mass_dense"
    dataset: str | None = None
    checkpoint: str | None = None
    ensemble_size: int = 5
    sampling_strategy: str = "balanced"
    q_init: str = "cql"
    finetune_objective: str = "sac"
    gamma: float = 0.99
    policy_lr: float = 3e-4
    q_lr: float = 3e-4
    dr_lr: float = 3e-4
    batch_size: int = 256
    dr_batch_size: int = 256
    rho: float = 0.5
    temperature: float = 5.0
    warmup_multiplier: int = 5
    update_start: int = 1000
    total_steps: int = 50_000
    eval_interval: int = 5_000
    eval_episodes: int = 10
    seed: int = 0
    seeds: tuple[int, ...] = (0, 1, 2, 3)
    hidden: tuple[int, ...] = (256, 256)
    dr_hidden: tuple[int, ...] = (256, 256)
    alpha: float = 0.2
    auto_alpha: bool = False
    tau: float = 0.005
    cql_alpha0: float = 5.0
    cql_num_actions: int = 10
    offline_steps: int = 100_000
    fqe_steps: int = 25_000
    denominator_mode: str = "offline"
    capacity: int | None = None
    stratified: bool = False
    track_auroc: bool = False
    env_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        self.seeds = tuple(self.seeds)
        self.hidden = tuple(self.hidden)
        self.dr_hidden = tuple(self.dr_hidden)
        self.validate()

    def validate(self) -> None:
        def bad(key, msg):
            raise ConfigurationError(f"{key}: {msg}")

        for key, allowed in (("sampling_strategy", STRATEGIES), ("q_init", Q_INITS),
                             ("finetune_objective", OBJECTIVES), ("denominator_mode", DENOMINATORS)):
            if getattr(self, key) not in allowed:
                bad(key, f"must be one of {allowed}, got {getattr(self, key)!r}")
        if not 0.0 <= self.gamma < 1.0:
            bad("gamma", f"must lie in [0, 1), got {self.gamma}")
        if self.ensemble_size < 1:
            bad("ensemble_size", "must be >= 1")
        if not 0.0 < self.rho < 1.0:
            bad("rho", "must lie in (0, 1)")
        if self.temperature <= 0:
            bad("temperature", "must be positive")
        if self.total_steps < 0:
            bad("total_steps", "must be >= 0")
        for key in ("batch_size", "dr_batch_size", "eval_interval", "eval_episodes", "update_start"):
            if getattr(self, key) < 1:
                bad(key, "must be >= 1")
        for key in ("policy_lr", "q_lr", "dr_lr", "alpha", "tau"):
            if getattr(self, key) <= 0:
                bad(key, "must be positive")
        if self.warmup_multiplier < 1:
            bad("warmup_multiplier", "must be >= 1")
        if self.cql_alpha0 < 0:
            bad("cql_alpha0", "must be >= 0")
        if self.cql_num_actions < 1:
            bad("cql_num_actions", "must be >= 1")
        for key in ("offline_steps", "fqe_steps"):
            if getattr(self, key) < 0:
                bad(key, "must be >= 0")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k in ("seeds", "hidden", "dr_hidden"):
            d[k] = list(d[k])
        return d

    def agent_config(self, obs_dim: int, act_dim: int) -> AgentConfig:
        return AgentConfig(obs_dim, act_dim, hidden=self.hidden, gamma=self.gamma, alpha=self.alpha,
                           tau=self.tau, policy_lr=self.policy_lr, q_lr=self.q_lr,
                           auto_alpha=self.auto_alpha)

    def cql_params(self) -> CqlParams:
        return CqlParams(alpha0=self.cql_alpha0, num_sampled_actions=self.cql_num_actions)

    def make_env(self) -> PointMass:
        return make_env(self.env_id, **self.env_overrides)


@dataclass
class MetricsRecord:
    step: int
    eval_return: float
    eval_std: float
    eval_score: float
    n_updates: int = 0
    critic_loss: float | None = None
    actor_loss: float | None = None
    q_mean: float | None = None
    dr_objective: float | None = None
    cql_gap: float | None = None
    offline_fraction: float | None = None
    online_mass: float | None = None
    auroc: float | None = None
    wall_clock: float = 0.0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _streams(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


# -- evaluation -----------------------------------------------------------------

def evaluate_policy(env: PointMass, policy: Callable[[np.ndarray], np.ndarray], episodes: int,
                    rng: np.random.Generator) -> tuple[float, float]:
    """Mean and std of undiscounted returns; ``policy`` maps one observation to one action."""
    if episodes < 1:
        raise ContractError("episodes must be >= 1")
    returns = np.empty(episodes)
    for k in range(episodes):
        obs = env.reset(rng)
        total = 0.0
        while not env.finished:
            obs, r, _ = env.step(np.clip(policy(obs), -1.0, 1.0))
            total += r
        returns[k] = total
    std = float(returns.std(ddof=1)) if episodes > 1 else 0.0
    return float(returns.mean()), std


def reference_returns(env: PointMass, episodes: int, seed: int) -> tuple[float, float]:
    """(uniform-random return, scripted-controller return) on a fixed evaluation seed."""
    act_rng = np.random.default_rng(seed + 1)
    rand, _ = evaluate_policy(env, lambda o: act_rng.uniform(-1, 1, env.act_dim), episodes,
                              np.random.default_rng(seed))
    best, _ = evaluate_policy(env, lambda o: scripted_controller(o, env), episodes,
                              np.random.default_rng(seed))
    return rand, best


def normalized_score(ret: float, random_return: float, best_return: float) -> float:
    span = best_return - random_return
    return (ret - random_return) / span if span != 0 else 0.0


class Evaluator:
    """Deterministic-action evaluation on a fixed seed, scored against reference returns."""

    def __init__(self, env: PointMass, episodes: int, seed: int):
        self.env, self.episodes, self.seed = env, episodes, seed
        self.random_return, self.best_return = reference_returns(env, episodes, seed)

    def __call__(self, act: Callable[[np.ndarray], np.ndarray]) -> tuple[float, float, float]:
        mean, std = evaluate_policy(self.env, act, self.episodes, np.random.default_rng(self.seed))
        return mean, std, normalized_score(mean, self.random_return, self.best_return)


# -- behaviour policies -----------------------------------------------------------

def train_behavior(env_id: str, steps: int, seed: int, hidden=(64, 64), batch_size: int = 128,
                   eval_interval: int = 250, eval_episodes: int = 10, alpha: float = 0.05,
                   medium_band=(0.35, 0.45), expert_min: float = 0.9, start_steps: int = 1000,
                   lr: float = 3e-4, log: Callable[[int, float], None] | None = None) -> BehaviorBundle:
    """Online SAC from scratch; keeps a mid-training checkpoint and the best one.

    The medium checkpoint is the evaluated snapshot whose normalized score is
    closest to the middle of ``medium_band``; the replay stream is everything
    collected up to that snapshot.
    """
    env, eval_env = make_env(env_id), make_env(env_id)
    env_rng, act_rng, upd_rng = _streams(seed, 3)
    evaluator = Evaluator(eval_env, eval_episodes, seed + 10_000)
    ac = ActorCritic(AgentConfig(env.obs_dim, env.act_dim, hidden=hidden, alpha=alpha,
                                 policy_lr=lr, q_lr=lr), 1, upd_rng)
    store = Batch(np.zeros((steps, env.obs_dim)), np.zeros((steps, env.act_dim)), np.zeros(steps),
                  np.zeros((steps, env.obs_dim)), np.zeros(steps, dtype=bool))
    ends: list[int] = []
    target = 0.5 * (medium_band[0] + medium_band[1])
    medium = best = None
    medium_gap, medium_score, best_score = np.inf, None, -np.inf
    medium_ret = best_ret = float("nan")
    medium_at = 0
    obs = env.reset(env_rng)
    for t in range(steps):
        if t < start_steps:
            a = act_rng.uniform(-1, 1, env.act_dim)
        else:
            mean, log_std = ac.policy.forward(obs[None])
            a = gaussian_sample(mean[0, 0], log_std[0, 0], act_rng.standard_normal(env.act_dim)).action
        nxt, r, done = env.step(a)
        store.obs[t], store.act[t], store.rew[t], store.next_obs[t], store.done[t] = obs, a, r, nxt, done
        if env.finished:
            ends.append(t)
            obs = env.reset(env_rng)
        else:
            obs = nxt
        if t + 1 >= start_steps:
            sac_update(ac, store.take(upd_rng.integers(0, t + 1, batch_size)), upd_rng)
        if (t + 1) % eval_interval == 0:
            ret, _, score = evaluator(lambda o: np.tanh(ac.policy.forward(o[None])[0][0, 0]))
            if log is not None:
                log(t + 1, score)
            gap = abs(score - target)
            if medium_band[0] <= score <= medium_band[1] and gap < medium_gap:
                medium, medium_gap, medium_score, medium_ret, medium_at = ac.policy.copy(), gap, score, ret, t + 1
            if score > best_score:
                best, best_score, best_ret = ac.policy.copy(), score, ret
    if medium is None:
        raise ConfigurationError(f"no checkpoint landed in the medium band {medium_band}")
    if best_score < expert_min:
        raise ConfigurationError(f"best checkpoint scored {best_score:.3f} < {expert_min}")
    n = medium_at
    replay = store.take(slice(0, n))
    return BehaviorBundle(env_id, medium, best, replay, [e for e in ends if e < n], medium_ret, best_ret,
                          evaluator.random_return, evaluator.best_return,
                          {"medium_score": medium_score, "expert_score": best_score, "medium_step": medium_at,
                           "seed": seed, "steps": steps})


# -- offline phase ------------------------------------------------------------------

def _check_dataset(cfg: RunConfig, dataset: Dataset) -> PointMass:
    env = cfg.make_env()
    if dataset.env_id != cfg.env_id:
        raise ConfigurationError(f"dataset is for {dataset.env_id}, config says {cfg.env_id}")
    if (dataset.obs_dim, dataset.act_dim) != (env.obs_dim, env.act_dim):
        raise ConfigurationError("dataset dimensions do not match the environment")
    return env


def train_offline_ensemble(cfg: RunConfig, dataset: Dataset, steps: int | None = None,
                           rng: np.random.Generator | None = None,
                           log: Callable[[int, dict], None] | None = None) -> EnsembleAgent:
    """N independent CQL agents, stacked and trained in lockstep.

    Every member draws its own minibatch, so the result equals N separate
    runs; stacking only batches the arithmetic.
    """
    env = _check_dataset(cfg, dataset)
    steps = cfg.offline_steps if steps is None else steps
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    n, m, b = cfg.ensemble_size, len(dataset), cfg.batch_size
    ac = ActorCritic(cfg.agent_config(env.obs_dim, env.act_dim), n, rng)
    cql = cfg.cql_params()
    data = dataset.as_batch()
    for t in range(steps):
        batch = data.take(rng.integers(0, m, (n, b)))
        info = sac_update(ac, batch, rng, cql if cql.alpha0 > 0 else None)
        if log is not None:
            log(t, info)
    return EnsembleAgent(ac)


def fqe_initialize(cfg: RunConfig, ens: EnsembleAgent, dataset: Dataset, steps: int | None = None,
                   rng: np.random.Generator | None = None) -> EnsembleAgent:
    """Replace every member's critics by fitted Q evaluation of that member's policy."""
    steps = cfg.fqe_steps if steps is None else steps
    rng = np.random.default_rng(cfg.seed + 1) if rng is None else rng
    out = ens.copy()
    ac = out.ac
    ac.q = MlpNetwork(ac.q.layer_dims, "linear", ac.q.n_stack, rng)
    ac.q_target = ac.q.copy()
    data = dataset.as_batch()
    m = len(dataset)
    for _ in range(steps):
        batch = data.take(rng.integers(0, m, cfg.batch_size))
        fqe_update(ac.policy, ac.q, ac.q_target, batch, cfg.gamma, rng, n_q=ac.n_q, lr=cfg.q_lr)
        polyak_update(ac.q, ac.q_target, cfg.tau)
    return out


# -- online phase -------------------------------------------------------------------

class MetricsWriter:
    """Line-delimited JSON: a header with the resolved config, then one record per line."""

    def __init__(self, path, cfg: RunConfig, extra: dict | None = None):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        header = {"type": "header", "config": cfg.to_dict()}
        if extra:
            header.update(extra)
        self.path.write_text(json.dumps(header, sort_keys=True) + "\n")

    def write(self, rec: MetricsRecord) -> None:
        with self.path.open("a") as fh:
            fh.write(json.dumps({"type": "record", **rec.to_dict()}, sort_keys=True) + "\n")


def read_metrics(path) -> tuple[dict, list[dict]]:
    lines = [json.loads(x) for x in Path(path).read_text().splitlines() if x.strip()]
    if not lines or lines[0].get("type") != "header":
        raise ConfigurationError(f"{path}: missing metrics header")
    return lines[0], [x for x in lines[1:] if x.get("type") == "record"]


def auroc(real_scores, fake_scores) -> float:
    """Mann-Whitney AUROC with average ranks for ties."""
    real = np.asarray(real_scores, dtype=np.float64).ravel()
    fake = np.asarray(fake_scores, dtype=np.float64).ravel()
    if len(real) == 0 or len(fake) == 0:
        raise ContractError("need at least one real and one fake score")
    ranks = rankdata(np.concatenate([real, fake]))
    n1, n0 = len(real), len(fake)
    return float((ranks[:n1].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


def auroc_analysis(ens, online_states: np.ndarray, seen_actions: np.ndarray, rng: np.random.Generator,
                   n_fake: int = 50) -> float:
    """How well Q separates seen (state, action) pairs from the same states with uniform actions."""
    states = np.atleast_2d(online_states)
    if len(states) < 1:
        raise ContractError("need at least one real pair")
    seen = np.atleast_2d(seen_actions)
    fake_states = np.repeat(states, n_fake, axis=0)
    fake_actions = rng.uniform(-1.0, 1.0, (len(fake_states), seen.shape[1]))
    return auroc(ens.q_value(states, seen), ens.q_value(fake_states, fake_actions))


def buffer_composition_analysis(records: Iterable) -> np.ndarray:
    """Offline fraction of sampled batch elements per recorded interval, as (step, fraction) rows."""
    rows = []
    for r in records:
        d = r.to_dict() if isinstance(r, MetricsRecord) else r
        if d.get("offline_fraction") is not None:
            rows.append((d["step"], d["offline_fraction"]))
    return np.asarray(rows, dtype=np.float64).reshape(-1, 2)


@dataclass
class FinetuneState:
    """Everything the online loop mutates; returned for inspection."""

    ens: EnsembleAgent
    buffer: PriorityBuffer
    estimator: DensityRatioEstimator | None
    records: list[MetricsRecord]
    online_obs: list
    online_act: list


def finetune_online(cfg: RunConfig, ens: EnsembleAgent, dataset: Dataset, metrics_path=None,
                    checkpoint_dir=None, state_out: list | None = None) -> list[MetricsRecord]:
    """Interleave environment steps with balanced-replay (or baseline) updates.

    No updates happen during the first ``update_start`` collected steps; at
    that point ``warmup_multiplier * update_start`` updates run back to
    back, then one update per environment step. Evaluation uses the
    deterministic squashed ensemble mean on a fixed seed every
    ``eval_interval`` steps, plus once before any interaction.
    """
    env = _check_dataset(cfg, dataset)
    eval_env = cfg.make_env()
    ens = ens.copy()
    ac = ens.ac
    ac.cfg = dataclasses.replace(ac.cfg, policy_lr=cfg.policy_lr, q_lr=cfg.q_lr, gamma=cfg.gamma,
                                 tau=cfg.tau)
    env_rng, act_rng, upd_rng, dr_rng, net_rng, auroc_rng = _streams(cfg.seed, 6)
    evaluator = Evaluator(eval_env, cfg.eval_episodes, cfg.seed + 10_000)
    capacity = cfg.capacity if cfg.capacity is not None else len(dataset) + cfg.total_steps
    buf = PriorityBuffer(env.obs_dim, env.act_dim, capacity)
    buf.init_priorities(dataset, cfg.rho)
    est = None
    if cfg.sampling_strategy == "balanced":
        est = DensityRatioEstimator(env.obs_dim, env.act_dim, cfg.dr_hidden, cfg.temperature,
                                    cfg.denominator_mode, cfg.dr_lr, net_rng)
    cql = cfg.cql_params() if cfg.finetune_objective == "cql_reg" else None
    writer = MetricsWriter(metrics_path, cfg) if metrics_path is not None else None
    stats = SampleStats()
    records: list[MetricsRecord] = []
    online_obs, online_act = [], []
    t0 = time.perf_counter()
    acc: dict[str, list[float]] = {}
    n_updates = 0

    def emit(step: int) -> None:
        mean, std, score = evaluator(ens.act)
        rec = MetricsRecord(step, mean, std, score, n_updates,
                            offline_fraction=stats.fraction() if stats.total else None,
                            online_mass=buf.online_mass(), wall_clock=time.perf_counter() - t0)
        for k, v in acc.items():
            setattr(rec, k, float(np.mean(v)))
        if cfg.track_auroc and online_obs:
            window = slice(-cfg.update_start, None)
            rec.auroc = auroc_analysis(ens, np.asarray(online_obs[window]), np.asarray(online_act[window]),
                                       auroc_rng)
        records.append(rec)
        if writer is not None:
            writer.write(rec)
        acc.clear()
        stats.reset()

    def update() -> None:
        nonlocal n_updates
        if cfg.sampling_strategy == "balanced":
            on_b, _ = buf.sample_uniform(cfg.dr_batch_size, dr_rng, "online")
            off_b, _ = buf.sample_uniform(cfg.dr_batch_size, dr_rng, "offline")
            x_on = np.concatenate([on_b.obs, on_b.act], axis=1)
            x_off = np.concatenate([off_b.obs, off_b.act], axis=1)
            if cfg.denominator_mode == "union":
                den_b, _ = buf.sample_uniform(cfg.dr_batch_size, dr_rng, "all")
                x_den = np.concatenate([den_b.obs, den_b.act], axis=1)
            else:
                x_den = x_off
            acc.setdefault("dr_objective", []).append(est.train_step(x_on, x_den, x_off))
            batch, idx = buf.sample_batch(cfg.batch_size, upd_rng, cfg.stratified)
        elif cfg.sampling_strategy == "uniform":
            batch, idx = buf.sample_uniform(cfg.batch_size, upd_rng, "all")
        else:
            batch, idx = buf.sample_uniform(cfg.batch_size, upd_rng, "online")
        stats.add(buf.origin[idx])
        info = ens.finetune_step(batch, upd_rng, cql)
        for k in ("critic_loss", "actor_loss", "q_mean", "cql_gap"):
            if k in info:
                acc.setdefault(k, []).append(info[k])
        if est is not None:
            buf.update_priorities(idx, batch.obs, batch.act, est)
        n_updates += 1

    emit(0)
    obs = env.reset(env_rng)
    try:
        for t in range(1, cfg.total_steps + 1):
            a = ens.act(obs, act_rng)
            nxt, r, done = env.step(a)
            buf.insert_online(Transition(obs, a, r, nxt, done))
            online_obs.append(obs)
            online_act.append(a)
            obs = env.reset(env_rng) if env.finished else nxt
            if t >= cfg.update_start:
                for _ in range(cfg.warmup_multiplier * cfg.update_start if t == cfg.update_start else 1):
                    update()
            if t % cfg.eval_interval == 0:
                emit(t)
    except TrainingDivergence as exc:
        if checkpoint_dir is not None:
            path = Path(checkpoint_dir)
            path.mkdir(parents=True, exist_ok=True)
            ens.save(path / "diverged.npz")
        raise TrainingDivergence(f"fine-tuning diverged after {n_updates} updates: {exc}") from exc
    if state_out is not None:
        state_out.append(FinetuneState(ens, buf, est, records, online_obs, online_act))
    return records


def finetune_cql_regularized(cfg: RunConfig, ens: EnsembleAgent, dataset: Dataset, **kwargs):
    """Same loop as ``finetune_online`` with the conservative penalty kept in the critic."""
    return finetune_online(dataclasses.replace(cfg, finetune_objective="cql_reg"), ens, dataset, **kwargs)


def offline_fraction_drop(records) -> float:
    """First recorded offline fraction minus the last one."""
    curve = buffer_composition_analysis(records)
    if len(curve) == 0:
        raise ContractError("no sampled batches recorded")
    return float(curve[0, 1] - curve[-1, 1])


def strip_timing(records: Iterable[dict]) -> list[dict]:
    return [{k: v for k, v in r.items() if k != "wall_clock"} for r in records]
