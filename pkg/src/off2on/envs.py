"""Desk-scale point-mass control tasks.

``point_mass_dense`` stands in for locomotion (fixed goal, dense shaped
reward); ``point_mass_sparse`` stands in for sparse manipulation (goal
resampled each episode and appended to the observation, 0/1 reward,
terminal on success).
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .nn import ContractError

ENV_CONFIG_VERSION = 1


@dataclass(frozen=True)
class PointMassConfig:
    dt: float = 0.1
    v_max: float = 1.0
    c_ctrl: float = 0.01
    r_goal: float = 0.15
    arena: float = 2.0
    start: tuple[float, float] = (-0.5, -0.5)
    start_noise: float = 0.1
    goal: tuple[float, float] = (0.5, 0.5)
    goal_low: tuple[float, float] = (0.0, 0.0)
    goal_high: tuple[float, float] = (1.0, 1.0)
    sparse: bool = False
    # sparse-task layout scored with the dense distance reward (used to train
    # behaviour policies for the sparse datasets)
    shaped: bool = False
    horizon: int = 50
    version: int = ENV_CONFIG_VERSION


ENV_CONFIGS: dict[str, PointMassConfig] = {
    "point_mass_dense": PointMassConfig(),
    "point_mass_sparse": PointMassConfig(sparse=True, horizon=80),
    "point_mass_sparse_shaped": PointMassConfig(sparse=True, shaped=True, horizon=80),
}


class PointMass:
    """2-D point mass: velocity <- clip(v + dt*a, v_max); position <- p + dt*v.

    Positions are confined to ``[-arena, arena]^2``; hitting a wall zeroes
    that velocity component.
    """

    def __init__(self, env_id: str = "point_mass_dense", config: PointMassConfig | None = None):
        if config is None:
            if env_id not in ENV_CONFIGS:
                raise ContractError(f"unknown environment {env_id!r}")
            config = ENV_CONFIGS[env_id]
        self.env_id = env_id
        self.cfg = config
        self.act_dim = 2
        self.obs_dim = 6 if config.sparse else 4
        self.horizon = config.horizon
        self.pos = np.zeros(2)
        self.vel = np.zeros(2)
        self.goal = np.asarray(config.goal, dtype=np.float64)
        self.t = 0
        self.finished = True

    @property
    def reward_bounds(self) -> tuple[float, float]:
        if self.cfg.sparse and not self.cfg.shaped:
            return 0.0, 1.0
        diag = 2.0 * np.sqrt(2.0) * self.cfg.arena
        return -(diag + self.cfg.c_ctrl * self.act_dim), 0.0

    def observe(self) -> np.ndarray:
        if self.cfg.sparse:
            return np.concatenate([self.pos, self.vel, self.goal])
        return np.concatenate([self.pos, self.vel])

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        c = self.cfg
        self.pos = np.asarray(c.start, dtype=np.float64) + rng.uniform(-c.start_noise, c.start_noise, 2)
        self.vel = np.zeros(2)
        if c.sparse:
            self.goal = rng.uniform(c.goal_low, c.goal_high)
        else:
            self.goal = np.asarray(c.goal, dtype=np.float64)
        self.t = 0
        self.finished = False
        return self.observe()

    def step(self, action) -> tuple[np.ndarray, float, bool]:
        """Advance one step. ``done`` is true only on a genuine terminal."""
        a = np.asarray(action, dtype=np.float64)
        if a.shape != (self.act_dim,) or not np.all(np.abs(a) <= 1.0):
            raise ContractError(f"action {a} outside [-1, 1]^{self.act_dim}")
        if self.finished:
            raise ContractError("step() called on a finished episode; call reset()")
        c = self.cfg
        self.vel = np.clip(self.vel + c.dt * a, -c.v_max, c.v_max)
        self.pos = self.pos + c.dt * self.vel
        hit = np.abs(self.pos) > c.arena
        if hit.any():
            self.pos = np.clip(self.pos, -c.arena, c.arena)
            self.vel = np.where(hit, 0.0, self.vel)
        self.t += 1
        dist = float(np.linalg.norm(self.pos - self.goal))
        done = False
        if c.sparse and not c.shaped:
            reward = 1.0 if dist < c.r_goal else 0.0
            done = reward > 0.0
        else:
            reward = -dist - c.c_ctrl * float(a @ a)
        if done or self.t >= self.horizon:
            self.finished = True
        return self.observe(), reward, done


def make_env(env_id: str, **overrides) -> PointMass:
    if env_id not in ENV_CONFIGS:
        raise ContractError(f"unknown environment {env_id!r}")
    cfg = replace(ENV_CONFIGS[env_id], **overrides) if overrides else ENV_CONFIGS[env_id]
    return PointMass(env_id, cfg)


def scripted_controller(obs: np.ndarray, env: PointMass, gain: float = 4.0, damping: float = 3.0) -> np.ndarray:
    """Saturated PD controller driving the mass straight at the goal."""
    pos, vel = obs[:2], obs[2:4]
    goal = obs[4:6] if env.cfg.sparse else env.goal
    return np.clip(gain * (goal - pos) - damping * vel, -1.0, 1.0)
