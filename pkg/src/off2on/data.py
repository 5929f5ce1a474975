"""Transitions, offline datasets, and the binary dataset file format.

File layout (little-endian)::

    magic  b"O2OD"        4 bytes
    version               uint16
    header_len            uint32, then a UTF-8 JSON header of that length
    records               count * (2*obs_dim + act_dim + 2) float64

Each record is ``state, action, reward, next_state, done``. The JSON header
carries env_id, obs_dim, act_dim, count, provenance, seed and generator
metadata.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

from .envs import ENV_CONFIGS, PointMass, make_env
from .nn import ContractError, MlpNetwork, gaussian_sample

MAGIC = b"O2OD"
FORMAT_VERSION = 1
TIERS = ("random", "medium", "medium_replay", "medium_expert")


class DatasetError(Exception):
    """Base class for dataset load/validation failures."""


class CorruptHeaderError(DatasetError):
    pass


class DimensionMismatchError(DatasetError):
    pass


class TruncatedFileError(DatasetError):
    pass


class ConfigurationError(Exception):
    """A run or dataset request is inconsistent with what exists on disk."""


class Transition(NamedTuple):
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    done: bool


@dataclass
class Batch:
    """Column-stacked transitions; leading axes are free (e.g. ``(B,)`` or ``(N, B)``)."""

    obs: np.ndarray
    act: np.ndarray
    rew: np.ndarray
    next_obs: np.ndarray
    done: np.ndarray

    def __len__(self) -> int:
        return self.rew.shape[-1]

    def take(self, idx) -> "Batch":
        return Batch(self.obs[idx], self.act[idx], self.rew[idx], self.next_obs[idx], self.done[idx])


@dataclass
class Dataset:
    env_id: str
    obs_dim: int
    act_dim: int
    obs: np.ndarray
    act: np.ndarray
    rew: np.ndarray
    next_obs: np.ndarray
    done: np.ndarray
    provenance: str = "random"
    seed: int = 0
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.rew)
        if n == 0:
            raise DatasetError("dataset must be nonempty")
        if self.provenance not in TIERS:
            raise DatasetError(f"unknown provenance {self.provenance!r}")
        if (self.obs.shape != (n, self.obs_dim) or self.next_obs.shape != (n, self.obs_dim)
                or self.act.shape != (n, self.act_dim) or self.done.shape != (n,)):
            raise DimensionMismatchError("transition arrays disagree with header dimensions")

    def __len__(self) -> int:
        return len(self.rew)

    def __getitem__(self, i: int) -> Transition:
        return Transition(self.obs[i], self.act[i], float(self.rew[i]), self.next_obs[i], bool(self.done[i]))

    def batch(self, idx) -> Batch:
        return Batch(self.obs[idx], self.act[idx], self.rew[idx], self.next_obs[idx], self.done[idx])

    def as_batch(self) -> Batch:
        return Batch(self.obs, self.act, self.rew, self.next_obs, self.done)

    def episode_returns(self) -> np.ndarray:
        """Undiscounted returns of the complete episodes recorded in the dataset."""
        ends = self.metadata.get("episode_ends")
        if not ends:
            return np.array([])
        starts = [0] + [e + 1 for e in ends[:-1]]
        return np.array([self.rew[s:e + 1].sum() for s, e in zip(starts, ends)])

    def header(self) -> dict:
        return {"env_id": self.env_id, "obs_dim": self.obs_dim, "act_dim": self.act_dim,
                "count": len(self), "provenance": self.provenance, "seed": self.seed,
                "metadata": self.metadata}


def save_dataset(dataset: Dataset, path) -> None:
    header = json.dumps(dataset.header(), sort_keys=True).encode("utf-8")
    records = np.concatenate(
        [dataset.obs, dataset.act, dataset.rew[:, None], dataset.next_obs,
         dataset.done[:, None].astype(np.float64)], axis=1).astype("<f8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", FORMAT_VERSION, len(header)))
        fh.write(header)
        fh.write(records.tobytes())


def load_dataset(path, check_registry: bool = True) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < 10 or raw[:4] != MAGIC:
        raise CorruptHeaderError(f"{path}: bad magic bytes")
    version, hlen = struct.unpack("<HI", raw[4:10])
    if version != FORMAT_VERSION:
        raise CorruptHeaderError(f"{path}: unsupported format version {version}")
    if 10 + hlen > len(raw):
        raise TruncatedFileError(f"{path}: header runs past end of file")
    try:
        header = json.loads(raw[10:10 + hlen].decode("utf-8"))
        env_id = str(header["env_id"])
        obs_dim, act_dim, count = int(header["obs_dim"]), int(header["act_dim"]), int(header["count"])
        provenance, seed = str(header["provenance"]), int(header["seed"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptHeaderError(f"{path}: unreadable header ({exc})") from exc
    if obs_dim < 1 or act_dim < 1 or count < 1:
        raise CorruptHeaderError(f"{path}: nonpositive dimension or count in header")
    if check_registry and env_id in ENV_CONFIGS:
        env = make_env(env_id)
        if (env.obs_dim, env.act_dim) != (obs_dim, act_dim):
            raise DimensionMismatchError(
                f"{path}: header dims ({obs_dim}, {act_dim}) but {env_id} has "
                f"({env.obs_dim}, {env.act_dim})")
    width = 2 * obs_dim + act_dim + 2
    payload = raw[10 + hlen:]
    if len(payload) < count * width * 8:
        raise TruncatedFileError(
            f"{path}: expected {count} records, file holds {len(payload) // (width * 8)}")
    rec = np.frombuffer(payload, dtype="<f8", count=count * width).reshape(count, width)
    rec = rec.astype(np.float64)
    o, a = obs_dim, act_dim
    return Dataset(env_id, obs_dim, act_dim, rec[:, :o], rec[:, o:o + a], rec[:, o + a],
                   rec[:, o + a + 1:2 * o + a + 1], rec[:, -1] > 0.5,
                   provenance, seed, header.get("metadata", {}))


# -- generation ---------------------------------------------------------------

Policy = Callable[[np.ndarray, np.random.Generator], np.ndarray]


def uniform_policy(act_dim: int) -> Policy:
    def act(obs, rng):
        return rng.uniform(-1.0, 1.0, act_dim)
    return act


def network_policy(net: MlpNetwork) -> Policy:
    """Stochastic squashed-gaussian behaviour from a policy network."""
    def act(obs, rng):
        mean, log_std = net.forward(obs[None])
        return gaussian_sample(mean[0, 0], log_std[0, 0], rng.standard_normal(mean.shape[-1])).action
    return act


@dataclass
class BehaviorBundle:
    """Behaviour checkpoints from a partial online SAC run on one environment."""

    env_id: str
    medium: MlpNetwork
    expert: MlpNetwork
    replay: Batch
    replay_episode_ends: list
    medium_return: float
    expert_return: float
    random_return: float
    best_return: float
    metadata: dict = field(default_factory=dict)

    def digest(self) -> str:
        h = hashlib.sha256()
        for net in (self.medium, self.expert):
            for p in net.params:
                h.update(np.ascontiguousarray(p).tobytes())
        h.update(np.ascontiguousarray(self.replay.obs).tobytes())
        return h.hexdigest()[:16]

    def save(self, path) -> None:
        arrays = {}
        arrays.update(self.medium.state_arrays("medium_"))
        arrays.update(self.expert.state_arrays("expert_"))
        for k in ("obs", "act", "rew", "next_obs", "done"):
            arrays[f"replay_{k}"] = getattr(self.replay, k)
        meta = {"env_id": self.env_id, "replay_episode_ends": list(map(int, self.replay_episode_ends)),
                "medium_return": self.medium_return, "expert_return": self.expert_return,
                "random_return": self.random_return, "best_return": self.best_return,
                "metadata": self.metadata}
        arrays["bundle_meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path) -> "BehaviorBundle":
        with np.load(path) as data:
            meta = json.loads(bytes(data["bundle_meta"]).decode())
            replay = Batch(*(np.array(data[f"replay_{k}"]) for k in ("obs", "act", "rew", "next_obs", "done")))
            return cls(meta["env_id"], MlpNetwork.from_state_arrays(data, "medium_"),
                       MlpNetwork.from_state_arrays(data, "expert_"), replay,
                       meta["replay_episode_ends"], meta["medium_return"], meta["expert_return"],
                       meta["random_return"], meta["best_return"], meta.get("metadata", {}))


def rollout(env: PointMass, policy: Policy, n_steps: int, rng: np.random.Generator):
    """Collect ``n_steps`` transitions, resetting on terminal or time limit."""
    obs_l, act_l, rew_l, nxt_l, done_l, ends = [], [], [], [], [], []
    obs = env.reset(rng)
    for i in range(n_steps):
        a = np.clip(policy(obs, rng), -1.0, 1.0)
        nxt, r, done = env.step(a)
        obs_l.append(obs)
        act_l.append(a)
        rew_l.append(r)
        nxt_l.append(nxt)
        done_l.append(done)
        if env.finished:
            ends.append(i)
            obs = env.reset(rng)
        else:
            obs = nxt
    batch = Batch(np.array(obs_l), np.array(act_l), np.array(rew_l), np.array(nxt_l),
                  np.array(done_l, dtype=bool))
    return batch, ends


def generate_dataset(env: PointMass, tier: str, size: int, rng: np.random.Generator,
                     behavior: BehaviorBundle | None = None, seed: int = 0) -> Dataset:
    """Build a D4RL-tier analogue dataset of ``size`` transitions.

    ``medium_replay`` uses the recorded training stream, capped at ``size``.
    ``medium_expert`` is the first half from the medium checkpoint and the
    second half from the expert checkpoint.
    """
    if tier not in TIERS:
        raise ConfigurationError(f"unknown tier {tier!r}")
    if size < 1:
        raise ConfigurationError("dataset size must be positive")
    meta: dict = {"tier": tier}
    if tier == "random":
        batch, ends = rollout(env, uniform_policy(env.act_dim), size, rng)
    else:
        if behavior is None:
            raise ConfigurationError(f"tier {tier!r} needs a behaviour checkpoint")
        if behavior.env_id != env.env_id and not _compatible(behavior.env_id, env.env_id):
            raise ConfigurationError(
                f"behaviour checkpoint is for {behavior.env_id}, not {env.env_id}")
        meta.update(behavior_hash=behavior.digest(), medium_return=behavior.medium_return,
                    expert_return=behavior.expert_return, random_return=behavior.random_return,
                    best_return=behavior.best_return)
        if tier == "medium":
            batch, ends = rollout(env, network_policy(behavior.medium), size, rng)
        elif tier == "medium_replay":
            if behavior.env_id != env.env_id:
                # the recorded stream carries the behaviour env's rewards
                raise ConfigurationError(
                    f"medium_replay needs a behaviour run on {env.env_id}, got {behavior.env_id}")
            n = min(size, len(behavior.replay))
            batch = behavior.replay.take(slice(0, n))
            ends = [e for e in behavior.replay_episode_ends if e < n]
        else:
            n_med = size // 2
            b1, e1 = rollout(env, network_policy(behavior.medium), n_med, rng)
            b2, e2 = rollout(env, network_policy(behavior.expert), size - n_med, rng)
            batch = Batch(*(np.concatenate([getattr(b1, k), getattr(b2, k)])
                            for k in ("obs", "act", "rew", "next_obs", "done")))
            ends = e1 + [n_med + e for e in e2]
            meta["split"] = n_med
    meta["episode_ends"] = [int(e) for e in ends]
    ds = Dataset(env.env_id, env.obs_dim, env.act_dim, batch.obs, batch.act, batch.rew,
                 batch.next_obs, batch.done, tier, seed, meta)
    rets = ds.episode_returns()
    meta["behavior_return"] = float(rets.mean()) if len(rets) else float("nan")
    return ds


def _compatible(behavior_env: str, env_id: str) -> bool:
    # a policy trained on the shaped sparse layout acts in the sparse task
    return behavior_env.startswith(env_id) or env_id.startswith(behavior_env)
