"""Balanced replay: density-ratio estimation and a sum-tree priority buffer.

The density-ratio network ``w(s, a)`` is trained to estimate
``d_online / d_offline`` by maximizing the Jensen-Shannon variational bound

    E_online[f'(w)] - E_offline[f*(f'(w))],   f'(w) = log(2w / (w + 1)),
                                              f*(f'(w)) = log((w + 1) / 2).

Priorities are tempered, self-normalized ratios
``w^(1/T) / mean_offline(w^(1/T))``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Batch, Dataset, Transition
from .nn import ContractError, MlpNetwork

PRIORITY_FLOOR = 1e-8
OFFLINE, ONLINE = 0, 1
LOG2 = float(np.log(2.0))


# -- variational objective ----------------------------------------------------

def f_prime(w: np.ndarray) -> np.ndarray:
    return np.log(2.0 * w / (w + 1.0))


def f_star_of_f_prime(w: np.ndarray) -> np.ndarray:
    return np.log((w + 1.0) / 2.0)


def js_objective(w_num: np.ndarray, w_den: np.ndarray) -> float:
    """Variational lower bound in f-divergence form (to be maximized)."""
    w_num, w_den = np.asarray(w_num), np.asarray(w_den)
    if (w_num <= 0).any() or (w_den <= 0).any():
        raise ContractError("density ratios must be strictly positive")
    return float(f_prime(w_num).mean() - f_star_of_f_prime(w_den).mean())


def js_objective_gan_form(w_num: np.ndarray, w_den: np.ndarray) -> float:
    """Same bound written as a discriminator objective with D = w / (w + 1)."""
    w_num, w_den = np.asarray(w_num), np.asarray(w_den)
    return float(2.0 * LOG2 + np.log(w_num / (w_num + 1.0)).mean()
                 + np.log(1.0 / (w_den + 1.0)).mean())


def self_normalize(ratios: np.ndarray, reference: np.ndarray, temperature: float) -> np.ndarray:
    """w^(1/T) divided by the mean of w^(1/T) over an offline reference batch."""
    if temperature <= 0:
        raise ContractError("temperature must be positive")
    inv_t = 1.0 / temperature
    return np.power(ratios, inv_t) / np.power(reference, inv_t).mean()


class DensityRatioEstimator:
    """Nonnegative network over concatenated (state, action)."""

    def __init__(self, obs_dim: int, act_dim: int, hidden=(256, 256), temperature: float = 5.0,
                 denominator_mode: str = "offline", lr: float = 3e-4,
                 rng: np.random.Generator | None = None, in_dim: int | None = None):
        if temperature <= 0:
            raise ContractError("temperature must be positive")
        if denominator_mode not in ("offline", "union"):
            raise ContractError(f"unknown denominator_mode {denominator_mode!r}")
        in_dim = obs_dim + act_dim if in_dim is None else in_dim
        self.net = MlpNetwork([in_dim, *hidden, 1], "nonneg", 1, rng, final_init=None)
        self.temperature = float(temperature)
        self.denominator_mode = denominator_mode
        self.lr = lr
        self.normalizer: float | None = None
        self.n_updates = 0

    def ratio(self, x: np.ndarray) -> np.ndarray:
        return self.net.forward(x)[0, :, 0]

    def loss(self, x_num: np.ndarray, x_den: np.ndarray):
        """Objective to maximize and the gradient of its negation."""
        w_num, tape_n = self.net.forward_train(x_num)
        w_den, tape_d = self.net.forward_train(x_den)
        wn, wd = w_num[0, :, 0], w_den[0, :, 0]
        value = js_objective(wn, wd)
        # d f'(w)/dw = 1 / (w (w + 1));  d log((w + 1) / 2)/dw = 1 / (w + 1)
        dn = -1.0 / (wn * (wn + 1.0)) / len(wn)
        dd = 1.0 / (wd + 1.0) / len(wd)
        g, _ = self.net.backward(tape_n, dn[None, :, None])
        g2, _ = self.net.backward(tape_d, dd[None, :, None])
        g += g2
        return value, g

    def train_step(self, x_num: np.ndarray, x_den: np.ndarray, x_offline_ref: np.ndarray | None = None) -> float:
        """One ascent step; caches the self-normalizer on the offline reference batch."""
        value, g = self.loss(x_num, x_den)
        self.net.adam_step(g, self.lr)
        self.n_updates += 1
        ref = x_den if x_offline_ref is None else x_offline_ref
        self.normalizer = float(np.power(self.ratio(ref), 1.0 / self.temperature).mean())
        return value

    def normalized(self, x: np.ndarray) -> np.ndarray:
        if self.normalizer is None:
            raise ContractError("estimator has no normalizer yet; call train_step first")
        return np.power(self.ratio(x), 1.0 / self.temperature) / self.normalizer


def dr_loss(est: DensityRatioEstimator, online_x: np.ndarray, denominator_x: np.ndarray):
    """(objective to maximize, gradient of -objective) for one pair of batches."""
    return est.loss(online_x, denominator_x)


# -- sum tree -------------------------------------------------------------------

class SumTree:
    """Array-backed binary tree; leaf ``i`` lives at ``capacity + i``, root at 1.

    Internal nodes are always recomputed from their children, so the root
    never drifts from the sum of leaves by more than summation rounding.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ContractError("capacity must be positive")
        size = 1
        while size < capacity:
            size *= 2
        self.capacity = capacity
        self.size = size
        self.depth = size.bit_length() - 1
        self.tree = np.zeros(2 * size)

    @property
    def total(self) -> float:
        return float(self.tree[1])

    def leaves(self, n: int | None = None) -> np.ndarray:
        n = self.capacity if n is None else n
        return self.tree[self.size:self.size + n]

    def get(self, idx) -> np.ndarray:
        return self.tree[self.size + np.asarray(idx)]

    def set(self, idx, values) -> None:
        idx = np.atleast_1d(np.asarray(idx, dtype=np.int64))
        values = np.broadcast_to(np.asarray(values, dtype=np.float64), idx.shape)
        if (values < 0).any() or not np.isfinite(values).all():
            raise ContractError("priorities must be finite and nonnegative")
        if idx.size and (idx.min() < 0 or idx.max() >= self.capacity):
            raise ContractError("leaf index out of range")
        nodes = self.size + idx
        self.tree[nodes] = values
        # duplicate parents just rewrite the same sum
        for _ in range(self.depth):
            nodes >>= 1
            self.tree[nodes] = self.tree[2 * nodes] + self.tree[2 * nodes + 1]

    def rebuild(self) -> None:
        for level_start in _levels(self.size):
            n = np.arange(level_start, 2 * level_start)
            self.tree[n] = self.tree[2 * n] + self.tree[2 * n + 1]

    def find(self, values: np.ndarray, n_valid: int) -> np.ndarray:
        """Leaf index whose cumulative-sum interval contains each value."""
        v = np.array(values, dtype=np.float64)
        node = np.ones(v.shape, dtype=np.int64)
        while node[0] < self.size:
            left = 2 * node
            lv = self.tree[left]
            go_right = v >= lv
            v = np.where(go_right, v - lv, v)
            node = np.where(go_right, left + 1, left)
        leaf = node - self.size
        # rounding can walk past the last populated leaf
        return np.minimum(leaf, n_valid - 1)


def _levels(size: int):
    s = size // 2
    while s >= 1:
        yield s
        s //= 2


# -- priority buffer ----------------------------------------------------------------

def initial_default_priority(offline_size: int, rho: float) -> float:
    """P0 = (M / 1000) * rho / (1 - rho): the first 1000 online samples carry mass rho."""
    if not 0.0 < rho < 1.0:
        raise ContractError("rho must lie in (0, 1)")
    return offline_size / 1000.0 * rho / (1.0 - rho)


class PriorityBuffer:
    """Offline and online transitions in one proportional-sampling structure."""

    def __init__(self, obs_dim: int, act_dim: int, capacity: int):
        self.obs_dim, self.act_dim, self.capacity = obs_dim, act_dim, capacity
        self.obs = np.zeros((capacity, obs_dim))
        self.act = np.zeros((capacity, act_dim))
        self.rew = np.zeros(capacity)
        self.next_obs = np.zeros((capacity, obs_dim))
        self.done = np.zeros(capacity, dtype=bool)
        self.origin = np.zeros(capacity, dtype=np.int8)
        self.tree = SumTree(capacity)
        self.size = 0
        self.default_priority = 1.0
        self._online_idx: list[int] = []
        self._online_arr: np.ndarray | None = None
        self.n_offline = 0
        self._evicted = False

    def __len__(self) -> int:
        return self.size

    @property
    def n_online(self) -> int:
        return len(self._online_idx)

    def _write(self, i: int, t: Transition, origin: int) -> None:
        self.obs[i], self.act[i], self.rew[i] = t.state, t.action, t.reward
        self.next_obs[i], self.done[i], self.origin[i] = t.next_state, t.done, origin

    def init_priorities(self, dataset: Dataset, rho: float = 0.5) -> None:
        """Insert every offline transition at priority 1, then raise p0 to P0."""
        if self.size:
            raise ContractError("init_priorities needs an empty buffer")
        m = len(dataset)
        if m > self.capacity:
            raise ContractError("offline dataset exceeds buffer capacity")
        self.obs[:m], self.act[:m], self.rew[:m] = dataset.obs, dataset.act, dataset.rew
        self.next_obs[:m], self.done[:m] = dataset.next_obs, dataset.done
        self.origin[:m] = OFFLINE
        self.tree.set(np.arange(m), 1.0)
        self.size = self.n_offline = m
        self.default_priority = initial_default_priority(m, rho)

    def insert_online(self, t: Transition) -> int:
        """Store with the current default priority; evicts the lowest-priority
        offline entry (or lowest overall if none) when full."""
        if self.size < self.capacity:
            i = self.size
            self.size += 1
        else:
            pri = self.tree.leaves(self.size)
            off = np.flatnonzero(self.origin[:self.size] == OFFLINE)
            if len(off):
                i = int(off[np.argmin(pri[off])])
                self.n_offline -= 1
                self._evicted = True
            else:
                i = int(np.argmin(pri))
                self._online_idx.remove(i)
        self._write(i, t, ONLINE)
        self._online_idx.append(i)
        self._online_arr = None
        self.tree.set(i, max(self.default_priority, PRIORITY_FLOOR))
        return i

    def online_indices(self) -> np.ndarray:
        if self._online_arr is None:
            self._online_arr = np.asarray(self._online_idx, dtype=np.int64)
        return self._online_arr

    def offline_indices_count(self) -> int:
        return self.n_offline

    def batch(self, idx: np.ndarray) -> Batch:
        return Batch(self.obs[idx], self.act[idx], self.rew[idx], self.next_obs[idx], self.done[idx])

    def state_action(self, idx: np.ndarray) -> np.ndarray:
        return np.concatenate([self.obs[idx], self.act[idx]], axis=1)

    def sample_batch(self, batch_size: int, rng: np.random.Generator, stratified: bool = False):
        """Draw leaves with probability priority / total; returns (batch, indices)."""
        if self.size == 0:
            raise ContractError("cannot sample from an empty buffer")
        total = self.tree.total
        if stratified:
            u = (np.arange(batch_size) + rng.random(batch_size)) * (total / batch_size)
        else:
            u = rng.random(batch_size) * total
        idx = self.tree.find(np.minimum(u, np.nextafter(total, 0.0)), self.size)
        return self.batch(idx), idx

    def sample_uniform(self, batch_size: int, rng: np.random.Generator, source: str = "all"):
        """Uniform draws from ``all`` stored, ``online`` or ``offline`` transitions."""
        if source == "all":
            idx = rng.integers(0, self.size, batch_size)
        elif source == "online":
            on = self.online_indices()
            if len(on) == 0:
                raise ContractError("no online transitions stored yet")
            idx = on[rng.integers(0, len(on), batch_size)]
        elif source == "offline":
            if self.n_offline == 0:
                raise ContractError("no offline transitions stored")
            idx = rng.integers(0, self.n_offline, batch_size)
            if self._evicted:
                # evictions break the contiguous offline prefix
                idx = np.flatnonzero(self.origin[:self.size] == OFFLINE)[idx]
        else:
            raise ContractError(f"unknown source {source!r}")
        return self.batch(idx), idx

    def update_priorities(self, indices: np.ndarray, states: np.ndarray, actions: np.ndarray,
                          est: DensityRatioEstimator) -> np.ndarray:
        """Set sampled leaves to their self-normalized ratio and raise p0 to the running max."""
        pri = est.normalized(np.concatenate([states, actions], axis=1))
        pri = np.maximum(pri, PRIORITY_FLOOR)
        self.set_priorities(indices, pri)
        return pri

    def set_priorities(self, indices: np.ndarray, priorities: np.ndarray) -> None:
        priorities = np.maximum(np.asarray(priorities, dtype=np.float64), PRIORITY_FLOOR)
        self.tree.set(indices, priorities)
        self.default_priority = max(self.default_priority, float(priorities.max()))

    def priorities(self) -> np.ndarray:
        return self.tree.leaves(self.size).copy()

    def online_mass(self) -> float:
        on = self.online_indices()
        if len(on) == 0:
            return 0.0
        return float(self.tree.get(on).sum() / self.tree.total)


@dataclass
class SampleStats:
    """Running count of sampled-batch origins."""

    offline: int = 0
    total: int = 0

    def add(self, origins: np.ndarray) -> None:
        self.offline += int((origins == OFFLINE).sum())
        self.total += len(origins)

    def fraction(self) -> float:
        return self.offline / self.total if self.total else float("nan")

    def reset(self) -> None:
        self.offline = self.total = 0
