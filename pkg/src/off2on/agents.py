"""Actor-critic losses (SAC, CQL, FQE) and the pessimistic Q-ensemble.

An ``ActorCritic`` holds ``n_members`` independent agents whose networks sit
on the stack axis: ``policy`` stacks one gaussian policy per member and ``q``
stacks ``n_q`` critics per member (index ``member * n_q + j``). Member-wise
losses never mix members, so training the stack is the same as training the
members one after another with their own minibatches.

``EnsembleAgent`` combines the members into one Q-function (mean over members
of each member's min-over-twins) and one gaussian policy whose mean and
variance match the mixture of member policies.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import logsumexp, softmax

from .data import Batch
from .nn import (
    LOG_STD_MAX,
    LOG_STD_MIN,
    ContractError,
    GradientBatch,
    MlpNetwork,
    TrainingDivergence,
    gaussian_sample,
    gaussian_sample_backward,
    polyak_update,
)

VAR_MIN = float(np.exp(2 * LOG_STD_MIN))
VAR_MAX = float(np.exp(2 * LOG_STD_MAX))
CQL_SOURCES = ("uniform", "current_policy", "next_policy")


@dataclass
class AgentConfig:
    obs_dim: int
    act_dim: int
    hidden: tuple = (256, 256)
    gamma: float = 0.99
    alpha: float = 0.2
    tau: float = 0.005
    policy_lr: float = 3e-4
    q_lr: float = 3e-4
    twin_q: bool = True
    auto_alpha: bool = False
    alpha_lr: float = 3e-4
    target_entropy: float | None = None

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not 0.0 <= self.gamma < 1.0:
            raise ContractError(f"gamma must lie in [0, 1), got {self.gamma}")
        if self.alpha <= 0.0:
            raise ContractError("alpha must be positive")

    @property
    def n_q(self) -> int:
        return 2 if self.twin_q else 1

    @property
    def entropy_target(self) -> float:
        return -float(self.act_dim) if self.target_entropy is None else self.target_entropy


@dataclass
class CqlParams:
    alpha0: float = 5.0
    num_sampled_actions: int = 10
    sample_sources: tuple = ("uniform", "current_policy")

    def __post_init__(self):
        self.sample_sources = tuple(self.sample_sources)
        if self.alpha0 < 0:
            raise ContractError("alpha0 must be nonnegative")
        if self.num_sampled_actions < 1:
            raise ContractError("num_sampled_actions must be >= 1")
        if not self.sample_sources or any(s not in CQL_SOURCES for s in self.sample_sources):
            raise ContractError(f"sample_sources must be a nonempty subset of {CQL_SOURCES}")


class ActorCritic:
    def __init__(self, cfg: AgentConfig, n_members: int = 1, rng: np.random.Generator | None = None):
        if n_members < 1:
            raise ContractError("need at least one member")
        rng = np.random.default_rng(0) if rng is None else rng
        self.cfg = cfg
        self.n_members = n_members
        self.policy = MlpNetwork([cfg.obs_dim, *cfg.hidden, 2 * cfg.act_dim], "gaussian", n_members, rng)
        self.q = MlpNetwork([cfg.obs_dim + cfg.act_dim, *cfg.hidden, 1], "linear", n_members * cfg.n_q, rng)
        self.q_target = self.q.copy()
        self.log_alpha = np.full(n_members, np.log(cfg.alpha))
        self._alpha_m = np.zeros(n_members)
        self._alpha_v = np.zeros(n_members)
        self._alpha_t = 0

    @property
    def n_q(self) -> int:
        return self.cfg.n_q

    @property
    def alpha(self) -> np.ndarray:
        return np.exp(self.log_alpha)

    def member(self, i: int) -> "ActorCritic":
        return self.subset([i])

    def subset(self, members) -> "ActorCritic":
        members = list(members)
        out = ActorCritic.__new__(ActorCritic)
        out.cfg = self.cfg
        out.n_members = len(members)
        out.policy = self.policy.take(members)
        qidx = [m * self.n_q + j for m in members for j in range(self.n_q)]
        out.q = self.q.take(qidx)
        out.q_target = self.q_target.take(qidx)
        out.log_alpha = self.log_alpha[members].copy()
        out._alpha_m = self._alpha_m[members].copy()
        out._alpha_v = self._alpha_v[members].copy()
        out._alpha_t = self._alpha_t
        return out

    @classmethod
    def from_members(cls, members: list["ActorCritic"]) -> "ActorCritic":
        first = members[0]
        out = cls.__new__(cls)
        out.cfg = first.cfg
        out.n_members = sum(m.n_members for m in members)
        out.policy = MlpNetwork.concat([m.policy for m in members])
        out.q = MlpNetwork.concat([m.q for m in members])
        out.q_target = MlpNetwork.concat([m.q_target for m in members])
        out.log_alpha = np.concatenate([m.log_alpha for m in members])
        out._alpha_m = np.concatenate([m._alpha_m for m in members])
        out._alpha_v = np.concatenate([m._alpha_v for m in members])
        out._alpha_t = max(m._alpha_t for m in members)
        return out

    def copy(self) -> "ActorCritic":
        return self.subset(range(self.n_members))

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self.cfg), sort_keys=True).encode()).hexdigest()[:16]

    def state_arrays(self, prefix: str = "") -> dict:
        arrays = {}
        arrays.update(self.policy.state_arrays(prefix + "policy_"))
        arrays.update(self.q.state_arrays(prefix + "q_"))
        arrays.update(self.q_target.state_arrays(prefix + "qt_"))
        arrays[prefix + "log_alpha"] = self.log_alpha
        arrays[prefix + "alpha_m"] = self._alpha_m
        arrays[prefix + "alpha_v"] = self._alpha_v
        meta = {"cfg": asdict(self.cfg), "n_members": self.n_members, "alpha_t": self._alpha_t,
                "config_hash": self.config_hash()}
        arrays[prefix + "ac_meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
        return arrays

    @classmethod
    def from_state_arrays(cls, arrays, prefix: str = "") -> "ActorCritic":
        meta = json.loads(bytes(np.asarray(arrays[prefix + "ac_meta"])).decode())
        out = cls.__new__(cls)
        out.cfg = AgentConfig(**meta["cfg"])
        out.n_members = int(meta["n_members"])
        out.policy = MlpNetwork.from_state_arrays(arrays, prefix + "policy_")
        out.q = MlpNetwork.from_state_arrays(arrays, prefix + "q_")
        out.q_target = MlpNetwork.from_state_arrays(arrays, prefix + "qt_")
        out.log_alpha = np.array(arrays[prefix + "log_alpha"])
        out._alpha_m = np.array(arrays[prefix + "alpha_m"])
        out._alpha_v = np.array(arrays[prefix + "alpha_v"])
        out._alpha_t = int(meta["alpha_t"])
        if out.config_hash() != meta["config_hash"]:
            raise ContractError("agent checkpoint config hash mismatch")
        return out

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            np.savez(fh, **self.state_arrays())

    @classmethod
    def load(cls, path) -> "ActorCritic":
        with np.load(path) as data:
            return cls.from_state_arrays(data)

    def _alpha_adam(self, grad: np.ndarray) -> None:
        b1, b2, eps = 0.9, 0.999, 1e-8
        self._alpha_t += 1
        self._alpha_m = b1 * self._alpha_m + (1 - b1) * grad
        self._alpha_v = b2 * self._alpha_v + (1 - b2) * grad * grad
        mhat = self._alpha_m / (1 - b1 ** self._alpha_t)
        vhat = self._alpha_v / (1 - b2 ** self._alpha_t)
        self.log_alpha = self.log_alpha - self.cfg.alpha_lr * mhat / (np.sqrt(vhat) + eps)


# -- shape helpers --------------------------------------------------------------

def _members(x: np.ndarray, n: int, base_ndim: int) -> np.ndarray:
    """View ``x`` with a leading member axis of length ``n``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == base_ndim:
        return np.broadcast_to(x, (n,) + x.shape)
    if x.ndim == base_ndim + 1 and x.shape[0] == n:
        return x
    raise ContractError(f"cannot align array of shape {x.shape} with {n} members")


def _q_input(obs: np.ndarray, act: np.ndarray, n_q: int) -> np.ndarray:
    """Critic input for every stacked critic.

    Shared ``(B, .)`` inputs stay 2-D (broadcast over the whole stack);
    member-wise ``(N, B, .)`` inputs are repeated once per twin.
    """
    if obs.ndim == 2 and act.ndim == 2:
        return np.concatenate([obs, act], axis=-1)
    n = obs.shape[0] if obs.ndim == 3 else act.shape[0]
    obs = _members(obs, n, 2)
    act = _members(act, n, 2)
    x = np.concatenate([obs, act], axis=-1)
    return np.repeat(x, n_q, axis=0) if n_q > 1 else x


def _q_values(net: MlpNetwork, x: np.ndarray, n_members: int, n_q: int, train: bool = False):
    if train:
        out, tape = net.forward_train(x)
        return out[..., 0].reshape(n_members, n_q, -1), tape
    return net.forward(x)[..., 0].reshape(n_members, n_q, -1)


def _min_route(q: np.ndarray):
    """Min over the twin axis plus a one-hot mask of the chosen twin."""
    idx = np.argmin(q, axis=1)
    mask = np.zeros_like(q)
    np.put_along_axis(mask, idx[:, None, :], 1.0, axis=1)
    return np.take_along_axis(q, idx[:, None, :], axis=1)[:, 0], mask


# -- member-wise losses ---------------------------------------------------------

@dataclass
class LossResult:
    loss: np.ndarray            # per member
    grads: GradientBatch
    info: dict = field(default_factory=dict)


def _member_policy_sample(ac: ActorCritic, obs: np.ndarray, rng: np.random.Generator, train: bool = False):
    if train:
        (mean, log_std), tape = ac.policy.forward_train(obs)
    else:
        mean, log_std = ac.policy.forward(obs)
        tape = None
    s = gaussian_sample(mean, log_std, rng.standard_normal(mean.shape))
    return s, tape


def _bellman(ac: ActorCritic, batch: Batch, next_action, next_logp, alpha, gamma):
    """Squared Bellman error for every stacked critic toward its member's target."""
    n, nq = ac.n_members, ac.n_q
    q_next = _q_values(ac.q_target, _q_input(batch.next_obs, next_action, nq), n, nq)
    v_next = q_next.min(axis=1) - np.asarray(alpha)[:, None] * next_logp
    rew = _members(batch.rew, n, 1)
    notdone = 1.0 - _members(batch.done, n, 1).astype(np.float64)
    y = rew + gamma * notdone * v_next
    if not np.isfinite(y).all():
        raise TrainingDivergence("non-finite Bellman target")
    q_pred, tape = _q_values(ac.q, _q_input(batch.obs, batch.act, nq), n, nq, train=True)
    err = q_pred - y[:, None, :]
    b = err.shape[-1]
    loss = (err * err).mean(axis=2).sum(axis=1)
    dq = (2.0 / b) * err
    return loss, dq, tape, q_pred, y


def sac_critic_loss(ac: ActorCritic, batch: Batch, rng: np.random.Generator) -> LossResult:
    """Soft Bellman regression of each member's critics (twin-min target).

    The next action is drawn fresh from the member's own policy; the target
    is treated as a constant.
    """
    nxt, _ = _member_policy_sample(ac, batch.next_obs, rng)
    return _critic_with_optional_cql(ac, batch, nxt.action, nxt.log_prob, ac.alpha, None, rng)[0]


def _cql_sample_term(ac: ActorCritic, cql: CqlParams, batch: Batch, rng: np.random.Generator):
    """Importance-sampled log-mean-exp of Q over actions, per critic and state.

    Returns ``(lse, tape, weights)``: ``lse`` has shape ``(N, n_q, B)`` and
    ``weights`` are the softmax weights needed for its gradient.
    """
    n, nq = ac.n_members, ac.n_q
    obs = _members(batch.obs, n, 2)
    b = obs.shape[1]
    k = cql.num_sampled_actions
    d = ac.cfg.act_dim
    acts, logq = [], []
    for src in cql.sample_sources:
        if src == "uniform":
            acts.append(rng.uniform(-1.0, 1.0, (n, b, k, d)))
            logq.append(np.full((n, b, k), -d * np.log(2.0)))
        else:
            states = batch.obs if src == "current_policy" else batch.next_obs
            mean, log_std = ac.policy.forward(states)
            noise = rng.standard_normal((n, b, k, d))
            s = gaussian_sample(mean[:, :, None, :], log_std[:, :, None, :], noise)
            acts.append(s.action)
            logq.append(s.log_prob)
    acts = np.concatenate(acts, axis=2)          # (n, b, c, d)
    logq = np.concatenate(logq, axis=2)          # (n, b, c)
    c = acts.shape[2]
    rep_obs = np.broadcast_to(obs[:, :, None, :], (n, b, c, obs.shape[-1]))
    x = np.concatenate([rep_obs, acts], axis=-1).reshape(n, b * c, -1)
    if nq > 1:
        x = np.repeat(x, nq, axis=0)
    q_s, tape = _q_values(ac.q, x, n, nq, train=True)
    logits = q_s.reshape(n, nq, b, c) - logq[:, None]
    lse = logsumexp(logits, axis=-1) - np.log(c)
    return lse, tape, softmax(logits, axis=-1)


def _critic_with_optional_cql(ac, batch, next_action, next_logp, alpha, cql, rng):
    n, nq = ac.n_members, ac.n_q
    loss, dq, tape, q_pred, y = _bellman(ac, batch, next_action, next_logp, alpha, ac.cfg.gamma)
    info = {"q_mean": float(q_pred.mean()), "target_mean": float(y.mean())}
    if cql is None or cql.alpha0 == 0.0:
        grads, _ = ac.q.backward(tape, dq.reshape(n * nq, -1, 1))
        if cql is not None:
            info["cql_gap"] = 0.0
        return LossResult(loss, grads, info), q_pred
    b = q_pred.shape[-1]
    lse, tape_s, w = _cql_sample_term(ac, cql, batch, rng)
    reg = (lse - q_pred).mean(axis=2)
    loss = loss + cql.alpha0 * reg.sum(axis=1)
    # the data-action term shares the Bellman pass's tape
    grads, _ = ac.q.backward(tape, (dq - cql.alpha0 / b).reshape(n * nq, b, 1))
    g_s, _ = ac.q.backward(tape_s, ((cql.alpha0 / b) * w).reshape(n * nq, -1, 1))
    grads += g_s
    info["cql_gap"] = float(reg.mean())
    return LossResult(loss, grads, info), q_pred


def cql_critic_loss(ac: ActorCritic, cql: CqlParams, batch: Batch, rng: np.random.Generator) -> LossResult:
    """Bellman error plus alpha0 * (soft-max of Q over actions - Q at data actions).

    The continuous log-sum-exp is estimated by importance sampling with
    ``num_sampled_actions`` draws per enabled source, each weighted by the
    inverse of its proposal density. With ``alpha0 == 0`` this is exactly
    ``sac_critic_loss`` (same RNG draws, same arithmetic).
    """
    nxt, _ = _member_policy_sample(ac, batch.next_obs, rng)
    return _critic_with_optional_cql(ac, batch, nxt.action, nxt.log_prob, ac.alpha, cql, rng)[0]


def sac_actor_loss(ac: ActorCritic, obs: np.ndarray, rng: np.random.Generator) -> LossResult:
    """alpha * log pi(a|s) - min(Q1, Q2)(s, a) with a reparameterized; critics frozen."""
    n, nq = ac.n_members, ac.n_q
    s, ptape = _member_policy_sample(ac, obs, rng, train=True)
    obs_m = _members(obs, n, 2)
    q, qtape = _q_values(ac.q, _q_input(obs_m, s.action, nq), n, nq, train=True)
    qmin, mask = _min_route(q)
    b = qmin.shape[-1]
    alpha = ac.alpha[:, None]
    loss = (alpha * s.log_prob - qmin).mean(axis=1)
    _, dx = ac.q.backward(qtape, (-mask / b).reshape(n * nq, b, 1), need_input_grad=True,
                          need_param_grads=False)
    d_act = dx.reshape(n, nq, b, -1).sum(axis=1)[..., ac.cfg.obs_dim:]
    dmean, dlogstd = gaussian_sample_backward(s, d_act, np.broadcast_to(alpha / b, s.log_prob.shape))
    grads, _ = ac.policy.backward(ptape, (dmean, dlogstd))
    return LossResult(loss, grads, {"log_prob": s.log_prob})


def _alpha_update(ac: ActorCritic, log_prob: np.ndarray) -> None:
    # d/d(log_alpha) of -log_alpha * (log_pi + target_entropy)
    grad = -(np.asarray(log_prob) + ac.cfg.entropy_target).reshape(ac.n_members, -1).mean(axis=1)
    ac._alpha_adam(grad)


def sac_update(ac: ActorCritic, batch: Batch, rng: np.random.Generator,
               cql: CqlParams | None = None) -> dict:
    """One critic step then one actor step per member, then Polyak targets."""
    if cql is None:
        crit = sac_critic_loss(ac, batch, rng)
    else:
        crit = cql_critic_loss(ac, cql, batch, rng)
    if not np.isfinite(crit.loss).all():
        raise TrainingDivergence("non-finite critic loss")
    ac.q.adam_step(crit.grads, ac.cfg.q_lr)
    act = sac_actor_loss(ac, batch.obs, rng)
    if not np.isfinite(act.loss).all():
        raise TrainingDivergence("non-finite actor loss")
    ac.policy.adam_step(act.grads, ac.cfg.policy_lr)
    if ac.cfg.auto_alpha:
        _alpha_update(ac, act.info["log_prob"])
    polyak_update(ac.q, ac.q_target, ac.cfg.tau)
    out = {"critic_loss": float(crit.loss.mean()), "actor_loss": float(act.loss.mean()),
           "q_mean": crit.info["q_mean"], "alpha": float(ac.alpha.mean())}
    if cql is not None:
        out["cql_gap"] = crit.info["cql_gap"]
    return out


def fqe_update(policy, q_net: MlpNetwork, q_target: MlpNetwork, batch: Batch, gamma: float,
               rng: np.random.Generator, n_q: int = 1, lr: float | None = None):
    """Fitted Q evaluation: regress each critic onto r + gamma*(1-done)*Q_target(s', a').

    ``policy`` is a gaussian ``MlpNetwork`` stack (one entry per member, the
    action is sampled) or a callable ``next_obs -> actions``. Each stacked
    critic bootstraps from its own target copy: no entropy, no min, no
    pessimism. Applies an Adam step when ``lr`` is given.
    """
    n = q_net.n_stack // n_q
    if isinstance(policy, MlpNetwork):
        mean, log_std = policy.forward(batch.next_obs)
        nxt = gaussian_sample(mean, log_std, rng.standard_normal(mean.shape)).action
    else:
        nxt = np.asarray(policy(batch.next_obs))
    q_next = _q_values(q_target, _q_input(batch.next_obs, nxt, n_q), n, n_q)
    rew = _members(batch.rew, n, 1)[:, None, :]
    notdone = 1.0 - _members(batch.done, n, 1).astype(np.float64)[:, None, :]
    y = rew + gamma * notdone * q_next
    if not np.isfinite(y).all():
        raise TrainingDivergence("non-finite FQE target")
    q_pred, tape = _q_values(q_net, _q_input(batch.obs, batch.act, n_q), n, n_q, train=True)
    err = q_pred - y
    b = err.shape[-1]
    loss = (err * err).mean(axis=2).sum(axis=1)
    grads, _ = q_net.backward(tape, ((2.0 / b) * err).reshape(n * n_q, b, 1))
    if lr is not None:
        q_net.adam_step(grads, lr)
    return loss, grads


# -- ensemble -----------------------------------------------------------------

@dataclass
class EnsemblePolicySample:
    sample: object
    member_mean: np.ndarray
    member_log_std: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    var_clamped: np.ndarray
    tape: object


class EnsembleAgent:
    """N actor-critic members combined into one Q-function and one gaussian policy."""

    def __init__(self, ac: ActorCritic):
        self.ac = ac

    @property
    def n(self) -> int:
        return self.ac.n_members

    @property
    def cfg(self) -> AgentConfig:
        return self.ac.cfg

    @property
    def members(self) -> list[ActorCritic]:
        return [self.ac.member(i) for i in range(self.n)]

    @classmethod
    def from_members(cls, members: list[ActorCritic]) -> "EnsembleAgent":
        return cls(ActorCritic.from_members(members))

    def subset(self, n: int) -> "EnsembleAgent":
        return EnsembleAgent(self.ac.subset(range(n)))

    def copy(self) -> "EnsembleAgent":
        return EnsembleAgent(self.ac.copy())

    # Q_theta = (1/N) sum_i min(Q1, Q2)_i
    def q_value(self, obs: np.ndarray, act: np.ndarray) -> np.ndarray:
        obs = np.atleast_2d(obs)
        act = np.atleast_2d(act)
        q = _q_values(self.ac.q, _q_input(obs, act, self.ac.n_q), self.n, self.ac.n_q)
        # sorting first makes the sum independent of member order, bit for bit
        qmin = np.sort(q.min(axis=1), axis=0)
        total = qmin[0].copy()
        for i in range(1, self.n):
            total += qmin[i]
        return total / self.n

    def policy_moments(self, obs: np.ndarray):
        """Mean and variance (per action dim) of the moment-matched pre-squash gaussian."""
        mean, log_std = self.ac.policy.forward(np.atleast_2d(obs))
        m, v, _ = _mixture_moments(mean, log_std)
        return m, np.clip(v, VAR_MIN, VAR_MAX)

    def _policy_train(self, obs: np.ndarray, noise: np.ndarray) -> EnsemblePolicySample:
        (mean, log_std), tape = self.ac.policy.forward_train(obs)
        m, v, vc = _mixture_moments(mean, log_std)
        if self.n == 1:
            ls = log_std[0]
        else:
            ls = 0.5 * np.log(vc)
        return EnsemblePolicySample(gaussian_sample(m, ls, noise), mean, log_std, m, v, vc, tape)

    def _policy_backward(self, ps: EnsemblePolicySample, d_action, d_log_prob) -> GradientBatch:
        dm, dls = gaussian_sample_backward(ps.sample, d_action, d_log_prob)
        n = self.n
        if n == 1:
            return self.ac.policy.backward(ps.tape, (dm[None], dls[None]))[0]
        # log_std = 0.5 log var; var = mean(sigma_i^2) + mean((mu_i - mu)^2)
        dvar = dls * 0.5 / ps.var_clamped * ((ps.var >= VAR_MIN) & (ps.var <= VAR_MAX))
        mu_i, ls_i = ps.member_mean, ps.member_log_std
        d_mu_i = dm[None] / n + dvar[None] * 2.0 * (mu_i - ps.mean[None]) / n
        d_ls_i = dvar[None] * 2.0 * np.exp(2.0 * ls_i) / n
        return self.ac.policy.backward(ps.tape, (d_mu_i, d_ls_i))[0]

    def sample_action(self, obs: np.ndarray, rng: np.random.Generator):
        obs = np.atleast_2d(obs)
        mean, log_std = self.ac.policy.forward(obs)
        m, _, vc = _mixture_moments(mean, log_std)
        ls = log_std[0] if self.n == 1 else 0.5 * np.log(vc)
        return gaussian_sample(m, ls, rng.standard_normal(m.shape))

    def act(self, obs: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
        """One action for a single observation; deterministic tanh(mean) when ``rng`` is None."""
        obs = np.asarray(obs, dtype=np.float64)[None]
        if rng is None:
            mean, _ = self.ac.policy.forward(obs)
            return np.tanh(_fixed_order_mean(mean)[0])
        return self.sample_action(obs, rng).action[0]

    def actor_loss(self, obs: np.ndarray, rng: np.random.Generator):
        """alpha * log pi_ens(a|s) - Q_ens(s, a), gradients for every member's policy."""
        n, nq = self.n, self.ac.n_q
        noise = rng.standard_normal((obs.shape[0], self.cfg.act_dim))
        ps = self._policy_train(obs, noise)
        a = ps.sample.action
        q, qtape = _q_values(self.ac.q, _q_input(obs, a, nq), n, nq, train=True)
        qmin, mask = _min_route(q)
        b = obs.shape[0]
        alpha = float(self.ac.alpha.mean())
        q_ens = qmin.sum(axis=0) / n if n > 1 else qmin[0]
        loss = float((alpha * ps.sample.log_prob - q_ens).mean())
        scale = 1.0 / b if n == 1 else 1.0 / (n * b)
        _, dx = self.ac.q.backward(qtape, (-mask * scale).reshape(n * nq, b, 1), need_input_grad=True,
                                   need_param_grads=False)
        d_act = dx.sum(axis=0)[..., self.cfg.obs_dim:] if dx.shape[0] > 1 else dx[0, :, self.cfg.obs_dim:]
        grads = self._policy_backward(ps, d_act, np.full(b, alpha / b))
        return loss, grads, ps.sample.log_prob

    def critic_loss(self, batch: Batch, rng: np.random.Generator, cql: CqlParams | None = None):
        """Each member's critics regress onto targets built with the ensemble policy's a'."""
        nxt = self.sample_action(batch.next_obs, rng)
        alpha = np.full(self.n, float(self.ac.alpha.mean())) if self.n > 1 else self.ac.alpha
        return _critic_with_optional_cql(self.ac, batch, nxt.action, nxt.log_prob, alpha, cql, rng)

    def finetune_step(self, batch: Batch, rng: np.random.Generator, cql: CqlParams | None = None) -> dict:
        return ensemble_finetune_step(self, batch, rng, cql)

    def state_arrays(self) -> dict:
        return self.ac.state_arrays()

    def save(self, path) -> None:
        self.ac.save(path)

    @classmethod
    def load(cls, path) -> "EnsembleAgent":
        return cls(ActorCritic.load(path))


def _fixed_order_mean(x: np.ndarray) -> np.ndarray:
    total = x[0].copy()
    for i in range(1, x.shape[0]):
        total += x[i]
    return total / x.shape[0] if x.shape[0] > 1 else total


def _mixture_moments(mean: np.ndarray, log_std: np.ndarray):
    """Moments of an equal-weight gaussian mixture over the leading axis.

    variance = (1/N) sum(sigma_i^2 + mu_i^2) - mu^2, evaluated in the
    equivalent form (1/N) sum sigma_i^2 + (1/N) sum (mu_i - mu)^2 so rounding
    cannot push it negative. N == 1 returns the member's moments untouched.
    """
    n = mean.shape[0]
    if n == 1:
        v = np.exp(2.0 * log_std[0])
        return mean[0], v, v
    m = _fixed_order_mean(mean)
    dev = mean - m[None]
    v = _fixed_order_mean(np.exp(2.0 * log_std)) + _fixed_order_mean(dev * dev)
    return m, v, np.clip(v, VAR_MIN, VAR_MAX)


def ensemble_q(ens: EnsembleAgent, obs, act) -> np.ndarray:
    return ens.q_value(obs, act)


def ensemble_policy_moments(ens: EnsembleAgent, obs):
    return ens.policy_moments(obs)


def ensemble_finetune_step(ens: EnsembleAgent, batch: Batch, rng: np.random.Generator,
                           cql: CqlParams | None = None) -> dict:
    """Critic step on every member (ensemble a'), actor step against Q_ens, Polyak targets.

    ``cql`` adds the conservative regularizer to the critic (the CQL-Reg
    fine-tuning baseline).
    """
    ac = ens.ac
    crit, q_pred = ens.critic_loss(batch, rng, cql)
    loss_c, grads_c = crit.loss, crit.grads
    if not np.isfinite(loss_c).all():
        raise TrainingDivergence("non-finite critic loss")
    ac.q.adam_step(grads_c, ac.cfg.q_lr)
    loss_a, grads_a, logp = ens.actor_loss(batch.obs, rng)
    if not np.isfinite(loss_a):
        raise TrainingDivergence("non-finite actor loss")
    ac.policy.adam_step(grads_a, ac.cfg.policy_lr)
    if ac.cfg.auto_alpha:
        _alpha_update(ac, np.broadcast_to(logp, (ac.n_members,) + logp.shape))
    polyak_update(ac.q, ac.q_target, ac.cfg.tau)
    out = {"critic_loss": float(np.mean(loss_c)), "actor_loss": loss_a,
           "q_mean": float(q_pred.mean()), "alpha": float(ac.alpha.mean())}
    if "cql_gap" in crit.info:
        out["cql_gap"] = crit.info["cql_gap"]
    return out
