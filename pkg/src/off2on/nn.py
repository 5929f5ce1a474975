"""Minimal numpy MLP engine: ReLU hidden layers, manual backprop, Adam.

Every network carries a leading *stack* axis so several independent networks
of identical shape (twin Q-functions, ensemble members) run through one
batched matmul per layer. Parameters of stack entry ``k`` never interact with
those of entry ``j``, so a stack of ``S`` networks behaves exactly like ``S``
separate networks.
"""
from __future__ import annotations

import io
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

HEADS = ("linear", "gaussian", "nonneg")
LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
NONNEG_EPS = 1e-6
CHECKPOINT_VERSION = 1


class ContractError(ValueError):
    """A caller broke an operation's precondition (shapes, missing cache)."""


class TrainingDivergence(FloatingPointError):
    """Raised when a loss or gradient stops being finite."""


@dataclass
class GradientBatch:
    """Per-parameter gradient arrays, congruent with ``MlpNetwork.params``."""

    arrays: list[np.ndarray]

    @classmethod
    def zeros_like(cls, net: "MlpNetwork") -> "GradientBatch":
        return cls([np.zeros_like(p) for p in net.params])

    def __iadd__(self, other: "GradientBatch") -> "GradientBatch":
        for a, b in zip(self.arrays, other.arrays):
            a += b
        return self

    def scaled(self, c: float) -> "GradientBatch":
        return GradientBatch([a * c for a in self.arrays])

    def zero(self) -> None:
        for a in self.arrays:
            a.fill(0.0)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays])

    def is_finite(self) -> bool:
        # a sum is non-finite whenever any term is (overflow of finite terms
        # near 1e308 aside), and costs one reduction per array
        return bool(np.isfinite(sum(float(a.sum()) for a in self.arrays)))


@dataclass
class Tape:
    """Activations recorded by ``MlpNetwork.forward_train`` for one batch."""

    owner: int
    inputs: list[np.ndarray]
    preacts: list[np.ndarray]
    head_pre: np.ndarray
    clamp_mask: np.ndarray | None = None


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class MlpNetwork:
    """A stack of ``n_stack`` identically shaped ReLU MLPs.

    ``layer_dims`` lists widths from input to raw output. For the gaussian
    head the raw output has ``2 * act_dim`` units split into mean and log-std.
    Weights have shape ``(n_stack, fan_in, fan_out)``; biases
    ``(n_stack, 1, fan_out)``.
    """

    def __init__(
        self,
        layer_dims,
        head: str = "linear",
        n_stack: int = 1,
        rng: np.random.Generator | None = None,
        final_init: float | None = 3e-3,
    ):
        layer_dims = [int(d) for d in layer_dims]
        if len(layer_dims) < 2 or min(layer_dims) < 1:
            raise ContractError(f"bad layer_dims {layer_dims}")
        if head not in HEADS:
            raise ContractError(f"unknown head {head!r}")
        if head == "gaussian" and layer_dims[-1] % 2:
            raise ContractError("gaussian head needs an even raw output width")
        self.layer_dims = layer_dims
        self.head = head
        self.n_stack = int(n_stack)
        rng = np.random.default_rng(0) if rng is None else rng
        self.params: list[np.ndarray] = []
        n_layers = len(layer_dims) - 1
        for i, (fan_in, fan_out) in enumerate(zip(layer_dims[:-1], layer_dims[1:])):
            bound = 1.0 / np.sqrt(fan_in)
            if i == n_layers - 1 and final_init is not None:
                bound = final_init
            self.params.append(rng.uniform(-bound, bound, (self.n_stack, fan_in, fan_out)))
            self.params.append(rng.uniform(-bound, bound, (self.n_stack, 1, fan_out)))
        self.adam = AdamState([np.zeros_like(p) for p in self.params],
                              [np.zeros_like(p) for p in self.params])
        self._bind_flat()

    def _bind_flat(self) -> None:
        """Repack parameters and Adam moments into contiguous vectors.

        ``params``, ``adam.m`` and ``adam.v`` become views into ``_flat``,
        ``_flat_m`` and ``_flat_v`` so optimizer and Polyak updates run as a
        handful of vector operations instead of one loop per array.
        """
        shapes = [p.shape for p in self.params]
        self._flat = np.concatenate([p.ravel() for p in self.params])
        self._flat_m = np.concatenate([m.ravel() for m in self.adam.m])
        self._flat_v = np.concatenate([v.ravel() for v in self.adam.v])
        views = ([], [], [])
        offset = 0
        for shape in shapes:
            n = int(np.prod(shape))
            for out, buf in zip(views, (self._flat, self._flat_m, self._flat_v)):
                out.append(buf[offset:offset + n].reshape(shape))
            offset += n
        self.params, self.adam.m, self.adam.v = views

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1] // 2 if self.head == "gaussian" else self.layer_dims[-1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim not in (2, 3) or x.shape[-1] != self.in_dim:
            raise ContractError(
                f"expected input (..., {self.in_dim}), got shape {x.shape}")
        if x.ndim == 3 and x.shape[0] != self.n_stack:
            raise ContractError(
                f"stacked input has {x.shape[0]} entries, network has {self.n_stack}")
        return x

    def _apply_head(self, z: np.ndarray):
        if self.head == "linear":
            return z
        if self.head == "nonneg":
            return np.logaddexp(0.0, z) + NONNEG_EPS
        k = z.shape[-1] // 2
        return z[..., :k], np.clip(z[..., k:], LOG_STD_MIN, LOG_STD_MAX)

    def forward(self, x):
        """Pure forward pass.

        ``x`` is ``(B, in)`` (shared by every stacked network) or
        ``(n_stack, B, in)``. Output carries the stack axis:
        ``(n_stack, B, out)``, or a ``(mean, log_std)`` pair for gaussian.
        """
        h = self._check_input(x)
        p = self.params
        last = self.n_layers - 1
        for i in range(self.n_layers):
            z = np.matmul(h, p[2 * i]) + p[2 * i + 1]
            h = np.maximum(z, 0.0) if i < last else z
        return self._apply_head(h)

    __call__ = forward

    def forward_train(self, x):
        """Forward pass that also returns a ``Tape`` for ``backward``."""
        h = self._check_input(x)
        p = self.params
        inputs, preacts = [], []
        last = self.n_layers - 1
        for i in range(self.n_layers):
            inputs.append(h)
            z = np.matmul(h, p[2 * i]) + p[2 * i + 1]
            if i < last:
                preacts.append(z)
                h = np.maximum(z, 0.0)
            else:
                h = z
        tape = Tape(id(self), inputs, preacts, h)
        if self.head == "gaussian":
            k = h.shape[-1] // 2
            raw = h[..., k:]
            tape.clamp_mask = (raw >= LOG_STD_MIN) & (raw <= LOG_STD_MAX)
        return self._apply_head(h), tape

    def backward(self, tape: Tape | None, dout, need_input_grad: bool = False,
                 need_param_grads: bool = True):
        """Reverse-mode pass.

        ``dout`` holds d(loss)/d(head output): an array for linear/nonneg
        heads, a ``(d_mean, d_log_std)`` pair for gaussian. Returns
        ``(GradientBatch, d_input)``; ``d_input`` is ``None`` unless requested
        and has shape ``(n_stack, B, in)``. With ``need_param_grads=False``
        only the input gradient is computed (the GradientBatch is ``None``).
        """
        if tape is None or tape.owner != id(self):
            raise ContractError("backward needs the tape from this network's forward_train")
        z = tape.head_pre
        if self.head == "linear":
            dz = np.asarray(dout, dtype=np.float64)
        elif self.head == "nonneg":
            dz = np.asarray(dout, dtype=np.float64) * expit(z)
        else:
            dmean, dlogstd = dout
            dz = np.concatenate([dmean, dlogstd * tape.clamp_mask], axis=-1)
        if dz.shape[-1] != z.shape[-1]:
            raise ContractError(f"upstream grad shape {dz.shape} vs output {z.shape}")
        dz = np.broadcast_to(dz, z.shape)
        grads: list[np.ndarray] = [None] * len(self.params)  # type: ignore[list-item]
        dx = None
        for i in reversed(range(self.n_layers)):
            if need_param_grads:
                h = tape.inputs[i]
                if h.ndim == 2:
                    grads[2 * i] = np.matmul(h.T, dz)
                else:
                    grads[2 * i] = np.matmul(h.transpose(0, 2, 1), dz)
                grads[2 * i + 1] = dz.sum(axis=1, keepdims=True)
            if i > 0 or need_input_grad:
                dh = np.matmul(dz, self.params[2 * i].transpose(0, 2, 1))
                if i > 0:
                    dz = dh * (tape.preacts[i - 1] > 0.0)
                else:
                    dx = dh
        return (GradientBatch(grads) if need_param_grads else None), dx

    def adam_step(self, grads: GradientBatch, lr: float) -> None:
        """Standard bias-corrected Adam update; increments the step counter."""
        if len(grads.arrays) != len(self.params):
            raise ContractError("gradient batch does not match parameters")
        for p, g in zip(self.params, grads.arrays):
            if g.shape != p.shape:
                raise ContractError(f"gradient shape {g.shape} vs parameter {p.shape}")
        if not grads.is_finite():
            raise TrainingDivergence("non-finite gradient in adam_step")
        g = np.concatenate([a.ravel() for a in grads.arrays])
        st = self.adam
        st.step += 1
        c1 = 1.0 - st.beta1 ** st.step
        c2 = 1.0 - st.beta2 ** st.step
        m, v = self._flat_m, self._flat_v
        m *= st.beta1
        m += (1.0 - st.beta1) * g
        v *= st.beta2
        v += (1.0 - st.beta2) * (g * g)
        if lr != 0.0:
            self._flat -= lr * (m / c1) / (np.sqrt(v / c2) + st.eps)

    # -- parameter plumbing -------------------------------------------------

    def copy(self) -> "MlpNetwork":
        return self.take(range(self.n_stack))

    def take(self, indices) -> "MlpNetwork":
        """New network holding copies of the given stack entries (with Adam state)."""
        idx = np.asarray(list(indices), dtype=int)
        out = MlpNetwork.__new__(MlpNetwork)
        out.layer_dims = list(self.layer_dims)
        out.head = self.head
        out.n_stack = len(idx)
        out.params = [p[idx].copy() for p in self.params]
        out.adam = AdamState([m[idx].copy() for m in self.adam.m],
                             [v[idx].copy() for v in self.adam.v],
                             self.adam.step, self.adam.beta1, self.adam.beta2, self.adam.eps)
        out._bind_flat()
        return out

    @staticmethod
    def concat(nets: list["MlpNetwork"]) -> "MlpNetwork":
        first = nets[0]
        for n in nets[1:]:
            if n.layer_dims != first.layer_dims or n.head != first.head:
                raise ContractError("cannot stack networks of different shapes")
        out = MlpNetwork.__new__(MlpNetwork)
        out.layer_dims = list(first.layer_dims)
        out.head = first.head
        out.n_stack = sum(n.n_stack for n in nets)
        out.params = [np.concatenate([n.params[i] for n in nets]) for i in range(len(first.params))]
        out.adam = AdamState(
            [np.concatenate([n.adam.m[i] for n in nets]) for i in range(len(first.params))],
            [np.concatenate([n.adam.v[i] for n in nets]) for i in range(len(first.params))],
            max(n.adam.step for n in nets), first.adam.beta1, first.adam.beta2, first.adam.eps)
        out._bind_flat()
        return out

    def load_params_from(self, other: "MlpNetwork") -> None:
        for p, q in zip(self.params, other.params):
            if p.shape != q.shape:
                raise ContractError("parameter shapes differ")
            p[...] = q

    def flat_params(self) -> np.ndarray:
        return self._flat.copy()

    def set_flat_params(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != self._flat.shape:
            raise ContractError(f"expected {self._flat.size} parameters, got {flat.size}")
        self._flat[...] = flat

    # -- checkpointing ------------------------------------------------------

    def state_arrays(self, prefix: str = "") -> dict[str, np.ndarray]:
        meta = {"version": CHECKPOINT_VERSION, "layer_dims": self.layer_dims,
                "head": self.head, "n_stack": self.n_stack, "adam_step": self.adam.step}
        out = {f"{prefix}meta": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)}
        for i, (p, m, v) in enumerate(zip(self.params, self.adam.m, self.adam.v)):
            out[f"{prefix}p{i}"] = p
            out[f"{prefix}m{i}"] = m
            out[f"{prefix}v{i}"] = v
        return out

    @classmethod
    def from_state_arrays(cls, arrays, prefix: str = "") -> "MlpNetwork":
        meta = json.loads(bytes(np.asarray(arrays[f"{prefix}meta"], dtype=np.uint8)).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ContractError(f"unsupported network checkpoint version {meta.get('version')}")
        net = cls.__new__(cls)
        net.layer_dims = [int(d) for d in meta["layer_dims"]]
        net.head = meta["head"]
        net.n_stack = int(meta["n_stack"])
        n = 2 * (len(net.layer_dims) - 1)
        net.params = [np.array(arrays[f"{prefix}p{i}"], dtype=np.float64) for i in range(n)]
        net.adam = AdamState([np.array(arrays[f"{prefix}m{i}"], dtype=np.float64) for i in range(n)],
                             [np.array(arrays[f"{prefix}v{i}"], dtype=np.float64) for i in range(n)],
                             int(meta["adam_step"]))
        net._bind_flat()
        return net

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            np.savez(fh, **self.state_arrays())

    @classmethod
    def load(cls, path) -> "MlpNetwork":
        with np.load(path) as data:
            return cls.from_state_arrays(data)

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        np.savez(buf, **self.state_arrays())
        return buf.getvalue()


def polyak_update(live: MlpNetwork, target: MlpNetwork, tau: float) -> None:
    """target <- (1 - tau) * target + tau * live, elementwise."""
    if live.layer_dims != target.layer_dims or live.n_stack != target.n_stack:
        raise ContractError("polyak_update needs shape-congruent networks")
    if tau == 1.0:
        target._flat[...] = live._flat
        return
    target._flat *= 1.0 - tau
    target._flat += tau * live._flat


# -- tanh-squashed gaussian -------------------------------------------------

_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


def _log1m_tanh_sq(u: np.ndarray) -> np.ndarray:
    # log(1 - tanh(u)^2) without cancellation near the box edges
    return 2.0 * (np.log(2.0) - u - np.logaddexp(0.0, -2.0 * u))


@dataclass
class SquashedSample:
    """Reparameterized tanh-gaussian draw with what backprop needs."""

    action: np.ndarray
    log_prob: np.ndarray
    pre_tanh: np.ndarray
    noise: np.ndarray
    std: np.ndarray = field(repr=False)


def gaussian_sample(mean, log_std, noise) -> SquashedSample:
    """action = tanh(mean + exp(log_std) * noise); log-prob summed over the last axis.

    The log-prob includes the tanh change-of-variables correction. ``log_std``
    is clamped to the head's range so degenerate widths stay finite.
    """
    log_std = np.clip(log_std, LOG_STD_MIN, LOG_STD_MAX)
    std = np.exp(log_std)
    u = mean + std * noise
    log_prob = np.sum(-0.5 * noise * noise - log_std - _HALF_LOG_2PI - _log1m_tanh_sq(u), axis=-1)
    return SquashedSample(np.tanh(u), log_prob, u, noise, std)


def gaussian_sample_backward(sample: SquashedSample, d_action, d_log_prob):
    """Gradients of a loss w.r.t. (mean, log_std) through ``gaussian_sample``.

    ``d_action`` has the action's shape; ``d_log_prob`` is per sample.
    """
    a = sample.action
    dlp = np.asarray(d_log_prob)[..., None]
    # d(log_prob)/du = 2 tanh(u): only the Jacobian term depends on u
    du = d_action * (1.0 - a * a) + dlp * 2.0 * a
    d_mean = du
    d_log_std = du * sample.std * sample.noise - dlp
    return d_mean, d_log_std


def gaussian_log_prob(mean, log_std, action) -> np.ndarray:
    """Density of a squashed-gaussian policy at a given action in (-1, 1)."""
    log_std = np.clip(log_std, LOG_STD_MIN, LOG_STD_MAX)
    u = np.arctanh(np.clip(action, -1.0 + 1e-12, 1.0 - 1e-12))
    z = (u - mean) / np.exp(log_std)
    return np.sum(-0.5 * z * z - log_std - _HALF_LOG_2PI - _log1m_tanh_sq(u), axis=-1)
