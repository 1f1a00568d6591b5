"""Network building blocks: linear/MLP, GRU cell, multi-head attention, Adam, 1cycle."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor

ACTIVATIONS = {
    "relu": ad.relu,
    "tanh": ad.tanh,
    "sigmoid": ad.sigmoid,
    "none": lambda x: x,
}


class Module:
    """Owns named parameters and child modules, discovered in attribute order."""

    def parameters(self) -> list[Parameter]:
        return list(self._iter_params())

    def _iter_params(self) -> Iterator[Parameter]:
        for value in vars(self).values():
            if isinstance(value, Parameter):
                yield value
            elif isinstance(value, Module):
                yield from value._iter_params()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Parameter):
                        yield item
                    elif isinstance(item, Module):
                        yield from item._iter_params()

    def named_parameters(self) -> dict[str, Parameter]:
        out: dict[str, Parameter] = {}
        for p in self.parameters():
            if p.name in out:
                raise ValueError(f"duplicate parameter name {p.name!r}")
            out[p.name] = p
        return out

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


def uniform_init(rng: np.random.Generator, fan_in: int, shape: tuple[int, ...]) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Linear(Module):
    def __init__(self, name: str, n_in: int, n_out: int, rng: np.random.Generator,
                 bias: bool = True):
        self.n_in, self.n_out = n_in, n_out
        self.weight = Parameter(f"{name}.weight", uniform_init(rng, n_in, (n_in, n_out)))
        self.bias = Parameter(f"{name}.bias", np.zeros(n_out, dtype=np.float32)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.n_in:
            raise ad.ShapeError(
                f"linear {self.weight.name}: input shape {x.shape} does not end in {self.n_in}"
            )
        y = ad.matmul(x, self.weight)
        return y if self.bias is None else ad.add(y, self.bias)


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths including the input width, and one activation per layer."""

    widths: tuple[int, ...]
    activations: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ValueError("MlpSpec needs an input width and at least one layer")
        if any(w <= 0 for w in self.widths):
            raise ValueError(f"non-positive width in {self.widths}")
        acts = self.activations or ("relu",) * (len(self.widths) - 2) + ("none",)
        if len(acts) != len(self.widths) - 1:
            raise ValueError("one activation per layer required")
        for a in acts:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        object.__setattr__(self, "activations", tuple(acts))


class MLP(Module):
    def __init__(self, name: str, spec: MlpSpec, rng: np.random.Generator):
        self.spec = spec
        self.layers = [
            Linear(f"{name}.layer{i}", spec.widths[i], spec.widths[i + 1], rng)
            for i in range(len(spec.widths) - 1)
        ]

    def __call__(self, x: Tensor) -> Tensor:
        return mlp_forward(self, x)


def mlp_forward(mlp: MLP, x: Tensor) -> Tensor:
    for layer, act in zip(mlp.layers, mlp.spec.activations):
        x = ACTIVATIONS[act](layer(x))
    return x


class GRUCell(Module):
    """Standard GRU; gate layout ``[reset, update, candidate]``.

    ``H = (1 - z) * n + z * H_prev`` with ``n = tanh(W_n x + r * (U_n H_prev))``.
    """

    def __init__(self, name: str, n_in: int, n_hidden: int, rng: np.random.Generator):
        self.n_in, self.n_hidden = n_in, n_hidden
        self.w_input = Parameter(f"{name}.w_input", uniform_init(rng, n_hidden, (n_in, 3 * n_hidden)))
        self.w_hidden = Parameter(f"{name}.w_hidden", uniform_init(rng, n_hidden, (n_hidden, 3 * n_hidden)))
        self.b_input = Parameter(f"{name}.b_input", np.zeros(3 * n_hidden, dtype=np.float32))
        self.b_hidden = Parameter(f"{name}.b_hidden", np.zeros(3 * n_hidden, dtype=np.float32))

    def __call__(self, h_prev: Tensor, x: Tensor) -> Tensor:
        return gru_step(self, h_prev, x)


def gru_step(cell: GRUCell, h_prev: Tensor, x: Tensor) -> Tensor:
    if x.shape[-1] != cell.n_in or h_prev.shape[-1] != cell.n_hidden:
        raise ad.ShapeError(
            f"gru: got input {x.shape} and hidden {h_prev.shape}, "
            f"cell expects {cell.n_in} and {cell.n_hidden}"
        )
    n = cell.n_hidden
    gi = ad.add(ad.matmul(x, cell.w_input), cell.b_input)
    gh = ad.add(ad.matmul(h_prev, cell.w_hidden), cell.b_hidden)
    r = ad.sigmoid(ad.add(gi[..., :n], gh[..., :n]))
    z = ad.sigmoid(ad.add(gi[..., n:2 * n], gh[..., n:2 * n]))
    cand = ad.tanh(ad.add(gi[..., 2 * n:], ad.mul(r, gh[..., 2 * n:])))
    # (1 - z) * cand + z * h_prev
    return ad.add(cand, ad.mul(z, ad.sub(h_prev, cand)))


class MultiHeadAttention(Module):
    def __init__(self, name: str, width: int, heads: int, rng: np.random.Generator):
        if width % heads:
            raise ValueError(f"model width {width} not divisible by {heads} heads")
        self.width, self.heads = width, heads
        self.q = Linear(f"{name}.q", width, width, rng)
        # a key bias only shifts every score of a query equally; softmax ignores it
        self.k = Linear(f"{name}.k", width, width, rng, bias=False)
        self.v = Linear(f"{name}.v", width, width, rng)
        self.out = Linear(f"{name}.out", width, width, rng)

    def __call__(self, q_tokens: Tensor, kv_tokens: Tensor) -> Tensor:
        return attention(q_tokens, kv_tokens, self)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return ad.transpose(ad.reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def attention(q_tokens: Tensor, kv_tokens: Tensor, mha: MultiHeadAttention,
              return_weights: bool = False):
    """Scaled dot-product attention; tokens are ``(N, D)`` or ``(B, N, D)``."""
    squeeze = q_tokens.ndim == 2
    if squeeze:
        q_tokens = ad.reshape(q_tokens, (1,) + q_tokens.shape)
        kv_tokens = ad.reshape(kv_tokens, (1,) + kv_tokens.shape)
    if kv_tokens.shape[-2] == 0:
        raise ValueError("attention: empty key/value set")
    if q_tokens.shape[-1] != mha.width or kv_tokens.shape[-1] != mha.width:
        raise ad.ShapeError(
            f"attention: token shapes {q_tokens.shape} and {kv_tokens.shape} "
            f"do not match model width {mha.width}"
        )
    if q_tokens.shape[0] != kv_tokens.shape[0]:
        raise ad.ShapeError(
            f"attention: batch mismatch {q_tokens.shape} vs {kv_tokens.shape}"
        )
    h = mha.heads
    b, nq, d = q_tokens.shape
    q = _split_heads(mha.q(q_tokens), h)
    k = _split_heads(mha.k(kv_tokens), h)
    v = _split_heads(mha.v(kv_tokens), h)
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d // h))
    weights = ad.softmax(scores, axis=-1)
    mixed = ad.matmul(weights, v)  # (b, h, nq, dh)
    merged = ad.reshape(ad.transpose(mixed, (0, 2, 1, 3)), (b, nq, d))
    out = mha.out(merged)
    if squeeze:
        out = ad.reshape(out, (nq, d))
    return (out, weights) if return_weights else out


# ---------------------------------------------------------------------------
# optimisation


class Adam:
    def __init__(self, params: Sequence[Parameter], beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        adam_step(self, lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def adam_step(state: Adam, lr: float) -> None:
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    for p, m, v in zip(state.params, state.m, state.v):
        g = p.grad
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(np.float32)


def global_norm(params: Sequence[Parameter]) -> float:
    return math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params))


def clip_grad_norm(params: Sequence[Parameter], max_norm: float) -> float:
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``."""
    norm = global_norm(params)
    if norm > max_norm > 0:
        factor = np.float32(max_norm / norm)
        for p in params:
            p.grad *= factor
    return norm


@dataclass(frozen=True)
class OneCycleSchedule:
    max_lr: float
    total_steps: int
    warmup_frac: float = 0.3
    div: float = 25.0
    final_div: float = 1e4

    @property
    def warmup_end(self) -> float:
        return self.warmup_frac * self.total_steps

    def __call__(self, step: int) -> float:
        return one_cycle_lr(self, step)


def one_cycle_lr(schedule: OneCycleSchedule, step: float) -> float:
    total = schedule.total_steps
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    start = schedule.max_lr / schedule.div
    end = start / schedule.final_div
    peak = schedule.warmup_end
    if step <= peak:
        frac = step / peak if peak > 0 else 1.0
        return start + (schedule.max_lr - start) * (1 - math.cos(math.pi * frac)) / 2
    frac = (step - peak) / (total - peak)
    return end + (schedule.max_lr - end) * (1 + math.cos(math.pi * frac)) / 2
