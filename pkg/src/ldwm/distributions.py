"""Diagonal Gaussians for the latent state, and the reconstruction likelihoods.

Reconstruction terms are negative log-likelihoods with fixed scale, so additive
constants are dropped: unit-variance Gaussian gives mean squared error,
unit-scale Laplace gives mean absolute error, categorical gives cross entropy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0


@dataclass
class DiagonalGaussian:
    mean: Tensor
    log_std: Tensor

    @classmethod
    def from_raw(cls, mean: Tensor, raw_log_std: Tensor) -> "DiagonalGaussian":
        return cls(mean, ad.clip(raw_log_std, LOG_STD_MIN, LOG_STD_MAX))

    @classmethod
    def from_head(cls, head: Tensor) -> "DiagonalGaussian":
        """Split a ``(..., 2*D)`` network output into mean and clamped log-std."""
        d = head.shape[-1] // 2
        return cls.from_raw(head[..., :d], head[..., d:])

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]


def reparam_sample(g: DiagonalGaussian, eps) -> Tensor:
    eps = eps if isinstance(eps, Tensor) else Tensor(eps)
    return ad.add(g.mean, ad.mul(ad.exp(g.log_std), eps))


def kl_divergence(q: DiagonalGaussian, p: DiagonalGaussian, free_bits: float | None = None) -> Tensor:
    """KL(q || p) in nats, summed over the last axis.

    Batched inputs give one value per row. With ``free_bits`` each row is
    floored at that many nats.
    """
    if q.mean.shape != p.mean.shape:
        raise ShapeError(f"kl_divergence: dimension mismatch {q.mean.shape} vs {p.mean.shape}")
    # log(sp/sq) + (sq^2 + (mq-mp)^2) / (2 sp^2) - 1/2
    var_ratio = ad.exp(ad.scale(ad.sub(q.log_std, p.log_std), 2.0))
    diff = ad.mul(ad.sub(q.mean, p.mean), ad.exp(ad.scale(p.log_std, -1.0)))
    per_dim = ad.sub(
        ad.scale(ad.add(var_ratio, ad.square(diff)), 0.5),
        ad.add(ad.sub(q.log_std, p.log_std), Tensor(np.float32(0.5))),
    )
    kl = ad.sum_(per_dim, axis=-1)
    if free_bits:
        kl = _floor(kl, free_bits)
    return kl


def balanced_kl(q: DiagonalGaussian, p: DiagonalGaussian, to_prior: float,
                free_bits: float | None = None) -> Tensor:
    """KL(q || p) with its gradient split: ``to_prior`` of it trains p, the rest trains q.

    The value is exactly ``kl_divergence(q, p)``; only the gradient differs.
    """
    if not 0.0 <= to_prior <= 1.0:
        raise ValueError(f"to_prior must lie in [0, 1], got {to_prior}")
    sq = DiagonalGaussian(ad.detach(q.mean), ad.detach(q.log_std))
    sp = DiagonalGaussian(ad.detach(p.mean), ad.detach(p.log_std))
    kl_p = kl_divergence(sq, p)
    kl_q = kl_divergence(q, sp)
    # kl_p and kl_q are bitwise equal (same ops, same data), so the blend keeps the value
    mixed = ad.add(kl_q, ad.scale(ad.sub(kl_p, kl_q), to_prior))
    if free_bits:
        mixed = _floor(mixed, free_bits)
    return mixed


def _floor(x: Tensor, floor: float) -> Tensor:
    """max(x, floor); gradient only where x is above the floor."""
    above = x.data > floor
    return ad._make(np.maximum(x.data, np.float32(floor)), (x,), lambda g: (g * above,), "floor")


def kl_closed_form(mq, sq, mp, sp) -> float:
    """Float64 reference for diagonal Gaussians given means and std devs."""
    mq, sq, mp, sp = (np.asarray(v, dtype=np.float64) for v in (mq, sq, mp, sp))
    return float(np.sum(np.log(sp / sq) + (sq ** 2 + (mq - mp) ** 2) / (2 * sp ** 2) - 0.5))


def log_prob(g: DiagonalGaussian, x: np.ndarray) -> np.ndarray:
    mean = g.mean.data.astype(np.float64)
    std = np.exp(g.log_std.data.astype(np.float64))
    z = (x - mean) / std
    return np.sum(-0.5 * z * z - np.log(std) - 0.5 * math.log(2 * math.pi), axis=-1)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def gaussian_nll(pred: Tensor, target) -> Tensor:
    target = target if isinstance(target, Tensor) else Tensor(target)
    _same_shape("gaussian_nll", pred, target)
    return ad.mean(ad.square(ad.sub(pred, target)))


def laplace_nll(pred: Tensor, target) -> Tensor:
    target = target if isinstance(target, Tensor) else Tensor(target)
    _same_shape("laplace_nll", pred, target)
    return ad.mean(ad.abs_(ad.sub(pred, target)))


def categorical_ce(logits: Tensor, labels) -> Tensor:
    """Mean over cells of ``-log softmax(logits)[label]``; classes on the last axis."""
    labels = np.asarray(labels)
    n_classes = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise ShapeError(f"categorical_ce: labels {labels.shape} vs logits {logits.shape}")
    idx = labels.astype(np.int64)
    if np.any(idx != labels) or idx.min(initial=0) < 0 or idx.max(initial=0) >= n_classes:
        raise ValueError(f"categorical_ce: labels must be integers in [0, {n_classes})")
    onehot = np.eye(n_classes, dtype=np.float32)[idx]
    picked = ad.sum_(ad.mul(ad.log_softmax(logits, axis=-1), Tensor(onehot)), axis=-1)
    return ad.scale(ad.mean(picked), -1.0)
