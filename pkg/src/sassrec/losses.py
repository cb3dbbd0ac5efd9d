"""Cosine similarity, NT-Xent contrastive loss and pairwise matching losses.

Batched functions return the loss together with gradients w.r.t. their
vector inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import sigmoid


class DegenerateInputError(ValueError):
    pass


class LossConfigError(ValueError):
    pass


@dataclass
class ContrastiveConfig:
    temperature: float = 0.1
    batch_size: int = 512
    symmetric: bool = False

    def __post_init__(self) -> None:
        if not self.temperature > 0:
            raise LossConfigError(f"temperature must be positive, got {self.temperature}")
        if self.batch_size < 1:
            raise LossConfigError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class FinetuneConfig:
    beta: float = 1.0
    negatives_per_positive: int = 1
    batch_size: int = 512

    def __post_init__(self) -> None:
        if not self.beta >= 0:
            raise LossConfigError(f"beta must be nonnegative, got {self.beta}")
        if self.negatives_per_positive < 1:
            raise LossConfigError("negatives_per_positive must be >= 1")
        if self.batch_size < 1:
            raise LossConfigError(f"batch_size must be >= 1, got {self.batch_size}")


def _norms(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise DegenerateInputError("cosine similarity of a zero vector is undefined")
    return n


def cosine_sim(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise DegenerateInputError("cosine similarity of a zero vector is undefined")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def cosine_rows(u: np.ndarray, v: np.ndarray):
    """Row-wise cosine. Returns ``(c, dc/du, dc/dv)`` with ``c`` of shape (B,)."""
    nu, nv = _norms(u), _norms(v)
    un, vn = u / nu, v / nv
    c = (un * vn).sum(axis=-1)
    du = (vn - c[..., None] * un) / nu
    dv = (un - c[..., None] * vn) / nv
    return c, du, dv


def _logsumexp(x: np.ndarray, axis: int) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def nt_xent_batch_loss(z: np.ndarray, temperature: float, symmetric: bool = False):
    """NT-Xent over ``z`` of shape (2N, d): rows ``k`` and ``k + N`` form pair ``k``.

    The loss is the sum over pairs of the anchor->positive term; with
    ``symmetric`` the positive->anchor terms are added too. Every other row of
    the batch, from either view, is a negative. Returns ``(loss, dz)``.
    """
    if not temperature > 0:
        raise LossConfigError(f"temperature must be positive, got {temperature}")
    z = np.asarray(z, dtype=np.float64)
    two_n = z.shape[0]
    if two_n % 2 or two_n == 0:
        raise ValueError(f"expected an even, nonzero number of rows, got {two_n}")
    n = two_n // 2
    norms = _norms(z)
    zn = z / norms
    sim = zn @ zn.T / temperature
    np.fill_diagonal(sim, -np.inf)
    anchors = np.arange(n) if not symmetric else np.arange(two_n)
    positives = (anchors + n) % two_n
    rows = sim[anchors]
    lse = _logsumexp(rows, axis=1)
    loss = float((lse - rows[np.arange(len(anchors)), positives]).sum())
    d_rows = np.exp(rows - lse[:, None])
    d_rows[np.arange(len(anchors)), positives] -= 1.0
    d_sim = np.zeros((two_n, two_n))
    d_sim[anchors] = d_rows
    d_zn = (d_sim + d_sim.T) @ zn / temperature
    dz = (d_zn - zn * (d_zn * zn).sum(axis=1, keepdims=True)) / norms
    return loss, dz


def nt_xent_pair_loss(i: int, j: int, batch: np.ndarray, temperature: float) -> float:
    """Single directed term ``L_ij`` with all 2N-1 other rows in the denominator."""
    if not temperature > 0:
        raise LossConfigError(f"temperature must be positive, got {temperature}")
    if i == j:
        raise ValueError("anchor and positive must differ")
    batch = np.asarray(batch, dtype=np.float64)
    zn = batch / _norms(batch)
    logits = zn @ zn[i] / temperature
    others = np.delete(logits, i)
    m = others.max()
    return float(m + math.log(np.exp(others - m).sum()) - logits[j])


def pairwise_loss(u, p, n) -> float:
    """``log(1 + sigmoid(sim(u, n) - sim(u, p)))`` for one triplet."""
    return float(math.log1p(float(sigmoid(cosine_sim(u, n) - cosine_sim(u, p)))))


def pairwise_loss_batch(u: np.ndarray, p: np.ndarray, n: np.ndarray):
    """Mean pairwise loss over a batch.

    ``n`` is (B, d) for one negative per positive or (B, m, d) for ``m``
    negatives, averaged. Returns ``(loss, du, dp, dn)``.
    """
    multi = n.ndim == 3
    nn = n if multi else n[:, None, :]
    B, m, _ = nn.shape
    cp, dcp_du, dcp_dp = cosine_rows(u, p)
    uu = np.broadcast_to(u[:, None, :], nn.shape)
    cn, dcn_du, dcn_dn = cosine_rows(uu, nn)
    x = cn - cp[:, None]
    sx = sigmoid(x)
    per = np.log1p(sx)
    loss = float(per.mean())
    dx = sx * (1.0 - sx) / (1.0 + sx) / (B * m)
    du = (dx[..., None] * dcn_du).sum(axis=1) - dx.sum(axis=1)[:, None] * dcp_du
    dp = -dx.sum(axis=1)[:, None] * dcp_dp
    dn = dx[..., None] * dcn_dn
    return loss, du, dp, (dn if multi else dn[:, 0, :])


def combined_finetune_loss(scenario_loss: float, auxiliary_loss: float, beta: float) -> float:
    if not (math.isfinite(scenario_loss) and math.isfinite(auxiliary_loss)):
        raise FloatingPointError("losses must be finite")
    return scenario_loss + beta * auxiliary_loss
