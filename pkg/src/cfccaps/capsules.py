"""Capsule primitives: squash, prediction vectors, dynamic routing,
margin loss, and whole-capsule dropout.

A capsule is a vector whose length encodes detection probability and
whose direction encodes instantiation parameters. Routing-by-agreement
iteratively couples an input capsule layer to an output layer through
softmax-normalized coefficients; gradients flow through the fully
unrolled loop.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, einsum, relu, softmax, sqrt, vecnorm, zeros

SQUASH_EPS = 1e-12


@dataclass
class MarginLossParams:
    """Two-sided hinge thresholds and the down-weight for wrong classes."""

    m_plus: float = 0.9
    m_minus: float = 0.1
    lam: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.m_minus < self.m_plus < 1.0:
            raise ValueError(
                f"need 0 < m_minus < m_plus < 1, got ({self.m_minus}, {self.m_plus})"
            )
        if self.lam <= 0:
            raise ValueError(f"lambda must be positive, got {self.lam}")


NORMAL_MARGIN = MarginLossParams(0.9, 0.1, 0.5)
HARD_MARGIN = MarginLossParams(0.95, 0.05, 0.5)


class CapsuleSet:
    """An ordered collection of N capsules of dimension D.

    vectors is a Tensor of shape [..., N, D]; a leading batch axis is
    allowed everywhere.
    """

    __slots__ = ("vectors",)

    def __init__(self, vectors):
        if not isinstance(vectors, Tensor):
            vectors = Tensor(vectors)
        if vectors.ndim < 2:
            raise ValueError(f"capsules need shape [..., N, D], got {vectors.shape}")
        n, d = vectors.shape[-2], vectors.shape[-1]
        if n < 1 or d < 1:
            raise ValueError(f"need N >= 1 and D >= 1, got N={n}, D={d}")
        self.vectors = vectors

    @property
    def count(self):
        return self.vectors.shape[-2]

    @property
    def dim(self):
        return self.vectors.shape[-1]

    def __repr__(self):
        return f"CapsuleSet(count={self.count}, dim={self.dim}, shape={self.vectors.shape})"


@dataclass
class RoutingState:
    """Logits, coefficients, and weighted sums from one routing pass."""

    logits: np.ndarray            # b_ij after the final update
    coefficients: np.ndarray      # c_ij of the final iteration
    sums: np.ndarray              # s_j of the final iteration
    iterations: int
    coefficient_history: list = field(default_factory=list)


class _RoutingClock:
    """Accumulates wall time spent inside routing forward passes."""

    __slots__ = ("enabled", "total_s")

    def __init__(self):
        self.enabled = False
        self.total_s = 0.0

    def reset(self):
        self.total_s = 0.0


ROUTING_CLOCK = _RoutingClock()


def squash(s):
    """Shrink vectors into the open unit ball, preserving direction:
    v = (|s|^2 / (1 + |s|^2)) * (s / |s|), taken along the last axis.
    The zero vector maps to zero (epsilon-guarded divide)."""
    if not isinstance(s, Tensor):
        s = Tensor(s)
    n2 = (s * s).sum(axis=-1, keepdims=True)
    scale = n2 / ((n2 + 1.0) * sqrt(n2 + SQUASH_EPS))
    return s * scale


def capsule_lengths(caps):
    """Euclidean norm of each capsule (detection probabilities)."""
    vectors = caps.vectors if isinstance(caps, CapsuleSet) else caps
    return vecnorm(vectors)


def predict_vectors(u, weights):
    """Per-pair predictions u_hat[i, j] = W[i, j] @ u[i].

    u: CapsuleSet (or Tensor) of shape [B?, N_in, D_in];
    weights: Tensor [N_in, N_out, D_out, D_in].
    Returns a Tensor [B?, N_in, N_out, D_out].
    """
    vec = u.vectors if isinstance(u, CapsuleSet) else u
    if not isinstance(vec, Tensor):
        vec = Tensor(vec)
    if weights.ndim != 4:
        raise ValueError(f"routing weights must be 4-D, got {weights.shape}")
    n_in, _, _, d_in = weights.shape
    if vec.shape[-1] != d_in or vec.shape[-2] != n_in:
        raise ValueError(
            f"capsules {vec.shape} incompatible with weights {weights.shape}"
        )
    if vec.ndim == 2:
        return einsum("iodk,ik->iod", weights, vec)
    return einsum("iodk,bik->biod", weights, vec)


def dynamic_routing(u_hat, iterations, return_state=False):
    """Routing-by-agreement.

    Starting from zero logits b, repeat `iterations` times:
    c_i = softmax(b_i) over the output axis, s_j = sum_i c_ij u_hat_j|i,
    v_j = squash(s_j), b_ij += <u_hat_j|i, v_j>. Returns the final
    output capsules; gradients flow through every unrolled step.

    u_hat: Tensor [B?, N_in, N_out, D_out].
    """
    if iterations < 1:
        raise ValueError(f"need at least one routing iteration, got {iterations}")
    if not isinstance(u_hat, Tensor):
        u_hat = Tensor(u_hat)
    single = u_hat.ndim == 3
    uh = u_hat.reshape((1,) + u_hat.shape) if single else u_hat

    t0 = time.perf_counter() if ROUTING_CLOCK.enabled else 0.0

    batch, n_in, n_out, _ = uh.shape
    b = zeros((batch, n_in, n_out), dtype=uh.dtype)
    history = []
    c = s = v = None
    for _ in range(iterations):
        c = softmax(b, axis=-1)
        s = einsum("bio,biod->bod", c, uh)
        v = squash(s)
        b = b + einsum("biod,bod->bio", uh, v)
        if return_state:
            history.append(c.data[0].copy() if single else c.data.copy())

    if ROUTING_CLOCK.enabled:
        ROUTING_CLOCK.total_s += time.perf_counter() - t0

    out = v.reshape(v.shape[1:]) if single else v
    result = CapsuleSet(out)
    if not return_state:
        return result
    take = (lambda t: t.data[0].copy()) if single else (lambda t: t.data.copy())
    state = RoutingState(
        logits=take(b),
        coefficients=take(c),
        sums=take(s),
        iterations=iterations,
        coefficient_history=history,
    )
    return result, state


def margin_loss(lengths, target, params=NORMAL_MARGIN):
    """Two-sided hinge loss over capsule lengths.

    For each class k: T_k * max(0, m+ - |v_k|)^2
                      + lam * (1 - T_k) * max(0, |v_k| - m-)^2
    with T_k = 1 iff k is the target. Per-sample terms are summed over
    classes; a batch is averaged over samples.

    lengths: Tensor [N_classes] or [B, N_classes]; target: int or [B].
    """
    if not isinstance(lengths, Tensor):
        lengths = Tensor(lengths)
    single = lengths.ndim == 1
    lb = lengths.reshape((1, -1)) if single else lengths
    n_classes = lb.shape[1]
    targets = np.atleast_1d(np.asarray(target, dtype=np.int64))
    if targets.shape[0] != lb.shape[0]:
        raise ValueError(f"{targets.shape[0]} targets for batch of {lb.shape[0]}")
    if targets.min() < 0 or targets.max() >= n_classes:
        raise IndexError(
            f"target out of range [0, {n_classes}): {targets.min()}..{targets.max()}"
        )
    t_k = np.zeros(lb.shape, dtype=lb.dtype)
    t_k[np.arange(lb.shape[0]), targets] = 1.0
    present = relu(params.m_plus - lb) ** 2
    absent = relu(lb - params.m_minus) ** 2
    per_sample = (Tensor(t_k) * present + params.lam * Tensor(1.0 - t_k) * absent).sum(axis=1)
    return per_sample.mean()


def capsule_dropout(caps, p, mode, rng=None):
    """Inverted whole-capsule dropout.

    In "train" mode each capsule is zeroed independently with probability
    p (all D elements together, never individual elements) and survivors
    are scaled by 1/(1-p). In "eval" mode the input is returned untouched.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or p == 0.0:
        return caps
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    vectors = caps.vectors if isinstance(caps, CapsuleSet) else caps
    mask_shape = vectors.shape[:-1] + (1,)
    keep = (rng.random(mask_shape) >= p).astype(vectors.dtype)
    mask = Tensor(keep * (1.0 / (1.0 - p)))
    out = vectors * mask
    return CapsuleSet(out) if isinstance(caps, CapsuleSet) else out
