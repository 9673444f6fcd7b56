"""Convolutional fully-connected (CFC) layer.

Summarizes a feature map into few capsules: every K x K spatial window
(stride 1, valid placement) is flattened and fed through its own affine
map — like a convolution but with no weight sharing across positions.
A [N, W, W] map yields (W-K+1)^2 capsules of dimension D.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .capsules import CapsuleSet
from .tensor import Tensor, accumulate, init_weights, make_op


@dataclass(frozen=True)
class CfcConfig:
    kernel_size: int      # K
    out_dim: int          # D
    in_channels: int      # N
    in_spatial: int       # W (square maps)

    def __post_init__(self):
        if not 1 <= self.kernel_size <= self.in_spatial:
            raise ValueError(
                f"kernel size must lie in [1, {self.in_spatial}], got {self.kernel_size}"
            )
        if self.out_dim < 1 or self.in_channels < 1:
            raise ValueError("out_dim and in_channels must be positive")

    @property
    def side(self):
        return self.in_spatial - self.kernel_size + 1

    @property
    def capsule_count(self):
        return self.side * self.side

    @property
    def chunk_len(self):
        return self.kernel_size * self.kernel_size * self.in_channels


@dataclass(frozen=True)
class Chunk:
    """One flattened window: index m at spatial origin (h, w)."""

    index: int
    origin: tuple
    values: np.ndarray


def chunk_positions(cfg):
    """Enumerate all (m, h, w) window origins, row-major.

    Indices are zero-based: h = m // side, w = m % side, so every K x K
    window lies fully inside the map and each of the side^2 positions
    appears exactly once.
    """
    side = cfg.side
    return [(m, m // side, m % side) for m in range(side * side)]


def iter_chunks(feature_map, cfg):
    """Yield each window of a single [N, W, W] map as a Chunk."""
    k = cfg.kernel_size
    for m, h, w in chunk_positions(cfg):
        yield Chunk(
            index=m,
            origin=(h, w),
            values=feature_map[:, h:h + k, w:w + k].reshape(-1).copy(),
        )


def extract_chunks(feature_map, cfg):
    """Gather and flatten every window of a [B, N, W, W] array.

    Returns [P, B, K*K*N] (position-major, so each chunk matrix is
    contiguous). Flattening is channel-major, then row-major over the
    window (plain C-order of the [N, K, K] slice), which fixes the
    layout weights are expressed in.
    """
    k = cfg.kernel_size
    b = feature_map.shape[0]
    chunks = np.empty((cfg.capsule_count, b, cfg.chunk_len), dtype=feature_map.dtype)
    for m, h, w in chunk_positions(cfg):
        chunks[m] = feature_map[:, :, h:h + k, w:w + k].reshape(b, -1)
    return chunks


def cfc_forward(feature_map, cfg, weights, biases=None):
    """Apply the per-position affine maps: capsule_m = W_m @ chunk_m + b_m.

    feature_map: Tensor [N, W, W] or [B, N, W, W];
    weights: Tensor [P, D, K*K*N] (one independent matrix per position,
    no sharing); biases: Tensor [P, D] or None.
    Returns a CapsuleSet of (W-K+1)^2 capsules of dimension D; squashing
    happens downstream when primary capsules are formed.
    """
    if not isinstance(feature_map, Tensor):
        feature_map = Tensor(feature_map)
    single = feature_map.ndim == 3
    fd = feature_map.data[None] if single else feature_map.data
    if fd.ndim != 4 or fd.shape[1] != cfg.in_channels or fd.shape[2] != fd.shape[3] \
            or fd.shape[2] != cfg.in_spatial:
        raise ValueError(f"feature map {feature_map.shape} does not match {cfg}")
    p, d, kkn = cfg.capsule_count, cfg.out_dim, cfg.chunk_len
    if weights.shape != (p, d, kkn):
        raise ValueError(
            f"need one [{d}, {kkn}] matrix per position ({p} total), got {weights.shape}"
        )
    if biases is not None and biases.shape != (p, d):
        raise ValueError(f"biases {biases.shape} do not match {p} positions of dim {d}")

    b = fd.shape[0]
    k = cfg.kernel_size
    positions = chunk_positions(cfg)
    # fresh contiguous copy per window: each position is its own affine map
    windows = [fd[:, :, h:h + k, w:w + k].reshape(b, -1) for _, h, w in positions]
    out = np.empty((b, p, d), dtype=fd.dtype)
    wdata = weights.data
    for m in range(p):
        out[:, m, :] = windows[m] @ wdata[m].T
    if biases is not None:
        out += biases.data[None, :, :]

    def bw(g):
        gb = g[None] if single else g                  # [B, P, D]
        if biases is not None:
            accumulate(biases, gb.sum(axis=0))
        if weights.requires_grad:
            gw = np.empty_like(wdata)
            for m in range(p):
                gw[m] = gb[:, m, :].T @ windows[m]
            accumulate(weights, gw)
        if feature_map.requires_grad:
            gf = np.zeros_like(fd)
            for m, h, w in positions:
                gwin = gb[:, m, :] @ wdata[m]
                gf[:, :, h:h + k, w:w + k] += gwin.reshape(b, cfg.in_channels, k, k)
            accumulate(feature_map, gf[0] if single else gf)

    parents = (feature_map, weights) if biases is None else (feature_map, weights, biases)
    node = make_op(out[0] if single else out, parents, bw)
    return CapsuleSet(node)


def cfc_param_count(cfg, with_bias=True):
    """Trainable scalars: (W-K+1)^2 * (K^2 * N * D + D if biased)."""
    per_position = cfg.kernel_size ** 2 * cfg.in_channels * cfg.out_dim
    if with_bias:
        per_position += cfg.out_dim
    return cfg.capsule_count * per_position


class CfcLayer:
    """Parameter container pairing a CfcConfig with its weights."""

    def __init__(self, cfg, rng, dtype=np.float64, with_bias=True):
        self.cfg = cfg
        self.weights = init_weights(
            (cfg.capsule_count, cfg.out_dim, cfg.chunk_len),
            "uniform-fan-in", rng, fan_in=cfg.chunk_len, dtype=dtype,
        )
        self.biases = init_weights(
            (cfg.capsule_count, cfg.out_dim), "zeros", rng, dtype=dtype
        ) if with_bias else None

    def forward(self, feature_map):
        return cfc_forward(feature_map, self.cfg, self.weights, self.biases)

    def named_params(self):
        out = [("cfc.weights", self.weights)]
        if self.biases is not None:
            out.append(("cfc.biases", self.biases))
        return out

    def param_count(self):
        return cfc_param_count(self.cfg, with_bias=self.biases is not None)
