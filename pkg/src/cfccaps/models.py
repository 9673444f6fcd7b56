"""Model assembly: baseline CapsNet and CFC-CapsNet.

Pipeline: conv1 -> ReLU -> conv2 -> ReLU -> primary capsules (either a
reshape into 8-D groups or a CFC layer) -> squash -> capsule dropout ->
prediction vectors -> dynamic routing -> output capsules, with a
reconstruction decoder hanging off the output layer. Parameter
accounting is exact and reported per layer.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, asdict

import numpy as np

from .capsules import (
    CapsuleSet, HARD_MARGIN, NORMAL_MARGIN, capsule_dropout, capsule_lengths,
    dynamic_routing, margin_loss, predict_vectors, squash,
)
from .cfc import CfcConfig, CfcLayer
from .decoders import DecoderConfig, build_decoder, mask_select, reconstruction_loss
from .tensor import Tensor, check_finite, conv2d, init_weights, no_grad, relu, transpose

BASELINE_CAPS_DIM = 8
RECON_WEIGHT = 0.0005


@dataclass
class ModelConfig:
    """Complete architecture description."""

    image_shape: tuple = (1, 28, 28)       # (C, H, W)
    conv1_kernels: int = 256
    conv2_kernels: int = 256               # N_k; sweep axis for baseline capsule count
    conv_kernel_size: int = 9
    conv2_stride: int = 2
    capsule_mode: str = "baseline"         # "baseline" | "cfc"
    k: int = 1                             # CFC kernel size
    d: int = 8                             # CFC capsule dimension
    routing_iters: int = 3
    n_classes: int = 10
    out_caps_dim: int = 16
    decoder: str = None                    # default: fc for baseline, class_independent for cfc
    dropout: float = 0.0

    def __post_init__(self):
        if self.capsule_mode not in ("baseline", "cfc"):
            raise ValueError(f"unknown capsule mode {self.capsule_mode!r}")
        if self.capsule_mode == "baseline" and self.conv2_kernels % BASELINE_CAPS_DIM:
            raise ValueError(
                f"baseline grouping needs conv2_kernels divisible by "
                f"{BASELINE_CAPS_DIM}, got {self.conv2_kernels}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.decoder is None:
            self.decoder = "fc" if self.capsule_mode == "baseline" else "class_independent"
        c, h, w = self.image_shape
        fh, fw = self.feature_map_hw()
        if fh < 1 or fw < 1:
            raise ValueError(f"image {h}x{w} too small for the conv stack")
        if self.capsule_mode == "cfc":
            if fh != fw:
                raise ValueError(f"CFC needs a square feature map, got {fh}x{fw}")
            if not 1 <= self.k <= fw:
                raise ValueError(f"CFC kernel {self.k} exceeds feature map {fh}x{fw}")

    def feature_map_hw(self):
        _, h, w = self.image_shape
        k, s = self.conv_kernel_size, self.conv2_stride
        h1, w1 = h - k + 1, w - k + 1
        return (h1 - k) // s + 1, (w1 - k) // s + 1

    def primary_capsule_count(self):
        fh, fw = self.feature_map_hw()
        if self.capsule_mode == "baseline":
            return fh * fw * self.conv2_kernels // BASELINE_CAPS_DIM
        side = fw - self.k + 1
        return side * side

    def primary_capsule_dim(self):
        return BASELINE_CAPS_DIM if self.capsule_mode == "baseline" else self.d


def tiny_config(capsule_mode="cfc"):
    """8x8 single-channel input, 4-16 conv channels, 2 classes: small
    enough that finite-difference verification of the full pipeline
    (conv, CFC, unrolled routing, decoder, loss) runs in seconds."""
    return ModelConfig(
        image_shape=(1, 8, 8),
        conv1_kernels=4,
        conv2_kernels=8,
        conv_kernel_size=3,
        conv2_stride=2,
        capsule_mode=capsule_mode,
        k=1,
        d=4,
        n_classes=2,
        out_caps_dim=8,
    )


class CapsuleModel:
    """Parameters plus the differentiable forward pipeline."""

    def __init__(self, cfg, seed=0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        c, _, _ = cfg.image_shape
        ks = cfg.conv_kernel_size

        self.conv1_w = init_weights((cfg.conv1_kernels, c, ks, ks), "uniform-fan-in", rng, dtype=dtype)
        self.conv1_b = init_weights((cfg.conv1_kernels,), "zeros", rng, dtype=dtype)
        self.conv2_w = init_weights((cfg.conv2_kernels, cfg.conv1_kernels, ks, ks), "uniform-fan-in", rng, dtype=dtype)
        self.conv2_b = init_weights((cfg.conv2_kernels,), "zeros", rng, dtype=dtype)

        fh, fw = cfg.feature_map_hw()
        self.cfc = None
        if cfg.capsule_mode == "cfc":
            self.cfc = CfcLayer(
                CfcConfig(cfg.k, cfg.d, cfg.conv2_kernels, fw), rng, dtype=dtype
            )

        n_pc = cfg.primary_capsule_count()
        d_pc = cfg.primary_capsule_dim()
        self.routing_w = init_weights(
            (n_pc, cfg.n_classes, cfg.out_caps_dim, d_pc), "normal", rng,
            sigma=0.01, dtype=dtype,
        )

        dec_cfg = DecoderConfig.standard(
            cfg.decoder, cfg.image_shape, caps_dim=cfg.out_caps_dim,
            n_classes=cfg.n_classes,
        )
        self.decoder = build_decoder(dec_cfg, rng, dtype=dtype)

    # -- parameters ------------------------------------------------------

    def named_params(self):
        out = [
            ("conv1.weight", self.conv1_w), ("conv1.bias", self.conv1_b),
            ("conv2.weight", self.conv2_w), ("conv2.bias", self.conv2_b),
        ]
        if self.cfc is not None:
            out += self.cfc.named_params()
        out.append(("routing.weights", self.routing_w))
        out += self.decoder.named_params()
        return out

    def param_count(self):
        """(total, per-layer) exact trainable-scalar counts."""
        groups = OrderedDict()
        for name, p in self.named_params():
            layer = name.split(".")[0] if not name.startswith("decoder") else "decoder"
            groups[layer] = groups.get(layer, 0) + p.size
        return sum(groups.values()), groups

    # -- forward ---------------------------------------------------------

    def primary_capsules(self, images, train=False, rng=None):
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=self.dtype))
        single = x.ndim == 3
        if single:
            x = x.reshape((1,) + x.shape)
        check_finite(x, "input images")
        h1 = relu(conv2d(x, self.conv1_w, stride=1, bias=self.conv1_b))
        check_finite(h1, "conv1 output")
        h2 = relu(conv2d(h1, self.conv2_w, stride=self.cfg.conv2_stride, bias=self.conv2_b))
        check_finite(h2, "conv2 output")

        if self.cfc is not None:
            pcs = self.cfc.forward(h2)
        else:
            b, nk, fh, fw = h2.shape
            # [B, N_k, H, W] -> one 8-D capsule per (channel group, position)
            groups = nk // BASELINE_CAPS_DIM
            g5 = h2.reshape((b, groups, BASELINE_CAPS_DIM, fh, fw))
            pcs = CapsuleSet(
                transpose(g5, (0, 1, 3, 4, 2)).reshape((b, groups * fh * fw, BASELINE_CAPS_DIM))
            )
        pcs = CapsuleSet(squash(pcs.vectors))
        check_finite(pcs.vectors, "primary capsules")

        if train and self.cfg.dropout > 0.0:
            pcs = capsule_dropout(pcs, self.cfg.dropout, "train", rng)
        return pcs, single

    def forward(self, images, labels=None, train=False, rng=None):
        """Returns (capsule lengths [B, n_classes], reconstructions).

        The decoder is driven by `labels` when given (training) and by
        the longest capsule otherwise. Non-finite activations raise
        NumericsError naming the layer that produced them.
        """
        pcs, single = self.primary_capsules(images, train=train, rng=rng)
        u_hat = predict_vectors(pcs, self.routing_w)
        out_caps = dynamic_routing(u_hat, self.cfg.routing_iters)
        check_finite(out_caps.vectors, "routing output")
        lengths = capsule_lengths(out_caps)

        mode = "mask_all" if self.cfg.decoder == "fc" else "select_one"
        recon = self.decoder.forward(mask_select(out_caps, labels=labels, mode=mode))
        check_finite(recon, "decoder output")
        if single:
            return lengths.reshape(lengths.shape[1:]), recon.reshape(recon.shape[1:])
        return lengths, recon

    def predict(self, images):
        """Argmax of capsule lengths; ties break to the lowest index."""
        with no_grad():
            pcs, single = self.primary_capsules(images, train=False)
            u_hat = predict_vectors(pcs, self.routing_w)
            out_caps = dynamic_routing(u_hat, self.cfg.routing_iters)
            lengths = capsule_lengths(out_caps).data
        idx = lengths.argmax(axis=-1)
        return int(idx[0]) if single else idx


def build_model(cfg, seed=0, dtype=np.float32):
    return CapsuleModel(cfg, seed=seed, dtype=dtype)


def count_params(model):
    total, _ = model.param_count()
    return total


def total_loss(lengths, recon, images, labels, phase="normal",
               recon_weight=RECON_WEIGHT):
    """Margin loss plus weighted L1 reconstruction loss.

    phase "normal" uses thresholds (0.9, 0.1); "hard" tightens them to
    (0.95, 0.05).
    """
    if phase not in ("normal", "hard"):
        raise ValueError(f"unknown phase {phase!r}")
    params = NORMAL_MARGIN if phase == "normal" else HARD_MARGIN
    return margin_loss(lengths, labels, params) + reconstruction_loss(
        recon, images, weight=recon_weight
    )


def predict(model, images):
    return model.predict(images)


def config_to_dict(cfg):
    return asdict(cfg)


def config_from_dict(d):
    d = dict(d)
    d["image_shape"] = tuple(d["image_shape"])
    return ModelConfig(**d)
