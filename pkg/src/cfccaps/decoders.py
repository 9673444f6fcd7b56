"""Reconstruction decoders and their loss.

Two variants regularize training by reconstructing the input image from
the output capsules:

* "fc" — the original three-layer fully-connected decoder; it sees the
  flattened output layer with every non-winning capsule masked to zero.
* "class_independent" — an affine projection of only the winning capsule
  followed by a chain of stride-1 deconvolutions; identical treatment of
  capsule dimensions regardless of the class.

The winning capsule comes from the ground-truth label during training
and from the longest capsule at inference.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .capsules import CapsuleSet, capsule_lengths
from .tensor import Tensor, absolute, deconv2d, einsum, init_weights, linear, relu, reshape, sigmoid

# Deconvolution chain used for 28x28 and 32x32 images: (out_channels,
# kernel); the final layer's channel count is replaced by the image's.
STANDARD_DECONV_CHAIN = ((128, 3), (64, 5), (32, 5), (16, 5), (16, 5), (16, 3), (16, 3))


@dataclass(frozen=True)
class DecoderConfig:
    kind: str                      # "fc" | "class_independent"
    image_shape: tuple             # (C, H, W)
    caps_dim: int = 16
    n_classes: int = 10
    fc_hidden: tuple = (512, 1024)
    projection_shape: tuple = None     # class_independent only: (C0, h0, w0)
    deconv_chain: tuple = None         # ((out_channels, kernel), ...)

    def __post_init__(self):
        if self.kind not in ("fc", "class_independent"):
            raise ValueError(f"unknown decoder kind {self.kind!r}")
        if self.kind == "class_independent":
            if self.projection_shape is None or self.deconv_chain is None:
                raise ValueError("class_independent decoder needs projection and chain")
            c, h, w = self.image_shape
            sh, sw = self.projection_shape[1], self.projection_shape[2]
            for _, k in self.deconv_chain:
                sh, sw = sh + k - 1, sw + k - 1
            if (sh, sw) != (h, w):
                raise ValueError(
                    f"deconv chain reaches {sh}x{sw} but image is {h}x{w}"
                )
            if self.deconv_chain[-1][0] != c:
                raise ValueError(
                    f"last deconv emits {self.deconv_chain[-1][0]} channels, image has {c}"
                )

    @staticmethod
    def standard(kind, image_shape, caps_dim=16, n_classes=10):
        """Canonical configs: 8x6x6 projection for 28x28 images, 8x10x10
        for 32x32 (same kernel chain), and a short chain for 8x8 test
        images."""
        if kind == "fc":
            return DecoderConfig(kind, tuple(image_shape), caps_dim, n_classes)
        c, h, w = image_shape
        if (h, w) == (28, 28):
            proj = (8, 6, 6)
            chain = STANDARD_DECONV_CHAIN[:-1] + ((c, 3),)
        elif (h, w) == (32, 32):
            proj = (8, 10, 10)
            chain = STANDARD_DECONV_CHAIN[:-1] + ((c, 3),)
        elif (h, w) == (8, 8):
            proj = (2, 2, 2)
            chain = ((4, 3), (c, 5))
        else:
            raise ValueError(f"no standard deconv chain for {h}x{w} images")
        return DecoderConfig(kind, tuple(image_shape), caps_dim, n_classes,
                             projection_shape=proj, deconv_chain=chain)


def spatial_chain(projection_hw, kernels):
    """Spatial sizes produced by a stride-1 deconv chain, start included."""
    sizes = [projection_hw]
    for k in kernels:
        sizes.append(sizes[-1] + k - 1)
    return sizes


def winning_indices(caps, labels=None):
    """Ground-truth labels when given, else argmax of capsule lengths
    (ties go to the lowest index)."""
    vectors = caps.vectors if isinstance(caps, CapsuleSet) else caps
    if labels is not None:
        return np.atleast_1d(np.asarray(labels, dtype=np.int64))
    lengths = np.sqrt((vectors.data * vectors.data).sum(axis=-1))
    if lengths.ndim == 1:
        lengths = lengths[None]
    return lengths.argmax(axis=1)


def mask_select(caps, labels=None, mode="mask_all"):
    """Build the decoder input from the output capsules.

    mode "mask_all": flattened [B, N*D] vector with every non-winning
    capsule zeroed (fc decoder input). mode "select_one": just the
    winning capsule [B, D] (class-independent decoder input).
    """
    if mode not in ("mask_all", "select_one"):
        raise ValueError(f"unknown mask mode {mode!r}")
    vectors = caps.vectors if isinstance(caps, CapsuleSet) else caps
    if not isinstance(vectors, Tensor):
        vectors = Tensor(vectors)
    single = vectors.ndim == 2
    vb = vectors.reshape((1,) + vectors.shape) if single else vectors
    b, n, d = vb.shape
    winners = winning_indices(vb, labels)
    if winners.shape[0] != b:
        raise ValueError(f"{winners.shape[0]} labels for batch of {b}")
    if winners.min() < 0 or winners.max() >= n:
        raise IndexError(f"label out of range [0, {n})")
    onehot = np.zeros((b, n), dtype=vb.dtype)
    onehot[np.arange(b), winners] = 1.0
    if mode == "mask_all":
        out = (vb * Tensor(onehot[:, :, None])).reshape((b, n * d))
    else:
        out = einsum("bnd,bn->bd", vb, Tensor(onehot))
    return out.reshape(out.shape[1:]) if single else out


class FcDecoder:
    """masked [N*D] -> hidden -> hidden -> sigmoid image."""

    def __init__(self, cfg, rng, dtype=np.float64):
        if cfg.kind != "fc":
            raise ValueError("FcDecoder needs a kind='fc' config")
        self.cfg = cfg
        c, h, w = cfg.image_shape
        sizes = [cfg.n_classes * cfg.caps_dim, *cfg.fc_hidden, c * h * w]
        self.weights = []
        self.biases = []
        for n_in, n_out in zip(sizes, sizes[1:]):
            self.weights.append(init_weights((n_out, n_in), "uniform-fan-in", rng, dtype=dtype))
            self.biases.append(init_weights((n_out,), "zeros", rng, dtype=dtype))

    def forward(self, masked):
        x = masked
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = linear(x, w, b)
            x = relu(x) if i < last else sigmoid(x)
        shape = self.cfg.image_shape if x.ndim == 1 else (x.shape[0],) + self.cfg.image_shape
        return reshape(x, shape)

    def named_params(self):
        out = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out += [(f"decoder.fc{i}.weight", w), (f"decoder.fc{i}.bias", b)]
        return out


class DeconvDecoder:
    """winning capsule [D] -> affine projection -> deconv chain -> sigmoid."""

    def __init__(self, cfg, rng, dtype=np.float64):
        if cfg.kind != "class_independent":
            raise ValueError("DeconvDecoder needs a kind='class_independent' config")
        self.cfg = cfg
        c0, h0, w0 = cfg.projection_shape
        self.proj_weight = init_weights((c0 * h0 * w0, cfg.caps_dim), "uniform-fan-in", rng, dtype=dtype)
        self.proj_bias = init_weights((c0 * h0 * w0,), "zeros", rng, dtype=dtype)
        self.kernels = []
        self.biases = []
        ch = c0
        for out_ch, k in cfg.deconv_chain:
            self.kernels.append(init_weights(
                (ch, out_ch, k, k), "uniform-fan-in", rng,
                fan_in=ch * k * k, dtype=dtype,
            ))
            self.biases.append(init_weights((out_ch,), "zeros", rng, dtype=dtype))
            ch = out_ch

    def forward(self, winning):
        single = winning.ndim == 1
        x = linear(winning, self.proj_weight, self.proj_bias)
        c0, h0, w0 = self.cfg.projection_shape
        shape = (c0, h0, w0) if single else (x.shape[0], c0, h0, w0)
        x = reshape(x, shape)
        last = len(self.kernels) - 1
        for i, (kern, bias) in enumerate(zip(self.kernels, self.biases)):
            x = deconv2d(x, kern)
            bias_shape = (-1, 1, 1) if single else (1, -1, 1, 1)
            x = x + bias.reshape(bias_shape)
            x = relu(x) if i < last else sigmoid(x)
        return x

    def named_params(self):
        out = [("decoder.proj.weight", self.proj_weight), ("decoder.proj.bias", self.proj_bias)]
        for i, (k, b) in enumerate(zip(self.kernels, self.biases)):
            out += [(f"decoder.deconv{i}.kernel", k), (f"decoder.deconv{i}.bias", b)]
        return out


def build_decoder(cfg, rng, dtype=np.float64):
    return FcDecoder(cfg, rng, dtype) if cfg.kind == "fc" else DeconvDecoder(cfg, rng, dtype)


def reconstruction_loss(recon, image, weight=0.0005):
    """weight * sum of absolute pixel differences, averaged over a batch.

    Images must share the reconstruction's shape and live in [0, 1].
    """
    if not isinstance(image, Tensor):
        image = Tensor(image)
    if recon.shape != image.shape:
        raise ValueError(f"reconstruction {recon.shape} vs image {image.shape}")
    diff = absolute(recon - image)
    per_sample = diff.sum() if recon.ndim == 3 else diff.reshape((recon.shape[0], -1)).sum(axis=1)
    return weight * per_sample.mean()


# -- qualitative image export (plumbing) ---------------------------------


def _to_u8(images):
    return np.clip(np.rint(np.asarray(images) * 255.0), 0, 255).astype(np.uint8)


def _tile(images, cols):
    n, c, h, w = images.shape
    cols = min(cols, n)
    rows = (n + cols - 1) // cols
    grid = np.zeros((c, rows * h, cols * w), dtype=images.dtype)
    for i, img in enumerate(images):
        r, q = divmod(i, cols)
        grid[:, r * h:(r + 1) * h, q * w:(q + 1) * w] = img
    return grid


def _png_bytes(u8_grid):
    c, h, w = u8_grid.shape
    color_type = 0 if c == 1 else 2
    raw = b"".join(
        b"\x00" + u8_grid[:, y, :].T.tobytes() for y in range(h)
    )

    def chunk(tag, payload):
        body = tag + payload
        return struct.pack(">I", len(payload)) + body + struct.pack(">I", zlib.crc32(body))

    ihdr = struct.pack(">IIBBBBB", w, h, 8, color_type, 0, 0, 0)
    return (b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", ihdr)
            + chunk(b"IDAT", zlib.compress(raw)) + chunk(b"IEND", b""))


def save_image_grid(images, path, cols=8):
    """Write [n, C, H, W] images in [0, 1] as one tiled PGM/PPM/PNG file.

    Grayscale grids go to PGM (P5) or PNG; RGB to PPM (P6) or PNG,
    chosen by the path suffix.
    """
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    grid = _tile(_to_u8(images), cols)
    c, h, w = grid.shape
    path = str(path)
    if path.endswith(".png"):
        payload = _png_bytes(grid)
    elif path.endswith(".pgm") and c == 1:
        payload = f"P5\n{w} {h}\n255\n".encode() + grid[0].tobytes()
    elif path.endswith(".ppm") and c == 3:
        payload = f"P6\n{w} {h}\n255\n".encode() + grid.transpose(1, 2, 0).tobytes()
    else:
        raise ValueError(f"cannot write {c}-channel grid to {path!r}")
    with open(path, "wb") as fh:
        fh.write(payload)
    return path
