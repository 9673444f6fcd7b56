"""Differentiable capsule networks from scratch.

Baseline CapsNet and CFC-CapsNet on a small numpy-backed reverse-mode
autodiff engine, with exact parameter accounting, dataset loaders, and a
training/benchmark harness.
"""

from .capsules import (
    CapsuleSet, HARD_MARGIN, MarginLossParams, NORMAL_MARGIN, RoutingState,
    capsule_dropout, capsule_lengths, dynamic_routing, margin_loss,
    predict_vectors, squash,
)
from .cfc import CfcConfig, CfcLayer, Chunk, cfc_forward, cfc_param_count, chunk_positions
from .checkpoint import load_checkpoint, load_model, save_checkpoint, save_model
from .data import (
    Dataset, batch_iter, expanded_mnist_sample, load_cifar_binary, load_dataset, load_idx,
)
from .decoders import (
    DecoderConfig, DeconvDecoder, FcDecoder, mask_select, reconstruction_loss,
    save_image_grid,
)
from .harness import (
    MetricsRecord, TrainConfig, benchmark, benchmark_routing, evaluate,
    evaluate_model, export_metrics, load_metrics, sweep, train,
)
from .models import (
    CapsuleModel, ModelConfig, build_model, count_params, predict, tiny_config,
    total_loss,
)
from .optim import Adam, MissingGradError
from .tensor import (
    NumericsError, ShapeError, Tensor, conv2d, deconv2d, einsum, init_weights,
    linear, no_grad, softmax,
)

__version__ = "0.1.0"
