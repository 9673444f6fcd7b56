"""Training, evaluation, timing benchmarks, sweeps, and metrics files.

Training runs two phases: `epochs_normal` with margin thresholds
(0.9, 0.1), then `epochs_hard` with the tightened (0.95, 0.05); the
optimizer and learning-rate schedule continue across the boundary unless
`hard_reset_schedule` is set. The learning rate decays by `gamma` after
every epoch. Checkpoints are written for the best test accuracy and the
most recent epoch (the latter carries optimizer state so runs resume
bit-exactly).

In deterministic mode wall-clock fields are recorded as 0.0 so metrics
files from identical (seed, config) runs are byte-identical.
"""

from __future__ import annotations

import json
import os
import sys
import time
from dataclasses import dataclass, asdict

import numpy as np

from .capsules import ROUTING_CLOCK, dynamic_routing
from .checkpoint import load_checkpoint, save_model
from .data import Dataset, batch_iter, load_dataset
from .models import (
    ModelConfig, build_model, config_from_dict, config_to_dict, total_loss,
)
from .optim import Adam
from .tensor import NumericsError

METRICS_HEADER = "epoch,phase,train_loss,test_accuracy,epoch_time_s,routing_time_s"


@dataclass
class TrainConfig:
    model: str = "cfc"                 # "capsnet" | "cfc"
    dataset: str = "mnist"
    data_dir: str = None
    epochs_normal: int = 100
    epochs_hard: int = 100
    lr: float = 0.001
    gamma: float = 0.96
    batch_size: int = 128
    seed: int = 0
    dropout: float = 0.0
    k: int = 1
    d: int = 8
    nk: int = 256                      # conv2 kernel count
    conv1: int = 256
    routing_iters: int = 3
    deterministic: bool = False
    out_dir: str = "runs"
    dtype: str = "float32"
    limit_train_batches: int = None
    limit_eval_batches: int = None
    hard_reset_schedule: bool = False

    def __post_init__(self):
        if self.epochs_normal < 0 or self.epochs_hard < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.model not in ("capsnet", "cfc"):
            raise ValueError(f"unknown model {self.model!r}")

    def numpy_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


@dataclass
class MetricsRecord:
    epoch: int
    phase: str                 # "normal" | "hard"
    train_loss: float
    test_accuracy: float
    epoch_time_s: float
    routing_time_s: float
    timestamp: float = 0.0     # not serialized; CSV columns are fixed

    def csv_row(self):
        return (f"{self.epoch},{self.phase},{self.train_loss!r},"
                f"{self.test_accuracy!r},{self.epoch_time_s!r},{self.routing_time_s!r}")


def model_config_for(cfg, image_shape, n_classes=10):
    return ModelConfig(
        image_shape=tuple(image_shape),
        conv1_kernels=cfg.conv1,
        conv2_kernels=cfg.nk,
        capsule_mode="baseline" if cfg.model == "capsnet" else "cfc",
        k=cfg.k,
        d=cfg.d,
        routing_iters=cfg.routing_iters,
        n_classes=n_classes,
        dropout=cfg.dropout,
    )


# -- metrics persistence -------------------------------------------------


def export_metrics(records, path, fmt="csv"):
    """Write records as CSV (fixed header) or an equivalent JSON array."""
    if fmt == "csv":
        lines = [METRICS_HEADER] + [r.csv_row() for r in records]
        payload = "\n".join(lines) + "\n"
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(payload)
    elif fmt == "json":
        rows = []
        for r in records:
            d = asdict(r)
            d.pop("timestamp")
            rows.append(d)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(rows, fh, indent=2)
            fh.write("\n")
    else:
        raise ValueError(f"unknown metrics format {fmt!r}")
    return path


def load_metrics(path):
    """Parse a metrics file written by export_metrics (CSV or JSON)."""
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    records = []
    if text.lstrip().startswith("["):
        for row in json.loads(text):
            records.append(MetricsRecord(**row))
        return records
    lines = [ln for ln in text.splitlines() if ln]
    if lines[0] != METRICS_HEADER:
        raise ValueError(f"unexpected metrics header {lines[0]!r}")
    for ln in lines[1:]:
        epoch, phase, loss, acc, et, rt = ln.split(",")
        records.append(MetricsRecord(int(epoch), phase, float(loss), float(acc),
                                     float(et), float(rt)))
    return records


# -- evaluation -----------------------------------------------------------


def evaluate_model(model, ds, batch_size=128, limit_batches=None):
    """Accuracy and per-class confusion matrix (rows = true class)."""
    n_classes = ds.n_classes
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    for i, (images, labels) in enumerate(batch_iter(ds, batch_size)):
        if limit_batches is not None and i >= limit_batches:
            break
        pred = model.predict(images.astype(model.dtype))
        for t, p in zip(labels, pred):
            confusion[t, p] += 1
    total = confusion.sum()
    accuracy = float(np.trace(confusion)) / total if total else 0.0
    return accuracy, confusion


def evaluate(checkpoint_path, ds, batch_size=128, limit_batches=None):
    """Evaluate a saved checkpoint against a dataset."""
    from .checkpoint import load_model

    model, _ = load_model(checkpoint_path, dtype=np.float64)
    if tuple(model.cfg.image_shape) != tuple(ds.image_shape):
        raise ValueError(
            f"checkpoint expects {model.cfg.image_shape} images, "
            f"dataset provides {ds.image_shape}"
        )
    return evaluate_model(model, ds, batch_size, limit_batches)


# -- training --------------------------------------------------------------


def _dump_nan_diagnostics(err, model, epoch, step):
    print(f"aborting at epoch {epoch} step {step}: {err}", file=sys.stderr)
    for name, p in model.named_params():
        d = p.data
        print(
            f"  {name}: shape {d.shape} min {d.min():.4g} max {d.max():.4g} "
            f"mean {d.mean():.4g} finite {np.isfinite(d).all()}",
            file=sys.stderr,
        )


def train(cfg, train_ds=None, test_ds=None, resume_from=None, verbose=False):
    """Run the two-phase schedule; returns (records, paths dict).

    Writes <out_dir>/metrics.csv after every epoch plus model_last.ckpt
    (with optimizer state) and model_best.ckpt (best test accuracy).
    """
    dtype = cfg.numpy_dtype()
    if train_ds is None:
        train_ds = load_dataset(cfg.dataset, "train", cfg.data_dir)
    if test_ds is None:
        test_ds = load_dataset(cfg.dataset, "test", cfg.data_dir)

    model_cfg = model_config_for(cfg, train_ds.image_shape, train_ds.n_classes)
    model = build_model(model_cfg, seed=cfg.seed, dtype=dtype)
    optimizer = Adam(model.named_params(), lr=cfg.lr, decay_gamma=cfg.gamma)

    start_epoch = 0
    best_acc = -1.0
    if resume_from is not None:
        config, blobs, meta = load_checkpoint(resume_from)
        if config != config_to_dict(model_cfg):
            raise ValueError("checkpoint architecture differs from the requested config")
        for name, p in model.named_params():
            p.data = blobs[name].astype(dtype, copy=True)
        optimizer.load_state_arrays(blobs, meta["adam_step"], meta["lr"])
        start_epoch = int(meta["epoch"]) + 1
        best_acc = float(meta.get("best_accuracy", -1.0))

    os.makedirs(cfg.out_dir, exist_ok=True)
    metrics_path = os.path.join(cfg.out_dir, "metrics.csv")
    last_path = os.path.join(cfg.out_dir, "model_last.ckpt")
    best_path = os.path.join(cfg.out_dir, "model_best.ckpt")

    records = []
    total_epochs = cfg.epochs_normal + cfg.epochs_hard
    for epoch in range(start_epoch, total_epochs):
        phase = "normal" if epoch < cfg.epochs_normal else "hard"
        if phase == "hard" and epoch == cfg.epochs_normal and cfg.hard_reset_schedule:
            optimizer.lr = cfg.lr

        dropout_rng = np.random.default_rng([cfg.seed, 7919, epoch])
        ROUTING_CLOCK.reset()
        ROUTING_CLOCK.enabled = True
        t0 = time.perf_counter()
        loss_sum = 0.0
        n_seen = 0
        for step, (images, labels) in enumerate(
            batch_iter(train_ds, cfg.batch_size, shuffle=True, seed=cfg.seed, epoch=epoch)
        ):
            if cfg.limit_train_batches is not None and step >= cfg.limit_train_batches:
                break
            try:
                lengths, recon = model.forward(
                    images.astype(dtype), labels, train=True, rng=dropout_rng
                )
                loss = total_loss(lengths, recon, images.astype(dtype), labels, phase)
                if not np.isfinite(loss.data).all():
                    raise NumericsError("non-finite training loss")
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
            except NumericsError as err:
                _dump_nan_diagnostics(err, model, epoch, step)
                raise
            loss_sum += float(loss.item()) * len(labels)
            n_seen += len(labels)
        epoch_time = time.perf_counter() - t0
        routing_time = ROUTING_CLOCK.total_s
        ROUTING_CLOCK.enabled = False
        optimizer.decay_lr()

        accuracy, _ = evaluate_model(model, test_ds, cfg.batch_size,
                                     cfg.limit_eval_batches)
        record = MetricsRecord(
            epoch=epoch,
            phase=phase,
            train_loss=loss_sum / max(n_seen, 1),
            test_accuracy=accuracy,
            epoch_time_s=0.0 if cfg.deterministic else epoch_time,
            routing_time_s=0.0 if cfg.deterministic else routing_time,
            timestamp=time.time(),
        )
        records.append(record)
        export_metrics(records, metrics_path)

        meta = {
            "epoch": epoch,
            "phase": phase,
            "lr": optimizer.lr,
            "adam_step": optimizer.step_count,
            "test_accuracy": accuracy,
            "best_accuracy": max(best_acc, accuracy),
            "train_config": asdict(cfg),
        }
        save_model(last_path, model, meta=meta, extra_blobs=optimizer.state_arrays())
        if accuracy > best_acc:
            best_acc = accuracy
            save_model(best_path, model, meta=meta)
        if verbose:
            print(
                f"epoch {epoch} [{phase}] loss {record.train_loss:.4f} "
                f"test acc {accuracy:.4f} ({epoch_time:.1f}s)"
            )

    paths = {"metrics": metrics_path, "last": last_path, "best": best_path}
    return records, paths


# -- benchmarks -------------------------------------------------------------


def _synthetic_dataset(image_shape, n, n_classes=10, seed=0):
    rng = np.random.default_rng(seed)
    images = rng.random((n, *image_shape), dtype=np.float32)
    labels = rng.integers(0, n_classes, size=n)
    return Dataset(images, labels, "train", "synthetic", n_classes)


def benchmark(cfg=None, n_epochs=1, dataset=None, test_dataset=None,
              n_images=128, batch_size=32, repeats=3, image_shape=(3, 32, 32)):
    """Time one training epoch, test-set inference, and isolated routing
    for both model variants on identical data. The first epoch is a
    warm-up and is excluded; reported numbers are medians over `repeats`
    measured epochs (n_epochs extra epochs each).
    """
    cfg = cfg or TrainConfig(dataset="synthetic", epochs_normal=1, epochs_hard=0)
    if dataset is None:
        dataset = _synthetic_dataset(image_shape, n_images, seed=cfg.seed)
    if test_dataset is None:
        test_dataset = _synthetic_dataset(dataset.image_shape, n_images,
                                          dataset.n_classes, seed=cfg.seed + 1)
    dtype = cfg.numpy_dtype()
    rows = []
    for variant in ("capsnet", "cfc"):
        vcfg = TrainConfig(**{**asdict(cfg), "model": variant})
        model_cfg = model_config_for(vcfg, dataset.image_shape, dataset.n_classes)
        model = build_model(model_cfg, seed=cfg.seed, dtype=dtype)
        optimizer = Adam(model.named_params(), lr=cfg.lr, decay_gamma=cfg.gamma)

        def one_epoch(epoch):
            ROUTING_CLOCK.reset()
            ROUTING_CLOCK.enabled = True
            t0 = time.perf_counter()
            rng = np.random.default_rng([cfg.seed, 7919, epoch])
            for images, labels in batch_iter(dataset, batch_size, shuffle=True,
                                             seed=cfg.seed, epoch=epoch):
                lengths, recon = model.forward(images.astype(dtype), labels,
                                               train=True, rng=rng)
                loss = total_loss(lengths, recon, images.astype(dtype), labels)
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
            elapsed = time.perf_counter() - t0
            ROUTING_CLOCK.enabled = False
            return elapsed, ROUTING_CLOCK.total_s

        one_epoch(0)  # warm-up, excluded
        train_times, routing_times = [], []
        for rep in range(repeats):
            for e in range(n_epochs):
                t, r = one_epoch(1 + rep * n_epochs + e)
                train_times.append(t)
                routing_times.append(r)

        infer_times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            evaluate_model(model, test_dataset, batch_size)
            infer_times.append(time.perf_counter() - t0)

        rows.append({
            "model": variant,
            "primary_capsules": model_cfg.primary_capsule_count(),
            "params": model.param_count()[0],
            "train_epoch_s": float(np.median(train_times)),
            "test_infer_s": float(np.median(infer_times)),
            "routing_s": float(np.median(routing_times)),
        })
    return {
        "machine": {"cpu_count": os.cpu_count()},
        "n_train_images": len(dataset),
        "n_test_images": len(test_dataset),
        "batch_size": batch_size,
        "repeats": repeats,
        "rows": rows,
    }


def benchmark_routing(pc_counts=(256, 512, 1024, 1536, 2048), n_out=10,
                      d_in=8, d_out=16, batch_size=16, iterations=3,
                      repeats=3, seed=0):
    """Median wall time of the routing pass alone vs. capsule count."""
    from .tensor import Tensor

    rng = np.random.default_rng(seed)
    rows = []
    for n in pc_counts:
        u_hat = Tensor(rng.normal(0, 0.1, (batch_size, n, n_out, d_out)).astype(np.float32),
                       requires_grad=True)
        dynamic_routing(u_hat, iterations)  # warm-up
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            dynamic_routing(u_hat, iterations)
            times.append(time.perf_counter() - t0)
        rows.append({"primary_capsules": n, "routing_s": float(np.median(times))})
    return rows


# -- sweeps ------------------------------------------------------------------


PC_SWEEP_NK = (32, 64, 128, 192, 256)
KD_SWEEP_K = (1, 2, 3)
KD_SWEEP_D = (8, 16, 32)


def sweep(kind, image_shape=(3, 32, 32), n_classes=10, train_fn=None):
    """Parameter-count tables for the two architecture sweeps.

    kind "pc_count": baseline capsule count via conv2 kernel count
    N_k in {32..256}. kind "kd_grid": CFC kernel size K x capsule
    dimension D. `train_fn(model_cfg) -> accuracy` optionally adds a
    short-training column.
    """
    rows = []
    if kind == "pc_count":
        for nk in PC_SWEEP_NK:
            mc = ModelConfig(image_shape=image_shape, conv2_kernels=nk,
                             capsule_mode="baseline", n_classes=n_classes)
            model = build_model(mc, seed=0, dtype=np.float64)
            row = {
                "nk": nk,
                "primary_capsules": mc.primary_capsule_count(),
                "params": model.param_count()[0],
            }
            if train_fn is not None:
                row["accuracy"] = train_fn(mc)
            rows.append(row)
    elif kind == "kd_grid":
        for k in KD_SWEEP_K:
            for d in KD_SWEEP_D:
                mc = ModelConfig(image_shape=image_shape, capsule_mode="cfc",
                                 k=k, d=d, n_classes=n_classes)
                model = build_model(mc, seed=0, dtype=np.float64)
                row = {
                    "k": k,
                    "d": d,
                    "primary_capsules": mc.primary_capsule_count(),
                    "params": model.param_count()[0],
                }
                if train_fn is not None:
                    row["accuracy"] = train_fn(mc)
                rows.append(row)
    else:
        raise ValueError(f"unknown sweep kind {kind!r}")
    return rows
