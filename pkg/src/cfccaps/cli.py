"""Command-line interface: train, eval, bench, sweep, params.

Heavy imports happen after argument parsing so --deterministic can pin
the BLAS thread pools (single-threaded execution is part of the
bit-exact reproducibility contract) before numpy loads.
"""

from __future__ import annotations

import argparse
import os
import sys


def _add_model_flags(p):
    p.add_argument("--dataset", choices=("mnist", "fmnist", "cifar10"), default="mnist")
    p.add_argument("--model", choices=("capsnet", "cfc"), default="cfc")
    p.add_argument("--k", type=int, default=1, help="CFC kernel size")
    p.add_argument("--d", type=int, default=8, help="CFC capsule dimension")
    p.add_argument("--nk", type=int, default=256, help="conv2 kernel count")
    p.add_argument("--conv1", type=int, default=256, help="conv1 kernel count")
    p.add_argument("--routing-iters", type=int, default=3)
    p.add_argument("--dropout", type=float, default=0.0)


def _add_train_flags(p):
    p.add_argument("--epochs", type=int, default=100, help="normal-phase epochs")
    p.add_argument("--hard-epochs", type=int, default=100, help="hard-phase epochs")
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--gamma", type=float, default=0.96, help="per-epoch LR decay")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--deterministic", action="store_true",
                   help="single-threaded kernels; zeroed timing fields")
    p.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    p.add_argument("--data-dir", default=None, help="dataset root (or set DATA_DIR)")
    p.add_argument("--out", default="runs", help="output directory")
    p.add_argument("--limit-train-batches", type=int, default=None)
    p.add_argument("--limit-eval-batches", type=int, default=None)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--hard-reset-schedule", action="store_true",
                   help="reset the LR schedule when the hard phase starts")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="cfccaps",
        description="Train and benchmark capsule networks (baseline CapsNet and CFC-CapsNet).",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="two-phase training run")
    _add_model_flags(p_train)
    _add_train_flags(p_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("checkpoint")
    p_eval.add_argument("--dataset", choices=("mnist", "fmnist", "cifar10"), default="mnist")
    p_eval.add_argument("--split", choices=("train", "test"), default="test")
    p_eval.add_argument("--data-dir", default=None)
    p_eval.add_argument("--batch-size", type=int, default=128)
    p_eval.add_argument("--confusion", action="store_true", help="print the confusion matrix")

    p_bench = sub.add_parser("bench", help="speed comparison of both variants")
    _add_model_flags(p_bench)
    p_bench.add_argument("--batch-size", type=int, default=32)
    p_bench.add_argument("--n-images", type=int, default=128)
    p_bench.add_argument("--repeats", type=int, default=3)
    p_bench.add_argument("--epochs", type=int, default=1, help="measured epochs per repeat")
    p_bench.add_argument("--image-size", type=int, default=32, choices=(28, 32))
    p_bench.add_argument("--channels", type=int, default=3, choices=(1, 3))
    p_bench.add_argument("--routing-only", action="store_true",
                         help="time the routing pass across capsule counts")
    p_bench.add_argument("--seed", type=int, default=0)
    p_bench.add_argument("--out", default=None, help="write the report as JSON")

    p_sweep = sub.add_parser("sweep", help="parameter-count sweeps")
    p_sweep.add_argument("--kind", choices=("pc_count", "kd_grid"), required=True)
    p_sweep.add_argument("--image-size", type=int, default=32, choices=(28, 32))
    p_sweep.add_argument("--channels", type=int, default=3, choices=(1, 3))
    p_sweep.add_argument("--out", default=None, help="write rows as JSON")

    p_params = sub.add_parser("params", help="per-layer parameter report")
    _add_model_flags(p_params)
    p_params.add_argument("--image-size", type=int, default=28, choices=(8, 28, 32))
    p_params.add_argument("--channels", type=int, default=1, choices=(1, 3))

    return parser


def _pin_single_thread():
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
        os.environ.setdefault(var, "1")


def cmd_train(args):
    from .harness import TrainConfig, train

    cfg = TrainConfig(
        model=args.model, dataset=args.dataset, data_dir=args.data_dir,
        epochs_normal=args.epochs, epochs_hard=args.hard_epochs,
        lr=args.lr, gamma=args.gamma, batch_size=args.batch_size,
        seed=args.seed, dropout=args.dropout, k=args.k, d=args.d,
        nk=args.nk, conv1=args.conv1, routing_iters=args.routing_iters,
        deterministic=args.deterministic, out_dir=args.out, dtype=args.dtype,
        limit_train_batches=args.limit_train_batches,
        limit_eval_batches=args.limit_eval_batches,
        hard_reset_schedule=args.hard_reset_schedule,
    )
    records, paths = train(cfg, resume_from=args.resume, verbose=True)
    if records:
        best = max(r.test_accuracy for r in records)
        print(f"done: best test accuracy {best:.4f}")
    print(f"metrics: {paths['metrics']}")
    print(f"checkpoints: {paths['best']} (best), {paths['last']} (last)")
    return 0


def cmd_eval(args):
    from .data import load_dataset
    from .harness import evaluate

    ds = load_dataset(args.dataset, args.split, args.data_dir)
    accuracy, confusion = evaluate(args.checkpoint, ds, args.batch_size)
    print(f"accuracy: {accuracy:.4f} ({args.dataset} {args.split}, n={len(ds)})")
    if args.confusion:
        print("confusion matrix (rows = true class):")
        for row in confusion:
            print("  " + " ".join(f"{v:6d}" for v in row))
    return 0


def cmd_bench(args):
    import json

    from .harness import TrainConfig, benchmark, benchmark_routing

    if args.routing_only:
        rows = benchmark_routing(batch_size=args.batch_size, repeats=args.repeats,
                                 seed=args.seed)
        print(f"{'capsules':>10} {'routing_s':>12}")
        for r in rows:
            print(f"{r['primary_capsules']:>10} {r['routing_s']:>12.5f}")
        report = {"rows": rows}
    else:
        cfg = TrainConfig(
            model=args.model, k=args.k, d=args.d, nk=args.nk, conv1=args.conv1,
            routing_iters=args.routing_iters, dropout=args.dropout,
            epochs_normal=1, epochs_hard=0, seed=args.seed,
        )
        report = benchmark(
            cfg, n_epochs=args.epochs, n_images=args.n_images,
            batch_size=args.batch_size, repeats=args.repeats,
            image_shape=(args.channels, args.image_size, args.image_size),
        )
        print(f"{'model':>8} {'PCs':>6} {'params':>10} {'train_s':>10} "
              f"{'infer_s':>10} {'routing_s':>10}")
        for r in report["rows"]:
            print(f"{r['model']:>8} {r['primary_capsules']:>6} {r['params']:>10} "
                  f"{r['train_epoch_s']:>10.3f} {r['test_infer_s']:>10.3f} "
                  f"{r['routing_s']:>10.3f}")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2)
        print(f"report written to {args.out}")
    return 0


def cmd_sweep(args):
    import json

    from .harness import sweep

    shape = (args.channels, args.image_size, args.image_size)
    rows = sweep(args.kind, image_shape=shape)
    cols = [c for c in rows[0]]
    print(" ".join(f"{c:>18}" for c in cols))
    for r in rows:
        cells = []
        for c in cols:
            v = r[c]
            cells.append(f"{v / 1e6:>17.1f}M" if c == "params" else f"{v:>18}")
        print(" ".join(cells))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(rows, fh, indent=2)
        print(f"rows written to {args.out}")
    return 0


def cmd_params(args):
    import numpy as np

    from .harness import TrainConfig, model_config_for
    from .models import build_model

    cfg = TrainConfig(model=args.model, k=args.k, d=args.d, nk=args.nk,
                      conv1=args.conv1, routing_iters=args.routing_iters,
                      epochs_normal=1, epochs_hard=0)
    shape = (args.channels, args.image_size, args.image_size)
    model_cfg = model_config_for(cfg, shape)
    model = build_model(model_cfg, seed=0, dtype=np.float64)
    total, per_layer = model.param_count()
    print(f"{args.model} on {shape[0]}x{shape[1]}x{shape[2]} input")
    print(f"primary capsules: {model_cfg.primary_capsule_count()} "
          f"(dim {model_cfg.primary_capsule_dim()})")
    for layer, count in per_layer.items():
        print(f"  {layer:>10}: {count:>12,}")
    print(f"  {'total':>10}: {total:>12,}  ({total / 1e6:.1f}M)")
    return 0


def main(argv=None):
    args = build_parser().parse_args(argv)
    if getattr(args, "deterministic", False):
        _pin_single_thread()
    handlers = {
        "train": cmd_train,
        "eval": cmd_eval,
        "bench": cmd_bench,
        "sweep": cmd_sweep,
        "params": cmd_params,
    }
    try:
        return handlers[args.command](args)
    except (FileNotFoundError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
