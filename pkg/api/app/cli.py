"""Command-line workflows: train, sample, cond-sample, variants, inpaint,
outliers and cluster-metrics.

Exit codes: 0 success, 1 runtime or numerical failure, 2 usage or
configuration problems (including missing input files).
"""
import argparse
import logging
import math
import sys
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from pydantic import ValidationError

from app.core.config import Settings
from app.core.errors import ConfigurationError, DcgmmError, InvalidLabelError
from app.core.files import atomic_write_all, atomic_write_text, sha256_of
from app.core.tensor import Tensor4
from app.db.architecture_text import resolve_architecture
from app.db.checkpoint_store import load_checkpoint, save_checkpoint
from app.db.csv_sink import history_frame, metrics_frame, roc_frame, write_frame
from app.db.idx import read_idx_images, read_idx_labels
from app.db.image_grid import encode_pgm, encode_png
from app.layers.model import init_model
from app.models.manifest import RunManifest
from app.models.sampling import SamplingConfig
from app.models.training import AnnealingConfig, TrainingConfig
from app.services.inference_service import inference_service
from app.services.metrics_service import metrics_service
from app.services.training_service import train

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


def parse_classes(text: Optional[str]) -> Optional[List[int]]:
    """``0-4`` or ``0,2,5`` (or a mix) to a sorted class list."""
    if not text:
        return None
    classes = set()
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            lo, hi = (int(v) for v in part.split("-", 1))
            classes.update(range(lo, hi + 1))
        elif part:
            classes.add(int(part))
    return sorted(classes)


def load_dataset(images: str, labels: Optional[str], classes: Optional[List[int]] = None):
    x = read_idx_images(images).data
    y = read_idx_labels(labels) if labels else None
    if y is not None and y.size != x.shape[0]:
        raise ConfigurationError(f"{y.size} labels for {x.shape[0]} images")
    if classes is not None:
        if y is None:
            raise ConfigurationError("class filters need --labels")
        keep = np.isin(y, classes)
        x, y = x[keep], y[keep]
    return x, y


class Run:
    """Collects outputs of one command and writes the manifest next to them."""

    def __init__(self, command: str, args: argparse.Namespace, seed: int):
        self.command = command
        self.args = args
        self.seed = seed
        self.started_at = datetime.now(timezone.utc)
        self.clock = time.perf_counter()
        self.inputs: Dict[str, str] = {}
        self.outputs: Dict[str, str] = {}
        self.results: Dict[str, object] = {}

    def input(self, name: str, path: Optional[str]) -> None:
        if path:
            self.inputs[name] = str(path)

    def output(self, name: str, path) -> None:
        self.outputs[name] = str(path)

    def finish(self, primary: str) -> None:
        config = {k: v for k, v in vars(self.args).items() if k != "handler"}
        manifest = RunManifest(
            command=self.command,
            config=config,
            seed=self.seed,
            inputs=self.inputs,
            outputs=self.outputs,
            started_at=self.started_at,
            wall_clock_seconds=time.perf_counter() - self.clock,
            checksums={name: sha256_of(path) for name, path in self.outputs.items()},
            results=self.results,
        )
        atomic_write_text(f"{primary}.manifest.json", manifest.model_dump_json(indent=2))


def _sampling_config(args, seed: int) -> SamplingConfig:
    return SamplingConfig(
        top_s=args.top_s,
        sharpen_iters=args.sharpen_iters,
        sharpen_step=args.sharpen_step,
        variant_cutoff=getattr(args, "cutoff", None),
        stochastic=args.stochastic,
        seed=seed,
    )


def _grid_payloads(run: Run, samples: Tensor4, args, name: str, path: str) -> Dict[str, bytes]:
    columns = args.columns or math.ceil(math.sqrt(len(samples)))
    payloads = {path: encode_pgm(samples, columns)}
    run.output(name, path)
    if args.png:
        png = str(Path(path).with_suffix(".png"))
        payloads[png] = encode_png(samples, columns)
        run.output(f"{name}_png", png)
    return payloads


def _write_grid(run: Run, samples: Tensor4, args) -> None:
    atomic_write_all(_grid_payloads(run, samples, args, "grid", args.output))


def cmd_train(args, seed: int) -> int:
    arch = resolve_architecture(args.arch)
    x, y = load_dataset(args.images, args.labels, parse_classes(args.classes))
    cfg = TrainingConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        gmm_learning_rate=args.lr,
        classifier_learning_rate=args.classifier_lr,
        loss_mode=args.loss_mode,
        annealing=AnnealingConfig(sigma_0=args.sigma_0),
        seed=seed,
        threads=args.threads,
        p_min=args.p_min,
    )
    run = Run("train", args, seed)
    run.input("images", args.images)
    run.input("labels", args.labels)
    model = init_model(arch, seed)
    logger.info(f"Architecture:\n{model.describe()}")
    model, history, stats = train(model, x, y, cfg)
    save_checkpoint(model, stats, args.output)
    run.output("checkpoint", args.output)
    history_path = args.history or f"{args.output}.history.csv"
    write_frame(history_frame(history), history_path)
    run.output("history", history_path)
    run.results = {"samples": int(x.shape[0]), "final_losses": {
        str(r.layer): r.loss for r in history.records if r.epoch == cfg.epochs - 1
    }}
    run.finish(args.output)
    return EXIT_OK


def cmd_sample(args, seed: int) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    run = Run("sample", args, seed)
    run.input("checkpoint", args.checkpoint)
    samples = inference_service.sample(checkpoint.model, _sampling_config(args, seed), args.count)
    _write_grid(run, samples, args)
    run.finish(args.output)
    return EXIT_OK


def cmd_cond_sample(args, seed: int) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    run = Run("cond-sample", args, seed)
    run.input("checkpoint", args.checkpoint)
    samples = inference_service.conditional_sample(
        checkpoint.model, args.label, _sampling_config(args, seed), count=args.count
    )
    _write_grid(run, samples, args)
    run.finish(args.output)
    return EXIT_OK


def cmd_variants(args, seed: int) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    x, _ = load_dataset(args.images, args.labels, parse_classes(args.classes))
    run = Run("variants", args, seed)
    run.input("checkpoint", args.checkpoint)
    run.input("images", args.images)
    templates = Tensor4(x[: args.count])
    variants = inference_service.generate_variants(checkpoint.model, templates, _sampling_config(args, seed))
    _write_grid(run, variants, args)
    run.finish(args.output)
    return EXIT_OK


def cmd_inpaint(args, seed: int) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    x, _ = load_dataset(args.images, args.labels, parse_classes(args.classes))
    run = Run("inpaint", args, seed)
    run.input("checkpoint", args.checkpoint)
    run.input("images", args.images)
    corrupted = inference_service.corrupt(Tensor4(x[: args.count]), args.region)
    completed = inference_service.inpaint(
        checkpoint.model, corrupted, args.c, _sampling_config(args, seed), checkpoint.stats
    )
    payloads = _grid_payloads(run, completed, args, "grid", args.output)
    if args.corrupted_output:
        payloads.update(_grid_payloads(run, corrupted, args, "corrupted", args.corrupted_output))
    atomic_write_all(payloads)
    run.finish(args.output)
    return EXIT_OK


def cmd_outliers(args, seed: int) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    if checkpoint.stats is None:
        raise ConfigurationError("checkpoint carries no outlier statistics")
    model = checkpoint.model
    inliers, _ = load_dataset(args.images, args.labels, parse_classes(args.inlier_classes))
    outliers, _ = load_dataset(
        args.outlier_images or args.images,
        args.outlier_labels or args.labels,
        parse_classes(args.outlier_classes),
    )
    run = Run("outliers", args, seed)
    run.input("checkpoint", args.checkpoint)
    run.input("images", args.images)
    run.input("outlier_images", args.outlier_images)
    curve = metrics_service.roc_points(
        inference_service.score(model, inliers, threads=args.threads),
        inference_service.score(model, outliers, threads=args.threads),
        stats=checkpoint.stats.layers[model.top_gmm_index],
    )
    write_frame(roc_frame(curve), args.output)
    run.output("roc", args.output)
    run.results = {"auc": curve.auc, "inliers": int(inliers.shape[0]), "outliers": int(outliers.shape[0])}
    print(f"AUC: {curve.auc:.6f}")
    run.finish(args.output)
    return EXIT_OK


def cmd_cluster_metrics(args, seed: int) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    x, _ = load_dataset(args.images, args.labels, parse_classes(args.classes))
    run = Run("cluster-metrics", args, seed)
    run.input("checkpoint", args.checkpoint)
    run.input("images", args.images)
    assignment = metrics_service.assign_clusters(checkpoint.model, x, threads=args.threads)
    data = x.reshape(x.shape[0], -1)
    dunn = metrics_service.dunn_index(data, assignment)
    db = metrics_service.davies_bouldin(data, assignment)
    name = checkpoint.model.arch.name or Path(args.checkpoint).stem
    write_frame(metrics_frame(name, Path(args.images).name, dunn, db), args.output)
    run.output("metrics", args.output)
    run.results = {"dunn": dunn, "db": db}
    print(f"Dunn: {dunn:.6f}  Davies-Bouldin: {db:.6f}")
    run.finish(args.output)
    return EXIT_OK


def _add_sampling_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--output", required=True, help="PGM grid path")
    p.add_argument("--count", type=int, default=25)
    p.add_argument("--columns", type=int, default=None)
    p.add_argument("--top-s", type=int, default=None)
    p.add_argument("--sharpen-iters", type=int, default=1000)
    p.add_argument("--sharpen-step", type=float, default=0.1)
    p.add_argument("--stochastic", action="store_true")
    p.add_argument("--png", action="store_true", help="also write a PNG next to the grid")


def _add_data_flags(p: argparse.ArgumentParser, labels_required: bool = False) -> None:
    p.add_argument("--images", required=True)
    p.add_argument("--labels", required=labels_required, default=None)
    p.add_argument("--classes", default=None, help="e.g. 0-4")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dcgmm", description="Deep convolutional GMM experiments")
    parser.add_argument("--seed", type=int, default=None, help="defaults to DCGMM_SEED")
    parser.add_argument("--log-level", default=None)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--arch", required=True, help="reference ID (e.g. 2L-c), file or inline text")
    _add_data_flags(p)
    p.add_argument("--output", required=True, help="checkpoint path")
    p.add_argument("--history", default=None)
    p.add_argument("--epochs", type=int, default=25)
    p.add_argument("--batch-size", type=int, default=100)
    p.add_argument("--lr", type=float, default=0.011)
    p.add_argument("--classifier-lr", type=float, default=0.05)
    p.add_argument("--loss-mode", choices=["full", "max_component"], default="max_component")
    p.add_argument("--sigma-0", type=float, default=None)
    p.add_argument("--p-min", type=float, default=None)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("sample", help="unconditional samples")
    _add_sampling_flags(p)
    p.set_defaults(handler=cmd_sample)

    p = sub.add_parser("cond-sample", help="class-conditional samples")
    _add_sampling_flags(p)
    p.add_argument("--label", type=int, required=True)
    p.set_defaults(handler=cmd_cond_sample)

    p = sub.add_parser("variants", help="variants of template images")
    _add_sampling_flags(p)
    _add_data_flags(p)
    p.add_argument("--cutoff", type=int, required=True)
    p.set_defaults(handler=cmd_variants)

    p = sub.add_parser("inpaint", help="complete blanked image regions")
    _add_sampling_flags(p)
    _add_data_flags(p)
    p.add_argument("--region", default="bottom-right",
                   choices=["top-left", "top-right", "bottom-left", "bottom-right", "center"])
    p.add_argument("--c", type=float, default=0.0)
    p.add_argument("--corrupted-output", default=None)
    p.set_defaults(handler=cmd_inpaint)

    p = sub.add_parser("outliers", help="ROC sweep of inlier vs outlier scores")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--labels", default=None)
    p.add_argument("--outlier-images", default=None)
    p.add_argument("--outlier-labels", default=None)
    p.add_argument("--inlier-classes", default=None)
    p.add_argument("--outlier-classes", default=None)
    p.add_argument("--output", required=True, help="ROC CSV path")
    p.add_argument("--threads", type=int, default=None, help="shards batch scoring")
    p.set_defaults(handler=cmd_outliers)

    p = sub.add_parser("cluster-metrics", help="Dunn and Davies-Bouldin indices")
    p.add_argument("--checkpoint", required=True)
    _add_data_flags(p)
    p.add_argument("--output", required=True, help="metrics CSV path")
    p.add_argument("--threads", type=int, default=None, help="shards cluster assignment")
    p.set_defaults(handler=cmd_cluster_metrics)

    for command in sub.choices.values():
        command.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    env = Settings()
    logging.basicConfig(
        level=(args.log_level or env.LOG_LEVEL).upper(),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )
    seed = args.seed if args.seed is not None else env.SEED
    if getattr(args, "threads", 0) is None:
        args.threads = env.THREADS
    if getattr(args, "p_min", 0) is None:
        args.p_min = env.P_MIN
    try:
        return args.handler(args, seed)
    except FileNotFoundError as e:
        logger.error(str(e))
        return EXIT_USAGE
    except (ConfigurationError, InvalidLabelError) as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_USAGE
    except ValidationError as e:
        logger.error(f"Invalid settings: {e}")
        return EXIT_USAGE
    except DcgmmError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_RUNTIME
    except Exception as e:
        logger.exception(f"Unexpected failure: {e}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
