"""Simultaneous SGD training of every layer of a DCGMM instance.

Each GMM layer maximises its own loss against its own input; no gradient
crosses a layer boundary. A classifier on top trains on cross-entropy in
the same pass.
"""
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from app.core.errors import ConfigurationError, DivergenceError, EmptyDatasetError
from app.layers.classifier import ClassifierGrads, ClassifierLayer, classifier_loss_and_grad_array
from app.layers.gmm import GmmGrads, GmmLayer, estimate_array
from app.layers.model import DcgmmModel
from app.models.training import AnnealingConfig, EpochRecord, TrainingConfig, TrainingHistory
from app.services.outlier_service import OutlierStats, StatsAccumulator

logger = logging.getLogger(__name__)


class AnnealingState:
    """Neighbourhood radius of one GMM layer's max-component loss."""

    def __init__(self, sigma_0: float, cfg: AnnealingConfig):
        self.sigma = sigma_0
        self.sigma_inf = min(cfg.sigma_inf, sigma_0)
        self.decay = cfg.decay
        self.threshold = cfg.stagnation_threshold
        self.previous: Optional[float] = None

    @classmethod
    def for_layer(cls, K: int, cfg: AnnealingConfig) -> "AnnealingState":
        sigma_0 = cfg.sigma_0 if cfg.sigma_0 is not None else 2.0 * math.sqrt(K) / 6.0
        return cls(sigma_0, cfg)

    def end_epoch(self, loss: float) -> bool:
        """Shrink the radius when the epoch loss stagnates; True if it did."""
        previous, self.previous = self.previous, loss
        if previous is None or previous == 0.0 or self.sigma <= self.sigma_inf:
            return False
        if (loss - previous) / abs(previous) < self.threshold:
            self.sigma = max(self.sigma * self.decay, self.sigma_inf)
            return True
        return False


@dataclass
class BatchResult:
    gmm_losses: Dict[int, float] = field(default_factory=dict)
    gmm_grads: Dict[int, GmmGrads] = field(default_factory=dict)
    logliks: Dict[int, np.ndarray] = field(default_factory=dict)
    classifier_loss: float = 0.0
    classifier_grads: Optional[ClassifierGrads] = None
    count: int = 0

    def merge(self, other: "BatchResult") -> "BatchResult":
        merged = BatchResult(count=self.count + other.count)
        for index in self.gmm_grads:
            merged.gmm_losses[index] = self.gmm_losses[index] + other.gmm_losses[index]
            merged.gmm_grads[index] = self.gmm_grads[index] + other.gmm_grads[index]
            merged.logliks[index] = np.concatenate([self.logliks[index], other.logliks[index]])
        if self.classifier_grads is not None:
            # mean losses, weighted back to the merged batch
            total = merged.count
            merged.classifier_loss = (self.classifier_loss * self.count + other.classifier_loss * other.count) / total
            merged.classifier_grads = ClassifierGrads(
                (self.classifier_grads.d_weights * self.count + other.classifier_grads.d_weights * other.count) / total,
                (self.classifier_grads.d_bias * self.count + other.classifier_grads.d_bias * other.count) / total,
            )
        return merged


def evaluate_batch(
    model: DcgmmModel,
    x: np.ndarray,
    labels: Optional[np.ndarray],
    cfg: TrainingConfig,
    sigmas: Dict[int, float],
) -> BatchResult:
    """One estimation-mode pass with every layer's own loss and gradients."""
    result = BatchResult(count=x.shape[0])
    current = x
    for layer in model.layers:
        if isinstance(layer, GmmLayer):
            current, loglik, loss, grads = estimate_array(current, layer.params, cfg.loss_mode, sigmas[layer.index])
            result.gmm_losses[layer.index] = loss
            result.gmm_grads[layer.index] = grads
            result.logliks[layer.index] = loglik
        elif isinstance(layer, ClassifierLayer):
            loss, grads, _ = classifier_loss_and_grad_array(current, labels, layer.params)
            result.classifier_loss, result.classifier_grads = loss, grads
        else:
            current = layer.forward(current)
    return result


class Trainer:
    """Owns the schedule state of one training run."""

    def __init__(self, model: DcgmmModel, cfg: TrainingConfig):
        self.model = model
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.annealing = {l.index: AnnealingState.for_layer(l.K, cfg.annealing) for l in model.gmm_layers}
        self.history = TrainingHistory()
        self.accumulator = StatsAccumulator(model)
        self._executor: Optional[ThreadPoolExecutor] = None

    def _sigmas(self) -> Dict[int, float]:
        return {index: state.sigma for index, state in self.annealing.items()}

    def _evaluate(self, x: np.ndarray, labels: Optional[np.ndarray]) -> BatchResult:
        sigmas = self._sigmas()
        if self._executor is None or x.shape[0] < 2:
            return evaluate_batch(self.model, x, labels, self.cfg, sigmas)
        shards = np.array_split(np.arange(x.shape[0]), min(self.cfg.threads, x.shape[0]))
        futures = [
            self._executor.submit(
                evaluate_batch, self.model, x[s], None if labels is None else labels[s], self.cfg, sigmas
            )
            for s in shards
        ]
        # ordered reduction keeps shard sums independent of completion order
        result = futures[0].result()
        for future in futures[1:]:
            result = result.merge(future.result())
        return result

    def _apply(self, result: BatchResult, phase: int) -> None:
        for layer in self.model.gmm_layers:
            loss = result.gmm_losses[layer.index]
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite loss {loss}", layer.index)
            rate = self.cfg.learning_rate(layer.index, self.cfg.gmm_learning_rate)
            layer.apply_update(result.gmm_grads[layer.index], rate / result.count, phase, self.cfg.p_min)
        classifier = self.model.classifier
        if classifier is not None:
            if not np.isfinite(result.classifier_loss):
                raise DivergenceError(f"non-finite loss {result.classifier_loss}", classifier.index)
            rate = self.cfg.learning_rate(classifier.index, self.cfg.classifier_learning_rate)
            classifier.apply_update(result.classifier_grads, rate)

    def run_epoch(self, epoch: int, x: np.ndarray, labels: Optional[np.ndarray]) -> List[EpochRecord]:
        cfg = self.cfg
        phase = 1 if epoch < cfg.phase1_epochs else 2
        collect = epoch >= cfg.stats_start_epoch
        started = time.perf_counter()
        losses = {index: 0.0 for index in self.annealing}
        logliks = {index: 0.0 for index in self.annealing}
        order = self.rng.permutation(x.shape[0])
        for start in range(0, x.shape[0], cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            result = self._evaluate(x[batch], None if labels is None else labels[batch])
            self._apply(result, phase)
            for index in losses:
                losses[index] += result.gmm_losses[index]
                logliks[index] += float(result.logliks[index].mean(axis=(1, 2)).sum())
            if collect:
                self.accumulator.update(result.logliks)
        seconds = time.perf_counter() - started
        records = []
        for index, state in self.annealing.items():
            loss = losses[index] / x.shape[0]
            record = EpochRecord(
                epoch=epoch, layer=index, loss=loss, loglik=logliks[index] / x.shape[0],
                sigma=state.sigma, seconds=seconds,
            )
            self.history.add(record)
            records.append(record)
            if cfg.loss_mode == "max_component" and state.end_epoch(loss):
                logger.info(f"Layer {index}: annealing radius decayed to {state.sigma:.4f}")
        return records

    def fit(self, x: np.ndarray, labels: Optional[np.ndarray]) -> Tuple[DcgmmModel, TrainingHistory, OutlierStats]:
        cfg = self.cfg
        if cfg.threads > 1:
            self._executor = ThreadPoolExecutor(max_workers=cfg.threads)
        try:
            for epoch in range(cfg.epochs):
                records = self.run_epoch(epoch, x, labels)
                summary = ", ".join(f"L{r.layer}={r.loss:.4f}" for r in records)
                logger.info(f"Epoch {epoch + 1}/{cfg.epochs} (phase {1 if epoch < cfg.phase1_epochs else 2}): {summary}")
        finally:
            if self._executor is not None:
                self._executor.shutdown()
                self._executor = None
        self.model.rng_state = self.rng.bit_generator.state
        self.model.training_echo = cfg.model_dump(mode="json")
        return self.model, self.history, self.accumulator.finish()


def train(
    model: DcgmmModel,
    images: np.ndarray,
    labels: Optional[np.ndarray],
    cfg: TrainingConfig,
) -> Tuple[DcgmmModel, TrainingHistory, OutlierStats]:
    """Train in place and return the model, its history and outlier statistics."""
    if images.shape[0] == 0:
        raise EmptyDatasetError("cannot train on an empty dataset")
    if images.ndim != 4 or tuple(images.shape[1:]) != model.input_dims:
        raise ConfigurationError(
            f"dataset dims {images.shape[1:]} do not match architecture input {model.input_dims}"
        )
    if model.classifier is not None:
        if labels is None:
            raise ConfigurationError("a classifier layer needs labels", layer_index=model.classifier.index)
        if len(labels) != images.shape[0]:
            raise ConfigurationError(f"{len(labels)} labels for {images.shape[0]} images")
        labels = np.asarray(labels, dtype=np.int64)
    _ = model.top_gmm_index  # raises for stacks that do not end in a GMM layer
    logger.info(
        f"Training {model.arch.name or 'model'} on {images.shape[0]} samples for {cfg.epochs} epochs "
        f"(batch {cfg.batch_size}, mode {cfg.loss_mode}, threads {cfg.threads})"
    )
    return Trainer(model, cfg).fit(images, labels)
