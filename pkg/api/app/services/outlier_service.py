"""Long-term log-likelihood statistics and the per-position inlier test."""
import logging
from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np

from app.core.batches import map_batches
from app.core.errors import EmptyDatasetError, ShapeError
from app.layers.model import DcgmmModel

logger = logging.getLogger(__name__)


@dataclass
class LayerStats:
    """Per-position mean and population variance of one GMM layer's loglik map."""
    mean_map: np.ndarray  # (H, W)
    var_map: np.ndarray   # (H, W)

    def threshold(self, c: float) -> np.ndarray:
        return self.mean_map - c * np.sqrt(self.var_map)


@dataclass
class OutlierStats:
    layers: Dict[int, LayerStats] = field(default_factory=dict)
    count: int = 0

    def check(self, model: DcgmmModel) -> None:
        for layer in model.gmm_layers:
            stats = self.layers.get(layer.index)
            if stats is None:
                raise ShapeError(f"no statistics for GMM layer {layer.index}")
            if stats.mean_map.shape != tuple(layer.output_dims[:2]):
                raise ShapeError(
                    f"statistics for layer {layer.index} have dims {stats.mean_map.shape}, "
                    f"expected {layer.output_dims[:2]}"
                )


class RunningMoments:
    """Single-pass mean/variance over batches, merged with Chan's update."""

    def __init__(self, dims: Tuple[int, int]):
        self.count = 0
        self.mean = np.zeros(dims)
        self.m2 = np.zeros(dims)

    def update(self, batch: np.ndarray) -> None:
        n_b = batch.shape[0]
        if n_b == 0:
            return
        batch_mean = batch.mean(axis=0)
        batch_m2 = ((batch - batch_mean) ** 2).sum(axis=0)
        total = self.count + n_b
        delta = batch_mean - self.mean
        self.mean = self.mean + delta * (n_b / total)
        self.m2 = self.m2 + batch_m2 + delta * delta * (self.count * n_b / total)
        self.count = total

    def finish(self) -> LayerStats:
        if self.count == 0:
            raise EmptyDatasetError("no samples were accumulated")
        return LayerStats(mean_map=self.mean.copy(), var_map=np.maximum(self.m2 / self.count, 0.0))


class StatsAccumulator:
    """One RunningMoments per GMM layer of a model."""

    def __init__(self, model: DcgmmModel):
        self.moments = {l.index: RunningMoments(tuple(l.output_dims[:2])) for l in model.gmm_layers}

    def update(self, logliks: Dict[int, np.ndarray]) -> None:
        for index, moments in self.moments.items():
            moments.update(logliks[index])

    @property
    def count(self) -> int:
        return next(iter(self.moments.values())).count

    def finish(self) -> OutlierStats:
        return OutlierStats(
            layers={index: m.finish() for index, m in self.moments.items()},
            count=self.count,
        )


class OutlierService:
    """Collects statistics and applies the per-position inlier test."""

    def collect_stats(
        self, model: DcgmmModel, images: np.ndarray, batch_size: int = 100, threads: int = 1
    ) -> OutlierStats:
        if images.shape[0] == 0:
            raise EmptyDatasetError("cannot collect statistics over an empty dataset")
        accumulator = StatsAccumulator(model)
        top = model.top_gmm_index
        batches = map_batches(lambda batch: model.forward(batch, upto=top).logliks, images, batch_size, threads)
        for logliks in batches:
            accumulator.update(logliks)
        stats = accumulator.finish()
        logger.info(f"Collected outlier statistics over {stats.count} samples")
        return stats

    def inlier_masks(self, logliks: Dict[int, np.ndarray], stats: OutlierStats, c: float) -> Dict[int, np.ndarray]:
        return {index: loglik >= stats.layers[index].threshold(c) for index, loglik in logliks.items()}

    def is_inlier(
        self, model: DcgmmModel, stats: OutlierStats, images: np.ndarray, c: float
    ) -> Tuple[np.ndarray, Dict[int, np.ndarray]]:
        """Global verdict per sample (top GMM layer, every position) and per-layer masks."""
        stats.check(model)
        top = model.top_gmm_index
        masks = self.inlier_masks(model.forward(images, upto=top).logliks, stats, c)
        verdict = masks[top].reshape(masks[top].shape[0], -1).all(axis=1)
        return verdict, masks


outlier_service = OutlierService()
