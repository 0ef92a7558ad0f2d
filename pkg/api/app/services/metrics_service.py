"""Cluster validity indices and ROC sweeps for the outlier experiments."""
import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from scipy.spatial.distance import cdist

from app.core.batches import map_batches
from app.core.config import settings
from app.core.errors import ConfigurationError, DegenerateClusterError, EmptyDatasetError
from app.layers.model import DcgmmModel
from app.services.outlier_service import LayerStats

logger = logging.getLogger(__name__)

C_GRID = np.round(np.arange(-2.0, 2.0 + 1e-9, 0.05), 10)


@dataclass
class ClusterAssignment:
    labels: np.ndarray
    K: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.size == 0:
            raise EmptyDatasetError("an assignment needs at least one sample")
        if self.labels.min() < 0 or self.labels.max() >= self.K:
            raise ConfigurationError(f"cluster labels must lie in [0, {self.K})")

    def occupied(self) -> np.ndarray:
        """Indices of non-empty clusters."""
        return np.flatnonzero(np.bincount(self.labels, minlength=self.K))


def _grouped(data: np.ndarray, a: ClusterAssignment) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Rows sorted by compact cluster id, the ids and each cluster's first row."""
    data = np.asarray(data, dtype=np.float64).reshape(len(a.labels), -1)
    occupied = a.occupied()
    if occupied.size < a.K:
        logger.warning(f"Dropping {a.K - occupied.size} empty clusters")
    if occupied.size < 2:
        raise DegenerateClusterError("at least two non-empty clusters are required")
    compact = np.searchsorted(occupied, a.labels)
    order = np.argsort(compact, kind="stable")
    compact = compact[order]
    starts = np.flatnonzero(np.r_[True, compact[1:] != compact[:-1]])
    return data[order], compact, starts


@dataclass
class RocCurve:
    # (c or None, threshold, true-inlier rate, false-inlier rate), sorted by threshold descending
    points: List[Tuple[Optional[float], float, float, float]]
    auc: float

    def rates(self) -> Tuple[np.ndarray, np.ndarray]:
        tir = np.array([p[2] for p in self.points])
        fir = np.array([p[3] for p in self.points])
        return tir, fir




class MetricsService:
    """Cluster validity indices and ROC sweeps."""

    def assign_clusters(
        self, model: DcgmmModel, images: np.ndarray, batch_size: int = 100, threads: int = 1
    ) -> ClusterAssignment:
        """Label each sample by the argmax responsibility of the top GMM layer."""
        top = model.top_gmm
        if top.output_dims[:2] != (1, 1):
            raise ConfigurationError(
                f"cluster assignment needs a 1x1 top GMM layer, got {top.output_dims[:2]}", layer_index=top.index
            )

        def batch_labels(batch: np.ndarray) -> np.ndarray:
            return np.argmax(model.forward(batch, upto=top.index).outputs[top.index][:, 0, 0, :], axis=1)

        labels = map_batches(batch_labels, images, batch_size, threads)
        if not labels:
            raise EmptyDatasetError("cannot assign clusters for an empty dataset")
        return ClusterAssignment(np.concatenate(labels), top.K)

    def dunn_index(self, data: np.ndarray, a: ClusterAssignment, chunk_size: Optional[int] = None) -> float:
        """Single-linkage separation over complete-linkage diameter (Euclidean)."""
        points, compact, starts = _grouped(data, a)
        chunk_size = chunk_size or settings.METRICS_CHUNK_SIZE
        n_clusters = starts.size
        separation = np.full((n_clusters, n_clusters), np.inf)
        diameter = 0.0
        for lo in range(0, points.shape[0], chunk_size):
            block = cdist(points[lo:lo + chunk_size], points, metric="sqeuclidean")
            own = compact[lo:lo + chunk_size]
            nearest = np.minimum.reduceat(block, starts, axis=1)
            farthest = np.maximum.reduceat(block, starts, axis=1)
            diameter = max(diameter, float(farthest[np.arange(own.size), own].max()))
            np.minimum.at(separation, own, nearest)
        np.fill_diagonal(separation, np.inf)
        if diameter <= 0.0:
            raise DegenerateClusterError("every cluster has zero diameter")
        return float(np.sqrt(separation.min()) / np.sqrt(diameter))

    def davies_bouldin(self, data: np.ndarray, a: ClusterAssignment) -> float:
        """Mean over clusters of the worst (s_i + s_j) / d(c_i, c_j)."""
        points, compact, starts = _grouped(data, a)
        counts = np.diff(np.r_[starts, points.shape[0]])
        centroids = np.add.reduceat(points, starts, axis=0) / counts[:, np.newaxis]
        scatter = np.bincount(
            compact, weights=np.linalg.norm(points - centroids[compact], axis=1), minlength=starts.size
        ) / counts
        separation = cdist(centroids, centroids)
        np.fill_diagonal(separation, np.inf)
        if np.any(separation == 0.0):
            raise DegenerateClusterError("two clusters share a centroid")
        ratios = (scatter[:, np.newaxis] + scatter[np.newaxis, :]) / separation
        return float(ratios.max(axis=1).mean())

    def roc_points(
        self, inlier_scores: np.ndarray, outlier_scores: np.ndarray, stats: Optional[LayerStats] = None
    ) -> RocCurve:
        """Sweep thresholds mean - c*std for c in [-2, 2] plus every distinct score.

        A sample is called an inlier when its score is >= the threshold. Mean and
        std come from ``stats`` (top layer, averaged over positions) when given,
        otherwise from the inlier scores.
        """
        inlier_scores = np.asarray(inlier_scores, dtype=np.float64).ravel()
        outlier_scores = np.asarray(outlier_scores, dtype=np.float64).ravel()
        if inlier_scores.size == 0 or outlier_scores.size == 0:
            raise EmptyDatasetError("both score sets must be non-empty")
        if stats is not None:
            mean, std = float(stats.mean_map.mean()), float(np.sqrt(stats.var_map.mean()))
        else:
            mean, std = float(inlier_scores.mean()), float(inlier_scores.std())

        def rates(threshold: float) -> Tuple[float, float]:
            return float((inlier_scores >= threshold).mean()), float((outlier_scores >= threshold).mean())

        points = [(float(c), mean - c * std, *rates(mean - c * std)) for c in C_GRID]
        points += [(None, float(t), *rates(t)) for t in np.unique(np.r_[inlier_scores, outlier_scores])]
        points.sort(key=lambda p: (-p[1], p[0] is None))

        curve = np.array([(0.0, 0.0)] + [(p[3], p[2]) for p in points] + [(1.0, 1.0)])
        curve = curve[np.lexsort((curve[:, 1], curve[:, 0]))]
        widths = np.diff(curve[:, 0])
        auc = float(np.sum(widths * (curve[1:, 1] + curve[:-1, 1]) / 2.0))
        return RocCurve(points=points, auc=min(max(auc, 0.0), 1.0))


metrics_service = MetricsService()
