"""Convolutional GMM layer.

One set of K diagonal Gaussians is shared by all positions (h, w) of the
input; every channel vector is modelled independently. All density work is
done in log space.
"""
import math
from dataclasses import dataclass
from typing import Literal, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp, softmax

from app.core.errors import ConfigurationError, InvalidControlError, ShapeError
from app.core.tensor import Tensor4
from app.layers.base import Layer
from app.models.sampling import SamplingConfig

LOG_2PI = math.log(2.0 * math.pi)

LossMode = Literal["full", "max_component"]


@dataclass
class GmmParams:
    pi_logits: np.ndarray    # (K,)
    centroids: np.ndarray    # (K, D)
    precisions: np.ndarray   # (K, D), diagonal entries in 1/variance

    @property
    def K(self) -> int:
        return self.centroids.shape[0]

    @property
    def D(self) -> int:
        return self.centroids.shape[1]

    @property
    def weights(self) -> np.ndarray:
        return softmax(self.pi_logits)

    @property
    def log_weights(self) -> np.ndarray:
        return self.pi_logits - logsumexp(self.pi_logits)

    def copy(self) -> "GmmParams":
        return GmmParams(self.pi_logits.copy(), self.centroids.copy(), self.precisions.copy())

    @classmethod
    def initial(cls, K: int, D: int, rng: np.random.Generator) -> "GmmParams":
        # uniform weights, centroids in [-0.01, 0.01], unit precisions
        return cls(
            pi_logits=np.zeros(K),
            centroids=rng.uniform(-0.01, 0.01, size=(K, D)),
            precisions=np.ones((K, D)),
        )


@dataclass
class GmmGrads:
    d_pi_logits: np.ndarray
    d_centroids: np.ndarray
    d_precisions: np.ndarray

    def __add__(self, other: "GmmGrads") -> "GmmGrads":
        return GmmGrads(
            self.d_pi_logits + other.d_pi_logits,
            self.d_centroids + other.d_centroids,
            self.d_precisions + other.d_precisions,
        )


def component_grid(K: int) -> np.ndarray:
    """Component k sits at (k // side, k % side) on a ceil(sqrt(K)) grid."""
    side = math.ceil(math.sqrt(K))
    k = np.arange(K)
    return np.stack([k // side, k % side], axis=1).astype(np.float64)


def neighbourhood_kernel(K: int, sigma: Optional[float]) -> np.ndarray:
    """Row k: normalised Gaussian weights around component k on the grid.

    sigma None or 0 gives the identity, i.e. the pure max-component loss.
    """
    if not sigma:
        return np.eye(K)
    coords = component_grid(K)
    d2 = ((coords[:, np.newaxis, :] - coords[np.newaxis, :, :]) ** 2).sum(axis=-1)
    kernel = np.exp(-d2 / (2.0 * sigma * sigma))
    return kernel / kernel.sum(axis=1, keepdims=True)


def _check_input(x: np.ndarray, g: GmmParams) -> None:
    if x.ndim != 4 or x.shape[-1] != g.D:
        raise ShapeError(f"input channel dim {x.shape[-1:]} does not match D={g.D}")


def log_densities(rows: np.ndarray, g: GmmParams) -> np.ndarray:
    """log N_k(x_m) for every row m and component k, shape (M, K)."""
    prec = g.precisions
    quad = (
        (rows * rows) @ prec.T
        - 2.0 * rows @ (prec * g.centroids).T
        + (prec * g.centroids * g.centroids).sum(axis=1)
    )
    log_det = np.log(prec).sum(axis=1)
    return 0.5 * (log_det - g.D * LOG_2PI - quad)


def gmm_forward_array(x: np.ndarray, g: GmmParams) -> Tuple[np.ndarray, np.ndarray]:
    """Responsibilities (N,H,W,K) and log-likelihood map (N,H,W)."""
    _check_input(x, g)
    n, h, w, d = x.shape
    log_p = log_densities(x.reshape(-1, d), g)
    activities = softmax(log_p, axis=1)
    loglik = logsumexp(log_p + g.log_weights, axis=1)
    return activities.reshape(n, h, w, g.K), loglik.reshape(n, h, w)


def _loss_weights(log_p: np.ndarray, g: GmmParams, mode: LossMode, sigma: Optional[float]):
    """Per-row loss terms and the component weights their gradient uses."""
    weighted = log_p + g.log_weights
    if mode == "full":
        loglik = logsumexp(weighted, axis=1)
        return loglik, np.exp(weighted - loglik[:, np.newaxis])
    if mode == "max_component":
        best = np.argmax(weighted, axis=1)
        weights = neighbourhood_kernel(g.K, sigma)[best]
        return (weights * weighted).sum(axis=1), weights
    raise ConfigurationError(f"unknown loss mode {mode!r}")


def _gradients(rows: np.ndarray, weights: np.ndarray, g: GmmParams) -> GmmGrads:
    mass = weights.sum(axis=0)
    wx = weights.T @ rows
    wx2 = weights.T @ (rows * rows)
    mu, prec = g.centroids, g.precisions
    return GmmGrads(
        d_pi_logits=mass - mass.sum() * g.weights,
        d_centroids=prec * (wx - mass[:, np.newaxis] * mu),
        d_precisions=0.5 * (mass[:, np.newaxis] / prec - (wx2 - 2.0 * mu * wx + mass[:, np.newaxis] * mu * mu)),
    )


def loss_and_grad_array(
    x: np.ndarray,
    g: GmmParams,
    mode: LossMode = "full",
    sigma: Optional[float] = None,
    input_grad: bool = True,
):
    """Loss (sum over n, mean over h, w), parameter grads and input grad."""
    _check_input(x, g)
    n, h, w, d = x.shape
    rows = x.reshape(-1, d)
    row_loss, weights = _loss_weights(log_densities(rows, g), g, mode, sigma)
    weights = weights / (h * w)
    grads = _gradients(rows, weights, g)
    d_x = None
    if input_grad:
        d_x = (weights @ (g.precisions * g.centroids) - rows * (weights @ g.precisions)).reshape(x.shape)
    return float(row_loss.sum() / (h * w)), grads, d_x


def estimate_array(x: np.ndarray, g: GmmParams, mode: LossMode, sigma: Optional[float]):
    """One training evaluation: activities, loglik map, loss and parameter grads."""
    _check_input(x, g)
    n, h, w, d = x.shape
    rows = x.reshape(-1, d)
    log_p = log_densities(rows, g)
    weighted = log_p + g.log_weights
    loglik = logsumexp(weighted, axis=1)
    if mode == "full":
        row_loss, weights = loglik, np.exp(weighted - loglik[:, np.newaxis])
    else:
        row_loss, weights = _loss_weights(log_p, g, mode, sigma)
    grads = _gradients(rows, weights / (h * w), g)
    return (
        softmax(log_p, axis=1).reshape(n, h, w, g.K),
        loglik.reshape(n, h, w),
        float(row_loss.sum() / (h * w)),
        grads,
    )


def gmm_forward(input: Tensor4, g: GmmParams) -> Tuple[Tensor4, Tensor4]:
    activities, loglik = gmm_forward_array(input.data, g)
    return Tensor4(activities), Tensor4(loglik[..., np.newaxis])


def gmm_loss(input: Tensor4, g: GmmParams, mode: LossMode = "full", smoothing: Optional[float] = None) -> float:
    loss, _, _ = loss_and_grad_array(input.data, g, mode, smoothing, input_grad=False)
    return loss


def gmm_grad(
    input: Tensor4, g: GmmParams, mode: LossMode = "full", smoothing: Optional[float] = None
) -> Tuple[GmmGrads, Tensor4]:
    _, grads, d_x = loss_and_grad_array(input.data, g, mode, smoothing, input_grad=True)
    return grads, Tensor4(d_x)


def selection_distribution(selector: np.ndarray, top_s: Optional[int]) -> np.ndarray:
    """Restrict each row to its S largest entries and renormalise.

    Negative entries are clipped to zero first.
    """
    K = selector.shape[-1]
    if not np.all(np.isfinite(selector)):
        raise InvalidControlError("selector contains non-finite entries")
    s = K if top_s is None else int(top_s)
    if not 1 <= s <= K:
        raise ConfigurationError(f"top-S width {s} must lie in [1, {K}]")
    probs = np.clip(selector, 0.0, None)
    if s < K:
        order = np.argsort(-probs, axis=-1, kind="stable")
        keep = np.zeros(probs.shape, dtype=bool)
        np.put_along_axis(keep, order[..., :s], True, axis=-1)
        probs = np.where(keep, probs, 0.0)
    totals = probs.sum(axis=-1, keepdims=True)
    if np.any(totals <= 0.0):
        raise InvalidControlError("selector row has no positive mass among its top entries")
    return probs / totals


def draw_components(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cumulative = np.cumsum(probs, axis=-1)
    cumulative /= cumulative[..., -1:]
    u = rng.random(probs.shape[:-1])
    z = (cumulative <= u[..., np.newaxis]).sum(axis=-1)
    return np.minimum(z, probs.shape[-1] - 1)


def gmm_sample_control(
    selector: Optional[Tensor4],
    g: GmmParams,
    out_positions: Tuple[int, int],
    cfg: SamplingConfig,
    rng: np.random.Generator,
    count: int = 1,
) -> Tensor4:
    h, w = out_positions
    top_s = cfg.top_s
    if selector is None:
        # mixing weights are not a control signal, so no top-S restriction
        raw, top_s = np.broadcast_to(g.weights, (count, h, w, g.K)), None
    else:
        raw = selector.data
        if raw.shape[1:] != (h, w, g.K):
            raise ShapeError(f"selector dims {raw.shape[1:]} do not match {(h, w, g.K)}")
    return Tensor4(sample_components_array(raw, g, top_s, cfg.stochastic, rng)[0])


def sample_components_array(
    raw: np.ndarray, g: GmmParams, top_s: Optional[int], stochastic: bool, rng: np.random.Generator
) -> Tuple[np.ndarray, np.ndarray]:
    """Emitted channel vectors (N,H,W,D) and the selected components (N,H,W)."""
    z = draw_components(selection_distribution(raw, top_s), rng)
    out = g.centroids[z]
    if stochastic:
        out = out + rng.standard_normal(out.shape) / np.sqrt(g.precisions[z])
    return out, z


class GmmLayer(Layer):

    def __init__(self, index: int, input_dims: Sequence[int], K: int, params: Optional[GmmParams] = None):
        h, w, _ = input_dims
        super().__init__(index, input_dims, (h, w, K))
        self.K = K
        self.params = params

    @property
    def D(self) -> int:
        return self.input_dims[2]

    def forward(self, x: np.ndarray) -> np.ndarray:
        return gmm_forward_array(x, self.params)[0]

    def forward_with_loglik(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return gmm_forward_array(x, self.params)

    def apply_update(self, grads: GmmGrads, step: float, phase: int, p_min: float) -> None:
        """Vanilla SGD ascent; phase 1 moves centroids only."""
        g = self.params
        g.centroids += step * grads.d_centroids
        if phase >= 2:
            g.precisions += step * grads.d_precisions
            g.pi_logits += step * grads.d_pi_logits
        np.maximum(g.precisions, p_min, out=g.precisions)

    def sample_control(
        self, selector: Optional[np.ndarray], top_s: Optional[int], stochastic: bool,
        rng: np.random.Generator, count: int,
    ) -> Tuple[np.ndarray, np.ndarray]:
        h, w, _ = self.output_dims
        if selector is None:
            selector, top_s = np.broadcast_to(self.params.weights, (count, h, w, self.K)), None
        elif selector.shape[1:] != (h, w, self.K):
            raise ShapeError(f"{self.name}: control dims {selector.shape[1:]} do not match {(h, w, self.K)}")
        return sample_components_array(selector, self.params, top_s, stochastic, rng)
