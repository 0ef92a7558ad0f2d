"""Sampling-mode workflows: sampling, sharpening, conditional sampling,
variant generation, in-painting and scoring.

Every workflow is a single top-down pass. Layer ``i`` receives a control
signal shaped like its estimation-mode output and hands one shaped like its
input to the layer below. Hooks may replace the incoming control of a layer
before it is transformed.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Literal, Optional, Tuple

import numpy as np

from app.core.batches import map_batches
from app.core.errors import ConfigurationError, ShapeError, SharpeningDivergenceError
from app.core.tensor import Tensor4
from app.layers.base import Layer
from app.layers.classifier import one_hot
from app.layers.gmm import GmmLayer, gmm_forward_array, loss_and_grad_array
from app.layers.model import DcgmmModel
from app.models.sampling import SamplingConfig
from app.services.outlier_service import OutlierStats, outlier_service

logger = logging.getLogger(__name__)

ControlHook = Callable[[int, Optional[np.ndarray]], Optional[np.ndarray]]

Region = Literal["top-left", "top-right", "bottom-left", "bottom-right", "center"]


@dataclass
class GenerationResult:
    images: np.ndarray
    # GMM layer index -> selected component per position, (N, H, W)
    selections: Dict[int, np.ndarray] = field(default_factory=dict)

    def tensor(self) -> Tensor4:
        return Tensor4(self.images)


def chain_above(model: DcgmmModel, index: int) -> Tuple[List[Layer], Optional[GmmLayer]]:
    """Folding/pooling layers from ``index`` up to the next GMM layer, and that layer."""
    chain: List[Layer] = []
    for layer in model.generative_layers[index:]:
        if isinstance(layer, GmmLayer):
            return chain, layer
        chain.append(layer)
    return chain, None


def _objective(chain: List[Layer], gmm: GmmLayer, x: np.ndarray) -> np.ndarray:
    for layer in chain:
        x = layer.forward(x)
    _, loglik = gmm_forward_array(x, gmm.params)
    return loglik.mean(axis=(1, 2))


def _objective_gradient(chain: List[Layer], gmm: GmmLayer, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    inputs = []
    for layer in chain:
        inputs.append(x)
        x = layer.forward(x)
    _, loglik = gmm_forward_array(x, gmm.params)
    _, _, grad = loss_and_grad_array(x, gmm.params, "full", input_grad=True)
    for layer, layer_input in zip(reversed(chain), reversed(inputs)):
        grad = layer.backward_gradient(grad, layer_input)
    return loglik.mean(axis=(1, 2)), grad


def sharpen_array(control: np.ndarray, gmm: GmmLayer, chain: List[Layer], cfg: SamplingConfig) -> np.ndarray:
    """Gradient ascent on the full log-likelihood of ``gmm`` w.r.t. ``control``.

    Steps that do not improve a sample are halved up to ``max_backtracks``
    times; a sample whose step never improves stays where it is.
    """
    x = np.array(control, dtype=np.float64)
    if cfg.sharpen_iters == 0 or cfg.sharpen_step == 0.0:
        return x
    n = x.shape[0]
    expand = (slice(None),) + (np.newaxis,) * (x.ndim - 1)
    for _ in range(cfg.sharpen_iters):
        value, grad = _objective_gradient(chain, gmm, x)
        if not np.all(np.isfinite(grad)):
            raise SharpeningDivergenceError(f"non-finite sharpening gradient below layer {gmm.index}")
        step = np.full(n, cfg.sharpen_step)
        candidate = x + step[expand] * grad
        improved = _objective(chain, gmm, candidate) >= value
        for _ in range(cfg.max_backtracks):
            if improved.all():
                break
            step = np.where(improved, step, 0.5 * step)
            candidate = x + step[expand] * grad
            improved = _objective(chain, gmm, candidate) >= value
        x = np.where(improved[expand], candidate, x)
    return x


def pixel_preservation_mask(model: DcgmmModel, mask: np.ndarray, lowest: int) -> np.ndarray:
    """Map an inlier mask of the lowest GMM layer down to input pixels.

    A pixel is kept only if every window covering it is an inlier.
    """
    depth = model.layers[lowest].input_dims[2]
    keep = np.repeat(mask[..., np.newaxis].astype(np.float64), depth, axis=3)
    for layer in reversed(model.layers[:lowest]):
        keep = layer.backward_control(keep)
    return keep == 1.0


class InferenceService:
    """Top-down workflows over a trained model."""

    def _rng(self, cfg: SamplingConfig, rng: Optional[np.random.Generator]) -> np.random.Generator:
        return rng if rng is not None else np.random.default_rng(cfg.seed)

    def sharpen(self, control: Tensor4, layer_above: GmmLayer, through: List[Layer], cfg: SamplingConfig) -> Tensor4:
        expected = tuple(through[0].input_dims) if through else tuple(layer_above.input_dims)
        if control.dims[1:] != expected:
            raise ShapeError(f"control dims {control.dims[1:]} do not match {expected}")
        return Tensor4(sharpen_array(control.data, layer_above, through, cfg))

    def sharpen_below(self, model: DcgmmModel, index: int, control: np.ndarray, cfg: SamplingConfig) -> np.ndarray:
        chain, gmm = chain_above(model, index)
        if gmm is None or cfg.sharpen_iters == 0 or cfg.sharpen_step == 0.0:
            return control
        try:
            return sharpen_array(control, gmm, chain, cfg)
        except SharpeningDivergenceError as e:
            logger.warning(f"{e}; keeping the unsharpened control")
            return control

    def top_down(
        self,
        model: DcgmmModel,
        cfg: SamplingConfig,
        rng: np.random.Generator,
        count: int,
        top_control: Optional[np.ndarray] = None,
        hook: Optional[ControlHook] = None,
        unrestricted_top: bool = False,
    ) -> GenerationResult:
        top = model.top_gmm_index
        control = top_control
        selections: Dict[int, np.ndarray] = {}
        for layer in reversed(model.generative_layers):
            if hook is not None:
                control = hook(layer.index, control)
            if control is not None and tuple(control.shape[1:]) != tuple(layer.output_dims):
                raise ShapeError(
                    f"{layer.name}: control dims {control.shape[1:]} do not match activity dims {layer.output_dims}"
                )
            if isinstance(layer, GmmLayer):
                top_s = None if unrestricted_top and layer.index == top else cfg.top_s
                control, selections[layer.index] = layer.sample_control(control, top_s, cfg.stochastic, rng, count)
            else:
                if control is None:
                    raise ConfigurationError("only a GMM layer can start a top-down pass", layer_index=layer.index)
                control = self.sharpen_below(model, layer.index, layer.backward_control(control), cfg)
        return GenerationResult(images=control, selections=selections)

    def sample_with_selections(
        self, model: DcgmmModel, cfg: SamplingConfig, count: int, rng: Optional[np.random.Generator] = None
    ) -> GenerationResult:
        if count < 1:
            raise ConfigurationError(f"sample count must be positive, got {count}")
        return self.top_down(model, cfg, self._rng(cfg, rng), count)

    def sample(
        self, model: DcgmmModel, cfg: SamplingConfig, count: int, rng: Optional[np.random.Generator] = None
    ) -> Tensor4:
        """Unconditional samples; the top GMM layer draws from its mixing weights."""
        return self.sample_with_selections(model, cfg, count, rng).tensor()

    def conditional_sample(
        self, model: DcgmmModel, class_label: int, cfg: SamplingConfig, count: int = 1,
        rng: Optional[np.random.Generator] = None,
    ) -> Tensor4:
        classifier = model.classifier
        if classifier is None:
            raise ConfigurationError("conditional sampling needs a classifier layer")
        onehot = one_hot([class_label] * count, classifier.M)
        selector = classifier.backward_control(onehot.reshape(count, 1, 1, classifier.M))
        return self.top_down(model, cfg, self._rng(cfg, rng), count, top_control=selector).tensor()

    def generate_variants(
        self, model: DcgmmModel, template: Tensor4, cfg: SamplingConfig, rng: Optional[np.random.Generator] = None
    ) -> Tensor4:
        """Layers numbered >= cutoff take their own forward activities as control.

        Layer numbers are 1-based with the input as layer 0, so a cutoff of 0 or 1
        reconstructs the template and one past the last layer samples freely.
        """
        cutoff = cfg.variant_cutoff
        n_layers = len(model.generative_layers)
        if cutoff is None or not 0 <= cutoff <= n_layers + 1:
            raise ConfigurationError(f"variant cutoff must lie in [0, {n_layers + 1}], got {cutoff}")
        x = template.data
        forward = model.forward(x, upto=model.top_gmm_index)

        def copy_activities(index: int, control: Optional[np.ndarray]) -> Optional[np.ndarray]:
            return forward.outputs[index] if index + 1 >= cutoff else control

        return self.top_down(model, cfg, self._rng(cfg, rng), x.shape[0], hook=copy_activities).tensor()

    def inpaint(
        self,
        model: DcgmmModel,
        corrupted: Tensor4,
        c: float,
        cfg: SamplingConfig,
        stats: Optional[OutlierStats],
        rng: Optional[np.random.Generator] = None,
    ) -> Tensor4:
        """Complete outlier regions by sampling; inlier regions follow the input."""
        if stats is None:
            raise ConfigurationError("in-painting needs outlier statistics")
        stats.check(model)
        x = corrupted.data
        top = model.top_gmm_index
        forward = model.forward(x, upto=top)
        masks = outlier_service.inlier_masks(forward.logliks, stats, c)

        def fuse(index: int, control: Optional[np.ndarray]) -> Optional[np.ndarray]:
            if index == top:
                return forward.outputs[top]
            if index in masks:
                return np.where(masks[index][..., np.newaxis], forward.outputs[index], control)
            return control

        result = self.top_down(model, cfg, self._rng(cfg, rng), x.shape[0], hook=fuse, unrestricted_top=True)
        lowest = min(model.gmm_indices)
        preserved = pixel_preservation_mask(model, masks[lowest], lowest)
        logger.info(f"In-painting kept {preserved.mean():.1%} of input pixels")
        return Tensor4(np.where(preserved, x, result.images))

    def score(self, model: DcgmmModel, images: np.ndarray, batch_size: int = 100, threads: int = 1) -> np.ndarray:
        """Top GMM layer log-likelihood per sample, averaged over its positions."""
        top = model.top_gmm_index

        def batch_scores(batch: np.ndarray) -> np.ndarray:
            return model.forward(batch, upto=top).logliks[top].mean(axis=(1, 2))

        scores = map_batches(batch_scores, images, batch_size, threads)
        return np.concatenate(scores) if scores else np.zeros(0)

    def corrupt(self, images: Tensor4, region: Region = "bottom-right") -> Tensor4:
        """Blank a quadrant or the central square (half height and width)."""
        x = images.data.copy()
        _, h, w, _ = x.shape
        hh, hw = h // 2, w // 2
        if region == "top-left":
            x[:, :hh, :hw] = 0.0
        elif region == "top-right":
            x[:, :hh, hw:] = 0.0
        elif region == "bottom-left":
            x[:, hh:, :hw] = 0.0
        elif region == "bottom-right":
            x[:, hh:, hw:] = 0.0
        elif region == "center":
            x[:, h // 4:h // 4 + hh, w // 4:w // 4 + hw] = 0.0
        else:
            raise ConfigurationError(f"unknown region {region!r}")
        return Tensor4(x)


inference_service = InferenceService()
