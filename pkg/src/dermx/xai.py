"""Saliency explanations: vanilla gradient, SmoothGrad, Score-CAM and
Faster Score-CAM, plus heatmap overlay rendering.

Gradient methods differentiate the target class's pre-softmax score and
reduce channels by the max of absolute RGB gradients. CAM methods are
gradient-free: each activation channel of a spatial layer is upsampled to
the input size, min-max normalized, used to mask the input, and weighted by
how much the masked input raises the class probability over an all-zero
baseline; the final map is the ReLU of the weighted activation sum. Faster
Score-CAM keeps only the channels with the highest spatial variance.

Maps are max-normalized to [0, 1]; an all-zero map cannot be normalized and
is returned with ``degenerate=True`` instead of being rescaled.
"""

from __future__ import annotations

import enum
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import CapabilityError, LayerError, ValidationError
from .validation import check_image


class SaliencyMethod(str, enum.Enum):
    VANILLA_GRAD = "vanilla_gradient"
    SMOOTHGRAD = "smoothgrad"
    SCORE_CAM = "score_cam"
    FASTER_SCORE_CAM = "faster_score_cam"


@dataclass(frozen=True)
class SaliencyMap:
    """Per-pixel relevance grid aligned to one input image and target class."""

    values: np.ndarray
    method: SaliencyMethod
    target_class: int
    source_image_id: str = ""
    params: dict = field(default_factory=dict)
    degenerate: bool = False


@dataclass(frozen=True)
class SmoothGradParams:
    n_samples: int = 25
    noise_sigma: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValidationError(f"n_samples must be >= 1, got {self.n_samples}")
        if self.noise_sigma < 0:
            raise ValidationError(f"noise_sigma must be >= 0, got {self.noise_sigma}")


@dataclass(frozen=True)
class CamParams:
    layer: str | None = None
    k_channels: int | None = 16  # None means all channels

    def __post_init__(self):
        if self.k_channels is not None and self.k_channels < 1:
            raise ValidationError(f"k_channels must be >= 1 or None, got {self.k_channels}")


@dataclass(frozen=True)
class SaliencyConfig:
    smoothgrad: SmoothGradParams = SmoothGradParams()
    cam: CamParams = CamParams()

    @classmethod
    def from_json(cls, text: str) -> "SaliencyConfig":
        data = json.loads(text)
        return cls(
            smoothgrad=SmoothGradParams(**data.get("smoothgrad", {})),
            cam=CamParams(**data.get("cam", {})),
        )


def _normalize(raw: np.ndarray) -> tuple[np.ndarray, bool]:
    """Divide by the max; an all-zero map stays zero and is flagged."""
    peak = raw.max() if raw.size else 0.0
    if peak <= 0:
        return np.zeros_like(raw, dtype=np.float64), True
    return raw / peak, False


def _reduce_channels(gradient: np.ndarray) -> np.ndarray:
    return np.abs(gradient).max(axis=2)


def _require_gradients(handle) -> None:
    if not getattr(handle, "supports_input_gradient", True):
        raise CapabilityError(
            "model handle does not expose input gradients; "
            "use score_cam / faster_score_cam instead"
        )


def vanilla_gradient(handle, image: np.ndarray, class_index: int,
                     image_id: str = "") -> SaliencyMap:
    """Max-over-RGB absolute gradient of the class score."""
    _require_gradients(handle)
    image = check_image(image)
    grad = handle.input_gradient(image, class_index)
    values, degenerate = _normalize(_reduce_channels(np.asarray(grad, dtype=np.float64)))
    return SaliencyMap(
        values=values, method=SaliencyMethod.VANILLA_GRAD, target_class=class_index,
        source_image_id=image_id, params={}, degenerate=degenerate,
    )


def smoothgrad(handle, image: np.ndarray, class_index: int,
               params: SmoothGradParams = SmoothGradParams(),
               image_id: str = "") -> SaliencyMap:
    """Average the class-score gradient over Gaussian-perturbed copies.

    Noise draws are N(0, sigma^2) per pixel with sigma = noise_sigma times
    the unit value range; perturbed inputs are clipped back to [0, 1].
    Deterministic for a fixed seed.
    """
    _require_gradients(handle)
    image = check_image(image)
    rng = np.random.default_rng(params.seed)
    sigma = params.noise_sigma  # images live in [0, 1], so range is 1
    acc = np.zeros(image.shape, dtype=np.float64)
    for _ in range(params.n_samples):
        if sigma > 0:
            noisy = np.clip(
                image + rng.normal(0.0, sigma, size=image.shape), 0.0, 1.0
            ).astype(np.float32)
        else:
            noisy = image
        acc += np.asarray(handle.input_gradient(noisy, class_index), dtype=np.float64)
    values, degenerate = _normalize(_reduce_channels(acc / params.n_samples))
    return SaliencyMap(
        values=values, method=SaliencyMethod.SMOOTHGRAD, target_class=class_index,
        source_image_id=image_id,
        params={"n_samples": params.n_samples, "noise_sigma": params.noise_sigma,
                "seed": params.seed},
        degenerate=degenerate,
    )


def _upsample_bilinear(stack: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """(C, h, w) -> (C, H, W) bilinear upsample."""
    t = torch.from_numpy(np.ascontiguousarray(stack, dtype=np.float32))[None]
    out = F.interpolate(t, size=size, mode="bilinear", align_corners=False)
    return out[0].numpy().astype(np.float64)


def _resolve_layer(handle, layer: str | None) -> str:
    if layer is not None:
        return layer
    layer = getattr(handle, "default_cam_layer", None)
    if layer is None:
        raise LayerError("no layer given and the handle has no default CAM target")
    return layer


def _spatial_activations(handle, image: np.ndarray, layer: str) -> np.ndarray:
    acts = np.asarray(handle.activations(image, layer), dtype=np.float64)
    if acts.ndim != 3:
        raise LayerError(
            f"layer {layer!r} does not yield spatial activation maps (shape {acts.shape})"
        )
    return acts


def _resolve_channels(k_channels, num_channels: int) -> int:
    if k_channels is None or (isinstance(k_channels, str) and k_channels.lower() == "all"):
        return num_channels
    k = int(k_channels)
    if k < 1:
        raise ValidationError(f"k_channels must be >= 1 or 'all', got {k_channels}")
    if k > num_channels:
        warnings.warn(
            f"k_channels={k} exceeds the layer's {num_channels} channels; clamping",
            stacklevel=3,
        )
        k = num_channels
    return k


def _score_cam_core(handle, image: np.ndarray, class_index: int, layer: str,
                    channel_indices: np.ndarray) -> tuple[np.ndarray, bool, np.ndarray]:
    """Shared Score-CAM computation over a chosen channel subset.

    Returns (normalized map, degenerate flag, per-channel score deltas).
    Only forward passes are used.
    """
    acts = _spatial_activations(handle, image, layer)
    height, width = image.shape[:2]
    subset = acts[channel_indices]
    upsampled = _upsample_bilinear(subset, (height, width))

    lo = upsampled.min(axis=(1, 2), keepdims=True)
    hi = upsampled.max(axis=(1, 2), keepdims=True)
    span = hi - lo
    masks = np.where(span > 0, (upsampled - lo) / np.where(span == 0, 1.0, span), 0.0)

    masked = (image[np.newaxis].astype(np.float64) * masks[..., np.newaxis]).astype(np.float32)
    baseline = float(handle.forward(np.zeros_like(image)[np.newaxis])[0, class_index])
    scores = handle.forward(masked)[:, class_index].astype(np.float64) - baseline

    weighted = np.tensordot(scores, upsampled, axes=(0, 0))
    values, degenerate = _normalize(np.maximum(weighted, 0.0))
    return values, degenerate, scores


def channel_variances(handle, image: np.ndarray, layer: str) -> np.ndarray:
    """Spatial variance of each activation channel at its native resolution."""
    acts = _spatial_activations(handle, image, layer)
    return acts.var(axis=(1, 2))


def _select_channels(acts: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k highest-variance channels, in ascending channel order.

    k covering all channels is an exact no-op selection. Variance ties rank
    the lower channel index first; the chosen subset is evaluated in
    ascending order so restricted runs sum channels the same way full runs do.
    """
    num_channels = acts.shape[0]
    if k >= num_channels:
        return np.arange(num_channels)
    variances = acts.var(axis=(1, 2))
    ranked = np.lexsort((np.arange(num_channels), -variances))
    return np.sort(ranked[:k])


def _cam(handle, image, class_index, layer, k_channels, method, image_id) -> SaliencyMap:
    image = check_image(image)
    layer = _resolve_layer(handle, layer)
    acts = _spatial_activations(handle, image, layer)
    k = _resolve_channels(k_channels, acts.shape[0])
    channels = _select_channels(acts, k)
    values, degenerate, _ = _score_cam_core(handle, image, class_index, layer, channels)
    return SaliencyMap(
        values=values, method=method, target_class=class_index,
        source_image_id=image_id,
        params={"layer": layer, "k_channels": int(len(channels))},
        degenerate=degenerate,
    )


def score_cam(handle, image: np.ndarray, class_index: int, layer: str | None = None,
              k_channels=None, image_id: str = "") -> SaliencyMap:
    """Gradient-free CAM: weight each channel's upsampled activation by the
    class-probability gain of the activation-masked input over a zero input.

    Uses every channel of the layer by default.
    """
    return _cam(handle, image, class_index, layer, k_channels,
                SaliencyMethod.SCORE_CAM, image_id)


def faster_score_cam(handle, image: np.ndarray, class_index: int,
                     layer: str | None = None, k_channels=16,
                     image_id: str = "") -> SaliencyMap:
    """Score-CAM restricted to the k channels with the largest spatial variance."""
    return _cam(handle, image, class_index, layer, k_channels,
                SaliencyMethod.FASTER_SCORE_CAM, image_id)


def render_overlay(image: np.ndarray, smap: SaliencyMap, alpha: float = 0.45,
                   colormap: str = "jet") -> np.ndarray:
    """Blend the colormapped saliency map onto the image:
    (1 - alpha) * image + alpha * colormapped(map)."""
    image = check_image(image)
    if not (0.0 <= alpha <= 1.0):
        raise ValidationError(f"alpha must be in [0, 1], got {alpha}")
    values = np.asarray(smap.values)
    if values.shape != image.shape[:2]:
        raise ValidationError(
            f"saliency shape {values.shape} does not match image spatial shape "
            f"{image.shape[:2]}"
        )
    import matplotlib

    try:
        cmap = matplotlib.colormaps[colormap]
    except KeyError:
        raise ValidationError(f"unknown colormap {colormap!r}") from None
    heat = cmap(values)[..., :3]
    blended = (1.0 - alpha) * image.astype(np.float64) + alpha * heat
    return np.clip(blended, 0.0, 1.0).astype(np.float32)


def save_png(path: str | Path, rgb: np.ndarray) -> None:
    """Write a [0, 1] float RGB array as an 8-bit PNG."""
    from PIL import Image

    arr = np.clip(np.asarray(rgb), 0.0, 1.0)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8), mode="RGB").save(path)
