"""Random affine augmentation for training images.

Five transform families: rotation, shift, shear, zoom and flips. A sampled
:class:`TransformSpec` is applied as flips first, then a single affine
resampling that composes rotation about the image center, shear, zoom about
the center and finally the shift. Flips are plain axis reversals, so a
double flip restores the image exactly, and the identity spec is an exact
no-op.

Augmentation belongs to the training partition only; validation and test
data must never pass through here during evaluation.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator, TransformerMixin

from .errors import ValidationError
from .validation import check_fraction, check_image, check_image_batch

FILL_MODES = ("nearest", "reflect", "constant")

_SCIPY_MODE = {"nearest": "nearest", "reflect": "reflect", "constant": "constant"}


@dataclass(frozen=True)
class AugmentationPolicy:
    """Magnitude bounds for the five transform families.

    Angles are degrees, shift_max is a fraction of the image side, zoom_max
    a fraction around 1. Defaults are conventional dermoscopy ranges;
    lesions have no canonical orientation, so both flips are safe.
    """

    rotation_max: float = 20.0
    shift_max: float = 0.1
    shear_max: float = 10.0
    zoom_max: float = 0.1
    flip_horizontal: bool = True
    flip_vertical: bool = True
    fill_mode: str = "nearest"
    fill_value: float = 0.0

    def __post_init__(self):
        for name in ("rotation_max", "shift_max", "shear_max", "zoom_max"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.zoom_max >= 1:
            raise ValidationError(f"zoom_max must be < 1, got {self.zoom_max}")
        if self.fill_mode not in FILL_MODES:
            raise ValidationError(
                f"fill_mode must be one of {FILL_MODES}, got {self.fill_mode!r}"
            )
        check_fraction("fill_value", self.fill_value)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "AugmentationPolicy":
        return cls(**json.loads(text))

    @classmethod
    def from_file(cls, path: str | Path) -> "AugmentationPolicy":
        return cls.from_json(Path(path).read_text())

    @classmethod
    def identity(cls) -> "AugmentationPolicy":
        return cls(
            rotation_max=0.0, shift_max=0.0, shear_max=0.0, zoom_max=0.0,
            flip_horizontal=False, flip_vertical=False,
        )


@dataclass(frozen=True)
class TransformSpec:
    """One concrete draw from a policy."""

    rotation_deg: float = 0.0
    shift_x: float = 0.0
    shift_y: float = 0.0
    shear_deg: float = 0.0
    zoom: float = 1.0
    flip_h: bool = False
    flip_v: bool = False

    @property
    def is_identity(self) -> bool:
        return (
            self.rotation_deg == 0.0 and self.shift_x == 0.0 and self.shift_y == 0.0
            and self.shear_deg == 0.0 and self.zoom == 1.0
            and not self.flip_h and not self.flip_v
        )

    @property
    def is_affine_identity(self) -> bool:
        """True when only flips (possibly) act."""
        return (
            self.rotation_deg == 0.0 and self.shift_x == 0.0 and self.shift_y == 0.0
            and self.shear_deg == 0.0 and self.zoom == 1.0
        )


def sample_transform(policy: AugmentationPolicy, rng: np.random.Generator) -> TransformSpec:
    """Draw one transform: magnitudes uniform in [-max, +max], zoom in
    [1-zoom_max, 1+zoom_max], flips fair coins when enabled."""
    rotation = float(rng.uniform(-policy.rotation_max, policy.rotation_max))
    shift_x = float(rng.uniform(-policy.shift_max, policy.shift_max))
    shift_y = float(rng.uniform(-policy.shift_max, policy.shift_max))
    shear = float(rng.uniform(-policy.shear_max, policy.shear_max))
    zoom = float(rng.uniform(1.0 - policy.zoom_max, 1.0 + policy.zoom_max))
    flip_h = bool(rng.integers(0, 2)) if policy.flip_horizontal else False
    flip_v = bool(rng.integers(0, 2)) if policy.flip_vertical else False
    return TransformSpec(
        rotation_deg=rotation, shift_x=shift_x, shift_y=shift_y,
        shear_deg=shear, zoom=zoom, flip_h=flip_h, flip_v=flip_v,
    )


def _affine_matrix(spec: TransformSpec, side: int) -> tuple[np.ndarray, np.ndarray]:
    """Inverse (output -> input) matrix and offset in (row, col) coordinates."""
    theta = math.radians(spec.rotation_deg)
    shear = math.radians(spec.shear_deg)

    # forward point maps in (x, y) with y pointing down; positive rotation
    # turns content counterclockwise on screen
    rot = np.array([[math.cos(theta), math.sin(theta)],
                    [-math.sin(theta), math.cos(theta)]])
    shr = np.array([[1.0, -math.sin(shear)],
                    [0.0, math.cos(shear)]])
    zoom = np.array([[spec.zoom, 0.0], [0.0, spec.zoom]])

    forward = zoom @ shr @ rot
    center = np.array([(side - 1) / 2.0, (side - 1) / 2.0])
    shift = np.array([spec.shift_x * side, spec.shift_y * side])

    inverse = np.linalg.inv(forward)
    # output q = forward (p - c) + c + t  =>  p = inverse (q - c - t) + c
    offset_xy = center - inverse @ (center + shift)

    # swap (x, y) -> (row, col)
    swap = np.array([[0.0, 1.0], [1.0, 0.0]])
    matrix_rc = swap @ inverse @ swap
    offset_rc = offset_xy[::-1]
    return matrix_rc, offset_rc


def apply_transform(
    image: np.ndarray,
    spec: TransformSpec,
    fill_mode: str = "nearest",
    fill_value: float = 0.0,
) -> np.ndarray:
    """Apply one sampled transform to a square (S, S, 3) image in [0, 1]."""
    image = check_image(image, require_square=True)
    if fill_mode not in FILL_MODES:
        raise ValidationError(f"fill_mode must be one of {FILL_MODES}, got {fill_mode!r}")

    if spec.is_identity:
        return image.copy()

    out = image
    if spec.flip_h:
        out = out[:, ::-1]
    if spec.flip_v:
        out = out[::-1, :]

    if spec.is_affine_identity:
        return np.ascontiguousarray(out)

    matrix_rc, offset_rc = _affine_matrix(spec, image.shape[0])
    matrix = np.eye(3)
    matrix[:2, :2] = matrix_rc
    offset = np.array([offset_rc[0], offset_rc[1], 0.0])
    warped = ndimage.affine_transform(
        np.ascontiguousarray(out, dtype=np.float64), matrix, offset=offset,
        order=1, mode=_SCIPY_MODE[fill_mode], cval=fill_value, prefilter=False,
    )
    return np.clip(warped, 0.0, 1.0).astype(np.float32)


def augment_batch(
    images: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator
) -> np.ndarray:
    """Independently augment every image in a batch."""
    out = np.empty_like(images)
    for i in range(len(images)):
        spec = sample_transform(policy, rng)
        out[i] = apply_transform(
            images[i], spec, fill_mode=policy.fill_mode, fill_value=policy.fill_value
        )
    return out


class RandomAugmenter(BaseEstimator, TransformerMixin):
    """Stateless sklearn transformer face over the augmentation policy.

    ``transform`` draws fresh transforms from the internal generator on each
    call, so repeated passes over the same images yield different outputs
    (on-the-fly augmentation). Seed via ``random_state`` for reproducible
    streams.
    """

    def __init__(self, policy: AugmentationPolicy | None = None, random_state: int | None = None):
        self.policy = policy
        self.random_state = random_state

    def fit(self, X, y=None):
        check_image_batch(X, require_square=True)
        self.policy_ = self.policy if self.policy is not None else AugmentationPolicy()
        self.rng_ = np.random.default_rng(self.random_state)
        return self

    def transform(self, X):
        if not hasattr(self, "rng_"):
            raise ValidationError("RandomAugmenter must be fit before transform")
        X = check_image_batch(X, require_square=True)
        return augment_batch(X, self.policy_, self.rng_)
