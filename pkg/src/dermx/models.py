"""Classifier construction: pluggable pre-trained backbones plus the shared head.

Every classifier is ``backbone features -> global average pool -> dense 128
ReLU -> dropout -> dense num_classes`` with softmax applied at inference.
Backbones are served by providers: torchvision for the EfficientNetV2 pair,
timm (optional extra ``dermx[backbones]``) for Xception and
InceptionResNetV2, and a small built-in convnet (``toy_cnn``) for tests.
Backbone-specific input normalization is baked into the network, so all
public entry points take images with values in [0, 1].

Training works on logits; :class:`ModelHandle` exposes softmax
probabilities, per-class logit gradients w.r.t. the input, and named
intermediate activations for CAM methods.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn

from .errors import BackboneUnavailableError, ConfigError, LayerError
from .labels import NUM_CLASSES
from .validation import check_image, check_image_batch

#: monitored quantity for the plateau scheduler; fixed by design
LR_MONITOR = "val_accuracy"

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class ModelConfig:
    """Everything needed to build and fine-tune one classifier."""

    backbone: str = "toy_cnn"
    num_classes: int = NUM_CLASSES
    dropout: float = 0.5
    learning_rate: float = 1e-3
    epochs: int = 1
    batch_size: int = 16
    lr_patience: int = 5
    lr_factor: float = 0.1
    min_lr: float = 1e-6
    seed: int = 0
    freeze_backbone: bool = False
    input_side: int = 224

    def __post_init__(self):
        if not (0.0 <= self.dropout < 1.0):
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.lr_patience < 1:
            raise ConfigError(f"lr_patience must be >= 1, got {self.lr_patience}")
        if not (0.0 < self.lr_factor < 1.0):
            raise ConfigError(f"lr_factor must be in (0, 1), got {self.lr_factor}")
        if self.min_lr < 0:
            raise ConfigError(f"min_lr must be >= 0, got {self.min_lr}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.input_side < 8:
            raise ConfigError(f"input_side must be >= 8, got {self.input_side}")

    def to_dict(self) -> dict:
        data = asdict(self)
        for key in ("lr_patience", "lr_factor", "min_lr"):
            data.pop(key)
        data["lr_plateau"] = {
            "monitor": LR_MONITOR,
            "patience": self.lr_patience,
            "factor": self.lr_factor,
            "min_lr": self.min_lr,
        }
        return data

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        data = dict(data)
        plateau = data.pop("lr_plateau", None)
        if plateau:
            monitor = plateau.get("monitor", LR_MONITOR)
            if monitor != LR_MONITOR:
                raise ConfigError(f"unsupported lr_plateau monitor {monitor!r}")
            data.setdefault("lr_patience", plateau.get("patience", 5))
            data.setdefault("lr_factor", plateau.get("factor", 0.1))
            data.setdefault("min_lr", plateau.get("min_lr", 1e-6))
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {', '.join(sorted(unknown))}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls.from_dict(json.loads(text))

    @classmethod
    def from_file(cls, path: str | Path) -> "ModelConfig":
        return cls.from_json(Path(path).read_text())

    def digest(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canonical.encode()).hexdigest()


#: published training configurations, one per backbone
TABLE_CONFIGS: dict[str, ModelConfig] = {
    "xceptionnet": ModelConfig(backbone="xception", dropout=0.5, learning_rate=1e-3,
                               epochs=55, batch_size=16),
    "efficientnetv2s": ModelConfig(backbone="efficientnet_v2_s", dropout=0.5,
                                   learning_rate=1e-3, epochs=50, batch_size=16),
    "inceptionresnetv2": ModelConfig(backbone="inception_resnet_v2", dropout=0.5,
                                     learning_rate=1e-3, epochs=75, batch_size=16),
    "efficientnetv2m": ModelConfig(backbone="efficientnet_v2_m", dropout=0.5,
                                   learning_rate=1e-3, epochs=80, batch_size=16),
}


class ToyFeatures(nn.Module):
    """Small convnet feature extractor for tests; never for accuracy claims."""

    out_channels = 8

    def __init__(self):
        super().__init__()
        self.conv1 = nn.Sequential(nn.Conv2d(3, 8, 3, stride=2, padding=1), nn.ReLU())
        self.pool1 = nn.MaxPool2d(2)
        self.conv2 = nn.Sequential(nn.Conv2d(8, 16, 3, stride=2, padding=1), nn.ReLU())
        self.pool2 = nn.MaxPool2d(2)
        self.conv3 = nn.Sequential(nn.Conv2d(16, 8, 3, padding=1), nn.ReLU())

    def forward(self, x):
        x = self.pool1(self.conv1(x))
        x = self.pool2(self.conv2(x))
        return self.conv3(x)


@dataclass(frozen=True)
class BackboneSpec:
    build: Callable[[str], tuple[nn.Module, int]]
    mean: tuple[float, float, float]
    std: tuple[float, float, float]


def _build_toy(weights: str) -> tuple[nn.Module, int]:
    return ToyFeatures(), ToyFeatures.out_channels


def _build_torchvision_effnet(variant: str):
    def build(weights: str) -> tuple[nn.Module, int]:
        from torchvision import models as tvm

        if variant == "s":
            factory, enum_cls = tvm.efficientnet_v2_s, tvm.EfficientNet_V2_S_Weights
        else:
            factory, enum_cls = tvm.efficientnet_v2_m, tvm.EfficientNet_V2_M_Weights
        w = enum_cls.IMAGENET1K_V1 if weights == "pretrained" else None
        model = factory(weights=w)
        return model.features, 1280

    return build


def _build_timm(model_name: str):
    def build(weights: str) -> tuple[nn.Module, int]:
        try:
            import timm
        except ImportError:
            raise BackboneUnavailableError(
                f"backbone {model_name!r} needs the optional 'timm' provider; "
                "install with: pip install dermx[backbones]"
            ) from None
        model = timm.create_model(
            model_name, pretrained=(weights == "pretrained"), num_classes=0, global_pool=""
        )
        return model, model.num_features

    return build


BACKBONES: dict[str, BackboneSpec] = {
    "toy_cnn": BackboneSpec(_build_toy, (0.0, 0.0, 0.0), (1.0, 1.0, 1.0)),
    "efficientnet_v2_s": BackboneSpec(_build_torchvision_effnet("s"), IMAGENET_MEAN, IMAGENET_STD),
    "efficientnet_v2_m": BackboneSpec(_build_torchvision_effnet("m"), IMAGENET_MEAN, IMAGENET_STD),
    "xception": BackboneSpec(_build_timm("xception"), (0.5, 0.5, 0.5), (0.5, 0.5, 0.5)),
    "inception_resnet_v2": BackboneSpec(
        _build_timm("inception_resnet_v2"), (0.5, 0.5, 0.5), (0.5, 0.5, 0.5)
    ),
}


def register_backbone(
    name: str,
    build: Callable[[str], tuple[nn.Module, int]],
    mean=(0.0, 0.0, 0.0),
    std=(1.0, 1.0, 1.0),
) -> None:
    """Plug in an additional backbone provider."""
    BACKBONES[name] = BackboneSpec(build, tuple(mean), tuple(std))


HIDDEN_UNITS = 128


class ClassifierNet(nn.Module):
    """Backbone plus the classification head; forward returns logits."""

    def __init__(self, backbone: nn.Module, feature_channels: int, num_classes: int,
                 dropout: float, mean, std):
        super().__init__()
        self.register_buffer("input_mean", torch.tensor(mean).view(1, 3, 1, 1))
        self.register_buffer("input_std", torch.tensor(std).view(1, 3, 1, 1))
        self.backbone = backbone
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.hidden = nn.Linear(feature_channels, HIDDEN_UNITS)
        self.act = nn.ReLU()
        self.dropout = nn.Dropout(dropout)
        self.classifier = nn.Linear(HIDDEN_UNITS, num_classes)

    def forward(self, x):
        x = (x - self.input_mean) / self.input_std
        feats = self.backbone(x)
        z = self.pool(feats).flatten(1)
        z = self.dropout(self.act(self.hidden(z)))
        return self.classifier(z)


@dataclass(frozen=True)
class LayerInfo:
    name: str
    output_shape: tuple[int, ...]
    is_default_cam_target: bool = False


class ModelHandle:
    """Wraps a built network with the interfaces the rest of the pipeline needs.

    Images cross this boundary as numpy arrays shaped (H, W, 3) or
    (N, H, W, 3) with values in [0, 1]; channel reordering and
    normalization happen inside.
    """

    #: forward batch size used when chunking large inputs
    chunk_size = 64

    def __init__(self, net: ClassifierNet, config: ModelConfig, weights_source: str = "random"):
        self.net = net
        self.config = config
        self.weights_source = weights_source
        self.supports_input_gradient = True
        self._layer_cache: list[LayerInfo] | None = None

    # -- basic tensor plumbing -------------------------------------------------

    @property
    def dtype(self) -> torch.dtype:
        return next(self.net.parameters()).dtype

    def to_double(self) -> "ModelHandle":
        """Switch to float64 weights (finite-difference checks)."""
        self.net.double()
        return self

    def _to_tensor(self, images: np.ndarray) -> torch.Tensor:
        arr = check_image_batch(images)
        return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(self.dtype)

    # -- inference ---------------------------------------------------------------

    def logits(self, images: np.ndarray) -> np.ndarray:
        """Pre-softmax class scores, eval mode."""
        x = self._to_tensor(images)
        self.net.eval()
        outs = []
        with torch.no_grad():
            for chunk in torch.split(x, self.chunk_size):
                outs.append(self.net(chunk))
        return torch.cat(outs).numpy()

    def forward(self, images: np.ndarray) -> np.ndarray:
        """Class-probability rows (softmax over logits)."""
        logits = torch.from_numpy(self.logits(images))
        return torch.softmax(logits, dim=1).numpy()

    def predict(self, images: np.ndarray) -> np.ndarray:
        return self.forward(images).argmax(axis=1)

    # -- gradients and activations ------------------------------------------------

    def input_gradient(self, image: np.ndarray, class_index: int) -> np.ndarray:
        """d logit[class_index] / d input, shaped like the image.

        The pre-softmax score is differentiated: its gradient reflects class
        evidence directly, whereas the softmax gradient couples all classes.
        """
        image = check_image(image)
        if not (0 <= class_index < self.config.num_classes):
            raise ConfigError(f"class_index must be in [0, {self.config.num_classes})")
        x = self._to_tensor(image[np.newaxis]).requires_grad_(True)
        self.net.eval()
        score = self.net(x)[0, class_index]
        score.backward()
        return x.grad[0].permute(1, 2, 0).numpy()

    def activations(self, image: np.ndarray, layer_name: str) -> np.ndarray:
        """Feature-map stack (C, h, w) produced by a named module."""
        image = check_image(image)
        modules = dict(self.net.named_modules())
        if layer_name not in modules:
            raise LayerError(f"model has no layer named {layer_name!r}")
        captured: list[torch.Tensor] = []

        def hook(_module, _inputs, output):
            captured.append(output.detach())

        handle = modules[layer_name].register_forward_hook(hook)
        try:
            self.net.eval()
            with torch.no_grad():
                self.net(self._to_tensor(image[np.newaxis]))
        finally:
            handle.remove()
        if not captured:
            raise LayerError(f"layer {layer_name!r} produced no output")
        out = captured[-1]
        if out.ndim != 4:
            raise LayerError(
                f"layer {layer_name!r} output is not spatial (shape {tuple(out.shape)})"
            )
        return out[0].numpy()

    # -- layer listing ---------------------------------------------------------

    def layers(self) -> list[LayerInfo]:
        """Spatial feature layers inside the backbone, in execution order.

        The last one is flagged as the default CAM target.
        """
        if self._layer_cache is not None:
            return self._layer_cache

        records: list[tuple[str, tuple[int, ...]]] = []
        hooks = []

        def make_hook(name):
            def hook(_module, _inputs, output):
                if isinstance(output, torch.Tensor) and output.ndim == 4:
                    records.append((name, tuple(output.shape[1:])))

            return hook

        # hook modules inside the backbone; the container itself is skipped so
        # the default target is the innermost last feature block
        for name, module in self.net.named_modules():
            if name.startswith("backbone."):
                hooks.append(module.register_forward_hook(make_hook(name)))
        try:
            side = self.config.input_side
            self.net.eval()
            with torch.no_grad():
                self.net(torch.zeros(1, 3, side, side, dtype=self.dtype))
        finally:
            for h in hooks:
                h.remove()

        if not records:
            raise LayerError("model has no spatial feature layers usable for CAM")
        infos = [
            LayerInfo(name, shape, is_default_cam_target=(i == len(records) - 1))
            for i, (name, shape) in enumerate(records)
        ]
        self._layer_cache = infos
        return infos

    @property
    def default_cam_layer(self) -> str:
        return next(info.name for info in self.layers() if info.is_default_cam_target)

    # -- persistence -------------------------------------------------------------

    def save_checkpoint(self, directory: str | Path, epoch: int | None = None,
                        val_accuracy: float | None = None) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        torch.save(self.net.state_dict(), directory / "weights.pt")
        meta = {
            "config": self.config.to_dict(),
            "epoch": epoch,
            "val_accuracy": val_accuracy,
            "seed": self.config.seed,
            "weights_source": self.weights_source,
            "normalization": {
                "mean": self.net.input_mean.flatten().tolist(),
                "std": self.net.input_std.flatten().tolist(),
            },
        }
        (directory / "checkpoint.json").write_text(json.dumps(meta, indent=2) + "\n")
        return directory


def list_layers(handle: ModelHandle) -> list[LayerInfo]:
    return handle.layers()


def build_classifier(config: ModelConfig, weights: str = "random") -> ModelHandle:
    """Assemble backbone + head per the config.

    `weights` selects the backbone initialization: "pretrained" pulls the
    provider's published general-purpose image weights, "random" initializes
    fresh (required for toy_cnn).
    """
    if weights not in ("random", "pretrained"):
        raise ConfigError(f"weights must be 'random' or 'pretrained', got {weights!r}")
    spec = BACKBONES.get(config.backbone)
    if spec is None:
        raise ConfigError(
            f"unknown backbone {config.backbone!r}; known: {', '.join(sorted(BACKBONES))}"
        )
    torch.manual_seed(config.seed)
    backbone, channels = spec.build(weights)
    if config.freeze_backbone:
        for param in backbone.parameters():
            param.requires_grad_(False)
    net = ClassifierNet(
        backbone, channels, config.num_classes, config.dropout, spec.mean, spec.std
    )
    return ModelHandle(net, config, weights_source=weights)


def load_checkpoint(directory: str | Path) -> tuple[ModelHandle, dict]:
    """Rebuild a model from a checkpoint directory (weights.pt + checkpoint.json)."""
    directory = Path(directory)
    meta_path = directory / "checkpoint.json"
    weights_path = directory / "weights.pt"
    if not meta_path.exists() or not weights_path.exists():
        raise ConfigError(f"{directory} is not a checkpoint directory")
    meta = json.loads(meta_path.read_text())
    config = ModelConfig.from_dict(meta["config"])
    handle = build_classifier(config, weights="random")
    state = torch.load(weights_path, map_location="cpu", weights_only=True)
    try:
        handle.net.load_state_dict(state)
    except RuntimeError as exc:
        raise ConfigError(f"checkpoint/architecture mismatch: {exc}") from None
    handle.weights_source = meta.get("weights_source", "checkpoint")
    return handle, meta
