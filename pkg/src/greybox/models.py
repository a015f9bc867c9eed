"""Backbones, classification heads and the versioned ``.gblm`` model format.

A :class:`Model` bundles a backbone and a head together with the tuning
configuration and the pretext objective that produced the backbone, i.e. the
dataset / weights / backbone / tuning-mode / depth tuple that describes how a
fine-tuned classifier was built.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import DimensionError, ModelLoadError, ValidationError
from .rng import stream

FORMAT_VERSION = 1
FILE_EXTENSION = ".gblm"

BACKBONE_FAMILIES = ("tiny-cnn", "tiny-mlp")
TUNING_MODES = ("full", "head-only")
HEAD_DEPTHS = (1, 3)
DEEP_HEAD_WIDTHS = (64, 32)

Params = dict[str, np.ndarray]


@dataclass(frozen=True)
class BackboneSpec:
    family: str = "tiny-cnn"
    input_shape: tuple[int, int, int] = (1, 16, 16)
    feature_dim: int = 32

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        if self.family not in BACKBONE_FAMILIES:
            raise ValidationError(f"unknown backbone family {self.family!r}")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ValidationError(f"input_shape must be (C, H, W), got {self.input_shape}")
        if self.feature_dim < 2:
            raise ValidationError("feature_dim must be at least 2")
        _, h, w = self.input_shape
        if self.family == "tiny-cnn" and (h % 4 or w % 4):
            raise ValidationError(f"tiny-cnn needs H and W divisible by 4, got {self.input_shape}")

    def layer_shapes(self) -> dict[str, tuple[int, ...]]:
        c, h, w = self.input_shape
        d = self.feature_dim
        if self.family == "tiny-cnn":
            return {
                "backbone.conv1.w": (8, c, 3, 3), "backbone.conv1.b": (8,),
                "backbone.conv2.w": (16, 8, 3, 3), "backbone.conv2.b": (16,),
                "backbone.fc.w": (16 * (h // 4) * (w // 4), d), "backbone.fc.b": (d,),
            }
        return {
            "backbone.fc1.w": (c * h * w, 128), "backbone.fc1.b": (128,),
            "backbone.fc2.w": (128, d), "backbone.fc2.b": (d,),
        }


@dataclass(frozen=True)
class HeadSpec:
    depth: int = 1
    class_count: int = 4
    in_dim: int = 32

    def __post_init__(self):
        if self.depth not in HEAD_DEPTHS:
            raise ValidationError(f"head depth must be one of {HEAD_DEPTHS}, got {self.depth}")
        if self.class_count < 2:
            raise ValidationError("class_count must be at least 2")

    def layer_shapes(self) -> dict[str, tuple[int, ...]]:
        widths = [self.in_dim, *(DEEP_HEAD_WIDTHS if self.depth == 3 else ()), self.class_count]
        shapes = {}
        for i, (a, b) in enumerate(zip(widths, widths[1:])):
            shapes[f"head.{i}.w"] = (a, b)
            shapes[f"head.{i}.b"] = (b,)
        return shapes


@dataclass(frozen=True)
class TuningConfig:
    mode: str = "full"
    depth: int = 1
    dataset_id: str = ""
    seed: int = 0
    batch_size: int = 64

    def __post_init__(self):
        if self.mode not in TUNING_MODES:
            raise ValidationError(f"tuning mode must be one of {TUNING_MODES}, got {self.mode!r}")
        if self.depth not in HEAD_DEPTHS:
            raise ValidationError(f"tuning depth must be one of {HEAD_DEPTHS}, got {self.depth}")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be positive")


@dataclass
class Backbone:
    """Pre-trained feature extractor weights plus how they were produced."""

    spec: BackboneSpec
    params: Params
    provenance: str
    backbone_id: str = ""
    history: list[float] = field(default_factory=list)
    pretext_head: Params = field(default_factory=dict)


@dataclass
class Model:
    backbone: BackboneSpec
    head: HeadSpec
    tuning: TuningConfig
    params: Params
    provenance: str = "none"
    model_id: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.head.in_dim != self.backbone.feature_dim:
            raise ValidationError(
                f"head input width {self.head.in_dim} != backbone feature_dim {self.backbone.feature_dim}")

    @property
    def class_count(self) -> int:
        return self.head.class_count

    def backbone_params(self) -> Params:
        return {k: v for k, v in self.params.items() if k.startswith("backbone.")}

    def backbone_weights(self) -> Backbone:
        """This model's (possibly fine-tuned) backbone as a standalone extractor."""
        return Backbone(self.backbone, self.backbone_params(), self.provenance, self.model_id)

    def head_params(self) -> Params:
        return {k: v for k, v in self.params.items() if k.startswith("head.")}

    def logits(self, images) -> np.ndarray:
        """Plain forward pass returning a numpy array (no tape)."""
        return forward(self, images).data

    def __call__(self, images) -> np.ndarray:
        return self.logits(images)


def init_parameters(spec: BackboneSpec | HeadSpec, seed: int) -> Params:
    """Uniform(-sqrt(6/fan_in), +sqrt(6/fan_in)) weights, zero biases."""
    kind = "backbone" if isinstance(spec, BackboneSpec) else "head"
    rng = stream(seed, f"init:{kind}")
    params = {}
    for name, shape in spec.layer_shapes().items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
            continue
        fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
        bound = math.sqrt(6.0 / fan_in)
        params[name] = rng.uniform(-bound, bound, size=shape)
    return params


def _as_param(params, name: str, trainable: set | None) -> ad.Tensor:
    value = params[name]
    if isinstance(value, ad.Tensor):
        return value
    return ad.Tensor(value, requires_grad=bool(trainable) and name in trainable)


def _check_images(spec: BackboneSpec, images: ad.Tensor) -> None:
    if images.ndim != 4 or images.shape[1:] != spec.input_shape:
        raise DimensionError(f"expected images of shape N x {spec.input_shape}, got {images.shape}")


def backbone_forward(spec: BackboneSpec, params, images, trainable: set | None = None) -> ad.Tensor:
    """Feature extractor ``f_B``.  ``params`` values may be arrays or tensors."""
    x = ad.as_tensor(images)
    _check_images(spec, x)
    p = lambda name: _as_param(params, name, trainable)  # noqa: E731
    if spec.family == "tiny-cnn":
        h = ad.max_pool2d(ad.relu(ad.conv2d(x, p("backbone.conv1.w"), p("backbone.conv1.b"))))
        h = ad.max_pool2d(ad.relu(ad.conv2d(h, p("backbone.conv2.w"), p("backbone.conv2.b"))))
        return ad.dense(ad.flatten(h), p("backbone.fc.w"), p("backbone.fc.b"))
    h = ad.relu(ad.dense(ad.flatten(x), p("backbone.fc1.w"), p("backbone.fc1.b")))
    return ad.dense(h, p("backbone.fc2.w"), p("backbone.fc2.b"))


def head_forward(spec: HeadSpec, params, features: ad.Tensor, trainable: set | None = None) -> ad.Tensor:
    if features.ndim != 2 or features.shape[1] != spec.in_dim:
        raise DimensionError(f"head expects N x {spec.in_dim} features, got {features.shape}")
    layers = len(spec.layer_shapes()) // 2
    h = features
    for i in range(layers):
        h = ad.dense(h, _as_param(params, f"head.{i}.w", trainable), _as_param(params, f"head.{i}.b", trainable))
        if i < layers - 1:
            h = ad.relu(h)
    return h


def features(model: Model, images) -> ad.Tensor:
    return backbone_forward(model.backbone, model.params, images)


def forward(model: Model, images) -> ad.Tensor:
    """Logits of ``model`` for a batch of images in [0, 1]."""
    return head_forward(model.head, model.params, features(model, images))


# ------------------------------------------------------------------ file format


def _spec_records(model: Model) -> dict:
    return {
        "backbone": {**asdict(model.backbone), "input_shape": list(model.backbone.input_shape)},
        "head": asdict(model.head),
        "tuning": asdict(model.tuning),
        "provenance": model.provenance,
        "model_id": model.model_id,
        "extra": model.extra,
    }


def _param_records(params: Params) -> dict:
    return {
        name: {"shape": list(arr.shape), "data": [float(v) for v in arr.ravel()]}
        for name, arr in sorted(params.items())
    }


def dumps_model(model: Model) -> str:
    doc = {"format_version": FORMAT_VERSION, "kind": "model", **_spec_records(model),
           "parameters": _param_records(model.params)}
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def dumps_backbone(backbone: Backbone) -> str:
    doc = {
        "format_version": FORMAT_VERSION,
        "kind": "backbone",
        "backbone": {**asdict(backbone.spec), "input_shape": list(backbone.spec.input_shape)},
        "provenance": backbone.provenance,
        "backbone_id": backbone.backbone_id,
        "history": [float(v) for v in backbone.history],
        "parameters": _param_records(backbone.params),
    }
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def save_model(model: Model, path) -> None:
    from .io import atomic_write_text

    atomic_write_text(path, dumps_model(model))


def save_backbone(backbone: Backbone, path) -> None:
    from .io import atomic_write_text

    atomic_write_text(path, dumps_backbone(backbone))


def _field(doc: dict, key: str, where: str = ""):
    if key not in doc:
        raise ModelLoadError(f"missing field {where}{key!r}")
    return doc[key]


def _parse(text: str, kind: str) -> dict:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelLoadError(f"not a model document: {exc}") from exc
    if not isinstance(doc, dict):
        raise ModelLoadError("not a model document: top level must be an object")
    version = _field(doc, "format_version")
    if version != FORMAT_VERSION:
        raise ModelLoadError(f"field 'format_version': expected {FORMAT_VERSION}, got {version!r}")
    got = _field(doc, "kind")
    if got != kind:
        raise ModelLoadError(f"field 'kind': expected {kind!r}, got {got!r}")
    return doc


def _load_params(stored: dict, expected: dict[str, tuple[int, ...]]) -> Params:
    params = {}
    for name, shape in expected.items():
        entry = stored.get(name)
        if entry is None:
            raise ModelLoadError(f"missing parameter {name!r}")
        got = tuple(_field(entry, "shape", f"{name}."))
        data = _field(entry, "data", f"{name}.")
        if got != shape or len(data) != int(np.prod(shape)):
            raise ModelLoadError(
                f"parameter {name!r}: shape {list(got)} with {len(data)} values, expected {list(shape)}")
        params[name] = np.asarray(data, dtype=np.float64).reshape(shape)
    unknown = sorted(set(stored) - set(expected))
    if unknown:
        raise ModelLoadError(f"unexpected parameter {unknown[0]!r}")
    return params


def loads_model(text: str) -> Model:
    doc = _parse(text, "model")
    try:
        backbone = BackboneSpec(**_field(doc, "backbone"))
        head = HeadSpec(**_field(doc, "head"))
        tuning = TuningConfig(**_field(doc, "tuning"))
    except (TypeError, ValidationError) as exc:
        raise ModelLoadError(f"invalid spec record: {exc}") from exc
    params = _load_params(_field(doc, "parameters"), {**backbone.layer_shapes(), **head.layer_shapes()})
    return Model(backbone, head, tuning, params,
                 provenance=_field(doc, "provenance"), model_id=doc.get("model_id", ""),
                 extra=doc.get("extra", {}))


def loads_backbone(text: str) -> Backbone:
    doc = _parse(text, "backbone")
    try:
        spec = BackboneSpec(**_field(doc, "backbone"))
    except (TypeError, ValidationError) as exc:
        raise ModelLoadError(f"invalid spec record: {exc}") from exc
    params = _load_params(_field(doc, "parameters"), spec.layer_shapes())
    return Backbone(spec, params, _field(doc, "provenance"), doc.get("backbone_id", ""),
                    list(doc.get("history", [])))


def _read_text(path) -> str:
    try:
        with open(os.fspath(path), encoding="utf-8") as fh:
            return fh.read()
    except FileNotFoundError:
        raise ValidationError(f"model file not found: {path}") from None


def load_model(path) -> Model:
    return loads_model(_read_text(path))


def load_backbone(path) -> Backbone:
    return loads_backbone(_read_text(path))
