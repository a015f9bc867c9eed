"""SGD with momentum, the two pretext objectives and supervised fine-tuning."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .data import Dataset, augment
from .errors import ValidationError
from .models import (Backbone, BackboneSpec, HeadSpec, Model, Params, TuningConfig, backbone_forward, forward,
                     head_forward, init_parameters)
from .rng import derive_seed, stream

PRETEXT_OBJECTIVES = ("rotation", "contrastive")


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 0.05
    momentum: float = 0.9
    epochs: int = 10
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValidationError("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValidationError("momentum must lie in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValidationError("epochs must be >= 0 and batch_size >= 1")


@dataclass(frozen=True)
class PretextConfig:
    objective: str = "rotation"
    temperature: float = 0.5
    projection_dim: int = 16
    epochs: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.objective not in PRETEXT_OBJECTIVES:
            raise ValidationError(f"unknown pretext objective {self.objective!r}")
        if not self.temperature > 0:
            raise ValidationError("temperature must be positive")


def sgd_step(params: Params, grads: Params, state: Params, cfg: OptimizerConfig) -> tuple[Params, Params]:
    """``v <- momentum * v + g``; ``p <- p - lr * v``.  Inputs are not modified."""
    new_params, new_state = dict(params), dict(state)
    for name, g in grads.items():
        p = params[name]
        if p.shape != g.shape:
            raise ValidationError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        v = cfg.momentum * state.get(name, np.zeros_like(p)) + g
        new_state[name] = v
        new_params[name] = p - cfg.lr * v
    return new_params, new_state


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _step(params: Params, names, loss_fn, state: Params, opt: OptimizerConfig):
    tensors = {k: ad.Tensor(v, requires_grad=k in names) for k, v in params.items()}
    loss = loss_fn(tensors)
    loss.backward()
    grads = {k: tensors[k].grad for k in names}
    params, state = sgd_step(params, grads, state, opt)
    return params, state, loss.item()


def rotate(images: np.ndarray, k: int) -> np.ndarray:
    """Rotate N x C x H x W images by ``k`` quarter turns (exact index permutation)."""
    return np.ascontiguousarray(np.rot90(images, k % 4, axes=(2, 3)))


def pretrain_rotation(spec: BackboneSpec, pool: Dataset, cfg: PretextConfig,
                      opt: OptimizerConfig | None = None, backbone_id: str = "") -> Backbone:
    """Train ``spec`` to recognise which of the four quarter turns was applied."""
    if cfg.objective != "rotation":
        raise ValidationError("pretrain_rotation needs objective='rotation'")
    opt = opt or OptimizerConfig(epochs=cfg.epochs)
    images = pool.images
    params = init_parameters(spec, derive_seed(cfg.seed, "rotation:backbone"))
    head = HeadSpec(depth=1, class_count=4, in_dim=spec.feature_dim)
    params.update(init_parameters(head, derive_seed(cfg.seed, "rotation:head")))
    names = set(params)
    rng = stream(cfg.seed, "rotation:batches")
    state: Params = {}
    history = []

    for _ in range(cfg.epochs):
        losses = []
        for idx in _batches(len(images), opt.batch_size, rng):
            x = np.concatenate([rotate(images[idx], k) for k in range(4)])
            y = np.repeat(np.arange(4), len(idx))

            def loss_fn(t, x=x, y=y):
                feats = backbone_forward(spec, t, x)
                return ad.cross_entropy(head_forward(head, t, feats), y)

            params, state, value = _step(params, names, loss_fn, state, opt)
            losses.append(value)
        history.append(float(np.mean(losses)))

    backbone = {k: v for k, v in params.items() if k.startswith("backbone.")}
    pretext_head = {k: v for k, v in params.items() if k.startswith("head.")}
    return Backbone(spec, backbone, "rotation", backbone_id, history, pretext_head)


def rotation_accuracy(backbone: Backbone, images: np.ndarray) -> float:
    """Accuracy of the retained rotation head on all four turns of ``images``."""
    head = HeadSpec(depth=1, class_count=4, in_dim=backbone.spec.feature_dim)
    params = {**backbone.params, **backbone.pretext_head}
    x = np.concatenate([rotate(images, k) for k in range(4)])
    y = np.repeat(np.arange(4), len(images))
    logits = head_forward(head, params, backbone_forward(backbone.spec, params, x)).data
    return float(np.mean(logits.argmax(axis=1) == y))


MASK_VALUE = -1e30


def nt_xent_loss(z: ad.Tensor, temperature: float) -> ad.Tensor:
    """Normalised-temperature cross-entropy over ``2B`` embeddings.

    Rows ``i`` and ``i + B`` are the two views of the same image.  Each row's
    denominator sums over every other row, positive included.
    """
    n = z.shape[0]
    if n % 2:
        raise ValidationError("nt_xent_loss needs an even number of rows (two views per image)")
    half = n // 2
    zn = ad.normalize_rows(z)
    sim = ad.scale(ad.matmul(zn, ad.transpose(zn)), 1.0 / temperature)
    mask = ad.Tensor(np.diag(np.full(n, MASK_VALUE)))
    positives = np.concatenate([np.arange(half, n), np.arange(half)])
    return ad.cross_entropy(ad.add(sim, mask), positives)


def pretrain_contrastive(spec: BackboneSpec, pool: Dataset, cfg: PretextConfig,
                         opt: OptimizerConfig | None = None, backbone_id: str = "") -> Backbone:
    """Contrastive pre-training with two augmented views and a linear projection head."""
    if cfg.objective != "contrastive":
        raise ValidationError("pretrain_contrastive needs objective='contrastive'")
    opt = opt or OptimizerConfig(epochs=cfg.epochs)
    if opt.batch_size < 8:
        raise ValidationError(f"contrastive batch size must be at least 8, got {opt.batch_size}")
    images = pool.images
    params = init_parameters(spec, derive_seed(cfg.seed, "contrastive:backbone"))
    proj_rng = stream(cfg.seed, "contrastive:projection")
    bound = np.sqrt(6.0 / spec.feature_dim)
    params["proj.w"] = proj_rng.uniform(-bound, bound, size=(spec.feature_dim, cfg.projection_dim))
    params["proj.b"] = np.zeros(cfg.projection_dim)
    names = set(params)
    rng = stream(cfg.seed, "contrastive:batches")
    aug_seeds = stream(cfg.seed, "contrastive:augment")
    state: Params = {}
    history = []

    for _ in range(cfg.epochs):
        losses = []
        for idx in _batches(len(images), opt.batch_size, rng):
            if len(idx) < 2:
                continue
            s1, s2 = (int(s) for s in aug_seeds.integers(0, 2**62, size=2))
            x = np.concatenate([augment(images[idx], s1), augment(images[idx], s2)])

            def loss_fn(t, x=x):
                feats = backbone_forward(spec, t, x)
                return nt_xent_loss(ad.dense(feats, t["proj.w"], t["proj.b"]), cfg.temperature)

            params, state, value = _step(params, names, loss_fn, state, opt)
            losses.append(value)
        history.append(float(np.mean(losses)))

    backbone = {k: v for k, v in params.items() if k.startswith("backbone.")}
    return Backbone(spec, backbone, "contrastive", backbone_id, history)


def pretrain(spec: BackboneSpec, pool: Dataset, cfg: PretextConfig,
             opt: OptimizerConfig | None = None, backbone_id: str = "") -> Backbone:
    fn = pretrain_rotation if cfg.objective == "rotation" else pretrain_contrastive
    return fn(spec, pool, cfg, opt, backbone_id)


def accuracy(model: Model, dataset: Dataset, batch_size: int = 512) -> float:
    correct = 0
    for start in range(0, len(dataset), batch_size):
        logits = forward(model, dataset.images[start:start + batch_size]).data
        correct += int(np.sum(logits.argmax(axis=1) == dataset.labels[start:start + batch_size]))
    return correct / len(dataset)


def finetune(backbone: Backbone, head_spec: HeadSpec, tuning: TuningConfig, dataset: Dataset,
             opt: OptimizerConfig | None = None, model_id: str = "") -> Model:
    """Fit a classifier on ``dataset``'s train split starting from ``backbone``.

    ``tuning.mode == 'head-only'`` leaves every backbone parameter untouched;
    ``'full'`` updates all of them.  Batch size and seed come from ``tuning``.
    """
    opt = opt or OptimizerConfig()
    if dataset.class_count != head_spec.class_count:
        raise ValidationError(
            f"dataset {dataset.id!r} has {dataset.class_count} classes, head expects {head_spec.class_count}")
    if head_spec.depth != tuning.depth:
        raise ValidationError(f"head depth {head_spec.depth} != tuning depth {tuning.depth}")
    if head_spec.in_dim != backbone.spec.feature_dim:
        raise ValidationError("head input width does not match backbone feature_dim")
    train = dataset.subset("train") if dataset.split_indices else dataset

    params = {k: v.copy() for k, v in backbone.params.items()}
    params.update(init_parameters(head_spec, derive_seed(tuning.seed, "finetune:head")))
    names = {k for k in params if tuning.mode == "full" or k.startswith("head.")}
    rng = stream(tuning.seed, "finetune:batches")
    state: Params = {}
    model = Model(backbone.spec, head_spec, tuning, params, backbone.provenance, model_id)
    history = []

    for _ in range(opt.epochs):
        losses = []
        for idx in _batches(len(train), tuning.batch_size, rng):
            x, y = train.images[idx], train.labels[idx]

            def loss_fn(t, x=x, y=y):
                feats = backbone_forward(backbone.spec, t, x)
                return ad.cross_entropy(head_forward(head_spec, t, feats), y)

            params, state, value = _step(params, names, loss_fn, state, opt)
            losses.append(value)
        history.append(float(np.mean(losses)))

    model.params = params
    model.extra = {
        "backbone_id": backbone.backbone_id,
        "optimizer": asdict(opt),
        "train_loss": history,
    }
    if dataset.split_indices:
        model.extra["test_accuracy"] = accuracy(model, dataset.subset("test"))
    return model
