"""L-infinity attacks: FGSM, PGD, the label-free backbone attack and a
query-limited square-patch random search.

All attacks work on numpy image batches in [0, 1] and return an
:class:`AttackResult` whose adversarial batch lies inside the epsilon ball
around the clean batch and inside the pixel range.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from . import autodiff as ad
from .errors import DimensionError, ValidationError
from .models import Backbone, Model, backbone_forward, forward
from .rng import stream

ATTACK_FAMILIES = ("fgsm", "pgd", "backbone-pgd", "square")
HIGH_BUDGET_FACTOR = 4


@dataclass(frozen=True)
class AttackConfig:
    family: str = "pgd"
    epsilon: float = 8 / 255
    alpha: float = 2 / 255
    iterations: int = 10
    query_budget: int = 10
    targeted: bool = False
    target_class: int | None = None
    seed: int = 0
    random_init: bool = True
    p_init: float = 0.25

    def __post_init__(self):
        if self.family not in ATTACK_FAMILIES:
            raise ValidationError(f"unknown attack family {self.family!r}")
        if not 0 < self.alpha <= self.epsilon <= 1:
            raise ValidationError(f"need 0 < alpha <= epsilon <= 1, got alpha={self.alpha}, epsilon={self.epsilon}")
        if self.iterations < 1:
            raise ValidationError("iterations must be at least 1")
        if self.target_class is not None and not self.targeted:
            raise ValidationError("target_class is only meaningful for targeted attacks")

    @property
    def config_id(self) -> str:
        if self.family == "fgsm":
            return "fgsm"
        if self.family == "square":
            return f"square-q{self.query_budget}"
        return f"{self.family}-{self.iterations}"

    def high_budget(self) -> "AttackConfig":
        """The same attack with four times as many iterations."""
        return replace(self, iterations=self.iterations * HIGH_BUDGET_FACTOR)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AttackResult:
    adversarial: np.ndarray
    success: np.ndarray | None
    queries: np.ndarray
    clean_logits: np.ndarray | None = None
    adv_logits: np.ndarray | None = None
    loss_trace: np.ndarray | None = None
    extra: dict = field(default_factory=dict)


def project(x: np.ndarray, x_tilde: np.ndarray, epsilon: float) -> np.ndarray:
    """Clip the perturbation to ``[-epsilon, epsilon]`` and the image to ``[0, 1]``."""
    x, x_tilde = np.asarray(x, dtype=np.float64), np.asarray(x_tilde, dtype=np.float64)
    if x.shape != x_tilde.shape:
        raise DimensionError(f"project: shapes {x.shape} and {x_tilde.shape} differ")
    delta = np.clip(x_tilde - x, -epsilon, epsilon)
    return np.clip(x + delta, 0.0, 1.0)


def logits_of(model, images: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """Logits from a :class:`Model` or any callable oracle, in chunks."""
    fn = model.logits if isinstance(model, Model) else model
    return np.concatenate([fn(images[i:i + batch_size]) for i in range(0, len(images), batch_size)])


def predict(model, images: np.ndarray) -> np.ndarray:
    return logits_of(model, images).argmax(axis=1)


def _attack_labels(y, cfg: AttackConfig, n: int) -> np.ndarray:
    if cfg.targeted and cfg.target_class is not None:
        return np.full(n, int(cfg.target_class))
    y = np.asarray(y)
    if y.shape != (n,):
        raise DimensionError(f"expected {n} labels, got shape {y.shape}")
    return y


def input_gradient(model: Model, x: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Gradient of the summed cross-entropy with respect to the input batch."""
    xt = ad.Tensor(x, requires_grad=True)
    loss = ad.cross_entropy(forward(model, xt), labels, reduction="sum")
    loss.backward()
    return xt.grad


def _signed_step(grad: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    s = np.sign(grad)
    return -s if cfg.targeted else s


def evaluate_attack(model, x: np.ndarray, y, x_tilde: np.ndarray, targeted: bool = False) -> np.ndarray:
    """Per-sample success: ``argmax != y`` (untargeted) or ``argmax == y`` (targeted, ``y`` = target)."""
    if np.shape(x) != np.shape(x_tilde):
        raise DimensionError(f"clean {np.shape(x)} and adversarial {np.shape(x_tilde)} batches differ")
    pred = predict(model, x_tilde)
    y = np.asarray(y)
    return pred == y if targeted else pred != y


def _finish(model, x, labels, adv, cfg, queries, trace=None) -> AttackResult:
    clean_logits = logits_of(model, x)
    adv_logits = logits_of(model, adv)
    pred = adv_logits.argmax(axis=1)
    success = pred == labels if cfg.targeted else pred != labels
    return AttackResult(adv, success, queries, clean_logits, adv_logits, trace)


def fgsm(model: Model, x: np.ndarray, y, cfg: AttackConfig) -> AttackResult:
    """One signed-gradient step of size epsilon (toward the target when targeted)."""
    x = np.asarray(x, dtype=np.float64)
    labels = _attack_labels(y, cfg, len(x))
    grad = input_gradient(model, x, labels)
    adv = project(x, x + cfg.epsilon * _signed_step(grad, cfg), cfg.epsilon)
    return _finish(model, x, labels, adv, cfg, np.ones(len(x), dtype=np.int64))


def _random_start(x: np.ndarray, cfg: AttackConfig, name: str) -> np.ndarray:
    if not cfg.random_init:
        return x.copy()
    noise = stream(cfg.seed, name).uniform(-cfg.epsilon, cfg.epsilon, size=x.shape)
    return np.clip(x + noise, 0.0, 1.0)


def pgd(model: Model, x: np.ndarray, y, cfg: AttackConfig) -> AttackResult:
    """Projected signed-gradient ascent on the cross-entropy from a random start."""
    x = np.asarray(x, dtype=np.float64)
    labels = _attack_labels(y, cfg, len(x))
    adv = _random_start(x, cfg, "pgd:init")
    for _ in range(cfg.iterations):
        grad = input_gradient(model, adv, labels)
        adv = project(x, adv + cfg.alpha * _signed_step(grad, cfg), cfg.epsilon)
    return _finish(model, x, labels, adv, cfg, np.full(len(x), cfg.iterations, dtype=np.int64))


def backbone_loss(backbone: Backbone, clean_features: ad.Tensor, x_tilde: ad.Tensor) -> ad.Tensor:
    """Per-sample ``1 - cos(f(x), f(x_tilde))``; ``clean_features`` should be detached."""
    adv_features = backbone_forward(backbone.spec, backbone.params, x_tilde)
    return 1.0 - ad.cosine_similarity(clean_features, adv_features)


def backbone_attack(backbone: Backbone, x: np.ndarray, cfg: AttackConfig) -> AttackResult:
    """Push backbone features of ``x`` away from their clean values (no labels, no head).

    ``loss_trace[t]`` holds the per-sample feature loss at iterate ``t``
    (``t = 0`` is the starting point).  Success flags are left empty: they
    depend on which classifier is later evaluated.
    """
    x = np.asarray(x, dtype=np.float64)
    clean = ad.stop_gradient(backbone_forward(backbone.spec, backbone.params, x))
    adv = _random_start(x, cfg, "backbone-pgd:init")
    trace = []
    for _ in range(cfg.iterations):
        xt = ad.Tensor(adv, requires_grad=True)
        per_sample = backbone_loss(backbone, clean, xt)
        trace.append(per_sample.data.copy())
        ad.sum(per_sample).backward()
        adv = project(x, adv + cfg.alpha * np.sign(xt.grad), cfg.epsilon)
    trace.append(backbone_loss(backbone, clean, ad.Tensor(adv)).data.copy())
    return AttackResult(adv, None, np.full(len(x), cfg.iterations, dtype=np.int64), loss_trace=np.stack(trace))


class QueryCounter:
    """Wrap a logits oracle and count how many images it has been asked about."""

    def __init__(self, oracle: Callable[[np.ndarray], np.ndarray]):
        self.oracle = oracle.logits if isinstance(oracle, Model) else oracle
        self.calls = 0
        self.images = 0

    def __call__(self, images: np.ndarray) -> np.ndarray:
        self.calls += 1
        self.images += len(images)
        return np.asarray(self.oracle(images))


def margin(logits: np.ndarray, labels: np.ndarray, targeted: bool) -> np.ndarray:
    """Untargeted: ``z_y - max_{k!=y} z_k``; targeted: ``max_{k!=t} z_k - z_t``.  Lower is better."""
    rows = np.arange(len(labels))
    own = logits[rows, labels]
    others = logits.copy()
    others[rows, labels] = -np.inf
    best_other = others.max(axis=1)
    return best_other - own if targeted else own - best_other


def square_attack(oracle, x: np.ndarray, y, cfg: AttackConfig) -> AttackResult:
    """Score-based random search with at most ``cfg.query_budget`` oracle queries per sample.

    The start is a vertical-stripe perturbation of +-epsilon (one query).  Each
    further query proposes a square patch set to +-epsilon per channel whose
    side shrinks as the patch fraction halves every ``ceil(budget / 4)``
    queries; a proposal is kept only if the margin strictly decreases.
    """
    if cfg.query_budget < 1:
        raise ValidationError(f"query_budget must be at least 1, got {cfg.query_budget}")
    x = np.asarray(x, dtype=np.float64)
    n, c, h, w = x.shape
    labels = _attack_labels(y, cfg, n)
    eps = cfg.epsilon
    rng = stream(cfg.seed, "square")

    stripes = rng.choice([-1.0, 1.0], size=(n, c, 1, w))
    adv = np.clip(x + eps * stripes, 0.0, 1.0)
    logits = np.asarray(oracle(adv), dtype=np.float64)
    queries = np.ones(n, dtype=np.int64)
    best = margin(logits, labels, cfg.targeted)

    def succeeded(lg, lb):
        pred = lg.argmax(axis=1)
        return pred == lb if cfg.targeted else pred != lb

    success = succeeded(logits, labels)
    step = math.ceil(cfg.query_budget / 4)
    used = 1
    while True:
        active = np.flatnonzero(~success & (queries < cfg.query_budget))
        if active.size == 0:
            break
        p = cfg.p_init * 0.5 ** (used // step)
        side = min(h, w, max(1, int(round(math.sqrt(p * h * w)))))
        rows = rng.integers(0, h - side + 1, size=n)
        cols = rng.integers(0, w - side + 1, size=n)
        signs = rng.choice([-1.0, 1.0], size=(n, c))

        proposal = adv[active].copy()
        for j, i in enumerate(active):
            r, s = rows[i], cols[i]
            patch = x[i, :, r:r + side, s:s + side] + eps * signs[i][:, None, None]
            proposal[j, :, r:r + side, s:s + side] = np.clip(patch, 0.0, 1.0)
        new_logits = np.asarray(oracle(proposal), dtype=np.float64)
        queries[active] += 1
        used += 1

        new_margin = margin(new_logits, labels[active], cfg.targeted)
        keep = new_margin < best[active]
        idx = active[keep]
        adv[idx] = proposal[keep]
        best[idx] = new_margin[keep]
        logits[idx] = new_logits[keep]
        success[idx] = succeeded(new_logits[keep], labels[idx])

    return AttackResult(adv, success, queries, None, logits)


def run_attack(cfg: AttackConfig, x: np.ndarray, y, model: Model | None = None,
               backbone: Backbone | None = None) -> AttackResult:
    """Dispatch on ``cfg.family``."""
    if cfg.family == "backbone-pgd":
        if backbone is None:
            raise ValidationError("backbone-pgd needs backbone weights")
        return backbone_attack(backbone, x, cfg)
    if model is None:
        raise ValidationError(f"{cfg.family} needs a model")
    if cfg.family == "fgsm":
        return fgsm(model, x, y, cfg)
    if cfg.family == "pgd":
        return pgd(model, x, y, cfg)
    return square_attack(QueryCounter(model), x, y, cfg)
