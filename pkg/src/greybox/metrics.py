"""Attack and transfer success rates, softmax entropy, Jensen-Shannon
divergence, one-way ANOVA and white-box gap aggregation.

All logarithms are natural, so entropies and divergences are in nats and the
Jensen-Shannon divergence is bounded by ``ln 2``.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import ValidationError

KL_FLOOR = 1e-15
ROW_SUM_TOL = 1e-9


@dataclass
class TransferRecord:
    target_id: str
    proxy_id: str
    backbone: str
    pretext: str
    unit_id: str
    attack: str
    targeted: bool
    asr: float
    tsr: float
    mean_clean_entropy: float
    mean_adv_entropy: float
    mean_js: float
    n_samples: int
    seed: int

    @property
    def is_whitebox(self) -> bool:
        return self.unit_id == "white-box"


def _rate(flags: np.ndarray) -> float:
    if flags.size == 0:
        raise ValidationError("cannot compute a success rate over an empty test set")
    return float(np.count_nonzero(flags)) / flags.size


def success_flags(model, labels, adversarial, targeted: bool = False) -> np.ndarray:
    from .attacks import predict

    pred = predict(model, np.asarray(adversarial))
    labels = np.asarray(labels)
    return pred == labels if targeted else pred != labels


def asr(proxy_model, clean, labels, adversarial, targeted: bool = False) -> float:
    """Fraction of adversarial samples that fool the model they were crafted on."""
    if len(np.asarray(labels)) == 0:
        raise ValidationError("cannot compute ASR over an empty test set")
    if np.shape(clean) != np.shape(adversarial):
        raise ValidationError("clean and adversarial batches differ in shape")
    return _rate(success_flags(proxy_model, labels, adversarial, targeted))


def tsr(target_model, clean, labels, adversarial_from_proxy, targeted: bool = False) -> float:
    """Fraction of proxy-crafted adversarial samples that fool the target."""
    return asr(target_model, clean, labels, adversarial_from_proxy, targeted)


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _stochastic(p, name: str) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0):
        raise ValidationError(f"{name} contains a negative probability")
    sums = p.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > ROW_SUM_TOL):
        raise ValidationError(f"{name} rows must sum to 1 (within {ROW_SUM_TOL})")
    return p


def entropy(probabilities) -> np.ndarray:
    """Shannon entropy per row (nats) with ``0 * ln 0 = 0``."""
    p = _stochastic(probabilities, "probabilities")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return -terms.sum(axis=-1)


def _kl_to_mixture(p: np.ndarray, m: np.ndarray) -> np.ndarray:
    safe_m = np.maximum(m, KL_FLOOR)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(np.where(p > 0, p, 1.0)) - np.log(safe_m)), 0.0)
    return terms.sum(axis=-1)


def js_divergence(p, q) -> np.ndarray | float:
    """Jensen-Shannon divergence between matching rows of ``p`` and ``q`` (nats)."""
    p = _stochastic(p, "p")
    q = _stochastic(q, "q")
    if p.shape != q.shape:
        raise ValidationError(f"distributions have different shapes {p.shape} and {q.shape}")
    m = 0.5 * (p + q)
    js = 0.5 * _kl_to_mixture(p, m) + 0.5 * _kl_to_mixture(q, m)
    js = np.clip(js, 0.0, math.log(2.0))
    return float(js) if js.ndim == 0 else js


class AnovaResult(NamedTuple):
    f: float
    df_between: int
    df_within: int
    ss_between: float
    ss_within: float

    @property
    def infinite(self) -> bool:
        return math.isinf(self.f)


def anova_f(groups: Sequence[Iterable[float]]) -> AnovaResult:
    """One-way ANOVA F ratio.  Zero within-group variance yields ``f = inf``."""
    arrays = [np.asarray(list(g), dtype=np.float64) for g in groups]
    if len(arrays) < 2:
        raise ValidationError("ANOVA needs at least two groups")
    if any(a.size < 2 for a in arrays):
        raise ValidationError("every ANOVA group needs at least two values")
    values = np.concatenate(arrays)
    if np.all(values == values[0]):
        raise ValidationError("all ANOVA values are identical")
    grand = values.mean()
    ssb = float(sum(a.size * (a.mean() - grand) ** 2 for a in arrays))
    ssw = float(sum(((a - a.mean()) ** 2).sum() for a in arrays))
    df_b = len(arrays) - 1
    df_w = values.size - len(arrays)
    f = math.inf if ssw == 0 else (ssb / df_b) / (ssw / df_w)
    return AnovaResult(f, df_b, df_w, ssb, ssw)


def whitebox_gap(records: Sequence[TransferRecord], baseline_attack=None) -> dict[str, float]:
    """Mean over records in each release unit of ``ASR_whitebox - TSR``.

    The white-box baseline for a record is the white-box record with the same
    target and targeting mode and with attack ``baseline_attack(r.attack)``
    (the record's own attack by default).
    """
    baseline = {(r.target_id, r.attack, r.targeted): r.asr for r in records if r.is_whitebox}
    gaps: dict[str, list[float]] = defaultdict(list)
    for r in records:
        attack = baseline_attack(r.attack) if baseline_attack else r.attack
        key = (r.target_id, attack, r.targeted)
        if key not in baseline:
            raise ValidationError(f"no white-box baseline for target {r.target_id!r} ({r.attack})")
        gaps[r.unit_id].append(baseline[key] - r.tsr)
    return {unit: float(np.mean(v)) for unit, v in gaps.items()}
