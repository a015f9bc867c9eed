"""Release units, proxy selection, the target x proxy experiment grid and the
weights-versus-meta-information twin ablation.

A release unit says which facts about a target an attacker knows: the
fine-tuning dataset (D), the fine-tuned weights (W), the pre-trained backbone
(B), the tuning mode (T) and the head depth (Z).  For a grey-box unit the
attacker fine-tunes proxies from the shared backbone; known fields are copied
from the target and unknown fields are set to a different value.
"""

from __future__ import annotations

import hashlib
import itertools
import logging
import time
from collections import OrderedDict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import attacks as atk
from .data import Dataset, SyntheticSpec, generate
from .errors import ValidationError
from .metrics import TransferRecord, entropy, js_divergence, softmax_rows
from .models import BACKBONE_FAMILIES, HEAD_DEPTHS, TUNING_MODES, Backbone, BackboneSpec, HeadSpec, Model, \
    TuningConfig
from .rng import derive_seed
from .training import PRETEXT_OBJECTIVES, OptimizerConfig, PretextConfig, finetune, pretrain

log = logging.getLogger(__name__)

FIELDS = ("D", "W", "B", "T", "Z")
GREY_FIELDS = ("D", "T", "Z")
WHITE_BOX = "white-box"
BLACK_BOX = "black-box"
RESULT_COLUMNS = ("target_id", "proxy_id", "backbone", "pretext", "unit_id", "attack", "targeted", "asr", "tsr",
                  "mean_clean_entropy", "mean_adv_entropy", "mean_js", "n_samples", "seed")
FLAG_COLUMNS = ("target_id", "proxy_id", "unit_id", "attack", "targeted", "proxy_flags", "target_flags")
SKIP_COLUMNS = ("target_id", "unit_id", "attack", "targeted", "reason")
TWIN_COLUMNS = ("target_id", "proxy_id", "backbone", "pretext", "manifest_diff", "meta_matched_tsr",
                "backbone_attack_tsr", "difference", "n_samples", "seed")


# ---------------------------------------------------------------- release units


@dataclass(frozen=True)
class ReleaseUnit:
    dataset: bool = False
    weights: bool = False
    backbone: bool = False
    mode: bool = False
    depth: bool = False

    def __post_init__(self):
        if self.weights and not all(self.flags.values()):
            raise ValidationError("knowing the fine-tuned weights implies knowing every other field")
        if not self.backbone and any(self.flags.values()):
            raise ValidationError("grey-box units must include the backbone")

    @property
    def flags(self) -> dict[str, bool]:
        return {"D": self.dataset, "W": self.weights, "B": self.backbone, "T": self.mode, "Z": self.depth}

    @property
    def is_white_box(self) -> bool:
        return self.weights

    @property
    def is_black_box(self) -> bool:
        return not any(self.flags.values())

    @property
    def is_grey_box(self) -> bool:
        return not (self.is_white_box or self.is_black_box)

    @property
    def known_count(self) -> int:
        """Number of known fields among D, T and Z."""
        return sum((self.dataset, self.mode, self.depth))

    @property
    def id(self) -> str:
        if self.is_white_box:
            return WHITE_BOX
        if self.is_black_box:
            return BLACK_BOX
        known = [name for name in ("B", "D", "T", "Z") if self.flags[name]]
        return "+".join(known)

    @property
    def bitstring(self) -> str:
        """Known flags in D, W, B, T, Z order, e.g. ``"00110"`` for ``B+T``."""
        return "".join("1" if self.flags[f] else "0" for f in FIELDS)


def enumerate_release_units() -> list[ReleaseUnit]:
    """Black-box, the eight grey-box units (fewest known fields first), white-box."""
    units = [ReleaseUnit()]
    for k in range(len(GREY_FIELDS) + 1):
        for known in itertools.combinations(GREY_FIELDS, k):
            units.append(ReleaseUnit(dataset="D" in known, backbone=True, mode="T" in known, depth="Z" in known))
    units.append(ReleaseUnit(True, True, True, True, True))
    return units


def unit_by_id(unit_id: str) -> ReleaseUnit:
    for unit in enumerate_release_units():
        if unit.id == unit_id:
            return unit
    raise ValidationError(f"unknown release unit {unit_id!r}")


def _meta(model: Model) -> dict[str, object]:
    return {"B": model.extra.get("backbone_id", ""), "D": model.tuning.dataset_id,
            "T": model.tuning.mode, "Z": model.tuning.depth}


def proxies_for(target: Model, unit: ReleaseUnit, pool) -> list[Model]:
    """Models in ``pool`` an attacker holding ``unit`` would fine-tune as proxies."""
    if unit.is_white_box:
        return [target]
    if unit.is_black_box:
        return []
    want = _meta(target)
    chosen = []
    for model in pool:
        if model.model_id == target.model_id:
            continue
        meta = _meta(model)
        if meta["B"] != want["B"]:
            continue
        if all((meta[f] == want[f]) == unit.flags[f] for f in GREY_FIELDS):
            chosen.append(model)
    return sorted(chosen, key=lambda m: m.model_id)


# ---------------------------------------------------------------- grid spec


@dataclass(frozen=True)
class GridSpec:
    families: tuple[str, ...] = BACKBONE_FAMILIES
    pretexts: tuple[str, ...] = PRETEXT_OBJECTIVES
    modes: tuple[str, ...] = TUNING_MODES
    depths: tuple[int, ...] = HEAD_DEPTHS
    datasets: tuple[str, ...] = ("shapes-A", "shapes-B")
    class_count: int = 4
    n: int = 2048
    pool_n: int = 2048
    image_shape: tuple[int, int, int] = (1, 16, 16)
    noise_std: float = 0.05
    pretrain_epochs: int = 10
    finetune_epochs: int = 10
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 64
    twin_batch_size: int | None = None
    attacks: tuple[str, ...] = ("fgsm", "pgd")
    pgd_iterations: int = 10
    high_budget: bool = False
    targeted_modes: tuple[bool, ...] = (False, True)
    epsilon: float = 8 / 255
    alpha: float = 2 / 255
    square_queries: int = 10
    max_test_samples: int | None = None
    seed: int = 0
    jobs: int = 1

    def __post_init__(self):
        for name in ("families", "pretexts", "modes", "depths", "datasets", "attacks", "targeted_modes"):
            value = tuple(getattr(self, name))
            object.__setattr__(self, name, value)
            if not value:
                raise ValidationError(f"grid field {name!r} must not be empty")
            if len(set(value)) != len(value):
                raise ValidationError(f"grid field {name!r} has duplicate entries")
        object.__setattr__(self, "image_shape", tuple(self.image_shape))
        _check_subset(self.families, BACKBONE_FAMILIES, "families")
        _check_subset(self.pretexts, PRETEXT_OBJECTIVES, "pretexts")
        _check_subset(self.modes, TUNING_MODES, "modes")
        _check_subset(self.depths, HEAD_DEPTHS, "depths")
        _check_subset(self.datasets, ("shapes-A", "shapes-B"), "datasets")
        _check_subset(self.attacks, ("fgsm", "pgd"), "attacks")
        if self.twin_batch_size is not None and self.twin_batch_size == self.batch_size:
            raise ValidationError("twin_batch_size must differ from batch_size")
        if self.seed < 0 or self.jobs < 1:
            raise ValidationError("seed must be non-negative and jobs at least 1")
        if self.max_test_samples is not None and self.max_test_samples < 1:
            raise ValidationError("max_test_samples must be positive")
        # validates epsilon / alpha / budgets early
        self.attack_config("pgd", False)
        if self.square_queries < 1:
            raise ValidationError("square_queries must be at least 1")

    def attack_config(self, family: str, targeted: bool, iterations: int | None = None, seed: int = 0):
        return atk.AttackConfig(family=family, epsilon=self.epsilon, alpha=self.alpha,
                                iterations=iterations or self.pgd_iterations, query_budget=self.square_queries,
                                targeted=targeted, seed=seed)

    def attack_configs(self) -> list[atk.AttackConfig]:
        configs = [self.attack_config(f, False) for f in self.attacks]
        if self.high_budget and "pgd" in self.attacks:
            configs.append(self.attack_config("pgd", False).high_budget())
        return configs

    def batch_sizes(self) -> tuple[int, ...]:
        return (self.batch_size,) if self.twin_batch_size is None else (self.batch_size, self.twin_batch_size)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d


def _check_subset(values, allowed, name):
    bad = [v for v in values if v not in allowed]
    if bad:
        raise ValidationError(f"grid field {name!r}: {bad[0]!r} is not one of {list(allowed)}")


def model_id(family: str, pretext: str, dataset: str, mode: str, depth: int, batch: int) -> str:
    return f"{family}_{pretext}_{dataset}_{mode}_z{depth}_bs{batch}"


def parse_model_id(mid: str) -> dict[str, object]:
    """Inverse of :func:`model_id`."""
    parts = mid.split("_")
    if len(parts) != 6 or not parts[4].startswith("z") or not parts[5].startswith("bs"):
        raise ValidationError(f"malformed model id {mid!r}")
    try:
        depth, batch = int(parts[4][1:]), int(parts[5][2:])
    except ValueError:
        raise ValidationError(f"malformed model id {mid!r}") from None
    return {"family": parts[0], "pretext": parts[1], "dataset": parts[2], "mode": parts[3],
            "depth": depth, "batch_size": batch}


def params_digest(params) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name], dtype=np.float64).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------- model pools


@dataclass
class ModelGroup:
    """Everything trained from one (family, pretext) backbone."""

    family: str
    pretext: str
    backbone: Backbone
    datasets: dict[str, Dataset]
    models: list[Model]
    timings: dict[str, float] = field(default_factory=dict)

    def targets(self, batch_size: int) -> list[Model]:
        return [m for m in self.models if m.tuning.batch_size == batch_size]


def make_datasets(spec: GridSpec) -> dict[str, Dataset]:
    out = {}
    for name in spec.datasets:
        s = SyntheticSpec(name, spec.class_count, spec.n, spec.image_shape, spec.noise_std,
                          derive_seed(spec.seed, f"data:{name}"))
        out[name] = generate(s)
    return out


def make_pool(spec: GridSpec) -> Dataset:
    return generate(SyntheticSpec("pretext-pool", n=spec.pool_n, image_shape=spec.image_shape,
                                  noise_std=spec.noise_std, seed=derive_seed(spec.seed, "data:pretext-pool")))


def tuning_seed(seed: int, family: str, pretext: str, dataset: str, mode: str, depth: int) -> int:
    """Per-model seed; batch size is left out so twins share initialisation and data order streams."""
    return derive_seed(seed, f"finetune:{family}:{pretext}:{dataset}:{mode}:{depth}")


# Trained backbones and models keyed by everything that determines them, so that
# a twin ablation after a grid run (or a repeated run) in the same process
# reuses work.  Values are never mutated after insertion.
_CACHE: OrderedDict = OrderedDict()
_CACHE_SIZE = 256


def _training_key(spec: GridSpec) -> tuple:
    return (spec.n, spec.pool_n, spec.image_shape, spec.noise_std, spec.pretrain_epochs, spec.finetune_epochs,
            spec.lr, spec.momentum, spec.batch_size, spec.class_count, spec.seed)


def _cached(key, make):
    if key in _CACHE:
        _CACHE.move_to_end(key)
        return _CACHE[key]
    value = make()
    _CACHE[key] = value
    while len(_CACHE) > _CACHE_SIZE:
        _CACHE.popitem(last=False)
    return value


def clear_cache() -> None:
    _CACHE.clear()


def _pretrain(spec: GridSpec, family: str, pretext: str) -> Backbone:
    pool = make_pool(spec)
    bspec = BackboneSpec(family, spec.image_shape)
    pcfg = PretextConfig(pretext, epochs=spec.pretrain_epochs,
                         seed=derive_seed(spec.seed, f"pretrain:{family}:{pretext}"))
    opt = OptimizerConfig(lr=spec.lr, momentum=spec.momentum, epochs=spec.pretrain_epochs, batch_size=spec.batch_size)
    return pretrain(bspec, pool, pcfg, opt, backbone_id=f"{family}_{pretext}")


def build_group(spec: GridSpec, family: str, pretext: str, batch_sizes=None) -> ModelGroup:
    """Pre-train one backbone and fine-tune the full tuning grid on it."""
    timings = {}
    tkey = _training_key(spec)
    t0 = time.perf_counter()
    datasets = _cached(("data", tkey, spec.datasets), lambda: make_datasets(spec))
    backbone = _cached(("backbone", tkey, family, pretext), lambda: _pretrain(spec, family, pretext))
    timings["pretrain"] = time.perf_counter() - t0
    digest = params_digest(backbone.params)

    ft_opt = OptimizerConfig(lr=spec.lr, momentum=spec.momentum, epochs=spec.finetune_epochs)
    models = []
    for dataset, mode, depth, batch in itertools.product(spec.datasets, spec.modes, spec.depths,
                                                         batch_sizes or spec.batch_sizes()):
        t1 = time.perf_counter()
        tuning = TuningConfig(mode, depth, dataset, tuning_seed(spec.seed, family, pretext, dataset, mode, depth),
                              batch)
        head = HeadSpec(depth, spec.class_count, backbone.spec.feature_dim)
        mid = model_id(family, pretext, dataset, mode, depth, batch)

        def make(tuning=tuning, head=head, mid=mid, dataset=dataset, batch=batch):
            model = finetune(backbone, head, tuning, datasets[dataset], replace(ft_opt, batch_size=batch), mid)
            model.extra["backbone_digest"] = digest
            log.info("trained %s (test accuracy %.3f)", mid, model.extra["test_accuracy"])
            return model

        models.append(_cached(("model", tkey, family, pretext, dataset, mode, depth, batch), make))
        timings[mid] = time.perf_counter() - t1
    return ModelGroup(family, pretext, backbone, datasets, models, timings)


# ---------------------------------------------------------------- grid cells


def eval_split(spec: GridSpec, dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
    test = dataset.test
    n = len(test) if spec.max_test_samples is None else min(len(test), spec.max_test_samples)
    return test.images[:n], test.labels[:n]


def target_classes(labels: np.ndarray, class_count: int) -> np.ndarray:
    """Targeted attacks aim every sample at the next class."""
    return (np.asarray(labels) + 1) % class_count


def _bits(flags: np.ndarray) -> str:
    return "".join("1" if f else "0" for f in flags)


@dataclass
class GridCellResult:
    record: TransferRecord
    duration: float
    proxy_manifests: list[dict] = field(default_factory=list)
    attack_manifest: dict = field(default_factory=dict)
    flags: list[tuple] = field(default_factory=list)


@dataclass
class GridRun:
    spec: GridSpec
    cells: list[GridCellResult]
    skipped: list[tuple]
    models: list[dict]
    timings: dict
    trained: list[Model] = field(default_factory=list, repr=False)

    @property
    def records(self) -> list[TransferRecord]:
        return [c.record for c in self.cells]


def _model_manifest(model: Model) -> dict:
    return {"model_id": model.model_id, "backbone": asdict(model.backbone), "head": asdict(model.head),
            "tuning": asdict(model.tuning), "provenance": model.provenance,
            "backbone_id": model.extra.get("backbone_id"), "backbone_digest": model.extra.get("backbone_digest"),
            "test_accuracy": model.extra.get("test_accuracy")}


class _Crafter:
    """Caches adversarial batches per (proxy, source dataset, attack, targeting)."""

    def __init__(self, spec: GridSpec, group: ModelGroup):
        self.spec = spec
        self.group = group
        self.cache: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}

    def craft(self, proxy: Model, dataset: str, cfg: atk.AttackConfig):
        key = (proxy.model_id, dataset, cfg.config_id, cfg.targeted)
        if key not in self.cache:
            x, y = eval_split(self.spec, self.group.datasets[dataset])
            cfg = replace(cfg, seed=derive_seed(self.spec.seed, "craft:" + ":".join(map(str, key))))
            if cfg.targeted:
                labels = target_classes(y, proxy.class_count)
            elif proxy.tuning.dataset_id == dataset:
                labels = y
            else:
                # the proxy's label space is a different glyph set; attack its own decision
                labels = atk.predict(proxy, x)
            result = atk.run_attack(cfg, x, labels, model=proxy)
            self.cache[key] = (result.adversarial, result.success)
        return self.cache[key]


def _target_stats(target: Model, x: np.ndarray, adv: np.ndarray, labels: np.ndarray, targeted: bool):
    clean_p = softmax_rows(atk.logits_of(target, x))
    adv_logits = atk.logits_of(target, adv)
    adv_p = softmax_rows(adv_logits)
    pred = adv_logits.argmax(axis=1)
    flags = pred == labels if targeted else pred != labels
    return flags, float(np.mean(entropy(clean_p))), float(np.mean(entropy(adv_p))), \
        float(np.mean(js_divergence(clean_p, adv_p)))


def _record(spec, group, target, proxy_id, unit_id, attack, targeted, asr, tsr, stats, n) -> TransferRecord:
    return TransferRecord(target.model_id, proxy_id, group.family, group.pretext, unit_id, attack, bool(targeted),
                          float(asr), float(tsr), stats[0], stats[1], stats[2], int(n), spec.seed)


def _group_cells(spec: GridSpec, group: ModelGroup):
    cells, skipped = [], []
    crafter = _Crafter(spec, group)
    units = enumerate_release_units()
    backbone_cache = {}

    for target in group.targets(spec.batch_size):
        dataset = target.tuning.dataset_id
        x, y = eval_split(spec, group.datasets[dataset])
        for unit in units:
            proxies = proxies_for(target, unit, group.models)
            for cfg in spec.attack_configs():
                for targeted in spec.targeted_modes:
                    cfg_t = replace(cfg, targeted=targeted)
                    if not proxies:
                        reason = "black-box unit uses no proxy (see square-attack rows)" if unit.is_black_box \
                            else "no proxy matches this release unit"
                        skipped.append((target.model_id, unit.id, cfg.config_id, int(targeted), reason))
                        continue
                    t0 = time.perf_counter()
                    try:
                        cells.append(_cell(spec, group, crafter, target, unit, proxies, cfg_t, x, y, t0))
                    except Exception as exc:  # keep the grid going
                        log.exception("cell %s/%s/%s failed", target.model_id, unit.id, cfg.config_id)
                        skipped.append((target.model_id, unit.id, cfg.config_id, int(targeted), f"error: {exc}"))

        # backbone attack: pre-trained weights only, no labels, no head
        t0 = time.perf_counter()
        bcfg = spec.attack_config("backbone-pgd", False)
        if dataset not in backbone_cache:
            seed = derive_seed(spec.seed, f"backbone:{group.backbone.backbone_id}:{dataset}")
            backbone_cache[dataset] = atk.backbone_attack(group.backbone, x, replace(bcfg, seed=seed)).adversarial
        adv = backbone_cache[dataset]
        flags, *stats = _target_stats(target, x, adv, y, False)
        rate = float(np.mean(flags))
        rec = _record(spec, group, target, group.backbone.backbone_id, "B", bcfg.config_id, False, rate, rate,
                      stats, len(x))
        cells.append(GridCellResult(rec, time.perf_counter() - t0, [], bcfg.to_dict(),
                                    [(target.model_id, group.backbone.backbone_id, "B", bcfg.config_id, 0,
                                      _bits(flags), _bits(flags))]))

        # square attack: black-box baseline against the target oracle
        t0 = time.perf_counter()
        scfg = replace(spec.attack_config("square", False), seed=derive_seed(spec.seed, f"square:{target.model_id}"))
        oracle = atk.QueryCounter(target)
        res = atk.square_attack(oracle, x, y, scfg)
        if res.queries.max() > scfg.query_budget:
            raise RuntimeError(f"square attack exceeded its query budget on {target.model_id}")
        flags, *stats = _target_stats(target, x, res.adversarial, y, False)
        rate = float(np.mean(flags))
        rec = _record(spec, group, target, "none", BLACK_BOX, scfg.config_id, False, rate, rate, stats, len(x))
        manifest = {**scfg.to_dict(), "oracle_images": oracle.images, "max_queries": int(res.queries.max())}
        cells.append(GridCellResult(rec, time.perf_counter() - t0, [], manifest,
                                    [(target.model_id, "none", BLACK_BOX, scfg.config_id, 0,
                                      _bits(flags), _bits(flags))]))
    return cells, skipped


def _cell(spec, group, crafter, target, unit, proxies, cfg, x, y, t0) -> GridCellResult:
    dataset = target.tuning.dataset_id
    labels = target_classes(y, target.class_count) if cfg.targeted else y
    asrs, tsrs, clean_h, adv_h, jss, flag_rows = [], [], [], [], [], []
    for proxy in proxies:
        adv, proxy_flags = crafter.craft(proxy, dataset, cfg)
        target_flags, h0, h1, js = _target_stats(target, x, adv, labels, cfg.targeted)
        asrs.append(float(np.mean(proxy_flags)))
        tsrs.append(float(np.mean(target_flags)))
        clean_h.append(h0)
        adv_h.append(h1)
        jss.append(js)
        flag_rows.append((target.model_id, proxy.model_id, unit.id, cfg.config_id, int(cfg.targeted),
                          _bits(proxy_flags), _bits(target_flags)))
    stats = (float(np.mean(clean_h)), float(np.mean(adv_h)), float(np.mean(jss)))
    rec = _record(spec, group, target, ";".join(p.model_id for p in proxies), unit.id, cfg.config_id,
                  cfg.targeted, np.mean(asrs), np.mean(tsrs), stats, len(x))
    return GridCellResult(rec, time.perf_counter() - t0, [_model_manifest(p) for p in proxies], cfg.to_dict(),
                          flag_rows)


def _run_group(args):
    spec, family, pretext = args
    t0 = time.perf_counter()
    group = build_group(spec, family, pretext)
    t1 = time.perf_counter()
    cells, skipped = _group_cells(spec, group)
    timings = {"train": t1 - t0, "attack": time.perf_counter() - t1, "models": group.timings}
    return cells, skipped, group.models, timings


def run_grid(spec: GridSpec) -> GridRun:
    """Train every (family, pretext) group and evaluate every grid cell.

    Groups are independent; with ``spec.jobs > 1`` they run in worker
    processes.  Results are collected in the canonical group order, so the
    output does not depend on the number of workers.
    """
    work = [(spec, f, p) for f in spec.families for p in spec.pretexts]
    if spec.jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=min(spec.jobs, len(work))) as pool:
            outputs = list(pool.map(_run_group, work))
    else:
        outputs = [_run_group(w) for w in work]
    cells, skipped, trained, timings = [], [], [], {}
    for (_, family, pretext), (c, s, m, t) in zip(work, outputs):
        cells.extend(c)
        skipped.extend(s)
        trained.extend(m)
        timings[f"{family}_{pretext}"] = t
    return GridRun(spec, cells, skipped, [_model_manifest(m) for m in trained], timings, trained)


def record_row(r: TransferRecord) -> list[str]:
    from .io import fmt_float

    return [r.target_id, r.proxy_id, r.backbone, r.pretext, r.unit_id, r.attack, str(int(r.targeted)),
            fmt_float(r.asr), fmt_float(r.tsr), fmt_float(r.mean_clean_entropy), fmt_float(r.mean_adv_entropy),
            fmt_float(r.mean_js), str(r.n_samples), str(r.seed)]


def write_grid(run: GridRun, out_dir) -> dict:
    """Write results, raw flags, skipped cells, model manifests and timings under ``out_dir``."""
    from pathlib import Path

    from .io import atomic_write_csv, atomic_write_json

    out = Path(out_dir)
    atomic_write_csv(out / "results.csv", RESULT_COLUMNS, [record_row(r) for r in run.records])
    atomic_write_csv(out / "flags.csv", FLAG_COLUMNS, [row for c in run.cells for row in c.flags])
    atomic_write_csv(out / "skipped.csv", SKIP_COLUMNS, run.skipped)
    atomic_write_json(out / "models.json", run.models)
    atomic_write_json(out / "timings.json", {"groups": run.timings,
                                             "cells": [[c.record.target_id, c.record.unit_id, c.record.attack,
                                                        int(c.record.targeted), c.duration] for c in run.cells]})
    return {"results": str(out / "results.csv"), "flags": str(out / "flags.csv"),
            "skipped": str(out / "skipped.csv"), "models": str(out / "models.json")}


# ---------------------------------------------------------------- twin ablation


@dataclass
class TwinRow:
    target_id: str
    proxy_id: str
    backbone: str
    pretext: str
    manifest_diff: tuple[str, ...]
    meta_matched_tsr: float
    backbone_attack_tsr: float
    n_samples: int
    seed: int

    @property
    def difference(self) -> float:
        """Backbone-attack TSR minus meta-matched proxy TSR."""
        return self.backbone_attack_tsr - self.meta_matched_tsr

    def row(self) -> list[str]:
        from .io import fmt_float

        return [self.target_id, self.proxy_id, self.backbone, self.pretext, ";".join(self.manifest_diff),
                fmt_float(self.meta_matched_tsr), fmt_float(self.backbone_attack_tsr), fmt_float(self.difference),
                str(self.n_samples), str(self.seed)]


def manifest_diff(a: Model, b: Model) -> tuple[str, ...]:
    """Names of the tuning/head/backbone fields in which two models differ (seeds excluded)."""
    da, db = asdict(a.tuning), asdict(b.tuning)
    diff = [f"tuning.{k}" for k in da if da[k] != db[k]]
    diff += [f"head.{k}" for k, v in asdict(a.head).items() if asdict(b.head)[k] != v]
    if a.backbone != b.backbone or a.extra.get("backbone_digest") != b.extra.get("backbone_digest"):
        diff.append("backbone")
    return tuple(diff)


def twin_ablation(spec: GridSpec) -> list[TwinRow]:
    """Knowing every meta field but the weights versus knowing only the backbone weights.

    Set A (``spec.batch_size``) are the targets; set B (``spec.twin_batch_size``,
    32 by default) are proxies identical to their target in every field but the
    batch size.  Each target gets the PGD transfer rate from its twin and the
    transfer rate of the label-free backbone attack.
    """
    if len(spec.families) != 1:
        raise ValidationError(f"twin ablation needs exactly one backbone family, got {list(spec.families)}")
    twin_batch = spec.twin_batch_size or 32
    if twin_batch == spec.batch_size:
        raise ValidationError("twin batch size must differ from batch_size")
    family = spec.families[0]
    cfg = spec.attack_config("pgd", False)
    bcfg = spec.attack_config("backbone-pgd", False)
    rows = []
    for pretext in spec.pretexts:
        group = build_group(spec, family, pretext, (spec.batch_size, twin_batch))
        twins = {(m.tuning.dataset_id, m.tuning.mode, m.tuning.depth): m
                 for m in group.models if m.tuning.batch_size == twin_batch}
        backbone_adv = {}
        for target in group.targets(spec.batch_size):
            dataset = target.tuning.dataset_id
            proxy = twins[(dataset, target.tuning.mode, target.tuning.depth)]
            x, y = eval_split(spec, group.datasets[dataset])
            seed = derive_seed(spec.seed, f"twin:craft:{proxy.model_id}")
            adv = atk.pgd(proxy, x, y, replace(cfg, seed=seed)).adversarial
            meta_tsr = float(np.mean(atk.evaluate_attack(target, x, y, adv)))
            if dataset not in backbone_adv:
                bseed = derive_seed(spec.seed, f"backbone:{group.backbone.backbone_id}:{dataset}")
                backbone_adv[dataset] = atk.backbone_attack(group.backbone, x, replace(bcfg, seed=bseed)).adversarial
            b_tsr = float(np.mean(atk.evaluate_attack(target, x, y, backbone_adv[dataset])))
            rows.append(TwinRow(target.model_id, proxy.model_id, family, pretext, manifest_diff(target, proxy),
                                meta_tsr, b_tsr, len(x), spec.seed))
    return rows


def write_twin(rows: list[TwinRow], out_dir) -> dict:
    from pathlib import Path

    from .io import atomic_write_csv, atomic_write_json

    out = Path(out_dir)
    atomic_write_csv(out / "twin.csv", TWIN_COLUMNS, [r.row() for r in rows])
    diffs = [r.difference for r in rows]
    summary = {
        "targets": len(rows),
        "mean_meta_matched_tsr": float(np.mean([r.meta_matched_tsr for r in rows])) if rows else None,
        "mean_backbone_attack_tsr": float(np.mean([r.backbone_attack_tsr for r in rows])) if rows else None,
        "mean_difference": float(np.mean(diffs)) if rows else None,
        "sign": int(np.sign(np.mean(diffs))) if rows else 0,
    }
    atomic_write_json(out / "twin_summary.json", summary)
    return summary
