"""Acceptance criteria 1-8, each checked at its stated tolerance.

Every criterion records one ``criterion N: PASS|FAIL - ...`` line, printed in
the "acceptance criteria" section at the end of the pytest run.  Criteria 4-8
share one session fixture that runs the full desk grid (2 backbone families x
2 pretexts x 8 fine-tuned models, FGSM and PGD-10, untargeted and targeted)
for seeds 0-4.
"""

import os
import re
import subprocess
import sys
import time
from dataclasses import replace
from pathlib import Path

import mpmath
import numpy as np
import pytest
import scipy.stats

import conftest
from greybox import attacks as atk
from greybox import grid as g
from greybox import metrics as mt
from greybox.models import BackboneSpec, HeadSpec, Model, TuningConfig, init_parameters
from greybox.report import summarize, write_report
from oracles import loop_success

SEEDS = tuple(range(5))
EPS = 8 / 255
GRID_BUDGET_S = 15 * 60
HERE = Path(__file__).parent
ROOT = HERE.parent

pytestmark = pytest.mark.acceptance


def record(n: int, ok: bool, detail: str) -> None:
    conftest.ACCEPTANCE_LINES[f"C{n}"] = f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}"
    assert ok, detail


def random_model(family, k=4, seed=0):
    bspec = BackboneSpec(family)
    params = {**init_parameters(bspec, seed), **init_parameters(HeadSpec(1, k), seed + 1)}
    return Model(bspec, HeadSpec(1, k), TuningConfig(), params, model_id=f"random-{family}-{seed}")


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    """Full desk grid for every seed; seed 0 is also written to disk."""
    g.clear_cache()
    runs, times = {}, {}
    for seed in SEEDS:
        t0 = time.perf_counter()
        runs[seed] = g.run_grid(g.GridSpec(seed=seed))
        times[seed] = time.perf_counter() - t0
        print(f"desk grid seed {seed}: {times[seed]:.1f} s, {len(runs[seed].cells)} rows")
    out = tmp_path_factory.mktemp("desk-seed0")
    g.write_grid(runs[0], out)
    write_report(summarize(runs[0].records), out, figures=True)
    return {"runs": runs, "times": times, "seed0_dir": out}


def _mean(values):
    return float(np.mean(values))


# ---------------------------------------------------------------- criterion 1


def test_criterion_1_gradient_suite():
    t0 = time.perf_counter()
    res = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
                          str(HERE / "test_autodiff.py")], capture_output=True, text=True, cwd=ROOT)
    elapsed = time.perf_counter() - t0
    tail = res.stdout.strip().splitlines()[-1] if res.stdout.strip() else res.stderr[-200:]
    passed = re.search(r"(\d+) passed", tail)
    ok = res.returncode == 0 and elapsed < 30
    record(1, ok, f"finite-difference suite ({passed.group(1) if passed else '?'} tests, tolerances 1e-4 "
                  f"and 1e-6 for matmul): '{tail}', wall time {elapsed:.1f} s < 30 s")


# ---------------------------------------------------------------- criterion 2


def test_criterion_2_attack_soundness():
    rng = np.random.default_rng(2024)
    x = rng.uniform(size=(1000, 1, 16, 16))
    y = rng.integers(0, 4, size=1000)
    violations, details = 0, []
    collapse_ok = True
    max_queries = 0
    for family in ("tiny-cnn", "tiny-mlp"):
        model = random_model(family, seed=11)
        backbone = model.backbone_weights()
        for attack in atk.ATTACK_FAMILIES:
            for targeted in (False, True):
                if attack == "backbone-pgd" and targeted:
                    continue
                cfg = atk.AttackConfig(attack, targeted=targeted, seed=5)
                labels = (y + 1) % 4 if targeted else y
                if attack == "square":
                    counter = atk.QueryCounter(model)
                    res = atk.square_attack(counter, x, labels, cfg)
                    max_queries = max(max_queries, int(res.queries.max()))
                    if counter.calls != res.queries.max():
                        violations += 1
                else:
                    res = atk.run_attack(cfg, x, labels, model=model, backbone=backbone)
                linf = np.abs(res.adversarial - x).reshape(len(x), -1).max(axis=1)
                bad = int(np.sum(linf > EPS + 1e-9)) + int(np.sum((res.adversarial < 0) | (res.adversarial > 1)))
                violations += bad
                details.append(f"{family}/{attack}{'/t' if targeted else ''}: max linf {linf.max():.6f}")
        for targeted in (False, True):
            common = dict(epsilon=EPS, alpha=EPS, iterations=1, random_init=False, targeted=targeted)
            labels = (y + 1) % 4 if targeted else y
            f = atk.fgsm(model, x, labels, atk.AttackConfig("fgsm", **common)).adversarial
            p = atk.pgd(model, x, labels, atk.AttackConfig("pgd", **common)).adversarial
            collapse_ok &= f.tobytes() == p.tobytes()
    ok = violations == 0 and collapse_ok and max_queries <= 10
    record(2, ok, f"1000 samples x 4 families x 2 backbones: {violations} constraint violations "
                  f"(eps = {EPS:.6f}); PGD(1, alpha=eps, zero init) == FGSM bitwise: {collapse_ok}; "
                  f"max square queries {max_queries} <= 10")


# ---------------------------------------------------------------- criterion 3


def test_criterion_3_metric_oracles():
    rng = np.random.default_rng(3)
    x = rng.uniform(size=(32, 1, 16, 16))
    y = rng.integers(0, 4, size=32)
    proxy, target = random_model("tiny-cnn", seed=1), random_model("tiny-cnn", seed=9)
    loops_ok = True
    for targeted in (False, True):
        labels = (y + 1) % 4 if targeted else y
        adv = atk.pgd(proxy, x, labels, atk.AttackConfig("pgd", targeted=targeted)).adversarial
        loops_ok &= mt.asr(proxy, x, labels, adv, targeted) == sum(loop_success(proxy.logits, adv, labels,
                                                                                   targeted)) / 32
        loops_ok &= mt.tsr(target, x, labels, adv, targeted) == sum(loop_success(target.logits, adv, labels,
                                                                                    targeted)) / 32

    mpmath.mp.dps = 50
    half = mpmath.mpf("0.5")
    js_ref = float(half * (half * mpmath.log(half / (3 * half / 2)) + half * mpmath.log(half / (half / 2)))
                   + half * (1 * mpmath.log(1 / (3 * half / 2))))
    js_cases = [
        (mt.js_divergence([0.5, 0.5], [1.0, 0.0]), js_ref),
        (mt.js_divergence([1.0, 0.0], [0.0, 1.0]), float(mpmath.log(2))),
        (mt.js_divergence([0.3, 0.7], [0.3, 0.7]), 0.0),
    ]
    js_err = max(abs(a - b) for a, b in js_cases)
    f = mt.anova_f([[1, 2, 3], [2, 3, 4]]).f
    f_scipy = scipy.stats.f_oneway([1, 2, 3], [2, 3, 4]).statistic
    ok = loops_ok and js_err <= 1e-9 and abs(js_cases[0][0] - 0.215762) < 5e-7 and abs(f - 1.5) <= 1e-12 \
        and abs(f - f_scipy) <= 1e-12
    record(3, ok, f"ASR/TSR equal loop oracles: {loops_ok}; JS max error vs 50-digit mpmath {js_err:.2e} <= 1e-9 "
                  f"(JS((0.5,0.5),(1,0)) = {js_cases[0][0]:.9f}); ANOVA F = {f!r} (|F - 1.5| = {abs(f - 1.5):.1e}, "
                  f"scipy {f_scipy!r})")


# ---------------------------------------------------------------- criterion 4


def test_criterion_4_white_box_collapse(desk):
    white = [r for run in desk["runs"].values() for r in run.records if r.unit_id == g.WHITE_BOX]
    bad = [r for r in white if r.tsr != r.asr]
    record(4, bool(white) and not bad, f"{len(white)} white-box cells over {len(SEEDS)} seeds, "
                                       f"{len(bad)} with TSR != ASR")


# ---------------------------------------------------------------- criterion 5


def _grey(records):
    return [r for r in records if r.attack in ("fgsm", "pgd-10") and r.unit_id not in (g.WHITE_BOX, g.BLACK_BOX)]


def test_criterion_5_head_only_vulnerability(desk):
    per_seed = []
    for seed, run in desk["runs"].items():
        grey = _grey(run.records)
        ho = _mean([r.tsr for r in grey if "_head-only_" in r.target_id])
        full = _mean([r.tsr for r in grey if "_full_" in r.target_id])
        per_seed.append((seed, ho, full))
    ho = _mean([p[1] for p in per_seed])
    full = _mean([p[2] for p in per_seed])
    slowest = max(desk["times"].values())
    seeds = ", ".join(f"s{s}: {h:.3f}/{f:.3f}" for s, h, f in per_seed)
    ok = ho > full and slowest < GRID_BUDGET_S
    record(5, ok, f"mean grey-box TSR head-only {ho:.4f} vs full {full:.4f}, margin {ho - full:+.4f} "
                  f"[{seeds}]; slowest grid seed {slowest:.0f} s < {GRID_BUDGET_S} s")


# ---------------------------------------------------------------- criterion 6


def test_criterion_6_attack_strength_ordering(desk):
    bb, sq, wb = [], [], []
    for run in desk["runs"].values():
        bb += [r.tsr for r in run.records if r.attack.startswith("backbone-pgd")]
        sq += [r.tsr for r in run.records if r.attack.startswith("square")]
        wb += [r.asr for r in run.records if r.unit_id == g.WHITE_BOX and r.attack == "pgd-10" and not r.targeted]
    bb, sq, wb = _mean(bb), _mean(sq), _mean(wb)
    ok = bb >= sq and wb >= bb
    record(6, ok, f"white-box PGD-10 ASR {wb:.4f} >= backbone-attack TSR {bb:.4f} (margin {wb - bb:+.4f}) "
                  f">= square-10 TSR {sq:.4f} (margin {bb - sq:+.4f})")


# ---------------------------------------------------------------- criterion 7


CSV_OUTPUTS = ("results.csv", "flags.csv", "skipped.csv", "unit_gaps.csv", "segments.csv", "anova.csv",
               "comparison.csv", "knowledge.csv")


def test_criterion_7_determinism(desk, tmp_path):
    # an independent process, two workers, through the command line
    out = tmp_path / "cli-seed0"
    t0 = time.perf_counter()
    res = subprocess.run([sys.executable, "-m", "greybox", "grid", "--seed", "0", "--jobs", "2", "--out", str(out)],
                         capture_output=True, text=True, cwd=tmp_path, env={**os.environ, "PYTHONHASHSEED": "1"})
    elapsed = time.perf_counter() - t0
    same = [name for name in CSV_OUTPUTS
            if (out / name).exists() and (out / name).read_bytes() == (desk["seed0_dir"] / name).read_bytes()]
    ok = res.returncode == 0 and len(same) == len(CSV_OUTPUTS)
    record(7, ok, f"`greybox grid --seed 0 --jobs 2` (fresh process, {elapsed:.0f} s) vs in-process serial seed-0 "
                  f"run: {len(same)}/{len(CSV_OUTPUTS)} CSV files byte-identical; exit code {res.returncode}")


# ---------------------------------------------------------------- criterion 8


def test_criterion_8_twin_ablation(desk, tmp_path):
    diffs, per_seed, complete = [], [], True
    for seed in SEEDS:
        rows = g.twin_ablation(g.GridSpec(families=("tiny-cnn",), seed=seed))
        summary = g.write_twin(rows, tmp_path / f"seed{seed}")
        complete &= len(rows) == 16 and all(r.manifest_diff == ("tuning.batch_size",) for r in rows)
        complete &= (tmp_path / f"seed{seed}" / "twin.csv").exists()
        diffs += [r.difference for r in rows]
        per_seed.append(f"s{seed}: {summary['mean_difference']:+.3f}")
    mean = _mean(diffs)
    sign = "+" if mean > 0 else "-" if mean < 0 else "0"
    record(8, complete, f"twin table complete for 16 targets x {len(SEEDS)} seeds: {complete}; mean "
                        f"(backbone-attack TSR - meta-matched TSR) = {mean:+.4f}, sign {sign} "
                        f"[{', '.join(per_seed)}] (recorded, not asserted)")


# ---------------------------------------------------------------- extra


def test_white_box_budget_ordering(desk):
    """PGD-40 >= PGD-10 >= FGSM white-box ASR on the desk models, averaged over the seeds (recorded)."""
    rates = {"fgsm": [], "pgd-10": [], "pgd-40": []}
    for seed, run in desk["runs"].items():
        for r in run.records:
            if r.unit_id == g.WHITE_BOX and not r.targeted:
                rates[r.attack].append(r.asr)
        spec = run.spec
        datasets = g.make_datasets(spec)
        for model in run.trained:
            if model.tuning.batch_size != spec.batch_size:
                continue
            x, y = g.eval_split(spec, datasets[model.tuning.dataset_id])
            key = (model.model_id, model.tuning.dataset_id, "pgd-40", False)
            cfg = replace(spec.attack_config("pgd", False).high_budget(),
                          seed=g.derive_seed(spec.seed, "craft:" + ":".join(map(str, key))))
            rates["pgd-40"].append(float(np.mean(atk.pgd(model, x, y, cfg).success)))
    means = {k: _mean(v) for k, v in rates.items()}
    ok = means["pgd-40"] >= means["pgd-10"] >= means["fgsm"]
    conftest.ACCEPTANCE_LINES["X1"] = (f"extra (attacks): white-box ASR PGD-40 {means['pgd-40']:.4f} >= PGD-10 "
                                       f"{means['pgd-10']:.4f} >= FGSM {means['fgsm']:.4f}: "
                                       f"{'PASS' if ok else 'FAIL'}")
    assert ok


def test_head_only_accuracy_recorded(desk):
    """Test accuracy of the tiny-cnn rotation head-only depth-1 model on shapes-A, per seed (recorded)."""
    mid = g.model_id("tiny-cnn", "rotation", "shapes-A", "head-only", 1, 64)
    accs = [next(m.extra["test_accuracy"] for m in run.trained if m.model_id == mid) for run in desk["runs"].values()]
    values = ", ".join(f"s{s}: {a:.4f}" for s, a in zip(SEEDS, accs))
    conftest.ACCEPTANCE_LINES["X2"] = (f"extra (training): {mid} test accuracy [{values}], mean {_mean(accs):.4f}; "
                                       f"reaches the 0.85 example on {sum(a >= 0.85 for a in accs)}/{len(accs)} "
                                       "seeds (recorded, asserted in test_training.py)")
    assert all(0 <= a <= 1 for a in accs)
