"""Command-line entry point.

Subcommands: gen-data, pretrain, finetune, attack, grid, twin, report.
Exit codes: 0 success, 1 invalid input (bad flags, config or files),
2 runtime failure.  Every run writes ``manifest.json`` into its output
directory, echoing the resolved configuration.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .config import load_config
from .errors import DimensionError, ValidationError
from .io import atomic_write_json

log = logging.getLogger("greybox")

SUBCOMMANDS = ("gen-data", "pretrain", "finetune", "attack", "grid", "twin", "report")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file for this subcommand")
    common.add_argument("--seed", type=int, help="global seed; overrides the config")
    common.add_argument("--out", help="output directory (default: runs/<subcommand>)")
    common.add_argument("--jobs", type=int, help="worker processes for grid runs (default 1)")
    common.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")

    parser = _Parser(prog="greybox", description="Grey-box transfer attack experiments on shared backbones.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "gen-data": "render a synthetic glyph dataset",
        "pretrain": "pre-train a backbone with a pretext objective",
        "finetune": "fine-tune a classifier from a backbone file",
        "attack": "run one attack and export the adversarial batch as JSON",
        "grid": "run the full target x proxy grid",
        "twin": "run the weights-versus-meta-information twin ablation",
        "report": "summarise a results.csv",
    }
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, parents=[common], help=helps[name], description=helps[name])
        if name == "report":
            p.add_argument("--in", dest="input", required=True, help="results.csv written by grid")
    return parser


def _out_dir(args) -> Path:
    return Path(args.out or Path("runs") / args.command)


def _write_manifest(out: Path, command: str, config: dict, outputs: dict, **extra) -> None:
    atomic_write_json(out / "manifest.json",
                      {"command": command, "version": __version__, "config": config, "outputs": outputs, **extra})


# ---------------------------------------------------------------- subcommands


def cmd_gen_data(args, cfg: dict) -> dict:
    from .data import SyntheticSpec, generate, save_dataset, write_idx

    spec = SyntheticSpec(cfg["generator"], cfg["class_count"], cfg["n"], tuple(cfg["image_shape"]),
                         cfg["noise_std"], cfg["seed"])
    ds = generate(spec)
    out = _out_dir(args)
    if cfg["format"] == "idx":
        if ds.labels is None:
            raise ValidationError("IDX export needs labels; the pretext pool has none")
        files = {"images": str(out / f"{ds.id}-images.idx"), "labels": str(out / f"{ds.id}-labels.idx")}
        out.mkdir(parents=True, exist_ok=True)
        write_idx(ds.images, ds.labels, files["images"], files["labels"])
    else:
        files = {"dataset": str(out / f"{ds.id}.npz")}
        save_dataset(ds, files["dataset"])
    return files


def cmd_pretrain(args, cfg: dict) -> dict:
    from .data import SyntheticSpec, generate
    from .models import BackboneSpec, save_backbone
    from .rng import derive_seed
    from .training import OptimizerConfig, PretextConfig, pretrain

    seed = cfg["seed"]
    pool = generate(SyntheticSpec("pretext-pool", n=cfg["pool_n"], image_shape=tuple(cfg["image_shape"]),
                                  noise_std=cfg["noise_std"], seed=derive_seed(seed, "data:pretext-pool")))
    spec = BackboneSpec(cfg["family"], tuple(cfg["image_shape"]))
    pcfg = PretextConfig(cfg["objective"], cfg["temperature"], cfg["projection_dim"], cfg["epochs"],
                         derive_seed(seed, f"pretrain:{cfg['family']}:{cfg['objective']}"))
    opt = OptimizerConfig(cfg["lr"], cfg["momentum"], cfg["epochs"], cfg["batch_size"])
    backbone = pretrain(spec, pool, pcfg, opt, backbone_id=f"{cfg['family']}_{cfg['objective']}")
    path = _out_dir(args) / f"{backbone.backbone_id}.gblm"
    save_backbone(backbone, path)
    return {"backbone": str(path), "loss_history": backbone.history}


def cmd_finetune(args, cfg: dict) -> dict:
    from .data import load_dataset
    from .models import HeadSpec, TuningConfig, load_backbone, save_model
    from .training import OptimizerConfig, finetune

    backbone = load_backbone(cfg["backbone"])
    dataset = load_dataset(cfg["dataset"])
    if not dataset.labeled:
        raise ValidationError(f"{cfg['dataset']}: fine-tuning needs a labeled dataset")
    tuning = TuningConfig(cfg["mode"], cfg["depth"], dataset.id, cfg["seed"], cfg["batch_size"])
    head = HeadSpec(cfg["depth"], dataset.class_count, backbone.spec.feature_dim)
    mid = cfg["model_id"] or f"{backbone.backbone_id}_{dataset.id}_{cfg['mode']}_z{cfg['depth']}_bs{cfg['batch_size']}"
    opt = OptimizerConfig(cfg["lr"], cfg["momentum"], cfg["epochs"], cfg["batch_size"])
    model = finetune(backbone, head, tuning, dataset, opt, mid)
    path = _out_dir(args) / f"{mid}.gblm"
    save_model(model, path)
    return {"model": str(path), "test_accuracy": model.extra.get("test_accuracy")}


def cmd_attack(args, cfg: dict) -> dict:
    from . import attacks as atk
    from .data import load_dataset
    from .models import load_backbone, load_model

    model = load_model(cfg["model"])
    dataset = load_dataset(cfg["dataset"]).subset(cfg["split"])
    if not dataset.labeled:
        raise ValidationError(f"{cfg['dataset']}: attacks need a labeled dataset")
    n = min(len(dataset), cfg.get("max_samples", len(dataset)))
    x, y = dataset.images[:n], dataset.labels[:n]
    acfg = atk.AttackConfig(cfg["family"], cfg["epsilon"], cfg["alpha"], cfg["iterations"], cfg["query_budget"],
                            cfg["targeted"], cfg["target_class"], cfg["seed"], cfg["random_init"])
    labels = y
    if acfg.targeted and acfg.target_class is None:
        labels = (y + 1) % model.class_count
    backbone = None
    if acfg.family == "backbone-pgd":
        if "backbone" not in cfg:
            raise ValidationError("backbone-pgd needs a 'backbone' file in the config")
        backbone = load_backbone(cfg["backbone"])
    result = atk.run_attack(acfg, x, labels, model=model, backbone=backbone)
    if acfg.targeted and acfg.target_class is not None:
        labels = np.full(n, acfg.target_class)
    success = atk.evaluate_attack(model, x, labels, result.adversarial, acfg.targeted)
    linf = float(np.max(np.abs(result.adversarial - x))) if n else 0.0
    batch = {
        "attack": acfg.to_dict(),
        "config_id": acfg.config_id,
        "model_id": model.model_id,
        "shape": list(result.adversarial.shape),
        "labels": [int(v) for v in labels],
        "clean_prediction": [int(v) for v in atk.predict(model, x)],
        "adversarial_prediction": [int(v) for v in atk.predict(model, result.adversarial)],
        "success": [bool(v) for v in success],
        "queries": [int(v) for v in result.queries],
        "success_rate": float(np.mean(success)) if n else 0.0,
        "linf": linf,
        "adversarial": result.adversarial.tolist(),
    }
    path = _out_dir(args) / "adversarial.json"
    atomic_write_json(path, batch)
    return {"adversarial": str(path), "success_rate": batch["success_rate"], "linf": linf}


def _grid_spec(cfg: dict, jobs: int | None):
    from .grid import GridSpec

    names = {f.name for f in fields(GridSpec)}
    kwargs = {k: v for k, v in cfg.items() if k in names}
    if jobs is not None:
        kwargs["jobs"] = jobs
    for key in ("families", "pretexts", "modes", "depths", "datasets", "attacks", "targeted_modes", "image_shape"):
        if key in kwargs:
            kwargs[key] = tuple(kwargs[key])
    return GridSpec(**kwargs)


def cmd_grid(args, cfg: dict) -> dict:
    from .grid import run_grid, write_grid
    from .models import save_model
    from .report import summarize, write_report

    spec = _grid_spec(cfg, args.jobs)
    out = _out_dir(args)
    run = run_grid(spec)
    files = write_grid(run, out)
    files.update(write_report(summarize(run.records), out, figures=cfg["figures"]))
    if cfg["save_models"]:
        for model, manifest in zip(run.trained, run.models):
            save_model(model, out / "models" / f"{model.model_id}.gblm")
            atomic_write_json(out / "models" / f"{model.model_id}.json", {**manifest, **model.extra})
        files["models_dir"] = str(out / "models")
    cfg.update(spec.to_dict())
    return files


def cmd_twin(args, cfg: dict) -> dict:
    from .grid import twin_ablation, write_twin

    spec = _grid_spec(cfg, args.jobs)
    rows = twin_ablation(spec)
    cfg.update(spec.to_dict())
    summary = write_twin(rows, _out_dir(args))
    return {"twin": str(_out_dir(args) / "twin.csv"), "summary": summary}


def cmd_report(args, cfg: dict) -> dict:
    from .report import report

    result = report(args.input, _out_dir(args), figures=cfg["figures"])
    return result["files"]


HANDLERS = {"gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "finetune": cmd_finetune, "attack": cmd_attack,
            "grid": cmd_grid, "twin": cmd_twin, "report": cmd_report}


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)

    level = logging.WARNING if args.verbose == 0 else logging.INFO if args.verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        if args.jobs is not None and args.jobs < 1:
            raise ValidationError("--jobs must be at least 1")
        cfg = load_config(args.command, args.config, args.seed)
        if args.command == "grid" and args.jobs is not None:
            cfg["jobs"] = args.jobs
        outputs = HANDLERS[args.command](args, cfg)
        _write_manifest(_out_dir(args), args.command, cfg, outputs)
    except (ValidationError, DimensionError) as exc:
        print(f"greybox {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        log.debug("runtime failure", exc_info=True)
        print(f"greybox {args.command}: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(cli_main())
