"""Command-line entry points: ``cimlite <command> [flags]``.

Every command writes one ``<command>.manifest.json`` into ``--out-dir`` with
the merged configuration, seed, artifact paths, wall-clock time and version.
Failures print a single JSON line to stderr and exit with

* 2: a referenced file is missing or unreadable
* 3: invalid configuration or flags
* 4: numerical failure (divergence, non-finite values)
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import subprocess
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigurationError, DimensionError, FormatError, NumericalError

EXIT_MISSING = 2
EXIT_CONFIG = 3
EXIT_NUMERIC = 4

logger = logging.getLogger("cimlite")


def _version_string() -> str:
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True, timeout=5, cwd=Path(__file__).parent)
        if rev.returncode == 0 and rev.stdout.strip():
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _require_file(path) -> Path:
    if path is None:
        raise ConfigurationError("missing required file argument")
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"no such file: {p}")
    return p


def _load_config(args) -> dict:
    """JSON config section for this command, then command-line flags on top."""
    cfg: dict = {}
    if args.config:
        raw = json.loads(_require_file(args.config).read_text())
        if not isinstance(raw, dict):
            raise ConfigurationError("config file must hold a JSON object")
        cfg.update(raw.get("common", {}))
        cfg.update(raw.get(args.command, {}))
    for key in ("seed", "markers", "objective", "aug_strength", "iterations", "batch_size", "epochs", "model", "dataset", "weights", "modules"):
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    cfg.setdefault("seed", 0)
    return cfg


def _load_model(cfg: dict):
    from .model import Model

    return Model.load(_require_file(cfg.get("weights")))


def _load_dataset(cfg: dict):
    from .data import load_bundle

    return load_bundle(_require_file(cfg.get("dataset")))


# ------------------------------------------------------------------ commands


def cmd_gen_data(cfg: dict, out: Path) -> dict:
    from .data import BleedSpec, default_config, make_dataset, save_bundle

    overrides = dict(cfg.get("synth", {}))
    if "bleed" in overrides and overrides["bleed"] is not None:
        overrides["bleed"] = BleedSpec(**overrides["bleed"])
    synth = default_config(int(cfg.get("markers", 8)), seed=int(cfg["seed"]), **overrides)
    bundle = make_dataset(synth, split_seed=int(cfg.get("split_seed", cfg["seed"])))
    path = out / "dataset.mpxd"
    save_bundle(bundle, path)
    modules_path = out / "modules.json"
    modules_path.write_text(json.dumps([{"name": m.name, "markers": [bundle.panel[i] for i in m.members]} for m in bundle.modules], indent=2))
    cfg["synth_resolved"] = synth.to_dict()
    return {"dataset": str(path), "sidecar": str(path) + ".json", "modules": str(modules_path)}


def _build(cfg: dict, bundle, num_classes: int = 0):
    from .model import CimConfig, build_cim, build_earlyfusion_baseline

    kind = cfg.get("model", "cim")
    seed = int(cfg["seed"])
    c = len(bundle.panel)
    if kind == "cim":
        return build_cim(CimConfig.cim_s(c, num_classes=num_classes, seed=seed, **cfg.get("arch", {})))
    if kind == "earlyfusion":
        return build_earlyfusion_baseline(c, num_classes=num_classes, seed=seed, **cfg.get("arch", {}))
    raise ConfigurationError(f"--model must be cim or earlyfusion, got {kind!r}")


def cmd_pretrain(cfg: dict, out: Path) -> dict:
    from .data import export_embeddings
    from .ssl import AugmentConfig, SslRunConfig, pretrain, write_loss_history

    bundle = _load_dataset(cfg)
    model = _build(cfg, bundle)
    run = SslRunConfig.from_dict({k: cfg[k] for k in ("objective", "iterations", "batch_size", "seed", "temperature", "lr") if k in cfg})
    aug = AugmentConfig.preset(cfg.get("aug_strength", "default"))
    trained, history = pretrain(bundle, model, run, aug)
    weights = out / "encoder.cimw"
    trained.save(weights)
    hist = out / "loss_history.csv"
    write_loss_history(hist, history)
    emb = out / "embeddings.csv"
    export_embeddings(trained, bundle, emb)
    cfg["ssl_resolved"] = run.to_dict()
    return {"weights": str(weights), "weights_config": str(weights.with_suffix(".json")), "loss_history": str(hist), "embeddings": str(emb)}


def _train_cfg(cfg: dict):
    from .evaluation import TrainConfig

    keys = ("epochs", "lr", "batch_size", "seed", "augment", "standardize")
    tc = TrainConfig(**{k: cfg[k] for k in keys if k in cfg})
    tc.validate()
    return tc


def _write_report(report, out: Path, stem: str) -> dict:
    paths = {"report": out / f"{stem}.json", "confusion": out / f"{stem}_confusion.csv", "recall": out / f"{stem}_recall.csv"}
    report.to_json(paths["report"])
    report.write_confusion_csv(paths["confusion"])
    report.write_recall_csv(paths["recall"])
    print(report.table())
    return {k: str(v) for k, v in paths.items()}


def cmd_train_sup(cfg: dict, out: Path) -> dict:
    from .evaluation import train_supervised
    from .ssl import AugmentConfig

    bundle = _load_dataset(cfg)
    model = _build(cfg, bundle, num_classes=bundle.n_classes)
    trained, report, _ = train_supervised(bundle, model, _train_cfg(cfg), AugmentConfig.preset(cfg.get("aug_strength", "default")))
    report.name = f"{model.kind}-supervised"
    weights = out / "supervised.cimw"
    trained.save(weights)
    return {"weights": str(weights), **_write_report(report, out, "supervised_report")}


def cmd_linear_eval(cfg: dict, out: Path) -> dict:
    from .evaluation import linear_eval

    bundle = _load_dataset(cfg)
    model = _load_model(cfg)
    report, _, _ = linear_eval(bundle, model, _train_cfg(cfg), name=cfg.get("name", f"{model.kind}-linear"))
    return _write_report(report, out, "linear_report")


def _explain_inputs(cfg: dict):
    bundle = _load_dataset(cfg)
    model = _load_model(cfg)
    split = cfg.get("split", "test")
    idx = np.arange(len(bundle)) if split == "all" else bundle.indices(split)
    return bundle, model, idx


def _rule_cfg(cfg: dict):
    from .lrp import RuleConfig

    return RuleConfig(**cfg.get("rules", {}))


def cmd_explain(cfg: dict, out: Path) -> dict:
    import csv

    from .data import save_relevance_maps
    from .lrp import aggregate_channel_relevance, lrp_explain

    bundle, model, idx = _explain_inputs(cfg)
    maps = lrp_explain(model, bundle.patches[idx], _rule_cfg(cfg), patch_ids=idx)
    scores = aggregate_channel_relevance(maps, bundle.patches[idx], cfg.get("tau_noise", 0.01), cfg.get("pct", 99.0)).scores
    path = out / "relevance.rlvm"
    save_relevance_maps(maps.values.astype(np.float32), bundle.labels[idx], path, bundle.splits[idx])
    score_path = out / "channel_scores.csv"
    with open(score_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patch_id", *bundle.panel])
        for pid, row in zip(idx, scores):
            w.writerow([int(pid), *[repr(float(v)) for v in row]])
    return {"relevance": str(path), "channel_scores": str(score_path)}


def cmd_phenotype(cfg: dict, out: Path) -> dict:
    from .data import load_modules
    from .lrp import assign_phenotype, write_phenotype_table

    bundle, model, idx = _explain_inputs(cfg)
    modules = load_modules(_require_file(cfg["modules"]), bundle.panel) if cfg.get("modules") else bundle.modules
    assignment, _, _ = assign_phenotype(bundle.patches[idx], model, modules, _rule_cfg(cfg), cfg.get("tau_noise", 0.01), cfg.get("pct", 99.0), patch_ids=idx)
    table = out / "phenotypes.csv"
    write_phenotype_table(table, assignment, bundle.centers)
    summary = {"n_cells": int(len(idx)), "ties": int(assignment.tie.sum()), "counts": {m: int(np.sum(np.array(assignment.phenotypes) == m)) for m in assignment.module_names}}
    names = [m.name for m in modules]
    if names == list(bundle.phenotypes):
        truth = bundle.labels[idx]
        summary["agreement"] = float(np.mean(assignment.chosen == truth))
        summary["agreement_per_class"] = {n: float(np.mean(assignment.chosen[truth == k] == k)) for k, n in enumerate(names) if np.any(truth == k)}
    summary_path = out / "phenotype_summary.json"
    summary_path.write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary))
    return {"phenotypes": str(table), "summary": str(summary_path)}


def cmd_report(cfg: dict, out: Path) -> dict:
    import csv

    from .evaluation import EvalReport, compare_reports

    paths = cfg.get("reports") or []
    if len(paths) < 1:
        raise ConfigurationError("report needs at least one --reports file")
    reports = [EvalReport.load(_require_file(p)) for p in paths]
    classes = reports[0].class_names
    if any(r.class_names != classes for r in reports):
        raise ConfigurationError("reports disagree on class names")
    for i, r in enumerate(reports):
        r.name = r.name or f"model{i}"
    comp = compare_reports(reports)
    comp_path = out / "comparison.json"
    comp_path.write_text(json.dumps(comp, indent=2))
    table_path = out / "comparison.txt"
    lines = [f"{'model':<28} {'accuracy':>9} {'bal.acc':>9}"] + [f"{r.name:<28} {r.accuracy:>9.4f} {r.balanced_accuracy:>9.4f}" for r in reports]
    table_path.write_text("\n".join(lines) + "\n")
    recall_path = out / "per_class_recall.csv"
    with open(recall_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", *[r.name for r in reports]])
        for k, c in enumerate(classes):
            w.writerow([c, *[repr(float(r.per_class_recall[k])) for r in reports]])
    print("\n".join(lines))
    return {"comparison": str(comp_path), "table": str(table_path), "per_class_recall": str(recall_path)}


def cmd_grad_check(cfg: dict, out: Path) -> dict:
    from .gradcheck import full_model_grad_check

    errors = full_model_grad_check(seed=int(cfg["seed"]), markers=int(cfg.get("markers", 3)))
    worst = max(errors.values())
    path = out / "grad_check.json"
    path.write_text(json.dumps({"max_relative_error": worst, "per_parameter": errors}, indent=2))
    print(f"max relative error {worst:.3e}")
    if not worst < 1e-4:
        raise NumericalError(f"gradient check failed: max relative error {worst:.3e} >= 1e-4")
    return {"grad_check": str(path)}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "train-sup": cmd_train_sup,
    "linear-eval": cmd_linear_eval,
    "explain": cmd_explain,
    "phenotype": cmd_phenotype,
    "report": cmd_report,
    "grad-check": cmd_grad_check,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cimlite", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"cimlite {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON file; keys under 'common' and under the command name")
        p.add_argument("--seed", type=int)
        p.add_argument("--out-dir", default=".")
        p.add_argument("--dataset")
        p.add_argument("--weights")
        p.add_argument("--objective", choices=["simclr", "vicreg"])
        p.add_argument("--aug-strength", choices=["weak", "default", "strong"])
        p.add_argument("--markers", type=int, choices=[8, 18, 49])
        p.add_argument("--iterations", type=int)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--model", choices=["cim", "earlyfusion"])
        p.add_argument("--modules", help="modules JSON: [{name, markers: [names]}]")
        if name == "report":
            p.add_argument("--reports", nargs="+", help="EvalReport JSON files to compare")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _fail(code: int, exc: BaseException) -> int:
    print(json.dumps({"error": type(exc).__name__, "exit_code": code, "message": str(exc)}), file=sys.stderr)
    return code


def _thread_limit():
    raw = os.environ.get("CIMLITE_THREADS")
    if not raw:
        return nullcontext()
    n = int(raw)
    if n < 1:
        raise ConfigurationError(f"CIMLITE_THREADS must be >= 1, got {raw!r}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return EXIT_CONFIG if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            cfg = _load_config(args)
            if args.command == "report" and args.reports:
                cfg["reports"] = args.reports
            out = Path(args.out_dir)
            out.mkdir(parents=True, exist_ok=True)
            start = time.time()
            artifacts = COMMANDS[args.command](cfg, out)
            manifest = {
                "command": args.command,
                "config": cfg,
                "seed": cfg["seed"],
                "artifacts": artifacts,
                "wall_clock_seconds": round(time.time() - start, 3),
                "version": _version_string(),
            }
            (out / f"{args.command}.manifest.json").write_text(json.dumps(manifest, indent=2, default=str))
    except (FileNotFoundError, IsADirectoryError, FormatError) as exc:
        return _fail(EXIT_MISSING, exc)
    except (ConfigurationError, DimensionError, json.JSONDecodeError, TypeError, KeyError, ValueError) as exc:
        return _fail(EXIT_CONFIG, exc)
    except (NumericalError, ArithmeticError) as exc:
        return _fail(EXIT_NUMERIC, exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
