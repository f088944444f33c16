"""Command-line entry point: ``transformesh <command> [--config FILE] [--set key=value ...]``."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from .cohort import CohortConfig, generate_cohort, load_cohort, make_template, save_cohort
from .config import RunConfig, load_config
from .errors import ConfigError, ManifestError, TransforMeshError
from .experiments import (
    PROTOCOLS, check_training_manifest, run_anomaly, run_protocol, summary_row, write_summary,
)
from .gradcheck import run_all
from .hierarchy import load_or_build_hierarchy
from .mesh import load_mesh
from .model import CopyReference, ModelConfig, build_model
from .training import AugmentationConfig, LossConfig, OptimizerConfig, restore_checkpoint, train

logger = logging.getLogger("transformesh")


class CommandFailed(TransforMeshError):
    pass


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _read_kv(path: Path) -> dict:
    out = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if "=" in line and not line.lstrip().startswith("#"):
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def _write_kv(path: Path, items: dict) -> None:
    path.write_text("".join(f"{k} = {v}\n" for k, v in items.items()), encoding="utf-8")


class Results:
    """Single writer for one results directory."""

    def __init__(self, cfg: RunConfig, command: str):
        self.root = Path(cfg["results_dir"])
        self.root.mkdir(parents=True, exist_ok=True)
        self.command = command
        (self.root / "config.echo").write_text(f"# command = {command}\n" + cfg.echo(), encoding="utf-8")
        self.inputs = {}
        if cfg.source:
            self.record_input(cfg.source)

    def record_input(self, path) -> None:
        self.inputs[str(path)] = sha256_file(path)

    def metrics(self) -> Path:
        d = self.root / "metrics"
        d.mkdir(exist_ok=True)
        return d

    def close(self) -> None:
        path = self.root / "MANIFEST"
        entries = _read_kv(path) if path.exists() else {}
        entries = {k: v for k, v in entries.items() if not k.startswith(f"{self.command}:")}
        for name, digest in sorted(self.inputs.items()):
            entries[f"{self.command}:{name}"] = digest
        _write_kv(path, dict(sorted(entries.items())))


# ------------------------------------------------------------------ helpers


def _cohort(cfg: RunConfig, results: Results):
    d = Path(cfg["cohort_dir"])
    if not (d / "cohort.manifest").exists():
        raise ConfigError(f"no cohort archive at {d}; run generate-cohort first", file=cfg.source, key="cohort_dir")
    results.record_input(d / "cohort.manifest")
    return load_cohort(d)


def _hierarchy(cfg: RunConfig, results: Results, template=None, rebuild=False):
    if template is None:
        tpath = Path(cfg["cohort_dir"]) / "template.ply"
        template = load_mesh(tpath) if tpath.exists() else make_template()
    path = Path(cfg["hierarchy_path"])
    hier = load_or_build_hierarchy(path, template, cfg["factors"], cfg["spiral_length"], rebuild=rebuild)
    results.record_input(path)
    return hier


def _model_config(cfg: RunConfig) -> ModelConfig:
    overrides = dict(
        channels=cfg["channels"], factors=cfg["factors"], spiral_length=cfg["spiral_length"],
        final_norm=cfg["final_norm"], stop_grad_reference=cfg["stop_grad_reference"], seed=cfg["model_seed"],
    )
    if cfg["width"]:
        overrides["width"] = cfg["width"]
    if cfg["heads"]:
        overrides["heads"] = cfg["heads"]
    if cfg["scale"] not in ("desk", "full"):
        raise ConfigError("scale must be desk or full", file=cfg.source, key="scale")
    try:
        return ModelConfig.preset_config(cfg["preset"], cfg["scale"], **overrides)
    except ConfigError as exc:
        raise ConfigError(str(exc), file=cfg.source, key=exc.key) from None


def _model_config_from_file(path: Path) -> ModelConfig:
    raw = _read_kv(path)
    kwargs = {}
    for f in fields(ModelConfig):
        if f.name not in raw:
            continue
        v = raw[f.name]
        if isinstance(f.default, bool):
            kwargs[f.name] = v == "True"
        elif isinstance(f.default, int):
            kwargs[f.name] = int(v)
        elif isinstance(f.default, tuple):
            kwargs[f.name] = tuple(int(x) for x in v.split(",") if x)
        else:
            kwargs[f.name] = v
    return ModelConfig(**kwargs)


def _run_dir(cfg: RunConfig) -> Path:
    return Path(cfg["results_dir"]) / cfg["run_id"]


def _load_trained(cfg: RunConfig, results: Results):
    run = _run_dir(cfg)
    ckpt = run / "best.ckpt"
    if not ckpt.exists():
        ckpt = run / "last.ckpt"
    if not ckpt.exists():
        raise ConfigError(f"no checkpoint under {run}; run train first", file=cfg.source, key="run_id")
    mcfg = _model_config_from_file(run / "model.config")
    hier = _hierarchy(cfg, results)
    model = build_model(mcfg, hier)
    restore_checkpoint(model, ckpt)
    results.record_input(ckpt)
    results.record_input(run / "training.manifest")
    groups = _read_kv(run / "training.manifest")
    return model, groups


# ------------------------------------------------------------------ commands


def cmd_generate_cohort(cfg: RunConfig, args, results: Results) -> None:
    ccfg = CohortConfig(noise_fraction=cfg["noise_fraction"])
    cohort = generate_cohort(cfg["n_subjects"], cfg["fraction_progressors"], cfg["cohort_seed"], config=ccfg)
    out = save_cohort(cohort, cfg["cohort_dir"])
    print(f"cohort: {len(cohort.subjects)} subjects, mean visits {cohort.mean_visits():.3f}, "
          f"complete {100 * cohort.complete_fraction():.1f}% -> {out}")


def cmd_build_hierarchy(cfg: RunConfig, args, results: Results) -> None:
    hier = _hierarchy(cfg, results, rebuild=args.rebuild_hierarchy)
    print(f"hierarchy: vertices per level {hier.vertex_counts()} -> {cfg['hierarchy_path']}")


def cmd_train(cfg: RunConfig, args, results: Results) -> None:
    cohort = _cohort(cfg, results)
    hier = _hierarchy(cfg, results, cohort.template)
    mcfg = _model_config(cfg)
    model = build_model(mcfg, hier)
    group = {"all": None, "normal": "normal"}.get(cfg["train_groups"], "?")
    if group == "?":
        raise ConfigError("train_groups must be all or normal", file=cfg.source, key="train_groups")
    train_subj = cohort.by_split("train", group)
    val_subj = cohort.by_split("val", group)
    run = _run_dir(cfg)
    run.mkdir(parents=True, exist_ok=True)
    _write_kv(run / "model.config", {
        k: ",".join(map(str, v)) if isinstance(v, tuple) else v for k, v in mcfg.to_dict().items()
    })
    _write_kv(run / "training.manifest", {s.subject_id: s.group for s in train_subj + val_subj})
    loss_cfg = LossConfig(cfg["alpha"], cfg["weight_mode"], cfg["cap"])
    (run / "loss.txt").write_text(loss_cfg.describe() + "\n", encoding="utf-8")
    state = train(
        model,
        [s.to_batch() for s in train_subj],
        [s.to_batch() for s in val_subj],
        epochs=cfg["epochs"],
        optimizer_cfg=OptimizerConfig(lr=cfg["lr"], accumulate=cfg["accumulate"]),
        loss_cfg=loss_cfg,
        aug_cfg=AugmentationConfig(cfg["p_substitute"], cfg["aug_seed"]),
        run_dir=cfg["results_dir"],
        run_id=cfg["run_id"],
    )
    print(f"trained {mcfg.preset or mcfg.variant} ({model.n_parameters()} parameters) for {state.epoch} epochs; "
          f"best val {state.best_val:.6g} at epoch {state.best_epoch} -> {run}")


def cmd_evaluate(cfg: RunConfig, args, results: Results) -> None:
    cohort = _cohort(cfg, results)
    model, groups = _load_trained(cfg, results)
    test = cohort.by_split("test")
    overlap = sorted(set(groups) & {s.subject_id for s in test})
    if overlap:
        raise ManifestError(f"test subjects were used in training: {overlap[:5]}")
    protocols = PROTOCOLS if cfg["protocol"] == "all" else (cfg["protocol"],)
    if any(p not in PROTOCOLS for p in protocols):
        raise ConfigError(f"protocol must be all or one of {PROTOCOLS}", file=cfg.source, key="protocol")
    metrics = results.metrics()
    name = model.config.preset or model.config.variant
    rows = []
    candidates = [(name, model)] + ([("copy_reference", CopyReference())] if cfg["baseline"] else [])
    for label, m in candidates:
        res = {}
        for p in protocols:
            res[p] = run_protocol(p, m, test)
            suffix = "" if m is model else f"_{label}"
            res[p].to_csv(metrics / f"{p}{suffix}.csv")
            print(f"{label:15s} {p:13s} n={res[p].n_subjects:3d} median x100 {100 * res[p].median:.4f} "
                  f"MAD x100 {100 * res[p].mad:.4f}")
        n_params = m.n_parameters() if hasattr(m, "n_parameters") else 0
        rows.append(summary_row(label, n_params, res))
    write_summary(metrics / "summary.csv", rows)


def cmd_anomaly(cfg: RunConfig, args, results: Results) -> None:
    cohort = _cohort(cfg, results)
    model, groups = _load_trained(cfg, results)
    progressors = [s for s in cohort.subjects if s.group == "progressor" and s.subject_id not in groups]
    check_training_manifest(groups, progressors)
    res = run_anomaly(model, progressors, groups, out_dir=results.root / "heatmaps",
                      min_month=cfg["anomaly_min_month"], template=cohort.template, inputs=cfg["anomaly_inputs"])
    res.to_csv(results.metrics() / "anomaly.csv")
    print(f"anomaly: {len(res.ratios)} progressors, {100 * res.fraction_above(1.5):.1f}% with inside/outside "
          f"error ratio >= 1.5; {len(res.heatmaps)} heatmaps")


def cmd_gradcheck(cfg: RunConfig, args, results: Results) -> None:
    checks = run_all(cfg["gradcheck_seed"])
    with open(results.metrics() / "gradcheck.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["check", "relative_error", "tolerance", "passed"])
        for c in checks:
            w.writerow([c.name, f"{c.error:.3e}", f"{c.tolerance:g}", int(c.passed)])
    failed = [c.name for c in checks if not c.passed]
    print(f"gradcheck: {len(checks) - len(failed)}/{len(checks)} passed")
    if failed:
        raise CommandFailed(f"gradient checks failed: {','.join(failed)}")


COMMANDS = {
    "generate-cohort": cmd_generate_cohort,
    "build-hierarchy": cmd_build_hierarchy,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "anomaly": cmd_anomaly,
    "gradcheck": cmd_gradcheck,
}

# convenience flags that map onto config keys
FLAG_KEYS = ("results_dir", "cohort_dir", "run_id", "preset", "epochs", "protocol", "hierarchy_path")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="transformesh", description="Longitudinal mesh prediction experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        for key in FLAG_KEYS:
            p.add_argument("--" + key.replace("_", "-"), dest=key)
        if name == "build-hierarchy":
            p.add_argument("--rebuild-hierarchy", action="store_true", help="ignore the cached hierarchy")
    return parser


def _error_line(exc: BaseException) -> str:
    kind = type(exc).__name__
    file = getattr(exc, "file", None) or getattr(exc, "filename", None) or "-"
    key = getattr(exc, "key", None) or "-"
    msg = exc.strerror if isinstance(exc, OSError) and exc.strerror else str(exc)
    return f"error: kind={kind} file={json.dumps(str(file))} key={key} msg={json.dumps(msg)}"


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    overrides = list(args.set)
    for key in FLAG_KEYS:
        value = getattr(args, key)
        if value is not None:
            overrides.append(f"{key}={value}")
    try:
        cfg = load_config(args.config, overrides)
        results = Results(cfg, args.command)
        COMMANDS[args.command](cfg, args, results)
        results.close()
    except ConfigError as exc:
        print(_error_line(exc), file=sys.stderr)
        return 2
    except (TransforMeshError, OSError) as exc:
        print(_error_line(exc), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
