"""Flat ``key = value`` run configuration with typed defaults and overrides."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple:
    return tuple(int(x) for x in text.split(",") if x.strip())


# key -> (parser, default)
SCHEMA = {
    # cohort
    "cohort_dir": (str, "cohort"),
    "n_subjects": (int, 200),
    "fraction_progressors": (float, 0.3),
    "cohort_seed": (int, 42),
    "noise_fraction": (float, 0.005),
    # hierarchy
    "hierarchy_path": (str, "hierarchy.bin"),
    "factors": (_ints, (4, 4)),
    "spiral_length": (int, 9),
    # model
    "preset": (str, "ttm"),
    "scale": (str, "desk"),
    "width": (int, 0),  # 0 keeps the preset's width
    "heads": (int, 0),
    "channels": (_ints, (16, 32)),
    "final_norm": (_bool, True),
    "stop_grad_reference": (_bool, False),
    "model_seed": (int, 0),
    # training
    "epochs": (int, 30),
    "lr": (float, 1e-3),
    "accumulate": (int, 1),
    "alpha": (float, 1e-4),
    "weight_mode": (str, "exp_capped"),
    "cap": (int, 4),
    "p_substitute": (float, 0.15),
    "aug_seed": (int, 0),
    "train_groups": (str, "all"),  # all | normal
    # evaluation / outputs
    "results_dir": (str, "results"),
    "run_id": (str, "run"),
    "protocol": (str, "all"),
    "baseline": (_bool, True),  # add the copy-reference row to the summary
    "anomaly_min_month": (int, 24),
    "anomaly_inputs": (str, "sequence"),
    "gradcheck_seed": (int, 0),
}


@dataclass
class RunConfig:
    values: dict
    source: str | None = None

    def __getitem__(self, key):
        return self.values[key]

    def echo(self) -> str:
        lines = []
        for k in SCHEMA:
            v = self.values[k]
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"


def _parse_value(key: str, raw: str, source: str | None):
    if key not in SCHEMA:
        raise ConfigError(f"unknown key {key!r}", file=source, key=key)
    parser = SCHEMA[key][0]
    try:
        return parser(raw.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value {raw.strip()!r}: {exc}", file=source, key=key) from None


def parse_config_text(text: str, source: str | None = None) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'", file=source)
        key, raw = (s.strip() for s in line.split("=", 1))
        out[key] = _parse_value(key, raw, source)
    return out


def load_config(path=None, overrides=()) -> RunConfig:
    """Defaults, then the file at ``path``, then ``key=value`` overrides."""
    values = {k: default for k, (_, default) in SCHEMA.items()}
    source = None
    if path is not None:
        source = str(path)
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc.strerror}", file=source) from None
        values.update(parse_config_text(text, source))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value", file="<command line>")
        key, raw = item.split("=", 1)
        values[key.strip()] = _parse_value(key.strip(), raw, "<command line>")
    return RunConfig(values, source)
