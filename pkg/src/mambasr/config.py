"""Flat ``key = value`` run configuration.

Files are UTF-8 text, one assignment per line, ``#`` starts a comment.
Command-line ``--set key=value`` pairs override file values. Unknown keys
are rejected so typos fail loudly.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

from .errors import ConfigError


def _int_list(text: str) -> tuple[int, ...]:
    parts = [p for p in text.replace(",", " ").split() if p]
    if not parts:
        raise ValueError("empty list")
    return tuple(int(p) for p in parts)


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _seed(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2 ** 64:
        raise ValueError("seed must fit in 64 unsigned bits")
    return v


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any
    help: str = ""


KEYS: dict[str, Key] = {
    "seed": Key(_seed, 0, "root seed for every random stream"),
    "model.dim": Key(int, 30, "channel width C"),
    "model.heads": Key(int, 6, "SSM heads m"),
    "model.state_dim": Key(int, 16, "state size S"),
    "model.scale": Key(int, 4, "upsampling factor k"),
    "model.stage_repeats": Key(_int_list, (4, 6, 6, 7), "blocks per stage"),
    "model.mlp_expand": Key(int, 2, "channel MLP expansion"),
    "model.scan_method": Key(str, "auto", "sequential, parallel, compiled or auto"),
    "loss.lambda": Key(float, 4.0, "weight of the L1 term"),
    "loss.perceptual": Key(str, "random_feature", "random_feature or none"),
    "loss.perceptual_seed": Key(int, 0, "seed of the random feature network"),
    "loss.perceptual_layers": Key(int, 3, "strided stages in the feature network"),
    "data.factor_h": Key(int, 4, "row downsampling factor"),
    "data.factor_w": Key(int, 4, "column downsampling factor"),
    "data.size": Key(int, 64, "HR phantom extent"),
    "data.n_train": Key(int, 8, "training pairs"),
    "data.n_test": Key(int, 4, "test pairs"),
    "data.kind": Key(str, "blobs_and_ribbons", "phantom family"),
    "data.dir": Key(str, "", "dataset directory for train and eval"),
    "train.steps": Key(int, 200, "optimizer steps"),
    "train.lr": Key(float, 2e-4, "peak learning rate"),
    "train.batch": Key(int, 4, "pairs per step"),
    "train.log_every": Key(int, 0, "progress lines on stderr every n steps (0 = silent)"),
    "eval.checkpoint": Key(str, "", "checkpoint to evaluate"),
    "bench.lengths": Key(_int_list, (512, 1024, 2048, 4096), "sequence lengths"),
    "bench.reps": Key(int, 10, "timed repetitions per length"),
    "bench.channels": Key(int, 16, "channels of the benchmark input"),
    "bench.state_dim": Key(int, 16, "state size of the benchmark SSM"),
}


@dataclass
class RunConfig:
    values: dict[str, Any] = field(default_factory=dict)

    def __getitem__(self, key: str) -> Any:
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        return self.values.get(key, KEYS[key].default)

    def set(self, key: str, text: str) -> None:
        key = key.strip()
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            self.values[key] = KEYS[key].parse(text.strip())
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from None

    def update(self, assignments) -> None:
        for item in assignments:
            if "=" not in item:
                raise ConfigError(f"expected key=value, got {item!r}")
            k, v = item.split("=", 1)
            self.set(k, v)

    def resolved(self) -> dict[str, Any]:
        """Every known key with its effective value, JSON-friendly."""
        out = {}
        for k in sorted(KEYS):
            v = self[k]
            out[k] = list(v) if isinstance(v, tuple) else v
        return out


def parse_text(text: str, origin: str = "<string>") -> RunConfig:
    cfg = RunConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value'")
        k, v = line.split("=", 1)
        try:
            cfg.set(k, v)
        except ConfigError as exc:
            raise ConfigError(f"{origin}:{lineno}: {exc}") from None
    return cfg


def load(path: str | None, overrides=()) -> RunConfig:
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                cfg = parse_text(fh.read(), path)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    else:
        cfg = RunConfig()
    cfg.update(overrides)
    return cfg
