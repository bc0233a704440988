"""Training loop, checkpoint round-trip and evaluation helpers."""
from __future__ import annotations

import csv
import math
import sys
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from . import rng as rngmod
from .config import RunConfig
from .data import Pair
from .errors import ConfigError
from .metrics import LossConfig, MetricReport, RandomFeature, composite_loss, format_value
from .model import ModelConfig, init_params, model_forward
from .optim import Adam
from .resample import bicubic_upsample
from .tensor import Tensor, no_grad

CURVE_COLUMNS = ("step", "l1", "perceptual", "total")


class TrainingError(RuntimeError):
    pass


def model_config(cfg: RunConfig) -> ModelConfig:
    return ModelConfig(dim=cfg["model.dim"], heads=cfg["model.heads"], state_dim=cfg["model.state_dim"],
                       scale=cfg["model.scale"], stage_repeats=cfg["model.stage_repeats"],
                       mlp_expand=cfg["model.mlp_expand"], scan_method=cfg["model.scan_method"],
                       seed=cfg["seed"])


def loss_config(cfg: RunConfig) -> LossConfig:
    kind = cfg["loss.perceptual"]
    if kind == "none":
        perceptual = None
    elif kind == "random_feature":
        perceptual = RandomFeature(cfg["loss.perceptual_seed"], cfg["loss.perceptual_layers"])
    else:
        raise ConfigError(f"unknown perceptual term {kind!r}; expected random_feature or none")
    return LossConfig(lam=cfg["loss.lambda"], perceptual=perceptual)


def check_scale(mcfg: ModelConfig, pairs: list[Pair]) -> None:
    for p in pairs:
        if (p.hr.height, p.hr.width) != (mcfg.scale * p.lr.height, mcfg.scale * p.lr.width):
            raise ConfigError(f"pair {p.hr.id}: HR {p.hr.values.shape} is not {mcfg.scale}x LR {p.lr.values.shape}")


@dataclass
class Trainer:
    run: RunConfig
    pairs: list[Pair]
    mcfg: ModelConfig = field(init=False)
    params: dict = field(init=False)
    optimizer: Adam = field(init=False)
    curve: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if not self.pairs:
            raise ConfigError("training needs at least one pair")
        self.mcfg = model_config(self.run)
        self.lcfg = loss_config(self.run)
        check_scale(self.mcfg, self.pairs)
        if self.run["train.batch"] < 1 or self.run["train.steps"] < 0:
            raise ConfigError("train.batch must be >= 1 and train.steps >= 0")
        self.params = init_params(self.mcfg)
        self.optimizer = Adam(lr=self.run["train.lr"], total_steps=self.run["train.steps"])
        self._lr = np.stack([p.lr.values for p in self.pairs])[:, None]
        self._hr = np.stack([p.hr.values for p in self.pairs])[:, None]

    @property
    def step_count(self) -> int:
        return self.optimizer.step_count

    def batch_indices(self, step: int) -> np.ndarray:
        n, b = len(self.pairs), self.run["train.batch"]
        gen = rngmod.derive(self.run["seed"], "batch", step)
        if b <= n:
            return np.sort(gen.choice(n, size=b, replace=False))
        return gen.integers(0, n, size=b)

    def step(self) -> dict:
        step = self.step_count
        idx = self.batch_indices(step)
        Adam.zero_grad(self.params)
        pred = model_forward(self._lr[idx], self.mcfg, self.params)
        total, l1, perc = composite_loss(pred, Tensor(self._hr[idx]), self.lcfg)
        row = {"step": step, "l1": float(l1.data), "perceptual": float(perc.data), "total": float(total.data)}
        if not all(math.isfinite(row[k]) for k in ("l1", "perceptual", "total")):
            raise TrainingError(f"non-finite loss at step {step}: l1={row['l1']}, "
                                f"perceptual={row['perceptual']}, total={row['total']}")
        total.backward()
        self.optimizer.step(self.params)
        self.curve.append(row)
        return row

    def fit(self, steps: int | None = None, log_every: int = 0) -> list[dict]:
        end = self.run["train.steps"] if steps is None else self.step_count + steps
        while self.step_count < end:
            row = self.step()
            if log_every and (row["step"] % log_every == 0 or self.step_count == end):
                print(f"step {row['step']} total {row['total']:.6f} l1 {row['l1']:.6f}", file=sys.stderr)
        return self.curve

    # ------------------------------------------------------------ persistence

    def checkpoint_payload(self) -> tuple[dict, dict]:
        meta = {"format": "mambasr-train", "model": self.mcfg.to_dict(), "run": self.run.resolved(),
                "step": self.step_count}
        tensors = {f"param.{k}": p.data for k, p in self.params.items()}
        tensors.update({f"adam.{k}": v for k, v in self.optimizer.state().items()})
        return meta, tensors

    def save(self, path) -> None:
        checkpoint.save(path, *self.checkpoint_payload())

    def restore(self, path) -> None:
        meta, tensors = checkpoint.load(path)
        if meta.get("model") != self.mcfg.to_dict():
            raise ConfigError(f"checkpoint {path} was written for a different model config")
        params = {k[len("param."):]: v for k, v in tensors.items() if k.startswith("param.")}
        if set(params) != set(self.params):
            raise ConfigError(f"checkpoint {path} does not hold this model's parameters")
        for k, v in params.items():
            self.params[k].data = v.copy()
        self.optimizer.load_state({k[len("adam."):]: v for k, v in tensors.items() if k.startswith("adam.")},
                                  meta["step"])


def write_curve(path, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CURVE_COLUMNS)
        for r in rows:
            writer.writerow([format_value(r[k]) for k in CURVE_COLUMNS])


def read_curve(path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        return [{"step": int(r["step"]), **{k: float(r[k]) for k in CURVE_COLUMNS[1:]}}
                for r in csv.DictReader(fh)]


def load_model(path) -> tuple[ModelConfig, dict]:
    meta, tensors = checkpoint.load(path)
    if "model" not in meta:
        raise ConfigError(f"checkpoint {path} holds no model config")
    mcfg = ModelConfig.from_dict(meta["model"])
    params = {k[len("param."):]: Tensor(v) for k, v in tensors.items() if k.startswith("param.")}
    return mcfg, params


def predict(mcfg: ModelConfig, params: dict, lr_values: np.ndarray) -> np.ndarray:
    with no_grad():
        return model_forward(np.asarray(lr_values)[None, None], mcfg, params).data[0, 0]


def evaluate(mcfg: ModelConfig, params: dict, pairs: list[Pair], proxy: RandomFeature | None = None) -> MetricReport:
    """Per-image metrics for the network and for plain bicubic upsampling."""
    check_scale(mcfg, pairs)
    report = MetricReport()
    for p in pairs:
        image_id = p.hr.id or f"seed-{p.seed}"
        report.add(image_id, "model", predict(mcfg, params, p.lr.values), p.hr.values, 1.0, proxy)
        report.add(image_id, "bicubic", bicubic_upsample(p.lr.values, mcfg.scale), p.hr.values, 1.0, proxy)
    return report
