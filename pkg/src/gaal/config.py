"""Flat ``key=value`` experiment configuration with dotted keys.

Example::

    seed=0
    data.noise=5.0
    surgery.epsilon=0.01
    split.fractions=2/3,1/6,1/6
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

from .data import SyntheticSpec, TabularSchema
from .surgery import SurgeryConfig
from .training import BASELINE_MODES, TrainConfig


class ConfigError(ValueError):
    """Invalid configuration; reported before anything is written."""


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _num(s: str) -> float:
    # accepts "0.25" as well as "1/4"
    return float(Fraction(s.strip()))


def _floats(s: str) -> tuple[float, ...]:
    return tuple(_num(p) for p in s.split(",") if p.strip())


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(p) for p in s.split(",") if p.strip())


def _mods(s: str) -> tuple[str, ...]:
    return tuple(p.strip().upper() for p in s.split(",") if p.strip())


def _path(s: str):
    return Path(s.strip()) if s.strip() else None


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: Path = Path("runs")
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)

    data_csv: Path | None = None
    data_schema: Path | None = None
    data_n: int = 3000
    data_classes: int = 4
    data_d_img: int = 64
    data_categorical: tuple[int, ...] = (3, 4, 5)
    data_continuous: int = 5
    data_informativeness_image: float = 0.9
    data_informativeness_tabular: float = 0.6
    data_noise: float = 5.0
    data_latent_dim: int = 8
    data_duplicate: bool = False

    split_fractions: tuple[float, ...] = (2 / 3, 1 / 6, 1 / 6)

    train_epochs: int = 30
    train_batch_size: int = 64
    train_lr_encoder: float = 1e-2
    train_lr_head: float = 1e-2
    train_momentum: float = 0.9
    train_patience: int = 10
    train_baseline: str = "gaal"
    train_order: tuple[str, ...] = ("I", "T")
    train_modalities: tuple[str, ...] = ("I", "T")
    train_tie_init: bool = False

    model_hidden: tuple[int, ...] = (64,)
    model_latent: int = 32

    surgery_epsilon: float = 0.01
    surgery_lambda_image: float = 0.5
    surgery_lambda_tabular: float = 0.5
    surgery_cgs: bool = True
    surgery_ugg: bool = True
    surgery_delta: float = 1e-12

    fusion_weight: float = 0.5

    sweep_epsilon: tuple[float, ...] = (0.0, 0.001, 0.01, 0.05, 0.1)
    sweep_lambda: tuple[float, ...] = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)

    diagnose_bins: int = 20
    checkpoint: Path | None = None

    # -- derived objects ---------------------------------------------------

    def schema(self) -> TabularSchema:
        return TabularSchema(
            categorical=tuple((f"cat_{j}", c) for j, c in enumerate(self.data_categorical)),
            continuous=tuple(f"num_{j}" for j in range(self.data_continuous)),
        )

    def synthetic_spec(self) -> SyntheticSpec:
        schema = self.schema()
        if self.data_duplicate:
            schema = TabularSchema(continuous=tuple(f"num_{j}" for j in range(self.data_d_img)))
        return SyntheticSpec(
            n=self.data_n,
            n_classes=self.data_classes,
            d_img=self.data_d_img,
            schema=schema,
            informativeness_image=self.data_informativeness_image,
            informativeness_tabular=self.data_informativeness_tabular,
            noise=self.data_noise,
            latent_dim=self.data_latent_dim,
            duplicate_modalities=self.data_duplicate,
        )

    def surgery(self, **overrides) -> SurgeryConfig:
        kw = dict(
            epsilon=self.surgery_epsilon,
            lambda_image=self.surgery_lambda_image,
            lambda_tabular=self.surgery_lambda_tabular,
            enable_cgs=self.surgery_cgs,
            enable_ugg=self.surgery_ugg,
            delta=self.surgery_delta,
        )
        kw.update(overrides)
        return SurgeryConfig(**kw)

    def train_config(self, seed: int | None = None, surgery: SurgeryConfig | None = None, **overrides) -> TrainConfig:
        kw = dict(
            epochs=self.train_epochs,
            batch_size=self.train_batch_size,
            lr_encoder=self.train_lr_encoder,
            lr_head=self.train_lr_head,
            momentum=self.train_momentum,
            surgery=surgery if surgery is not None else self.surgery(),
            seed=self.seed if seed is None else seed,
            baseline_mode=self.train_baseline,
            order=self.train_order,
            modalities=self.train_modalities,
            hidden=self.model_hidden,
            latent=self.model_latent,
            patience=self.train_patience,
            fusion_weight=self.fusion_weight,
            tie_init=self.train_tie_init or self.data_duplicate,
        )
        kw.update(overrides)
        return TrainConfig(**kw)

    def validate(self, need_checkpoint: bool = False) -> "ExperimentConfig":
        try:
            if self.seed < 0 or any(s < 0 for s in self.seeds):
                raise ValueError("seeds must be non-negative")
            if not self.seeds:
                raise ValueError("seeds list must not be empty")
            if self.data_csv is None:
                self.synthetic_spec().validate()
            else:
                for p in (self.data_csv, self.data_schema):
                    if p is None or not Path(p).is_file():
                        raise ValueError(f"dataset file not found: {p} (set data.csv and data.schema)")
            if len(self.split_fractions) != 3 or abs(sum(self.split_fractions) - 1) > 1e-9 or min(self.split_fractions) < 0:
                raise ValueError(f"split.fractions must be three non-negative values summing to 1, got {self.split_fractions}")
            if self.split_fractions[0] == 0:
                raise ValueError("the training split must be non-empty")
            self.train_config()
            if self.diagnose_bins < 1:
                raise ValueError("diagnose.bins must be >= 1")
            if need_checkpoint:
                ckpt = self.checkpoint_path()
                if not ckpt.is_file():
                    raise ValueError(f"checkpoint not found: {ckpt}")
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def checkpoint_path(self) -> Path:
        return Path(self.checkpoint) if self.checkpoint else Path(self.out) / "checkpoint.bin"


# dotted key -> (attribute, parser)
KEYS = {
    "seed": ("seed", int),
    "out": ("out", Path),
    "seeds": ("seeds", _ints),
    "checkpoint": ("checkpoint", _path),
    "data.csv": ("data_csv", _path),
    "data.schema": ("data_schema", _path),
    "data.n": ("data_n", int),
    "data.classes": ("data_classes", int),
    "data.d_img": ("data_d_img", int),
    "data.categorical": ("data_categorical", _ints),
    "data.continuous": ("data_continuous", int),
    "data.informativeness_image": ("data_informativeness_image", _num),
    "data.informativeness_tabular": ("data_informativeness_tabular", _num),
    "data.noise": ("data_noise", _num),
    "data.latent_dim": ("data_latent_dim", int),
    "data.duplicate": ("data_duplicate", _bool),
    "split.fractions": ("split_fractions", _floats),
    "train.epochs": ("train_epochs", int),
    "train.batch_size": ("train_batch_size", int),
    "train.lr_encoder": ("train_lr_encoder", _num),
    "train.lr_head": ("train_lr_head", _num),
    "train.momentum": ("train_momentum", _num),
    "train.patience": ("train_patience", int),
    "train.baseline": ("train_baseline", str),
    "train.order": ("train_order", _mods),
    "train.modalities": ("train_modalities", _mods),
    "train.tie_init": ("train_tie_init", _bool),
    "model.hidden": ("model_hidden", _ints),
    "model.latent": ("model_latent", int),
    "surgery.epsilon": ("surgery_epsilon", _num),
    "surgery.lambda_image": ("surgery_lambda_image", _num),
    "surgery.lambda_tabular": ("surgery_lambda_tabular", _num),
    "surgery.cgs": ("surgery_cgs", _bool),
    "surgery.ugg": ("surgery_ugg", _bool),
    "surgery.delta": ("surgery_delta", _num),
    "fusion.weight": ("fusion_weight", _num),
    "sweep.epsilon": ("sweep_epsilon", _floats),
    "sweep.lambda": ("sweep_lambda", _floats),
    "diagnose.bins": ("diagnose_bins", int),
}


def parse_pairs(lines, source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key = key.strip()
        if key not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = value.strip()
    return out


def apply(cfg: ExperimentConfig, pairs: dict[str, str]) -> ExperimentConfig:
    updates = {}
    for key, value in pairs.items():
        attr, parse = KEYS[key]
        try:
            updates[attr] = parse(value)
        except (ValueError, ZeroDivisionError) as exc:
            raise ConfigError(f"bad value for {key}: {value!r} ({exc})") from None
    if updates.get("train_baseline", cfg.train_baseline) not in BASELINE_MODES:
        raise ConfigError(f"train.baseline must be one of {BASELINE_MODES}")
    return dataclasses.replace(cfg, **updates)


def load_config(path=None, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        cfg = apply(cfg, parse_pairs(p.read_text(encoding="utf-8").splitlines(), str(p)))
    if overrides:
        cfg = apply(cfg, overrides)
    return cfg


def dump_config(cfg: ExperimentConfig) -> str:
    """Render every documented key; the output parses back to the same config."""

    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, tuple):
            return ",".join(fmt(x) for x in v)
        if v is None:
            return ""
        if isinstance(v, float):
            return repr(v)
        return str(v)

    return "".join(f"{k}={fmt(getattr(cfg, attr))}\n" for k, (attr, _) in KEYS.items())
