"""Pipeline configuration as flat dotted keys.

Config files are JSON; keys may be written flat (``"aug.hflip_prob": 0.5``)
or nested (``{"aug": {"hflip_prob": 0.5}}``). Precedence, lowest first:
built-in defaults, config file, ``--set key=value``, dedicated CLI flags.
"""
from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any, Mapping

from datspect.augment import AugmentationConfig
from datspect.labels import Label
from datspect.model import StepDecaySchedule, TrainConfig
from datspect.phantom import PhantomParams

DATA_ROOT_ENV = "DATSPECT_DATA_ROOT"

DEFAULTS: dict[str, Any] = {
    "paths.data_root": ".",
    "synth.n_control": 210,
    "synth.n_pd": 449,
    "phantom.noise_sigma": 5.0,
    "phantom.control_uptake": 100.0,
    "phantom.pd_uptake_factor": 0.4,
    "phantom.asymmetry_factor": 0.8,
    "phantom.seed": 0,
    "preprocess.z0": 40,
    "preprocess.axis": "axial",
    "aug.width_shift": 0.1,
    "aug.height_shift": 0.1,
    "aug.brightness_lo": 0.8,
    "aug.brightness_hi": 1.2,
    "aug.hflip_prob": 0.5,
    "train.epochs": 500,
    "train.batch_size": 16,
    "train.seed": 0,
    "train.backbone": "small",
    "train.backbone_weights": None,
    "train.backbone_mode": "fine-tune",
    "train.head_units": 1024,
    "train.dropout": 0.5,
    "train.beta1": 0.9,
    "train.beta2": 0.999,
    "train.adam_eps": 1e-7,
    "train.bce_eps": 1e-7,
    "train.threshold": 0.5,
    "schedule.initial_lr": 1e-3,
    "schedule.final_lr": 1e-6,
    "schedule.drop_factor": 0.1,
    "schedule.drop_period": 125,
    "split.k": 10,
    "split.seed": 0,
    "split.test_frac": 0.2,
    "split.test_control": None,
    "split.test_pd": None,
    "crossval.workers": 1,
    "report.plots": True,
    "report.format": "png",
}


class ConfigError(ValueError):
    pass


def flatten(d: Mapping, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, Mapping):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


class PipelineConfig:
    def __init__(self, values: Mapping[str, Any] | None = None):
        self.values = dict(DEFAULTS)
        env_root = os.environ.get(DATA_ROOT_ENV)
        if env_root:
            self.values["paths.data_root"] = env_root
        if values:
            self.update(values)

    @classmethod
    def load(cls, path: Path | None = None, overrides: Mapping[str, Any] | None = None) -> "PipelineConfig":
        cfg = cls()
        if path is not None:
            try:
                raw = json.loads(Path(path).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from None
            if not isinstance(raw, Mapping):
                raise ConfigError(f"{path}: top level must be an object")
            cfg.update(flatten(raw))
        if overrides:
            cfg.update(overrides)
        return cfg

    def update(self, values: Mapping[str, Any]) -> None:
        for k, v in values.items():
            if k not in DEFAULTS:
                raise ConfigError(f"unknown config key {k!r}")
            self.values[k] = v

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def as_dict(self) -> dict[str, Any]:
        return dict(sorted(self.values.items()))

    def dump(self, path: Path) -> None:
        Path(path).write_text(json.dumps(self.as_dict(), indent=1) + "\n")

    def resolve(self, path: str | Path) -> Path:
        """Resolve an input path against the data root."""
        p = Path(path)
        return p if p.is_absolute() else Path(self["paths.data_root"]) / p

    # -- typed views -------------------------------------------------------

    def _build(self, fn, **kwargs):
        try:
            return fn(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def phantom(self) -> PhantomParams:
        v = self.values
        return self._build(
            PhantomParams,
            noise_sigma=float(v["phantom.noise_sigma"]),
            control_uptake=float(v["phantom.control_uptake"]),
            pd_uptake_factor=float(v["phantom.pd_uptake_factor"]),
            asymmetry_factor=float(v["phantom.asymmetry_factor"]),
            rng_seed=int(v["phantom.seed"]),
        )

    def augmentation(self) -> AugmentationConfig:
        v = self.values
        return self._build(
            AugmentationConfig,
            width_shift_frac=float(v["aug.width_shift"]),
            height_shift_frac=float(v["aug.height_shift"]),
            brightness_range=(float(v["aug.brightness_lo"]), float(v["aug.brightness_hi"])),
            hflip_prob=float(v["aug.hflip_prob"]),
        )

    def train(self) -> TrainConfig:
        v = self.values
        return self._build(
            TrainConfig,
            epochs=int(v["train.epochs"]),
            batch_size=int(v["train.batch_size"]),
            beta1=float(v["train.beta1"]),
            beta2=float(v["train.beta2"]),
            adam_eps=float(v["train.adam_eps"]),
            bce_eps=float(v["train.bce_eps"]),
            seed=int(v["train.seed"]),
            backbone=str(v["train.backbone"]),
            backbone_weights=v["train.backbone_weights"],
            backbone_mode=str(v["train.backbone_mode"]),
            head_units=int(v["train.head_units"]),
            dropout=float(v["train.dropout"]),
            threshold=float(v["train.threshold"]),
        )

    def schedule(self) -> StepDecaySchedule:
        v = self.values
        return self._build(
            StepDecaySchedule,
            initial_lr=float(v["schedule.initial_lr"]),
            final_lr=float(v["schedule.final_lr"]),
            drop_factor=float(v["schedule.drop_factor"]),
            drop_period=int(v["schedule.drop_period"]),
        )

    def holdout_counts(self) -> dict[Label, int] | None:
        c, p = self["split.test_control"], self["split.test_pd"]
        if c is None and p is None:
            return None
        if c is None or p is None:
            raise ConfigError("split.test_control and split.test_pd must be given together")
        return {Label.CONTROL: int(c), Label.PD: int(p)}

    def validate(self) -> None:
        self.phantom()
        self.augmentation()
        self.train()
        self.schedule()
        self.holdout_counts()
        if int(self["split.k"]) < 2:
            raise ConfigError("split.k must be >= 2")
        if not 0 < float(self["split.test_frac"]) < 1:
            raise ConfigError("split.test_frac must lie in (0, 1)")
        if self["preprocess.axis"] not in ("axial", "coronal", "sagittal"):
            raise ConfigError(f"bad preprocess.axis {self['preprocess.axis']!r}")
