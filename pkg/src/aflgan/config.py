"""Experiment configuration files.

A config is a small YAML document with up to three sections, each mirroring
the corresponding dataclass field-for-field:

    train:        # TrainConfig fields (phase and seed come from the caller)
      loss_kind: wgan_gp
      batch_size: 64
    loop:         # LoopConfig fields
      alpha_global: 0.2
      iterations: 1
    experiment:   # evaluation-harness fields
      n_eval: 10000
      width: 64

Unknown sections or keys are rejected by name; a typo never silently
becomes a default.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

import yaml

from .feedback import LoopConfig
from .training import TrainConfig
from .evaluation import ToyExperimentConfig

__all__ = ["ConfigError", "RunConfig", "load_config", "parse_config"]


class ConfigError(Exception):
    pass


_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)} - {"phase", "seed"}
_LOOP_KEYS = {f.name for f in dataclasses.fields(LoopConfig)}
_EXPERIMENT_KEYS = {"n_eval", "width", "variance_multipliers"}
_SECTIONS = {"train": _TRAIN_KEYS, "loop": _LOOP_KEYS,
             "experiment": _EXPERIMENT_KEYS}


@dataclasses.dataclass
class RunConfig:
    train: dict = dataclasses.field(default_factory=dict)
    loop: dict = dataclasses.field(default_factory=dict)
    experiment: dict = dataclasses.field(default_factory=dict)

    def train_config(self, phase: int, seed: int) -> TrainConfig:
        try:
            return TrainConfig(phase=phase, seed=seed, **self.train)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"train section: {exc}") from exc

    def loop_config(self) -> LoopConfig:
        try:
            return LoopConfig(**self.loop)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"loop section: {exc}") from exc

    def toy_config(self, seeds: tuple) -> ToyExperimentConfig:
        """Evaluation-harness view: train/loop fields plus experiment
        extras, with the seed list supplied by the caller."""
        kwargs = dict(self.experiment)
        for key in ("iterations", "batch_size", "loss_kind",
                    "feedback_variant", "gp_lambda", "alpha_train"):
            if key in self.train:
                kwargs[key] = self.train[key]
        if "alpha_global" in self.loop:
            kwargs["alpha"] = self.loop["alpha_global"]
        if "iterations" in self.loop:
            kwargs["iterations_test"] = self.loop["iterations"]
        if "variance_multipliers" in kwargs:
            kwargs["variance_multipliers"] = tuple(kwargs["variance_multipliers"])
        try:
            return ToyExperimentConfig(seeds=tuple(seeds), **kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"experiment section: {exc}") from exc


def parse_config(text: str) -> RunConfig:
    doc = yaml.safe_load(text)
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a mapping")
    for section in doc:
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section {section!r}; "
                              f"expected one of {sorted(_SECTIONS)}")
        body = doc[section] or {}
        if not isinstance(body, dict):
            raise ConfigError(f"section {section!r} must be a mapping")
        for key in body:
            if key not in _SECTIONS[section]:
                raise ConfigError(
                    f"unknown key {key!r} in section {section!r}; "
                    f"expected one of {sorted(_SECTIONS[section])}")
    return RunConfig(train=dict(doc.get("train") or {}),
                     loop=dict(doc.get("loop") or {}),
                     experiment=dict(doc.get("experiment") or {}))


def load_config(path) -> RunConfig:
    text = Path(path).read_text()
    try:
        return parse_config(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from exc
