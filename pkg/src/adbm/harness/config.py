"""Experiment configuration: an INI-style file plus command-line overrides (flags win)."""
from __future__ import annotations

import configparser
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from ..attacks import NORMS, AttackConfig
from ..sampler import PurifierConfig
from ..training import TrainConfig


@dataclass
class DatasetSpec:
    name: str = "gauss2"
    n: int = 2500
    d: int = 128
    seed: int = 0
    params: dict = field(default_factory=lambda: {"n_robust": 1, "nonrobust_sep": 0.02})


@dataclass
class ScheduleSpec:
    N: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02


def default_classifier() -> TrainConfig:
    return TrainConfig(steps=1500, learning_rate=1e-3, hidden=(64, 64))


def default_diffusion() -> TrainConfig:
    return TrainConfig(steps=10000, learning_rate=1e-3, t_max=200, hidden=(64, 64, 64))


def default_finetune() -> TrainConfig:
    return TrainConfig(steps=15000, learning_rate=1e-3, hidden=(64, 64, 64))


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    classifier: TrainConfig = field(default_factory=default_classifier)
    diffusion: TrainConfig = field(default_factory=default_diffusion)
    finetune: TrainConfig = field(default_factory=default_finetune)
    purifier: PurifierConfig = field(default_factory=PurifierConfig)
    # attack settings shared by all norms; radius/step come from the per-norm defaults
    attack_iters: int = 200
    attack_eot: int = 20
    attack_seed: int = 0
    norms: tuple[str, ...] = NORMS
    scale_budgets: bool = True
    test_size: int = 200
    seeds: tuple[int, ...] = (0,)
    repeats: int = 1
    reverse_sweep: tuple[int, ...] = (1, 2, 5)
    forward_sweep: tuple[int, ...] = (100, 110, 120, 130, 140, 150)
    sweep_iters: int = 50
    sweep_eot: int = 10
    out: str = "runs/default"

    def attack_config(self, norm: str, **over) -> AttackConfig:
        dim = self.dataset.d if self.scale_budgets else None
        base = {"iters": self.attack_iters, "eot_samples": self.attack_eot, "seed": self.attack_seed}
        base.update(over)
        return AttackConfig.default(norm, dim=dim, **base)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("classifier", "diffusion", "finetune"):
            d[key] = getattr(self, key).to_dict()
        return json.loads(json.dumps(d))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        out = cls()
        kw = {}
        if "dataset" in d:
            kw["dataset"] = DatasetSpec(**d.pop("dataset"))
        if "schedule" in d:
            kw["schedule"] = ScheduleSpec(**d.pop("schedule"))
        for key in ("classifier", "diffusion", "finetune"):
            if key in d:
                kw[key] = TrainConfig.from_dict(d.pop(key))
        if "purifier" in d:
            kw["purifier"] = PurifierConfig(**d.pop("purifier"))
        for key, val in d.items():
            kw[key] = tuple(val) if isinstance(val, list) else val
        return replace(out, **kw)


def _coerce(text: str, like):
    """Parse ``text`` into the type of the existing value ``like``."""
    if isinstance(like, bool):
        return text.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    if isinstance(like, tuple):
        items = [s for s in text.replace(",", " ").split() if s]
        if like and isinstance(like[0], int):
            return tuple(int(s) for s in items)
        if like and isinstance(like[0], float):
            return tuple(float(s) for s in items)
        return tuple(items)
    if isinstance(like, dict):
        return json.loads(text)
    if like is None:
        return None if text.strip().lower() in ("", "none") else int(text)
    return text


def _apply(obj, items: dict, where: str):
    names = {f.name for f in fields(obj)}
    kw = {}
    for key, text in items.items():
        key = key.replace("-", "_")
        if key not in names:
            raise KeyError(f"unknown key {key!r} in [{where}]")
        kw[key] = _coerce(text, getattr(obj, key))
    return replace(obj, **kw)


def load_config(path: str | Path | None = None, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Read an INI file with sections named after the fields of ``ExperimentConfig``.

    Scalar fields of the top-level object live in ``[experiment]``.
    """
    cfg = base or ExperimentConfig()
    if path is None:
        return cfg
    cp = configparser.ConfigParser()
    cp.optionxform = str
    if not cp.read(path):
        raise FileNotFoundError(path)
    for section in cp.sections():
        items = dict(cp.items(section))
        if section == "experiment":
            cfg = _apply(cfg, items, section)
        elif section in ("dataset", "schedule", "classifier", "diffusion", "finetune", "purifier"):
            cfg = replace(cfg, **{section: _apply(getattr(cfg, section), items, section)})
        else:
            raise KeyError(f"unknown section [{section}] in {path}")
    return cfg


def override(cfg: ExperimentConfig, pairs: dict) -> ExperimentConfig:
    """Apply ``section.key -> value`` (or top-level ``key -> value``) overrides; None values are skipped."""
    for dotted, val in pairs.items():
        if val is None:
            continue
        text = val if isinstance(val, str) else (" ".join(map(str, val)) if isinstance(val, (list, tuple))
                                                 else str(val))
        if "." in dotted:
            section, key = dotted.split(".", 1)
            cfg = replace(cfg, **{section: _apply(getattr(cfg, section), {key: text}, section)})
        else:
            cfg = _apply(cfg, {dotted: text}, "experiment")
    return cfg
