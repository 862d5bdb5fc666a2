"""Run configuration.

A config file is JSON with the ``TrainConfig`` field names as keys. Nested
``weights`` holds ``LossWeights`` fields and ``dataset`` describes the data
source::

    {"model": "proto+cla+cia+pa", "seed": 0, "epochs": 18, "lr": 1e-4,
     "weights": {"cla": 1.0, "pa": 0.1},
     "dataset": {"source": "synthetic", "generator": {"seed": 0}}}

``dataset.source`` is ``synthetic`` (``generator`` holds GeneratorSpec
fields), ``dir`` (``path`` to a saved dataset) or ``cub`` (``path``,
optional ``crop_to_bbox`` and ``image_size``).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from ..backbone import FeatureExtractorConfig
from ..losses import LossWeights

MODEL_KINDS = ("baseline", "vanilla", "proto")
MODULES = ("cla", "cia", "pa")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    model: str = "proto"
    modules: tuple[str, ...] = ()
    name: str = ""
    dataset: dict = field(default_factory=lambda: {"source": "synthetic", "generator": {}})
    epochs: int = 18
    warmup_epochs: int = 5
    lr: float = 1e-4
    head_lr: float | None = None
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 16
    num_prototypes: int = 64
    dim: int = 64
    levels: int = 2
    top_n: int = 10
    similarity: str = "cosine"
    widths: tuple[int, ...] = (32, 64)
    strides: tuple[int, ...] = (2, 2, 2)
    convs_per_stage: int = 2
    nonlinearity: str = "silu"
    weights: LossWeights = field(default_factory=LossWeights)
    localization: str = "grad-cam++"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.model not in MODEL_KINDS:
            raise ConfigError(f"model must be one of {MODEL_KINDS}, got {self.model!r}")
        bad = [m for m in self.modules if m not in MODULES]
        if bad:
            raise ConfigError(f"unknown modules {bad}; choose from {MODULES}")
        if self.model != "proto" and "pa" in self.modules:
            raise ConfigError("the pa module needs prototype concept maps (model 'proto')")
        if self.epochs < 0 or self.warmup_epochs < 0:
            raise ConfigError("epochs and warmup_epochs must be >= 0")
        if self.warmup_epochs > self.epochs:
            raise ConfigError(f"warmup_epochs={self.warmup_epochs} exceeds epochs={self.epochs}")
        for name in ("lr", "batch_size", "num_prototypes", "dim", "levels", "top_n"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.head_lr is not None and not self.head_lr > 0:
            raise ConfigError("head_lr must be positive")
        if self.top_n > self.num_prototypes:
            raise ConfigError(f"top_n={self.top_n} exceeds num_prototypes={self.num_prototypes}")
        if self.localization not in ("grad-cam", "grad-cam++"):
            raise ConfigError(f"localization must be grad-cam or grad-cam++, got {self.localization!r}")

    @property
    def kind(self) -> str:
        return "+".join((self.model, *self.modules))

    @property
    def label(self) -> str:
        return self.name or self.kind

    def backbone_config(self) -> FeatureExtractorConfig:
        return FeatureExtractorConfig(
            widths=(*self.widths, self.dim),
            strides=self.strides,
            convs_per_stage=self.convs_per_stage,
            nonlinearity=self.nonlinearity,
            seed=self.seed,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modules"] = list(self.modules)
        d["betas"] = list(self.betas)
        d["widths"] = list(self.widths)
        d["strides"] = list(self.strides)
        d["kind"] = self.kind
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        kind = d.pop("kind", None)
        if "modules" not in d and kind:
            d.update(parse_kind(kind))
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        if "model" in d and "+" in str(d["model"]):
            d.update(parse_kind(d["model"]))
        for key in ("modules", "betas", "widths", "strides"):
            if key in d:
                d[key] = tuple(d[key])
        if "weights" in d and isinstance(d["weights"], dict):
            d["weights"] = LossWeights(**d["weights"])
        return cls(**d)

    def with_overrides(self, **kw) -> TrainConfig:
        if "model" in kw and "+" in str(kw["model"]):
            kw.update(parse_kind(kw.pop("model")))
        return replace(self, **kw)


def parse_kind(kind: str) -> dict:
    """``"proto+cla+pa"`` -> ``{"model": "proto", "modules": ("cla", "pa")}``."""
    model, *mods = kind.split("+")
    return {"model": model, "modules": tuple(mods)}


def load_config(path: str | Path) -> TrainConfig:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return TrainConfig.from_dict(d)
