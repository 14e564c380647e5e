"""Run configuration and the ablation variants."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .augment import AugmentConfig
from .dc_pathway import DcConfig
from .sc_pathway import VatConfig

AUG_MODES = ("weak", "strong", "asymmetric")


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "custom"
    augmentation: str = "asymmetric"
    dc: DcConfig | None = None
    sc: VatConfig | None = None
    epochs: int = 70
    batch_size: int = 4
    g_lr: float = 0.1
    g_momentum: float = 0.9
    g_weight_decay: float = 1e-3
    d_lr: float = 1e-4
    d_weight_decay: float = 1e-4
    lr_milestones: tuple[int, ...] = (40, 60)
    lr_gamma: float = 0.1
    input_shape: tuple[int, int] = (448, 576)
    sigma: float = 5.0  # keypoint target width at input_shape, px
    seed: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.augmentation not in AUG_MODES:
            raise ValueError(f"augmentation must be one of {AUG_MODES}, got {self.augmentation!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        for name in ("g_lr", "d_lr", "lr_gamma"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if any(m >= self.epochs or m <= 0 for m in self.lr_milestones):
            raise ValueError(f"lr milestones {self.lr_milestones} must lie in (0, epochs={self.epochs})")
        if list(self.lr_milestones) != sorted(self.lr_milestones):
            raise ValueError("lr milestones must be increasing")
        h, w = self.input_shape
        if h % 32 or w % 32:
            raise ValueError(f"input_shape {self.input_shape} must be divisible by 32")

    @property
    def alpha(self) -> float:
        return self.sc.alpha if self.sc is not None else 0.0

    @property
    def beta(self) -> float:
        return self.dc.beta if self.dc is not None else 0.0

    @property
    def he_augmentation(self) -> str:
        return "weak" if self.augmentation == "weak" else "strong"

    @property
    def lc_augmentation(self) -> str:
        return "strong" if self.augmentation == "strong" else "weak"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_milestones"] = list(self.lr_milestones)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        base = {}
        if "variant" in d and d["variant"] in VARIANTS:
            base = VARIANTS[d["variant"]].to_dict()
        for key in ("dc", "sc"):
            if key in d and isinstance(d[key], dict) and isinstance(base.get(key), dict):
                d[key] = {**base[key], **d[key]}
        merged = {**base, **d}
        known = {f.name for f in fields(cls)}
        unknown = set(merged) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        merged["dc"] = DcConfig(**merged["dc"]) if merged.get("dc") else None
        merged["sc"] = VatConfig(**merged["sc"]) if merged.get("sc") else None
        merged["augment"] = AugmentConfig.from_dict(merged.get("augment"))
        if "lr_milestones" in merged:
            merged["lr_milestones"] = tuple(merged["lr_milestones"])
        if "input_shape" in merged:
            merged["input_shape"] = tuple(merged["input_shape"])
        return cls(**merged)

    def with_overrides(self, **kw) -> "TrainConfig":
        return replace(self, **kw)


def _variant(name, aug, dc=None, sc=False) -> TrainConfig:
    return TrainConfig(variant=name, augmentation=aug, dc=dc, sc=VatConfig() if sc else None)


VARIANTS: dict[str, TrainConfig] = {
    "1": _variant("1", "weak"),
    "2": _variant("2", "strong"),
    "3": _variant("3", "asymmetric", DcConfig("vanilla_gan", "output")),
    "4": _variant("4", "asymmetric", DcConfig("ls_gan", "feature")),
    "5": _variant("5", "asymmetric", DcConfig("ls_gan", "output")),
    "6": _variant("6", "asymmetric", DcConfig("ls_gan", "feature"), sc=True),
    "7": _variant("7", "asymmetric", DcConfig("ls_gan", "output"), sc=True),
}

VARIANT_LABELS = {
    "1": "W/o", "2": "W/o", "3": "DC", "4": "DC", "5": "DC", "6": "DAC", "7": "DAC",
}


def variant_config(name: str, **overrides) -> TrainConfig:
    if name not in VARIANTS:
        raise KeyError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}")
    for key in ("lr_milestones", "input_shape"):
        if key in overrides:
            overrides[key] = tuple(overrides[key])
    for key, kind in (("dc", DcConfig), ("sc", VatConfig), ("augment", AugmentConfig)):
        if isinstance(overrides.get(key), dict):
            overrides[key] = kind(**overrides[key]) if key != "augment" else kind.from_dict(overrides[key])
    return replace(VARIANTS[name], **overrides)


def load_config(path) -> TrainConfig:
    """Read a YAML (or JSON) run config."""
    text = Path(path).read_text()
    data = yaml.safe_load(text) or {}
    return TrainConfig.from_dict(data)


def save_config(cfg: TrainConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(json.loads(json.dumps(cfg.to_dict())), sort_keys=False))
