"""INI run configuration with sections [data], [model], [train], [semi] and [phantom].

Unknown sections or keys are rejected, and every problem is reported at once.
Relative paths in [data] resolve against the config file's directory.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ValidationError


@dataclass
class DataConfig:
    registry: str = "registry.txt"
    labeled: tuple[str, ...] = ()
    unlabeled: tuple[str, ...] = ()
    eval: str = ""


@dataclass
class ModelSection:
    depth: int = 3
    width: int = 16
    size: int = 96
    feature_dropout: float = 0.5
    norm: str = "batch"
    resize: int = 0
    crop: int = 0


@dataclass
class TrainConfig:
    epochs: int = 60
    lr: float = 0.0005
    lr_decay: float = 0.99
    lr_step: int = 40
    batch_labeled: int = 8
    batch_unlabeled: int = 8
    # 0 means one pass over all labeled items
    steps_per_epoch: int = 0
    seed: int = 0
    rmsprop_alpha: float = 0.99
    rmsprop_eps: float = 1e-8
    checkpoint_every: int = 10
    cycle: str = "step"
    # random flip/rot90 of labeled image-label pairs, same family as the weak view
    augment_labeled: bool = True

    def validate(self) -> list[str]:
        errs = []
        if self.lr <= 0:
            errs.append(f"train.lr must be > 0, got {self.lr}")
        if self.epochs < 1:
            errs.append(f"train.epochs must be >= 1, got {self.epochs}")
        if self.batch_labeled < 1:
            errs.append(f"train.batch_labeled must be >= 1, got {self.batch_labeled}")
        if self.batch_unlabeled < 1:
            errs.append(f"train.batch_unlabeled must be >= 1, got {self.batch_unlabeled}")
        if self.lr_step < 1:
            errs.append(f"train.lr_step must be >= 1, got {self.lr_step}")
        if not 0 < self.lr_decay <= 1:
            errs.append(f"train.lr_decay must lie in (0, 1], got {self.lr_decay}")
        if self.steps_per_epoch < 0:
            errs.append(f"train.steps_per_epoch must be >= 0, got {self.steps_per_epoch}")
        if self.checkpoint_every < 1:
            errs.append(f"train.checkpoint_every must be >= 1, got {self.checkpoint_every}")
        if self.cycle not in ("step", "epoch"):
            errs.append(f"train.cycle must be step|epoch, got {self.cycle!r}")
        return errs


@dataclass
class SemiConfig:
    tau: float = 0.95
    p_jitter: float = 0.8
    p_gray: float = 0.2
    p_blur: float = 0.2
    p_cutmix: float = 0.5
    # epochs of supervised-only training before the unlabeled streams switch on
    warmup_epochs: int = 0

    def validate(self) -> list[str]:
        errs = []
        if not 0.0 <= self.tau <= 1.0:
            errs.append(f"semi.tau must lie in [0, 1], got {self.tau}")
        for name in ("p_jitter", "p_gray", "p_blur", "p_cutmix"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                errs.append(f"semi.{name} must lie in [0, 1], got {v}")
        return errs


@dataclass
class PhantomSection:
    size: int = 96
    seed: int = 0
    classes: tuple[str, ...] = ("liver", "kidney", "spleen")
    labeled_per_dataset: int = 32
    unlabeled: int = 96
    eval: int = 32
    noise_std: float = 0.06


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    semi: SemiConfig = field(default_factory=SemiConfig)
    phantom: PhantomSection = field(default_factory=PhantomSection)
    base_dir: Path = field(default_factory=Path.cwd)
    text: str = ""

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def hash(self) -> str:
        return config_hash(self.text or dump_config(self))


SECTIONS = {"data": DataConfig, "model": ModelSection, "train": TrainConfig, "semi": SemiConfig, "phantom": PhantomSection}


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def _coerce(raw: str, default):
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(p.strip() for p in raw.split(",") if p.strip())
    return raw.strip()


def parse_config(text: str, base_dir=None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, strict=True)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ValidationError(f"config syntax error: {exc}") from None
    errors = []
    sections = {}
    for name in parser.sections():
        if name not in SECTIONS:
            errors.append(f"unknown section [{name}]")
    for name, cls in SECTIONS.items():
        obj = cls()
        if parser.has_section(name):
            known = {f.name: f for f in dataclasses.fields(cls)}
            for key, raw in parser.items(name):
                if key not in known:
                    errors.append(f"unknown key {name}.{key}")
                    continue
                try:
                    setattr(obj, key, _coerce(raw, getattr(obj, key)))
                except ValueError as exc:
                    errors.append(f"bad value for {name}.{key}: {exc}")
        sections[name] = obj
    errors += sections["train"].validate() + sections["semi"].validate()
    if errors:
        raise ValidationError("invalid config:\n  " + "\n  ".join(errors))
    return RunConfig(**sections, base_dir=Path(base_dir) if base_dir else Path.cwd(), text=text)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    return parse_config(path.read_text(), path.resolve().parent)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for name in SECTIONS:
        lines.append(f"[{name}]")
        for f in dataclasses.fields(getattr(cfg, name)):
            v = getattr(getattr(cfg, name), f.name)
            if isinstance(v, tuple):
                v = ",".join(v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        lines.append("")
    return "\n".join(lines)
