"""Run configuration: one YAML file drives every pipeline stage.

The resolved config is echoed verbatim into each artifact for provenance.
Presets bundle hyperparameter sets; `desk` is the single-workstation recipe
and `smoke` a minutes-scale variant used by CI and the acceptance suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from pathlib import Path

import yaml

from .encoder import EncoderConfig
from .diffusion import DiffusionConfig
from .errors import ConfigError
from .parts import VALID_PART_SIZES


@dataclass
class DatasetConfig:
    source: str = ""  # <family>/<font>/<CHAR>.png tree
    image_size: int = 128
    fractions: tuple = (0.714, 0.143, 0.143)
    split_seed: int = 42


@dataclass
class PartsConfig:
    k: int = 26
    part_sizes: tuple = (32, 64)
    seed: int = 0


@dataclass
class EvalConfig:
    ks: tuple = (1, 13, 26)
    sample_steps: int = 50
    seed: int = 777
    local_patch: int = 32
    classifier_epochs: int = 25
    subset_seed: int = 99


@dataclass
class RunConfig:
    run_dir: str = "runs/default"
    preset: str = "desk"
    strict_determinism: bool = False
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    parts: PartsConfig = field(default_factory=PartsConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        for s in self.parts.part_sizes:
            if s not in VALID_PART_SIZES:
                raise ConfigError(f"part size {s} not in {VALID_PART_SIZES}")
            if s > self.dataset.image_size:
                raise ConfigError(
                    f"part size {s} exceeds image size {self.dataset.image_size}"
                )
        if self.diffusion.image_size != self.dataset.image_size:
            raise ConfigError("diffusion.image_size must equal dataset.image_size")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dataset"]["fractions"] = list(self.dataset.fractions)
        d["parts"]["part_sizes"] = list(self.parts.part_sizes)
        d["eval"]["ks"] = list(self.eval.ks)
        d["diffusion"]["mults"] = list(self.diffusion.mults)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        data = dict(data)
        try:
            kwargs = {
                "run_dir": data.get("run_dir", "runs/default"),
                "preset": data.get("preset", "custom"),
                "strict_determinism": bool(data.get("strict_determinism", False)),
            }
            if "dataset" in data:
                ds = dict(data["dataset"])
                if "fractions" in ds:
                    ds["fractions"] = tuple(ds["fractions"])
                kwargs["dataset"] = DatasetConfig(**ds)
            if "parts" in data:
                ps = dict(data["parts"])
                if "part_sizes" in ps:
                    ps["part_sizes"] = tuple(ps["part_sizes"])
                kwargs["parts"] = PartsConfig(**ps)
            if "encoder" in data:
                kwargs["encoder"] = EncoderConfig(**data["encoder"])
            if "diffusion" in data:
                df = dict(data["diffusion"])
                if "mults" in df:
                    df["mults"] = tuple(df["mults"])
                kwargs["diffusion"] = DiffusionConfig(**df)
            if "eval" in data:
                ev = dict(data["eval"])
                if "ks" in ev:
                    ev["ks"] = tuple(ev["ks"])
                kwargs["eval"] = EvalConfig(**ev)
            return cls(**kwargs)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"bad config: {e}") from e

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = yaml.safe_load(path.read_text())
        except yaml.YAMLError as e:
            raise ConfigError(f"unparseable config {path}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must be a mapping")
        return cls.from_dict(data)


def _desk() -> RunConfig:
    """50/10/10-font single-workstation recipe at the canonical 128-px canvas."""
    return RunConfig(
        preset="desk",
        dataset=DatasetConfig(image_size=128, fractions=(0.714, 0.143, 0.143)),
        parts=PartsConfig(k=26, part_sizes=(32, 64)),
        encoder=EncoderConfig(
            part_size=32, batch=64, lr=1e-4, max_epochs=200, early_stop_patience=20
        ),
        diffusion=DiffusionConfig(
            timesteps=1000,
            image_size=128,
            base=64,
            mults=(1, 2, 4, 4),
            attn_levels=2,
            lr=1e-4,
            batch=64,
            train_steps=10_000,
            sample_steps=50,
        ),
        eval=EvalConfig(ks=(1, 13, 26), sample_steps=50),
    )


def _paper() -> RunConfig:
    """Corpus-scale hyperparameters (200k iterations, 200 sampling steps)."""
    cfg = _desk()
    cfg.preset = "paper"
    cfg.dataset.fractions = (0.784, 0.110, 0.106)
    cfg.encoder.max_epochs = 100_000
    cfg.encoder.early_stop_patience = 500
    cfg.diffusion.train_steps = 200_000
    cfg.diffusion.sample_steps = 200
    cfg.eval.sample_steps = 200
    return cfg


def _smoke() -> RunConfig:
    """CI-scale recipe: 64-px canvas, slim U-Net, short training.

    Sized for a 2-core CPU runner; the code paths are identical to desk.
    """
    return RunConfig(
        preset="smoke",
        dataset=DatasetConfig(image_size=64, fractions=(0.714, 0.143, 0.143)),
        parts=PartsConfig(k=26, part_sizes=(32, 64)),
        encoder=EncoderConfig(
            part_size=32, batch=64, lr=1e-4, max_epochs=60, early_stop_patience=12
        ),
        diffusion=DiffusionConfig(
            timesteps=1000,
            image_size=64,
            base=16,
            mults=(1, 2, 2),
            attn_levels=1,
            lr=2e-4,
            batch=16,
            train_steps=1500,
            sample_steps=24,
        ),
        eval=EvalConfig(ks=(1, 13, 26), sample_steps=24, classifier_epochs=6),
    )


PRESETS = {"desk": _desk, "paper": _paper, "smoke": _smoke}


def from_preset(name: str, run_dir: str | None = None) -> RunConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    cfg = PRESETS[name]()
    if run_dir is not None:
        cfg.run_dir = str(run_dir)
    return cfg
