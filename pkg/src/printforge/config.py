"""Run configuration: sectioned UTF-8 key=value files mapped onto dataclasses.

Every command serializes its RunConfig verbatim into the output directory so
any emitted artifact can be regenerated from config + seeds alone.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class CorpusConfig:
    size: int = 200            # total images
    impressions: int = 3       # per identity
    resolution: int = 32       # training resolution
    render_size: int = 256     # procedural render resolution

    @property
    def n_identities(self) -> int:
        return -(-self.size // self.impressions)


@dataclass
class TrainConfig:
    steps: int = 3000
    lr: float = 1e-4
    batch: int = 4             # small batch keeps the smoke run CPU-friendly
    T: int = 400
    schedule: str = "cosine"
    drop_prob: float = 0.1
    lora_rank: int = 8
    style_weight: float = 1.0
    guidance: float = 3.0
    base_channels: int = 32
    mode: str = "full"         # or "adapters"
    warmup: int = 100
    log_every: int = 1
    resume: str = ""           # checkpoint path to resume from


@dataclass
class GenerateConfig:
    ids: int = 10
    impressions: int = 15
    stage1: str = "procedural"     # or "diffusion"
    sampler: str = "deterministic"  # or "ancestral"
    steps_used: int = 50
    guidance: float = 3.0
    style_weight: float = 1.0
    style_source: str = "corpus:clean"  # corpus:<style> | reference:<path>
    acquisition_mix: str = "rolled,slap,swipe,contactless,latent"
    quality_mix: str = "low,average,high"


@dataclass
class EvalConfig:
    duplicate_threshold: float = 0.35
    leakage_threshold: float = 0.231
    far: str = "0.01,0.001"
    checkpoints: str = "1000,2000,5000,10000"


@dataclass
class RunConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    generate: GenerateConfig = field(default_factory=GenerateConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    corpus_dir: str = "corpus"
    checkpoint: str = "checkpoint.gprnt"

    def to_text(self) -> str:
        lines = []
        for section in ("corpus", "train", "generate", "eval"):
            lines.append(f"[{section}]")
            for f in dataclasses.fields(getattr(self, section)):
                lines.append(f"{f.name} = {getattr(getattr(self, section), f.name)}")
            lines.append("")
        lines.append("[run]")
        for name in ("seed", "corpus_dir", "checkpoint"):
            lines.append(f"{name} = {getattr(self, name)}")
        return "\n".join(lines) + "\n"


def _coerce(value: str, target):
    kind = type(target)
    try:
        if kind is bool:
            return value.strip().lower() in ("1", "true", "yes")
        return kind(value)
    except ValueError as e:
        raise ConfigError(f"cannot parse {value!r} as {kind.__name__}") from e


def load_config(path=None) -> RunConfig:
    cfg = RunConfig()
    if path is None:
        return cfg
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    parser.optionxform = str  # keep key case so e.g. train.T survives
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except (configparser.Error, UnicodeDecodeError) as e:
        raise ConfigError(f"malformed config: {e}") from e

    sections = {"corpus": cfg.corpus, "train": cfg.train,
                "generate": cfg.generate, "eval": cfg.eval}
    for section in parser.sections():
        if section == "run":
            for key, value in parser.items("run"):
                if key not in ("seed", "corpus_dir", "checkpoint"):
                    raise ConfigError(f"unknown key [run] {key}")
                setattr(cfg, key, _coerce(value, getattr(cfg, key)))
            continue
        if section not in sections:
            raise ConfigError(f"unknown section [{section}]")
        target = sections[section]
        known = {f.name for f in dataclasses.fields(target)}
        for key, value in parser.items(section):
            if key not in known:
                raise ConfigError(f"unknown key [{section}] {key}")
            setattr(target, key, _coerce(value, getattr(target, key)))
    validate_config(cfg)
    return cfg


def validate_config(cfg: RunConfig):
    if cfg.train.mode not in ("full", "adapters"):
        raise ConfigError(f"train.mode must be full|adapters, got {cfg.train.mode!r}")
    if cfg.train.schedule not in ("cosine", "linear"):
        raise ConfigError(f"train.schedule must be cosine|linear")
    if cfg.generate.stage1 not in ("procedural", "diffusion"):
        raise ConfigError("generate.stage1 must be procedural|diffusion")
    if cfg.generate.sampler not in ("deterministic", "ancestral"):
        raise ConfigError("generate.sampler must be deterministic|ancestral")
    src = cfg.generate.style_source
    if not (src.startswith("corpus:") or src.startswith("reference:")):
        raise ConfigError("generate.style_source must be corpus:<style> or reference:<path>")
    for fld, lo in (("steps", 1), ("batch", 1), ("T", 50)):
        if getattr(cfg.train, fld) < lo:
            raise ConfigError(f"train.{fld} must be >= {lo}")
    if not (0.0 <= cfg.train.drop_prob <= 1.0):
        raise ConfigError("train.drop_prob must lie in [0, 1]")
    if cfg.corpus.size < cfg.corpus.impressions:
        raise ConfigError("corpus.size must be >= corpus.impressions")


def paper_scale_warning(cfg: RunConfig) -> str | None:
    """Large configs are accepted but carry an explicit budget warning."""
    if cfg.train.steps > 50_000 or cfg.corpus.size > 10_000:
        return (f"config requests {cfg.train.steps} steps on a "
                f"{cfg.corpus.size}-image corpus; this is far beyond the "
                "desk-scale budget and may run for days on CPU")
    return None
