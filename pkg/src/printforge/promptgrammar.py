"""Five-factor text condition: formatting, parsing, validation, encoding.

The prompt grammar is deliberately rigid: five closed vocabularies, one
template. Parsing is the exact inverse of formatting (whitespace-tolerant
only), so prompts can round-trip through dataset manifests.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

FACTORS = ("acquisition", "class", "quality", "sensor", "sensing")

TEMPLATE = "a {acquisition} fingerprint image, {cls} pattern, {quality} quality, {sensor}, {sensing}"

# Shortened template used for stage-1 (full rolled pattern) prompts.
STAGE1_TEMPLATE = "a rolled fingerprint image, {cls} pattern, high quality, ink on stock paper"


class UnknownVocabulary(ValueError):
    def __init__(self, factor: str, value: str):
        self.factor = factor
        self.value = value
        super().__init__(f"unknown {factor} value: {value!r}")


class MalformedTemplate(ValueError):
    def __init__(self, position: str, text: str):
        self.position = position
        super().__init__(f"malformed prompt at {position}: {text!r}")


@dataclass(frozen=True)
class Vocabulary:
    """Closed, versioned vocabularies for the five prompt factors."""

    factors: dict  # factor name -> tuple of values

    @staticmethod
    def load(path: Path | None = None) -> "Vocabulary":
        if path is None:
            text = resources.files("printforge.data").joinpath("vocab.txt").read_text("utf-8")
        else:
            text = Path(path).read_text("utf-8")
        factors: dict[str, list[str]] = {}
        current = None
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("[") and line.endswith("]"):
                current = line[1:-1]
                factors[current] = []
            elif current is not None:
                factors[current].append(line)
        missing = [f for f in FACTORS if f not in factors]
        if missing:
            raise ValueError(f"vocabulary file missing sections: {missing}")
        return Vocabulary({k: tuple(v) for k, v in factors.items()})

    def values(self, factor: str) -> tuple:
        return self.factors[factor]

    def index(self, factor: str, value: str) -> int:
        try:
            return self.factors[factor].index(value)
        except ValueError:
            raise UnknownVocabulary(factor, value) from None

    @property
    def checksum(self) -> str:
        blob = "\n".join(f + ":" + "|".join(v) for f, v in sorted(self.factors.items()))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


_DEFAULT_VOCAB = None


def default_vocabulary() -> Vocabulary:
    global _DEFAULT_VOCAB
    if _DEFAULT_VOCAB is None:
        _DEFAULT_VOCAB = Vocabulary.load()
    return _DEFAULT_VOCAB


@dataclass(frozen=True)
class PromptSpec:
    """One value per controllable appearance factor.

    `sensing_omitted` marks crime-scene prompts whose sensing type is left
    out of the formatted string (the sensing field still carries a value so
    encoding stays total).
    """

    acquisition: str
    pattern_class: str
    quality: str
    sensor: str
    sensing: str
    sensing_omitted: bool = False

    def validate(self, vocab: Vocabulary | None = None) -> "PromptSpec":
        vocab = vocab or default_vocabulary()
        for factor, value in zip(FACTORS, self.as_tuple()):
            vocab.index(factor, value)
        return self

    def as_tuple(self) -> tuple:
        return (self.acquisition, self.pattern_class, self.quality, self.sensor, self.sensing)


def format_prompt(spec: PromptSpec, vocab: Vocabulary | None = None) -> str:
    spec.validate(vocab)
    if spec.sensing_omitted:
        return (
            f"a {spec.acquisition} fingerprint image, {spec.pattern_class} pattern, "
            f"{spec.quality} quality, {spec.sensor}"
        )
    return TEMPLATE.format(
        acquisition=spec.acquisition,
        cls=spec.pattern_class,
        quality=spec.quality,
        sensor=spec.sensor,
        sensing=spec.sensing,
    )


def format_stage1_prompt(pattern_class: str, vocab: Vocabulary | None = None) -> str:
    (vocab or default_vocabulary()).index("class", pattern_class)
    return STAGE1_TEMPLATE.format(cls=pattern_class)


def stage1_spec(pattern_class: str) -> PromptSpec:
    """Internal PromptSpec equivalent of the stage-1 template."""
    return PromptSpec("rolled", pattern_class, "high", "ink on stock paper", "FTIR optical")


def parse_prompt(text: str, vocab: Vocabulary | None = None) -> PromptSpec:
    vocab = vocab or default_vocabulary()
    s = text.strip()
    if not s.startswith("a "):
        raise MalformedTemplate("leading article", text)
    parts = [p.strip() for p in s.split(",")]
    if len(parts) not in (4, 5):
        raise MalformedTemplate("field count", text)
    head = parts[0]
    if not head.endswith(" fingerprint image"):
        raise MalformedTemplate("fingerprint image clause", text)
    acquisition = head[len("a "):-len(" fingerprint image")]
    if not parts[1].endswith(" pattern"):
        raise MalformedTemplate("pattern clause", text)
    pattern_class = parts[1][: -len(" pattern")]
    if not parts[2].endswith(" quality"):
        raise MalformedTemplate("quality clause", text)
    quality = parts[2][: -len(" quality")]
    sensor = parts[3]
    if len(parts) == 4:
        # crime-scene form: sensing omitted from the string
        spec = PromptSpec(acquisition, pattern_class, quality, sensor, "FTIR optical",
                          sensing_omitted=True)
    else:
        spec = PromptSpec(acquisition, pattern_class, quality, sensor, parts[4])
    return spec.validate(vocab)


def spec_to_indices(spec: PromptSpec, vocab: Vocabulary | None = None) -> tuple:
    """Per-factor vocabulary indices, the lookup keys for embedding tables."""
    vocab = vocab or default_vocabulary()
    return tuple(vocab.index(f, v) for f, v in zip(FACTORS, spec.as_tuple()))


@dataclass(frozen=True)
class ConditionTokens:
    tokens: np.ndarray  # (5, d)
    vocab_version: str

    def __post_init__(self):
        assert self.tokens.shape[0] == len(FACTORS)


@dataclass
class FactorEmbeddingTable:
    """One embedding row per vocabulary entry, grouped by factor."""

    vocab: Vocabulary
    tables: dict = field(default_factory=dict)  # factor -> (n_values, d) array
    dim: int = 128

    @staticmethod
    def create(vocab: Vocabulary | None = None, dim: int = 128, seed: int = 0) -> "FactorEmbeddingTable":
        vocab = vocab or default_vocabulary()
        rng = np.random.default_rng(seed)
        tables = {
            f: rng.standard_normal((len(vocab.values(f)), dim)).astype(np.float32) / np.sqrt(dim)
            for f in FACTORS
        }
        return FactorEmbeddingTable(vocab, tables, dim)

    def covers(self, vocab: Vocabulary) -> bool:
        return all(self.tables[f].shape[0] == len(vocab.values(f)) for f in FACTORS)


def encode_prompt(spec: PromptSpec | None, table: FactorEmbeddingTable) -> ConditionTokens:
    """Token per factor; `spec=None` is the reserved null (all-zeros) condition."""
    if spec is None:
        tokens = np.zeros((len(FACTORS), table.dim), dtype=np.float32)
        return ConditionTokens(tokens, table.vocab.checksum)
    idx = spec_to_indices(spec, table.vocab)
    tokens = np.stack([table.tables[f][i] for f, i in zip(FACTORS, idx)])
    return ConditionTokens(tokens, table.vocab.checksum)
