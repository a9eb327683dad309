"""Run configuration: one YAML tree with an explicit schema version.

Every section maps onto a dataclass.  Unknown keys are errors and so are
missing sections (a config must be complete; ``default_config()`` writes one).
Model sizes that follow from the data (vocabularies, lengths, voxel count) are
derived rather than configured, so they cannot disagree.

Overrides use dotted paths with YAML-parsed values, e.g.
``tokenizer_train.steps=200`` or ``curriculum.stages.0.steps=50``.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .denoiser import DenoiserConfig
from .errors import ConfigError, DomainError
from .synthdata import SynthConfig
from .tasks import CurriculumStage, default_curriculum, validate_curriculum
from .tokenizer import TokenizerConfig, TokenizerTrainConfig

SCHEMA_VERSION = 1
DECODE_RULES = ("sample", "argmax-final")

# tokenizer/denoiser fields derived from the data section
_TOKENIZER_DERIVED = ("n_voxel", "text_vocab", "text_len")


@dataclass
class PredictorSection:
    steps: int = 400
    batch: int = 64
    lr: float = 2e-3
    hidden: int = 128


@dataclass
class DenoiserSection:
    width: int = 64
    n_blocks: int = 2
    n_heads: int = 4
    ffn_mult: int = 4
    time_freqs: int = 8


@dataclass
class CurriculumSection:
    weight_decay: float = 1e-2
    t_min: float = 1e-3
    grad_clip: float = 1.0
    eval_every: int = 0  # 0: evaluate at stage ends only
    stages: list = field(default_factory=lambda: [asdict(s) for s in default_curriculum((1000, 2000, 500))])


@dataclass
class SamplingSection:
    steps: int = 12
    decode_rule: str = "argmax-final"
    split: str = "test"


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    data: SynthConfig = field(default_factory=SynthConfig)
    predictor: PredictorSection = field(default_factory=PredictorSection)
    tokenizer: dict = field(default_factory=lambda: _tokenizer_section(TokenizerConfig()))
    tokenizer_train: TokenizerTrainConfig = field(default_factory=lambda: TokenizerTrainConfig(steps=600))
    denoiser: DenoiserSection = field(default_factory=DenoiserSection)
    curriculum: CurriculumSection = field(default_factory=CurriculumSection)
    sampling: SamplingSection = field(default_factory=SamplingSection)

    # -- derived objects -------------------------------------------------
    def tokenizer_config(self) -> TokenizerConfig:
        d = self.data
        return TokenizerConfig(**self.tokenizer, n_voxel=d.n_voxel, text_vocab=d.text_vocab, text_len=d.text_len)

    def denoiser_config(self) -> DenoiserConfig:
        d, t = self.data, self.tokenizer_config()
        return DenoiserConfig(
            vocab={"image": d.image_vocab, "text": d.text_vocab, "brain": t.codebook_size},
            lengths={"image": d.image_len, "text": d.text_len, "brain": t.n_codes},
            **asdict(self.denoiser),
        )

    def stages(self) -> list[CurriculumStage]:
        return [CurriculumStage(**s) for s in self.curriculum.stages]

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        """Hash of everything except the seed (the run directory adds the seed separately)."""
        d = self.to_dict()
        d.pop("seed")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]

    def validate(self) -> None:
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"schema_version: got {self.schema_version}, expected {SCHEMA_VERSION}")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed: must be a non-negative integer")
        self.data.validate()
        for sec in ("predictor", "tokenizer_train"):
            obj = getattr(self, sec)
            if obj.steps < 0 or obj.batch < 1 or not obj.lr > 0:
                raise ConfigError(f"{sec}: steps must be >= 0, batch >= 1 and lr > 0")
        t = self.tokenizer_config()
        for name in ("n_codes", "code_dim", "codebook_size", "hidden", "embed_dim", "conv_channels", "conv_kernel", "conv_stride"):
            if getattr(t, name) < 1:
                raise ConfigError(f"tokenizer.{name}: must be positive")
        if t.conv_kernel > t.n_voxel:
            raise ConfigError("tokenizer.conv_kernel: larger than data.n_voxel")
        if t.embed_dim != self.data.feature_dim:
            raise ConfigError("tokenizer.embed_dim: must equal data.feature_dim (brain features are aligned to them)")
        if t.commit_grad not in ("none", "encoder"):
            raise ConfigError("tokenizer.commit_grad: must be 'none' or 'encoder'")
        dn = self.denoiser
        if min(dn.width, dn.n_blocks, dn.n_heads, dn.ffn_mult, dn.time_freqs) < 1:
            raise ConfigError("denoiser: sizes must be positive")
        if dn.width % dn.n_heads:
            raise ConfigError("denoiser.width: must be divisible by denoiser.n_heads")
        if not 0 < self.curriculum.t_min < 1:
            raise ConfigError("curriculum.t_min: must lie in (0, 1)")
        try:
            validate_curriculum(self.stages())
        except (ConfigError, DomainError) as e:
            raise ConfigError(f"curriculum.stages: {e}") from None
        s = self.sampling
        if s.steps < 1:
            raise ConfigError("sampling.steps: must be >= 1")
        if s.decode_rule not in DECODE_RULES:
            raise ConfigError(f"sampling.decode_rule: must be one of {DECODE_RULES}")
        if s.split not in ("train", "val", "test"):
            raise ConfigError("sampling.split: must be train, val or test")


def _tokenizer_section(cfg: TokenizerConfig) -> dict:
    return {k: v for k, v in asdict(cfg).items() if k not in _TOKENIZER_DERIVED}


def default_config(seed: int = 0) -> RunConfig:
    return RunConfig(seed=seed)


# -- parsing -------------------------------------------------------------
def _strict(cls, raw, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")
    missing = sorted(names - set(raw))
    if missing:
        raise ConfigError(f"{where}: missing key(s) {missing}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from None


def from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    top = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(raw) - top)
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {unknown}")
    missing = sorted(top - set(raw))
    if missing:
        raise ConfigError(f"missing top-level key(s) {missing}")
    tok = raw["tokenizer"]
    allowed = set(_tokenizer_section(TokenizerConfig()))
    if not isinstance(tok, dict):
        raise ConfigError("tokenizer: expected a mapping")
    if set(tok) - allowed:
        raise ConfigError(f"tokenizer: unknown key(s) {sorted(set(tok) - allowed)}")
    if allowed - set(tok):
        raise ConfigError(f"tokenizer: missing key(s) {sorted(allowed - set(tok))}")
    stages = raw["curriculum"].get("stages") if isinstance(raw["curriculum"], dict) else None
    if not isinstance(stages, list):
        raise ConfigError("curriculum.stages: expected a list")
    for i, s in enumerate(stages):
        _strict(CurriculumStage, s, f"curriculum.stages.{i}")
    cfg = RunConfig(
        schema_version=raw["schema_version"],
        seed=raw["seed"],
        data=_strict(SynthConfig, raw["data"], "data"),
        predictor=_strict(PredictorSection, raw["predictor"], "predictor"),
        tokenizer=dict(tok),
        tokenizer_train=_strict(TokenizerTrainConfig, raw["tokenizer_train"], "tokenizer_train"),
        denoiser=_strict(DenoiserSection, raw["denoiser"], "denoiser"),
        curriculum=_strict(CurriculumSection, raw["curriculum"], "curriculum"),
        sampling=_strict(SamplingSection, raw["sampling"], "sampling"),
    )
    cfg.validate()
    return cfg


def apply_overrides(raw: dict, overrides) -> dict:
    """Return a copy of ``raw`` with ``a.b.c=value`` overrides applied (values parsed as YAML)."""
    out = copy.deepcopy(raw)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected key=value")
        path, value = item.split("=", 1)
        keys = path.strip().split(".")
        node = out
        for k in keys[:-1]:
            node = _child(node, k, path)
        last = keys[-1]
        if isinstance(node, list):
            last = _index(node, last, path)
        elif last not in node:
            raise ConfigError(f"override {path}: unknown key {last!r}")
        node[last] = yaml.safe_load(value)
    return out


def _index(node: list, key: str, path: str) -> int:
    try:
        i = int(key)
        node[i]
    except (ValueError, IndexError):
        raise ConfigError(f"override {path}: bad list index {key!r}") from None
    return i


def _child(node, key, path):
    if isinstance(node, list):
        return node[_index(node, key, path)]
    if not isinstance(node, dict) or key not in node:
        raise ConfigError(f"override {path}: unknown key {key!r}")
    return node[key]


def load(path=None, overrides=None, seed: int | None = None) -> RunConfig:
    if path is None:
        raw = default_config().to_dict()
    else:
        try:
            raw = yaml.safe_load(Path(path).read_text())
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: not valid YAML ({e})") from None
        except OSError as e:
            raise ConfigError(f"{path}: cannot read ({e.strerror})") from None
    raw = apply_overrides(raw, overrides)
    if seed is not None:
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a mapping")
        raw["seed"] = seed
    return from_dict(raw)


def dump(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
