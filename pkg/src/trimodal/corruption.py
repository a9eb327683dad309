"""Absorbing-state corruption, task definitions and attention masks.

Token streams are keyed by modality name (``"image"``, ``"text"``,
``"brain"``).  A modality with vocabulary size ``V`` reserves id ``V`` as its
MASK token.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, DomainError
from .schedule import mask_ratio

IMAGE, TEXT, BRAIN = "image", "text", "brain"
MODALITIES = (IMAGE, TEXT, BRAIN)
# text split used by question answering
TEXT_QUESTION, TEXT_ANSWER = "text_question", "text_answer"
_STREAM = {IMAGE: IMAGE, TEXT: TEXT, BRAIN: BRAIN, TEXT_QUESTION: TEXT, TEXT_ANSWER: TEXT}


@dataclass(frozen=True)
class TokenSequence:
    modality: str
    tokens: np.ndarray
    vocab_size: int

    def __post_init__(self):
        toks = np.asarray(self.tokens)
        if toks.size and (toks.min() < 0 or toks.max() > self.vocab_size):
            raise DomainError(f"{self.modality} token ids must lie in [0, {self.vocab_size}]")

    @property
    def mask_id(self) -> int:
        return self.vocab_size

    def __len__(self) -> int:
        return int(np.asarray(self.tokens).shape[-1])


@dataclass(frozen=True)
class TaskSpec:
    name: str
    condition: frozenset
    target: frozenset
    text_layout: str = "whole"

    def __post_init__(self):
        if self.condition & self.target:
            raise DomainError(f"task {self.name}: condition and target overlap")
        if not (self.condition | self.target):
            raise DomainError(f"task {self.name}: empty task")
        if self.text_layout not in ("whole", "qa"):
            raise DomainError(f"unknown text layout {self.text_layout!r}")
        if (TEXT_ANSWER in self.target) != (self.text_layout == "qa"):
            raise DomainError(f"task {self.name}: answer target requires the qa layout")

    @property
    def target_streams(self) -> tuple[str, ...]:
        names = {_STREAM[m] for m in self.target}
        return tuple(m for m in MODALITIES if m in names)

    @property
    def condition_streams(self) -> tuple[str, ...]:
        names = {_STREAM[m] for m in self.condition}
        return tuple(m for m in MODALITIES if m in names)

    @property
    def active(self) -> tuple[str, ...]:
        names = {_STREAM[m] for m in self.condition | self.target}
        return tuple(m for m in MODALITIES if m in names)

    @property
    def excluded(self) -> tuple[str, ...]:
        act = set(self.active)
        return tuple(m for m in MODALITIES if m not in act)


def _task(name, cond, tgt, layout="whole"):
    return TaskSpec(name, frozenset(cond), frozenset(tgt), layout)


TASKS: dict[str, TaskSpec] = {
    t.name: t
    for t in (
        _task("I->B", {IMAGE}, {BRAIN}),
        _task("T->B", {TEXT}, {BRAIN}),
        _task("I&T->B", {IMAGE, TEXT}, {BRAIN}),
        _task("B->I", {BRAIN}, {IMAGE}),
        _task("B->T", {BRAIN}, {TEXT}),
        _task("B->I&T", {BRAIN}, {IMAGE, TEXT}),
        _task("BQA", {BRAIN, TEXT_QUESTION}, {TEXT_ANSWER}, "qa"),
    )
}


def get_task(name: str) -> TaskSpec:
    key = name.replace("→", "->").replace("+", "&").replace(" ", "")
    try:
        return TASKS[key]
    except KeyError:
        raise DomainError(f"unknown task {name!r}; known: {sorted(TASKS)}") from None


def corrupt_sequence(tokens, gamma: float, rng: np.random.Generator, mask_id: int):
    """Replace each position by ``mask_id`` independently with probability ``gamma``.

    Returns ``(corrupted, mask)`` where ``mask`` marks replaced positions.
    """
    if not (0.0 <= gamma <= 1.0):
        raise DomainError(f"mask ratio {gamma} outside [0, 1]")
    tokens = np.asarray(tokens)
    if tokens.size and tokens.max() >= mask_id:
        raise DomainError("input already contains MASK tokens")
    mask = rng.random(tokens.shape) < gamma
    return np.where(mask, mask_id, tokens), mask


@dataclass
class Corrupted:
    """Per-modality corrupted tokens with their loss masks."""

    tokens: dict
    masks: dict
    t: float
    task: TaskSpec
    excluded: tuple = field(default_factory=tuple)


def corrupt_for_task(
    tokens: dict,
    vocab: dict,
    task: TaskSpec,
    t: float,
    rng: np.random.Generator,
    answer_span: tuple[int, int] | None = None,
) -> Corrupted:
    """Corrupt every target stream with the shared ratio ``1 - alpha(t)``.

    ``tokens`` maps modality to an id array (any leading batch shape).  Condition
    streams pass through clean.  For the qa layout only the answer span of the
    text stream is corrupted; ``answer_span`` gives its ``[start, stop)`` offsets.
    """
    gamma = mask_ratio(t)
    for m in task.active:
        if m not in tokens:
            raise DataError(f"task {task.name} needs the {m} stream")
    out_tokens, masks = {}, {}
    for m in MODALITIES:
        if m not in tokens:
            continue
        toks = np.asarray(tokens[m])
        if m in task.target_streams:
            if task.text_layout == "qa" and m == TEXT:
                if answer_span is None:
                    raise DataError("qa layout needs answer span offsets")
                a, b = answer_span
                corrupted = toks.copy()
                mask = np.zeros(toks.shape, dtype=bool)
                corrupted[..., a:b], mask[..., a:b] = corrupt_sequence(toks[..., a:b], gamma, rng, vocab[m])
            else:
                corrupted, mask = corrupt_sequence(toks, gamma, rng, vocab[m])
        else:
            corrupted, mask = toks.copy(), np.zeros(toks.shape, dtype=bool)
        out_tokens[m], masks[m] = corrupted, mask
    return Corrupted(out_tokens, masks, t, task, task.excluded)


def build_attention_mask(task: TaskSpec, lengths: dict) -> np.ndarray:
    """Boolean attention matrix over the concatenated image|text|brain axis."""
    active = np.concatenate(
        [np.full(lengths[m], m in task.active, dtype=bool) for m in MODALITIES if m in lengths]
    )
    return active[:, None] & active[None, :]
