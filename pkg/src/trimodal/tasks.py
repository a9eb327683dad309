"""Unified masked-diffusion objective, optimizer step and staged curriculum."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import diffarray as da
from .corruption import BRAIN, IMAGE, TEXT, TASKS, Corrupted, TaskSpec, corrupt_for_task, get_task
from .denoiser import Denoiser
from .errors import ConfigError, NumericalError
from .nn import AdamW, lr_at
from .schedule import T_MIN, loss_weight, sample_training_time

STAGE_ORDER = ("stage1.1", "stage1.2", "stage2")
TRAINABLE_FILTERS = ("new-modules-only", "all-unfrozen")
LR_POLICIES = ("constant", "cosine")


@dataclass
class CurriculumStage:
    name: str
    tasks: dict
    steps: int
    lr: float = 1e-3
    lr_policy: str = "constant"
    warmup: int = 0
    trainable: str = "all-unfrozen"
    batch_size: int = 32

    def validate(self) -> None:
        if self.name not in STAGE_ORDER:
            raise ConfigError(f"unknown stage {self.name!r}")
        if not self.tasks:
            raise ConfigError(f"{self.name}: no tasks")
        for t, r in self.tasks.items():
            get_task(t)
            if not r > 0:
                raise ConfigError(f"{self.name}: mixing ratio for {t} must be positive")
        if self.steps < 0 or self.batch_size < 1 or self.warmup < 0:
            raise ConfigError(f"{self.name}: steps/batch/warmup out of range")
        if self.lr_policy not in LR_POLICIES:
            raise ConfigError(f"{self.name}: lr policy must be one of {LR_POLICIES}")
        if self.trainable not in TRAINABLE_FILTERS:
            raise ConfigError(f"{self.name}: trainable filter must be one of {TRAINABLE_FILTERS}")

    def task_probs(self) -> tuple[list[str], np.ndarray]:
        names = [get_task(t).name for t in self.tasks]
        r = np.array([float(v) for v in self.tasks.values()])
        return names, r / r.sum()


def validate_curriculum(stages: list[CurriculumStage]) -> None:
    last = -1
    for s in stages:
        s.validate()
        pos = STAGE_ORDER.index(s.name)
        if pos <= last:
            raise ConfigError(f"stage {s.name} is out of order (expected {' -> '.join(STAGE_ORDER)})")
        last = pos


def default_curriculum(steps=(1500, 2500, 800), lr: float = 1e-3, batch_size: int = 32) -> list[CurriculumStage]:
    """Three-stage plan with the published task allocation and mixing ratios."""
    return [
        CurriculumStage("stage1.1", {"I&T->B": 1, "B->I&T": 1}, steps[0], lr, "constant", 50, "all-unfrozen", batch_size),
        CurriculumStage(
            "stage1.2",
            {"I&T->B": 1, "I->B": 2, "T->B": 2, "B->I&T": 1, "B->I": 2, "B->T": 2},
            steps[1], lr, "constant", 50, "all-unfrozen", batch_size,
        ),
        CurriculumStage("stage2", {"I&T->B": 1, "B->I&T": 1, "BQA": 2}, steps[2], lr, "cosine", 0, "all-unfrozen", batch_size),
    ]


def sample_task(stage: CurriculumStage, rng: np.random.Generator) -> TaskSpec:
    names, probs = stage.task_probs()
    return TASKS[names[int(rng.choice(len(names), p=probs))]]


@dataclass
class TokenData:
    """Token-level view of a dataset, as consumed by the denoiser."""

    image: np.ndarray
    text: np.ndarray
    qa_text: np.ndarray
    brain: np.ndarray
    concept: np.ndarray
    qa_value: np.ndarray
    answer_span: tuple
    split: np.ndarray

    @classmethod
    def build(cls, ds, tokenizer) -> "TokenData":
        return cls(ds.image, ds.text, ds.qa_text, tokenizer.tokenize(ds.brain), ds.concept, ds.qa_value,
                   tuple(ds.config.answer_span), ds.split)

    def indices(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.split == ("train", "val", "test").index(split))

    def batch(self, task: TaskSpec, idx) -> dict:
        text = self.qa_text if task.text_layout == "qa" else self.text
        return {IMAGE: self.image[idx], TEXT: text[idx], BRAIN: self.brain[idx]}


def unified_loss(logits: dict, clean: dict, corrupted: Corrupted, t: float) -> da.Tensor:
    """Sum over target streams of the t-weighted masked cross-entropy.

    Each stream is averaged over its masked positions; condition and excluded
    streams contribute nothing.
    """
    task = corrupted.task
    if not task.target_streams:
        raise ConfigError(f"task {task.name} has no target modality")
    w = loss_weight(t)
    total = None
    for m in task.target_streams:
        term = da.masked_cross_entropy(logits[m], clean[m], corrupted.masks[m], w)
        total = term if total is None else total + term
    return total


@dataclass
class StepResult:
    loss: float
    task: str
    t: float
    step: int


class Trainer:
    """Owns the denoiser, its optimizer and the training RNG stream."""

    def __init__(self, model: Denoiser, data: TokenData, seed: int = 0, weight_decay: float = 1e-2,
                 t_min: float = T_MIN, grad_clip: float | None = 1.0):
        self.model = model
        self.data = data
        self.seed = seed
        self.t_min = t_min
        self.grad_clip = grad_clip
        self.opt = AdamW(weight_decay=weight_decay)
        self.rng = np.random.default_rng(np.random.SeedSequence([seed, 41]))
        self.global_step = 0
        self.stage_index = 0
        self.stage_step = 0
        self.train_idx = data.indices("train")

    def trainable_names(self, stage: CurriculumStage) -> list[str] | None:
        if stage.trainable == "new-modules-only":
            return self.model.new_module_names()
        return None

    def _clip(self) -> None:
        if not self.grad_clip:
            return
        grads = [p.grad for _, p in self.model.params.items() if p.grad is not None]
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
        if norm > self.grad_clip:
            scale = self.grad_clip / norm
            for g in grads:
                g *= scale

    def train_step(self, stage: CurriculumStage) -> StepResult:
        model, rng = self.model, self.rng
        task = sample_task(stage, rng)
        idx = rng.choice(self.train_idx, size=min(stage.batch_size, len(self.train_idx)), replace=False)
        t = sample_training_time(rng, self.t_min)
        clean = self.data.batch(task, idx)
        corrupted = corrupt_for_task(clean, model.cfg.vocab, task, t, rng, self.data.answer_span)
        model.params.zero_grad()
        logits = model.forward(corrupted.tokens, t, task)
        loss = unified_loss(logits, clean, corrupted, t)
        value = float(loss.data)
        if not math.isfinite(value):
            raise NumericalError(f"non-finite loss: task={task.name} t={t:.6f} seed={self.seed} step={self.global_step}")
        loss.backward()
        self._clip()
        lr = lr_at(self.stage_step, stage.lr, stage.steps, stage.warmup, stage.lr_policy)
        self.opt.step(model.params, lr=lr, names=self.trainable_names(stage))
        self.global_step += 1
        self.stage_step += 1
        return StepResult(value, task.name, t, self.global_step)

    # -- persistence helpers ------------------------------------------
    def state(self) -> dict:
        return {
            "global_step": self.global_step,
            "stage_index": self.stage_index,
            "stage_step": self.stage_step,
            "rng": self.rng.bit_generator.state,
            "seed": self.seed,
        }

    def load_state(self, meta: dict) -> None:
        self.global_step = int(meta["global_step"])
        self.stage_index = int(meta["stage_index"])
        self.stage_step = int(meta["stage_step"])
        self.rng.bit_generator.state = meta["rng"]


@dataclass
class StageReport:
    name: str
    steps: int
    losses: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)


def run_curriculum(
    trainer: Trainer,
    stages: list[CurriculumStage],
    *,
    stop_after: str | None = None,
    max_steps: int | None = None,
    on_step: Callable[[Trainer, CurriculumStage, StepResult], None] | None = None,
    on_stage_end: Callable[[Trainer, CurriculumStage], dict | None] | None = None,
) -> list[StageReport]:
    """Run the stages in order, resuming from ``trainer.stage_index/stage_step``.

    ``stop_after`` ends the run after the named stage; ``max_steps`` pauses after
    that many steps in this call (for checkpoint/resume).  ``on_stage_end`` may
    return a metrics dict which is stored in the stage report.
    """
    validate_curriculum(stages)
    reports = []
    budget = max_steps
    while trainer.stage_index < len(stages):
        stage = stages[trainer.stage_index]
        report = StageReport(stage.name, stage.steps)
        while trainer.stage_step < stage.steps:
            if budget is not None and budget <= 0:
                reports.append(report)
                return reports
            res = trainer.train_step(stage)
            report.losses.append((res.step, res.task, res.t, res.loss))
            if on_step is not None:
                on_step(trainer, stage, res)
            if budget is not None:
                budget -= 1
        if on_stage_end is not None:
            report.metrics = on_stage_end(trainer, stage) or {}
        reports.append(report)
        trainer.stage_index += 1
        trainer.stage_step = 0
        if stop_after is not None and stage.name == stop_after:
            break
    return reports


def stage_to_dict(stage: CurriculumStage) -> dict:
    return asdict(stage)
