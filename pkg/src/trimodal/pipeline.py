"""End-to-end building blocks driven by a :class:`~trimodal.config.RunConfig`.

The CLI, the notebooks and the end-to-end tests all go through these
functions, so a given (config, seed) produces the same objects everywhere.
"""

from __future__ import annotations

import numpy as np

from . import evaluation as ev
from . import synthdata
from . import tokenizer as tk
from .config import RunConfig
from .corruption import BRAIN, IMAGE, TEXT, TASKS
from .denoiser import Denoiser
from .tasks import TokenData, Trainer, run_curriculum

DECODE_TASKS = ("B->I", "B->T")
ENCODE_TASKS = ("I&T->B", "I->B", "T->B")


def build_dataset(cfg: RunConfig):
    ds = synthdata.generate(cfg.data, cfg.seed)
    return ds, synthdata.FeatureEncoder(ds.config, cfg.seed)


def fit_predictor(cfg: RunConfig, ds, features) -> tk.FeaturePredictor:
    p = cfg.predictor
    return tk.train_predictor(ds, features, steps=p.steps, batch=p.batch, lr=p.lr, seed=cfg.seed, hidden=p.hidden)


def fit_tokenizer(cfg: RunConfig, ds, features, predictor, log=None) -> tk.BrainTokenizer:
    return tk.train_tokenizer(ds, features, predictor, cfg.tokenizer_config(), cfg.tokenizer_train, cfg.seed, log)


def make_trainer(cfg: RunConfig, data: TokenData) -> Trainer:
    c = cfg.curriculum
    model = Denoiser(cfg.denoiser_config(), cfg.seed)
    return Trainer(model, data, cfg.seed, weight_decay=c.weight_decay, t_min=c.t_min, grad_clip=c.grad_clip)


def stage_metrics(model, tokenizer, data: TokenData, true_brain, cfg: RunConfig, with_bqa: bool) -> dict:
    """Held-out metrics tracked during training, keyed by task."""
    s = cfg.sampling
    out = {}
    for task in DECODE_TASKS:
        out[task] = {"retrieval": ev.decoding_retrieval(model, data, s.split, task, s.steps, cfg.seed)}
    for task in ENCODE_TASKS:
        out[task] = ev.encoding_scores(model, tokenizer, data, true_brain, s.split, task, s.steps, cfg.seed)
    if with_bqa:
        out["BQA"] = {"accuracy": ev.bqa_accuracy(model, data, s.split, s.steps, cfg.seed)}
    return out


def full_eval(model, tokenizer, data: TokenData, ds, features, cfg: RunConfig, steps: int | None = None,
              decode_rule: str | None = None, split: str | None = None) -> list[tuple[str, str, float]]:
    """All evaluation metrics as ``(task, metric, value)`` rows."""
    s = cfg.sampling
    steps = steps or s.steps
    rule = decode_rule or s.decode_rule
    split = split or s.split
    rows = [
        ("tokenizer", "codebook_usage", tk.split_usage(tokenizer, ds, split)),
        ("tokenizer", "brain_image_top1", tk.brain_image_retrieval(tokenizer, ds, features, split)),
    ]
    idx = data.indices(split)
    for name in ("B->I", "B->T", "B->I&T"):
        out = ev.generate(model, data, name, idx, steps, np.random.default_rng(cfg.seed), rule)
        for m, gallery in ((IMAGE, data.image), (TEXT, data.text)):
            if m in TASKS[name].target_streams:
                acc = ev.metrics.concept_retrieval_top1(out[m], gallery[idx], data.concept[idx], data.concept[idx])
                rows.append((name, f"{m}_concept_top1", acc))
    for name in ENCODE_TASKS:
        out = ev.generate(model, data, name, idx, steps, np.random.default_rng(cfg.seed), rule)
        b_hat = tokenizer.decode_indices(out[BRAIN])
        truth = ds.brain[idx]
        rows += [
            (name, "pcc", ev.metrics.mean_pcc(b_hat, truth)),
            (name, "mse", ev.metrics.mse(b_hat, truth)),
            (name, "rsa", ev.metrics.rsa(ev.metrics.rdm(b_hat), ev.metrics.rdm(truth))),
        ]
    out = ev.generate(model, data, "BQA", idx, steps, np.random.default_rng(cfg.seed), rule)
    a, _ = data.answer_span
    rows.append(("BQA", "accuracy", float(np.mean(out[TEXT][:, a] == data.qa_text[idx, a]))))
    return rows


def run_all(cfg: RunConfig, stop_after: str | None = None, on_stage_end=None):
    """Data -> predictor -> tokenizer -> curriculum, in memory.  Returns a dict of everything."""
    ds, fe = build_dataset(cfg)
    pred = fit_predictor(cfg, ds, fe)
    tok = fit_tokenizer(cfg, ds, fe, pred)
    data = TokenData.build(ds, tok)
    trainer = make_trainer(cfg, data)
    reports = run_curriculum(trainer, cfg.stages(), stop_after=stop_after, on_stage_end=on_stage_end)
    return {"dataset": ds, "features": fe, "predictor": pred, "tokenizer": tok, "data": data,
            "trainer": trainer, "reports": reports}
