"""Model-level evaluation: generate with the sampler, then score with ``metrics``."""

from __future__ import annotations

import numpy as np

from . import metrics
from .corruption import BRAIN, IMAGE, TEXT, TASKS
from .denoiser import Denoiser
from .sampler import denoise_loop
from .tasks import TokenData
from .tokenizer import BrainTokenizer


def generate(model: Denoiser, data: TokenData, task_name: str, idx, steps: int = 12,
             rng: np.random.Generator | None = None, decode_rule: str = "argmax-final") -> dict:
    """Fill the task's target streams for samples ``idx``; condition streams come from ``data``."""
    task = TASKS[task_name]
    rng = rng if rng is not None else np.random.default_rng(0)
    tokens = data.batch(task, idx)
    tokens = {m: v.copy() for m, v in tokens.items()}
    for m in task.target_streams:
        if task.text_layout == "qa" and m == TEXT:
            a, b = data.answer_span
            tokens[m][:, a:b] = model.mask_id(m)
        else:
            tokens[m][...] = model.mask_id(m)
    for m in task.excluded:
        tokens[m][...] = model.mask_id(m)
    return denoise_loop(tokens, task, model.predict, steps, rng, model.cfg.vocab, decode_rule, data.answer_span)


def decoding_retrieval(model, data: TokenData, split: str = "test", task_name: str = "B->I",
                       steps: int = 12, seed: int = 0) -> float:
    """Top-1 concept retrieval of generated image (or text) sequences against the split's true sequences."""
    idx = data.indices(split)
    out = generate(model, data, task_name, idx, steps, np.random.default_rng(seed))
    stream = IMAGE if IMAGE in TASKS[task_name].target_streams else TEXT
    gallery = data.image[idx] if stream == IMAGE else data.text[idx]
    return metrics.concept_retrieval_top1(out[stream], gallery, data.concept[idx], data.concept[idx])


def encoding_scores(model, tokenizer: BrainTokenizer, data: TokenData, true_brain: np.ndarray,
                    split: str = "test", task_name: str = "I&T->B", steps: int = 12, seed: int = 0) -> dict:
    """gPCC / gMSE / gRSA of brain vectors decoded from generated brain tokens."""
    idx = data.indices(split)
    out = generate(model, data, task_name, idx, steps, np.random.default_rng(seed))
    b_hat = tokenizer.decode_indices(out[BRAIN])
    truth = true_brain[idx]
    return {
        "pcc": metrics.mean_pcc(b_hat, truth),
        "mse": metrics.mse(b_hat, truth),
        "rsa": metrics.rsa(metrics.rdm(b_hat), metrics.rdm(truth)),
    }


def bqa_accuracy(model, data: TokenData, split: str = "test", steps: int = 12, seed: int = 0) -> float:
    """Fraction of answers whose first token is the correct attribute value."""
    idx = data.indices(split)
    out = generate(model, data, "BQA", idx, steps, np.random.default_rng(seed))
    a, _ = data.answer_span
    expected = data.qa_text[idx, a]
    return float(np.mean(out[TEXT][:, a] == expected))
