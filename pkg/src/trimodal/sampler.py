"""Reverse denoising: the per-step resampling law and the T-step loop."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .corruption import TEXT, TaskSpec
from .errors import DomainError, NumericalError
from .schedule import alpha

DECODE_RULES = ("sample", "argmax-final")

Predictor = Callable[[dict, float, TaskSpec], dict]


def reverse_step_distribution(xhat0, alpha_s: float, alpha_t: float) -> np.ndarray:
    """Categorical law of a masked token after one reverse step.

    ``xhat0`` has ``V + 1`` entries, the last being MASK (which must carry no
    mass).  The result mixes MASK and ``xhat0`` with weights
    ``(1 - alpha_s)`` and ``(alpha_s - alpha_t)``, normalised by ``1 - alpha_t``.
    Works row-wise on a 2-D array as well.
    """
    if not (0.0 <= alpha_t < alpha_s <= 1.0):
        raise DomainError(f"need 0 <= alpha_t < alpha_s <= 1, got alpha_s={alpha_s}, alpha_t={alpha_t}")
    x = np.asarray(xhat0, dtype=np.float64)
    if np.any(np.abs(x.sum(axis=-1) - 1.0) > 1e-9) or np.any(x[..., -1] != 0.0) or np.any(x < 0):
        raise DomainError("xhat0 must be a distribution with zero MASK mass")
    denom = 1.0 - alpha_t
    p = x * ((alpha_s - alpha_t) / denom)
    p[..., -1] = (1.0 - alpha_s) / denom
    return p


def _append_mask_column(probs: np.ndarray) -> np.ndarray:
    return np.concatenate([probs, np.zeros(probs.shape[:-1] + (1,))], axis=-1)


def _sample_rows(p: np.ndarray, u: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(p, axis=-1)
    idx = (u[:, None] >= cdf).sum(axis=-1)
    return np.minimum(idx, p.shape[-1] - 1)


def denoise_loop(
    tokens: dict,
    task: TaskSpec,
    predictor: Predictor,
    steps: int,
    rng: np.random.Generator,
    vocab: dict,
    decode_rule: str = "sample",
    answer_span: tuple[int, int] | None = None,
    trace: list | None = None,
) -> dict:
    """Run ``steps`` reverse steps from t=1 down to t=1/steps.

    ``tokens`` holds every stream the task uses; target positions start as
    MASK.  ``predictor(tokens, t, task)`` returns per-stream probability arrays
    over the real vocabulary (no MASK column).  Revealed tokens are never
    changed again.  If ``trace`` is a list, a copy of the target streams is
    appended after every step.
    """
    if steps < 1:
        raise DomainError("steps must be >= 1")
    if decode_rule not in DECODE_RULES:
        raise DomainError(f"unknown decode rule {decode_rule!r}")
    cur = {m: np.array(v, copy=True) for m, v in tokens.items()}
    regions = {}
    for m in task.target_streams:
        region = np.ones(cur[m].shape, dtype=bool)
        if task.text_layout == "qa" and m == TEXT:
            a, b = answer_span
            region[...] = False
            region[..., a:b] = True
        regions[m] = region

    for i in range(steps):
        t = (steps - i) / steps
        s = (steps - i - 1) / steps
        a_t, a_s = alpha(t), alpha(s)
        probs = predictor(cur, t, task)
        final = i == steps - 1
        for m in task.target_streams:
            pm = np.asarray(probs[m], dtype=np.float64)
            if not np.all(np.isfinite(pm)):
                raise NumericalError(f"predictor produced non-finite output at step {i} (t={t:.4f})")
            mask_id = vocab[m]
            pending = regions[m] & (cur[m] == mask_id)
            if not pending.any():
                continue
            rows = pm[pending]
            rows = rows / rows.sum(axis=-1, keepdims=True)
            if final and decode_rule == "argmax-final":
                new = np.argmax(rows, axis=-1)
            elif a_s == 1.0:
                # final step: the MASK column has zero mass
                new = _sample_rows(rows, rng.random(rows.shape[0]))
            else:
                law = reverse_step_distribution(_append_mask_column(rows), a_s, a_t)
                new = _sample_rows(law, rng.random(rows.shape[0]))
            cur[m][pending] = new
        if trace is not None:
            trace.append({m: cur[m].copy() for m in task.target_streams})
    return cur
