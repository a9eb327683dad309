"""Tri-modal masked denoiser.

Each modality has its own token embedding (with a frozen MASK row), learned
positions, pre-attention norm and Q/K/V projections.  The projected tokens of
all modalities attend jointly in one sequence (image | text | brain), under
a task-dependent attention mask; the output projection, feed-forward layer
and final norm are shared.  Per-modality heads map back to each vocabulary
(no MASK column), giving logits for the clean tokens.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffarray as da
from .corruption import MODALITIES, TaskSpec, build_attention_mask
from .diffarray import Tensor
from .errors import NumericalError
from .nn import ParamSet, init_linear, init_norm


@dataclass
class DenoiserConfig:
    vocab: dict = field(default_factory=lambda: {"image": 64, "text": 32, "brain": 32})
    lengths: dict = field(default_factory=lambda: {"image": 16, "text": 16, "brain": 8})
    width: int = 64
    n_blocks: int = 2
    n_heads: int = 4
    ffn_mult: int = 4
    time_freqs: int = 8

    def to_dict(self) -> dict:
        return asdict(self)


def time_features(t: float, n: int) -> np.ndarray:
    freqs = np.exp(np.linspace(0.0, math.log(100.0), n))
    return np.concatenate([np.sin(t * freqs), np.cos(t * freqs)])


class Denoiser:
    def __init__(self, cfg: DenoiserConfig | None = None, seed: int = 0):
        self.cfg = cfg = cfg or DenoiserConfig()
        if cfg.width % cfg.n_heads:
            raise ValueError("width must be divisible by n_heads")
        rng = np.random.default_rng(np.random.SeedSequence([seed, 31]))
        W = cfg.width
        p = self.params = ParamSet()
        for m in MODALITIES:
            V = cfg.vocab[m]
            emb = p.add(f"emb.{m}", rng.normal(0.0, 1.0, (V + 1, W)))
            emb.frozen_rows = (V,)
            p.add(f"pos.{m}", rng.normal(0.0, 0.1, (cfg.lengths[m], W)), decay=False)
        init_linear(p, "time.fc1", 2 * cfg.time_freqs, W, rng)
        init_linear(p, "time.fc2", W, W, rng, scale=0.5)
        for i in range(cfg.n_blocks):
            for m in MODALITIES:
                init_norm(p, f"block{i}.{m}.norm", W)
                for n in "qkv":
                    init_linear(p, f"block{i}.{m}.{n}", W, W, rng)
            init_linear(p, f"block{i}.out", W, W, rng, scale=0.5)
            init_norm(p, f"block{i}.ffn_norm", W)
            init_linear(p, f"block{i}.ffn1", W, cfg.ffn_mult * W, rng)
            init_linear(p, f"block{i}.ffn2", cfg.ffn_mult * W, W, rng, scale=0.5)
        init_norm(p, "final_norm", W)
        for m in MODALITIES:
            init_linear(p, f"head.{m}", W, cfg.vocab[m], rng)

    def mask_id(self, modality: str) -> int:
        return self.cfg.vocab[modality]

    def mask_rows(self) -> dict:
        return {m: self.params[f"emb.{m}"].data[self.cfg.vocab[m]].copy() for m in MODALITIES}

    def new_module_names(self) -> list[str]:
        """Parameters of the brain branch (what is new relative to an image/text backbone)."""
        return [n for n in self.params.names() if ".brain" in n or n.endswith("brain")]

    def forward(self, tokens: dict, t: float, task: TaskSpec) -> dict:
        """Per-modality logits ``(B, L_m, V_m)`` for a batch of token streams.

        Streams missing from ``tokens`` are filled with MASK; excluded streams
        are cut off from attention, so active outputs never depend on them.
        """
        c, p = self.cfg, self.params
        B = next(np.asarray(v).shape[0] for v in tokens.values())
        temb = da.linear(time_features(t, c.time_freqs)[None, :], p["time.fc1.w"], p["time.fc1.b"])
        temb = da.linear(da.gelu(temb), p["time.fc2.w"], p["time.fc2.b"])  # (1, W)
        parts = []
        for m in MODALITIES:
            ids = tokens.get(m)
            if ids is None:
                ids = np.full((B, c.lengths[m]), c.vocab[m], dtype=np.int64)
            x = da.take_rows(p[f"emb.{m}"], np.asarray(ids)) + p[f"pos.{m}"]
            parts.append(x + temb)
        x = da.concat(parts, axis=1)
        allowed = build_attention_mask(task, c.lengths)
        bounds = np.cumsum([0] + [c.lengths[m] for m in MODALITIES])
        for i in range(c.n_blocks):
            x = self._block(i, x, allowed, bounds, B)
            if not np.all(np.isfinite(x.data)):
                raise NumericalError(f"non-finite activation after block {i}")
        x = da.layer_norm(x, p["final_norm.g"], p["final_norm.b"])
        out = {}
        for j, m in enumerate(MODALITIES):
            xm = x[:, bounds[j] : bounds[j + 1]]
            out[m] = da.linear(xm, p[f"head.{m}.w"], p[f"head.{m}.b"])
        return out

    def _block(self, i: int, x: Tensor, allowed: np.ndarray, bounds, B: int) -> Tensor:
        c, p = self.cfg, self.params
        H, W = c.n_heads, c.width
        d = W // H
        qs, ks, vs = [], [], []
        for j, m in enumerate(MODALITIES):
            pre = f"block{i}.{m}"
            h = da.layer_norm(x[:, bounds[j] : bounds[j + 1]], p[f"{pre}.norm.g"], p[f"{pre}.norm.b"])
            qs.append(da.linear(h, p[f"{pre}.q.w"], p[f"{pre}.q.b"]))
            ks.append(da.linear(h, p[f"{pre}.k.w"], p[f"{pre}.k.b"]))
            vs.append(da.linear(h, p[f"{pre}.v.w"], p[f"{pre}.v.b"]))
        L = x.shape[1]

        def heads(parts):
            return da.concat(parts, axis=1).reshape(B, L, H, d).transpose(0, 2, 1, 3)

        q, k, v = heads(qs), heads(ks), heads(vs)
        scores = da.matmul(q, da.swapaxes(k, 2, 3)) * (1.0 / math.sqrt(d))
        att = da.masked_softmax(scores, allowed)
        o = da.matmul(att, v).transpose(0, 2, 1, 3).reshape(B, L, W)
        x = x + da.linear(o, p[f"block{i}.out.w"], p[f"block{i}.out.b"])
        h = da.layer_norm(x, p[f"block{i}.ffn_norm.g"], p[f"block{i}.ffn_norm.b"])
        h = da.gelu(da.linear(h, p[f"block{i}.ffn1.w"], p[f"block{i}.ffn1.b"]))
        return x + da.linear(h, p[f"block{i}.ffn2.w"], p[f"block{i}.ffn2.b"])

    def predict(self, tokens: dict, t: float, task: TaskSpec) -> dict:
        """Clean-token probabilities per stream, for use by the sampler."""
        logits = self.forward(tokens, t, task)
        return {m: predict_xhat0(v.data) for m, v in logits.items()}


def predict_xhat0(logits) -> np.ndarray:
    """Softmax over the real vocabulary (last axis); MASK is not in the support."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)
