"""Small model instances shared by unit and acceptance tests."""

from __future__ import annotations

import numpy as np

from trimodal import diffarray as da
from trimodal import tokenizer as tk
from trimodal.corruption import BRAIN, IMAGE, TEXT
from trimodal.denoiser import Denoiser, DenoiserConfig

TOY_TOKENIZER = dict(n_voxel=16, n_codes=2, code_dim=4, codebook_size=4, conv_channels=2, conv_kernel=4,
                     conv_stride=4, hidden=8, embed_dim=8, text_vocab=32, text_len=4)


def toy_tokenizer_case(seed: int = 0, B: int = 3):
    """A tiny tokenizer with every loss term switched on and fixed inputs."""
    rng = np.random.default_rng(seed)
    cfg = tk.TokenizerConfig(**TOY_TOKENIZER)
    model = tk.BrainTokenizer(cfg, seed)
    pred = tk.FeaturePredictor(cfg.n_voxel, cfg.embed_dim, hidden=6, seed=seed)
    pred.freeze()
    b = rng.normal(size=(B, cfg.n_voxel))
    f_v = rng.normal(size=(B, cfg.embed_dim))
    f_c = rng.normal(size=(B, cfg.embed_dim))
    h_c = rng.normal(size=(B, cfg.text_len, cfg.embed_dim))
    text = rng.integers(0, cfg.text_vocab, size=(B, cfg.text_len))
    fine_mask = tk.choose_fine_mask(B, cfg.text_len, rng, cfg.fine_mask_frac)

    def loss():
        out = model.forward(b, f_v, f_c, h_c, text, pred, fine_mask=fine_mask)
        L = out.losses
        return tk.total_tokenizer_loss(L["vq"], L["coarse"], L["fine"], L["perceptual"], cfg.lam, cfg.lam1, cfg.lam2)

    return model, loss


def downstream_of_quantizer(model) -> list:
    """Parameters whose true gradient is well defined (the encoder's is straight-through)."""
    return [p for n, p in model.params.items() if not n.startswith("enc.")]


TOY_DENOISER = DenoiserConfig(vocab={IMAGE: 5, TEXT: 6, BRAIN: 4}, lengths={IMAGE: 3, TEXT: 3, BRAIN: 2},
                              width=8, n_blocks=1, n_heads=2, ffn_mult=2, time_freqs=2)


def toy_denoiser(seed: int = 0) -> Denoiser:
    return Denoiser(TOY_DENOISER, seed)


def toy_tokens(rng, B: int = 2, cfg: DenoiserConfig = TOY_DENOISER) -> dict:
    return {m: rng.integers(0, cfg.vocab[m], size=(B, cfg.lengths[m])) for m in (IMAGE, TEXT, BRAIN)}


def scalar(t) -> float:
    return float(t.data) if isinstance(t, da.Tensor) else float(t)
