"""Vector-quantising brain tokenizer with semantic and perceptual alignment.

The encoder (a strided 1-D convolution over voxels, then two dense layers)
turns a brain vector into ``n_codes`` latents of width ``code_dim``.  Each
latent snaps to its nearest codebook row; codebook rows follow the assigned
latents by exponential moving average and never see a gradient.  The
decoder reconstructs the brain vector from the quantised latents.

Training combines four terms::

    L = L_vq + lam1 * L_coarse + lam2 * L_fine + lam * L_perceptual

``L_vq`` is reconstruction plus a commitment term, ``L_coarse`` pulls a
pooled brain feature towards the paired image/text features, ``L_fine``
asks a cross-attention decoder to recover masked caption tokens from the
brain tokens, and ``L_perceptual`` requires the reconstruction to remain
decodable by a frozen brain-to-feature predictor.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffarray as da
from . import metrics
from .diffarray import Tensor
from .errors import ConfigError
from .nn import AdamW, ParamSet, init_linear, init_norm, lr_at
from .synthdata import FeatureEncoder, TriModalDataset


# -- codebook -----------------------------------------------------------
@dataclass
class Codebook:
    codes: np.ndarray
    ema_cluster_size: np.ndarray
    ema_embed_sum: np.ndarray
    decay: float = 0.99
    epsilon: float = 1e-5

    @classmethod
    def create(cls, size: int, dim: int, rng: np.random.Generator, scale: float = 1.0, decay: float = 0.99, epsilon: float = 1e-5):
        if size < 1 or dim < 1:
            raise ConfigError("codebook size and dimension must be positive")
        codes = rng.normal(0.0, scale, size=(size, dim))
        return cls(codes, np.ones(size), codes.copy(), decay, epsilon)

    @property
    def size(self) -> int:
        return self.codes.shape[0]

    @property
    def dim(self) -> int:
        return self.codes.shape[1]

    def copy(self) -> "Codebook":
        return Codebook(self.codes.copy(), self.ema_cluster_size.copy(), self.ema_embed_sum.copy(), self.decay, self.epsilon)


def nearest_codes(latents: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """Index of the nearest code by squared distance; ties go to the lowest index."""
    d = (
        (latents * latents).sum(axis=1, keepdims=True)
        - 2.0 * latents @ codes.T
        + (codes * codes).sum(axis=1)[None, :]
    )
    # exact recomputation on near-ties so the tie rule is not at the mercy of rounding
    best = d.min(axis=1, keepdims=True)
    close = d <= best + 1e-9 * (1.0 + np.abs(best))
    out = np.argmin(d, axis=1)
    for i in np.flatnonzero(close.sum(axis=1) > 1):
        cand = np.flatnonzero(close[i])
        exact = ((latents[i][None, :] - codes[cand]) ** 2).sum(axis=1)
        out[i] = cand[np.flatnonzero(exact == exact.min())[0]]
    return out


def quantize(latents: Tensor, codebook: Codebook):
    """Snap each row of ``latents`` to its nearest code.

    Returns ``(indices, quantized)``.  ``quantized`` carries the code values
    forward and passes gradients straight through to ``latents``.
    """
    if latents.shape[-1] != codebook.dim:
        raise da.ShapeError(f"latent width {latents.shape[-1]} != code dimension {codebook.dim}")
    idx = nearest_codes(latents.data, codebook.codes)
    return idx, da._result(codebook.codes[idx], (latents,), lambda g: (g,))


def ema_update(codebook: Codebook, latents: np.ndarray, assignments: np.ndarray) -> Codebook:
    """Move codes towards the mean of their assigned latents (in place; also returned)."""
    K = codebook.size
    onehot = np.zeros((len(assignments), K))
    onehot[np.arange(len(assignments)), assignments] = 1.0
    counts = onehot.sum(axis=0)
    sums = onehot.T @ latents
    d = codebook.decay
    codebook.ema_cluster_size = d * codebook.ema_cluster_size + (1.0 - d) * counts
    codebook.ema_embed_sum = d * codebook.ema_embed_sum + (1.0 - d) * sums
    n = codebook.ema_cluster_size.sum()
    eps = codebook.epsilon
    if eps > 0:
        smoothed = (codebook.ema_cluster_size + eps) / (n + K * eps) * n
    else:
        smoothed = codebook.ema_cluster_size
    live = smoothed > 0
    # a code with no mass at all (only possible with epsilon=0) keeps its value
    codebook.codes = np.where(live[:, None], codebook.ema_embed_sum / np.where(live, smoothed, 1.0)[:, None], codebook.codes)
    return codebook


def codebook_usage(indices, codebook_size: int) -> float:
    idx = np.asarray(indices).reshape(-1)
    if idx.size == 0:
        raise ValueError("empty index stream")
    return len(np.unique(idx)) / codebook_size


# -- loss helpers -------------------------------------------------------
def sq_norm_mean(x: Tensor) -> Tensor:
    """Squared L2 norm over the last axis, averaged over the rest."""
    return da.mean(da.tsum(x * x, axis=-1))


def info_nce(a: Tensor, b: Tensor, temperature: float = 0.07) -> Tensor:
    """Symmetric InfoNCE over cosine similarities; row i of ``a`` pairs with row i of ``b``."""
    B = a.shape[0]
    if B < 2:
        raise ConfigError("contrastive loss needs a batch of at least 2")
    logits = da.matmul(da.l2_normalize(a), da.l2_normalize(b).T) * (1.0 / temperature)
    diag = np.arange(B)
    every = np.ones(B, dtype=bool)
    fwd = da.masked_cross_entropy(logits, diag, every)
    bwd = da.masked_cross_entropy(logits.T, diag, every)
    return (fwd + bwd) * 0.5


def coarse_align_loss(f_b: Tensor, f_v, f_c, temperature: float = 0.07) -> Tensor:
    f_v, f_c = da.as_tensor(f_v), da.as_tensor(f_c)
    return info_nce(f_b, f_c, temperature) + info_nce(f_b, f_v, temperature) + sq_norm_mean(f_b - f_v)


def fine_mask_count(length: int, frac: float = 0.3) -> int:
    return int(round(frac * length))


def choose_fine_mask(batch: int, length: int, rng: np.random.Generator, frac: float = 0.3) -> np.ndarray:
    k = fine_mask_count(length, frac)
    mask = np.zeros((batch, length), dtype=bool)
    for i in range(batch):
        mask[i, rng.choice(length, size=k, replace=False)] = True
    return mask


# -- frozen brain-to-feature predictor -----------------------------------
class FeaturePredictor:
    """Residual MLP mapping a brain vector to (image feature, text feature).

    Four dense layers: an input projection, two residual hidden layers and the
    pair of output heads.  It is trained first and then frozen.
    """

    def __init__(self, n_voxel: int, feature_dim: int, hidden: int = 128, seed: int = 0):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
        self.params = ParamSet()
        init_linear(self.params, "inp", n_voxel, hidden, rng)
        for i in range(2):
            init_norm(self.params, f"res{i}.norm", hidden)
            init_linear(self.params, f"res{i}", hidden, hidden, rng, scale=0.5)
        init_linear(self.params, "head_v", hidden, feature_dim, rng)
        init_linear(self.params, "head_c", hidden, feature_dim, rng)
        self.frozen = False

    def __call__(self, b: Tensor):
        p = self.params
        h = da.linear(b, p["inp.w"], p["inp.b"])
        for i in range(2):
            z = da.layer_norm(h, p[f"res{i}.norm.g"], p[f"res{i}.norm.b"])
            h = h + da.linear(da.gelu(z), p[f"res{i}.w"], p[f"res{i}.b"])
        h = da.gelu(h)
        return da.linear(h, p["head_v.w"], p["head_v.b"]), da.linear(h, p["head_c.w"], p["head_c.b"])

    def loss(self, b, f_v, f_c) -> Tensor:
        pv, pc = self(da.as_tensor(b))
        return sq_norm_mean(pv - da.as_tensor(f_v)) + sq_norm_mean(pc - da.as_tensor(f_c))

    def freeze(self) -> None:
        self.params.freeze()
        self.frozen = True


def perceptual_loss(b_hat: Tensor, f_v, f_c, predictor: FeaturePredictor) -> Tensor:
    if not predictor.frozen:
        raise ConfigError("perceptual loss needs a frozen feature predictor")
    pv, pc = predictor(b_hat)
    return sq_norm_mean(pv - da.as_tensor(f_v)) + sq_norm_mean(pc - da.as_tensor(f_c))


def train_predictor(
    ds: TriModalDataset,
    features: FeatureEncoder,
    steps: int = 600,
    batch: int = 64,
    lr: float = 2e-3,
    seed: int = 0,
    hidden: int = 128,
) -> FeaturePredictor:
    cfg = ds.config
    model = FeaturePredictor(cfg.n_voxel, cfg.feature_dim, hidden, seed)
    train = ds.indices("train")
    f_v_all = features.image_features(ds.image)
    f_c_all = features.text_features(ds.text)
    opt = AdamW(lr=lr, weight_decay=1e-2)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 12]))
    for _ in range(steps):
        idx = rng.choice(train, size=min(batch, len(train)), replace=False)
        model.params.zero_grad()
        loss = model.loss(ds.brain[idx], f_v_all[idx], f_c_all[idx])
        loss.backward()
        opt.step(model.params)
    model.freeze()
    return model


# -- tokenizer ----------------------------------------------------------
@dataclass
class TokenizerConfig:
    n_voxel: int = 256
    n_codes: int = 8
    code_dim: int = 16
    codebook_size: int = 32
    conv_channels: int = 8
    conv_kernel: int = 8
    conv_stride: int = 8
    hidden: int = 128
    embed_dim: int = 64
    text_vocab: int = 32
    text_len: int = 16
    beta: float = 0.8
    lam: float = 0.5
    lam1: float = 0.08
    lam2: float = 0.02
    decay: float = 0.99
    epsilon: float = 1e-5
    temperature: float = 0.07
    fine_mask_frac: float = 0.3
    code_init_scale: float = 1.0
    commit_grad: str = "encoder"
    # reference geometry: 128 codes of width 16, 64 tokens per sample, 1024-wide features
    PAPER_SCALE = dict(codebook_size=128, code_dim=16, n_codes=64, embed_dim=1024)

    @classmethod
    def paper_scale(cls, **overrides) -> "TokenizerConfig":
        return cls(**{**cls.PAPER_SCALE, **overrides})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TokenizerOutput:
    latents: Tensor
    indices: np.ndarray
    quantized: Tensor
    b_hat: Tensor
    f_b: Tensor
    losses: dict = field(default_factory=dict)


class BrainTokenizer:
    def __init__(self, cfg: TokenizerConfig | None = None, seed: int = 0):
        self.cfg = cfg = cfg or TokenizerConfig()
        rng = np.random.default_rng(np.random.SeedSequence([seed, 21]))
        p = self.params = ParamSet()
        L_conv = (cfg.n_voxel - cfg.conv_kernel) // cfg.conv_stride + 1
        self._conv_out = L_conv * cfg.conv_channels
        p.add("enc.conv.w", rng.normal(0, 1 / math.sqrt(cfg.conv_kernel), (cfg.conv_kernel, 1, cfg.conv_channels)))
        p.add("enc.conv.b", np.zeros(cfg.conv_channels), decay=False)
        init_linear(p, "enc.fc1", self._conv_out, cfg.hidden, rng)
        init_linear(p, "enc.fc2", cfg.hidden, cfg.n_codes * cfg.code_dim, rng)
        flat = cfg.n_codes * cfg.code_dim
        init_linear(p, "dec.fc1", flat, cfg.hidden, rng)
        init_linear(p, "dec.fc2", cfg.hidden, cfg.n_voxel, rng)
        # pooled brain feature for coarse alignment
        init_linear(p, "proj.fc1", flat, cfg.hidden, rng)
        init_linear(p, "proj.fc2", cfg.hidden, cfg.embed_dim, rng)
        # token features and cross-attention decoder for fine alignment
        init_linear(p, "tok.proj", cfg.code_dim, cfg.embed_dim, rng)
        p.add("tok.pos", rng.normal(0, 0.1, (cfg.n_codes, cfg.embed_dim)), decay=False)
        p.add("fine.mask", rng.normal(0, 0.1, cfg.embed_dim), decay=False)
        p.add("fine.pos", rng.normal(0, 0.1, (cfg.text_len, cfg.embed_dim)), decay=False)
        for n in ("q", "k", "v", "o"):
            init_linear(p, f"fine.{n}", cfg.embed_dim, cfg.embed_dim, rng)
        init_norm(p, "fine.norm", cfg.embed_dim)
        init_linear(p, "fine.head", cfg.embed_dim, cfg.text_vocab, rng, scale=0.1)
        self.codebook = Codebook.create(cfg.codebook_size, cfg.code_dim, rng, cfg.code_init_scale, cfg.decay, cfg.epsilon)

    # -- pieces --------------------------------------------------------
    def encode(self, b) -> Tensor:
        """Continuous latents, shape ``(B * n_codes, code_dim)``."""
        c, p = self.cfg, self.params
        b = da.as_tensor(b)
        B = b.shape[0]
        x = da.conv1d(b.reshape(B, c.n_voxel, 1), p["enc.conv.w"], p["enc.conv.b"], stride=c.conv_stride)
        h = da.gelu(x).reshape(B, self._conv_out)
        h = da.gelu(da.linear(h, p["enc.fc1.w"], p["enc.fc1.b"]))
        z = da.linear(h, p["enc.fc2.w"], p["enc.fc2.b"])
        return z.reshape(B * c.n_codes, c.code_dim)

    def decode(self, quantized: Tensor) -> Tensor:
        c, p = self.cfg, self.params
        flat = quantized.reshape(-1, c.n_codes * c.code_dim)
        h = da.gelu(da.linear(flat, p["dec.fc1.w"], p["dec.fc1.b"]))
        return da.linear(h, p["dec.fc2.w"], p["dec.fc2.b"])

    def decode_indices(self, indices) -> np.ndarray:
        """Reconstruct brain vectors from token ids of shape ``(B, n_codes)``."""
        idx = np.asarray(indices)
        q = Tensor(self.codebook.codes[idx.reshape(-1)])
        return self.decode(q).data.reshape(idx.shape[0], -1)

    def global_feature(self, quantized: Tensor) -> Tensor:
        c, p = self.cfg, self.params
        flat = quantized.reshape(-1, c.n_codes * c.code_dim)
        h = da.gelu(da.linear(flat, p["proj.fc1.w"], p["proj.fc1.b"]))
        return da.linear(h, p["proj.fc2.w"], p["proj.fc2.b"])

    def token_features(self, quantized: Tensor) -> Tensor:
        c, p = self.cfg, self.params
        q = quantized.reshape(-1, c.n_codes, c.code_dim)
        return da.linear(q, p["tok.proj.w"], p["tok.proj.b"]) + p["tok.pos"]

    def tokenize(self, b) -> np.ndarray:
        """Brain vectors ``(B, n_voxel)`` to token ids ``(B, n_codes)``."""
        b = np.asarray(b, dtype=np.float64)
        lat = self.encode(Tensor(b)).data
        return nearest_codes(lat, self.codebook.codes).reshape(b.shape[0], self.cfg.n_codes)

    # -- losses --------------------------------------------------------
    def vq_loss(self, b, latents: Tensor, quantized: Tensor):
        """Reconstruction MSE plus beta times the commitment term.

        Codes are maintained by EMA, so the code side of the commitment term is
        always detached.  With ``commit_grad="encoder"`` the term pulls the
        encoder toward its code; with ``"none"`` the latent is detached as well
        and the term is reported but carries no gradient.
        """
        b = da.as_tensor(b)
        b_hat = self.decode(quantized)
        recon = da.mean((b - b_hat) ** 2)
        enc = da.stop_gradient(latents) if self.cfg.commit_grad == "none" else latents
        commit = da.mean((enc - Tensor(quantized.data)) ** 2)
        return recon + commit * self.cfg.beta, b_hat

    def fine_align_loss(self, h_c, text_tokens, f_tok: Tensor, rng: np.random.Generator | None = None, mask=None) -> Tensor:
        """Predict masked caption tokens with the brain tokens as keys/values."""
        c, p = self.cfg, self.params
        h_c = np.asarray(h_c, dtype=np.float64)
        B, L, E = h_c.shape
        if mask is None:
            mask = choose_fine_mask(B, L, rng, c.fine_mask_frac)
        keep = Tensor(np.repeat((~mask)[..., None], E, axis=-1).astype(np.float64))
        drop = Tensor(np.repeat(mask[..., None], E, axis=-1).astype(np.float64))
        query_in = Tensor(h_c) * keep + (p["fine.mask"] + p["fine.pos"]) * drop
        q = da.linear(query_in, p["fine.q.w"], p["fine.q.b"])
        k = da.linear(f_tok, p["fine.k.w"], p["fine.k.b"])
        v = da.linear(f_tok, p["fine.v.w"], p["fine.v.b"])
        att = da.softmax(da.matmul(q, da.swapaxes(k, 1, 2)) * (1.0 / math.sqrt(E)))
        h = query_in + da.linear(da.matmul(att, v), p["fine.o.w"], p["fine.o.b"])
        h = da.layer_norm(h, p["fine.norm.g"], p["fine.norm.b"])
        logits = da.linear(h, p["fine.head.w"], p["fine.head.b"])
        return da.masked_cross_entropy(logits, np.asarray(text_tokens), mask)

    def forward(self, b, f_v=None, f_c=None, h_c=None, text_tokens=None, predictor=None,
                rng: np.random.Generator | None = None, fine_mask=None, weights=None) -> TokenizerOutput:
        """Full forward pass; ``out.losses['total']`` is the weighted objective.

        ``weights`` may override ``lam``, ``lam1``, ``lam2`` (for ablations).
        Terms whose weight is zero are skipped.
        """
        c = self.cfg
        w = {"lam": c.lam, "lam1": c.lam1, "lam2": c.lam2, **(weights or {})}
        b = da.as_tensor(b)
        lat = self.encode(b)
        idx, q = quantize(lat, self.codebook)
        vq, b_hat = self.vq_loss(b, lat, q)
        f_b = self.global_feature(q)
        losses = {"vq": vq}
        total = vq
        if w["lam1"]:
            losses["coarse"] = coarse_align_loss(f_b, f_v, f_c, c.temperature)
            total = total + losses["coarse"] * w["lam1"]
        if w["lam2"]:
            losses["fine"] = self.fine_align_loss(h_c, text_tokens, self.token_features(q), rng, fine_mask)
            total = total + losses["fine"] * w["lam2"]
        if w["lam"]:
            losses["perceptual"] = perceptual_loss(b_hat, f_v, f_c, predictor)
            total = total + losses["perceptual"] * w["lam"]
        losses["total"] = total
        return TokenizerOutput(lat, idx, q, b_hat, f_b, losses)


def total_tokenizer_loss(vq, coarse, fine, perceptual, lam=0.5, lam1=0.08, lam2=0.02):
    """Weighted combination of already-computed component losses."""
    return vq + (coarse * lam1 + fine * lam2) + perceptual * lam


def brain_image_retrieval(model: BrainTokenizer, ds: TriModalDataset, features: FeatureEncoder,
                          split: str = "test", k: int = 1) -> float:
    """Top-k retrieval of each sample's image feature from its quantized brain feature."""
    idx = ds.indices(split)
    _, q = quantize(model.encode(ds.brain[idx]), model.codebook)
    return metrics.retrieval_topk(model.global_feature(q).data, features.image_features(ds.image[idx]), k)


def split_usage(model: BrainTokenizer, ds: TriModalDataset, split: str = "test") -> float:
    return codebook_usage(model.tokenize(ds.brain[ds.indices(split)]), model.cfg.codebook_size)


@dataclass
class TokenizerTrainConfig:
    steps: int = 1500
    batch: int = 64
    lr: float = 2e-3
    warmup: int = 50
    weight_decay: float = 1e-2
    alignment: bool = True


def train_tokenizer(
    ds: TriModalDataset,
    features: FeatureEncoder,
    predictor: FeaturePredictor | None,
    cfg: TokenizerConfig | None = None,
    train_cfg: TokenizerTrainConfig | None = None,
    seed: int = 0,
    log=None,
) -> BrainTokenizer:
    """Fit a tokenizer.  With ``alignment=False`` only the VQ objective is used.

    ``log(step, row_dict)`` is called at the end of each pass over the training
    split with codebook usage and the running losses.
    """
    cfg = cfg or TokenizerConfig(n_voxel=ds.config.n_voxel, text_vocab=ds.config.text_vocab, text_len=ds.config.text_len)
    tc = train_cfg or TokenizerTrainConfig()
    model = BrainTokenizer(cfg, seed)
    weights = None if tc.alignment else {"lam": 0.0, "lam1": 0.0, "lam2": 0.0}
    train = ds.indices("train")
    f_v_all = features.image_features(ds.image)
    f_c_all = features.text_features(ds.text)
    h_all = features.text_hidden(ds.text)
    opt = AdamW(lr=tc.lr, weight_decay=tc.weight_decay)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 22]))
    per_epoch = max(1, len(train) // tc.batch)
    epoch_idx = []
    for step in range(tc.steps):
        idx = rng.choice(train, size=min(tc.batch, len(train)), replace=False)
        model.params.zero_grad()
        out = model.forward(ds.brain[idx], f_v_all[idx], f_c_all[idx], h_all[idx], ds.text[idx], predictor, rng, weights=weights)
        out.losses["total"].backward()
        opt.step(model.params, lr=lr_at(step, tc.lr, tc.steps, tc.warmup))
        ema_update(model.codebook, out.latents.data, out.indices)
        epoch_idx.append(out.indices)
        if log is not None and (step + 1) % per_epoch == 0:
            row = {k: float(v.data) for k, v in out.losses.items()}
            row["codebook_usage"] = codebook_usage(np.concatenate(epoch_idx), cfg.codebook_size)
            row["retrieval_top1_val"] = brain_image_retrieval(model, ds, features, "val")
            log(step + 1, row)
            epoch_idx = []
    return model
