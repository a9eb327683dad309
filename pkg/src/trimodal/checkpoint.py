"""Framed binary checkpoints.

Layout (all integers little-endian)::

    magic    8 bytes   b"TRIMCKPT"
    version  uint32
    hlen     uint64    length of the JSON header
    header   hlen bytes, UTF-8 JSON: {"meta": {...}, "tensors": [{name, dtype, shape, offset, nbytes}, ...]}
    payload  raw little-endian tensor bytes, in header order
    digest   32 bytes  SHA-256 of everything above

Load verifies magic, version and digest before touching the payload.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"TRIMCKPT"
VERSION = 1
_DTYPES = {"float64": "<f8", "int64": "<i8", "bool": "|b1"}


class CheckpointError(ValueError):
    pass


class VersionMismatch(CheckpointError):
    pass


class IntegrityError(CheckpointError):
    pass


def save(path, tensors: dict, meta: dict | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        kind = str(arr.dtype)
        if kind not in _DTYPES:
            if np.issubdtype(arr.dtype, np.integer):
                kind = "int64"
            elif np.issubdtype(arr.dtype, np.floating):
                kind = "float64"
            else:
                raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        blob = np.ascontiguousarray(arr, dtype=_DTYPES[kind]).tobytes()
        entries.append({"name": name, "dtype": kind, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True).encode()
    body = MAGIC + struct.pack("<IQ", VERSION, len(header)) + header + b"".join(blobs)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(body + hashlib.sha256(body).digest())
    os.replace(tmp, path)


def load(path) -> tuple[dict, dict]:
    """Return ``(tensors, meta)``."""
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 12 + 32 or raw[: len(MAGIC)] != MAGIC:
        raise IntegrityError(f"{path}: not a checkpoint (bad magic or truncated)")
    version, hlen = struct.unpack_from("<IQ", raw, len(MAGIC))
    if version != VERSION:
        raise VersionMismatch(f"{path}: checkpoint version {version}, this build reads version {VERSION}")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError(f"{path}: checksum mismatch (file corrupt or truncated)")
    start = len(MAGIC) + 12
    header = json.loads(body[start : start + hlen].decode())
    payload = body[start + hlen :]
    tensors = {}
    for e in header["tensors"]:
        chunk = payload[e["offset"] : e["offset"] + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise IntegrityError(f"{path}: tensor {e['name']} truncated")
        tensors[e["name"]] = np.frombuffer(chunk, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"]).copy()
    return tensors, header["meta"]


# -- model-specific packing ------------------------------------------------
def pack_params(prefix: str, params) -> tuple[dict, dict]:
    tensors = {f"{prefix}/{n}": t.data for n, t in params.items()}
    meta = {
        "frozen": sorted(params.frozen),
        "no_decay": sorted(params.no_decay),
        "frozen_rows": {n: list(t.frozen_rows) for n, t in params.items() if t.frozen_rows},
    }
    return tensors, meta


def unpack_params(prefix: str, params, tensors: dict, meta: dict) -> None:
    cut = len(prefix) + 1
    params.load_state({k[cut:]: v for k, v in tensors.items() if k.startswith(prefix + "/")})
    params.unfreeze()
    params.freeze(meta["frozen"])
    params.no_decay = set(meta["no_decay"])
    for n, t in params.items():
        t.frozen_rows = tuple(meta["frozen_rows"].get(n, ()))


def save_trainer(path, trainer, extra_meta: dict | None = None) -> None:
    """Denoiser weights, optimizer moments and trainer position (incl. RNG state)."""
    tensors, pmeta = pack_params("param", trainer.model.params)
    for k, v in trainer.opt.state().items():
        tensors[f"opt/{k}"] = v
    meta = {
        "kind": "denoiser",
        "params": pmeta,
        "model_config": trainer.model.cfg.to_dict(),
        "trainer": trainer.state(),
        **(extra_meta or {}),
    }
    save(path, tensors, meta)


def load_trainer(path, trainer) -> dict:
    tensors, meta = load(path)
    if meta.get("kind") != "denoiser":
        raise CheckpointError(f"{path}: not a denoiser checkpoint")
    unpack_params("param", trainer.model.params, tensors, meta["params"])
    trainer.opt.load_state({k[4:]: v for k, v in tensors.items() if k.startswith("opt/")})
    trainer.load_state(meta["trainer"])
    return meta


def save_tokenizer(path, tokenizer, extra_meta: dict | None = None) -> None:
    tensors, pmeta = pack_params("param", tokenizer.params)
    cb = tokenizer.codebook
    tensors.update({
        "codebook/codes": cb.codes,
        "codebook/ema_cluster_size": cb.ema_cluster_size,
        "codebook/ema_embed_sum": cb.ema_embed_sum,
    })
    meta = {"kind": "tokenizer", "params": pmeta, "config": tokenizer.cfg.to_dict(),
            "codebook": {"decay": cb.decay, "epsilon": cb.epsilon}, **(extra_meta or {})}
    save(path, tensors, meta)


def load_tokenizer(path):
    from .tokenizer import BrainTokenizer, Codebook, TokenizerConfig

    tensors, meta = load(path)
    if meta.get("kind") != "tokenizer":
        raise CheckpointError(f"{path}: not a tokenizer checkpoint")
    model = BrainTokenizer(TokenizerConfig(**meta["config"]))
    unpack_params("param", model.params, tensors, meta["params"])
    model.codebook = Codebook(
        tensors["codebook/codes"], tensors["codebook/ema_cluster_size"], tensors["codebook/ema_embed_sum"],
        meta["codebook"]["decay"], meta["codebook"]["epsilon"],
    )
    return model


def save_predictor(path, predictor, extra_meta: dict | None = None) -> None:
    tensors, pmeta = pack_params("param", predictor.params)
    meta = {"kind": "predictor", "params": pmeta, "frozen": predictor.frozen, **(extra_meta or {})}
    save(path, tensors, meta)


def load_predictor(path, n_voxel: int, feature_dim: int, hidden: int):
    from .tokenizer import FeaturePredictor

    tensors, meta = load(path)
    if meta.get("kind") != "predictor":
        raise CheckpointError(f"{path}: not a predictor checkpoint")
    model = FeaturePredictor(n_voxel, feature_dim, hidden)
    unpack_params("param", model.params, tensors, meta["params"])
    model.frozen = bool(meta["frozen"])
    return model
