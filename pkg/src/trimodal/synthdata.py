"""Synthetic paired brain / image / text data with a known concept latent.

Every sample belongs to one of ``C`` concepts.  A concept fixes a value for
each attribute slot (color, shape, texture); image and caption tokens are
templates of those values with a little token noise, and the brain vector is
a fixed linear image of the concept one-hot plus Gaussian noise.  Because the
generative structure is known, cross-modal learning can be checked exactly.

The dataset file is JSON lines: a header object followed by one record per
sample.  Python's float repr round-trips, so load(save(d)) is bit-exact.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError

FORMAT_NAME = "trimodal-dataset"
FORMAT_VERSION = 1

# text vocabulary layout
PAD, WHAT, IS, FILLER_A, FILLER_B = 0, 1, 5, 6, 7
SLOT_TOKEN0 = 2
SLOTS = ("color", "shape", "texture")
N_VALUES = 8
VALUE_TOKEN0 = 8
VALUE_NAMES = {
    "color": ("red", "green", "blue", "yellow", "black", "white", "purple", "orange"),
    "shape": ("round", "square", "long", "flat", "tall", "curved", "pointed", "hollow"),
    "texture": ("smooth", "rough", "furry", "shiny", "striped", "spotted", "wooden", "metallic"),
}


def slot_token(slot: int) -> int:
    return SLOT_TOKEN0 + slot


def value_token(slot: int, value: int) -> int:
    return VALUE_TOKEN0 + N_VALUES * slot + value


def concept_attributes(concept: int) -> tuple[int, ...]:
    """Attribute value index per slot.  Distinct concepts differ in every slot when C <= 8."""
    return tuple((concept * (2 * s + 1) + s) % N_VALUES for s in range(len(SLOTS)))


@dataclass(frozen=True)
class SynthConfig:
    n_concepts: int = 8
    n_samples: int = 512
    n_voxel: int = 256
    noise: float = 0.1
    token_noise: float = 0.1
    image_vocab: int = 64
    text_vocab: int = 32
    image_len: int = 16
    text_len: int = 16
    answer_len: int = 4
    feature_dim: int = 64
    val_frac: float = 0.125
    test_frac: float = 0.125
    repeats: int = 1

    def validate(self) -> None:
        if self.n_concepts < 2:
            raise ConfigError("n_concepts must be >= 2")
        if self.n_samples < self.n_concepts:
            raise ConfigError("n_samples must be >= n_concepts")
        if self.noise < 0 or not (0 <= self.token_noise < 1):
            raise ConfigError("noise levels must be non-negative (token noise < 1)")
        if self.text_vocab < VALUE_TOKEN0 + N_VALUES * len(SLOTS):
            raise ConfigError(f"text_vocab must be >= {VALUE_TOKEN0 + N_VALUES * len(SLOTS)}")
        if self.text_len < 4 * len(SLOTS) or self.answer_len < 1 or self.answer_len > self.text_len - 2:
            raise ConfigError("text_len too short for captions / qa layout")
        if self.image_len < len(SLOTS) or self.n_voxel < 1 or self.feature_dim < 1:
            raise ConfigError("sizes must be positive")
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @property
    def answer_span(self) -> tuple[int, int]:
        return (self.text_len - self.answer_len, self.text_len)


@dataclass
class TriModalSample:
    concept_id: int
    brain: np.ndarray
    image_tokens: np.ndarray
    text_tokens: np.ndarray
    qa: dict | None = None


@dataclass
class TriModalDataset:
    config: SynthConfig
    seed: int
    concept: np.ndarray
    brain: np.ndarray
    image: np.ndarray
    text: np.ndarray
    qa_text: np.ndarray
    qa_slot: np.ndarray
    qa_value: np.ndarray
    split: np.ndarray  # 0 train, 1 val, 2 test
    mixing: np.ndarray = field(repr=False, default=None)

    SPLITS = ("train", "val", "test")

    def __len__(self) -> int:
        return len(self.concept)

    def indices(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.split == self.SPLITS.index(split))

    def sample(self, i: int) -> TriModalSample:
        a, b = self.config.answer_span
        qa = {
            "question": self.qa_text[i, :a].copy(),
            "answer": self.qa_text[i, a:b].copy(),
            "slot": int(self.qa_slot[i]),
            "value": int(self.qa_value[i]),
        }
        return TriModalSample(int(self.concept[i]), self.brain[i], self.image[i], self.text[i], qa)

    def subset(self, split: str) -> dict:
        idx = self.indices(split)
        return {
            "concept": self.concept[idx],
            "brain": self.brain[idx],
            "image": self.image[idx],
            "text": self.text[idx],
            "qa_text": self.qa_text[idx],
            "qa_slot": self.qa_slot[idx],
            "qa_value": self.qa_value[idx],
        }


def _templates(cfg: SynthConfig, rng: np.random.Generator):
    n_slots = len(SLOTS)
    part = cfg.image_len // n_slots
    slot_codes = rng.integers(0, cfg.image_vocab, size=(n_slots, N_VALUES, part))
    extra = cfg.image_len - n_slots * part
    concept_codes = rng.integers(0, cfg.image_vocab, size=(cfg.n_concepts, extra))
    image_t = np.zeros((cfg.n_concepts, cfg.image_len), dtype=np.int64)
    text_t = np.full((cfg.n_concepts, cfg.text_len), PAD, dtype=np.int64)
    for c in range(cfg.n_concepts):
        vals = concept_attributes(c)
        image_t[c, : n_slots * part] = np.concatenate([slot_codes[s, vals[s]] for s in range(n_slots)])
        image_t[c, n_slots * part :] = concept_codes[c]
        words = []
        for s, v in enumerate(vals):
            words += [FILLER_A if s % 2 == 0 else FILLER_B, slot_token(s), IS, value_token(s, v)]
        text_t[c, : len(words)] = words
    return image_t, text_t


def _noisy_tokens(template: np.ndarray, vocab: int, p: float, rng: np.random.Generator) -> np.ndarray:
    out = template.copy()
    if p <= 0:
        return out
    L = len(template)
    k = max(1, int(rng.binomial(L, p)))
    pos = rng.choice(L, size=k, replace=False)
    repl = rng.integers(0, vocab - 1, size=k)
    # never substitute a token by itself
    out[pos] = np.where(repl >= template[pos], repl + 1, repl)
    return out


def make_qa(concept_id: int, slots=SLOTS, seed: int = 0, cfg: SynthConfig | None = None) -> dict:
    """Question about one attribute slot of a concept, with a padded answer span.

    The slot is chosen from ``slots`` by ``seed``; identical arguments always
    give identical output.
    """
    cfg = cfg or SynthConfig()
    if not slots:
        raise ConfigError("need at least one attribute slot")
    rng = np.random.default_rng(seed)
    name = slots[int(rng.integers(len(slots)))]
    s = SLOTS.index(name)
    value = concept_attributes(concept_id)[s]
    a, b = cfg.answer_span
    question = np.full(a, PAD, dtype=np.int64)
    question[:3] = [WHAT, slot_token(s), IS]
    answer = np.full(b - a, PAD, dtype=np.int64)
    answer[0] = value_token(s, value)
    return {"question": question, "answer": answer, "slot": s, "value": value}


def generate(cfg: SynthConfig | None = None, seed: int = 0) -> TriModalDataset:
    cfg = cfg or SynthConfig()
    cfg.validate()
    root = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    mixing = root.normal(0.0, 1.0, size=(cfg.n_voxel, cfg.n_concepts))
    image_t, text_t = _templates(cfg, root)

    N = cfg.n_samples
    concept = np.arange(N) % cfg.n_concepts
    brain = np.empty((N, cfg.n_voxel))
    image = np.empty((N, cfg.image_len), dtype=np.int64)
    text = np.empty((N, cfg.text_len), dtype=np.int64)
    qa_text = np.empty((N, cfg.text_len), dtype=np.int64)
    qa_slot = np.empty(N, dtype=np.int64)
    qa_value = np.empty(N, dtype=np.int64)
    seen_img: set[bytes] = set()
    seen_txt: set[bytes] = set()
    for i in range(N):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 1, i]))
        c = concept[i]
        trials = mixing[:, c][None, :] + cfg.noise * rng.normal(size=(cfg.repeats, cfg.n_voxel))
        brain[i] = trials.mean(axis=0)
        for arr, tmpl, vocab, seen in ((image, image_t, cfg.image_vocab, seen_img), (text, text_t, cfg.text_vocab, seen_txt)):
            seq = _noisy_tokens(tmpl[c], vocab, cfg.token_noise, rng)
            if cfg.token_noise > 0:
                for _ in range(100):
                    if seq.tobytes() not in seen:
                        break
                    seq = _noisy_tokens(tmpl[c], vocab, cfg.token_noise, rng)
                seen.add(seq.tobytes())
            arr[i] = seq
        qa = make_qa(int(c), SLOTS, seed=int(rng.integers(2**31)), cfg=cfg)
        qa_text[i] = np.concatenate([qa["question"], qa["answer"]])
        qa_slot[i], qa_value[i] = qa["slot"], qa["value"]

    split = np.zeros(N, dtype=np.int64)
    split_rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    for c in range(cfg.n_concepts):
        members = np.flatnonzero(concept == c)
        members = members[split_rng.permutation(len(members))]
        n_test = max(1, int(round(cfg.test_frac * len(members))))
        n_val = int(round(cfg.val_frac * len(members)))
        split[members[:n_test]] = 2
        split[members[n_test : n_test + n_val]] = 1
    return TriModalDataset(cfg, seed, concept, brain, image, text, qa_text, qa_slot, qa_value, split, mixing)


class FeatureEncoder:
    """Frozen stand-in for pretrained image/text feature extractors.

    ``image_features`` and ``text_features`` are unit-norm pooled embeddings;
    ``text_hidden`` gives per-token hidden states (token embedding plus
    position embedding).
    """

    def __init__(self, cfg: SynthConfig, seed: int = 0):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
        F = cfg.feature_dim
        self.image_table = rng.normal(0.0, 1.0 / np.sqrt(F), size=(cfg.image_vocab, F))
        self.text_table = rng.normal(0.0, 1.0 / np.sqrt(F), size=(cfg.text_vocab, F))
        self.text_pos = rng.normal(0.0, 0.5 / np.sqrt(F), size=(cfg.text_len, F))

    @staticmethod
    def _pool(emb: np.ndarray) -> np.ndarray:
        v = emb.mean(axis=-2)
        return v / np.linalg.norm(v, axis=-1, keepdims=True)

    def image_features(self, image_tokens) -> np.ndarray:
        return self._pool(self.image_table[np.asarray(image_tokens)])

    def text_features(self, text_tokens) -> np.ndarray:
        return self._pool(self.text_table[np.asarray(text_tokens)])

    def text_hidden(self, text_tokens) -> np.ndarray:
        return self.text_table[np.asarray(text_tokens)] + self.text_pos


# -- persistence --------------------------------------------------------
def save(ds: TriModalDataset, path) -> None:
    path = Path(path)
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "config_hash": ds.config.digest(),
        "seed": ds.seed,
        "config": asdict(ds.config),
        "n": len(ds),
        "mixing": ds.mixing.tolist(),
    }
    lines = [json.dumps(header, sort_keys=True)]
    for i in range(len(ds)):
        rec = {
            "i": i,
            "split": ds.SPLITS[int(ds.split[i])],
            "concept": int(ds.concept[i]),
            "brain": ds.brain[i].tolist(),
            "image": ds.image[i].tolist(),
            "text": ds.text[i].tolist(),
            "qa_text": ds.qa_text[i].tolist(),
            "qa_slot": int(ds.qa_slot[i]),
            "qa_value": int(ds.qa_value[i]),
        }
        lines.append(json.dumps(rec, sort_keys=True))
    path.write_text("\n".join(lines) + "\n")


def load(path) -> TriModalDataset:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ConfigError(f"{path}: empty dataset file")
    header = json.loads(lines[0])
    if header.get("format") != FORMAT_NAME:
        raise ConfigError(f"{path}: not a {FORMAT_NAME} file")
    if header.get("version") != FORMAT_VERSION:
        raise ConfigError(f"{path}: dataset version {header.get('version')} != supported {FORMAT_VERSION}")
    cfg = SynthConfig(**header["config"])
    if cfg.digest() != header["config_hash"]:
        raise ConfigError(f"{path}: config hash mismatch")
    recs = [json.loads(x) for x in lines[1:]]
    if len(recs) != header["n"]:
        raise ConfigError(f"{path}: expected {header['n']} records, found {len(recs)}")
    return TriModalDataset(
        cfg,
        header["seed"],
        np.array([r["concept"] for r in recs], dtype=np.int64),
        np.array([r["brain"] for r in recs], dtype=np.float64),
        np.array([r["image"] for r in recs], dtype=np.int64),
        np.array([r["text"] for r in recs], dtype=np.int64),
        np.array([r["qa_text"] for r in recs], dtype=np.int64),
        np.array([r["qa_slot"] for r in recs], dtype=np.int64),
        np.array([r["qa_value"] for r in recs], dtype=np.int64),
        np.array([TriModalDataset.SPLITS.index(r["split"]) for r in recs], dtype=np.int64),
        np.array(header["mixing"], dtype=np.float64),
    )
