import numpy as np
import pytest

import helpers
from trimodal import diffarray as da
from trimodal.corruption import BRAIN, IMAGE, MODALITIES, TASKS, TEXT
from trimodal.denoiser import Denoiser, DenoiserConfig, predict_xhat0

ISOLATION_TASKS = ("I->B", "T->B", "B->I", "B->T")


def test_logit_shapes(rng):
    model = helpers.toy_denoiser()
    out = model.forward(helpers.toy_tokens(rng, 3), 0.4, TASKS["I&T->B"])
    c = helpers.TOY_DENOISER
    for m in MODALITIES:
        assert out[m].shape == (3, c.lengths[m], c.vocab[m])


def test_missing_streams_filled_with_mask(rng):
    model = helpers.toy_denoiser()
    tok = helpers.toy_tokens(rng, 2)
    full = dict(tok)
    full[TEXT] = np.full_like(tok[TEXT], model.mask_id(TEXT))
    a = model.forward({IMAGE: tok[IMAGE], BRAIN: tok[BRAIN]}, 0.3, TASKS["I->B"])
    b = model.forward(full, 0.3, TASKS["I->B"])
    for m in MODALITIES:
        np.testing.assert_array_equal(a[m].data, b[m].data)


@pytest.mark.parametrize("task", ISOLATION_TASKS)
def test_excluded_stream_cannot_leak(task, rng):
    model = helpers.toy_denoiser()
    spec = TASKS[task]
    base = helpers.toy_tokens(rng, 2)
    ref = model.forward(base, 0.6, spec)
    for _ in range(5):
        pert = {m: v.copy() for m, v in base.items()}
        for m in spec.excluded:
            pert[m] = rng.integers(0, model.cfg.vocab[m] + 1, size=pert[m].shape)
        out = model.forward(pert, 0.6, spec)
        for m in spec.active:
            np.testing.assert_array_equal(out[m].data, ref[m].data)


def test_excluded_stream_matters_when_active(rng):
    model = helpers.toy_denoiser()
    base = helpers.toy_tokens(rng, 2)
    pert = dict(base)
    pert[TEXT] = (base[TEXT] + 1) % model.cfg.vocab[TEXT]
    a = model.forward(base, 0.6, TASKS["I&T->B"])[BRAIN].data
    b = model.forward(pert, 0.6, TASKS["I&T->B"])[BRAIN].data
    assert not np.array_equal(a, b)


def test_mask_rows_frozen_under_training(rng):
    from trimodal.nn import AdamW

    model = helpers.toy_denoiser()
    before = model.mask_rows()
    opt = AdamW(weight_decay=0.1)
    for _ in range(3):
        tok = helpers.toy_tokens(rng, 2)
        tok[BRAIN][:, 0] = model.mask_id(BRAIN)
        model.params.zero_grad()
        out = model.forward(tok, 0.5, TASKS["I&T->B"])
        da.tsum(out[BRAIN] * out[BRAIN]).backward()
        opt.step(model.params, lr=0.05)
    after = model.mask_rows()
    for m in MODALITIES:
        np.testing.assert_array_equal(before[m], after[m])


def test_predict_is_distribution(rng):
    model = helpers.toy_denoiser()
    p = model.predict(helpers.toy_tokens(rng, 2), 0.9, TASKS["B->I&T"])
    for m in MODALITIES:
        np.testing.assert_allclose(p[m].sum(-1), 1.0)
    big = predict_xhat0(np.array([[1000.0, 0.0, -1000.0]]))
    assert np.all(np.isfinite(big))


def test_width_must_divide_heads():
    with pytest.raises(ValueError):
        Denoiser(DenoiserConfig(width=10, n_heads=4))


def test_new_module_names_are_brain_branch():
    names = helpers.toy_denoiser().new_module_names()
    assert "emb.brain" in names and all("brain" in n for n in names)
