"""Acceptance gate: twelve criteria, one PASS/FAIL line each.

Criteria 8-10 train real models on the synthetic dataset for three seeds and
take medians; they share one training run per seed.  Expect roughly
10-15 minutes per seed on a single CPU core.
"""

from __future__ import annotations

import time
import zlib

import numpy as np
import pytest
from scipy import integrate, stats

import helpers
import oracles
from conftest import record
from test_diffarray import primitive_cases
from trimodal import cli, config, metrics, pipeline, schedule, tokenizer as tk
from trimodal import diffarray as da
from trimodal.corruption import BRAIN, IMAGE, MODALITIES, TASKS, TEXT, corrupt_for_task
from trimodal.denoiser import Denoiser
from trimodal.sampler import denoise_loop, reverse_step_distribution
from trimodal.tasks import TokenData, run_curriculum, unified_loss

SEEDS = (0, 1, 2)


def verdict(n, ok, detail, elapsed=None, limit=None):
    if limit is not None:
        detail += f" [{elapsed:.1f}s / limit {limit:.0f}s]"
        ok = ok and elapsed < limit
    record(n, bool(ok), detail)
    assert ok, detail


# ---------------------------------------------------------------- 1
def test_c01_schedule():
    t0 = time.perf_counter()
    total, _ = integrate.quad(schedule.time_pdf, 0.0, 1.0, limit=200, points=[0.5])
    ends = schedule.alpha(0.0) == 1.0 and schedule.alpha(1.0) == 0.0
    u = np.random.default_rng(2024).random(100_000)
    t = np.array([schedule.sample_timestep(float(x)) for x in u])
    edges = np.linspace(0.05, 1.0, 21)
    obs, _ = np.histogram(t[t > 0.05], bins=edges)
    mass = np.array([integrate.quad(schedule.time_pdf, a, b)[0] for a, b in zip(edges[:-1], edges[1:])])
    exp = mass / mass.sum() * obs.sum()
    p = stats.chisquare(obs, exp).pvalue
    ok = abs(total - 1) < 1e-6 and ends and p > 1e-3
    verdict(1, ok, f"schedule: |int pdf - 1|={abs(total - 1):.1e}, endpoints exact={ends}, chi2 p={p:.3f}",
            time.perf_counter() - t0, 5)


# ---------------------------------------------------------------- 2
def test_c02_reverse_step():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    worst_sum = worst_mask = 0.0
    for _ in range(1000):
        a_t, a_s = np.sort(rng.random(2))
        if a_t == a_s:
            continue
        V = int(rng.integers(2, 20))
        x = np.append(rng.dirichlet(np.ones(V)), 0.0)
        p = reverse_step_distribution(x, a_s, a_t)
        worst_sum = max(worst_sum, abs(p.sum() - 1.0), -min(p.min(), 0.0))
        worst_mask = max(worst_mask, abs(p[-1] - (1 - a_s) / (1 - a_t)))
    ok = worst_sum < 1e-12 and worst_mask < 1e-12
    verdict(2, ok, f"reverse step: max sum error {worst_sum:.1e}, max MASK-mass error {worst_mask:.1e}",
            time.perf_counter() - t0, 1)


# ---------------------------------------------------------------- 3
def test_c03_oracle_denoising():
    from test_sampler import chain_sampler_law, exact_chain_law

    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    vocab = {IMAGE: 9, TEXT: 11, BRAIN: 6}
    exact = True
    for T in (1, 3, 12):
        x0 = {IMAGE: rng.integers(0, 9, (100, 12)), TEXT: rng.integers(0, 11, (100, 7))}

        def perfect(tokens, t, task):
            return {m: np.eye(vocab[m])[x0[m]] for m in x0}

        start = {IMAGE: np.full((100, 12), 9), TEXT: np.full((100, 7), 11), BRAIN: rng.integers(0, 6, (100, 4))}
        out = denoise_loop(start, TASKS["B->I&T"], perfect, T, rng, vocab)
        exact &= all(np.array_equal(out[m], x0[m]) for m in x0)
    emp, _ = chain_sampler_law(3, 3, 100_000, seed=11)
    tv = 0.5 * np.abs(emp - exact_chain_law(3, 3)).sum()
    ok = exact and tv <= 0.02
    verdict(3, ok, f"oracle denoising: perfect recovery T in (1,3,12)={exact}, enumeration TV={tv:.4f}",
            time.perf_counter() - t0, 30)


# ---------------------------------------------------------------- 4
def test_c04_loss_locality():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    model = helpers.toy_denoiser()
    vocab = model.cfg.vocab
    names = list(TASKS)
    failures = 0
    for case in range(100):
        task = TASKS[names[case % len(names)]]
        clean = helpers.toy_tokens(rng, 3)
        t = float(rng.uniform(0.05, 1.0))
        c = corrupt_for_task(clean, vocab, task, t, rng, (1, 3))
        logits = {m: da.Tensor(rng.normal(size=clean[m].shape + (vocab[m],))) for m in MODALITIES}
        base = unified_loss(logits, clean, c, t).item()
        for m in MODALITIES:
            free = ~c.masks[m]
            logits[m].data[free] += rng.normal(0, 10, size=logits[m].data[free].shape)
        failures += unified_loss(logits, clean, c, t).item() != base
    verdict(4, failures == 0, f"loss locality: {100 - failures}/100 perturbations bit-invariant",
            time.perf_counter() - t0, 5)


# ---------------------------------------------------------------- 5
def test_c05_attention_isolation():
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    model = Denoiser(seed=5)
    c = model.cfg
    ok_cases = total = 0
    for name in ("I->B", "T->B", "B->I", "B->T"):
        task = TASKS[name]
        base = {m: rng.integers(0, c.vocab[m], (2, c.lengths[m])) for m in MODALITIES}
        t = 0.5
        ref = model.forward(base, t, task)
        for _ in range(20):
            pert = {m: v.copy() for m, v in base.items()}
            for m in task.excluded:
                pert[m] = rng.integers(0, c.vocab[m] + 1, pert[m].shape)
            out = model.forward(pert, t, task)
            total += 1
            ok_cases += all(np.array_equal(out[m].data, ref[m].data) for m in task.active)
    verdict(5, ok_cases == total, f"attention isolation: {ok_cases}/{total} cases bit-identical",
            time.perf_counter() - t0, 10)


# ---------------------------------------------------------------- 6
def test_c06_gradient_fidelity():
    t0 = time.perf_counter()
    prim = {}
    for name in primitive_cases(np.random.default_rng(0)):
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        f, params = primitive_cases(rng)[name]
        w = da.Tensor(np.random.default_rng(5).normal(size=f().shape))
        prim[name] = da.grad_check(lambda: da.tsum(f() * w), params, eps=1e-6)
    worst_prim = max(prim.values())
    model, loss = helpers.toy_tokenizer_case()
    tok_err = da.grad_check(loss, helpers.downstream_of_quantizer(model), eps=1e-4)
    rng = np.random.default_rng(6)
    dn = helpers.toy_denoiser()
    clean = helpers.toy_tokens(rng, 3)
    c = corrupt_for_task(clean, dn.cfg.vocab, TASKS["B->I&T"], 0.8, rng)
    uni_err = da.grad_check(lambda: unified_loss(dn.forward(c.tokens, c.t, c.task), clean, c, c.t),
                            [p for _, p in dn.params.items()], eps=1e-4)
    ok = worst_prim < 1e-4 and tok_err < 1e-3 and uni_err < 1e-3
    verdict(6, ok, f"gradients: worst primitive {worst_prim:.1e} ({max(prim, key=prim.get)}), "
                   f"tokenizer loss {tok_err:.1e}, unified loss {uni_err:.1e}", time.perf_counter() - t0, 60)


# ---------------------------------------------------------------- 7
def test_c07_vq_ema():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    cb = tk.Codebook.create(16, 4, rng)
    cb.codes[9] = cb.codes[3]  # duplicate code: ties must resolve to 3
    lat = np.concatenate([rng.normal(size=(990, 4)), cb.codes[[3, 9, 0, 1, 2, 5, 7, 11, 12, 15]]])
    idx, q = tk.quantize(da.Tensor(lat), cb)
    nn_ok = np.array_equal(idx, oracles.nearest_loop(lat, cb.codes))

    cb0 = tk.Codebook.create(8, 4, rng, decay=0.0, epsilon=0.0)
    batch = rng.normal(size=(64, 4))
    assign = tk.nearest_codes(batch, cb0.codes)
    tk.ema_update(cb0, batch, assign)
    used = np.unique(assign)
    means = np.stack([batch[assign == k].sum(axis=0) / np.sum(assign == k) for k in used])
    decay0_err = np.abs(cb0.codes[used] - means).max()

    cb1 = tk.Codebook.create(4, 2, rng, decay=0.99)
    centers = np.array([[3.0, 0], [-3, 0], [0, 3], [0, -3]])
    a = np.repeat(np.arange(4), 64)
    data = centers[a] + rng.normal(0, 0.3, (256, 2))
    target = np.stack([data[a == k].mean(axis=0) for k in range(4)])
    for _ in range(500):
        tk.ema_update(cb1, data, a)
    conv_err = np.abs(cb1.codes - target).max()

    lt = da.Tensor(rng.normal(size=(20, 4)), requires_grad=True)
    _, qt = tk.quantize(lt, cb)
    g = rng.normal(size=(20, 4))
    da.tsum(qt * da.Tensor(g)).backward()
    st_ok = np.array_equal(lt.grad, g) and np.array_equal(qt.data, cb.codes[tk.nearest_codes(lt.data, cb.codes)])

    ok = nn_ok and decay0_err < 1e-12 and conv_err < 1e-3 and st_ok
    verdict(7, ok, f"VQ/EMA: brute-force NN match={nn_ok}, decay-0 error {decay0_err:.1e}, "
                   f"decay-0.99 error after 500 updates {conv_err:.1e}, straight-through={st_ok}",
            time.perf_counter() - t0, 10)


# ---------------------------------------------------------------- 8-10
class SeedRun:
    """Lazily trains the per-seed pipeline once and caches every intermediate."""

    def __init__(self, seed):
        self.seed = seed
        self.cfg = config.default_config(seed)
        self.times = {}
        self._tok = None
        self._cur = None

    def tokenizers(self):
        if self._tok is None:
            t0 = time.perf_counter()
            cfg = self.cfg
            ds, fe = pipeline.build_dataset(cfg)
            pred = pipeline.fit_predictor(cfg, ds, fe)
            vq_only = tk.train_tokenizer(ds, fe, pred, cfg.tokenizer_config(),
                                         tk.TokenizerTrainConfig(**{**cfg.tokenizer_train.__dict__, "alignment": False}), self.seed)
            full = pipeline.fit_tokenizer(cfg, ds, fe, pred)
            res = {}
            for name, m in (("vq", vq_only), ("full", full)):
                res[name] = {"retrieval": tk.brain_image_retrieval(m, ds, fe, "test"), "usage": tk.split_usage(m, ds, "test")}
            self._tok = dict(ds=ds, fe=fe, pred=pred, full=full, scores=res)
            self.times["tokenizer"] = time.perf_counter() - t0
        return self._tok

    def curriculum(self):
        if self._cur is None:
            tok = self.tokenizers()
            t0 = time.perf_counter()
            data = TokenData.build(tok["ds"], tok["full"])
            trainer = pipeline.make_trainer(self.cfg, data)
            stage_metrics, stage_times = {}, {}

            def on_end(tr, stage):
                stage_times[stage.name] = time.perf_counter() - t0
                stage_metrics[stage.name] = pipeline.stage_metrics(
                    tr.model, tok["full"], data, tok["ds"].brain, self.cfg, with_bqa=stage.name == "stage2")
                return stage_metrics[stage.name]

            run_curriculum(trainer, self.cfg.stages(), on_stage_end=on_end)
            self._cur = stage_metrics
            self.times["stage1"] = stage_times["stage1.2"]
            self.times["stage2"] = stage_times["stage2"] - stage_times["stage1.2"]
        return self._cur


@pytest.fixture(scope="module")
def seed_runs():
    return {s: SeedRun(s) for s in SEEDS}


@pytest.mark.slow
def test_c08_tokenizer_ablation(seed_runs):
    chance = 1 / 64
    rows = [seed_runs[s].tokenizers()["scores"] for s in SEEDS]
    vq_ret = np.median([r["vq"]["retrieval"] for r in rows])
    full_ret = np.median([r["full"]["retrieval"] for r in rows])
    gain = np.median([r["full"]["usage"] - r["vq"]["usage"] for r in rows])
    per = "; ".join(f"s{s}: ret {r['vq']['retrieval'] * 64:.0f}->{r['full']['retrieval'] * 64:.0f}/64, "
                    f"usage {r['vq']['usage']:.2f}->{r['full']['usage']:.2f}" for s, r in zip(SEEDS, rows))
    ok = vq_ret <= 2 * chance and full_ret >= 4 * chance and gain >= 0.10
    worst = max(seed_runs[s].times["tokenizer"] for s in SEEDS)
    verdict(8, ok, f"tokenizer ablation (median): VQ-only top-1 {vq_ret:.4f} (<= {2 * chance:.4f}), "
                   f"full {full_ret:.4f} (>= {4 * chance:.4f}), usage gain {gain * 100:.1f}pp (>= 10) | {per}",
            worst, 600)


@pytest.mark.slow
def test_c09_curriculum(seed_runs):
    res = [seed_runs[s].curriculum()["stage1.2"] for s in SEEDS]
    b2i = np.median([r["B->I"]["retrieval"] for r in res])
    g = {k: np.median([r[k]["pcc"] for r in res]) for k in ("I&T->B", "I->B", "T->B")}
    joint_ok = g["I&T->B"] >= max(g["I->B"], g["T->B"]) - 0.02
    per = "; ".join(f"s{s}: B->I {r['B->I']['retrieval']:.2f}, gPCC I&T {r['I&T->B']['pcc']:.3f} "
                    f"I {r['I->B']['pcc']:.3f} T {r['T->B']['pcc']:.3f}" for s, r in zip(SEEDS, res))
    ok = b2i >= 4 / 8 and g["I&T->B"] >= 0.5 and joint_ok
    worst = max(seed_runs[s].times["stage1"] for s in SEEDS)
    verdict(9, ok, f"curriculum (median): B->I concept top-1 {b2i:.3f} (>= 0.5), gPCC I&T->B {g['I&T->B']:.3f} "
                   f"(>= 0.5), I->B {g['I->B']:.3f}, T->B {g['T->B']:.3f}, joint>=max-0.02 {joint_ok} | {per}",
            worst, 1800)


@pytest.mark.slow
def test_c10_bqa(seed_runs):
    acc = [seed_runs[s].curriculum()["stage2"]["BQA"]["accuracy"] for s in SEEDS]
    med = float(np.median(acc))
    worst = max(seed_runs[s].times["stage2"] for s in SEEDS)
    verdict(10, med >= 4 / 8, f"BQA (median): accuracy {med:.3f} (>= 0.5 = 4x uniform 1/8) | per seed {acc}",
            worst, 600)


# ---------------------------------------------------------------- 11
def test_c11_metric_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(5):
        X, Y = rng.normal(size=(8, 6)), rng.normal(size=(8, 6))
        worst = max(worst, abs(metrics.pcc(X[0], Y[0]) - oracles.pearson_loop(list(X[0]), list(Y[0]))))
        A, B = metrics.rdm(X), metrics.rdm(Y)
        worst = max(worst, np.abs(A - oracles.rdm_loop(X)).max())
        worst = max(worst, abs(metrics.rsa(A, B) - oracles.rsa_loop(A, B)))
        for k in (1, 3):
            worst = max(worst, abs(metrics.retrieval_topk(X, Y, k) - oracles.retrieval_loop(X, Y, k)))
    rand = metrics.retrieval_topk(rng.normal(size=(1000, 64)), rng.normal(size=(1000, 64)), 50)
    ok = worst < 1e-10 and abs(rand - 0.05) <= 0.02
    verdict(11, ok, f"metric oracles: max deviation {worst:.1e}, random top-50/1000 = {rand:.3f} (0.05 +- 0.02)",
            time.perf_counter() - t0, 30)


# ---------------------------------------------------------------- 12
TWIN = [
    "data.n_samples=128", "data.n_voxel=64",
    "predictor.steps=20", "tokenizer_train.steps=12", "tokenizer_train.batch=32",
    "denoiser.width=32", "denoiser.n_blocks=1",
    "curriculum.stages.0.steps=5", "curriculum.stages.1.steps=5", "curriculum.stages.2.steps=5",
    "curriculum.stages.0.warmup=2", "curriculum.stages.1.warmup=2",
    "curriculum.stages.0.batch_size=16", "curriculum.stages.1.batch_size=16", "curriculum.stages.2.batch_size=16",
    "curriculum.eval_every=4", "sampling.steps=3",
]


def cli_run(cmd, run_dir, *extra):
    argv = [cmd, "--run-dir", str(run_dir), *extra]
    for o in TWIN:
        argv += ["--set", o]
    assert cli.main(argv) == 0, f"{cmd} failed"


def test_c12_determinism_and_resume(tmp_path):
    t0 = time.perf_counter()
    a, b, r = tmp_path / "a", tmp_path / "b", tmp_path / "r"
    for d in (a, b):
        for cmd in ("gen-data", "train-predictor", "train-tokenizer", "train-curriculum", "eval"):
            cli_run(cmd, d)
    files = ("dataset.jsonl", "tokenizer_epochs.csv", "train_metrics.csv", "eval.csv")
    twin = {f: (a / f).read_bytes() == (b / f).read_bytes() for f in files}
    for cmd in ("gen-data", "train-predictor", "train-tokenizer"):
        cli_run(cmd, r)
    cli_run("train-curriculum", r, "--max-steps", "7")  # pauses inside stage1.2
    paused_at = (r / "train_metrics.csv").read_text().splitlines()[-1].split(",")[0]
    cli_run("train-curriculum", r)
    cli_run("eval", r)
    resumed = all((a / f).read_bytes() == (r / f).read_bytes() for f in ("train_metrics.csv", "eval.csv"))
    ok = all(twin.values()) and resumed and paused_at == "7"
    verdict(12, ok, f"determinism: twin byte-identical {twin}; resume from step {paused_at} "
                    f"reproduces loss trajectory and metrics={resumed}", time.perf_counter() - t0, 600)
