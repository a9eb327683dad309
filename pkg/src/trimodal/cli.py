"""``trimodal`` command line.

Every command works inside a run directory ``$TRIMODAL_RUN_ROOT/<config-hash>-s<seed>``
(root defaults to ``./runs``).  Artifacts written there::

    config.yaml                  config snapshot
    dataset.jsonl                gen-data
    predictor.ckpt               train-predictor
    tokenizer.ckpt               train-tokenizer
    tokenizer_epochs.csv         per-epoch usage / retrieval / losses
    denoiser.ckpt                train-curriculum (latest, resumable)
    denoiser-<stage>.ckpt        train-curriculum, at each stage end
    train_metrics.csv            step,stage,task,loss,retrieval,rsa,pcc
    samples/<task>.<stream>.json sample
    eval.csv                     step,metric,value,task,split,seed

Each artifact ``X`` has a sibling ``X.manifest.json``.  Exit codes: 0 ok,
2 invalid config, 3 missing upstream artifact, 4 run directory locked,
5 corrupt artifact, 1 anything else.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import subprocess
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import checkpoint, config as config_mod, evaluation as ev, pipeline, synthdata
from .checkpoint import CheckpointError
from .corruption import TASKS, get_task
from .errors import ConfigError, DependencyError, DomainError
from .tasks import TokenData, run_curriculum

RUN_ROOT_ENV = "TRIMODAL_RUN_ROOT"
COMMANDS = ("init-config", "gen-data", "train-predictor", "train-tokenizer", "train-curriculum", "sample", "eval")
TRAIN_COLUMNS = ("step", "stage", "task", "loss", "retrieval", "rsa", "pcc")
EVAL_COLUMNS = ("step", "metric", "value", "task", "split", "seed")


class LockedError(RuntimeError):
    pass


# -- small utilities -----------------------------------------------------
def fmt(x) -> str:
    """Deterministic text for CSV cells: shortest round-trip repr for floats."""
    if x is None:
        return ""
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, (np.integer,)):
        return str(int(x))
    return str(x)


def write_csv(path: Path, columns, rows, append: bool = False) -> None:
    new = not (append and path.exists())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if new:
        w.writerow(columns)
    for r in rows:
        w.writerow([fmt(r.get(c)) for c in columns])
    with open(path, "w" if new else "a", newline="") as f:
        f.write(buf.getvalue())


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def git_describe() -> str:
    try:
        r = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=Path(__file__).parent,
                           capture_output=True, text=True, timeout=10)
        return r.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


class Run:
    """A run directory plus the bookkeeping shared by all commands."""

    def __init__(self, cfg: config_mod.RunConfig, root=None, run_dir=None):
        self.cfg = cfg
        root = Path(root or os.environ.get(RUN_ROOT_ENV, "runs"))
        self.dir = Path(run_dir) if run_dir else root / f"{cfg.digest()}-s{cfg.seed}"
        self.dir.mkdir(parents=True, exist_ok=True)
        self.t0 = time.time()
        self.command = ""

    def path(self, name: str) -> Path:
        return self.dir / name

    def require(self, name: str, producer: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise DependencyError(f"missing upstream artifact {p} (run `trimodal {producer}` first)")
        return p

    @contextmanager
    def lock(self):
        lock = self.path(".lock")
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise LockedError(f"{self.dir} is locked by another command ({lock}); remove it if stale") from None
        try:
            os.write(fd, str(os.getpid()).encode())
            os.close(fd)
            yield self
        finally:
            lock.unlink(missing_ok=True)

    def snapshot_config(self) -> None:
        p = self.path("config.yaml")
        text = config_mod.dump(self.cfg)
        if not p.exists() or p.read_text() != text:
            p.write_text(text)

    def manifest(self, artifact: Path, extra: dict | None = None) -> None:
        m = {
            "artifact": artifact.name,
            "sha256": sha256_file(artifact),
            "command": self.command,
            "seed": self.cfg.seed,
            "config_hash": self.cfg.digest(),
            "config": self.cfg.to_dict(),
            "git": git_describe(),
            "wall_time_s": round(time.time() - self.t0, 3),
            **(extra or {}),
        }
        artifact.with_name(artifact.name + ".manifest.json").write_text(json.dumps(m, indent=2, sort_keys=True) + "\n")


# -- loaders for upstream artifacts ----------------------------------------
def _dataset(run: Run):
    ds = synthdata.load(run.require("dataset.jsonl", "gen-data"))
    return ds, synthdata.FeatureEncoder(ds.config, run.cfg.seed)


def _predictor(run: Run):
    p = run.require("predictor.ckpt", "train-predictor")
    d = run.cfg.data
    return checkpoint.load_predictor(p, d.n_voxel, d.feature_dim, run.cfg.predictor.hidden)


def _tokenizer(run: Run):
    return checkpoint.load_tokenizer(run.require("tokenizer.ckpt", "train-tokenizer"))


def _trainer(run: Run, data: TokenData, required: bool):
    trainer = pipeline.make_trainer(run.cfg, data)
    p = run.path("denoiser.ckpt")
    if p.exists():
        checkpoint.load_trainer(p, trainer)
    elif required:
        raise DependencyError(f"missing upstream artifact {p} (run `trimodal train-curriculum` first)")
    return trainer


# -- commands --------------------------------------------------------------
def cmd_gen_data(run: Run, args) -> None:
    ds, _ = pipeline.build_dataset(run.cfg)
    out = run.path("dataset.jsonl")
    synthdata.save(ds, out)
    run.manifest(out, {"n": len(ds)})
    print(f"wrote {out} ({len(ds)} samples)")


def cmd_train_predictor(run: Run, args) -> None:
    ds, fe = _dataset(run)
    pred = pipeline.fit_predictor(run.cfg, ds, fe)
    out = run.path("predictor.ckpt")
    checkpoint.save_predictor(out, pred)
    run.manifest(out)
    print(f"wrote {out}")


def cmd_train_tokenizer(run: Run, args) -> None:
    ds, fe = _dataset(run)
    pred = _predictor(run)
    rows = []

    def log(step, row):
        rows.append({"step": step, "epoch": len(rows) + 1, **row})

    tok = pipeline.fit_tokenizer(run.cfg, ds, fe, pred, log)
    out = run.path("tokenizer.ckpt")
    checkpoint.save_tokenizer(out, tok)
    run.manifest(out)
    csv_path = run.path("tokenizer_epochs.csv")
    cols = ("epoch", "step", "codebook_usage", "retrieval_top1_val", "total", "vq", "coarse", "fine", "perceptual")
    write_csv(csv_path, cols, rows)
    run.manifest(csv_path)
    print(f"wrote {out}; test codebook usage {pipeline.tk.split_usage(tok, ds):.3f}")


def cmd_train_curriculum(run: Run, args) -> None:
    cfg = run.cfg
    ds, _ = _dataset(run)
    tok = _tokenizer(run)
    data = TokenData.build(ds, tok)
    trainer = _trainer(run, data, required=False)
    stages = cfg.stages()
    if trainer.stage_index >= len(stages):
        print("curriculum already complete")
        return
    csv_path = run.path("train_metrics.csv")
    if trainer.global_step == 0:
        csv_path.unlink(missing_ok=True)
    pending = []
    every = cfg.curriculum.eval_every

    def eval_rows(stage_name, with_bqa):
        res = pipeline.stage_metrics(trainer.model, tok, data, ds.brain, cfg, with_bqa)
        for task, vals in res.items():
            pending.append({"step": trainer.global_step, "stage": stage_name, "task": task,
                            "retrieval": vals.get("retrieval", vals.get("accuracy")),
                            "rsa": vals.get("rsa"), "pcc": vals.get("pcc")})
        return res

    def on_step(tr, stage, res):
        pending.append({"step": res.step, "stage": stage.name, "task": res.task, "loss": res.loss})
        if every and res.step % every == 0 and tr.stage_step < stage.steps:
            eval_rows(stage.name, "BQA" in stage.task_probs()[0])

    def on_stage_end(tr, stage):
        res = eval_rows(stage.name, "BQA" in stage.task_probs()[0])
        # stage checkpoints record the position *after* the stage
        tr.stage_index += 1
        tr.stage_step = 0
        p = run.path(f"denoiser-{stage.name}.ckpt")
        checkpoint.save_trainer(p, tr, {"stage": stage.name})
        tr.stage_index -= 1
        tr.stage_step = stage.steps
        run.manifest(p)
        print(f"{stage.name} done at step {tr.global_step}: " + ", ".join(
            f"{k} {next(iter(v.values())):.3f}" for k, v in res.items()), flush=True)
        return res

    run_curriculum(trainer, stages, stop_after=args.stop_after, max_steps=args.max_steps,
                   on_step=on_step, on_stage_end=on_stage_end)
    write_csv(csv_path, TRAIN_COLUMNS, pending, append=True)
    run.manifest(csv_path)
    out = run.path("denoiser.ckpt")
    checkpoint.save_trainer(out, trainer)
    run.manifest(out, {"global_step": trainer.global_step, "stage_index": trainer.stage_index})
    print(f"wrote {out} at step {trainer.global_step}")


def _task_arg(args) -> str:
    if not args.task:
        raise ConfigError("--task is required (one of: " + ", ".join(TASKS) + ")")
    try:
        return get_task(args.task).name
    except DomainError as e:
        raise ConfigError(f"--task: {e}") from None


def cmd_sample(run: Run, args) -> None:
    cfg = run.cfg
    task = _task_arg(args)
    ds, _ = _dataset(run)
    tok = _tokenizer(run)
    data = TokenData.build(ds, tok)
    trainer = _trainer(run, data, required=True)
    steps = args.steps or cfg.sampling.steps
    rule = args.decode_rule or cfg.sampling.decode_rule
    idx = data.indices(cfg.sampling.split)
    out = ev.generate(trainer.model, data, task, idx, steps, np.random.default_rng(cfg.seed), rule)
    out_dir = Path(args.out) if args.out else run.path("samples")
    out_dir.mkdir(parents=True, exist_ok=True)
    slug = task.replace("->", "-to-").replace("&", "+")
    for m in TASKS[task].target_streams:
        tokens = out[m]
        if TASKS[task].text_layout == "qa":
            a, b = data.answer_span
            tokens = tokens[:, a:b]
        p = out_dir / f"{slug}.{m}.json"
        p.write_text(json.dumps({"task": task, "stream": m, "steps": steps, "decode_rule": rule,
                                 "split": cfg.sampling.split, "indices": idx.tolist(),
                                 "tokens": tokens.tolist()}) + "\n")
        run.manifest(p, {"task": task})
        print(f"wrote {p}")


def cmd_eval(run: Run, args) -> None:
    cfg = run.cfg
    ds, fe = _dataset(run)
    tok = _tokenizer(run)
    data = TokenData.build(ds, tok)
    trainer = _trainer(run, data, required=True)
    split = cfg.sampling.split
    rows = pipeline.full_eval(trainer.model, tok, data, ds, fe, cfg, args.steps, args.decode_rule, split)
    out = Path(args.out) if args.out else run.path("eval.csv")
    write_csv(out, EVAL_COLUMNS, [
        {"step": trainer.global_step, "metric": metric, "value": value, "task": task, "split": split, "seed": cfg.seed}
        for task, metric, value in rows
    ])
    run.manifest(out)
    for task, metric, value in rows:
        print(f"{task:10s} {metric:22s} {value:.4f}")


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train-predictor": cmd_train_predictor,
    "train-tokenizer": cmd_train_tokenizer,
    "train-curriculum": cmd_train_curriculum,
    "sample": cmd_sample,
    "eval": cmd_eval,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="trimodal", description="Tri-modal masked discrete diffusion on synthetic data.")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", help="YAML run config (default: built-in defaults)")
    ap.add_argument("--seed", type=int, help="override the config seed")
    ap.add_argument("--task", help="task for `sample`, e.g. 'B->I&T'")
    ap.add_argument("--steps", type=int, help="number of sampler steps T (sample/eval)")
    ap.add_argument("--decode-rule", choices=config_mod.DECODE_RULES, help="final-step decoding (sample/eval)")
    ap.add_argument("--out", help="output path: YAML for init-config, directory for sample, CSV for eval")
    ap.add_argument("--run-dir", help="explicit run directory (default: $%s/<hash>-s<seed>)" % RUN_ROOT_ENV)
    ap.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                    help="config override, e.g. --set tokenizer_train.steps=100 (repeatable)")
    ap.add_argument("--max-steps", type=int, help="train-curriculum: pause after this many steps (resume by re-running)")
    ap.add_argument("--stop-after", choices=("stage1.1", "stage1.2", "stage2"), help="train-curriculum: last stage to run")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.steps is not None and args.steps < 1:
            raise ConfigError("--steps must be >= 1")
        cfg = config_mod.load(args.config, args.overrides, args.seed)
        if args.command == "init-config":
            text = config_mod.dump(cfg)
            if args.out:
                Path(args.out).write_text(text)
                print(f"wrote {args.out}")
            else:
                sys.stdout.write(text)
            return 0
        run = Run(cfg, run_dir=args.run_dir)
        run.command = args.command
        with run.lock():
            run.snapshot_config()
            HANDLERS[args.command](run, args)
        return 0
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DependencyError as e:
        print(f"dependency error: {e}", file=sys.stderr)
        return 3
    except LockedError as e:
        print(f"locked: {e}", file=sys.stderr)
        return 4
    except CheckpointError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return 5


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
