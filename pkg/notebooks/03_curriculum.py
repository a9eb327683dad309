# %% [markdown]
# # Full curriculum on one seed
#
# Stage 1.1 warms up on encoding and decoding, stage 1.2 rebalances towards
# harder tasks, stage 2 adds brain question answering.  At the end of each
# stage we decode and score on the test split.  About 7 minutes on one core.

# %%
import numpy as np

from trimodal import config, pipeline
from trimodal.tasks import TokenData, run_curriculum

cfg = config.default_config(seed=0)
ds, fe = pipeline.build_dataset(cfg)
pred = pipeline.fit_predictor(cfg, ds, fe)
tok = pipeline.fit_tokenizer(cfg, ds, fe, pred)
data = TokenData.build(ds, tok)
trainer = pipeline.make_trainer(cfg, data)

# %%
history = {}


def on_stage_end(tr, stage):
    m = pipeline.stage_metrics(tr.model, tok, data, ds.brain, cfg, with_bqa=stage.name == "stage2")
    history[stage.name] = m
    print(stage.name, m)
    return m


reports = run_curriculum(trainer, cfg.stages(), on_stage_end=on_stage_end)

# %% [markdown]
# Loss per stage (mean of the last 100 steps):

# %%
for r in reports:
    print(r.name, np.mean([row[-1] for row in r.losses[-100:]]))

# %% [markdown]
# The same table as ``trimodal eval`` writes to ``eval.csv``:

# %%
for task, metric, value in pipeline.full_eval(trainer.model, tok, data, ds, fe, cfg):
    print(f"{task:12s} {metric:18s} {value:.4f}")
