# %% [markdown]
# # Brain tokenizer: VQ-only vs. aligned
#
# Trains two tokenizers on the same data and predictor.  The plain VQ model
# only reconstructs the brain signal; the aligned model also pulls the
# quantized representation towards image and text features.  We compare
# brain->image retrieval on the held-out split and codebook usage.
# Takes a few minutes per seed on one core.

# %%
import numpy as np

from trimodal import config, pipeline
from trimodal import tokenizer as tk

SEEDS = [0, 1, 2]

# %%
rows = []
for seed in SEEDS:
    cfg = config.default_config(seed)
    ds, fe = pipeline.build_dataset(cfg)
    pred = pipeline.fit_predictor(cfg, ds, fe)
    plain_cfg = tk.TokenizerTrainConfig(**{**cfg.tokenizer_train.__dict__, "alignment": False})
    plain = tk.train_tokenizer(ds, fe, pred, cfg.tokenizer_config(), plain_cfg, seed)
    full = pipeline.fit_tokenizer(cfg, ds, fe, pred)
    for name, m in (("vq-only", plain), ("aligned", full)):
        rows.append((seed, name, tk.brain_image_retrieval(m, ds, fe, "test"), tk.split_usage(m, ds, "test")))
        print(rows[-1])

# %%
print(f"{'model':8s} {'top-1 (median)':>15s} {'usage (median)':>15s}")
for name in ("vq-only", "aligned"):
    r = [x for x in rows if x[1] == name]
    print(f"{name:8s} {np.median([x[2] for x in r]):15.4f} {np.median([x[3] for x in r]):15.3f}")
print("chance top-1:", 1 / len(ds.indices("test")))
