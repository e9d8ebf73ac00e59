#!/usr/bin/env python3
# Two-sample testing on the Blob mixture, one batch at a time.
#
# Run with: python3 demos/01_two_sample_blob.py   (about a minute)

# %%
import math

import numpy as np

from davt import PairedNull, SequentialTestSpec, TestConfig, TrainingParams, init_model, run_sequential
from davt.datasets import BlobParams, gen_blob, make_rng
from davt.operators import PROJECT_FIRST, PROJECT_SWAP, SWAP, IDENTITY

# %% [markdown]
# Each observation is a pair (X, Y). Under the null X and Y come from the same
# nine-component mixture; under the alternative Y's components are stretched
# and rotated. Two ways to phrase "same law" as operators:
#   swap vs identity            (X, Y) and (Y, X) have the same law
#   project-after-swap vs project   X and Y have the same law

# %%
rng = make_rng(7)
alt = BlobParams(hypothesis="alt")
stream = [gen_blob(90, alt, rng) for _ in range(30)]
print("batch shape:", stream[0].data.shape, "tag:", stream[0].tag.value)

# %%
def run(null, input_dim, seed=1):
    model = init_model((input_dim, 30, 30, 1), make_rng(seed), layer_norm=True)
    spec = SequentialTestSpec(TestConfig(alpha=0.05, batch_size=90, t_max=30), null, TrainingParams(), model)
    return run_sequential(stream, spec)

projected = run(PairedNull(PROJECT_SWAP, PROJECT_FIRST), 2)
swapped = run(PairedNull(SWAP, IDENTITY), 4)

# %%
threshold = math.log(20)
for name, rec in (("project/swap", projected), ("swap/identity", swapped)):
    lw = np.array([w for _, w in rec.trajectory])
    print(f"{name:14s} stop={rec.stopping_time}  samples={rec.samples_consumed}")
    print("   log-wealth:", " ".join(f"{w:+.2f}" for w in lw))
print(f"rejection line: log(1/alpha) = {threshold:.3f}")

# %% [markdown]
# The running diagnostics hold the per-batch score, the mean log-payoff of the
# current model and the growth threshold it has to beat for power one.

# %%
for t, score, growth, needed in projected.diagnostics[:6]:
    print(f"t={t:2d} score={score:8.3f} growth={growth:+.4f} needed={needed:.4f}")
