#!/usr/bin/env python3
# Model-X conditional independence: is U independent of V given W?
#
# Run with: python3 demos/02_conditional_independence.py

# %%
import numpy as np

from davt import PairedNull, SequentialTestSpec, TestConfig, TrainingParams, init_model, run_sequential
from davt.datasets import CitParams, gen_cit, make_rng, modelx_resample_batch
from davt.operators import PROJECT_FIRST, SWAP, compose

# %% [markdown]
# The law of U given W is known, so every triple (U, V, W) can be paired with
# a copy (U~, V, W) where U~ is redrawn from that law. Under the null the two
# halves of the pair are exchangeable.

# %%
rng = make_rng(3)
coeffs = CitParams.random(20, make_rng(99))
for hypothesis in ("null", "alt"):
    params = CitParams(coeffs.d, coeffs.a, coeffs.b, hypothesis)
    triples = gen_cit(2000, params, rng)
    u, v = triples.data[:, 0], triples.data[:, 1]
    print(f"{hypothesis:5s} corr(U, V) = {np.corrcoef(u, v)[0, 1]:+.3f}")

# %%
def stream(hypothesis, seed, batches=40):
    params = CitParams(coeffs.d, coeffs.a, coeffs.b, hypothesis)
    r = make_rng(seed)
    for _ in range(batches):
        yield modelx_resample_batch(gen_cit(100, params, r), params, r)

null = PairedNull(PROJECT_FIRST, compose(PROJECT_FIRST, SWAP))
spec = SequentialTestSpec(
    TestConfig(batch_size=100, t_max=40), null, TrainingParams(l2_coeff=0.01), init_model((22, 128, 1), make_rng(5))
)

# %%
for hypothesis in ("alt", "null"):
    rec = run_sequential(stream(hypothesis, 11), spec)
    print(f"{hypothesis:5s} decision={rec.decision.value:8s} stop={rec.stopping_time} final log-wealth={rec.final_log_wealth:+.2f}")
