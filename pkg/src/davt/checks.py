"""Fast invariant checks behind ``davt selfcheck``.

Each check returns (name, ok, detail). They use small fixed seeds and finish
in a few seconds; the full property suites live in the test directory.
"""
from __future__ import annotations

import math

import numpy as np

from .baselines import KernelSpec, OnsState, mmd2_unbiased, ons_update, permutation_pvalue
from .core import Batch, Tag
from .datasets import BlobParams, gen_blob, make_rng
from .engine import PairedNull, payoffs
from .harness import derive_seed
from .learner import init_model, regularized_objective_and_gradient
from .operators import IDENTITY, PROJECT_FIRST, PROJECT_SWAP, SWAP, apply_batch


def check_antisymmetry():
    rng = make_rng(1)
    worst = 0.0
    for _ in range(20):
        model = init_model((4, 8, 1), rng, layer_norm=True)
        z = Batch(rng.normal(size=(50, 2, 2)), Tag.PAIR)
        null = PairedNull(SWAP, IDENTITY)
        worst = max(worst, float(np.max(np.abs(payoffs(apply_batch(SWAP, z), model, null) + payoffs(z, model, null)))))
    return "payoff antisymmetry under swap", worst <= 1e-12, f"max |g(swap z) + g(z)| = {worst:.2e}"


def check_martingale():
    rng = make_rng(2)
    model = init_model((2, 16, 1), rng)
    data = gen_blob(20000, BlobParams(hypothesis="null"), rng)
    pay = payoffs(data, model, PairedNull(PROJECT_SWAP, PROJECT_FIRST))
    mean, se = float(np.mean(1 + pay)), float(np.std(pay) / math.sqrt(len(pay)))
    return "null score has mean one", abs(mean - 1) <= 4 * se + 1e-12, f"mean {mean:.5f}, se {se:.5f}"


def check_gradient():
    rng = make_rng(3)
    model = init_model((2, 5, 4, 1), rng, layer_norm=True)
    data = Batch(rng.normal(size=(12, 2, 2)), Tag.PAIR)
    worst = 0.0
    for variant in ("plain", "sigma"):
        _, grad = regularized_objective_and_gradient(model, data, PROJECT_SWAP, PROJECT_FIRST, variant, 0.01, 0.01)
        params = model.params()
        for i, p in enumerate(params):
            for idx in list(np.ndindex(p.shape))[:6]:
                vals = []
                for h in (1e-5, -1e-5):
                    moved = [q.copy() for q in params]
                    moved[i][idx] += h
                    v, _ = regularized_objective_and_gradient(
                        model.with_params(moved), data, PROJECT_SWAP, PROJECT_FIRST, variant, 0.01, 0.01
                    )
                    vals.append(v)
                fd = (vals[0] - vals[1]) / 2e-5
                worst = max(worst, abs(fd - grad.arrays[i][idx]) / (1e-7 + 1e-4 * abs(fd)))
    return "analytic gradient matches finite differences", worst <= 1.0, f"worst scaled error {worst:.3f}"


def check_ons():
    state = OnsState()
    for z in [1.0] * 50 + [-1.0] * 50:
        state = ons_update(state, z)
        if not -0.5 <= state.lam <= 0.5:
            return "ONS fraction stays in [-1/2, 1/2]", False, f"lambda {state.lam}"
    return "ONS fraction stays in [-1/2, 1/2]", True, f"final lambda {state.lam:.4f}"


def check_mmd():
    rng = make_rng(4)
    x, y = rng.normal(size=(6, 2)), rng.normal(size=(6, 2))
    ok = mmd2_unbiased(x, y) == mmd2_unbiased(y, x)
    p = permutation_pvalue(np.ones((5, 2)), np.ones((5, 2)), KernelSpec(permutations=99), rng)
    return "MMD symmetric, degenerate p-value is 1", ok and p == 1.0, f"p = {p}"


def check_seeds():
    seeds = {derive_seed(7, i, r) for i in range(2000) for r in ("data", "model")}
    return "derived seeds are distinct", len(seeds) == 4000, f"{len(seeds)} distinct of 4000"


CHECKS = (check_antisymmetry, check_martingale, check_gradient, check_ons, check_mmd, check_seeds)


def run_checks() -> list[tuple[str, bool, str]]:
    return [check() for check in CHECKS]
