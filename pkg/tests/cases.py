"""Seeded random models, banks and queries shared by the tests."""

from dataclasses import dataclass

import numpy as np

from rangexplain import nn
from rangexplain.experts import encode_many, fit_bank
from rangexplain.query import Query, sigmoid_query, step_query


@dataclass
class Case:
    model: nn.MlpModel
    bank: object
    X: np.ndarray
    x: np.ndarray
    baseline: np.ndarray
    query: Query


def random_model(d, hidden, seed, bias_scale=0.1):
    rng = np.random.default_rng(seed + 10_000)
    model = nn.init_mlp(d, hidden, seed)
    layers = [nn.Layer(l.weights, rng.normal(0.0, bias_scale, l.bias.shape), l.activation) for l in model.layers]
    return nn.MlpModel(tuple(layers), model.feature_names)


def random_query(bank, rng, kind):
    """Step (kind 0), sigmoid (1) or non-negative random weights (2)."""
    lo, hi = bank.covered_range
    if kind == 0:
        return step_query(bank, bank.offset + bank.breakpoints[rng.integers(bank.n_experts)])
    if kind == 1:
        return sigmoid_query(bank, rng.uniform(lo, hi), rng.uniform(0.05, 0.5) * (hi - lo))
    return Query(rng.uniform(0.0, 2.0, size=bank.n_experts))


def random_case(seed, d=4, hidden=(8, 8), n_experts=3, min_contrast=0.25) -> Case:
    """A relu net, a bank fitted to its outputs and a pair (x, baseline).

    The pair is redrawn until the query changes by at least
    ``min_contrast`` times its spread over the data, so relative
    tolerances are meaningful.
    """
    rng = np.random.default_rng(seed)
    model = random_model(d, hidden, seed)
    X = rng.uniform(-1.0, 1.0, size=(400, d))
    bank = fit_bank(nn.predict(model, X), n_experts, top_unbounded=(seed % 3 != 1))
    query = random_query(bank, rng, seed % 3)
    w = query.weights
    q = encode_many(nn.predict(model, X), bank) @ w
    while True:
        i, j = rng.choice(len(X), size=2, replace=False)
        if abs(q[i] - q[j]) >= min_contrast * np.ptp(q):
            return Case(model, bank, X, X[i], X[j], query)
