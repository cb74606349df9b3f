"""Feature attribution for models, range experts and queries.

Three backends:

* occlusion / Shapley values (exact enumeration or permutation sampling),
* integrated gradients (midpoint rule along the straight path),
* layer-wise relevance propagation with the epsilon rule, optionally
  routed through surrogate expert heads.

Expert-level and query-level explanations are built on top of these.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

from . import nn
from .errors import ConfigurationError, InputShapeError, NoCandidateError, SizeError, ValidationError
from .experts import ModelFunction, RangeExpertBank, ScalarFunction, WeightedExpertFunction, encode_many
from .query import Query

MAX_EXACT_FEATURES = 20

METHOD_ALIASES = {
    "shapley": "shapley_exact",
    "shapley_exact": "shapley_exact",
    "exact": "shapley_exact",
    "shapley_sampled": "shapley_sampled",
    "sampled": "shapley_sampled",
    "ig": "integrated_gradients",
    "integrated_gradients": "integrated_gradients",
    "lrp": "lrp",
}


def canonical_method(method: str) -> str:
    try:
        return METHOD_ALIASES[method]
    except KeyError:
        raise ConfigurationError(f"unknown attribution method {method!r}; "
                                 f"choose from {sorted(set(METHOD_ALIASES))}") from None


# ------------------------------------------------------------------ baselines

@dataclass(frozen=True)
class FixedBaseline:
    x: np.ndarray

    def __str__(self):
        return "fixed(" + ",".join(f"{v:g}" for v in np.asarray(self.x)) + ")"


@dataclass(frozen=True)
class MeanBaseline:
    def __str__(self):
        return "dataset_mean"


@dataclass(frozen=True)
class ConditionalBaseline:
    """Dataset samples whose prediction lies within ``delta`` of ``reference``."""

    reference: float
    delta: float
    n_draws: int = 5
    seed: int = 0

    def __post_init__(self):
        if not self.delta > 0:
            raise ValidationError("delta must be positive")
        if self.n_draws < 1:
            raise ValidationError("n_draws must be positive")

    def __str__(self):
        return f"conditional(ref={self.reference:g}, delta={self.delta:g}, draws={self.n_draws}, seed={self.seed})"


BaselineSpec = Union[FixedBaseline, MeanBaseline, ConditionalBaseline]


def resolve_baseline(spec: BaselineSpec, features=None, model: nn.MlpModel | None = None,
                     predictions=None, rng: np.random.Generator | None = None) -> np.ndarray:
    """Concrete baseline vectors ``(k, d)`` for a baseline spec.

    Conditional draws are uniform with replacement from the qualifying
    samples.  ``predictions`` may be passed to skip re-evaluating the model.
    """
    if isinstance(spec, FixedBaseline):
        x = np.asarray(spec.x, dtype=np.float64).reshape(1, -1)
        if model is not None and x.shape[1] != model.input_dim:
            raise InputShapeError(f"fixed baseline has {x.shape[1]} features, model expects {model.input_dim}")
        return x
    X = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if isinstance(spec, MeanBaseline):
        return X.mean(axis=0, keepdims=True)
    if isinstance(spec, ConditionalBaseline):
        preds = nn.predict(model, X) if predictions is None else np.asarray(predictions)
        ok = np.flatnonzero(np.abs(preds - spec.reference) <= spec.delta)
        if ok.size == 0:
            nearest = float(preds[np.argmin(np.abs(preds - spec.reference))])
            raise NoCandidateError(spec.reference, spec.delta, nearest)
        rng = rng if rng is not None else np.random.default_rng(spec.seed)
        return X[rng.choice(ok, size=spec.n_draws, replace=True)]
    raise ConfigurationError(f"unknown baseline spec {spec!r}")


# ------------------------------------------------------------------ results

@dataclass
class Explanation:
    values: np.ndarray
    method: str
    target: str
    baseline: str
    completeness_gap: float = float("nan")
    per_draw: np.ndarray | None = None
    feature_names: tuple[str, ...] = ()
    extra: dict = field(default_factory=dict)

    def record(self) -> str:
        """Structured text record (one ``key: value`` per line)."""
        names = self.feature_names or tuple(f"x{i}" for i in range(len(self.values)))
        lines = [f"method: {self.method}", f"target: {self.target}", f"baseline: {self.baseline}",
                 f"completeness_gap: {float(self.completeness_gap)!r}"]
        lines += [f"{k}: {v}" for k, v in self.extra.items()]
        if self.per_draw is not None and len(self.per_draw) > 1:
            sd = self.per_draw.std(axis=0)
            lines += [f"value {n} {float(v)!r} sd={float(s)!r}" for n, v, s in zip(names, self.values, sd)]
        else:
            lines += [f"value {n} {float(v)!r}" for n, v in zip(names, self.values)]
        return "\n".join(lines) + "\n"


@dataclass
class AttributionMatrix:
    """Feature-by-expert relevances ``R[i, m]`` plus the expert values at ``x``."""

    R: np.ndarray
    expert_totals: np.ndarray
    method: str
    baseline: str
    feature_names: tuple[str, ...] = ()
    completeness_gaps: np.ndarray | None = None
    # expert values at the (mean) baseline; zeros for LRP's implicit baseline
    baseline_totals: np.ndarray | None = None

    @property
    def column_sums(self):
        return self.R.sum(axis=0)

    def column(self, m) -> np.ndarray:
        return self.R[:, m]

    def combine(self, weights) -> np.ndarray:
        """Query attribution as the weighted sum of expert columns."""
        return self.R @ np.asarray(weights, dtype=np.float64)

    def to_csv(self, path) -> None:
        names = self.feature_names or tuple(f"x{i}" for i in range(self.R.shape[0]))

        def floats(v):
            return [repr(float(t)) for t in v]

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["feature"] + [f"expert_{m}" for m in range(self.R.shape[1])])
            for name, row in zip(names, self.R):
                w.writerow([name] + floats(row))
            w.writerow(["#expert_totals"] + floats(self.expert_totals))
            if self.baseline_totals is not None:
                w.writerow(["#baseline_totals"] + floats(self.baseline_totals))
            if self.completeness_gaps is not None:
                w.writerow(["#completeness_gaps"] + floats(self.completeness_gaps))
            w.writerow(["#method", self.method])
            w.writerow(["#baseline", self.baseline])

    @classmethod
    def from_csv(cls, path) -> "AttributionMatrix":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or not rows[0] or rows[0][0] != "feature":
            raise ValidationError(f"{path}: not an attribution matrix file")
        names, R, vectors, meta = [], [], {}, {}
        for row in rows[1:]:
            if row[0] in ("#expert_totals", "#baseline_totals", "#completeness_gaps"):
                vectors[row[0][1:]] = np.array([float(v) for v in row[1:]])
            elif row[0].startswith("#"):
                meta[row[0][1:]] = row[1]
            else:
                names.append(row[0])
                R.append([float(v) for v in row[1:]])
        if "expert_totals" not in vectors:
            raise ValidationError(f"{path}: missing #expert_totals row")
        return cls(np.array(R), vectors["expert_totals"], meta.get("method", ""), meta.get("baseline", ""),
                   tuple(names), vectors.get("completeness_gaps"), vectors.get("baseline_totals"))


# ------------------------------------------------------------------ helpers

def _batch_fn(fn) -> Callable[[np.ndarray], np.ndarray]:
    if isinstance(fn, ScalarFunction):
        return fn.batch
    return lambda X: np.asarray(fn(np.atleast_2d(X)), dtype=np.float64)


def _grad_fn(fn, gradient=None):
    if gradient is not None:
        return lambda X: np.atleast_2d(gradient(np.atleast_2d(X)))
    if isinstance(fn, ScalarFunction):
        return fn.gradient_batch
    if hasattr(fn, "gradient"):
        return lambda X: np.atleast_2d(fn.gradient(np.atleast_2d(X)))
    raise ConfigurationError("integrated gradients needs a function with a gradient")


def _as_vec(x, d=None):
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if d is not None and x.shape[0] != d:
        raise InputShapeError(f"expected {d} features, got {x.shape[0]}")
    return x


def _as_baselines(baselines, d):
    B = np.atleast_2d(np.asarray(baselines, dtype=np.float64))
    if B.shape[1] != d:
        raise InputShapeError(f"baseline has {B.shape[1]} features, sample has {d}")
    return B


def _input_dim(fn, x):
    return getattr(fn, "input_dim", len(np.asarray(x).reshape(-1)))


# ------------------------------------------------------------------ Shapley

def _popcount(masks, d):
    pop = np.zeros_like(masks)
    for j in range(d):
        pop += (masks >> j) & 1
    return pop


def coalition_values(value_fn, x, baseline, chunk=1 << 15) -> np.ndarray:
    """Game values ``v(S)`` for every coalition, indexed by bitmask.

    Bit ``j`` set means feature ``j`` keeps its value from ``x``; otherwise it
    is replaced by the baseline coordinate.  ``value_fn`` maps ``(n, d)`` to
    ``(n,)`` or ``(n, k)``.
    """
    d = x.shape[0]
    n = 1 << d
    bits = 1 << np.arange(d)
    out = None
    for start in range(0, n, chunk):
        masks = np.arange(start, min(n, start + chunk))
        keep = (masks[:, None] & bits) != 0
        vals = np.asarray(value_fn(np.where(keep, x, baseline)), dtype=np.float64)
        if out is None:
            out = np.empty((n,) + vals.shape[1:])
        out[start:start + len(masks)] = vals
    return out


def shapley_from_values(v: np.ndarray, d: int) -> np.ndarray:
    """Exact Shapley values from coalition values; returns ``(d,)`` or ``(d, k)``."""
    masks = np.arange(1 << d)
    pop = _popcount(masks, d)
    sizes = np.arange(d)
    weights = np.array([math.factorial(s) * math.factorial(d - s - 1) for s in sizes], dtype=np.float64)
    weights /= math.factorial(d)
    phi = np.empty((d,) + v.shape[1:])
    for i in range(d):
        without = masks[((masks >> i) & 1) == 0]
        diff = v[without | (1 << i)] - v[without]
        phi[i] = np.tensordot(weights[pop[without]], diff, axes=(0, 0))
    return phi


def sampled_shapley_values(value_fn, x, baseline, n_permutations, seed, chunk=256) -> np.ndarray:
    """Permutation-sampling Shapley estimate; returns ``(d,)`` or ``(d, k)``."""
    d = x.shape[0]
    rng = np.random.default_rng(seed)
    total = None
    done = 0
    while done < n_permutations:
        b = min(chunk, n_permutations - done)
        perms = np.argsort(rng.random((b, d)), axis=1)
        # rank[p, j]: position of feature j in permutation p
        rank = np.argsort(perms, axis=1)
        steps = np.arange(d + 1)
        keep = rank[:, None, :] < steps[None, :, None]  # (b, d+1, d)
        pts = np.where(keep, x, baseline).reshape(-1, d)
        vals = np.asarray(value_fn(pts), dtype=np.float64)
        vals = vals.reshape((b, d + 1) + vals.shape[1:])
        marg = vals[:, 1:] - vals[:, :-1]  # marginal of the feature added at each step
        contrib = np.zeros((b, d) + vals.shape[2:])
        contrib[np.arange(b)[:, None], perms] = marg
        s = contrib.sum(axis=0)
        total = s if total is None else total + s
        done += b
    return total / n_permutations


def _check_exact(d):
    if d > MAX_EXACT_FEATURES:
        raise SizeError(f"exact Shapley enumeration is limited to {MAX_EXACT_FEATURES} features (got {d}); "
                        "use sampled mode")


def shapley(fn, x, baseline, mode: str = "exact", n_permutations: int = 1000, seed: int = 0) -> Explanation:
    """Shapley values of the occlusion game ``v(S) = fn(x_S, baseline_rest)``."""
    x = _as_vec(x, _input_dim(fn, x))
    base = _as_vec(baseline, x.shape[0])
    value_fn = _batch_fn(fn)
    if mode == "exact":
        _check_exact(x.shape[0])
        phi = shapley_from_values(coalition_values(value_fn, x, base), x.shape[0])
        method = "shapley_exact"
    elif mode == "sampled":
        phi = sampled_shapley_values(value_fn, x, base, n_permutations, seed)
        method = "shapley_sampled"
    else:
        raise ConfigurationError(f"unknown Shapley mode {mode!r}")
    fx, fb = value_fn(np.stack([x, base]))
    gap = abs(float(phi.sum()) - (fx - fb))
    return Explanation(phi, method, getattr(fn, "label", "function"), "fixed", gap)


# ------------------------------------------------------------------ integrated gradients

def _path_points(x, base, steps):
    alphas = (np.arange(steps) + 0.5) / steps
    return base + alphas[:, None] * (x - base)


def integrated_gradients(fn, x, baseline, steps: int = 256, gradient=None) -> Explanation:
    """Midpoint-rule integrated gradients along the straight path baseline -> x."""
    if steps < 1:
        raise ValidationError("steps must be >= 1")
    x = _as_vec(x, _input_dim(fn, x))
    base = _as_vec(baseline, x.shape[0])
    grads = _grad_fn(fn, gradient)(_path_points(x, base, steps))
    values = (x - base) * grads.mean(axis=0)
    fx, fb = _batch_fn(fn)(np.stack([x, base]))
    gap = abs(float(values.sum()) - (fx - fb))
    return Explanation(values, "integrated_gradients", getattr(fn, "label", "function"), "fixed", gap)


# ------------------------------------------------------------------ LRP

def _eps_layer(a, W, b, R_out, epsilon, bias_sink):
    """Epsilon rule through one affine layer (single sample)."""
    z = W @ a + (b if bias_sink else 0.0)
    eps = epsilon if epsilon is not None else 1e-6 * max(float(np.mean(np.abs(z))), 1e-300)
    denom = z + eps * np.where(z >= 0, 1.0, -1.0)
    return a * (W.T @ (R_out / denom))


def _lrp_down(model, acts, top_layer, R, epsilon, bias_sink):
    """Propagate relevance ``R`` on the output of layer ``top_layer`` down to the input."""
    for k in range(top_layer, -1, -1):
        layer = model.layers[k]
        R = _eps_layer(acts[k], layer.weights, layer.bias, R, epsilon, bias_sink)
    return R


def _normalize_target(target, bank_size=None):
    if target in ("output", "model_output", None):
        return "output", None
    kind, arg = target
    if kind == "expert":
        return "expert", int(arg)
    if kind == "query":
        return "query", np.asarray(arg.weights if isinstance(arg, Query) else arg, dtype=np.float64)
    raise ConfigurationError(f"unknown LRP target {target!r}")


def lrp(model: nn.MlpModel, x, target="output", heads=None, epsilon: float | None = None,
        bias_sink: bool = True) -> Explanation:
    """Epsilon-rule relevance propagation.

    ``target`` is ``"output"`` (the raw model), ``("expert", m)`` or
    ``("query", weights)``.  Expert and query targets are read off the
    surrogate ``heads``: each expert's clipped output
    ``relu(s_m) - relu(s_m - tau_m)`` is decomposed into its two relu
    branches, which are then propagated through the head and the network.

    With ``bias_sink`` (the default) denominators are the full
    pre-activations ``sum_j a_j w_jk + b_k``, so every bias keeps its share
    of relevance and conservation holds exactly only for bias-free networks.
    Without it the bias is left out of the denominator; this conserves
    relevance but blows up wherever ``sum_j a_j w_jk`` is near zero.
    ``epsilon=None`` uses ``1e-6 * mean|z|`` per layer.
    """
    x = _as_vec(x, model.input_dim)
    kind, arg = _normalize_target(target)
    _, post = nn.forward_batch(model, x[None, :])
    acts = [x] + [a[0] for a in post]  # acts[k] is the input to layer k
    if kind == "output":
        y = acts[-1]
        R = _lrp_down(model, acts, len(model.layers) - 1, y.copy(), epsilon, bias_sink)
        return Explanation(R, "lrp", "model_output", "implicit", abs(float(R.sum()) - float(y[0])),
                           feature_names=model.feature_names)

    if heads is None:
        raise ConfigurationError("LRP of an expert or query needs surrogate heads; run fit-surrogate first")
    M = heads.weights.shape[0]
    if kind == "expert":
        if not 0 <= arg < M:
            raise IndexError(f"expert index {arg} outside 0..{M - 1}")
        w = np.zeros(M)
        w[arg] = 1.0
        label = f"expert({arg})"
    else:
        w = arg
        if w.shape != (M,):
            raise InputShapeError(f"query has {w.shape[0]} weights, heads have {M} experts")
        label = "query(" + ",".join(f"{v:g}" for v in w) + ")"

    a = acts[heads.attach_layer + 1]
    s = heads.weights @ a + heads.biases
    u1 = np.maximum(s, 0.0)
    u2 = np.maximum(s - heads.taus, 0.0)
    # output q = sum_m w_m (u1_m - u2_m) has no bias, so each branch keeps its own contribution
    R_branch = np.concatenate([w * u1, -w * u2])
    W2 = np.vstack([heads.weights, heads.weights])
    b2 = np.concatenate([heads.biases, heads.biases - heads.taus])
    R = _eps_layer(a, W2, b2, R_branch, epsilon, bias_sink)
    R = _lrp_down(model, acts, heads.attach_layer, R, epsilon, bias_sink)
    q = float(w @ (u1 - u2))
    return Explanation(R, "lrp", label, "implicit", abs(float(R.sum()) - q), feature_names=model.feature_names)


# ------------------------------------------------------------------ expert / query explanations

def _describe_baselines(baselines, spec=None):
    if spec is not None:
        return str(spec)
    B = np.atleast_2d(baselines)
    return f"{B.shape[0]} baseline draw(s)" if B.shape[0] > 1 else "fixed"


def _explain_fn(method, fn, x, baselines, names, *, steps=256, n_permutations=1000, seed=0, baseline_desc=None):
    d = x.shape[0]
    B = _as_baselines(baselines, d)
    per_draw = []
    value_fn = _batch_fn(fn)
    for i, base in enumerate(B):
        if method == "shapley_exact":
            e = shapley(fn, x, base, "exact")
        elif method == "shapley_sampled":
            e = shapley(fn, x, base, "sampled", n_permutations, seed + i)
        elif method == "integrated_gradients":
            e = integrated_gradients(fn, x, base, steps)
        else:
            raise ConfigurationError(f"{method} is not a baseline method")
        per_draw.append(e.values)
    per_draw = np.asarray(per_draw)
    values = per_draw.mean(axis=0)
    fx = value_fn(x[None, :])[0]
    fb = value_fn(B).mean()
    gap = abs(float(values.sum()) - (fx - fb))
    return Explanation(values, method, getattr(fn, "label", "function"), _describe_baselines(B, baseline_desc),
                       gap, per_draw, names)


def explain_model(method, model: nn.MlpModel, x, baselines=None, *, epsilon=None, bias_sink=True,
                  baseline_desc=None, **opts) -> Explanation:
    """Naive explanation of the raw model output."""
    method = canonical_method(method)
    x = _as_vec(x, model.input_dim)
    if method == "lrp":
        return lrp(model, x, "output", epsilon=epsilon, bias_sink=bias_sink)
    return _explain_fn(method, ModelFunction(model), x, baselines, model.feature_names,
                       baseline_desc=baseline_desc, **opts)


def _check_heads(heads, bank):
    if heads is not None:
        heads.check_bank(bank)


def explain_expert(method, model: nn.MlpModel, bank: RangeExpertBank, m: int, x, baselines=None, heads=None, *,
                   epsilon=None, bias_sink=True, baseline_desc=None, **opts) -> Explanation:
    """Attribution of expert ``m``'s output ``z_m`` to the input features.

    Occlusion and gradient methods use the shift-and-clip composition
    ``encode(f(x))_m``; LRP uses the surrogate head of expert ``m``.
    """
    method = canonical_method(method)
    x = _as_vec(x, model.input_dim)
    if not 0 <= m < bank.n_experts:
        raise IndexError(f"expert index {m} outside 0..{bank.n_experts - 1}")
    if method == "lrp":
        _check_heads(heads, bank)
        return lrp(model, x, ("expert", m), heads, epsilon, bias_sink)
    w = np.zeros(bank.n_experts)
    w[m] = 1.0
    fn = WeightedExpertFunction(bank, model, w, label=f"expert({m})")
    return _explain_fn(method, fn, x, baselines, model.feature_names, baseline_desc=baseline_desc, **opts)


def attribution_basis(method, model: nn.MlpModel, bank: RangeExpertBank, x, baselines=None, heads=None, *,
                      steps=256, n_permutations=1000, seed=0, epsilon=None, bias_sink=True,
                      baseline_desc=None) -> AttributionMatrix:
    """All expert explanations at ``x`` as a ``d x M`` matrix.

    Shapley and IG evaluate the network once per coalition / path point and
    read every expert off the same forward pass.
    """
    method = canonical_method(method)
    x = _as_vec(x, model.input_dim)
    d, M = x.shape[0], bank.n_experts
    totals = encode_many([nn.predict(model, x)], bank)[0]
    if method == "lrp":
        _check_heads(heads, bank)
        cols = [lrp(model, x, ("expert", m), heads, epsilon, bias_sink) for m in range(M)]
        R = np.column_stack([c.values for c in cols])
        return AttributionMatrix(R, totals, method, "implicit", model.feature_names,
                                 np.array([c.completeness_gap for c in cols]), np.zeros(M))

    B = _as_baselines(baselines, d)

    def experts_of(X):
        return encode_many(nn.predict(model, X), bank)

    per_draw = []
    for i, base in enumerate(B):
        if method == "shapley_exact":
            _check_exact(d)
            per_draw.append(shapley_from_values(coalition_values(experts_of, x, base), d))
        elif method == "shapley_sampled":
            per_draw.append(sampled_shapley_values(experts_of, x, base, n_permutations, seed + i))
        else:
            pts = _path_points(x, base, steps)
            u = nn.predict(model, pts) - bank.offset
            active = _in_range_mask(u, bank)  # (steps, M)
            g = nn.input_gradients(model, pts)  # (steps, d)
            per_draw.append((x - base)[:, None] * (g.T @ active) / steps)
    R = np.mean(per_draw, axis=0)
    z_base = experts_of(B).mean(axis=0)
    gaps = np.abs(R.sum(axis=0) - (totals - z_base))
    return AttributionMatrix(R, totals, method, _describe_baselines(B, baseline_desc), model.feature_names, gaps,
                             z_base)


def _in_range_mask(u, bank):
    b = np.asarray(bank.breakpoints)
    return ((u[:, None] > b) & (u[:, None] < b + bank.widths)).astype(np.float64)


def explain_query(method, model: nn.MlpModel, bank: RangeExpertBank, query: Query, x, baselines=None, heads=None,
                  mode: str = "basis_sum", *, basis: AttributionMatrix | None = None, epsilon=None,
                  bias_sink=True, baseline_desc=None, **opts) -> Explanation:
    """Explain ``q = sum_m w_m z_m``.

    ``basis_sum`` combines the expert columns (reusing ``basis`` when given);
    ``direct`` attributes the composed scalar function itself.
    """
    method = canonical_method(method)
    x = _as_vec(x, model.input_dim)
    w = np.asarray(query.weights, dtype=np.float64)
    if w.shape != (bank.n_experts,):
        raise InputShapeError(f"query has {w.shape[0]} weights for {bank.n_experts} experts")
    target = f"query({query.descriptor})"
    extra = {}
    if query.snap_distance is not None:
        extra["snap_distance"] = repr(query.snap_distance)
    if mode == "basis_sum":
        if basis is None:
            basis = attribution_basis(method, model, bank, x, baselines, heads, epsilon=epsilon,
                                      bias_sink=bias_sink, baseline_desc=baseline_desc, **opts)
        return explain_from_basis(basis, query)
    if mode != "direct":
        raise ConfigurationError(f"unknown query mode {mode!r}")
    if method == "lrp":
        _check_heads(heads, bank)
        e = lrp(model, x, ("query", w), heads, epsilon, bias_sink)
        e.target = target
    else:
        fn = WeightedExpertFunction(bank, model, w, label=target)
        e = _explain_fn(method, fn, x, baselines, model.feature_names, baseline_desc=baseline_desc, **opts)
    e.extra.update(extra)
    e.extra["mode"] = "direct"
    return e


def explain_from_basis(basis: AttributionMatrix, query: Query) -> Explanation:
    """Answer a query from a precomputed basis by one matrix-vector product."""
    w = np.asarray(query.weights, dtype=np.float64)
    if w.shape != (basis.R.shape[1],):
        raise InputShapeError(f"query has {w.shape[0]} weights, basis has {basis.R.shape[1]} experts")
    values = basis.combine(w)
    extra = {}
    if query.snap_distance is not None:
        extra["snap_distance"] = repr(query.snap_distance)
    if basis.baseline_totals is not None:
        gap = abs(float(values.sum()) - float(w @ (basis.expert_totals - basis.baseline_totals)))
    else:
        gap = float("nan")
    if basis.completeness_gaps is not None:
        extra["gap_bound"] = repr(float(np.abs(w) @ basis.completeness_gaps))
    extra["mode"] = "basis_sum"
    return Explanation(values, basis.method, f"query({query.descriptor})", basis.baseline, gap, None,
                       basis.feature_names, extra)
