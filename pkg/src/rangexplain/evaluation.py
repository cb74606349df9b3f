"""Faithfulness evaluation by feature occlusion (flipping curves and ABC)."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .attribution import (AttributionMatrix, BaselineSpec, ConditionalBaseline, Explanation, MeanBaseline,
                          canonical_method, explain_model, explain_query, resolve_baseline)
from .errors import DegenerateRangeError, InputShapeError, ValidationError
from .experts import RangeExpertBank
from .query import Query

_trapezoid = getattr(np, "trapezoid", None) or np.trapz  # numpy < 2 lacks trapezoid


@dataclass
class FlippingCurve:
    outputs: np.ndarray  # (d+1,) model output after 0..d replacements
    order: np.ndarray  # feature indices in flip order
    direction: str
    baseline: np.ndarray

    @property
    def fractions(self):
        return np.linspace(0.0, 1.0, len(self.outputs))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["fraction_flipped", "output"])
            for t, v in zip(self.fractions, self.outputs):
                w.writerow([repr(float(t)), repr(float(v))])


@dataclass
class AbcResult:
    abc: float
    area_descending: float
    area_ascending: float
    normalizer: float


def flip_order(values, direction: str) -> np.ndarray:
    """Feature order by attribution value; ties go to the lower index."""
    v = np.asarray(values, dtype=np.float64)
    idx = np.arange(v.shape[0])
    if direction == "descending":
        return np.lexsort((idx, -v))
    if direction == "ascending":
        return np.lexsort((idx, v))
    raise ValidationError(f"direction must be 'descending' or 'ascending', not {direction!r}")


def _curve(model, x, baseline, order):
    pts = np.repeat(x[None, :], len(order) + 1, axis=0)
    for k, j in enumerate(order, start=1):
        pts[k:, j] = baseline[j]
    out = nn.predict(model, pts)
    # endpoints through the single-row path so they equal f(x) and f(baseline) bit for bit
    out[0], out[-1] = nn.predict(model, x[None, :])[0], nn.predict(model, baseline[None, :])[0]
    return out


def flipping_curve(model: nn.MlpModel, x, baseline, attribution, direction: str = "descending") -> FlippingCurve:
    """Replace features by baseline coordinates one at a time, in attribution order."""
    x = np.asarray(x, dtype=np.float64)
    baseline = np.asarray(baseline, dtype=np.float64)
    values = attribution.values if isinstance(attribution, Explanation) else np.asarray(attribution)
    if not (x.shape == baseline.shape == values.shape == (model.input_dim,)):
        raise InputShapeError("sample, baseline and attribution must all have the model's input dimension")
    order = flip_order(values, direction)
    return FlippingCurve(_curve(model, x, baseline, order), order, direction, baseline)


def abc(curve_desc, curve_asc, min_normalizer: float = 1e-12) -> AbcResult:
    """Area between the flipping curves and the straight line from f(x) to f(baseline).

    The x-axis is the fraction of flipped features; both areas use the
    trapezoid rule and are signed so that better-than-random orderings
    count positive.  The sum is divided by ``|f(x) - f(baseline)|``.
    """
    desc = np.asarray(getattr(curve_desc, "outputs", curve_desc), dtype=np.float64)
    asc = np.asarray(getattr(curve_asc, "outputs", curve_asc), dtype=np.float64)
    if desc.shape != asc.shape or desc[0] != asc[0] or desc[-1] != asc[-1]:
        raise ValidationError("curves must share length and endpoints")
    t = np.linspace(0.0, 1.0, desc.shape[0])
    line = desc[0] + t * (desc[-1] - desc[0])
    norm = abs(desc[-1] - desc[0])
    if norm < min_normalizer:
        raise DegenerateRangeError("f(x) and f(baseline) coincide; ABC is undefined")
    a_desc = float(_trapezoid(line - desc, t))
    a_asc = float(_trapezoid(asc - line, t))
    return AbcResult((a_desc + a_asc) / norm, a_desc, a_asc, float(norm))


def abc_for(model, x, baseline, values) -> AbcResult:
    return abc(flipping_curve(model, x, baseline, values, "descending"),
               flipping_curve(model, x, baseline, values, "ascending"))


def random_order_abc(model, x, baseline, n_permutations: int = 200, seed: int = 0) -> np.ndarray:
    """ABC of uniformly random flip orders (the null distribution)."""
    rng = np.random.default_rng(seed)
    d = len(x)
    out = []
    for _ in range(n_permutations):
        desc = rng.permutation(d)
        asc = rng.permutation(d)
        out.append(abc(_curve(model, x, baseline, desc), _curve(model, x, baseline, asc)).abc)
    return np.array(out)


# ------------------------------------------------------------------ comparison

@dataclass
class FaithfulnessReport:
    method: str
    query: str
    n: int
    seed: int
    sample_indices: list = field(default_factory=list)
    naive_abc: list = field(default_factory=list)
    xpert_abc: list = field(default_factory=list)
    skipped_pairs: int = 0
    min_normalizer: float = 0.0
    eval_baseline: str = ""
    explain_baseline: str = ""
    # label -> summed flipping curve over all scored pairs; see mean_curves
    curve_sums: dict = field(default_factory=dict, repr=False)
    n_pairs: int = 0

    @property
    def mean_curves(self) -> dict:
        return {k: v / self.n_pairs for k, v in self.curve_sums.items()} if self.n_pairs else {}

    @property
    def mean_naive(self):
        return float(np.mean(self.naive_abc)) if self.naive_abc else float("nan")

    @property
    def mean_xpert(self):
        return float(np.mean(self.xpert_abc)) if self.xpert_abc else float("nan")

    @property
    def relative_improvement(self):
        if not self.naive_abc:
            return float("nan")
        return (self.mean_xpert - self.mean_naive) / abs(self.mean_naive)

    def text(self) -> str:
        lines = ["# faithfulness comparison",
                 f"method: {self.method}", f"query: {self.query}", f"n: {self.n}", f"seed: {self.seed}",
                 f"eval_baseline: {self.eval_baseline}", f"explain_baseline: {self.explain_baseline}",
                 f"skipped_pairs: {self.skipped_pairs}", f"min_normalizer: {self.min_normalizer!r}",
                 "", "sample,naive_abc,range_query_abc"]
        lines += [f"{i},{a!r},{b!r}" for i, a, b in zip(self.sample_indices, self.naive_abc, self.xpert_abc)]
        lines += ["", "# summary", f"mean_naive_abc: {self.mean_naive!r}", f"mean_query_abc: {self.mean_xpert!r}",
                  f"relative_improvement: {self.relative_improvement!r}"]
        return "\n".join(lines) + "\n"


def compare_faithfulness(model: nn.MlpModel, bank: RangeExpertBank, heads, dataset, output_slice, method: str,
                         query: Query, eval_baseline: ConditionalBaseline, n_samples: int, seed: int = 0, *,
                         explain_baseline: BaselineSpec = MeanBaseline(), steps: int = 256,
                         n_permutations: int = 1000, min_normalizer: float | None = None) -> FaithfulnessReport:
    """ABC of naive model explanations versus range-query explanations.

    Samples are drawn from rows whose prediction lies in ``output_slice``.
    Both explanations use ``explain_baseline`` (ignored by LRP); each is
    then scored by flipping towards ``n_draws`` conditional baselines and
    averaging the per-draw normalized ABCs.

    Pairs whose outputs differ by less than ``min_normalizer`` are skipped
    and counted.  It defaults to the baseline tolerance ``delta``: a draw
    is only known to lie within ``delta`` of the reference, so closer pairs
    carry no usable contrast and their tiny normalizer would let a single
    pair dominate the mean.
    """
    method = canonical_method(method)
    if min_normalizer is None:
        min_normalizer = eval_baseline.delta
    X = np.atleast_2d(np.asarray(getattr(dataset, "features", dataset), dtype=np.float64))
    preds = nn.predict(model, X)
    lo, hi = output_slice
    pool = np.flatnonzero((preds >= lo) & (preds <= hi))
    report = FaithfulnessReport(method, str(query.descriptor), 0, seed, min_normalizer=float(min_normalizer),
                                eval_baseline=str(eval_baseline),
                                explain_baseline=str(explain_baseline) if method != "lrp" else "implicit")
    if n_samples == 0:
        return report
    if pool.size == 0:
        raise ValidationError(f"no samples with prediction in [{lo}, {hi}]")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(pool, size=min(n_samples, pool.size), replace=False)
    expl_base = None if method == "lrp" else resolve_baseline(explain_baseline, X, model, preds)
    opts = {} if method == "lrp" else {"steps": steps, "n_permutations": n_permutations}
    if method == "shapley_exact" or method == "shapley_sampled":
        opts.pop("steps")
    if method == "integrated_gradients":
        opts.pop("n_permutations")

    for idx in chosen:
        x = X[idx]
        naive = explain_model(method, model, x, expl_base, **opts)
        xpert = explain_query(method, model, bank, query, x, expl_base, heads, mode="basis_sum", **opts)
        draws = resolve_baseline(eval_baseline, X, model, preds, rng)
        a_n, a_x = [], []
        for xb in draws:
            if abs(preds[idx] - nn.predict(model, xb)) < min_normalizer:
                report.skipped_pairs += 1
                continue
            for label, values, sink in (("naive", naive.values, a_n), ("range_query", xpert.values, a_x)):
                desc = flipping_curve(model, x, xb, values, "descending")
                asc = flipping_curve(model, x, xb, values, "ascending")
                sink.append(abc(desc, asc).abc)
                # curves are stored relative to f(x) so that different draws average sensibly
                for direction, c in (("descending", desc), ("ascending", asc)):
                    key = f"{label}_{direction}"
                    report.curve_sums[key] = report.curve_sums.get(key, 0.0) + (c.outputs - c.outputs[0])
            report.n_pairs += 1
        if a_n:
            report.sample_indices.append(int(idx))
            report.naive_abc.append(float(np.mean(a_n)))
            report.xpert_abc.append(float(np.mean(a_x)))
    report.n = len(report.naive_abc)
    return report


# ------------------------------------------------------------------ subtraction flipping

def subtraction_order_values(naive_values, basis: AttributionMatrix, k: int) -> np.ndarray:
    M = basis.R.shape[1]
    if not 0 <= k <= M:
        raise ValidationError(f"k must lie in 0..{M}")
    naive_values = np.asarray(naive_values, dtype=np.float64)
    if naive_values.shape[0] != basis.R.shape[0]:
        raise InputShapeError("naive explanation and basis disagree on the number of features")
    return naive_values - basis.R[:, :k].sum(axis=1)


def subtraction_flipping(model: nn.MlpModel, bank: RangeExpertBank, x, naive, basis: AttributionMatrix,
                         k: int) -> FlippingCurve:
    """Flip features to zero in descending order of ``naive - sum_{m<k} column_m``."""
    if basis.R.shape[1] != bank.n_experts:
        raise InputShapeError(f"basis has {basis.R.shape[1]} columns for {bank.n_experts} experts")
    values = naive.values if isinstance(naive, Explanation) else naive
    order_values = subtraction_order_values(values, basis, k)
    x = np.asarray(x, dtype=np.float64)
    return flipping_curve(model, x, np.zeros_like(x), order_values, "descending")


def plateau_length(outputs, level: float, tolerance: float) -> float:
    """Longest stretch of the flip axis on which the (linearly interpolated)
    curve stays within ``tolerance`` of ``level``; measured in fractions."""
    y = np.asarray(outputs, dtype=np.float64) - level
    t = np.linspace(0.0, 1.0, y.shape[0])
    best = run = 0.0
    for i in range(len(y) - 1):
        t0, t1, y0, y1 = t[i], t[i + 1], y[i], y[i + 1]
        # sub-interval of [t0, t1] where |y| <= tol
        if y1 == y0:
            inside = (t0, t1) if abs(y0) <= tolerance else None
        else:
            a = t0 + (-tolerance - y0) / (y1 - y0) * (t1 - t0)
            b = t0 + (tolerance - y0) / (y1 - y0) * (t1 - t0)
            lo_, hi_ = max(min(a, b), t0), min(max(a, b), t1)
            inside = (lo_, hi_) if hi_ >= lo_ else None
        if inside is None:
            best, run = max(best, run), 0.0
            continue
        if inside[0] > t0:  # entered mid-segment: a new run starts
            best, run = max(best, run), 0.0
        run += inside[1] - inside[0]
        if inside[1] < t1:  # left mid-segment
            best, run = max(best, run), 0.0
    return float(max(best, run))


# ------------------------------------------------------------------ plots

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def svg_line_chart(series: dict, path, title: str = "", x_label: str = "fraction flipped",
                   y_label: str = "output", width: int = 480, height: int = 320) -> None:
    """Write a minimal SVG line chart; ``series`` maps labels to ``(x, y)`` pairs."""
    if not series:
        raise ValidationError("nothing to plot")
    pad_l, pad_r, pad_t, pad_b = 56, 120, 28, 40
    xs = np.concatenate([np.asarray(x, dtype=np.float64) for x, _ in series.values()])
    ys = np.concatenate([np.asarray(y, dtype=np.float64) for _, y in series.values()])
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(ys.min()), float(ys.max())
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pw, ph = width - pad_l - pad_r, height - pad_t - pad_b

    def px(x):
        return pad_l + (np.asarray(x) - x0) / (x1 - x0) * pw

    def py(y):
        return pad_t + (1.0 - (np.asarray(y) - y0) / (y1 - y0)) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'font-family="sans-serif" font-size="11">',
           f'<rect x="{pad_l}" y="{pad_t}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>',
           f'<text x="{pad_l}" y="{pad_t - 10}" font-size="13">{_escape(title)}</text>',
           f'<text x="{pad_l + pw / 2:.1f}" y="{height - 8}" text-anchor="middle">{_escape(x_label)}</text>',
           f'<text x="14" y="{pad_t + ph / 2:.1f}" text-anchor="middle" '
           f'transform="rotate(-90 14 {pad_t + ph / 2:.1f})">{_escape(y_label)}</text>']
    for v in (x0, x1):
        out.append(f'<text x="{px(v):.1f}" y="{pad_t + ph + 14}" text-anchor="middle">{v:.3g}</text>')
    for v in (y0, y1):
        out.append(f'<text x="{pad_l - 4}" y="{py(v) + 4:.1f}" text-anchor="end">{v:.3g}</text>')
    for k, (label, (x, y)) in enumerate(series.items()):
        color = _PALETTE[k % len(_PALETTE)]
        pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(px(x), py(y)))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        ly = pad_t + 14 + 16 * k
        out.append(f'<line x1="{pad_l + pw + 8}" y1="{ly - 4}" x2="{pad_l + pw + 24}" y2="{ly - 4}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{pad_l + pw + 28}" y="{ly}">{_escape(str(label))}</text>')
    out.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(out) + "\n")


def _escape(text):
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
