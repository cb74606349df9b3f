"""Surrogate expert heads over latent activations.

The expert layer sits behind the scalar output, so propagation methods
cannot tell the experts apart.  Here each expert gets its own linear head
``s_m = w_m . a + b_m`` over the activations ``a`` of a hidden layer, with
the hard clip ``relu(s_m) - relu(s_m - tau_m)`` as its published value.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .attribution import coalition_values, shapley_from_values, MAX_EXACT_FEATURES
from .errors import ConfigurationError, DivergenceError, ModelFormatError, ValidationError
from .experts import RangeExpertBank, ScalarFunction, encode_many

log = logging.getLogger(__name__)

INITS = ("copy_top_layer", "conditional_pca", "zeros")
CAP_MARGIN = 0.10


@dataclass
class SurrogateHeads:
    attach_layer: int
    weights: np.ndarray  # (M, width of attach layer)
    biases: np.ndarray  # (M,)
    bias_frozen: np.ndarray  # (M,) bool
    taus: np.ndarray  # (M,) finite clip widths
    offset: float
    cap: float | None = None  # clip width used for an unbounded top expert
    training_report: dict = field(default_factory=dict)

    @property
    def n_experts(self):
        return self.weights.shape[0]

    def scores(self, A) -> np.ndarray:
        """Raw head outputs ``s`` for latent activations ``A (n, h)``."""
        return np.atleast_2d(A) @ self.weights.T + self.biases

    def clip(self, S) -> np.ndarray:
        return np.maximum(S, 0.0) - np.maximum(S - self.taus, 0.0)

    def check_bank(self, bank: RangeExpertBank) -> None:
        """Raise ConfigurationError unless these heads were fitted for ``bank``."""
        widths = bank.widths
        bounded = np.isfinite(widths)
        if (self.n_experts != bank.n_experts or not np.isclose(self.offset, bank.offset, rtol=1e-12, atol=1e-12)
                or not np.allclose(self.taus[bounded], widths[bounded], rtol=1e-9, atol=1e-12)):
            raise ConfigurationError("surrogate heads were fitted for a different expert bank; rerun fit-surrogate")


@dataclass(frozen=True)
class SurrogateFitConfig:
    learning_rate: float = 0.05
    epochs: int = 300
    batch_size: int = 64
    seed: int = 0
    dropout_augmentation: bool = True
    init: str = "conditional_pca"
    l2_penalty: float = 0.0
    freeze_bias: bool = True
    attach_layer: int | None = None  # default: last hidden layer
    # "clean": perturbed copies keep the unperturbed targets (a dropout layer);
    # "model": they are scored by the network continued from the perturbed activations
    perturbation_target: str = "clean"
    lr_schedule: str = "linear"  # or "constant"

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 0 or self.l2_penalty < 0:
            raise ValidationError("invalid surrogate fit configuration")
        if self.init not in INITS:
            raise ValidationError(f"init must be one of {INITS}")
        if self.perturbation_target not in ("model", "clean"):
            raise ValidationError("perturbation_target must be 'model' or 'clean'")
        if self.lr_schedule not in ("constant", "linear"):
            raise ValidationError("lr_schedule must be 'constant' or 'linear'")


def surrogate_loss(s, z, tau):
    """Per-expert loss: right side outside the range, absolute error inside."""
    s = np.asarray(s, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    tau = np.asarray(tau, dtype=np.float64)
    if np.any(tau <= 0):
        raise ValidationError("tau must be positive")
    below = np.maximum(0.0, s)
    inside = np.abs(s - z)
    above = np.maximum(0.0, tau - s)
    out = np.where(z <= 0, below, np.where(z >= tau, above, inside))
    return float(out) if out.ndim == 0 else out


def surrogate_loss_grad(s, z, tau):
    """Subgradient of :func:`surrogate_loss` wrt ``s`` (zero at branch kinks)."""
    below = (s > 0).astype(np.float64)
    inside = np.sign(s - z)
    above = -(s < tau).astype(np.float64)
    return np.where(z <= 0, below, np.where(z >= tau, above, inside))


def latent(model: nn.MlpModel, X, attach_layer: int) -> np.ndarray:
    _, post = nn.forward_batch(model, X)
    return post[attach_layer]


def _default_attach(model):
    if len(model.layers) < 2:
        raise ConfigurationError("surrogate heads need a model with at least one hidden layer")
    return len(model.layers) - 2


def head_widths(bank: RangeExpertBank, Z) -> tuple[np.ndarray, float | None]:
    """Finite clip widths; an unbounded top expert is capped at 110% of its largest observed value."""
    taus = bank.widths.copy()
    cap = None
    if bank.top_unbounded:
        top = float(np.max(Z[:, -1])) if len(Z) else 0.0
        cap = top * (1.0 + CAP_MARGIN) if top > 0 else float(np.diff(bank.edges)[-1])
        taus[-1] = cap
    return taus, cap


def conditional_pca_init(A, Z, m: int, tau: float):
    """First principal direction of the activations for which expert ``m`` is in range.

    Scaled so the projections of those samples span ``[0, tau]`` and signed
    to correlate positively with ``z_m``.  Returns ``(weights, bias)``, or
    zeros with a warning when fewer than two samples are in range.
    """
    A = np.asarray(A, dtype=np.float64)
    z = np.asarray(Z, dtype=np.float64)[:, m]
    inside = (z > 0) & (z < tau)
    if inside.sum() < 2:
        log.warning("expert %d: fewer than 2 in-range samples, falling back to zero init", m)
        return np.zeros(A.shape[1]), 0.0
    Ai = A[inside]
    centered = Ai - Ai.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    v = vt[0]
    proj = Ai @ v
    if np.std(proj) > 0 and np.corrcoef(proj, z[inside])[0, 1] < 0:
        v, proj = -v, -proj
    spread = proj.max() - proj.min()
    if spread <= 0:
        log.warning("expert %d: in-range activations do not vary, falling back to zero init", m)
        return np.zeros(A.shape[1]), 0.0
    w = v * (tau / spread)
    return w, float(-proj.min() * tau / spread)


def _initial_heads(model, bank, A, Z, taus, attach, init):
    M, h = bank.n_experts, A.shape[1]
    if init == "copy_top_layer":
        if attach != len(model.layers) - 2:
            raise ConfigurationError("copy_top_layer init needs the heads attached to the last hidden layer")
        top = model.layers[-1]
        W = np.repeat(top.weights, M, axis=0)
        b = top.bias[0] - bank.offset - np.asarray(bank.breakpoints)
        return W, b
    if init == "conditional_pca":
        W, b = np.zeros((M, h)), np.zeros(M)
        for m in range(M):
            W[m], b[m] = conditional_pca_init(A, Z, m, taus[m])
        return W, b
    return np.zeros((M, h)), np.zeros(M)


def _mean_loss(heads, A, Z):
    return float(np.mean(np.sum(surrogate_loss(heads.scores(A), Z, heads.taus), axis=1)))


def fit_surrogate(model: nn.MlpModel, bank: RangeExpertBank, dataset, cfg: SurrogateFitConfig = SurrogateFitConfig()
                  ) -> SurrogateHeads:
    """Fit one linear head per expert by subgradient descent on the range loss.

    With ``dropout_augmentation`` every mini-batch is doubled with a copy
    whose activations are zeroed independently with a probability drawn
    uniformly from [0, 1] for that batch.
    """
    X = np.atleast_2d(np.asarray(getattr(dataset, "features", dataset), dtype=np.float64))
    if X.shape[0] == 0:
        raise ValidationError("cannot fit surrogate heads on an empty dataset")
    attach = _default_attach(model) if cfg.attach_layer is None else cfg.attach_layer
    if not 0 <= attach < len(model.layers) - 1:
        raise ConfigurationError(f"attach_layer must index a hidden layer (0..{len(model.layers) - 2})")

    A = latent(model, X, attach)
    Z = encode_many(nn.forward_from(model, attach, A), bank)
    taus, cap = head_widths(bank, Z)
    Z = np.minimum(Z, taus)
    W, b = _initial_heads(model, bank, A, Z, taus, attach, cfg.init)
    frozen = np.full(bank.n_experts, bool(cfg.freeze_bias))
    heads = SurrogateHeads(attach, W, b, frozen, taus, bank.offset, cap)

    rng = np.random.default_rng(cfg.seed)
    n = X.shape[0]
    history = [_mean_loss(heads, A, Z)]
    steps_per_epoch = -(-n // cfg.batch_size)
    total_steps, step = cfg.epochs * steps_per_epoch, 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            lr = cfg.learning_rate * (1.0 - step / total_steps if cfg.lr_schedule == "linear" else 1.0)
            step += 1
            idx = order[start:start + cfg.batch_size]
            Ab, Zb = A[idx], Z[idx]
            if cfg.dropout_augmentation:
                p = rng.uniform(0.0, 1.0)
                Ap = Ab * (rng.random(Ab.shape) >= p)
                if cfg.perturbation_target == "model":
                    Zp = np.minimum(encode_many(nn.forward_from(model, attach, Ap), bank), taus)
                else:
                    Zp = Zb
                Ab = np.vstack([Ab, Ap])
                Zb = np.vstack([Zb, Zp])
            G = surrogate_loss_grad(heads.scores(Ab), Zb, taus) / Ab.shape[0]  # (nb, M)
            gW = G.T @ Ab + cfg.l2_penalty * heads.weights
            gb = G.sum(axis=0)
            heads.weights -= lr * gW
            heads.biases -= lr * np.where(frozen, 0.0, gb)
        loss = _mean_loss(heads, A, Z)
        if not np.isfinite(loss):
            raise DivergenceError(epoch, "surrogate fit")
        history.append(loss)

    report = expert_fit_report(heads, A, Z)
    report.update(epochs=cfg.epochs, initial_loss=history[0], final_loss=history[-1], cap=cap,
                  attach_layer=attach, init=cfg.init)
    heads.training_report = report
    return heads


def expert_fit_report(heads: SurrogateHeads, A, Z, side_tol: float = 1e-9) -> dict:
    """Within-range MAE and outside-range side accuracy per expert."""
    S = heads.scores(A)
    Zh = heads.clip(S)
    mae, side = [], []
    for m in range(heads.n_experts):
        z, tau = Z[:, m], heads.taus[m]
        inside = (z > 0) & (z < tau)
        mae.append(float(np.mean(np.abs(Zh[inside, m] - z[inside]))) if inside.any() else 0.0)
        lo, hi = z <= 0, z >= tau
        n_out = lo.sum() + hi.sum()
        ok = (S[lo, m] <= side_tol).sum() + (S[hi, m] >= tau - side_tol).sum()
        side.append(float(ok / n_out) if n_out else 1.0)
    return {"within_range_mae": mae, "side_accuracy": side, "taus": heads.taus.tolist()}


def surrogate_expert_values(model: nn.MlpModel, heads: SurrogateHeads, X) -> np.ndarray:
    """Published surrogate expert values ``(n, M)``."""
    return heads.clip(heads.scores(latent(model, X, heads.attach_layer)))


class SurrogateFunction(ScalarFunction):
    """``x -> sum_m zhat_m(x) + offset``: the disentangled stand-in for the model."""

    def __init__(self, model: nn.MlpModel, heads: SurrogateHeads):
        self.model = model
        self.heads = heads
        self.input_dim = model.input_dim
        self.label = "surrogate_sum"

    def batch(self, X):
        return surrogate_expert_values(self.model, self.heads, np.atleast_2d(X)).sum(axis=1) + self.heads.offset


def _cosine(u, v):
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 and nv == 0:
        return 1.0
    if nu == 0 or nv == 0:
        return 0.0
    return float(u @ v / (nu * nv))


@dataclass
class SurrogateReport:
    within_range_mae: list
    side_accuracy: list
    drift_mean: float
    drift_max: float
    cosine_mean: float
    cosines: np.ndarray
    taus: list

    def lines(self):
        out = [f"expert {m}: tau={t:.6g} within_range_mae={a:.6g} side_accuracy={s:.4f}"
               for m, (t, a, s) in enumerate(zip(self.taus, self.within_range_mae, self.side_accuracy))]
        out.append(f"reconstruction drift: mean={self.drift_mean:.6g} max={self.drift_max:.6g}")
        out.append(f"strategy agreement (mean Shapley cosine): {self.cosine_mean:.4f} over {len(self.cosines)} probes")
        return out


def validate_surrogate(model: nn.MlpModel, bank: RangeExpertBank, heads: SurrogateHeads, dataset,
                       n_samples: int = 50, seed: int = 0, baseline=None) -> SurrogateReport:
    """Fidelity of fitted heads: per-expert accuracy, output drift and strategy agreement.

    Strategy agreement is the mean cosine similarity between exact Shapley
    explanations of the model and of the surrogate sum on ``n_samples``
    probe rows, against ``baseline`` (default: dataset mean).
    """
    X = np.atleast_2d(np.asarray(getattr(dataset, "features", dataset), dtype=np.float64))
    A = latent(model, X, heads.attach_layer)
    Z = np.minimum(encode_many(nn.forward_from(model, heads.attach_layer, A), bank), heads.taus)
    fit = expert_fit_report(heads, A, Z)
    surrogate = SurrogateFunction(model, heads)
    drift = np.abs(surrogate.batch(X) - nn.predict(model, X))

    d = X.shape[1]
    if d > MAX_EXACT_FEATURES:
        raise ConfigurationError("strategy agreement uses exact Shapley; too many features")
    base = X.mean(axis=0) if baseline is None else np.asarray(baseline, dtype=np.float64)
    rng = np.random.default_rng(seed)
    probes = X[rng.choice(X.shape[0], size=min(n_samples, X.shape[0]), replace=False)]
    cos = []
    for x in probes:
        both = lambda P: np.column_stack([nn.predict(model, P), surrogate.batch(P)])  # noqa: E731
        phi = shapley_from_values(coalition_values(both, x, base), d)
        cos.append(_cosine(phi[:, 0], phi[:, 1]))
    cos = np.array(cos)
    return SurrogateReport(fit["within_range_mae"], fit["side_accuracy"], float(drift.mean()),
                           float(drift.max()), float(cos.mean()) if cos.size else float("nan"), cos, fit["taus"])


# ------------------------------------------------------------ text format

def dumps_heads(heads: SurrogateHeads) -> str:
    cap = "none" if heads.cap is None else repr(float(heads.cap))
    lines = [f"heads v1 attach={heads.attach_layer} M={heads.n_experts} width={heads.weights.shape[1]} "
             f"offset={heads.offset!r} cap={cap}"]
    for m in range(heads.n_experts):
        lines.append(f"head {m} frozen={int(heads.bias_frozen[m])} tau={float(heads.taus[m])!r} "
                     f"bias={float(heads.biases[m])!r}")
        lines.append(" ".join(repr(float(v)) for v in heads.weights[m]))
    return "\n".join(lines) + "\n"


def _kv(tokens, lineno):
    out = {}
    for tok in tokens:
        k, sep, v = tok.partition("=")
        if not sep:
            raise ModelFormatError(f"expected key=value, got {tok!r}", lineno, tok)
        out[k] = v
    return out


def loads_heads(text: str) -> SurrogateHeads:
    lines = text.splitlines()
    if not lines or lines[0].split()[:2] != ["heads", "v1"]:
        raise ModelFormatError("bad or missing header", 1, "header")
    hdr = _kv(lines[0].split()[2:], 1)
    try:
        attach, M, width = int(hdr["attach"]), int(hdr["M"]), int(hdr["width"])
        offset = float(hdr["offset"])
        cap = None if hdr.get("cap", "none") == "none" else float(hdr["cap"])
    except (KeyError, ValueError) as exc:
        raise ModelFormatError(f"bad header: {exc}", 1, "header") from None
    if len(lines) < 1 + 2 * M:
        raise ModelFormatError(f"expected {M} heads, file ends early", len(lines), "head")
    W, b, frozen, taus = np.zeros((M, width)), np.zeros(M), np.zeros(M, bool), np.zeros(M)
    for m in range(M):
        ln = 2 + 2 * m
        parts = lines[ln - 1].split()
        if parts[:2] != ["head", str(m)]:
            raise ModelFormatError(f"expected 'head {m} ...'", ln, "head")
        kv = _kv(parts[2:], ln)
        try:
            frozen[m] = kv["frozen"] == "1"
            taus[m], b[m] = float(kv["tau"]), float(kv["bias"])
            vals = [float(v) for v in lines[ln].split()]
        except (KeyError, ValueError) as exc:
            raise ModelFormatError(f"bad head record: {exc}", ln, "head") from None
        if len(vals) != width:
            raise ModelFormatError(f"expected {width} weights, found {len(vals)}", ln + 1, "weights")
        W[m] = vals
    return SurrogateHeads(attach, W, b, frozen, taus, offset, cap)


def save_heads(heads: SurrogateHeads, path) -> None:
    Path(path).write_text(dumps_heads(heads))


def load_heads(path) -> SurrogateHeads:
    return loads_heads(Path(path).read_text())
