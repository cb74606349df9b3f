"""Range experts: a thermometer-coded virtual layer behind a scalar model.

A bank splits the (offset-shifted) output axis at breakpoints
``0 = b_0 < b_1 < ... < b_{M-1}``.  Expert ``m`` reports how much of the
segment ``[b_m, b_{m+1})`` the output has filled, so the experts sum back
to the output.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from .errors import DegenerateRangeError, MalformedVectorError, ModelFormatError, ValidationError


@dataclass(frozen=True)
class RangeExpertBank:
    """Offset, breakpoints and the covered span of the expert layer.

    ``span`` is the extent of the covered output range above ``offset``
    (``max - min`` of the fitted predictions).  With ``top_unbounded`` the
    last expert keeps filling past ``span``; otherwise it saturates there.
    """

    offset: float
    breakpoints: tuple[float, ...]
    span: float
    top_unbounded: bool = True

    def __post_init__(self):
        b = tuple(float(v) for v in self.breakpoints)
        if not b:
            raise ValidationError("a bank needs at least one breakpoint")
        if b[0] != 0.0:
            raise ValidationError("first breakpoint must be 0")
        if any(hi <= lo for lo, hi in zip(b, b[1:])):
            raise ValidationError("breakpoints must be strictly ascending")
        if not np.isfinite(self.offset):
            raise ValidationError("offset must be finite")
        if not (np.isfinite(self.span) and self.span > b[-1]):
            raise ValidationError(f"span {self.span} must exceed the last breakpoint {b[-1]}")
        object.__setattr__(self, "breakpoints", b)
        object.__setattr__(self, "offset", float(self.offset))
        object.__setattr__(self, "span", float(self.span))
        object.__setattr__(self, "top_unbounded", bool(self.top_unbounded))

    @property
    def n_experts(self) -> int:
        return len(self.breakpoints)

    @cached_property
    def edges(self) -> np.ndarray:
        """Segment boundaries ``b_0 .. b_{M-1}, span`` relative to the offset (read-only)."""
        e = np.array(self.breakpoints + (self.span,))
        e.flags.writeable = False
        return e

    @cached_property
    def widths(self) -> np.ndarray:
        """Segment widths tau_m; the last one is ``inf`` when the top is unbounded (read-only)."""
        w = np.diff(self.edges)
        if self.top_unbounded:
            w[-1] = np.inf
        w.flags.writeable = False
        return w

    @property
    def covered_range(self) -> tuple[float, float]:
        return self.offset, self.offset + self.span


@dataclass(frozen=True)
class ExpertVector:
    z: np.ndarray
    out_of_range: bool = False


def fit_bank(predictions: Sequence[float], n_experts: int, breakpoints: Sequence[float] | None = None,
             top_unbounded: bool = True) -> RangeExpertBank:
    """Fit the offset and breakpoints to observed model outputs.

    Uniform mode (``breakpoints=None``) uses ``b_m = m (max - min) / M``.
    Custom breakpoints are given relative to the offset and must start at 0.
    """
    p = np.asarray(predictions, dtype=np.float64).reshape(-1)
    if p.size == 0 or not np.all(np.isfinite(p)):
        raise ValidationError("predictions must be non-empty and finite")
    if n_experts < 1:
        raise ValidationError("need at least one expert")
    lo, hi = float(p.min()), float(p.max())
    if hi <= lo:
        raise DegenerateRangeError(f"constant predictions ({lo}); cannot place range experts")
    span = hi - lo
    if breakpoints is None:
        b = tuple(m * span / n_experts for m in range(n_experts))
    else:
        b = tuple(float(v) for v in breakpoints)
        if len(b) != n_experts:
            raise ValidationError(f"{len(b)} breakpoints given for {n_experts} experts")
        span = max(span, b[-1] * (1 + 1e-9) + 1e-12)
    return RangeExpertBank(lo, b, span, top_unbounded)


def encode_many(ys, bank: RangeExpertBank) -> np.ndarray:
    """Thermometer code for a batch of outputs; shape ``(n, M)``."""
    u = np.asarray(ys, dtype=np.float64).reshape(-1, 1) - bank.offset
    return np.clip(u - np.asarray(bank.breakpoints), 0.0, bank.widths)


def encode(y: float, bank: RangeExpertBank) -> ExpertVector:
    z = encode_many([y], bank)[0]
    return ExpertVector(z, out_of_range=bool(y < bank.offset))


def _as_z(z):
    return np.asarray(z.z if isinstance(z, ExpertVector) else z, dtype=np.float64)


def check_expert_vector(z, bank: RangeExpertBank, atol: float = 1e-12) -> np.ndarray:
    z = _as_z(z)
    if z.shape != (bank.n_experts,):
        raise MalformedVectorError(f"expected {bank.n_experts} expert values, got shape {z.shape}")
    w = bank.widths
    if ((z < -atol) | (z > w + atol)).any():
        raise MalformedVectorError("expert values outside [0, tau_m]")
    # every expert below the highest active one must be saturated
    active = z[1:] > atol
    if active.any():
        below = slice(0, z.size - 1 - int(active[::-1].argmax()))
        if (np.abs(z[below] - w[below]) > atol * np.maximum(1.0, w[below])).any():
            raise MalformedVectorError("thermometer property violated: a higher expert is active "
                                       "while a lower one is not saturated")
    return z


def decode(z, bank: RangeExpertBank) -> float:
    z = check_expert_vector(z, bank)
    return bank.offset + float(z.sum())


# ------------------------------------------------------------ scalar functions
# Attribution targets are objects callable on a batch (n, d) -> (n,) (or a
# single vector -> float) with a matching ``gradient`` method.

class ScalarFunction:
    """Base for batched scalar functions of the model input."""

    input_dim: int

    def batch(self, X) -> np.ndarray:
        raise NotImplementedError

    def gradient_batch(self, X) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            return float(self.batch(X[None, :])[0])
        return self.batch(X)

    def gradient(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            return self.gradient_batch(X[None, :])[0]
        return self.gradient_batch(X)


class ModelFunction(ScalarFunction):
    def __init__(self, model: nn.MlpModel):
        self.model = model
        self.input_dim = model.input_dim
        self.label = "model_output"

    def batch(self, X):
        return nn.predict(self.model, np.atleast_2d(X))

    def gradient_batch(self, X):
        return nn.input_gradients(self.model, X)


def _in_segment(u, lo, width):
    # clip derivative: 1 strictly inside the segment, 0 on the saturated sides
    return (u > lo) & (u < lo + width)


class WeightedExpertFunction(ScalarFunction):
    """``x -> sum_m w_m z_m(f(x))``; expert ``m`` alone is the one-hot case."""

    def __init__(self, bank: RangeExpertBank, model: nn.MlpModel, weights, label=None):
        self.bank = bank
        self.model = model
        self.weights = np.asarray(weights, dtype=np.float64)
        if self.weights.shape != (bank.n_experts,):
            raise ValidationError(f"need {bank.n_experts} weights, got shape {self.weights.shape}")
        self.input_dim = model.input_dim
        self.label = label or "weights(" + ",".join(f"{w:g}" for w in self.weights) + ")"

    def batch(self, X):
        return encode_many(nn.predict(self.model, np.atleast_2d(X)), self.bank) @ self.weights

    def gradient_batch(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        u = nn.predict(self.model, X) - self.bank.offset
        b = np.asarray(self.bank.breakpoints)
        active = _in_segment(u[:, None], b, self.bank.widths)
        scale = active.astype(np.float64) @ self.weights
        return nn.input_gradients(self.model, X) * scale[:, None]


class ExpertFunction(WeightedExpertFunction):
    def __init__(self, bank: RangeExpertBank, model: nn.MlpModel, m: int):
        if not 0 <= m < bank.n_experts:
            raise IndexError(f"expert index {m} outside 0..{bank.n_experts - 1}")
        w = np.zeros(bank.n_experts)
        w[m] = 1.0
        super().__init__(bank, model, w, label=f"expert({m})")
        self.m = m


def expert_fn(bank: RangeExpertBank, model: nn.MlpModel, m: int) -> ExpertFunction:
    """The scalar ``x -> encode(f(x))_m`` with its chain-rule gradient."""
    return ExpertFunction(bank, model, m)


# ------------------------------------------------------------ text format

def dumps_bank(bank: RangeExpertBank) -> str:
    lines = [f"bank v1 offset={bank.offset!r} top_unbounded={int(bank.top_unbounded)} span={bank.span!r}"]
    lines += [repr(b) for b in bank.breakpoints]
    return "\n".join(lines) + "\n"


def loads_bank(text: str) -> RangeExpertBank:
    lines = [ln for ln in text.splitlines()]
    if not lines:
        raise ModelFormatError("empty bank file", 1, "header")
    head = lines[0].split()
    if head[:2] != ["bank", "v1"]:
        raise ModelFormatError(f"bad header {lines[0]!r}", 1, "header")
    fields = {}
    for tok in head[2:]:
        key, sep, val = tok.partition("=")
        if not sep:
            raise ModelFormatError(f"expected key=value, got {tok!r}", 1, tok)
        fields[key] = val
    for key in ("offset", "top_unbounded"):
        if key not in fields:
            raise ModelFormatError("missing header field", 1, key)
    try:
        offset = float(fields["offset"])
        top = {"0": False, "1": True}[fields["top_unbounded"]]
    except (ValueError, KeyError):
        raise ModelFormatError("bad header value", 1, "offset/top_unbounded") from None
    b = []
    for i, ln in enumerate(lines[1:], start=2):
        if not ln.strip():
            continue
        try:
            b.append(float(ln))
        except ValueError:
            raise ModelFormatError(f"breakpoint is not a number: {ln!r}", i, "breakpoint") from None
    if not b:
        raise ModelFormatError("no breakpoints", len(lines), "breakpoint")
    try:
        # files without span: extend the last segment by the mean width below it
        span = float(fields["span"]) if "span" in fields else (b[-1] + (b[-1] / (len(b) - 1) if len(b) > 1 else 1.0))
        return RangeExpertBank(offset, tuple(b), span, top)
    except (ValidationError, ValueError) as exc:
        raise ModelFormatError(str(exc), 1, "bank") from None


def save_bank(bank: RangeExpertBank, path) -> None:
    Path(path).write_text(dumps_bank(bank))


def load_bank(path) -> RangeExpertBank:
    return loads_bank(Path(path).read_text())
