"""Queries: linear combinations of range experts."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

from .errors import QuerySpecError, ValidationError
from .experts import ExpertVector, RangeExpertBank


@dataclass(frozen=True)
class StepDescriptor:
    reference: float
    snapped: float
    snap_distance: float

    def __str__(self):
        return f"step(ref={self.reference:g}, snapped={self.snapped:g}, snap_distance={self.snap_distance:g})"


@dataclass(frozen=True)
class SigmoidDescriptor:
    center: float
    temperature: float

    def __str__(self):
        return f"sigmoid(center={self.center:g}, temp={self.temperature:g})"


@dataclass(frozen=True)
class CustomDescriptor:
    label: str

    def __str__(self):
        return f"custom({self.label})"


Descriptor = Union[StepDescriptor, SigmoidDescriptor, CustomDescriptor]


@dataclass(frozen=True)
class Query:
    weights: np.ndarray
    descriptor: Descriptor = CustomDescriptor("weights")

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if w.size == 0 or not np.all(np.isfinite(w)):
            raise ValidationError("query weights must be non-empty and finite")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def snap_distance(self):
        return getattr(self.descriptor, "snap_distance", None)

    def record(self) -> str:
        """One-line text record for result files."""
        return f"query {self.descriptor} weights=" + ",".join(repr(float(w)) for w in self.weights)


def query_from_target(bank: RangeExpertBank, g: Callable[[float], float], descriptor: Descriptor | None = None,
                      affine_rtol: float = 1e-9) -> Query:
    """Project a target function of the output onto the expert span.

    The weights are difference quotients of ``g`` between consecutive
    breakpoints, so ``sum_m w_m z_m(y)`` interpolates ``g(y) - g(offset)``
    linearly and is exact at every breakpoint.  An unbounded top segment is
    only allowed when ``g`` is affine on it.
    """
    edges = bank.offset + bank.edges
    gv = np.array([float(g(e)) for e in edges])
    if not np.all(np.isfinite(gv)):
        raise ValidationError("target function is not finite on the covered range")
    w = np.diff(gv) / np.diff(edges)
    if bank.top_unbounded:
        lo, h = edges[-2], edges[-1] - edges[-2]
        g2 = float(g(lo + 2.0 * h))
        if not np.isfinite(g2):
            raise ValidationError("target function is not finite above the covered range")
        curvature = abs(g2 - 2.0 * gv[-1] + gv[-2])
        if curvature > affine_rtol * max(1.0, abs(gv[-2]), abs(gv[-1]), abs(g2)):
            raise ValidationError("target function is not affine on the unbounded top segment; "
                                  "use a bank with a bounded top")
    return Query(w, descriptor or CustomDescriptor("target"))


def logistic(t):
    return 0.5 * (1.0 + np.tanh(0.5 * t))


def sigmoid_query(bank: RangeExpertBank, center: float, temperature: float) -> Query:
    if not temperature > 0:
        raise ValidationError("temperature must be positive")
    return query_from_target(bank, lambda y: logistic((y - center) / temperature),
                             SigmoidDescriptor(float(center), float(temperature)))


def step_query(bank: RangeExpertBank, reference: float) -> Query:
    """``q(y) = max(0, y - b_k)`` for the breakpoint ``b_k`` nearest the reference.

    The reference is given on the output scale; ties snap to the lower
    breakpoint.  The snap distance is kept on the descriptor.
    """
    lo, hi = bank.covered_range
    if not lo <= reference <= hi:
        raise ValidationError(f"reference {reference} outside the covered range [{lo}, {hi}]")
    candidates = bank.offset + (bank.edges if not bank.top_unbounded else np.asarray(bank.breakpoints))
    k = int(np.argmin(np.abs(candidates - reference)))
    w = (np.arange(bank.n_experts) >= k).astype(np.float64)
    snapped = float(candidates[k])
    return Query(w, StepDescriptor(float(reference), snapped, abs(float(reference) - snapped)))


def evaluate_query(query: Query, z) -> float | np.ndarray:
    """``sum_m w_m z_m`` for one expert vector or a batch ``(n, M)``."""
    z = np.asarray(z.z if isinstance(z, ExpertVector) else z, dtype=np.float64)
    if z.shape[-1] != query.weights.shape[0]:
        raise ValidationError(f"query has {query.weights.shape[0]} weights but z has {z.shape[-1]} entries")
    out = z @ query.weights
    return float(out) if np.ndim(out) == 0 else out


def parse_query_spec(spec: str, bank: RangeExpertBank) -> Query:
    """Parse ``step:ref=<f>``, ``sigmoid:center=<f>,temp=<f>`` or ``weights:<f>,<f>,...``."""
    kind, sep, rest = spec.strip().partition(":")
    if not sep:
        raise QuerySpecError(f"query spec {spec!r} lacks a 'kind:' prefix")
    try:
        if kind == "weights":
            w = [float(v) for v in rest.split(",") if v.strip()]
            if len(w) != bank.n_experts:
                raise QuerySpecError(f"{len(w)} weights given for {bank.n_experts} experts")
            return Query(np.array(w), CustomDescriptor("weights"))
        params = {}
        for item in rest.split(","):
            key, eq, val = item.partition("=")
            if not eq:
                raise QuerySpecError(f"expected key=value in {item!r}")
            params[key.strip()] = float(val)
        if kind == "step":
            return step_query(bank, params["ref"])
        if kind == "sigmoid":
            return sigmoid_query(bank, params["center"], params["temp"])
    except KeyError as exc:
        raise QuerySpecError(f"query spec {spec!r} is missing {exc.args[0]!r}") from None
    except ValueError as exc:
        if isinstance(exc, QuerySpecError):
            raise
        raise QuerySpecError(f"bad query spec {spec!r}: {exc}") from None
    raise QuerySpecError(f"unknown query kind {kind!r}; expected step, sigmoid or weights")
