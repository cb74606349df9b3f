"""Datasets: CSV ingestion, standardization and synthetic generators."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InputShapeError, ValidationError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Standardization:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, X):
        return (np.asarray(X, dtype=np.float64) - self.mean) / self.std

    def invert(self, Z):
        return np.asarray(Z, dtype=np.float64) * self.std + self.mean


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    targets: np.ndarray
    feature_names: tuple[str, ...] = ()
    standardization: Standardization | None = None
    # per-row side information (ground truth etc.), same row order as features
    extras: dict = field(default_factory=dict, compare=False)
    dropped_rows: int = 0

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        y = np.asarray(self.targets, dtype=np.float64).reshape(-1)
        if X.shape[0] != y.shape[0]:
            raise InputShapeError(f"{X.shape[0]} feature rows but {y.shape[0]} targets")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ValidationError("dataset contains non-finite values")
        names = tuple(self.feature_names) or tuple(f"x{i}" for i in range(X.shape[1]))
        if len(names) != X.shape[1]:
            raise ValidationError(f"{len(names)} names for {X.shape[1]} feature columns")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "targets", y)
        object.__setattr__(self, "feature_names", names)

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def d(self):
        return self.features.shape[1]

    def subset(self, idx):
        idx = np.asarray(idx)
        extras = {k: np.asarray(v)[idx] for k, v in self.extras.items()}
        return dataclasses.replace(self, features=self.features[idx], targets=self.targets[idx], extras=extras)

    def split(self, test_fraction=0.2, seed=0):
        """Seeded random train/test split."""
        order = np.random.default_rng(seed).permutation(self.n)
        n_test = int(round(self.n * test_fraction))
        return self.subset(order[n_test:]), self.subset(order[:n_test])


# ----------------------------------------------------------------- CSV

def _parse_float(cell):
    v = float(cell)
    if not math.isfinite(v):
        raise ValueError(cell)
    return v


def load_csv(path, target_column: str) -> Dataset:
    """Read a header-row CSV into a :class:`Dataset`.

    A column in which no cell parses as a number is categorical and is
    one-hot encoded as ``col=value`` columns in lexicographic value order;
    every other column is numeric.  Rows with empty cells, a wrong cell
    count, or an unparseable numeric cell are dropped and counted.
    """
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValidationError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if target_column not in header:
        raise ValidationError(f"{path}: target column {target_column!r} not in header {header}")
    body = [r for r in rows[1:] if any(c.strip() for c in r)]
    t_idx = header.index(target_column)

    good, dropped = [], 0
    for r in body:
        cells = [c.strip() for c in r]
        if len(cells) != len(header) or any(c == "" for c in cells):
            dropped += 1
            continue
        try:
            _parse_float(cells[t_idx])
        except ValueError:
            dropped += 1
            continue
        good.append(cells)

    def parses(cell):
        try:
            _parse_float(cell)
            return True
        except ValueError:
            return False

    # categorical iff no cell parses as a number; a mixed column stays numeric
    # and the rows holding its stray cells are dropped
    numeric = {j: any(parses(cells[j]) for cells in good) for j in range(len(header)) if j != t_idx}
    kept = []
    for cells in good:
        if all(parses(cells[j]) for j, is_num in numeric.items() if is_num):
            kept.append(cells)
        else:
            dropped += 1
    good = kept

    columns, names = [], []
    for j, name in enumerate(header):
        if j == t_idx:
            continue
        if numeric[j]:
            columns.append(("num", j, None))
            names.append(name)
        else:
            for cat in sorted({cells[j] for cells in good}):
                columns.append(("cat", j, cat))
                names.append(f"{name}={cat}")

    X = np.empty((len(good), len(columns)))
    for i, cells in enumerate(good):
        for k, (kind, j, cat) in enumerate(columns):
            X[i, k] = _parse_float(cells[j]) if kind == "num" else float(cells[j] == cat)
    y = np.array([_parse_float(cells[t_idx]) for cells in good])
    if len(good) == 0:
        raise ValidationError(f"{path}: no usable rows ({dropped} dropped)")
    if dropped:
        log.warning("%s: dropped %d malformed row(s)", path, dropped)
    return Dataset(X, y, tuple(names), dropped_rows=dropped)


def save_csv(dataset: Dataset, path, target_name: str = "target") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([*dataset.feature_names, target_name])
        for row, t in zip(dataset.features, dataset.targets):
            w.writerow([repr(float(v)) for v in row] + [repr(float(t))])


def save_side_file(columns: dict, path) -> None:
    """Write per-row arrays (e.g. ground truth) as a CSV with matching row order."""
    names = list(columns)
    arrays = [np.asarray(columns[k]) for k in names]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for i in range(len(arrays[0]) if arrays else 0):
            w.writerow([repr(a[i].item()) if a.dtype.kind == "f" else str(a[i].item()) for a in arrays])


# ----------------------------------------------------------------- scaling

def fit_standardization(X) -> Standardization:
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] < 2:
        raise ValidationError("standardization needs at least 2 rows")
    return Standardization(X.mean(axis=0), X.std(axis=0))


def standardize(dataset: Dataset, stats: Standardization | None = None) -> Dataset:
    """Z-score the features (population std).  Pass ``stats`` to reuse fitted statistics."""
    if stats is None:
        stats = fit_standardization(dataset.features)
        const = [name for name, s in zip(dataset.feature_names, stats.std) if not s > 0]
        if const:
            raise ValidationError(f"constant feature(s) cannot be standardized: {', '.join(const)}")
    return dataclasses.replace(dataset, features=stats.apply(dataset.features), standardization=stats)


def unstandardize(dataset: Dataset) -> Dataset:
    if dataset.standardization is None:
        return dataset
    return dataclasses.replace(dataset, features=dataset.standardization.invert(dataset.features),
                               standardization=None)


def save_stats(stats: Standardization, names: Sequence[str], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["feature", "mean", "std"])
        for name, m, s in zip(names, stats.mean, stats.std):
            w.writerow([name, repr(float(m)), repr(float(s))])


def load_stats(path) -> Standardization:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return Standardization(np.array([float(r[1]) for r in rows]), np.array([float(r[2]) for r in rows]))


# ----------------------------------------------------------------- generators

def friedman1(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    return (10.0 * np.sin(np.pi * X[:, 0] * X[:, 1]) + 20.0 * (X[:, 2] - 0.5) ** 2
            + 10.0 * X[:, 3] + 5.0 * X[:, 4])


def gen_friedman(n: int, noise_std: float = 0.0, seed: int = 0) -> Dataset:
    """Friedman #1: 10 uniform features, only the first five matter."""
    if n < 1:
        raise ValidationError("n must be >= 1")
    rng = np.random.default_rng(seed)
    X = rng.uniform(0.0, 1.0, size=(n, 10))
    y = friedman1(X) + rng.normal(0.0, noise_std, size=n) if noise_std else friedman1(X)
    return Dataset(X, y, tuple(f"x{i + 1}" for i in range(10)))


@dataclass(frozen=True)
class RangeStrategyTruth:
    """Ground truth for :func:`gen_range_strategy`.

    ``driving_feature[m]`` is the column index that alone moves the output
    inside the unit range ``[m, m+1)``; ``regime`` is the per-row regime.
    """

    n_ranges: int
    driving_feature: dict
    regime: np.ndarray


def range_strategy_target(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    n_ranges = X.shape[1] - 1
    regime = np.clip(np.floor(X[:, 0]), 0, n_ranges - 1).astype(int)
    driver = X[np.arange(X.shape[0]), regime + 1]
    return regime + np.clip(driver, 0.0, 1.0)


def gen_range_strategy(n: int, n_ranges: int = 3, seed: int = 0, noise_std: float = 0.0):
    """Output ranges with range-specific strategies.

    Column 0 is uniform on ``[0, n_ranges]`` and selects the regime
    ``m = floor(x0)``; columns ``1..n_ranges`` are uniform on ``[0, 1]``.
    Inside regime ``m`` the target is ``m + x_{m+1}``, so the output range
    ``[m, m+1)`` is driven by column ``m+1`` only.

    Returns ``(dataset, truth)``.
    """
    if n_ranges < 2:
        raise ValidationError("n_ranges must be >= 2")
    rng = np.random.default_rng(seed)
    X = np.empty((n, n_ranges + 1))
    X[:, 0] = rng.uniform(0.0, n_ranges, size=n)
    X[:, 1:] = rng.uniform(0.0, 1.0, size=(n, n_ranges))
    y = range_strategy_target(X)
    if noise_std:
        y = y + rng.normal(0.0, noise_std, size=n)
    regime = np.clip(np.floor(X[:, 0]), 0, n_ranges - 1).astype(int)
    names = ("regime_selector",) + tuple(f"driver_{m}" for m in range(n_ranges))
    truth = RangeStrategyTruth(n_ranges, {m: m + 1 for m in range(n_ranges)}, regime)
    ds = Dataset(X, y, names, extras={"regime": regime, "driving_feature": regime + 1})
    return ds, truth


@dataclass(frozen=True)
class WindSimConfig:
    n: int = 20000
    seed: int = 0
    rated_speed: float = 12.0  # m/s
    rated_power: float = 2000.0  # kW
    max_misalignment: float = 15.0  # degrees
    cut_in_speed: float = 3.0
    weibull_shape: float = 2.0
    weibull_scale: float = 8.0

    def __post_init__(self):
        if self.rated_speed <= 0:
            raise ValidationError("rated_speed must be positive")
        if not 0 <= self.max_misalignment <= 90:
            raise ValidationError("max_misalignment must lie in [0, 90] degrees")
        if self.n < 1:
            raise ValidationError("n must be >= 1")
        if not 0 <= self.cut_in_speed < self.rated_speed:
            raise ValidationError("cut_in_speed must lie in [0, rated_speed)")


def yaw_factor(misalignment_deg, wind_speed, rated_speed):
    """cos^3 of the misalignment below rated speed, 1 at or above it."""
    c = np.cos(np.radians(np.asarray(misalignment_deg, dtype=np.float64))) ** 3
    return np.where(np.asarray(wind_speed) < rated_speed, c, 1.0)


def wind_base_power(cfg: WindSimConfig, speed, density, turbulence):
    """Simulated power curve: cubic between cut-in and rated speed, flat above."""
    speed = np.asarray(speed, dtype=np.float64)
    frac = np.clip((speed - cfg.cut_in_speed) / (cfg.rated_speed - cfg.cut_in_speed), 0.0, 1.0)
    below = cfg.rated_power * frac ** 3 * (density / 1.225) * (1.0 - 0.5 * (turbulence - 0.1))
    return np.where(speed < cfg.rated_speed, np.minimum(below, cfg.rated_power), cfg.rated_power)


def gen_wind_scada(cfg: WindSimConfig) -> Dataset:
    """Simulated turbine telemetry with injected yaw-misalignment losses.

    Columns: wind speed, air density, turbulence intensity, yaw misalignment
    (degrees).  The target is the realized power; ``extras`` holds the
    undisturbed ``base_power`` and the ground-truth ``loss``.
    """
    rng = np.random.default_rng(cfg.seed)
    speed = cfg.weibull_scale * rng.weibull(cfg.weibull_shape, size=cfg.n)
    density = rng.normal(1.225, 0.03, size=cfg.n)
    turbulence = rng.uniform(0.05, 0.25, size=cfg.n)
    yaw = rng.uniform(-cfg.max_misalignment, cfg.max_misalignment, size=cfg.n)
    base = wind_base_power(cfg, speed, density, turbulence)
    loss = base * (1.0 - yaw_factor(yaw, speed, cfg.rated_speed))
    power = base - loss
    X = np.column_stack([speed, density, turbulence, yaw])
    names = ("wind_speed", "air_density", "turbulence_intensity", "yaw_misalignment")
    return Dataset(X, power, names, extras={"base_power": base, "loss": loss,
                                             "below_rated": speed < cfg.rated_speed})
