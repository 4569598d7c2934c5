"""Iterative proportional fitting of survey weights to zone constraints.

Every zone is fitted independently: its weight column only ever depends on
that zone's census rows, so a zone fitted alone is bit-identical to the same
zone inside a full run, whatever the thread count.
"""
from __future__ import annotations

import csv
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DimensionMismatch, EmptyDimension, InputError, NonFinite
from .ingest import (
    CategoryMap,
    Constraint,
    ConstraintSet,
    Indicator,
    SurveyMicrodata,
    build_indicator,
)

BINARY_MAGIC = b"MSWM"
BINARY_VERSION = 1
_HEADER = struct.Struct("<4sHII")


@dataclass
class WeightMatrix:
    """Non-negative weights, individuals x zones."""

    w: np.ndarray
    zones: tuple[str, ...] = ()
    iterations: int = 0
    constraint_order: tuple[str, ...] = ()
    # (zone index, constraint, category index, census count) cells that had a
    # positive target but zero simulated weight when last constrained
    empty_cells: tuple[tuple[int, str, int, float], ...] = ()

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=float)
        if self.w.ndim != 2:
            raise DimensionMismatch(f"weights must be 2-D, got shape {self.w.shape}")
        if not self.zones:
            self.zones = tuple(str(z) for z in range(self.w.shape[1]))
        if len(self.zones) != self.w.shape[1]:
            raise DimensionMismatch(
                f"{len(self.zones)} zone ids for {self.w.shape[1]} weight columns"
            )

    @property
    def n_individuals(self) -> int:
        return self.w.shape[0]

    @property
    def n_zones(self) -> int:
        return self.w.shape[1]

    def column(self, zone: int) -> np.ndarray:
        return self.w[:, zone]


@dataclass
class FitTrace:
    """Fit after every constraint application.

    Row 0 is the starting state (iteration 0, constraint ``"initial"``); then
    one row per (iteration, constraint) in application order.
    """

    iteration: np.ndarray
    constraint: list[str]
    tae: np.ndarray
    constraint_tae: np.ndarray  # rows x constraints
    names: tuple[str, ...]
    census_total: float = 0.0
    zone_iterations: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    empty_cells: tuple[tuple[int, str, int, float], ...] = ()

    def iteration_end_tae(self) -> np.ndarray:
        """Overall TAE at the end of each iteration; index 0 is the start."""
        n = len(self.names)
        return np.concatenate([self.tae[:1], self.tae[n::n]])

    @property
    def final_tae(self) -> float:
        return float(self.tae[-1])

    @property
    def feasible(self) -> bool:
        """Diagnostic only: whether the fit reached (numerically) zero TAE."""
        return self.final_tae <= 1e-6 * max(1.0, self.census_total)

    def write_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["iteration", "constraint", "tae"])
            for it, con, t in zip(self.iteration, self.constraint, self.tae):
                wr.writerow([int(it), con, repr(float(t))])
        return path


def initialize_weights(n_individuals: int, n_zones: int, initial: float = 1.0) -> WeightMatrix:
    if n_individuals < 1 or n_zones < 1:
        raise EmptyDimension(f"cannot build a {n_individuals}x{n_zones} weight matrix")
    if not (initial > 0 and np.isfinite(initial)):
        raise InputError(f"initial weight must be positive and finite, got {initial}")
    return WeightMatrix(np.full((n_individuals, n_zones), float(initial)))


def _as_array(w) -> np.ndarray:
    return w.w if isinstance(w, WeightMatrix) else np.asarray(w, dtype=float)


def aggregate(w, B) -> np.ndarray:
    """Simulated aggregates ``T[z, k] = sum_i w[i, z] * B[i, k]``."""
    w = _as_array(w)
    B = B.matrix if isinstance(B, Indicator) else np.asarray(B)
    if w.ndim == 1:
        w = w[:, None]
    if w.shape[0] != B.shape[0]:
        raise DimensionMismatch(
            f"weights have {w.shape[0]} individuals, indicator has {B.shape[0]}"
        )
    return w.T @ B.astype(float)


def _constrain_column(w, codes, target):
    """One proportional step on a single zone column.

    Cells with zero simulated total are left alone; those with a positive
    target are returned so the caller can report them.
    """
    agg = np.bincount(codes, weights=w, minlength=target.size)
    pos = agg > 0
    ratio = np.ones_like(agg)
    ratio[pos] = target[pos] / agg[pos]
    empty = np.flatnonzero(~pos & (target > 0))
    return w * ratio[codes], empty


def _zone_tae(w, B, target, starts):
    """Per-constraint TAE of one zone; ``B`` is the float indicator matrix and
    ``target`` the zone's census row over all constraints."""
    return np.add.reduceat(np.abs(target - w @ B), starts)


def constrain(w: WeightMatrix, B: Indicator, constraint: Constraint) -> WeightMatrix:
    """Rescale every zone so the weights reproduce ``constraint`` exactly."""
    if constraint.name not in B.names:
        raise DimensionMismatch(f"indicator has no block for constraint {constraint.name!r}")
    j = B.names.index(constraint.name)
    if B.sizes[j] != constraint.n_categories:
        raise DimensionMismatch(
            f"constraint {constraint.name!r} has {constraint.n_categories} categories, "
            f"indicator block has {B.sizes[j]}"
        )
    arr = _as_array(w)
    if arr.shape != (B.n_individuals, constraint.counts.shape[0]):
        raise DimensionMismatch(
            f"weights {arr.shape} vs {B.n_individuals} individuals x "
            f"{constraint.counts.shape[0]} zones"
        )
    out = np.empty_like(arr)
    empty_cells = []
    codes = B.codes[:, j]
    for z in range(arr.shape[1]):
        out[:, z], empty = _constrain_column(arr[:, z], codes, constraint.counts[z])
        empty_cells += [(z, constraint.name, int(k), float(constraint.counts[z, k])) for k in empty]
    if not np.isfinite(out).all():
        raise NonFinite(f"non-finite weight after constraining by {constraint.name!r}")
    base = w if isinstance(w, WeightMatrix) else WeightMatrix(arr)
    return replace(
        base,
        w=out,
        constraint_order=base.constraint_order + (constraint.name,),
        empty_cells=tuple(empty_cells),
    )


def _run_zone(codes, B, targets, iterations, tolerance, initial, n):
    n_con = len(targets)
    flat = np.concatenate(targets)
    starts = np.cumsum([0] + [t.size for t in targets[:-1]])
    w = np.full(n, float(initial))
    rows = [_zone_tae(w, B, flat, starts)]
    empty = {}
    done = 0
    prev = rows[0].sum()
    for it in range(1, iterations + 1):
        for j, t in enumerate(targets):
            w, cells = _constrain_column(w, codes[:, j], t)
            for k in cells:
                empty[(j, int(k))] = float(t[k])
            rows.append(_zone_tae(w, B, flat, starts))
        if not np.isfinite(w).all():
            raise NonFinite(f"non-finite weight at iteration {it}")
        done = it
        cur = rows[-1].sum()
        if tolerance is not None and prev - cur < tolerance:
            break
        prev = cur
    per_con = np.array(rows).reshape(-1, n_con)
    return w, per_con, done, empty


def ipf_run(
    survey: SurveyMicrodata | None,
    constraints: ConstraintSet,
    cmap: CategoryMap | None = None,
    iterations: int = 20,
    tolerance: float | None = None,
    *,
    initial: float = 1.0,
    indicator: Indicator | None = None,
    threads: int = 1,
) -> tuple[WeightMatrix, FitTrace]:
    """Fit weights for every zone by cycling through the constraints.

    Parameters
    ----------
    survey, cmap
        Used to build the indicator matrix unless ``indicator`` is supplied.
    constraints : ConstraintSet
        Applied in declared order, ``iterations`` full passes.
    tolerance : float, optional
        Early exit for a zone once one full pass improves its TAE by less than
        this. Off by default. Zones that stop early carry their final fit
        forward in the trace.
    threads : int
        Worker threads across zones; results do not depend on it.
    """
    if iterations < 1:
        raise InputError("iterations must be >= 1")
    if indicator is None:
        if survey is None or cmap is None:
            raise InputError("need either (survey, cmap) or an indicator")
        indicator = build_indicator(survey, cmap, constraints)
    if indicator.names != constraints.names:
        raise DimensionMismatch(
            f"indicator constraints {indicator.names} != {constraints.names}"
        )
    if indicator.sizes != tuple(c.n_categories for c in constraints.constraints):
        raise DimensionMismatch("indicator category counts differ from constraint tables")
    n, n_zones = indicator.n_individuals, constraints.n_zones
    if n < 1 or n_zones < 1:
        raise EmptyDimension(f"{n} individuals, {n_zones} zones")

    codes = indicator.codes
    B = indicator.matrix.astype(float)

    def task(z):
        targets = [c.counts[z] for c in constraints.constraints]
        return _run_zone(codes, B, targets, iterations, tolerance, initial, n)

    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(task, range(n_zones)))
    else:
        results = [task(z) for z in range(n_zones)]

    n_con = len(constraints.constraints)
    done = np.array([r[2] for r in results])
    n_rows = 1 + done.max() * n_con
    per_con = np.zeros((n_rows, n_con))
    for r in results:
        rows = r[1]
        if rows.shape[0] < n_rows:
            rows = np.vstack([rows, np.repeat(rows[-1:], n_rows - rows.shape[0], axis=0)])
        per_con += rows

    names = constraints.names
    iteration = np.array([0] + [it for it in range(1, done.max() + 1) for _ in names])
    labels = ["initial"] + [nm for _ in range(done.max()) for nm in names]
    empty_cells = tuple(
        (z, names[j], k, target)
        for z, r in enumerate(results)
        for (j, k), target in sorted(r[3].items())
    )
    trace = FitTrace(
        iteration=iteration,
        constraint=labels,
        tae=per_con.sum(axis=1),
        constraint_tae=per_con,
        names=names,
        census_total=float(constraints.table.sum()),
        zone_iterations=done,
        empty_cells=empty_cells,
    )
    weights = WeightMatrix(
        np.column_stack([r[0] for r in results]),
        zones=constraints.zones,
        iterations=int(done.max()),
        constraint_order=names,
        empty_cells=empty_cells,
    )
    return weights, trace


# ---------------------------------------------------------------------------
# serialization

def write_weights_csv(wm: WeightMatrix, path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["individual", *wm.zones])
        for i, row in enumerate(wm.w):
            wr.writerow([i, *map(repr, row.tolist())])
    return path


def read_weights_csv(path) -> WeightMatrix:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if len(rows) < 2:
        raise InputError(f"{path}: no weight rows")
    header = rows[0]
    try:
        w = np.array([[float(x) for x in r[1:]] for r in rows[1:]])
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from None
    if w.shape[1] != len(header) - 1:
        raise DimensionMismatch(f"{path}: ragged weight rows")
    return WeightMatrix(w, zones=tuple(header[1:]))


def write_weights_binary(wm: WeightMatrix, path) -> Path:
    """Compact format: magic ``MSWM``, u16 version, u32 rows, u32 cols,
    then little-endian f64 in column-major order."""
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(_HEADER.pack(BINARY_MAGIC, BINARY_VERSION, wm.n_individuals, wm.n_zones))
        fh.write(np.asarray(wm.w, dtype="<f8").tobytes(order="F"))
    return path


def read_weights_binary(path, zones: Sequence[str] = ()) -> WeightMatrix:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise InputError(f"{path}: truncated header")
    magic, version, rows, cols = _HEADER.unpack_from(data)
    if magic != BINARY_MAGIC:
        raise InputError(f"{path}: bad magic {magic!r}")
    if version != BINARY_VERSION:
        raise InputError(f"{path}: unsupported version {version}")
    body = data[_HEADER.size:]
    if len(body) != 8 * rows * cols:
        raise InputError(f"{path}: expected {8 * rows * cols} payload bytes, got {len(body)}")
    w = np.frombuffer(body, dtype="<f8").reshape((rows, cols), order="F").astype(float)
    return WeightMatrix(w, zones=tuple(zones))
