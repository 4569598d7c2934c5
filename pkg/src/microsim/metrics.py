"""Goodness-of-fit between census tables ``U`` and simulated tables ``T``."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import DegenerateVariance, EmptyTable, MissingZone, ShapeMismatch

Z_CRITICAL_5PCT = 1.96


def _pair(U, T) -> tuple[np.ndarray, np.ndarray]:
    U = np.asarray(U, dtype=float)
    T = np.asarray(T, dtype=float)
    if U.shape != T.shape:
        raise ShapeMismatch(f"census shape {U.shape} != simulated shape {T.shape}")
    return U, T


def simulated_table(zones, indicator) -> np.ndarray:
    """Aggregate integerised zones into a zones x categories table."""
    from .integerise import count_matrix

    B = indicator.matrix if hasattr(indicator, "matrix") else np.asarray(indicator)
    counts = count_matrix(zones)
    # float products of small integers are exact and go through BLAS
    return counts.T.astype(float) @ B.astype(float)


def tae(U, T) -> float:
    """Total absolute error, ``sum |U - T|``."""
    U, T = _pair(U, T)
    return float(np.abs(U - T).sum())


def sae(U, T) -> float:
    """TAE as a percentage of the census total."""
    U, T = _pair(U, T)
    total = U.sum()
    if total == 0:
        raise EmptyTable("census total is zero")
    return 100.0 * tae(U, T) / total


def pearson_r(U, T) -> float:
    U, T = _pair(U, T)
    u, t = U.ravel(), T.ravel()
    if u.size < 2:
        raise DegenerateVariance("need at least two cells")
    du, dt = u - u.mean(), t - t.mean()
    su, st = (du * du).sum(), (dt * dt).sum()
    if su == 0 or st == 0:
        raise DegenerateVariance("a table has zero variance")
    return float((du * dt).sum() / math.sqrt(su * st))


def err_gt(U, T, threshold: float = 0.05) -> float:
    """Percent of cells where ``|T - U| > threshold * U``.

    A cell with ``U == 0`` counts as an error whenever ``T != 0``.
    """
    U, T = _pair(U, T)
    if U.size == 0:
        return 0.0
    bad = np.where(U == 0, T != 0, np.abs(T - U) > threshold * U)
    return 100.0 * bad.sum() / U.size


def zm_cells(U, T) -> np.ndarray:
    """Modified Z-score per cell.

    With ``S = sum(U)``, ``p = U/S`` and ``r = T/S`` the score is
    ``(r - p) / sqrt(p (1 - p) / S)``, evaluated as
    ``(T - U) / sqrt(U (S - U) / S)``. Where ``p`` is 0 or 1 the denominator
    vanishes: the score is 0 if ``T == U`` and signed infinity otherwise.
    """
    U, T = _pair(U, T)
    S = U.sum()
    if S <= 0:
        raise EmptyTable("census total is zero")
    var = U * (S - U) / S
    diff = T - U
    out = np.zeros_like(U)
    ok = var > 0
    out[ok] = diff[ok] / np.sqrt(var[ok])
    degenerate = ~ok & (diff != 0)
    out[degenerate] = np.sign(diff[degenerate]) * np.inf
    return out


def zm_summary(zm, critical: float = Z_CRITICAL_5PCT) -> tuple[float, float]:
    """Sum of squared scores and percent of cells beyond ``critical``.

    Infinite scores (degenerate cells) count as significant but are left out
    of the sum of squares.
    """
    zm = np.asarray(zm, dtype=float)
    if zm.size == 0:
        return 0.0, 0.0
    finite = np.isfinite(zm)
    zm_sq = float((zm[finite] ** 2).sum())
    sig = (~finite) | (np.abs(zm) > critical)
    return zm_sq, 100.0 * sig.sum() / zm.size


@dataclass(frozen=True)
class DiffStats:
    """Summary of per-zone ``Pop_sim - Pop_cens``."""

    mean: float
    sd: float
    max: float
    min: float
    oversample_pct: float

    @property
    def exact(self) -> bool:
        return self.mean == self.sd == self.max == self.min == 0


def population_diffs(zones, pops) -> DiffStats:
    """``zones`` are IntegerisedZone objects; ``pops`` is either a mapping
    zone id -> census population or a sequence aligned with ``zones``.

    The standard deviation uses ``n - 1`` in the denominator.
    """
    sims = {z.zone: z.pop_sim for z in zones}
    if isinstance(pops, Mapping):
        missing = [k for k in pops if k not in sims]
        if missing:
            raise MissingZone(f"no integerised result for zone(s) {missing}")
        cens = np.array([float(pops[k]) for k in pops])
        sim = np.array([float(sims[k]) for k in pops])
    else:
        cens = np.asarray(pops, dtype=float)
        if cens.size != len(zones):
            raise MissingZone(f"{len(zones)} zone results for {cens.size} census populations")
        sim = np.array([float(z.pop_sim) for z in zones])
    if cens.size == 0:
        raise MissingZone("no zones")
    d = sim - cens
    sd = float(d.std(ddof=1)) if d.size > 1 else 0.0
    total = cens.sum()
    over = 100.0 * d.sum() / total if total > 0 else 0.0
    return DiffStats(float(d.mean()), sd, float(d.max()), float(d.min()), float(over))


@dataclass
class FitRow:
    variable: str
    tae: float
    sae_pct: float
    pearson_r: float
    err_gt5_pct: float
    zm_sq: float
    zm_sig_pct: float


@dataclass
class FitReport:
    method: str
    rows: list[FitRow]
    population_diff: DiffStats | None = None
    extra: dict = field(default_factory=dict)

    @property
    def overall(self) -> FitRow:
        return self.rows[-1]

    def row(self, variable: str) -> FitRow:
        for r in self.rows:
            if r.variable == variable:
                return r
        raise KeyError(variable)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "rows": [asdict(r) for r in self.rows],
            "population_diff": None if self.population_diff is None else asdict(self.population_diff),
            **self.extra,
        }


def fit_row(variable: str, U, T, critical: float = Z_CRITICAL_5PCT) -> FitRow:
    U, T = _pair(U, T)
    try:
        r = pearson_r(U, T)
    except DegenerateVariance:
        r = float("nan")
    zm_sq, sig = zm_summary(zm_cells(U, T), critical)
    return FitRow(variable, tae(U, T), sae(U, T), r, err_gt(U, T), zm_sq, sig)


def full_report(U, T, zones=None, pops=None, *, method: str = "",
                names: Sequence[str] | None = None, blocks: Sequence[slice] | None = None,
                overall_label: str = "All") -> FitReport:
    """One row per constraint (declaration order) plus an overall row.

    ``U`` may be a :class:`~microsim.ingest.ConstraintSet`, in which case
    constraint names, column blocks and (if ``pops`` is omitted) census
    populations come from it. A correlation that is undefined because one
    side is constant is reported as NaN rather than raised.
    """
    if hasattr(U, "constraints"):
        cs = U
        names = names or cs.names
        blocks = blocks or list(cs.blocks.values())
        if pops is None:
            pops = cs.populations
        U = cs.table
    U, T = _pair(U, T)
    if names is None:
        names, blocks = [], []
    rows = [fit_row(n, U[:, b], T[:, b]) for n, b in zip(names, blocks)]
    rows.append(fit_row(overall_label, U, T))
    diff = population_diffs(zones, pops) if zones is not None and pops is not None else None
    return FitReport(method, rows, diff)


# ---------------------------------------------------------------------------
# output

def _num(v: float) -> str:
    return repr(float(v))


def write_reports_csv(reports: Sequence[FitReport], path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["method", "variable", "TAE", "SAE_pct", "E_gt5_pct", "Zm_sig_pct",
                     "Zm_sq", "r"])
        for rep in reports:
            for r in rep.rows:
                wr.writerow([rep.method, r.variable, _num(r.tae), _num(r.sae_pct),
                             _num(r.err_gt5_pct), _num(r.zm_sig_pct), _num(r.zm_sq),
                             _num(r.pearson_r)])
    return path


def write_reports_json(reports: Sequence[FitReport], path) -> Path:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        json.dump([r.to_dict() for r in reports], fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def write_diffs_csv(reports: Sequence[FitReport], path) -> Path:
    """Table with one row per statistic and one column per method."""
    path = Path(path)
    reps = [r for r in reports if r.population_diff is not None]
    stats = [("Mean", "mean"), ("Standard deviation", "sd"), ("Max", "max"),
             ("Min", "min"), ("Oversample (%)", "oversample_pct")]
    with path.open("w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["metric", *(r.method for r in reps)])
        for label, attr in stats:
            wr.writerow([label, *(_num(getattr(r.population_diff, attr)) for r in reps)])
    return path
