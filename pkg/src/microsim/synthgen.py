"""Synthetic ground-truth populations with matching survey and census tables.

Each zone draws, per constraint, a category distribution from a symmetric
Dirichlet; residents draw one category per constraint independently. Census
tables are exact counts of the residents, so all constraints of a zone share
one row sum. The survey is a weighted sample, without replacement, of the
pooled residents; ``skew`` tilts it towards residents whose category codes
are high, which spreads the IPF weights out.

Randomness comes from ``numpy.random.default_rng(seed)`` (PCG64).
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .errors import InputError
from .ingest import (
    CategoryMap,
    Constraint,
    ConstraintSet,
    SurveyMicrodata,
    write_category_map,
    write_constraints,
    write_survey,
)


class InfeasibleSpec(InputError):
    pass


class SupportWarning(UserWarning):
    """The survey missed a populated category and was redrawn."""


@dataclass(frozen=True)
class PopulationSpec:
    n_zones: int = 24
    pop_range: tuple[int, int] = (100, 500)
    constraints: tuple[tuple[str, int], ...] = (("age_sex", 8), ("mode", 7), ("tenure", 7))
    concentration: float = 1.0
    survey_size: int = 900
    skew: float = 0.0
    seed: int = 0
    max_redraws: int = 20

    @property
    def n_categories(self) -> int:
        return sum(k for _, k in self.constraints)

    def validate(self) -> None:
        if self.n_zones < 1:
            raise InfeasibleSpec("need at least one zone")
        lo, hi = self.pop_range
        if lo < 1 or hi < lo:
            raise InfeasibleSpec(f"bad zone population range {self.pop_range} (zones may not be empty)")
        if not self.constraints:
            raise InfeasibleSpec("need at least one constraint")
        names = [n for n, _ in self.constraints]
        if len(set(names)) != len(names):
            raise InfeasibleSpec("duplicate constraint names")
        for name, k in self.constraints:
            if k < 2:
                raise InfeasibleSpec(f"constraint {name!r} needs >= 2 categories")
        if self.survey_size < self.n_categories:
            raise InfeasibleSpec(
                f"survey size {self.survey_size} < {self.n_categories} categories"
            )
        if not self.concentration > 0:
            raise InfeasibleSpec("concentration must be positive")

    @classmethod
    def from_dict(cls, data: dict) -> "PopulationSpec":
        data = dict(data)
        if "pop_range" in data:
            data["pop_range"] = tuple(int(x) for x in data["pop_range"])
        if "constraints" in data:
            cons = data["constraints"]
            if isinstance(cons, dict):
                cons = list(cons.items())
            else:
                cons = [tuple(c) if not isinstance(c, dict) else (c["name"], c["categories"])
                        for c in cons]
            data["constraints"] = tuple((str(n), int(k)) for n, k in cons)
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise InputError(f"unknown population spec keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return {
            "n_zones": self.n_zones,
            "pop_range": list(self.pop_range),
            "constraints": {n: k for n, k in self.constraints},
            "concentration": self.concentration,
            "survey_size": self.survey_size,
            "skew": self.skew,
            "seed": self.seed,
            "max_redraws": self.max_redraws,
        }


def paper_scale_spec(seed: int = 0, skew: float = 0.0) -> PopulationSpec:
    """71 zones averaging ~3077 residents, constraints of 12/11/8/9 categories
    and a 4933-row survey."""
    return PopulationSpec(
        n_zones=71,
        pop_range=(2000, 4155),
        constraints=(("age_sex", 12), ("mode", 11), ("distance", 8), ("nssec", 9)),
        concentration=2.0,
        survey_size=4933,
        skew=skew,
        seed=seed,
    )


def load_population_spec(path) -> PopulationSpec:
    with Path(path).open(encoding="utf-8") as fh:
        data = yaml.safe_load(fh) or {}
    return PopulationSpec.from_dict(data)


@dataclass
class SyntheticData:
    spec: PopulationSpec
    zone_of: np.ndarray          # zone index of every resident
    codes: np.ndarray            # residents x constraints, category codes
    survey_rows: np.ndarray      # resident index of each survey individual
    survey: SurveyMicrodata
    constraints: ConstraintSet
    cmap: CategoryMap
    redraws: int = 0
    labels: tuple[tuple[str, ...], ...] = field(default=())


def _labels(name: str, k: int) -> tuple[str, ...]:
    return tuple(f"{name}_{j}" for j in range(k))


def generate(spec: PopulationSpec) -> SyntheticData:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    lo, hi = spec.pop_range
    pops = rng.integers(lo, hi + 1, size=spec.n_zones)
    total = int(pops.sum())
    if spec.survey_size > total:
        raise InfeasibleSpec(f"survey size {spec.survey_size} exceeds population {total}")

    zone_of = np.repeat(np.arange(spec.n_zones), pops)
    codes = np.empty((total, len(spec.constraints)), dtype=np.int64)
    start = 0
    for z, n in enumerate(pops):
        for j, (_, k) in enumerate(spec.constraints):
            probs = rng.dirichlet(np.full(k, spec.concentration))
            codes[start:start + n, j] = rng.choice(k, size=n, p=probs)
        start += n

    sizes = np.array([k for _, k in spec.constraints])
    score = (codes / (sizes - 1)).mean(axis=1) - 0.5
    incl = np.exp(spec.skew * score)
    incl /= incl.sum()

    # Census counts: zones x categories per constraint.
    labels = tuple(_labels(n, k) for n, k in spec.constraints)
    cons = []
    for j, (name, k) in enumerate(spec.constraints):
        counts = np.zeros((spec.n_zones, k))
        np.add.at(counts, (zone_of, codes[:, j]), 1.0)
        cons.append(Constraint(name, labels[j], counts))
    zones = tuple(f"Z{z + 1:03d}" for z in range(spec.n_zones))
    cs = ConstraintSet(zones, tuple(cons))

    populated = [np.flatnonzero(c.counts.sum(axis=0) > 0) for c in cons]
    redraws = 0
    while True:
        rows = np.sort(rng.choice(total, size=spec.survey_size, replace=False, p=incl))
        missing = [
            (spec.constraints[j][0], labels[j][k])
            for j, pop_k in enumerate(populated)
            for k in np.setdiff1d(pop_k, codes[rows, j])
        ]
        if not missing:
            break
        redraws += 1
        if redraws > spec.max_redraws:
            raise InfeasibleSpec(
                f"survey misses populated categories after {spec.max_redraws} redraws: {missing[:5]}"
            )
        warnings.warn(
            f"survey missed {len(missing)} populated categories; redrawing",
            SupportWarning,
            stacklevel=2,
        )

    columns = {
        name: np.array(labels[j], dtype=object)[codes[rows, j]]
        for j, (name, _) in enumerate(spec.constraints)
    }
    survey = SurveyMicrodata(columns)
    cmap = CategoryMap(
        {name: {lab: {name: (lab,)} for lab in labels[j]}
         for j, (name, _) in enumerate(spec.constraints)}
    )
    return SyntheticData(spec, zone_of, codes, rows, survey, cs, cmap, redraws, labels)


def write_synthetic(data: SyntheticData, directory, truth: bool = True) -> dict[str, Path]:
    """Write the inputs ``ingest`` reads: ``survey.csv``, ``constraints/*.csv``,
    ``map.yaml`` (plus ``truth.csv`` and ``spec.yaml``)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    out = {
        "survey": write_survey(data.survey, directory / "survey.csv"),
        "map": write_category_map(data.cmap, directory / "map.yaml"),
    }
    out["constraints"] = write_constraints(data.constraints, directory / "constraints")
    with (directory / "spec.yaml").open("w", encoding="utf-8") as fh:
        yaml.safe_dump(data.spec.to_dict(), fh, sort_keys=False)
    out["spec"] = directory / "spec.yaml"
    if truth:
        p = directory / "truth.csv"
        names = [n for n, _ in data.spec.constraints]
        with p.open("w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["zone", *names])
            zones = data.constraints.zones
            for z, row in zip(data.zone_of, data.codes):
                wr.writerow([zones[z], *(data.labels[j][c] for j, c in enumerate(row))])
        out["truth"] = p
    return out
