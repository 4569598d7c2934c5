"""Loading and validation of survey microdata, constraint tables and the
category map that links them.

Survey and constraint files are plain CSV. The category map is YAML::

    attributes:
      age:
        edges: [16, 35, 55]          # bins [16,35) [35,55) [55,inf)
        labels: ["16-34", "35-54", "55+"]
      sex: categorical
    constraints:
      age_sex:
        m_16_34: {sex: m, age: 16-34}
        f_16_34: {sex: f, age: 16-34}
      mode:
        attribute: mode              # shorthand: one category per label
        categories: [car, bus, walk]

A category test value may be a single label or a list of labels (matches any).
"""
from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import yaml

from .errors import (
    ClassificationError,
    EmptyFile,
    MapError,
    MissingColumn,
    MissingValue,
    NegativeCount,
    PopulationMismatch,
    UnparseableCell,
    ZoneMismatch,
)

logger = logging.getLogger(__name__)


class EmptyCategoryWarning(UserWarning):
    """A constraint category is matched by no survey individual."""


# ---------------------------------------------------------------------------
# binning

@dataclass(frozen=True)
class Bins:
    """Left-closed bins ``[e0, e1), [e1, e2), ..., [ek, inf)``.

    Values below the first edge get the label ``"<e0"``, which no category
    should reference, so they surface as a :class:`ClassificationError` when
    the indicator matrix is built.
    """

    edges: tuple[float, ...]
    labels: tuple[str, ...] = ()

    def __post_init__(self):
        if len(self.edges) == 0:
            raise MapError("bins need at least one edge")
        if any(b <= a for a, b in zip(self.edges, self.edges[1:])):
            raise MapError(f"bin edges must be strictly increasing: {self.edges}")
        if not self.labels:
            object.__setattr__(self, "labels", _default_labels(self.edges))
        if len(self.labels) != len(self.edges):
            raise MapError(
                f"{len(self.edges)} edges need {len(self.edges)} labels, "
                f"got {len(self.labels)}"
            )

    @property
    def below_label(self) -> str:
        return f"<{_fmt_edge(self.edges[0])}"

    def assign(self, values: np.ndarray) -> np.ndarray:
        idx = np.searchsorted(np.asarray(self.edges, dtype=float), values, side="right") - 1
        labels = np.array((self.below_label,) + tuple(self.labels), dtype=object)
        return labels[idx + 1]


def _fmt_edge(e: float) -> str:
    return str(int(e)) if float(e).is_integer() else repr(float(e))


def _default_labels(edges: Sequence[float]) -> tuple[str, ...]:
    integral = all(float(e).is_integer() for e in edges)
    labels = []
    for lo, hi in zip(edges, edges[1:]):
        if integral:
            labels.append(f"{int(lo)}-{int(hi) - 1}")
        else:
            labels.append(f"{_fmt_edge(lo)}-{_fmt_edge(hi)}")
    labels.append(f"{_fmt_edge(edges[-1])}+")
    return tuple(labels)


# ---------------------------------------------------------------------------
# survey

@dataclass(frozen=True)
class SurveyMicrodata:
    """Categorical survey records, stored column-wise.

    Row ``i`` of every column belongs to the individual with id ``i``.
    """

    columns: Mapping[str, np.ndarray]

    def __post_init__(self):
        lengths = {len(v) for v in self.columns.values()}
        if len(lengths) > 1:
            raise ValueError(f"ragged survey columns: {sorted(lengths)}")

    @property
    def attributes(self) -> tuple[str, ...]:
        return tuple(self.columns)

    @property
    def n_individuals(self) -> int:
        return len(next(iter(self.columns.values()))) if self.columns else 0

    @property
    def ids(self) -> np.ndarray:
        return np.arange(self.n_individuals)

    def __len__(self) -> int:
        return self.n_individuals

    def record(self, i: int) -> dict[str, str]:
        return {k: v[i] for k, v in self.columns.items()}

    @classmethod
    def from_records(cls, records: Sequence[Mapping[str, str]]) -> "SurveyMicrodata":
        if not records:
            return cls({})
        keys = list(records[0])
        return cls({k: np.array([r[k] for r in records], dtype=object) for k in keys})


def _read_csv(path: Path) -> tuple[list[str], list[list[str]]]:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if r]  # tolerate trailing blank lines
    if not rows:
        raise EmptyFile(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    return header, rows[1:]


def load_survey(path, schema: Mapping[str, Bins | None] | None = None) -> SurveyMicrodata:
    """Read a survey CSV (header row of attribute names, one individual per row).

    Parameters
    ----------
    path : path-like
        Survey file.
    schema : mapping, optional
        Attribute name to :class:`Bins` (continuous, binned on load) or None
        (categorical, kept verbatim). Every schema attribute must be present
        and non-empty on every row. Columns outside the schema are kept as-is.
        When omitted, every column is treated as a required categorical.

    Returns
    -------
    SurveyMicrodata
        Row indices follow file order, starting at 0.
    """
    header, rows = _read_csv(path)
    if not rows:
        raise EmptyFile(f"{path}: no data rows")
    if schema is None:
        schema = {h: None for h in header}
    for attr in schema:
        if attr not in header:
            raise MissingColumn(attr, path)

    raw = {h: [] for h in header}
    for r, row in enumerate(rows):
        for j, h in enumerate(header):
            raw[h].append(row[j].strip() if j < len(row) else "")

    columns = {}
    for h in header:
        vals = raw[h]
        if h in schema:
            for r, v in enumerate(vals):
                if v == "" or v.upper() == "NA":
                    raise MissingValue(r, h)
        bins = schema.get(h)
        if bins is None:
            columns[h] = np.array(vals, dtype=object)
            continue
        nums = np.empty(len(vals), dtype=float)
        for r, v in enumerate(vals):
            try:
                nums[r] = float(v)
            except ValueError:
                raise UnparseableCell(r, h, v) from None
            if not math.isfinite(nums[r]):
                raise UnparseableCell(r, h, v)
        columns[h] = bins.assign(nums)
    return SurveyMicrodata(columns)


def write_survey(survey: SurveyMicrodata, path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(survey.attributes)
        cols = [survey.columns[a] for a in survey.attributes]
        for i in range(survey.n_individuals):
            w.writerow([c[i] for c in cols])
    return path


# ---------------------------------------------------------------------------
# constraints

@dataclass(frozen=True)
class Constraint:
    name: str
    categories: tuple[str, ...]
    counts: np.ndarray  # zones x categories, float64 holding counts

    @property
    def n_categories(self) -> int:
        return len(self.categories)


@dataclass(frozen=True)
class ConstraintSet:
    zones: tuple[str, ...]
    constraints: tuple[Constraint, ...]

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.constraints)

    @property
    def n_zones(self) -> int:
        return len(self.zones)

    @property
    def n_categories(self) -> int:
        return sum(c.n_categories for c in self.constraints)

    @property
    def populations(self) -> np.ndarray:
        """Census population per zone (row sums of the first constraint)."""
        return self.constraints[0].counts.sum(axis=1)

    @property
    def table(self) -> np.ndarray:
        """All constraints side by side: zones x total categories."""
        return np.hstack([c.counts for c in self.constraints])

    @property
    def blocks(self) -> dict[str, slice]:
        out, start = {}, 0
        for c in self.constraints:
            out[c.name] = slice(start, start + c.n_categories)
            start += c.n_categories
        return out

    @property
    def column_labels(self) -> list[tuple[str, str]]:
        return [(c.name, k) for c in self.constraints for k in c.categories]

    def __getitem__(self, name: str) -> Constraint:
        for c in self.constraints:
            if c.name == name:
                return c
        raise KeyError(name)

    def subset_zones(self, idx: Sequence[int]) -> "ConstraintSet":
        idx = list(idx)
        return ConstraintSet(
            tuple(self.zones[i] for i in idx),
            tuple(Constraint(c.name, c.categories, c.counts[idx]) for c in self.constraints),
        )


def _parse_count(text: str, row: int, column: str) -> float:
    try:
        v = float(int(text))
    except ValueError:
        try:
            v = float(text)
        except ValueError:
            raise UnparseableCell(row, column, text) from None
    if not math.isfinite(v):
        raise UnparseableCell(row, column, text)
    if v < 0:
        raise NegativeCount(f"row {row}, column {column!r}: negative count {text}")
    return v


def read_constraint(path, name: str | None = None) -> tuple[list[str], Constraint]:
    path = Path(path)
    header, rows = _read_csv(path)
    if len(header) < 2:
        raise EmptyFile(f"{path}: need a zone column and at least one category")
    if not rows:
        raise EmptyFile(f"{path}: no zone rows")
    cats = tuple(header[1:])
    zones, counts = [], np.empty((len(rows), len(cats)))
    for r, row in enumerate(rows):
        if len(row) != len(header):
            raise UnparseableCell(r, "<row>", ",".join(row))
        zones.append(row[0].strip())
        for j, cell in enumerate(row[1:]):
            counts[r, j] = _parse_count(cell.strip(), r, cats[j])
    if len(set(zones)) != len(zones):
        raise ZoneMismatch(f"{path}: duplicate zone ids")
    return zones, Constraint(name or path.stem, cats, counts)


def load_constraints(
    paths: Iterable,
    mode: str = "strict",
    tolerance: float = 0.0,
    names: Sequence[str] | None = None,
) -> ConstraintSet:
    """Read one CSV per constraint (``zone,<cat1>,...``), in the given order.

    In ``strict`` mode, a zone whose row sum differs from the first
    constraint's by more than ``tolerance`` raises :class:`PopulationMismatch`.
    In ``lenient`` mode the offending rows are rescaled proportionally to the
    first constraint's row sum.
    """
    if mode not in ("strict", "lenient"):
        raise ValueError(f"mode must be 'strict' or 'lenient', not {mode!r}")
    paths = [Path(p) for p in paths]
    if not paths:
        raise EmptyFile("no constraint files given")
    for p in paths:
        if not p.exists():
            raise FileNotFoundError(p)

    loaded = [
        read_constraint(p, None if names is None else names[i])
        for i, p in enumerate(paths)
    ]
    zones = loaded[0][0]
    order = {z: i for i, z in enumerate(zones)}
    constraints = []
    for (zs, con), p in zip(loaded, paths):
        if set(zs) != set(zones):
            raise ZoneMismatch(f"{p}: zone ids differ from {paths[0]}")
        perm = np.argsort([order[z] for z in zs])
        constraints.append(Constraint(con.name, con.categories, con.counts[perm]))

    if len({c.name for c in constraints}) != len(constraints):
        raise MapError("duplicate constraint names")

    pop = constraints[0].counts.sum(axis=1)
    for k, con in enumerate(constraints[1:], start=1):
        sums = con.counts.sum(axis=1)
        bad = np.flatnonzero(np.abs(sums - pop) > tolerance)
        if bad.size == 0:
            continue
        if mode == "strict":
            z = bad[0]
            raise PopulationMismatch(zones[z], con.name, pop[z], sums[z])
        logger.warning(
            "constraint %r: rescaling %d zone(s) to the first constraint's totals",
            con.name, bad.size,
        )
        counts = con.counts.copy()
        for z in bad:
            if sums[z] > 0:
                counts[z] *= pop[z] / sums[z]
        constraints[k] = Constraint(con.name, con.categories, counts)
    return ConstraintSet(tuple(zones), tuple(constraints))


def _fmt_count(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def write_constraints(cs: ConstraintSet, directory) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for con in cs.constraints:
        p = directory / f"{con.name}.csv"
        with p.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["zone", *con.categories])
            for z, row in zip(cs.zones, con.counts):
                w.writerow([z, *(_fmt_count(v) for v in row)])
        paths.append(p)
    return paths


# ---------------------------------------------------------------------------
# category map

@dataclass(frozen=True)
class CategoryMap:
    """Per constraint, an ordered mapping category label -> attribute tests.

    Each test maps an attribute to the tuple of labels it accepts; a category
    matches an individual when every test passes.
    """

    constraints: Mapping[str, Mapping[str, Mapping[str, tuple[str, ...]]]]
    bins: Mapping[str, Bins] = field(default_factory=dict)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(self.constraints)

    @property
    def attributes(self) -> set[str]:
        return {a for cats in self.constraints.values() for t in cats.values() for a in t}

    def categories(self, name: str) -> tuple[str, ...]:
        return tuple(self.constraints[name])

    @property
    def schema(self) -> dict[str, Bins | None]:
        """Survey schema implied by the map: every referenced attribute."""
        return {a: self.bins.get(a) for a in sorted(self.attributes | set(self.bins))}

    def to_dict(self) -> dict:
        attrs = {}
        for a, b in self.bins.items():
            attrs[a] = {"edges": [float(e) if not float(e).is_integer() else int(e) for e in b.edges],
                        "labels": list(b.labels)}
        cons = {}
        for name, cats in self.constraints.items():
            cons[name] = {
                label: {a: (v[0] if len(v) == 1 else list(v)) for a, v in tests.items()}
                for label, tests in cats.items()
            }
        out = {"constraints": cons}
        if attrs:
            out = {"attributes": attrs, **out}
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "CategoryMap":
        if not isinstance(data, Mapping) or "constraints" not in data:
            raise MapError("category map needs a 'constraints' section")
        bins = {}
        for attr, spec in (data.get("attributes") or {}).items():
            if spec is None or spec == "categorical":
                continue
            if not isinstance(spec, Mapping) or "edges" not in spec:
                raise MapError(f"attribute {attr!r}: expected 'categorical' or an edges mapping")
            bins[str(attr)] = Bins(
                tuple(float(e) for e in spec["edges"]),
                tuple(str(x) for x in spec.get("labels") or ()),
            )
        constraints = {}
        for name, cats in data["constraints"].items():
            if not isinstance(cats, Mapping) or not cats:
                raise MapError(f"constraint {name!r}: no categories")
            if set(cats) == {"attribute", "categories"}:
                attr = str(cats["attribute"])
                parsed = {str(k): {attr: (str(k),)} for k in cats["categories"]}
            else:
                parsed = {}
                for label, tests in cats.items():
                    if not isinstance(tests, Mapping) or not tests:
                        raise MapError(f"{name}/{label}: tests must be a non-empty mapping")
                    parsed[str(label)] = {
                        str(a): tuple(str(x) for x in (v if isinstance(v, (list, tuple)) else [v]))
                        for a, v in tests.items()
                    }
            constraints[str(name)] = parsed
        return cls(constraints, bins)


def load_category_map(path) -> CategoryMap:
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        data = yaml.safe_load(fh)
    if data is None:
        raise EmptyFile(f"{path}: empty category map")
    return CategoryMap.from_dict(data)


def write_category_map(cmap: CategoryMap, path) -> Path:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        yaml.safe_dump(cmap.to_dict(), fh, sort_keys=False)
    return path


# ---------------------------------------------------------------------------
# indicator

@dataclass(frozen=True)
class Indicator:
    """0/1 matrix individuals x categories, plus per-constraint category codes.

    ``codes[i, c]`` is the index (within constraint ``c``) of the one category
    individual ``i`` falls into.
    """

    matrix: np.ndarray
    codes: np.ndarray
    names: tuple[str, ...]
    categories: tuple[tuple[str, ...], ...]

    @property
    def n_individuals(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_categories(self) -> int:
        return self.matrix.shape[1]

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(len(c) for c in self.categories)

    @property
    def blocks(self) -> list[slice]:
        out, start = [], 0
        for n in self.sizes:
            out.append(slice(start, start + n))
            start += n
        return out

    @classmethod
    def from_codes(cls, codes, sizes: Sequence[int], names=None) -> "Indicator":
        codes = np.asarray(codes, dtype=np.int64)
        if codes.ndim == 1:
            codes = codes[:, None]
        names = tuple(names or (f"c{j}" for j in range(codes.shape[1])))
        cats = tuple(tuple(str(k) for k in range(s)) for s in sizes)
        mat = np.zeros((codes.shape[0], sum(sizes)), dtype=np.uint8)
        start = 0
        for j, s in enumerate(sizes):
            mat[np.arange(codes.shape[0]), start + codes[:, j]] = 1
            start += s
        return cls(mat, codes, names, cats)


def build_indicator(
    survey: SurveyMicrodata,
    cmap: CategoryMap,
    constraints: ConstraintSet | None = None,
) -> Indicator:
    """Classify every individual into exactly one category per constraint.

    When ``constraints`` is given, the constraint order and the category
    order within each constraint follow it (so the indicator columns line up
    with ``constraints.table``); otherwise the map's order is used.
    """
    if constraints is not None:
        layout = []
        for con in constraints.constraints:
            if con.name not in cmap.constraints:
                raise MapError(f"constraint {con.name!r} has no entry in the category map")
            mapped = cmap.constraints[con.name]
            missing = [k for k in con.categories if k not in mapped]
            extra = [k for k in mapped if k not in con.categories]
            if missing or extra:
                raise MapError(
                    f"constraint {con.name!r}: categories differ from map "
                    f"(missing from map: {missing}, not in table: {extra})"
                )
            layout.append((con.name, con.categories))
    else:
        layout = [(n, cmap.categories(n)) for n in cmap.names]

    for attr in cmap.attributes:
        if attr not in survey.columns:
            raise MissingColumn(attr)

    n = survey.n_individuals
    blocks, codes = [], np.empty((n, len(layout)), dtype=np.int64)
    for j, (name, cats) in enumerate(layout):
        block = np.zeros((n, len(cats)), dtype=np.uint8)
        for k, label in enumerate(cats):
            mask = np.ones(n, dtype=bool)
            for attr, accepted in cmap.constraints[name][label].items():
                mask &= np.isin(survey.columns[attr], accepted)
            block[:, k] = mask
        hits = block.sum(axis=1)
        bad = np.flatnonzero(hits != 1)
        if bad.size:
            raise ClassificationError(int(bad[0]), name, int(hits[bad[0]]))
        for k in np.flatnonzero(block.sum(axis=0) == 0):
            warnings.warn(
                f"constraint {name!r}: category {cats[k]!r} matches no survey individual",
                EmptyCategoryWarning,
                stacklevel=2,
            )
        codes[:, j] = block.argmax(axis=1)
        blocks.append(block)
    matrix = np.hstack(blocks) if blocks else np.zeros((n, 0), dtype=np.uint8)
    return Indicator(matrix, codes, tuple(n for n, _ in layout), tuple(c for _, c in layout))
