"""Integerisation: turn one zone's fractional weights into whole clones.

Five methods are provided: ``rounding``, ``threshold``, ``counterweight``,
``pp`` (proportional probabilities) and ``trs`` (truncate, replicate,
sample). Each returns an :class:`IntegerisedZone` whose ``counts`` vector
gives the number of clones of every survey individual.

Random streams
--------------
Probabilistic methods draw from ``numpy.random.Generator(PCG64(seed))``
(PCG-64, seeded through numpy's ``SeedSequence``). Run ``r`` has the 64-bit
seed ``SeedSequence(master_seed, spawn_key=(r,)).generate_state(1)[0]``;
zone ``z`` of that run is seeded with word ``z`` of
``SeedSequence(run_seed).generate_state(n_zones)``. Every zone of every run
therefore has its own stream no matter how work is ordered or split across
threads, and a recorded run seed alone reproduces the run.
"""
from __future__ import annotations

import csv
import functools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    AllZeroWeights,
    DeficitUnfillable,
    InputError,
    MicrosimError,
    NegativeWeight,
    NonFiniteWeight,
    ThresholdExhausted,
    TruncationOvershoot,
    ZoneError,
)

METHODS = ("rounding", "threshold", "counterweight", "pp", "trs")
PROBABILISTIC = ("pp", "trs")

REPLICATED = "replicated"
SAMPLED = "sampled"
TOPPED_UP = "topped_up"


# ---------------------------------------------------------------------------
# weights and rounding

def _check_weights(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if w.ndim != 1:
        raise InputError(f"expected a weight vector, got shape {w.shape}")
    if w.size and w.min() >= 0 and np.isfinite(w.max()):
        return w
    if not np.isfinite(w).all():
        raise NonFiniteWeight(f"non-finite weight at index {int(np.flatnonzero(~np.isfinite(w))[0])}")
    if (w < 0).any():
        raise NegativeWeight(f"negative weight at index {int(np.flatnonzero(w < 0)[0])}")
    return w


def stable_argsort(x: np.ndarray) -> np.ndarray:
    """Same result as ``np.argsort(x, kind="stable")`` for NaN-free input.

    An unstable sort groups equal values; re-sorting on the unique integer
    key ``group * n + index`` then puts each group in index order. Two
    quicksorts beat one merge sort by a wide margin on weight vectors.
    """
    n = x.size
    order = np.argsort(x)
    sx = x[order]
    group = np.concatenate([[0], np.cumsum(sx[1:] != sx[:-1])])
    return order[np.argsort(group * n + order)]


def _check_pop(pop) -> int:
    if pop is None:
        raise InputError("census population required")
    p = float(pop)
    if not np.isfinite(p) or p < 0:
        raise InputError(f"census population must be finite and >= 0, got {pop}")
    return int(round_half_up(p))


def round_half_up(x):
    """Round to nearest integer, halves away from zero for x >= 0.

    Computed from the fractional part so that 0.49999999999999994 stays 0
    (``floor(x + 0.5)`` would give 1).
    """
    x = np.asarray(x, dtype=float)
    f = np.floor(x)
    out = f + ((x - f) >= 0.5)
    return out if out.ndim else float(out)


def round_weights(x, mode: str = "half_up"):
    """``half_up`` follows the textbook rule; ``half_even`` matches R's round()."""
    if mode == "half_up":
        return round_half_up(x)
    if mode == "half_even":
        out = np.rint(np.asarray(x, dtype=float))
        return out if out.ndim else float(out)
    raise ValueError(f"unknown rounding mode {mode!r}")


@dataclass(frozen=True)
class WeightDecomposition:
    """Replication part (``count``) and probability part (``dr``) of weights."""

    count: np.ndarray
    dr: np.ndarray

    @property
    def total_count(self) -> int:
        return int(self.count.sum())


def decompose(w) -> WeightDecomposition:
    w = _check_weights(w)
    whole = np.floor(w)
    return WeightDecomposition(whole.astype(np.int64), w - whole)


# ---------------------------------------------------------------------------
# result type

@dataclass
class IntegerisedZone:
    """Integer clone counts for one zone.

    ``replicated`` holds clones fixed deterministically (rounding or
    truncation); ``added`` holds clones added afterwards, by sampling
    (``pp``, ``trs``) or by topping up (``threshold``, ``counterweight``).
    """

    zone: str
    method: str
    replicated: np.ndarray
    added: np.ndarray
    pop_cens: int | None = None
    seed: int | None = None
    exit_diagnostic: float | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def counts(self) -> np.ndarray:
        return self.replicated + self.added

    @property
    def pop_sim(self) -> int:
        return int(self.replicated.sum() + self.added.sum())

    @property
    def added_provenance(self) -> str:
        return SAMPLED if self.method in PROBABILISTIC else TOPPED_UP

    @property
    def selections(self) -> np.ndarray:
        """Survey row indices, one entry per clone (replicated ones first)."""
        idx = np.arange(self.replicated.size)
        return np.concatenate([np.repeat(idx, self.replicated), np.repeat(idx, self.added)])

    @property
    def provenance(self) -> np.ndarray:
        """Provenance label for each entry of :attr:`selections`."""
        return np.array(
            [REPLICATED] * int(self.replicated.sum())
            + [self.added_provenance] * int(self.added.sum()),
            dtype=object,
        )

    def rows(self):
        """``(individual, copies, provenance)`` for every non-zero entry."""
        for i in np.flatnonzero(self.replicated):
            yield int(i), int(self.replicated[i]), REPLICATED
        prov = self.added_provenance
        for i in np.flatnonzero(self.added):
            yield int(i), int(self.added[i]), prov


# ---------------------------------------------------------------------------
# random streams and sampling

def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed)))


def run_seed(master_seed: int, run: int) -> int:
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(int(run),))
    return int(ss.generate_state(1, np.uint64)[0])


def zone_seeds(seed_of_run: int, n_zones: int) -> np.ndarray:
    """Seeds for zones ``0 .. n_zones-1``; a prefix does not depend on ``n_zones``."""
    return np.random.SeedSequence(int(seed_of_run)).generate_state(int(n_zones), np.uint64)


def zone_seed(master_seed: int, run: int, zone: int) -> int:
    return int(zone_seeds(run_seed(master_seed, run), zone + 1)[zone])


def _resolve_rng(rng) -> tuple[np.random.Generator, int | None]:
    if isinstance(rng, np.random.Generator):
        return rng, None
    if rng is None:
        raise InputError("probabilistic methods need a seed or generator")
    return make_rng(rng), int(rng)


# log(u) >= log(2**-53) > -37, so log(u) / p stays finite for p above this
_KEY_OVERFLOW = 1e-290


def sample_without_replacement(p, k: int, rng: np.random.Generator, method: str = "keys") -> np.ndarray:
    """Draw ``k`` distinct indices, each draw proportional to ``p`` among the
    indices not yet drawn.

    ``keys`` gives every positive-weight item the key ``log(u) / p`` with
    ``u ~ U(0, 1)`` and keeps the ``k`` largest (Efraimidis-Spirakis), which
    has exactly the same distribution over subsets as ``sequential`` draws
    with the drawn item's weight zeroed after each pick.
    """
    p = np.asarray(p, dtype=float)
    # items above _KEY_OVERFLOW take the fast path; usually that is all of them
    safe = p > _KEY_OVERFLOW
    nsafe = int(np.count_nonzero(safe))
    if nsafe == p.size:
        positive, npos = safe, nsafe
    else:
        positive = p > 0
        npos = int(np.count_nonzero(positive))
    if k > npos:
        raise DeficitUnfillable(f"need {k} draws, only {npos} items have positive weight")
    if k <= 0:
        return np.zeros(0, dtype=np.int64)
    if method == "keys":
        if k == npos:
            return np.flatnonzero(positive)
        # one uniform in (0, 1] per item; zero-weight items get key -inf
        keys = rng.random(p.size)
        np.subtract(1.0, keys, out=keys)
        np.log(keys, out=keys)
        if nsafe == p.size:
            keys /= p
        elif nsafe == npos:
            np.divide(keys, p, out=keys, where=positive)
            keys[~positive] = -np.inf
        else:
            # log(u) / p overflows for tiny p; rank by the equivalent
            # log(p) - log(-log(u)) instead
            with np.errstate(divide="ignore"):
                keys = np.log(p) - np.log(-keys)
            keys[~positive] = -np.inf
        cut = np.partition(keys, p.size - k)[p.size - k]
        picked = np.flatnonzero(keys >= cut)
        if picked.size != k:  # tied keys at the cut; vanishingly rare
            picked = np.sort(np.argpartition(keys, p.size - k)[p.size - k:])
        return picked
    if method == "sequential":
        q = p.copy()
        picked = np.empty(k, dtype=np.int64)
        for d in range(k):
            c = np.cumsum(q)
            i = int(np.searchsorted(c, rng.random() * c[-1], side="right"))
            i = min(i, q.size - 1)
            while q[i] == 0:  # guard against landing on a zeroed tail entry
                i -= 1
            picked[d] = i
            q[i] = 0.0
        return np.sort(picked)
    raise ValueError(f"unknown sampler {method!r}")


# ---------------------------------------------------------------------------
# the five methods

def integerise_rounding(w, pop_cens=None, *, zone: str = "0", rounding: str = "half_up") -> IntegerisedZone:
    """Clone each individual ``round(w)`` times; the population is not forced."""
    w = _check_weights(w)
    rep = round_weights(w, rounding).astype(np.int64)
    return IntegerisedZone(
        zone, "rounding", rep, np.zeros_like(rep),
        pop_cens=None if pop_cens is None else _check_pop(pop_cens),
    )


@functools.lru_cache(maxsize=16)
def _threshold_levels(step: float) -> np.ndarray:
    # Successive thresholds 1, 1-step, 1-2*step, ... built by repeated
    # subtraction (as a decrementing loop would), keeping only positive ones.
    levels = [1.0]
    it = 1.0
    while True:
        it = it - step
        if it <= 0:
            break
        levels.append(it)
    return np.array(levels)


def integerise_threshold(w, pop_cens, step: float = 0.001, *, zone: str = "0") -> IntegerisedZone:
    """Truncate, then lower an inclusion threshold from 1 in ``step`` bands.

    At each pass the threshold drops by ``step`` and every individual whose
    decimal remainder lies in ``[IT, IT + step)`` is cloned once more. The
    sweep stops at the first pass that brings the population up to
    ``pop_cens``; a band holding several individuals can overshoot.
    """
    if not step > 0:
        raise InputError("threshold step must be positive")
    d = decompose(w)
    pop = _check_pop(pop_cens)
    base = d.total_count
    added = np.zeros_like(d.count)
    if base >= pop:
        return IntegerisedZone(zone, "threshold", d.count, added, pop, exit_diagnostic=1.0,
                               diagnostics={"reentrant": 0})

    levels = _threshold_levels(float(step))
    # Band j holds remainders in [levels[j], levels[j-1]), so bands 1..j
    # together hold [levels[j], 1). The sweep stops at the first j where they
    # cover the deficit, i.e. the band holding the deficit-th largest remainder.
    deficit = pop - base
    eligible = int((d.dr >= levels[-1]).sum())
    if deficit > eligible:
        raise ThresholdExhausted(
            f"zone {zone}: threshold fell to 0 with population {base + eligible} < {pop}"
        )
    n = d.dr.size
    v = np.partition(d.dr, n - deficit)[n - deficit]
    jstar = int(np.searchsorted(-levels, -v, side="left"))
    chosen = d.dr >= levels[jstar]
    added[chosen] = 1
    return IntegerisedZone(
        zone, "threshold", d.count, added, pop,
        exit_diagnostic=float(levels[jstar]),
        diagnostics={"reentrant": int((chosen & (d.count > 0)).sum())},
    )


def integerise_counterweight(w, pop_cens=None, *, zone: str = "0", rounding: str = "half_up") -> IntegerisedZone:
    """Round, then top up in ascending weight order.

    Walking individuals from lightest to heaviest (ties in index order),
    each gets ``round(dr[i] + dr[i+1])`` extra clones while the running total
    is below ``round(sum(w))``. The last individual has no successor; its
    neighbour remainder counts as 0. The exit diagnostic is the last sorted
    position topped up (``-1`` if none).
    """
    w = _check_weights(w)
    order = stable_argsort(w)
    sw = w[order]
    iw = round_weights(sw, rounding).astype(np.int64)
    dw = sw - np.floor(sw)
    nxt = np.append(dw[1:], 0.0)
    adds = round_weights(dw + nxt, rounding).astype(np.int64)
    target = int(round_weights(sw.sum(), rounding))
    before = iw.sum() + np.concatenate([[0], np.cumsum(adds)[:-1]])
    applied = before < target
    exit_pos = int(np.flatnonzero(applied)[-1]) if applied.any() else -1

    rep = np.empty_like(iw)
    rep[order] = iw
    added = np.zeros_like(iw)
    added[order] = np.where(applied, adds, 0)
    return IntegerisedZone(
        zone, "counterweight", rep, added,
        pop_cens=None if pop_cens is None else _check_pop(pop_cens),
        exit_diagnostic=float(exit_pos),
        diagnostics={"target": target},
    )


def integerise_pp(w, pop_cens, rng, *, zone: str = "0") -> IntegerisedZone:
    """Sample ``pop_cens`` clones with replacement, ``P(i) = w[i] / sum(w)``.

    Each draw inverts the cumulative weights at a uniform point, so
    individuals with zero weight are never picked.
    """
    w = _check_weights(w)
    pop = _check_pop(pop_cens)
    cdf = np.cumsum(w)
    total = cdf[-1] if cdf.size else 0.0
    if not total > 0:
        raise AllZeroWeights(f"zone {zone}: all weights are zero")
    gen, seed = _resolve_rng(rng)
    x = gen.random(pop)
    x *= total
    x.sort()  # draws are exchangeable; sorted lookups are much faster
    # individual i takes the draws in [cdf[i-1], cdf[i])
    below = np.searchsorted(x, cdf, side="left")
    # x can round up to total; those go to the last positive weight
    below[int(np.flatnonzero(w)[-1]):] = pop
    counts = np.diff(below, prepend=0).astype(np.int64)
    return IntegerisedZone(zone, "pp", np.zeros_like(counts), counts, pop, seed=seed)


def integerise_trs(w, pop_cens, rng, *, zone: str = "0", sampler: str = "keys") -> IntegerisedZone:
    """Truncate, replicate, sample.

    Every individual is cloned ``floor(w)`` times; the remaining
    ``pop_cens - sum(floor(w))`` clones are drawn without replacement with
    weights equal to the decimal remainders, so each individual ends with
    ``floor(w)`` or ``floor(w) + 1`` clones.
    """
    d = decompose(w)
    pop = _check_pop(pop_cens)
    deficit = pop - d.total_count
    if deficit < 0:
        raise TruncationOvershoot(
            f"zone {zone}: truncated population {d.total_count} exceeds census {pop}"
        )
    gen, seed = _resolve_rng(rng)
    try:
        picked = sample_without_replacement(d.dr, deficit, gen, sampler)
    except DeficitUnfillable as exc:
        raise DeficitUnfillable(f"zone {zone}: deficit {deficit} exceeds the individuals "
                                f"with a remainder ({exc})") from None
    added = np.zeros_like(d.count)
    added[picked] = 1
    return IntegerisedZone(zone, "trs", d.count, added, pop, seed=seed,
                           diagnostics={"deficit": int(deficit)})


def integerise_zone(method: str, w, pop_cens=None, *, seed=None, zone: str = "0",
                    rounding: str = "half_up", step: float = 0.001,
                    sampler: str = "keys") -> IntegerisedZone:
    if method == "rounding":
        return integerise_rounding(w, pop_cens, zone=zone, rounding=rounding)
    if method == "threshold":
        return integerise_threshold(w, pop_cens, step, zone=zone)
    if method == "counterweight":
        return integerise_counterweight(w, pop_cens, zone=zone, rounding=rounding)
    if method == "pp":
        return integerise_pp(w, pop_cens, seed, zone=zone)
    if method == "trs":
        return integerise_trs(w, pop_cens, seed, zone=zone, sampler=sampler)
    raise InputError(f"unknown method {method!r}; expected one of {', '.join(METHODS)}")


# ---------------------------------------------------------------------------
# whole weight matrices and ensembles

def integerise_weights(method: str, weights, pops, *, master_seed: int | None = None, run: int = 0,
               threads: int = 1, zones: Sequence[str] | None = None,
               **options) -> list[IntegerisedZone]:
    """Integerise every zone (column) of ``weights``.

    ``weights`` is a :class:`~microsim.ipf.WeightMatrix` or an
    individuals x zones array. Probabilistic methods need ``master_seed``;
    zone ``z`` uses the stream seeded by ``zone_seed(master_seed, run, z)``.
    """
    if method not in METHODS:
        raise InputError(f"unknown method {method!r}; expected one of {', '.join(METHODS)}")
    w = weights.w if hasattr(weights, "w") else np.asarray(weights, dtype=float)
    w = np.asfortranarray(w, dtype=float)  # contiguous zone columns
    if zones is None:
        zones = getattr(weights, "zones", None) or tuple(str(z) for z in range(w.shape[1]))
    pops = np.asarray(pops, dtype=float)
    if pops.shape != (w.shape[1],):
        raise InputError(f"{pops.size} populations for {w.shape[1]} zones")
    if method in PROBABILISTIC and master_seed is None:
        raise InputError(f"method {method!r} needs a seed")

    seeds = zone_seeds(run_seed(master_seed, run), w.shape[1]) if method in PROBABILISTIC else None

    def task(z):
        seed = int(seeds[z]) if seeds is not None else None
        try:
            return integerise_zone(method, w[:, z], pops[z], seed=seed, zone=zones[z], **options)
        except MicrosimError as exc:
            raise ZoneError(exc, zones[z], run=run if method in PROBABILISTIC else None,
                            method=method) from exc

    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(task, range(w.shape[1])))
    return [task(z) for z in range(w.shape[1])]


def count_matrix(zones: Sequence[IntegerisedZone]) -> np.ndarray:
    """Clone counts, individuals x zones."""
    return np.column_stack([z.counts for z in zones])


@dataclass
class RunEnsemble:
    method: str
    runs: list[list[IntegerisedZone]]
    taes: np.ndarray
    master_seed: int
    run_seeds: list[int]

    @property
    def best_index(self) -> int:
        return int(np.argmin(self.taes))  # first minimum: lowest run index wins ties

    @property
    def best(self) -> list[IntegerisedZone]:
        return self.runs[self.best_index]

    @property
    def best_tae(self) -> float:
        return float(self.taes[self.best_index])


def run_ensemble(method: str, weights, pops, indicator, census, n_runs: int = 20,
                 master_seed: int = 1000, *, threads: int = 1, **options) -> RunEnsemble:
    """Repeat a probabilistic integerisation ``n_runs`` times and score each
    run by total absolute error against ``census`` (zones x categories)."""
    from .metrics import simulated_table, tae

    if method not in PROBABILISTIC:
        raise InputError(f"ensembles only make sense for {PROBABILISTIC}, not {method!r}")
    if n_runs < 1:
        raise InputError("n_runs must be >= 1")
    runs, taes = [], []
    for r in range(n_runs):
        zs = integerise_weights(method, weights, pops, master_seed=master_seed, run=r,
                        threads=threads, **options)
        runs.append(zs)
        taes.append(tae(census, simulated_table(zs, indicator)))
    return RunEnsemble(method, runs, np.array(taes), int(master_seed),
                       [run_seed(master_seed, r) for r in range(n_runs)])


# ---------------------------------------------------------------------------
# output files

def write_selections(zones: Sequence[IntegerisedZone], path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["zone", "individual_id", "copies", "provenance"])
        for z in zones:
            for i, copies, prov in z.rows():
                wr.writerow([z.zone, i, copies, prov])
    return path


def _fmt_opt(v):
    if v is None:
        return ""
    if isinstance(v, float) and v.is_integer():
        return str(int(v))
    return repr(v) if isinstance(v, float) else str(v)


def write_summary(zones: Sequence[IntegerisedZone], path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["zone", "pop_cens", "pop_sim", "exit_diagnostic", "seed"])
        for z in zones:
            wr.writerow([z.zone, _fmt_opt(z.pop_cens), z.pop_sim,
                         _fmt_opt(z.exit_diagnostic), _fmt_opt(z.seed)])
    return path


def read_integerised(selections_path, summary_path, n_individuals: int, method: str) -> list[IntegerisedZone]:
    """Rebuild zones from the two CSVs written by :func:`write_selections`
    and :func:`write_summary`."""
    with Path(summary_path).open(newline="", encoding="utf-8") as fh:
        summary = list(csv.DictReader(fh))
    zones = {}
    for row in summary:
        zones[row["zone"]] = IntegerisedZone(
            row["zone"], method,
            np.zeros(n_individuals, dtype=np.int64), np.zeros(n_individuals, dtype=np.int64),
            pop_cens=int(row["pop_cens"]) if row["pop_cens"] else None,
            seed=int(row["seed"]) if row["seed"] else None,
            exit_diagnostic=float(row["exit_diagnostic"]) if row["exit_diagnostic"] else None,
        )
    with Path(selections_path).open(newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            z = zones.get(row["zone"])
            if z is None:
                raise InputError(f"{selections_path}: zone {row['zone']!r} not in summary")
            i = int(row["individual_id"])
            if not 0 <= i < n_individuals:
                raise InputError(f"{selections_path}: individual {i} out of range")
            target = z.replicated if row["provenance"] == REPLICATED else z.added
            target[i] += int(row["copies"])
    return list(zones.values())
