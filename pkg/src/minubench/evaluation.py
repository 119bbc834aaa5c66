"""Monte Carlo uncertainty analysis, perturbation sweeps and score statistics.

Every trial draws its randomness from a seed derived from
``(master_seed, finger_id, impression_id, trial, level)``, so results do not
depend on the order in which trials run or on how many worker processes
share the work. Aggregation always happens in index order after collection.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .core import MinutiaeTemplate
from .matcher import MatcherError, MatchScore
from .perturb import PerturbationSpec, apply_perturbation, sweep_level, technique_of
from .seeding import derive_seed, rng_for

FAR_TARGET = 1e-4
HIST_BINS = 100
DEFAULT_IMPOSTER_BUDGET = 50_000

MatcherFn = Callable[[MinutiaeTemplate, MinutiaeTemplate], "MatchScore | float"]


class TrialError(RuntimeError):
    """A trial failed; `k` and `n` identify the reference and trial index."""

    def __init__(self, message: str, k: int, n: int, matcher_failure: bool = False):
        super().__init__(message)
        self.k = k
        self.n = n
        self.matcher_failure = matcher_failure

    def __reduce__(self):
        return (TrialError, (self.args[0], self.k, self.n, self.matcher_failure))


def _value(s: "MatchScore | float") -> float:
    v = s.normalized if isinstance(s, MatchScore) else float(s)
    if not 0.0 <= v <= 1.0 or math.isnan(v):
        raise ValueError(f"normalized score {v} outside [0, 1]")
    return v


def _score(matcher: MatcherFn, a: MinutiaeTemplate, b: MinutiaeTemplate, k: int, n: int) -> float:
    try:
        return _value(matcher(a, b))
    except MatcherError as exc:
        raise TrialError(f"reference {k}, trial {n}: {exc}", k, n, matcher_failure=True) from exc
    except Exception as exc:
        raise TrialError(f"reference {k}, trial {n}: {type(exc).__name__}: {exc}", k, n) from exc


# --- worker pool -----------------------------------------------------------

_CTX: dict = {}


def _init_worker(fn, context) -> None:
    _CTX["fn"] = fn
    _CTX["context"] = context


def _run_one(item):
    return _CTX["fn"](_CTX["context"], item)


def run_tasks(fn: Callable, context, items: Sequence, workers: int = 1) -> list:
    """``[fn(context, item) for item in items]``, optionally on a process pool.

    Results come back in item order whatever the worker count.
    """
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(context, it) for it in items]
    workers = min(workers, len(items))
    chunk = max(1, math.ceil(len(items) / (workers * 4)))
    with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(fn, context)) as ex:
        return list(ex.map(_run_one, items, chunksize=chunk))


def trial_seed(master_seed: int, t: MinutiaeTemplate, trial: int, level: int = 0) -> int:
    return derive_seed(master_seed, t.finger_id, t.impression_id, trial, level)


# --- uncertainty -----------------------------------------------------------

@dataclass(frozen=True)
class ReferenceUncertainty:
    k: int
    finger_id: str
    impression_id: str
    mu: float
    u: float


@dataclass(frozen=True)
class UncertaintyReport:
    per_reference: tuple[ReferenceUncertainty, ...]
    u_matcher: float
    M: int
    N: int
    perturbation: PerturbationSpec | None
    matcher_id: str
    master_seed: int

    def recompute_u_matcher(self) -> float:
        return total_uncertainty([r.u for r in self.per_reference])


def reference_uncertainty(scores: Sequence[float]) -> tuple[float, float]:
    """Mean and population standard deviation (1/N) of one reference's trials."""
    s = np.asarray(scores, dtype=float)
    if len(s) == 0:
        raise ValueError("no scores")
    mu = float(np.mean(s))
    return mu, float(math.sqrt(np.mean((mu - s) ** 2)))


def total_uncertainty(u: Sequence[float]) -> float:
    """Root mean square of the per-reference uncertainties."""
    u = np.asarray(u, dtype=float)
    if len(u) == 0:
        raise ValueError("no uncertainties")
    return float(math.sqrt(np.mean(u**2)))


def _uncertainty_task(ctx, k: int) -> list[float]:
    refs, spec, matcher, N, seed = ctx
    ref = refs[k]
    out = []
    for n in range(N):
        try:
            test = apply_perturbation(ref, spec, np.random.default_rng(trial_seed(seed, ref, n)))
        except Exception as exc:
            raise TrialError(f"reference {k}, trial {n}: perturbation failed: {exc}", k, n) from exc
        out.append(_score(matcher, ref, test, k, n))
    return out


def uncertainty_analysis(
    references: Sequence[MinutiaeTemplate],
    spec: PerturbationSpec,
    matcher: MatcherFn,
    M: int,
    N: int,
    master_seed: int,
    workers: int = 1,
) -> UncertaintyReport:
    """Score N perturbed copies of each of the first M references against the
    unperturbed reference and summarize the spread."""
    if not 1 <= M <= len(references):
        raise ValueError(f"M={M} must be between 1 and the {len(references)} references supplied")
    if N < 2:
        raise ValueError(f"N={N} must be at least 2")
    refs = list(references[:M])
    scores = run_tasks(_uncertainty_task, (refs, spec, matcher, N, master_seed), range(M), workers)
    rows = []
    for k, (ref, s) in enumerate(zip(refs, scores)):
        mu, u = reference_uncertainty(s)
        rows.append(ReferenceUncertainty(k, ref.finger_id, ref.impression_id, mu, u))
    return UncertaintyReport(
        tuple(rows), total_uncertainty([r.u for r in rows]), M, N, spec,
        getattr(matcher, "matcher_id", getattr(matcher, "__name__", "custom")), master_seed,
    )


# --- TAR@FAR ---------------------------------------------------------------

def tar_at_far(genuine: Sequence[float], imposter: Sequence[float], far_target: float = FAR_TARGET) -> tuple[float, float]:
    """Threshold and true accept rate at a false accept rate of `far_target`.

    A score is accepted when it is >= the threshold. The threshold is the
    smallest observed imposter score whose acceptance region holds at most
    `far_target` of the imposters. When no imposter score qualifies it is the
    smallest genuine score above every imposter (or +inf if there is none).
    """
    g = np.sort(np.asarray(genuine, dtype=float))
    imp = np.sort(np.asarray(imposter, dtype=float))
    if len(g) == 0 or len(imp) == 0:
        raise ValueError("tar_at_far needs non-empty genuine and imposter scores")
    allowed = far_target * len(imp)
    cand = np.unique(imp)
    # imposters >= each candidate
    above = len(imp) - np.searchsorted(imp, cand, side="left")
    ok = np.nonzero(above <= allowed * (1 + 1e-12))[0]
    if len(ok):
        tau = float(cand[ok[0]])
    else:
        higher = g[g > imp[-1]]
        tau = float(higher[0]) if len(higher) else math.inf
    tar = float(len(g) - np.searchsorted(g, tau, side="left")) / len(g)
    return tau, tar


# --- score sets ------------------------------------------------------------

@dataclass(frozen=True)
class ScoreSummary:
    n: int
    mean: float
    std: float
    min: float
    max: float

    @classmethod
    def of(cls, scores: Sequence[float]) -> "ScoreSummary":
        s = np.asarray(scores, dtype=float)
        if len(s) == 0:
            return cls(0, math.nan, math.nan, math.nan, math.nan)
        return cls(len(s), float(s.mean()), float(s.std()), float(s.min()), float(s.max()))


def histogram(scores: Sequence[float], bins: int = HIST_BINS) -> np.ndarray:
    """Counts in `bins` equal bins over [0, 1]; 1.0 falls in the last bin."""
    idx = np.minimum(np.floor(np.asarray(scores, dtype=float) * bins).astype(int), bins - 1)
    return np.bincount(idx, minlength=bins)


@dataclass(frozen=True)
class ScoreSet:
    label: str
    scores: tuple[float, ...]

    @property
    def summary(self) -> ScoreSummary:
        return ScoreSummary.of(self.scores)

    @property
    def histogram(self) -> np.ndarray:
        return histogram(self.scores)


SCORE_LABELS = ("genuine_unperturbed", "genuine_perturbed", "imposter_unperturbed", "imposter_perturbed")


def imposter_pairs(P: int, budget: int, seed: int) -> list[tuple[int, int]]:
    """Up to `budget` distinct (reference i, mate j) index pairs with i != j,
    sampled by seed and returned sorted."""
    total = P * (P - 1)
    if total == 0 or budget <= 0:
        return []
    rng = rng_for(seed, "imposters", P)
    flat = np.arange(total) if budget >= total else np.sort(rng.choice(total, size=budget, replace=False))
    i, r = np.divmod(flat, P - 1)
    j = r + (r >= i)
    return list(zip(i.tolist(), j.tolist()))


def _mates_by_test(pairs_ij: list[tuple[int, int]], P: int) -> list[list[int]]:
    by_j: list[list[int]] = [[] for _ in range(P)]
    for i, j in pairs_ij:
        by_j[j].append(i)
    return by_j


def _level_task(ctx, item):
    """Perturb mate j at one level; score it against its own and foreign references."""
    pairs, matcher, seed, by_j = ctx
    spec, level, seed_level, j = item
    ref, mate = pairs[j]
    try:
        test = apply_perturbation(mate, spec, np.random.default_rng(trial_seed(seed, mate, 0, seed_level)))
    except Exception as exc:
        raise TrialError(f"pair {j}, level {level}: perturbation failed: {exc}", j, level) from exc
    gen = _score(matcher, ref, test, j, level)
    imp = [_score(matcher, pairs[i][0], test, i, level) for i in by_j[j]]
    return gen, imp


def _genuine_and_imposter(pairs, spec, level, matcher, seed, pairs_ij, workers, seed_level=None):
    """Genuine scores in pair order and imposter scores in (i, j) order."""
    P = len(pairs)
    by_j = _mates_by_test(pairs_ij, P)
    sl = level if seed_level is None else seed_level
    items = [(spec, level, sl, j) for j in range(P)]
    res = run_tasks(_level_task, (pairs, matcher, seed, by_j), items, workers)
    genuine = [r[0] for r in res]
    lookup = {}
    for j, (_, imp) in enumerate(res):
        for i, s in zip(by_j[j], imp):
            lookup[(i, j)] = s
    return genuine, [lookup[p] for p in pairs_ij]


def score_distributions(
    pairs: Sequence[tuple[MinutiaeTemplate, MinutiaeTemplate]],
    spec: PerturbationSpec,
    matcher: MatcherFn,
    seed: int,
    imposter_budget: int = DEFAULT_IMPOSTER_BUDGET,
    workers: int = 1,
) -> dict[str, ScoreSet]:
    """Genuine and imposter scores with and without perturbation of the mate."""
    if len(pairs) < 2:
        raise ValueError("score_distributions needs at least two pairs")
    pairs = list(pairs)
    pij = imposter_pairs(len(pairs), imposter_budget, seed)
    technique = technique_of(spec)
    g0, i0 = _genuine_and_imposter(pairs, sweep_level(technique, 0), 0, matcher, seed, pij, workers)
    g1, i1 = _genuine_and_imposter(pairs, spec, 1, matcher, seed, pij, workers)
    sets = dict(zip(SCORE_LABELS, (g0, g1, i0, i1)))
    return {k: ScoreSet(k, tuple(v)) for k, v in sets.items()}


# --- sweep -----------------------------------------------------------------

@dataclass(frozen=True)
class LevelResult:
    level: int
    params: str
    genuine: ScoreSummary
    imposter: ScoreSummary
    threshold: float
    tar: float


@dataclass(frozen=True)
class SweepResult:
    technique: str
    per_level: tuple[LevelResult, ...]
    far_target: float = FAR_TARGET

    @property
    def tars(self) -> list[float]:
        return [r.tar for r in self.per_level]


def describe_spec(spec: PerturbationSpec) -> str:
    """Compact, stable text form of a spec for CSVs and manifests."""
    from dataclasses import fields, is_dataclass

    def fmt(obj) -> str:
        parts = []
        for f in fields(obj):
            if f.name == "model":
                continue
            v = getattr(obj, f.name)
            if is_dataclass(v):
                parts.append(f"{f.name}({fmt(v)})")
            elif v is not None and v is not False:
                parts.append(f"{f.name}={v!r}")
        return " ".join(parts)

    return f"{technique_of(spec)}: {fmt(spec)}".rstrip(": ").rstrip()


def run_sweep(
    pairs: Sequence[tuple[MinutiaeTemplate, MinutiaeTemplate]],
    technique: str,
    matcher: MatcherFn,
    seed: int,
    levels: Iterable[int] = range(0, 9),
    imposter_budget: int = DEFAULT_IMPOSTER_BUDGET,
    far_target: float = FAR_TARGET,
    model=None,
    workers: int = 1,
    common_random_numbers: bool = True,
) -> SweepResult:
    """TAR@FAR at each sweep level for one perturbation family.

    At every level the mate of each pair is perturbed once; that perturbed
    mate is scored against its own reference (genuine) and against the
    sampled foreign references (imposter).

    With `common_random_numbers` a pair's random stream is the same at every
    level, so levels differ only in their parameters (e.g. one distortion
    pattern scaled by each sigma). This keeps level-to-level noise out of
    the TAR curve. Otherwise the level index is mixed into each trial seed.
    """
    if len(pairs) < 2:
        raise ValueError("run_sweep needs at least two genuine pairs")
    pairs = list(pairs)
    pij = imposter_pairs(len(pairs), imposter_budget, seed)
    if not pij:
        raise ValueError("imposter budget must be positive")
    rows = []
    for level in levels:
        spec = sweep_level(technique, level, model)
        g, imp = _genuine_and_imposter(pairs, spec, level, matcher, seed, pij, workers,
                                       seed_level=1 if common_random_numbers else level)
        tau, tar = tar_at_far(g, imp, far_target)
        rows.append(LevelResult(level, describe_spec(spec), ScoreSummary.of(g), ScoreSummary.of(imp), tau, tar))
    return SweepResult(technique, tuple(rows), far_target)


# --- CSV -------------------------------------------------------------------

def _f(v: float) -> str:
    return repr(float(v))


def _csv_text(rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def uncertainty_csv(report: UncertaintyReport) -> str:
    rows: list[Sequence] = [("k", "finger_id", "impression_id", "mu_k", "u_k")]
    rows += [(r.k, r.finger_id, r.impression_id, _f(r.mu), _f(r.u)) for r in report.per_reference]
    rows.append(("u_matcher", "", "", "", _f(report.u_matcher)))
    return _csv_text(rows)


def read_uncertainty_csv(path: str | Path) -> tuple[list[float], float]:
    """Per-reference u_k and the stored u_matcher footer."""
    us, total = [], None
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            if row["k"] == "u_matcher":
                total = float(row["u_k"])
            else:
                us.append(float(row["u_k"]))
    if total is None:
        raise ValueError(f"{path}: missing u_matcher footer row")
    return us, total


SWEEP_HEADER = ("technique", "level", "params", "n_genuine", "n_imposter",
                "genuine_mean", "imposter_mean", "threshold", "tar")


def sweep_csv(results: Iterable[SweepResult]) -> str:
    rows: list[Sequence] = [SWEEP_HEADER]
    for res in results:
        for r in res.per_level:
            rows.append((res.technique, r.level, r.params, r.genuine.n, r.imposter.n,
                         _f(r.genuine.mean), _f(r.imposter.mean), _f(r.threshold), _f(r.tar)))
    return _csv_text(rows)


def read_sweep_csv(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["level"] = int(r["level"])
        for k in ("genuine_mean", "imposter_mean", "threshold", "tar"):
            r[k] = float(r[k])
    return rows


def scores_csv(sets: Iterable[ScoreSet]) -> str:
    rows: list[Sequence] = [("label", "score")]
    for s in sets:
        rows += [(s.label, _f(v)) for v in s.scores]
    return _csv_text(rows)


def read_scores_csv(path: str | Path) -> dict[str, ScoreSet]:
    by: dict[str, list[float]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            by.setdefault(row["label"], []).append(float(row["score"]))
    return {k: ScoreSet(k, tuple(v)) for k, v in by.items()}
