"""Baseline minutiae matcher and the external-matcher adapter.

The baseline works in four stages:

1. a rotation/translation-invariant descriptor per minutia built from its
   k nearest neighbours (distance, bearing relative to the minutia direction,
   relative direction);
2. candidate minutia pairs ranked by descriptor distance;
3. for each of the best candidates, a rigid alignment of A onto B, greedy
   one-to-one pairing within distance/angle tolerances, then a least-squares
   rigid refit on the pairs and a second pairing pass;
4. score ``m^2 / (n_A * n_B)`` maximised over candidates, where ``m`` is the
   number of paired minutiae and ``n_A``, ``n_B`` count the minutiae that
   could have been paired (see :func:`_effective_count`).
"""

from __future__ import annotations

import math
import os
import re
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from .core import MinutiaeTemplate, write_iso

TWO_PI = 2.0 * math.pi


class MatcherError(RuntimeError):
    """An external matcher failed; ``diagnostics`` holds what it printed."""

    def __init__(self, message: str, diagnostics: str = ""):
        super().__init__(message if not diagnostics else f"{message}\n{diagnostics}")
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class ExternalMatcher:
    command: tuple[str, ...]
    score_min: float = 0.0
    score_max: float = 1.0
    timeout_s: float = 30.0

    def __post_init__(self) -> None:
        if isinstance(self.command, str):
            object.__setattr__(self, "command", tuple(self.command.split()))
        if not self.score_min < self.score_max:
            raise ValueError("score_min must be below score_max")
        if not self.command:
            raise ValueError("empty matcher command")


@dataclass(frozen=True)
class MatcherConfig:
    pair_distance_tol: float = 8.0
    pair_angle_tol: float = math.pi / 8
    refit_distance_tol: float = 16.0
    neighbor_k: int = 5
    top_alignments: int = 10
    coherence_tol: float = math.pi / 6
    overlap_margin: float = 0.0
    min_overlap: float = 0.5
    external: ExternalMatcher | None = None

    def __post_init__(self) -> None:
        if self.pair_distance_tol <= 0 or self.pair_angle_tol <= 0:
            raise ValueError("pairing tolerances must be positive")
        if self.refit_distance_tol < self.pair_distance_tol:
            raise ValueError("refit_distance_tol must be at least pair_distance_tol")
        if self.neighbor_k < 1 or self.top_alignments < 1:
            raise ValueError("neighbor_k and top_alignments must be at least 1")

    @property
    def matcher_id(self) -> str:
        if self.external is not None:
            return "external:" + " ".join(self.external.command)
        return "baseline"


@dataclass(frozen=True)
class MatchScore:
    raw: float
    normalized: float
    matched_count: int
    matcher_id: str


class Matcher(Protocol):
    def __call__(self, a: MinutiaeTemplate, b: MinutiaeTemplate) -> MatchScore: ...


# --- descriptors -----------------------------------------------------------

_D_SCALE = 8.0
_A_SCALE = math.pi / 6
_NEIGHBOR_CAP = 3.0


def _angdiff(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Absolute wrapped difference in [0, pi]."""
    return np.abs((a - b + math.pi) % TWO_PI - math.pi)


def _angdiff_canon(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Same as :func:`_angdiff` for inputs already in [0, 2*pi)."""
    d = np.abs(a - b)
    return np.minimum(d, TWO_PI - d)


@dataclass
class _Prepared:
    xy: np.ndarray
    theta: np.ndarray
    desc: np.ndarray       # (n, k, 3), NaN rows for absent neighbours
    reliable: np.ndarray   # (n,) orientation agrees with neighbourhood flow
    hull: np.ndarray       # (h, 2) CCW hull vertices; h < 3 means no usable region
    edge_dir: np.ndarray   # (h, 2) unit direction of each hull edge


def _convex_hull(pts: np.ndarray) -> np.ndarray:
    """Andrew's monotone chain; returns CCW vertices without repetition."""
    if len(pts) < 3:
        return pts.copy()
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    P = pts[order].tolist()

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list = []
    for p in P:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in reversed(P):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1], dtype=float)


def _edge_directions(hull: np.ndarray) -> np.ndarray:
    if len(hull) < 3:
        return np.zeros((len(hull), 2))
    e = np.roll(hull, -1, axis=0) - hull
    return e / np.hypot(e[:, 0], e[:, 1])[:, None]


def _inside_hull(pts: np.ndarray, hull: np.ndarray, edge_dir: np.ndarray, margin: float) -> np.ndarray:
    """Points within `margin` px of a CCW convex polygon (or inside it)."""
    if len(hull) < 3:
        return np.ones(len(pts), dtype=bool)
    rel_x = pts[:, None, 0] - hull[None, :, 0]
    rel_y = pts[:, None, 1] - hull[None, :, 1]
    signed = edge_dir[None, :, 0] * rel_y - edge_dir[None, :, 1] * rel_x
    return np.min(signed, axis=1) >= -(margin + 1e-6)


def _prepare(t: MinutiaeTemplate, cfg: MatcherConfig) -> _Prepared:
    arr = t.array
    n = len(arr)
    xy = arr[:, :2]
    theta = arr[:, 2]
    k = min(cfg.neighbor_k, max(n - 1, 0))
    desc = np.full((n, cfg.neighbor_k, 3), np.nan)
    reliable = np.ones(n, dtype=bool)
    if k > 0:
        dx = xy[None, :, 0] - xy[:, None, 0]
        dy = xy[None, :, 1] - xy[:, None, 1]
        dist = np.hypot(dx, dy)
        # rounding makes neighbour order robust to last-bit noise from rigid motions
        key = np.round(dist, 6)
        np.fill_diagonal(key, np.inf)
        nb = np.argsort(key, axis=1, kind="stable")[:, :k]
        rows = np.arange(n)[:, None]
        d = dist[rows, nb]
        bearing = (np.arctan2(dy[rows, nb], dx[rows, nb]) - theta[:, None]) % TWO_PI
        rel = (theta[nb] - theta[:, None]) % TWO_PI
        desc[:, :k, 0] = d
        desc[:, :k, 1] = bearing
        desc[:, :k, 2] = rel
        if k >= 2:
            # ridge flow is axial: compare doubled angles
            flow = np.arctan2(np.sin(2 * theta[nb]).sum(axis=1), np.cos(2 * theta[nb]).sum(axis=1))
            reliable = _angdiff(2 * theta, flow) <= 2 * cfg.coherence_tol
    hull = _convex_hull(xy)
    return _Prepared(xy, theta, desc, reliable, hull, _edge_directions(hull))


def _descriptor_costs(a: _Prepared, b: _Prepared) -> np.ndarray:
    """(nA, nB) matrix: each A neighbour takes its cheapest B neighbour."""
    da = a.desc[:, None, :, None, :]
    db = b.desc[None, :, None, :, :]
    c = np.abs(da[..., 0] - db[..., 0]) * (1.0 / _D_SCALE)
    c += (_angdiff_canon(da[..., 1], db[..., 1]) + _angdiff_canon(da[..., 2], db[..., 2])) * (1.0 / _A_SCALE)
    np.fmin(c, _NEIGHBOR_CAP, out=c)  # fmin maps NaN (absent neighbour) to the cap
    return c.min(axis=3).sum(axis=2)


def _rigid(theta: float, ax: float, ay: float, bx: float, by: float) -> tuple[float, float, float]:
    """Rotation angle and translation carrying point a onto b."""
    c, s = math.cos(theta), math.sin(theta)
    return theta, bx - (c * ax - s * ay), by - (s * ax + c * ay)


def _apply(xy: np.ndarray, tf: tuple[float, float, float]) -> np.ndarray:
    th, tx, ty = tf
    c, s = math.cos(th), math.sin(th)
    return np.column_stack([c * xy[:, 0] - s * xy[:, 1] + tx, s * xy[:, 0] + c * xy[:, 1] + ty])


def _pair(a: _Prepared, b: _Prepared, tf: tuple[float, float, float], cfg: MatcherConfig,
          tol: float | None = None):
    """Greedy one-to-one pairing, closest first; ties go to the lowest indices."""
    tol = cfg.pair_distance_tol if tol is None else tol
    axy = _apply(a.xy, tf)
    dx = axy[:, None, 0] - b.xy[None, :, 0]
    dy = axy[:, None, 1] - b.xy[None, :, 1]
    dist = np.hypot(dx, dy)
    ia, ib = np.nonzero(dist <= tol)
    ok = _angdiff(a.theta[ia] + tf[0], b.theta[ib]) <= cfg.pair_angle_tol
    ia, ib = ia[ok], ib[ok]
    if len(ia) == 0:
        return ia, ib, axy
    if len(np.unique(ia)) == len(ia) and len(np.unique(ib)) == len(ib):
        # no conflicts: greedy would accept every candidate
        order = np.argsort(ia, kind="stable")
        return ia[order], ib[order], axy
    order = np.lexsort((ib, ia, np.round(dist[ia, ib], 6)))
    used_a = np.zeros(len(a.xy), dtype=bool)
    used_b = np.zeros(len(b.xy), dtype=bool)
    pa, pb = [], []
    for i, j in zip(ia[order].tolist(), ib[order].tolist()):
        if used_a[i] or used_b[j]:
            continue
        used_a[i] = used_b[j] = True
        pa.append(i)
        pb.append(j)
    return np.array(pa, dtype=int), np.array(pb, dtype=int), axy


def _refit(a: _Prepared, b: _Prepared, pa: np.ndarray, pb: np.ndarray) -> tuple[float, float, float]:
    """Least-squares rotation + translation from paired points."""
    P = a.xy[pa]
    Q = b.xy[pb]
    pc, qc = P.mean(axis=0), Q.mean(axis=0)
    P0, Q0 = P - pc, Q - qc
    sxx = float(np.sum(P0[:, 0] * Q0[:, 0] + P0[:, 1] * Q0[:, 1]))
    sxy = float(np.sum(P0[:, 0] * Q0[:, 1] - P0[:, 1] * Q0[:, 0]))
    th = math.atan2(sxy, sxx)
    return _rigid(th, pc[0], pc[1], qc[0], qc[1])


def _effective_count(prep: _Prepared, pts_in_own_frame: np.ndarray, other_hull: np.ndarray,
                     other_edges: np.ndarray, matched: np.ndarray, cfg: MatcherConfig) -> int:
    """Minutiae that count against the score.

    Paired minutiae always count. Unpaired ones count when they lie inside the
    other template's footprint and their direction agrees with the local ridge
    flow; isolated outliers with incoherent directions are treated as noise.
    The count never drops below `min_overlap` of the template size, so
    alignments that barely overlap gain nothing.
    """
    inside = _inside_hull(pts_in_own_frame, other_hull, other_edges, cfg.overlap_margin)
    counted = int(np.count_nonzero(matched | (inside & prep.reliable)))
    return max(counted, math.ceil(cfg.min_overlap * len(prep.xy)))


def _score_alignment(a, b, tf, cfg) -> tuple[float, int, tuple[float, float, float]]:
    pa, pb, _ = _pair(a, b, tf, cfg)
    # coarse to fine: refit on a loose pairing, then pair tightly
    tf2 = tf
    for _ in range(2):
        ca, cb, _ = _pair(a, b, tf2, cfg, cfg.refit_distance_tol)
        if len(ca) < 2:
            break
        tf2 = _refit(a, b, ca, cb)
    if tf2 is not tf:
        pa2, pb2, _ = _pair(a, b, tf2, cfg)
        if len(pa2) >= len(pa):
            pa, pb, tf = pa2, pb2, tf2
    m = len(pa)
    if m == 0:
        return 0.0, 0, tf
    axy = _apply(a.xy, tf)
    hull_a = _apply(a.hull, tf) if len(a.hull) else a.hull
    edges_a = _apply(a.edge_dir, (tf[0], 0.0, 0.0)) if len(a.edge_dir) else a.edge_dir
    ma = np.zeros(len(a.xy), dtype=bool)
    ma[pa] = True
    mb = np.zeros(len(b.xy), dtype=bool)
    mb[pb] = True
    na = _effective_count(a, axy, b.hull, b.edge_dir, ma, cfg)
    nb = _effective_count(b, b.xy, hull_a, edges_a, mb, cfg)
    return m * m / (na * nb), m, tf


_PREP_CACHE: dict[tuple[int, MatcherConfig], tuple[MinutiaeTemplate, _Prepared]] = {}
_PREP_CACHE_MAX = 4096


def _prepared(t: MinutiaeTemplate, cfg: MatcherConfig) -> _Prepared:
    key = (id(t), cfg)
    hit = _PREP_CACHE.get(key)
    if hit is not None and hit[0] is t:
        return hit[1]
    prep = _prepare(t, cfg)
    if len(_PREP_CACHE) >= _PREP_CACHE_MAX:
        _PREP_CACHE.clear()
    _PREP_CACHE[key] = (t, prep)
    return prep


def match_score(a: MinutiaeTemplate, b: MinutiaeTemplate, cfg: MatcherConfig | None = None) -> MatchScore:
    """Similarity of two minutiae sets in [0, 1]; 1 for identical sets."""
    cfg = cfg or MatcherConfig()
    if len(a) == 0 or len(b) == 0:
        return MatchScore(0.0, 0.0, 0, "baseline")
    pa, pb = _prepared(a, cfg), _prepared(b, cfg)
    costs = _descriptor_costs(pa, pb)
    flat = np.argsort(np.round(costs, 9).ravel(), kind="stable")[: cfg.top_alignments]
    best, best_m = 0.0, 0
    nb = costs.shape[1]
    for f in flat.tolist():
        i, j = divmod(f, nb)
        tf = _rigid(
            float(pb.theta[j] - pa.theta[i]), pa.xy[i, 0], pa.xy[i, 1], pb.xy[j, 0], pb.xy[j, 1]
        )
        s, m, _ = _score_alignment(pa, pb, tf, cfg)
        if s > best or (s == best and m > best_m):
            best, best_m = s, m
    best = min(best, 1.0)
    return MatchScore(best, best, best_m, "baseline")


# --- external adapter ------------------------------------------------------

_NUMBER = re.compile(r"^\s*([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)\s*$")


def normalize_score(raw: float, score_min: float, score_max: float) -> float:
    return min(max((raw - score_min) / (score_max - score_min), 0.0), 1.0)


def match_external(a: MinutiaeTemplate, b: MinutiaeTemplate, cfg: MatcherConfig) -> MatchScore:
    """Score a pair with an external program.

    The command is run as ``<command> <iso_a> <iso_b>`` and must print one
    decimal number and exit 0.
    """
    ext = cfg.external
    if ext is None:
        raise ValueError("MatcherConfig.external is not set")
    with tempfile.TemporaryDirectory(prefix="minubench-") as tmp:
        fa, fb = Path(tmp) / "a.iso", Path(tmp) / "b.iso"
        write_iso(fa, a)
        write_iso(fb, b)
        argv = [*ext.command, str(fa), str(fb)]
        try:
            proc = subprocess.run(argv, capture_output=True, text=True, timeout=ext.timeout_s)
        except subprocess.TimeoutExpired as exc:
            raise MatcherError(f"matcher timed out after {ext.timeout_s} s", _diag(exc.stdout, exc.stderr)) from exc
        except OSError as exc:
            raise MatcherError(f"could not run matcher {argv[0]!r}: {exc}") from exc
    if proc.returncode != 0:
        raise MatcherError(f"matcher exited with status {proc.returncode}", _diag(proc.stdout, proc.stderr))
    m = _NUMBER.match(proc.stdout)
    if not m:
        raise MatcherError(f"could not parse a score from matcher output {proc.stdout.strip()!r}",
                           _diag(proc.stdout, proc.stderr))
    raw = float(m.group(1))
    return MatchScore(raw, normalize_score(raw, ext.score_min, ext.score_max), 0, cfg.matcher_id)


def _diag(out, err) -> str:
    def s(v):
        if v is None:
            return ""
        return v.decode(errors="replace") if isinstance(v, bytes) else v

    return f"stdout: {s(out).strip()}\nstderr: {s(err).strip()}"


def make_matcher(cfg: MatcherConfig | None = None) -> Callable[[MinutiaeTemplate, MinutiaeTemplate], MatchScore]:
    """A picklable callable scoring pairs with the configured matcher."""
    return ConfiguredMatcher(cfg or MatcherConfig())


@dataclass(frozen=True)
class ConfiguredMatcher:
    cfg: MatcherConfig

    @property
    def matcher_id(self) -> str:
        return self.cfg.matcher_id

    @property
    def is_external(self) -> bool:
        return self.cfg.external is not None

    def __call__(self, a: MinutiaeTemplate, b: MinutiaeTemplate) -> MatchScore:
        if self.cfg.external is not None:
            return match_external(a, b, self.cfg)
        return match_score(a, b, self.cfg)


def default_workers() -> int:
    env = os.environ.get("MINUBENCH_WORKERS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1
