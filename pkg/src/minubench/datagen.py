"""Synthetic ground-truth minutiae sets: master prints and derived impressions.

Stands in for an image-based fingerprint synthesizer. Only minutiae are
produced; nothing here renders ridges.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import MinutiaeTemplate, canonical_angles, template_from_arrays
from .seeding import derive_seed, round_half_away


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class GenParams:
    count_mean: float = 45.0
    count_std: float = 10.0
    count_min: int = 20
    count_max: int = 80
    min_separation: float = 10.0
    width: int = 416
    height: int = 560
    orientation_smoothness: int = 6
    quality: int = 60
    max_attempts: int = 10_000

    def __post_init__(self) -> None:
        if self.count_min < 1 or self.count_max < self.count_min:
            raise ValueError(f"bad count range [{self.count_min}, {self.count_max}]")
        if self.min_separation <= 0:
            raise ValueError("min_separation must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("width and height must be positive")
        if not 1 <= self.orientation_smoothness <= 10:
            raise ValueError("orientation_smoothness must be in [1, 10]")

    @property
    def ellipse(self) -> tuple[float, float, float, float]:
        """Centre and semi-axes of the region minutiae are placed in."""
        return self.width / 2, self.height / 2, 0.4 * self.width, 0.45 * self.height


# monomials u^i v^j in order of increasing degree
_MONOMIALS = [(0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2), (3, 0), (2, 1), (1, 2), (0, 3)]


@dataclass(frozen=True)
class OrientationField:
    """Smooth ridge-flow model: an arch term plus a low-order polynomial."""

    cx: float
    cy: float
    scale: float
    arch: float
    coeffs: tuple[float, ...]

    def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        u = (np.asarray(x, float) - self.cx) / self.scale
        v = (np.asarray(y, float) - self.cy) / self.scale
        theta = -np.arctan(self.arch * u)
        for c, (i, j) in zip(self.coeffs, _MONOMIALS):
            theta = theta + c * u**i * v**j
        return theta


def random_orientation_field(rng: np.random.Generator, params: GenParams) -> OrientationField:
    n = params.orientation_smoothness
    coeffs = rng.normal(0.0, 0.35, size=n)
    return OrientationField(
        params.width / 2, params.height / 2, float(max(params.width, params.height)),
        float(rng.uniform(1.0, 3.0)), tuple(float(c) for c in coeffs),
    )


def _place_points(rng: np.random.Generator, count: int, params: GenParams) -> np.ndarray:
    cx, cy, ax, ay = params.ellipse
    sep2 = params.min_separation**2
    pts = np.empty((count, 2))
    placed = 0
    attempts = 0
    while placed < count:
        if attempts >= params.max_attempts:
            raise GenerationError(
                f"placed {placed} of {count} minutiae after {attempts} attempts"
            )
        batch = rng.integers(0, [params.width, params.height], size=(64, 2)).astype(float)
        for p in batch:
            attempts += 1
            if ((p[0] - cx) / ax) ** 2 + ((p[1] - cy) / ay) ** 2 > 1.0:
                continue
            if placed and np.min(np.sum((pts[:placed] - p) ** 2, axis=1)) < sep2:
                continue
            pts[placed] = p
            placed += 1
            if placed == count or attempts >= params.max_attempts:
                break
    return pts


def generate_master(seed: int, params: GenParams | None = None, finger_id: str | None = None) -> MinutiaeTemplate:
    """Generate the ground-truth minutiae set of one synthetic finger."""
    params = params or GenParams()
    rng = np.random.default_rng(seed)
    count = round_half_away(rng.normal(params.count_mean, params.count_std))
    count = int(np.clip(count, params.count_min, params.count_max))
    field = random_orientation_field(rng, params)
    pts = _place_points(rng, count, params)
    flip = rng.integers(0, 2, size=count) * math.pi
    theta = canonical_angles(field(pts[:, 0], pts[:, 1]) + flip)
    kinds = rng.integers(0, 2, size=count)
    xyt = np.column_stack([pts, theta])
    base = MinutiaeTemplate((), params.width, params.height, 500,
                            finger_id if finger_id is not None else f"f{seed}", "master")
    return template_from_arrays(base, xyt, kinds, np.full(count, params.quality))


@dataclass(frozen=True)
class RigidTransform:
    """Rotation by `angle` about `center` followed by translation `shift`."""

    angle: float
    center: tuple[float, float]
    shift: tuple[float, float]

    def apply(self, xy: np.ndarray) -> np.ndarray:
        c, s = math.cos(self.angle), math.sin(self.angle)
        rel = xy - np.asarray(self.center)
        out = np.empty_like(rel)
        out[:, 0] = c * rel[:, 0] - s * rel[:, 1]
        out[:, 1] = s * rel[:, 0] + c * rel[:, 1]
        return out + np.asarray(self.center) + np.asarray(self.shift)

    def invert(self, xy: np.ndarray) -> np.ndarray:
        c, s = math.cos(self.angle), math.sin(self.angle)
        rel = xy - np.asarray(self.center) - np.asarray(self.shift)
        out = np.empty_like(rel)
        out[:, 0] = c * rel[:, 0] + s * rel[:, 1]
        out[:, 1] = -s * rel[:, 0] + c * rel[:, 1]
        return out + np.asarray(self.center)


def derive_impression_with_transform(
    master: MinutiaeTemplate,
    seed: int,
    global_rotation_std: float = 0.09,
    global_shift_std: float = 10.0,
    retain_fraction_range: tuple[float, float] = (0.8, 1.0),
    impression_id: str | None = None,
) -> tuple[MinutiaeTemplate, RigidTransform, np.ndarray]:
    """Like :func:`derive_impression` but also returns the transform and the
    master index of every surviving minutia."""
    rng = np.random.default_rng(seed)
    lo, hi = retain_fraction_range
    if not 0.0 <= lo <= hi <= 1.0:
        raise ValueError(f"bad retain_fraction_range {retain_fraction_range}")
    angle = float(rng.normal(0.0, global_rotation_std)) if global_rotation_std > 0 else 0.0
    shift = rng.normal(0.0, global_shift_std, size=2) if global_shift_std > 0 else np.zeros(2)
    frac = float(rng.uniform(lo, hi)) if hi > lo else lo
    n = len(master)
    keep = min(n, round_half_away(frac * n))
    idx = np.sort(rng.choice(n, size=keep, replace=False)) if keep < n else np.arange(n)
    tf = RigidTransform(angle, (master.width / 2, master.height / 2), (float(shift[0]), float(shift[1])))

    arr = master.array[idx]
    xy = tf.apply(arr[:, :2]) if len(idx) else np.zeros((0, 2))
    theta = canonical_angles(arr[:, 2] + angle)
    inside = (xy[:, 0] >= 0) & (xy[:, 0] < master.width) & (xy[:, 1] >= 0) & (xy[:, 1] < master.height)
    idx = idx[inside]
    xyt = np.column_stack([xy[inside], theta[inside]])
    imp = template_from_arrays(
        master, xyt, master.kinds[idx], master.qualities[idx],
        impression_id=impression_id if impression_id is not None else f"imp{seed}",
    )
    return imp, tf, idx


def derive_impression(master: MinutiaeTemplate, seed: int, **kwargs) -> MinutiaeTemplate:
    """Derive one impression of `master`: a global rigid motion, random
    dropout of minutiae, and removal of anything pushed off the image."""
    return derive_impression_with_transform(master, seed, **kwargs)[0]


def generate_corpus(
    count: int,
    seed: int,
    impressions_per_finger: int = 2,
    params: GenParams | None = None,
) -> tuple[list[MinutiaeTemplate], list[list[MinutiaeTemplate]]]:
    """Masters plus their impressions, all seeded from one corpus seed."""
    params = params or GenParams()
    masters, impressions = [], []
    for i in range(count):
        fid = f"f{i:05d}"
        m = generate_master(derive_seed(seed, "master", i), params, finger_id=fid)
        masters.append(m)
        impressions.append([
            derive_impression(m, derive_seed(seed, "impression", i, j), impression_id=f"{fid}_{j + 1}")
            for j in range(impressions_per_finger)
        ])
    return masters, impressions


def genuine_pairs(impressions: list[list[MinutiaeTemplate]]) -> list[tuple[MinutiaeTemplate, MinutiaeTemplate]]:
    """First two impressions of each finger as (reference, mate)."""
    return [(imps[0], imps[1]) for imps in impressions if len(imps) >= 2]

