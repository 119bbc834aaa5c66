"""Random perturbations of minutiae sets.

Every function takes an immutable template and a ``numpy.random.Generator``
and returns a new template. Two parameterizations are supported:

* realistic: ratios and magnitudes drawn from Gaussians (``REALISTIC_*``),
* sweep: fixed per-level values (:func:`sweep_level`).

Positional noise treats ``(mu_p, sigma_p)`` as the distribution of the
displacement *magnitude* with a uniformly random direction. A zero-mean
per-axis model would make a 4 px mean displacement meaningless.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Union

import numpy as np

from .core import MAX_MINUTIAE, MinutiaeTemplate, canonical_angles, template_from_arrays
from .seeding import round_half_away

if TYPE_CHECKING:
    from .distortion import DistortionModel


class PlacementError(RuntimeError):
    pass


@dataclass(frozen=True)
class PositionalParams:
    mu_p: float = 0.0
    sigma_p: float = 0.0
    mu_o: float = 0.0
    sigma_o: float = 0.0
    fixed_l1_displacement: int | None = None

    def __post_init__(self) -> None:
        if self.sigma_p < 0 or self.sigma_o < 0:
            raise ValueError("standard deviations must be non-negative")
        if self.fixed_l1_displacement is not None and self.fixed_l1_displacement < 0:
            raise ValueError("fixed_l1_displacement must be non-negative")


@dataclass(frozen=True)
class MissingParams:
    mu_m: float = 0.0
    sigma_m: float = 0.0
    fixed_ratio: float | None = None


@dataclass(frozen=True)
class SpuriousParams:
    mu_s: float = 0.0
    sigma_s: float = 0.0
    fixed_ratio: float | None = None
    max_mode: bool = False
    min_distance: float = 10.0
    max_attempts: int = 10_000


@dataclass(frozen=True)
class CombinedParams:
    positional: PositionalParams = field(default_factory=PositionalParams)
    missing: MissingParams = field(default_factory=MissingParams)
    spurious: SpuriousParams = field(default_factory=SpuriousParams)


@dataclass(frozen=True)
class DistortionParams:
    sigma_d: float = 0.66
    model: "DistortionModel | None" = field(default=None, compare=False, repr=False)
    model_path: str | None = None


PerturbationSpec = Union[PositionalParams, MissingParams, SpuriousParams, CombinedParams, DistortionParams]

TECHNIQUES = ("positional", "missing", "spurious", "combined", "distortion")

REALISTIC_POSITIONAL = PositionalParams(mu_p=4.048, sigma_p=0.688, mu_o=0.130, sigma_o=0.071)
REALISTIC_MISSING = MissingParams(mu_m=0.209, sigma_m=0.106)
REALISTIC_SPURIOUS = SpuriousParams(mu_s=0.523, sigma_s=0.349)
REALISTIC_COMBINED = CombinedParams(REALISTIC_POSITIONAL, REALISTIC_MISSING, REALISTIC_SPURIOUS)
REALISTIC_SIGMA_D = 0.66


def technique_of(spec: PerturbationSpec) -> str:
    return {
        PositionalParams: "positional",
        MissingParams: "missing",
        SpuriousParams: "spurious",
        CombinedParams: "combined",
        DistortionParams: "distortion",
    }[type(spec)]


def realistic_spec(technique: str, model: "DistortionModel | None" = None) -> PerturbationSpec:
    """The realistic parameterization of one technique."""
    if technique == "distortion":
        return DistortionParams(REALISTIC_SIGMA_D, model)
    return {
        "positional": REALISTIC_POSITIONAL,
        "missing": REALISTIC_MISSING,
        "spurious": REALISTIC_SPURIOUS,
        "combined": REALISTIC_COMBINED,
    }[technique]


# Increasing perturbation levels 1..8. Rotation noise is listed in degrees.
# The combined row keeps spurious levels 3 and 4 in the published (swapped) order.
_SWEEP_SHIFT = [5, 10, 15, 20, 25, 30, 35, 40]
_SWEEP_MISSING = [0.20, 0.40, 0.60, 0.80, 0.85, 0.90, 0.95, 0.99]
_SWEEP_SPURIOUS = [0.5, 1.0, 1.5, 2.0, "max", "max", "max", "max"]
_SWEEP_COMBINED_SPURIOUS = [0.5, 1.0, 2.0, 1.5, "max", "max", "max", "max"]
_SWEEP_SIGMA_D = [0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0]


def _sweep_positional(i: int) -> PositionalParams:
    return PositionalParams(0.0, 0.0, 0.0, math.radians(_SWEEP_SHIFT[i]), fixed_l1_displacement=_SWEEP_SHIFT[i])


def _sweep_spurious(level) -> SpuriousParams:
    if level == "max":
        return SpuriousParams(max_mode=True)
    return SpuriousParams(fixed_ratio=float(level))


def sweep_level(technique: str, level: int, model: "DistortionModel | None" = None) -> PerturbationSpec:
    """Parameters of sweep `level` (1-8); level 0 is the identity."""
    if not 0 <= level <= 8:
        raise ValueError(f"sweep level must be in 0..8, got {level}")
    if level == 0:
        return zero_spec(technique)
    i = level - 1
    if technique == "positional":
        return _sweep_positional(i)
    if technique == "missing":
        return MissingParams(fixed_ratio=_SWEEP_MISSING[i])
    if technique == "spurious":
        return _sweep_spurious(_SWEEP_SPURIOUS[i])
    if technique == "combined":
        return CombinedParams(
            _sweep_positional(i),
            MissingParams(fixed_ratio=_SWEEP_MISSING[i]),
            _sweep_spurious(_SWEEP_COMBINED_SPURIOUS[i]),
        )
    if technique == "distortion":
        return DistortionParams(_SWEEP_SIGMA_D[i], model)
    raise ValueError(f"unknown technique {technique!r}")


def zero_spec(technique: str) -> PerturbationSpec:
    return {
        "positional": PositionalParams(),
        "missing": MissingParams(fixed_ratio=0.0),
        "spurious": SpuriousParams(fixed_ratio=0.0),
        "combined": CombinedParams(
            PositionalParams(), MissingParams(fixed_ratio=0.0), SpuriousParams(fixed_ratio=0.0)
        ),
        "distortion": DistortionParams(0.0),
    }[technique]


def clamp_in_bounds(xy: np.ndarray, width: int, height: int) -> np.ndarray:
    """Pull out-of-image positions onto the last pixel row/column, in place."""
    for col, size in ((0, width), (1, height)):
        v = xy[:, col]
        v[v < 0] = 0.0
        v[v >= size] = size - 1
    return xy


def perturb_positional(t: MinutiaeTemplate, p: PositionalParams, rng: np.random.Generator) -> MinutiaeTemplate:
    """Shift every minutia and rotate its direction; count is preserved.

    Displacements are whole pixels and positions are clamped to the image.
    """
    n = len(t)
    if n == 0:
        return t
    arr = t.array.copy()
    if p.fixed_l1_displacement is not None:
        level = p.fixed_l1_displacement
        ax = np.floor(rng.uniform(0.0, level, size=n) + 0.5)
        ay = level - ax
        sx = rng.choice([-1.0, 1.0], size=n)
        sy = rng.choice([-1.0, 1.0], size=n)
        dx, dy = sx * ax, sy * ay
        dtheta = rng.normal(0.0, p.sigma_o, size=n) if p.sigma_o > 0 else np.zeros(n)
    else:
        r = np.maximum(rng.normal(p.mu_p, p.sigma_p, size=n), 0.0)
        phi = rng.uniform(0.0, 2 * math.pi, size=n)
        dx = np.floor(r * np.cos(phi) + 0.5)
        dy = np.floor(r * np.sin(phi) + 0.5)
        mag = np.maximum(rng.normal(p.mu_o, p.sigma_o, size=n), 0.0)
        dtheta = mag * rng.choice([-1.0, 1.0], size=n)
    arr[:, 0] += dx
    arr[:, 1] += dy
    clamp_in_bounds(arr, t.width, t.height)
    if np.any(dtheta):
        arr[:, 2] = canonical_angles(arr[:, 2] + dtheta)
    return template_from_arrays(t, arr, t.kinds, t.qualities)


def _sample_ratio(fixed: float | None, mu: float, sigma: float, rng: np.random.Generator) -> float:
    if fixed is not None:
        return float(fixed)
    return float(rng.normal(mu, sigma)) if sigma > 0 else float(mu)


def perturb_missing(t: MinutiaeTemplate, p: MissingParams, rng: np.random.Generator) -> MinutiaeTemplate:
    """Delete round(r * n) minutiae chosen uniformly; order of survivors is kept."""
    n = len(t)
    r = min(max(_sample_ratio(p.fixed_ratio, p.mu_m, p.sigma_m, rng), 0.0), 1.0)
    k = min(n, round_half_away(r * n))
    if k == 0:
        return t
    drop = rng.choice(n, size=k, replace=False)
    keep = np.setdiff1d(np.arange(n), drop)
    return template_from_arrays(t, t.array[keep], t.kinds[keep], t.qualities[keep])


def _disk_offsets(radius: float) -> tuple[np.ndarray, np.ndarray]:
    r = int(math.ceil(radius))
    oy, ox = np.mgrid[-r : r + 1, -r : r + 1]
    return ox, oy


def perturb_spurious(t: MinutiaeTemplate, p: SpuriousParams, rng: np.random.Generator) -> MinutiaeTemplate:
    """Append false minutiae at random positions at least `min_distance` px
    from every existing one. Original minutiae are untouched."""
    n = len(t)
    if p.max_mode:
        k = MAX_MINUTIAE - n
    else:
        s = max(_sample_ratio(p.fixed_ratio, p.mu_s, p.sigma_s, rng), 0.0)
        k = round_half_away(s * n)
    k = max(0, min(k, MAX_MINUTIAE - n))
    if k == 0:
        return t

    # occupancy map of pixels closer than min_distance to a minutia
    blocked = np.zeros((t.height, t.width), dtype=bool)
    ox, oy = _disk_offsets(p.min_distance)
    d2 = p.min_distance**2

    def block(px: float, py: float) -> None:
        cx, cy = int(math.floor(px)), int(math.floor(py))
        gx, gy = ox + cx, oy + cy
        m = ((gx - px) ** 2 + (gy - py) ** 2 < d2) & (gx >= 0) & (gx < t.width) & (gy >= 0) & (gy < t.height)
        blocked[gy[m], gx[m]] = True

    for x, y, _ in t.array:
        block(x, y)

    new = np.empty((k, 2))
    placed = attempts = 0
    while placed < k:
        batch = rng.integers(0, [t.width, t.height], size=(128, 2))
        for cx, cy in batch:
            if attempts >= p.max_attempts:
                raise PlacementError(f"placed {placed} of {k} spurious minutiae after {attempts} attempts")
            attempts += 1
            if blocked[cy, cx]:
                continue
            new[placed] = (cx, cy)
            block(float(cx), float(cy))
            placed += 1
            if placed == k:
                break
    theta = rng.uniform(0.0, 2 * math.pi, size=k)
    kinds = rng.integers(0, 2, size=k)
    arr = np.vstack([t.array, np.column_stack([new, canonical_angles(theta)])])
    return template_from_arrays(
        t,
        arr,
        np.concatenate([t.kinds, kinds]),
        np.concatenate([t.qualities, np.full(k, 60)]),
    )


def perturb_combined(
    t: MinutiaeTemplate,
    positional: PositionalParams,
    missing: MissingParams,
    spurious: SpuriousParams,
    rng: np.random.Generator,
) -> MinutiaeTemplate:
    """Missing, then spurious (ratio of the surviving count), then positional
    noise on every minutia including the spurious ones."""
    out = perturb_missing(t, missing, rng)
    out = perturb_spurious(out, spurious, rng)
    return perturb_positional(out, positional, rng)


def perturb_distortion(t: MinutiaeTemplate, p: DistortionParams, rng: np.random.Generator) -> MinutiaeTemplate:
    from .distortion import apply_field, sample_field

    if p.model is None:
        if p.sigma_d == 0:
            return t  # identity: no model, no noise
        raise ValueError("distortion perturbation needs a trained DistortionModel")
    fld, _ = sample_field(p.model, p.sigma_d, rng)
    return apply_field(t, fld)


def apply_perturbation(t: MinutiaeTemplate, spec: PerturbationSpec, rng: np.random.Generator) -> MinutiaeTemplate:
    """Dispatch on the spec variant."""
    if isinstance(spec, PositionalParams):
        return perturb_positional(t, spec, rng)
    if isinstance(spec, MissingParams):
        return perturb_missing(t, spec, rng)
    if isinstance(spec, SpuriousParams):
        return perturb_spurious(t, spec, rng)
    if isinstance(spec, CombinedParams):
        return perturb_combined(t, spec.positional, spec.missing, spec.spurious, rng)
    if isinstance(spec, DistortionParams):
        return perturb_distortion(t, spec, rng)
    raise TypeError(f"not a perturbation spec: {spec!r}")
