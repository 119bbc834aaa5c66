"""Flat ``key = value`` run configuration.

Lines look like ``perturb.positional.mu_p = 4.048``; ``#`` starts a comment.
Recognized sections are ``perturb.*``, ``matcher.*`` and ``eval.*``.
"""

from __future__ import annotations

import math
import shlex
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .matcher import ExternalMatcher, MatcherConfig
from .perturb import (
    TECHNIQUES,
    CombinedParams,
    DistortionParams,
    MissingParams,
    PerturbationSpec,
    PositionalParams,
    SpuriousParams,
    realistic_spec,
)


class ConfigError(ValueError):
    pass


def _bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _opt_int(v: str) -> int | None:
    return None if v.strip().lower() in ("", "none") else int(v)


def _opt_float(v: str) -> float | None:
    return None if v.strip().lower() in ("", "none") else float(v)


def _opt_str(v: str) -> str | None:
    return v.strip() or None


_PARAM_TYPES = {
    "positional": (PositionalParams, {"mu_p": float, "sigma_p": float, "mu_o": float, "sigma_o": float,
                                      "fixed_l1_displacement": _opt_int}),
    "missing": (MissingParams, {"mu_m": float, "sigma_m": float, "fixed_ratio": _opt_float}),
    "spurious": (SpuriousParams, {"mu_s": float, "sigma_s": float, "fixed_ratio": _opt_float,
                                  "max_mode": _bool, "min_distance": float, "max_attempts": int}),
    "distortion": (DistortionParams, {"sigma_d": float, "model_path": _opt_str}),
}

_MATCHER_KEYS = {
    "pair_distance_tol": float, "pair_angle_tol": float, "refit_distance_tol": float, "neighbor_k": int, "top_alignments": int,
    "coherence_tol": float, "overlap_margin": float, "min_overlap": float,
}
_EXTERNAL_KEYS = {"command": str, "score_min": float, "score_max": float, "timeout_s": float}
_EVAL_KEYS = {"M": int, "N": int, "far_target": float, "imposter_budget": int, "workers": int}


@dataclass(frozen=True)
class RunConfig:
    technique: str | None = None
    perturbation: PerturbationSpec | None = None
    matcher: MatcherConfig = field(default_factory=MatcherConfig)
    eval: dict = field(default_factory=dict)
    raw: tuple[tuple[str, str], ...] = ()


def parse_lines(text: str, source: str = "<config>") -> list[tuple[str, str]]:
    """Ordered (key, value) pairs; errors carry the line number."""
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        s = line.split("#", 1)[0].strip()
        if not s:
            continue
        if "=" not in s:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line.strip()!r}")
        k, v = s.split("=", 1)
        k = k.strip()
        if not k:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out.append((k, v.strip()))
    return out


def build_config(items: list[tuple[str, str]]) -> RunConfig:
    """Interpret parsed pairs; later keys override earlier ones."""
    technique = None
    per_tech: dict[str, dict] = {t: {} for t in _PARAM_TYPES}
    matcher_kw: dict = {}
    external_kw: dict = {}
    eval_kw: dict = {}
    for key, value in items:
        parts = key.split(".")
        try:
            if key == "perturb.technique":
                if value not in TECHNIQUES:
                    raise ConfigError(f"{key}: unknown technique {value!r} (expected one of {', '.join(TECHNIQUES)})")
                technique = value
            elif parts[0] == "perturb" and len(parts) == 3 and parts[1] in _PARAM_TYPES:
                conv = _PARAM_TYPES[parts[1]][1].get(parts[2])
                if conv is None:
                    raise ConfigError(f"unknown config key {key!r}")
                per_tech[parts[1]][parts[2]] = conv(value)
            elif parts[0] == "matcher" and len(parts) == 2 and parts[1] in _MATCHER_KEYS:
                matcher_kw[parts[1]] = _MATCHER_KEYS[parts[1]](value)
            elif parts[0] == "matcher" and len(parts) == 2 and parts[1] in _EXTERNAL_KEYS:
                external_kw[parts[1]] = _EXTERNAL_KEYS[parts[1]](value)
            elif parts[0] == "eval" and len(parts) == 2 and parts[1] in _EVAL_KEYS:
                eval_kw[parts[1]] = _EVAL_KEYS[parts[1]](value)
            else:
                raise ConfigError(f"unknown config key {key!r}")
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"{key}: {exc}") from exc

    spec = None
    if technique is not None:
        spec = _spec_for(technique, per_tech)
    elif any(per_tech.values()):
        raise ConfigError("perturb.* parameters given without perturb.technique")

    if external_kw:
        if "command" not in external_kw:
            raise ConfigError("matcher.score_min/score_max/timeout_s need matcher.command")
        external_kw["command"] = tuple(shlex.split(external_kw["command"]))
        try:
            matcher_kw["external"] = ExternalMatcher(**external_kw)
        except ValueError as exc:
            raise ConfigError(f"matcher: {exc}") from exc
    try:
        mcfg = MatcherConfig(**matcher_kw)
    except ValueError as exc:
        raise ConfigError(f"matcher: {exc}") from exc
    return RunConfig(technique, spec, mcfg, eval_kw, tuple(items))


def _spec_for(technique: str, per_tech: dict[str, dict]) -> PerturbationSpec:
    """Realistic defaults for the technique, overridden by explicit keys."""
    base = realistic_spec(technique)
    if technique == "combined":
        if per_tech["distortion"]:
            raise ConfigError("perturb.distortion.* keys do not apply to technique 'combined'")
        return CombinedParams(
            replace(base.positional, **per_tech["positional"]),
            replace(base.missing, **per_tech["missing"]),
            replace(base.spurious, **per_tech["spurious"]),
        )
    stray = [t for t, kw in per_tech.items() if kw and t != technique]
    if stray:
        raise ConfigError(f"perturb.{stray[0]}.* keys do not apply to technique {technique!r}")
    try:
        return replace(base, **per_tech[technique])
    except ValueError as exc:
        raise ConfigError(f"perturb.{technique}: {exc}") from exc


def load_config(path: str | Path, overrides: list[tuple[str, str]] | None = None) -> RunConfig:
    p = Path(path)
    return build_config(parse_lines(p.read_text(encoding="utf-8"), str(p)) + list(overrides or []))


def parse_override(s: str) -> tuple[str, str]:
    """``key=value`` from a --set flag."""
    items = parse_lines(s, "--set")
    if len(items) != 1:
        raise ConfigError(f"--set expects key=value, got {s!r}")
    return items[0]


def spec_to_lines(spec: PerturbationSpec) -> list[str]:
    """Inverse of the perturb.* part of :func:`build_config`, for manifests."""
    from .perturb import technique_of

    tech = technique_of(spec)
    lines = [f"perturb.technique = {tech}"]
    groups = (
        [("positional", spec.positional), ("missing", spec.missing), ("spurious", spec.spurious)]
        if isinstance(spec, CombinedParams) else [(tech, spec)]
    )
    for name, obj in groups:
        for f in fields(obj):
            if f.name not in _PARAM_TYPES[name][1]:
                continue
            v = getattr(obj, f.name)
            if isinstance(v, float) and math.isfinite(v):
                v = repr(v)
            lines.append(f"perturb.{name}.{f.name} = {'' if v is None else v}")
    return lines
