"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 bad or missing
data, 3 matcher failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, build_config, load_config, parse_override, spec_to_lines
from .core import MinutiaeTemplate, TemplateFormatError, read_iso, read_jsonl, write_iso, write_jsonl
from .datagen import GenerationError, GenParams, generate_corpus
from .distortion import (
    DistortionField,
    GridSpec,
    ModelFormatError,
    apply_field,
    load_model,
    sample_field,
    save_model,
    synth_training_fields,
    train_distortion_model,
)
from .evaluation import (
    DEFAULT_IMPOSTER_BUDGET,
    FAR_TARGET,
    TrialError,
    read_scores_csv,
    read_sweep_csv,
    run_sweep,
    score_distributions,
    scores_csv,
    sweep_csv,
    trial_seed,
    uncertainty_analysis,
    uncertainty_csv,
)
from .matcher import MatcherError, default_workers, make_matcher
from .perturb import TECHNIQUES, DistortionParams, PlacementError, apply_perturbation
from .report import histogram_svg, tar_curve_svg
from .seeding import derive_seed

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_MATCHER = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --- helpers ---------------------------------------------------------------

def load_templates(path: str | Path) -> list[MinutiaeTemplate]:
    """Templates from a JSONL file, a single ISO file or a directory of ISO files."""
    p = Path(path)
    if not p.exists():
        raise DataError(f"{p}: no such file or directory")
    if p.is_dir():
        files = sorted(p.glob("*.iso"))
        if not files:
            raise DataError(f"{p}: directory holds no .iso files")
        return [read_iso(f) for f in files]
    if p.suffix == ".iso":
        return [read_iso(p)]
    return read_jsonl(p)


def load_one(path: str) -> MinutiaeTemplate:
    ts = load_templates(path)
    if len(ts) != 1:
        raise DataError(f"{path}: expected exactly one template, found {len(ts)}")
    return ts[0]


def pairs_from(templates: Sequence[MinutiaeTemplate]) -> list[tuple[MinutiaeTemplate, MinutiaeTemplate]]:
    """First two impressions of every finger, in order of first appearance."""
    by: dict[str, list[MinutiaeTemplate]] = {}
    for t in templates:
        by.setdefault(t.finger_id, []).append(t)
    pairs = [(v[0], v[1]) for v in by.values() if len(v) >= 2]
    if len(pairs) < 2:
        raise DataError("need at least two fingers with two impressions each")
    return pairs


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(path: Path, command: str, params: dict, outputs: Sequence[Path] = ()) -> None:
    """Deterministic JSON record of how an output was produced (no timestamps)."""
    doc = {
        "tool": "minubench",
        "version": __version__,
        "command": command,
        "params": params,
        "outputs": {str(o.name): _sha256(o) for o in outputs if o.is_file()},
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def parse_levels(s: str) -> list[int]:
    """'1-4', '0,2,5' or a mix of both."""
    out: list[int] = []
    try:
        for part in s.split(","):
            part = part.strip()
            if "-" in part:
                a, b = (int(v) for v in part.split("-", 1))
                out.extend(range(a, b + 1))
            elif part:
                out.append(int(part))
    except ValueError:
        raise UsageError(f"bad level list {s!r}") from None
    if not out or any(not 0 <= v <= 8 for v in out):
        raise UsageError(f"levels must lie in 0..8, got {s!r}")
    return out


def run_config(args) -> RunConfig:
    items = []
    if getattr(args, "config", None):
        p = Path(args.config)
        if not p.is_file():
            raise DataError(f"{p}: no such config file")
        cfg = load_config(p, [parse_override(s) for s in args.set or []])
        items = list(cfg.raw)
    else:
        items = [parse_override(s) for s in getattr(args, "set", None) or []]
    if getattr(args, "matcher_command", None):
        items.append(("matcher.command", args.matcher_command))
        items.append(("matcher.score_min", repr(args.score_min)))
        items.append(("matcher.score_max", repr(args.score_max)))
        items.append(("matcher.timeout_s", repr(args.timeout)))
    if getattr(args, "technique", None):
        items.insert(0, ("perturb.technique", args.technique))
    return build_config(items)


def resolve_model(path: str | None, seed: int):
    """Load a model file, or train the default synthetic model from `seed`."""
    if path:
        p = Path(path)
        if not p.is_file():
            raise DataError(f"{p}: no such model file")
        return load_model(p), {"model": str(p), "model_sha256": _sha256(p)}
    mseed = derive_seed(seed, "distortion-model")
    return train_distortion_model(synth_training_fields(mseed, 320)), {"model": "synthetic", "model_seed": mseed}


def attach_model(spec, model):
    if isinstance(spec, DistortionParams):
        return DistortionParams(spec.sigma_d, model, spec.model_path)
    return spec


def spec_from(cfg: RunConfig, args, needs_spec: bool = True):
    if cfg.perturbation is None:
        if needs_spec:
            raise UsageError("no perturbation given: use --technique or a config with perturb.technique")
        return None, {}
    spec = cfg.perturbation
    info = {}
    if isinstance(spec, DistortionParams):
        model, info = resolve_model(getattr(args, "model", None) or spec.model_path, args.seed)
        spec = attach_model(spec, model)
    return spec, info


def workers_of(args, cfg: RunConfig | None = None) -> int:
    if getattr(args, "workers", None):
        return args.workers
    if cfg is not None and "workers" in cfg.eval:
        return cfg.eval["workers"]
    return default_workers()


# --- subcommands -----------------------------------------------------------

def cmd_gen(args) -> int:
    if args.count < 1 or args.impressions_per_finger < 1:
        raise UsageError("--count and --impressions-per-finger must be positive")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    masters, imps = generate_corpus(args.count, args.seed, args.impressions_per_finger, GenParams())
    flat = [t for ts in imps for t in ts]
    outputs = []
    if args.format == "jsonl":
        for name, ts in (("masters.jsonl", masters), ("impressions.jsonl", flat)):
            write_jsonl(out / name, ts)
            outputs.append(out / name)
    else:
        for sub, ts, key in (("masters", masters, "finger_id"), ("impressions", flat, "impression_id")):
            d = out / sub
            d.mkdir(exist_ok=True)
            for t in ts:
                f = d / f"{getattr(t, key)}.iso"
                write_iso(f, t)
    params = {
        "count": args.count, "seed": args.seed, "format": args.format,
        "impressions_per_finger": args.impressions_per_finger,
        "fingers": [
            {"finger_id": m.finger_id, "master_seed": derive_seed(args.seed, "master", i),
             "impressions": [
                 {"impression_id": t.impression_id, "seed": derive_seed(args.seed, "impression", i, j)}
                 for j, t in enumerate(imps[i])]}
            for i, m in enumerate(masters)
        ],
    }
    write_manifest(out / "manifest.json", "gen", params, outputs)
    print(f"wrote {len(masters)} masters and {len(flat)} impressions to {out}")
    return EXIT_OK


def _write_templates(path: Path, ts: Sequence[MinutiaeTemplate]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    write_jsonl(path, ts)


def cmd_perturb(args) -> int:
    cfg = run_config(args)
    spec, info = spec_from(cfg, args)
    templates = load_templates(args.input)
    out = []
    records = []
    for t in templates:
        s = trial_seed(args.seed, t, 0, 0)
        p = apply_perturbation(t, spec, np.random.default_rng(s))
        p = MinutiaeTemplate(p.minutiae, p.width, p.height, p.resolution, p.finger_id, f"{t.impression_id}~p")
        out.append(p)
        records.append({"impression_id": t.impression_id, "seed": s, "n_in": len(t), "n_out": len(p)})
    dest = Path(args.out)
    _write_templates(dest, out)
    params = {"seed": args.seed, "input": str(args.input), "spec": spec_to_lines(spec), "templates": records, **info}
    write_manifest(Path(str(dest) + ".manifest.json"), "perturb", params, [dest])
    print(f"perturbed {len(out)} templates -> {dest}")
    return EXIT_OK


def cmd_distort_train(args) -> int:
    if args.t < 1:
        raise UsageError("--t must be at least 1")
    if args.fields:
        p = Path(args.fields)
        if not p.is_file():
            raise DataError(f"{p}: no such fields file")
        arr = np.load(p)
        if arr.ndim != 4 or arr.shape[-1] != 2:
            raise DataError(f"{p}: expected an array of shape (count, rows, cols, 2), got {arr.shape}")
        grid = GridSpec(spacing=args.spacing, cols=arr.shape[2], rows=arr.shape[1])
        fields = [DistortionField(grid, f) for f in arr]
        source = {"fields": str(p), "fields_sha256": _sha256(p)}
    else:
        if args.count < 2:
            raise UsageError("--count must be at least 2")
        fields = synth_training_fields(args.seed, args.count)
        source = {"fields": "synthetic"}
    try:
        model = train_distortion_model(fields, args.t)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    dest = Path(args.out)
    dest.parent.mkdir(parents=True, exist_ok=True)
    save_model(dest, model, {"seed": args.seed, "training_count": len(fields), **source})
    if model.degenerate:
        print("warning: training fields carry no variance; eigenvalues are zero", file=sys.stderr)
    print(f"trained model with t={model.t} from {len(fields)} fields -> {dest}")
    return EXIT_OK


def cmd_distort_apply(args) -> int:
    p = Path(args.model)
    if not p.is_file():
        raise DataError(f"{p}: no such model file")
    model = load_model(p)
    templates = load_templates(args.input)
    out, records = [], []
    for t in templates:
        s = trial_seed(args.seed, t, 0, 0)
        fld, c = sample_field(model, args.sigma_d, np.random.default_rng(s))
        d = apply_field(t, fld)
        out.append(MinutiaeTemplate(d.minutiae, d.width, d.height, d.resolution, d.finger_id, f"{t.impression_id}~d"))
        records.append({"impression_id": t.impression_id, "seed": s, "coefficients": [float(v) for v in c]})
    dest = Path(args.out)
    _write_templates(dest, out)
    params = {"seed": args.seed, "sigma_d": args.sigma_d, "model": str(p), "model_sha256": _sha256(p),
              "input": str(args.input), "templates": records}
    write_manifest(Path(str(dest) + ".manifest.json"), "distort-apply", params, [dest])
    print(f"distorted {len(out)} templates -> {dest}")
    return EXIT_OK


def cmd_match(args) -> int:
    cfg = run_config(args)
    matcher = make_matcher(cfg.matcher)
    if args.pairs:
        p = Path(args.pairs)
        if not p.is_file():
            raise DataError(f"{p}: no such pairs file")
        lines = [ln.split(",") for ln in p.read_text(encoding="utf-8").splitlines() if ln.strip()]
        if lines and lines[0][:2] == ["a", "b"]:
            lines = lines[1:]
        rows = ["a,b,score"]
        for i, parts in enumerate(lines):
            if len(parts) < 2:
                raise DataError(f"{p}:{i + 1}: expected 'a,b'")
            a, b = parts[0].strip(), parts[1].strip()
            s = matcher(load_one(a), load_one(b))
            rows.append(f"{a},{b},{s.normalized!r}")
        text = "\n".join(rows) + "\n"
        if args.out:
            Path(args.out).write_text(text, encoding="utf-8")
        else:
            sys.stdout.write(text)
        return EXIT_OK
    if not (args.a and args.b):
        raise UsageError("match needs --a and --b, or --pairs")
    s = matcher(load_one(args.a), load_one(args.b))
    print(repr(s.normalized))
    return EXIT_OK


def _eval_setting(cfg: RunConfig, args, name: str, default):
    v = getattr(args, name, None)
    if v is not None:
        return v
    return cfg.eval.get(name, default)


def cmd_uncertainty(args) -> int:
    cfg = run_config(args)
    spec, info = spec_from(cfg, args)
    refs = load_templates(args.templates)
    M = _eval_setting(cfg, args, "M", min(200, len(refs)))
    N = _eval_setting(cfg, args, "N", 50)
    if M > len(refs):
        raise UsageError(f"M={M} exceeds the {len(refs)} templates supplied")
    report = uncertainty_analysis(refs, spec, make_matcher(cfg.matcher), M, N, args.seed, workers_of(args, cfg))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "uncertainty.csv").write_text(uncertainty_csv(report), encoding="utf-8")
    params = {"seed": args.seed, "M": M, "N": N, "templates": str(args.templates),
              "spec": spec_to_lines(spec), "matcher": report.matcher_id, **info}
    write_manifest(out / "uncertainty.manifest.json", "uncertainty", params, [out / "uncertainty.csv"])
    print(f"u_matcher = {report.u_matcher!r}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = run_config(args)
    pairs = pairs_from(load_templates(args.templates))
    levels = parse_levels(args.levels)
    budget = _eval_setting(cfg, args, "imposter_budget", DEFAULT_IMPOSTER_BUDGET)
    far = _eval_setting(cfg, args, "far_target", FAR_TARGET)
    model, info = (None, {})
    if args.family == "distortion":
        model, info = resolve_model(args.model, args.seed)
    matcher = make_matcher(cfg.matcher)
    res = run_sweep(pairs, args.family, matcher, args.seed, levels, budget, far, model, workers_of(args, cfg))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.csv").write_text(sweep_csv([res]), encoding="utf-8")
    params = {"seed": args.seed, "family": args.family, "levels": levels, "imposter_budget": budget,
              "far_target": far, "templates": str(args.templates), "matcher": matcher.matcher_id, **info}
    write_manifest(out / "sweep.manifest.json", "sweep", params, [out / "sweep.csv"])
    for r in res.per_level:
        print(f"level {r.level}: tar={r.tar:.4f} threshold={r.threshold:.4f}")
    return EXIT_OK


def cmd_distributions(args) -> int:
    cfg = run_config(args)
    spec, info = spec_from(cfg, args)
    pairs = pairs_from(load_templates(args.templates))
    budget = _eval_setting(cfg, args, "imposter_budget", DEFAULT_IMPOSTER_BUDGET)
    sets = score_distributions(pairs, spec, make_matcher(cfg.matcher), args.seed, budget, workers_of(args, cfg))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "scores.csv").write_text(scores_csv(sets.values()), encoding="utf-8")
    params = {"seed": args.seed, "imposter_budget": budget, "templates": str(args.templates),
              "spec": spec_to_lines(spec), **info}
    write_manifest(out / "scores.manifest.json", "distributions", params, [out / "scores.csv"])
    for label, s in sets.items():
        m = s.summary
        print(f"{label}: n={m.n} mean={m.mean:.4f} std={m.std:.4f}")
    return EXIT_OK


def cmd_report(args) -> int:
    src = Path(args.input)
    if not src.is_dir():
        raise DataError(f"{src}: not a directory")
    out = Path(args.out) if args.out else src
    out.mkdir(parents=True, exist_ok=True)
    written = []
    scores = src / "scores.csv"
    if scores.is_file():
        (out / "histograms.svg").write_text(histogram_svg(read_scores_csv(scores), args.imposter_scale), encoding="utf-8")
        written.append("histograms.svg")
    sweep = src / "sweep.csv"
    if sweep.is_file():
        curves: dict[str, list[tuple[int, float]]] = {}
        for r in read_sweep_csv(sweep):
            curves.setdefault(r["technique"], []).append((r["level"], r["tar"]))
        (out / "tar.svg").write_text(tar_curve_svg(curves), encoding="utf-8")
        written.append("tar.svg")
    if not written:
        raise DataError(f"{src}: neither scores.csv nor sweep.csv found")
    print("wrote " + ", ".join(str(out / w) for w in written))
    return EXIT_OK


# --- parser ----------------------------------------------------------------

def _add_matcher_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file (perturb.*, matcher.*, eval.*)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--matcher-command", help="external matcher command; receives two ISO file paths")
    p.add_argument("--score-min", type=float, default=0.0)
    p.add_argument("--score-max", type=float, default=1.0)
    p.add_argument("--timeout", type=float, default=30.0, help="external matcher timeout in seconds")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="minubench", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"minubench {__version__}")
    parser.add_argument("--workers", type=int, help="worker processes (default: $MINUBENCH_WORKERS or CPU count)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate master templates and impressions")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("iso", "jsonl"), default="jsonl")
    p.add_argument("--impressions-per-finger", type=int, default=2)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("perturb", help="apply one perturbation to every template")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--spec", dest="config", help="perturbation config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--technique", choices=TECHNIQUES, help="realistic parameters of this technique")
    p.add_argument("--model", help="distortion model file")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_perturb)

    p = sub.add_parser("distort-train", help="train a PCA distortion model")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--count", type=int, default=320)
    p.add_argument("--t", type=int, default=2)
    p.add_argument("--fields", help=".npy array (count, rows, cols, 2) of user-supplied fields")
    p.add_argument("--spacing", type=float, default=16.0, help="grid spacing of --fields")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_distort_train)

    p = sub.add_parser("distort-apply", help="distort templates with fields sampled from a model")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--sigma-d", type=float, default=0.66)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_distort_apply)

    p = sub.add_parser("match", help="score template pairs")
    p.add_argument("--a")
    p.add_argument("--b")
    p.add_argument("--pairs", help="CSV of 'a,b' template paths")
    p.add_argument("--out", help="CSV output for --pairs (default stdout)")
    _add_matcher_flags(p)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("uncertainty", help="Monte Carlo uncertainty of the matcher")
    p.add_argument("--templates", required=True, help="reference templates")
    p.add_argument("--technique", choices=TECHNIQUES)
    p.add_argument("--model", help="distortion model file")
    p.add_argument("--M", type=int)
    p.add_argument("--N", type=int)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    _add_matcher_flags(p)
    p.set_defaults(func=cmd_uncertainty)

    p = sub.add_parser("sweep", help="TAR@FAR across increasing perturbation levels")
    p.add_argument("--templates", required=True, help="impressions, two per finger")
    p.add_argument("--family", choices=TECHNIQUES, required=True)
    p.add_argument("--levels", default="0-8")
    p.add_argument("--model", help="distortion model file")
    p.add_argument("--imposter-budget", dest="imposter_budget", type=int)
    p.add_argument("--far-target", dest="far_target", type=float)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    _add_matcher_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("distributions", help="genuine/imposter scores with and without perturbation")
    p.add_argument("--templates", required=True, help="impressions, two per finger")
    p.add_argument("--technique", choices=TECHNIQUES)
    p.add_argument("--model", help="distortion model file")
    p.add_argument("--imposter-budget", dest="imposter_budget", type=int)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    _add_matcher_flags(p)
    p.set_defaults(func=cmd_distributions)

    p = sub.add_parser("report", help="render scores.csv / sweep.csv as SVG")
    p.add_argument("--in", dest="input", required=True, help="directory holding the CSVs")
    p.add_argument("--out", help="output directory (default: the input directory)")
    p.add_argument("--imposter-scale", type=float, default=0.1)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.workers is not None and args.workers < 1:
            parser.error("--workers must be at least 1")
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"minubench: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MatcherError as exc:
        print(f"minubench: matcher error: {exc}", file=sys.stderr)
        return EXIT_MATCHER
    except TrialError as exc:
        print(f"minubench: {'matcher error' if exc.matcher_failure else 'error'}: {exc}", file=sys.stderr)
        return EXIT_MATCHER if exc.matcher_failure else EXIT_DATA
    except (DataError, TemplateFormatError, ModelFormatError, GenerationError, PlacementError,
            FileNotFoundError, IsADirectoryError) as exc:
        print(f"minubench: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"minubench: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
