import json
import subprocess
import sys

import pytest

from minubench.cli import main, parse_levels
from minubench.core import read_iso, read_jsonl


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["gen", "--count", "12", "--seed", "5", "--out", str(d / "jsonl")]) == 0
    assert main(["gen", "--count", "2", "--seed", "5", "--out", str(d / "iso"), "--format", "iso"]) == 0
    return d


def run(*argv):
    return main(["--workers", "1", *map(str, argv)])


def test_gen_outputs(data):
    imps = read_jsonl(data / "jsonl" / "impressions.jsonl")
    assert len(imps) == 24 and len(read_jsonl(data / "jsonl" / "masters.jsonl")) == 12
    man = json.loads((data / "jsonl" / "manifest.json").read_text())
    assert man["params"]["seed"] == 5 and len(man["params"]["fingers"]) == 12
    isos = sorted((data / "iso" / "impressions").glob("*.iso"))
    assert len(isos) == 4 and read_iso(isos[0]).resolution == 500


def test_gen_is_reproducible(data, tmp_path):
    assert run("gen", "--count", "12", "--seed", "5", "--out", tmp_path) == 0
    for name in ("impressions.jsonl", "masters.jsonl", "manifest.json"):
        assert (tmp_path / name).read_bytes().replace(str(tmp_path).encode(), b"") == (
            data / "jsonl" / name).read_bytes().replace(str(data / "jsonl").encode(), b"")


def test_seed_is_required(capsys):
    assert main(["perturb", "--in", "x", "--technique", "missing", "--out", "y"]) == 1
    assert main(["gen", "--count", "3", "--out", "z"]) == 1
    assert "--seed" in capsys.readouterr().err


def test_missing_input_is_data_error(tmp_path):
    assert run("perturb", "--in", tmp_path / "none.jsonl", "--technique", "missing",
               "--seed", "1", "--out", tmp_path / "o.jsonl") == 2


def test_unknown_config_key_is_usage_error(data, tmp_path):
    assert run("perturb", "--in", data / "jsonl" / "impressions.jsonl", "--set", "perturb.technique=missing",
               "--set", "perturb.missing.wat=1", "--seed", "1", "--out", tmp_path / "o.jsonl") == 1


@pytest.mark.parametrize("tech,setting", [
    ("positional", []),
    ("missing", ["--set", "perturb.missing.fixed_ratio=0"]),
    ("spurious", ["--set", "perturb.spurious.fixed_ratio=0"]),
])
def test_zero_perturbation_is_identity(data, tmp_path, tech, setting):
    src = data / "jsonl" / "impressions.jsonl"
    zero = {"positional": ["--set", "perturb.positional.mu_p=0", "--set", "perturb.positional.sigma_p=0",
                           "--set", "perturb.positional.mu_o=0", "--set", "perturb.positional.sigma_o=0"]}
    out = tmp_path / "o.jsonl"
    assert run("perturb", "--in", src, "--technique", tech, *zero.get(tech, setting), "--seed", "3", "--out", out) == 0
    a, b = read_jsonl(src), read_jsonl(out)
    for x, y in zip(a, b, strict=True):
        assert y.impression_id == x.impression_id + "~p"
        assert (x.minutiae, x.width, x.height, x.finger_id) == (y.minutiae, y.width, y.height, y.finger_id)


def test_combined_counts_in_manifest(data, tmp_path):
    out = tmp_path / "c.jsonl"
    assert run("perturb", "--in", data / "jsonl" / "impressions.jsonl", "--technique", "combined",
               "--seed", "8", "--out", out) == 0
    man = json.loads((tmp_path / "c.jsonl.manifest.json").read_text())
    recs = man["params"]["templates"]
    assert [r["n_out"] for r in recs] == [len(t) for t in read_jsonl(out)]
    assert [r["n_in"] for r in recs] == [len(t) for t in read_jsonl(data / "jsonl" / "impressions.jsonl")]
    assert any(r["n_in"] != r["n_out"] for r in recs)


def test_distortion_train_and_apply(data, tmp_path):
    model = tmp_path / "m.npz"
    assert run("distort-train", "--seed", "2", "--count", "40", "--out", model) == 0
    out = tmp_path / "d.jsonl"
    assert run("distort-apply", "--model", model, "--in", data / "jsonl" / "impressions.jsonl",
               "--seed", "4", "--out", out) == 0
    ts = read_jsonl(out)
    assert len(ts) == 24 and all(t.impression_id.endswith("~d") for t in ts)
    man = json.loads((tmp_path / "d.jsonl.manifest.json").read_text())
    assert len(man["params"]["templates"][0]["coefficients"]) == 2
    assert run("distort-apply", "--model", tmp_path / "nope.npz", "--in", out, "--seed", "4", "--out", out) == 2


def test_match_iso_pair(data, capsys):
    a, b = sorted((data / "iso" / "impressions").glob("*.iso"))[:2]
    assert run("match", "--a", a, "--b", b) == 0
    score = float(capsys.readouterr().out.strip())
    assert 0.0 <= score <= 1.0


def test_match_pairs_file(data, tmp_path):
    isos = sorted((data / "iso" / "impressions").glob("*.iso"))
    pf = tmp_path / "pairs.csv"
    pf.write_text("a,b\n" + "\n".join(f"{isos[0]},{p}" for p in isos) + "\n")
    assert run("match", "--pairs", pf, "--out", tmp_path / "s.csv") == 0
    rows = (tmp_path / "s.csv").read_text().splitlines()
    assert rows[0] == "a,b,score" and float(rows[1].split(",")[2]) == 1.0


def test_external_matcher_exit_codes(data, stub_matcher_script, monkeypatch):
    a, b = sorted((data / "iso" / "impressions").glob("*.iso"))[:2]
    cmd = " ".join(stub_matcher_script)
    monkeypatch.setenv("STUB_OUTPUT", "40")
    assert run("match", "--a", a, "--b", b, "--matcher-command", cmd, "--score-max", "80") == 0
    monkeypatch.setenv("STUB_MODE", "fail")
    assert run("match", "--a", a, "--b", b, "--matcher-command", cmd) == 3
    monkeypatch.setenv("STUB_MODE", "value")
    monkeypatch.setenv("STUB_OUTPUT", "not-a-number")
    assert run("match", "--a", a, "--b", b, "--matcher-command", cmd) == 3


def test_uncertainty_command(data, tmp_path):
    out = tmp_path / "u"
    assert run("uncertainty", "--templates", data / "jsonl" / "masters.jsonl", "--technique", "positional",
               "--M", "4", "--N", "3", "--seed", "1", "--out", out) == 0
    lines = (out / "uncertainty.csv").read_text().splitlines()
    assert lines[0] == "k,finger_id,impression_id,mu_k,u_k" and len(lines) == 6
    assert run("uncertainty", "--templates", data / "jsonl" / "masters.jsonl", "--technique", "positional",
               "--M", "40", "--N", "3", "--seed", "1", "--out", out) == 1


def test_sweep_distributions_and_report(data, tmp_path):
    src = data / "jsonl" / "impressions.jsonl"
    out = tmp_path / "r"
    assert run("sweep", "--templates", src, "--family", "missing", "--levels", "0,4,8",
               "--imposter-budget", "30", "--seed", "1", "--out", out) == 0
    assert run("distributions", "--templates", src, "--technique", "spurious",
               "--imposter-budget", "30", "--seed", "1", "--out", out) == 0
    assert run("report", "--in", out) == 0
    first = {p: (out / p).read_bytes() for p in ("histograms.svg", "tar.svg")}
    assert run("report", "--in", out) == 0
    assert first == {p: (out / p).read_bytes() for p in first}
    assert run("report", "--in", tmp_path / "absent") == 2


def test_sweep_bad_levels(data, tmp_path):
    assert run("sweep", "--templates", data / "jsonl" / "impressions.jsonl", "--family", "missing",
               "--levels", "0-9", "--seed", "1", "--out", tmp_path) == 1


def test_parse_levels():
    assert parse_levels("0-2,5") == [0, 1, 2, 5]


def test_console_entry_point():
    r = subprocess.run([sys.executable, "-m", "minubench.cli", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and "minubench" in r.stdout
