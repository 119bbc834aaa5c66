import os

import numpy as np
import pytest

from minubench.core import MinutiaeTemplate
from minubench.datagen import RigidTransform, generate_master
from minubench.matcher import (
    ExternalMatcher,
    MatcherConfig,
    MatcherError,
    make_matcher,
    match_external,
    match_score,
    normalize_score,
)
from minubench.perturb import MissingParams, perturb_missing
from minubench.core import canonical_angles, template_from_arrays
from minubench.seeding import derive_seed


def rigid(t, angle, shift, center=(208.0, 280.0)):
    tf = RigidTransform(angle, center, shift)
    xyt = np.column_stack([tf.apply(t.array[:, :2]), canonical_angles(t.array[:, 2] + angle)])
    # no clamping: coordinates may leave the image, which the matcher does not care about
    return template_from_arrays(t, xyt, t.kinds, t.qualities)


def test_self_match_is_one(corpus):
    for t in corpus[0][:20]:
        s = match_score(t, t)
        assert s.normalized == 1.0 and s.matched_count == len(t)


def test_empty_template_scores_zero():
    t = generate_master(1)
    e = MinutiaeTemplate(())
    assert match_score(t, e).normalized == 0.0
    assert match_score(e, e).normalized == 0.0


def test_rigidly_moved_copy_scores_high(corpus):
    for t in corpus[0][:20]:
        assert match_score(t, rigid(t, 0.3, (20.0, -15.0))).normalized >= 0.95


def test_shared_rigid_transform_leaves_score_unchanged(pairs):
    for a, b in pairs[:25]:
        s = match_score(a, b)
        ra, rb = rigid(a, 0.7, (31.0, -12.0)), rigid(b, 0.7, (31.0, -12.0))
        s2 = match_score(ra, rb)
        assert s2.normalized == s.normalized
        assert s2.matched_count == s.matched_count


def test_score_invariants(pairs):
    for a, b in pairs[:20]:
        s = match_score(a, b)
        assert 0.0 <= s.normalized <= 1.0
        assert s.matched_count <= min(len(a), len(b))
        assert s.raw == s.normalized and s.matcher_id == "baseline"


def test_near_symmetric(pairs, corpus):
    imps = corpus[1]
    gaps = []
    for i, (a, b) in enumerate(pairs):
        c = imps[(i + 1) % len(imps)][1]
        gaps.append(abs(match_score(a, b).normalized - match_score(b, a).normalized))
        gaps.append(abs(match_score(a, c).normalized - match_score(c, a).normalized))
    assert max(gaps) <= 0.05


@pytest.mark.slow
def test_imposter_scores_stay_low():
    n = 200
    masters = [generate_master(derive_seed("imp", i)) for i in range(n)]
    scores = [match_score(masters[i], masters[(i + 1 + j) % n]).normalized for i in range(n) for j in range(50)]
    assert len(scores) == 10_000
    assert np.mean(np.array(scores) <= 0.2) >= 0.999


def test_monotone_in_missing_ratio(pairs):
    means = []
    for r in (0.0, 0.2, 0.4, 0.6, 0.8):
        vals = []
        for k, (a, b) in enumerate(pairs[:50]):
            for n in range(10):
                rng = np.random.default_rng(derive_seed("mono", k, n, r))
                vals.append(match_score(a, perturb_missing(b, MissingParams(fixed_ratio=r), rng)).normalized)
        means.append(np.mean(vals))
    assert all(later <= earlier + 0.02 for earlier, later in zip(means, means[1:]))


def test_small_jitter_is_absorbed(corpus):
    # a few pixels of noise and a tilted seed pair must not break alignment
    from minubench.perturb import REALISTIC_POSITIONAL, perturb_positional

    rng = np.random.default_rng(3)
    scores = [match_score(t, perturb_positional(t, REALISTIC_POSITIONAL, rng)).normalized for t in corpus[0][:20]]
    assert min(scores) >= 0.9


def test_config_validation():
    with pytest.raises(ValueError):
        MatcherConfig(pair_distance_tol=0)
    with pytest.raises(ValueError, match="refit"):
        MatcherConfig(pair_distance_tol=10.0, refit_distance_tol=5.0)
    with pytest.raises(ValueError):
        MatcherConfig(neighbor_k=0)
    with pytest.raises(ValueError):
        ExternalMatcher(("x",), score_min=1.0, score_max=1.0)


def test_normalize_clamps():
    assert normalize_score(-5, 0, 100) == 0.0
    assert normalize_score(50, 0, 100) == 0.5
    assert normalize_score(500, 0, 100) == 1.0


def ext_cfg(cmd, **kw):
    return MatcherConfig(external=ExternalMatcher(tuple(cmd), **kw))


def test_external_value(stub_matcher_script, monkeypatch, corpus):
    a, b = corpus[0][:2]
    monkeypatch.setenv("STUB_OUTPUT", "0.5")
    s = match_external(a, b, ext_cfg(stub_matcher_script))
    assert s.normalized == 0.5 and s.raw == 0.5
    monkeypatch.setenv("STUB_OUTPUT", "25")
    s = make_matcher(ext_cfg(stub_matcher_script, score_min=50, score_max=150))(a, b)
    assert s.normalized == 0.0 and s.raw == 25.0


def test_external_unparseable(stub_matcher_script, monkeypatch, corpus):
    monkeypatch.setenv("STUB_OUTPUT", "banana")
    with pytest.raises(MatcherError, match="banana"):
        match_external(corpus[0][0], corpus[0][1], ext_cfg(stub_matcher_script))


def test_external_failure_carries_diagnostics(stub_matcher_script, monkeypatch, corpus):
    monkeypatch.setenv("STUB_MODE", "fail")
    with pytest.raises(MatcherError, match="status 4") as info:
        match_external(corpus[0][0], corpus[0][1], ext_cfg(stub_matcher_script))
    assert "boom" in info.value.diagnostics


def test_external_timeout(stub_matcher_script, monkeypatch, corpus):
    monkeypatch.setenv("STUB_MODE", "sleep")
    with pytest.raises(MatcherError, match="timed out"):
        match_external(corpus[0][0], corpus[0][1], ext_cfg(stub_matcher_script, timeout_s=0.5))


def test_external_missing_program(corpus):
    with pytest.raises(MatcherError, match="could not run"):
        match_external(corpus[0][0], corpus[0][1], ext_cfg([os.path.join(os.sep, "no", "such", "matcher")]))
