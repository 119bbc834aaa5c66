import numpy as np
import pytest

from minubench.core import validate
from minubench.datagen import (
    GenerationError,
    GenParams,
    derive_impression,
    derive_impression_with_transform,
    generate_master,
)
from minubench.matcher import match_score
from minubench.seeding import derive_seed


def test_master_is_deterministic():
    assert generate_master(1) == generate_master(1)
    assert generate_master(1) != generate_master(2)


def test_masters_respect_separation_and_ellipse():
    p = GenParams()
    cx, cy, ax, ay = p.ellipse
    for i in range(1000):
        m = generate_master(derive_seed("sep", i))
        xy = m.array[:, :2]
        assert np.all(((xy[:, 0] - cx) / ax) ** 2 + ((xy[:, 1] - cy) / ay) ** 2 <= 1.0)
        d = np.hypot(xy[:, None, 0] - xy[None, :, 0], xy[:, None, 1] - xy[None, :, 1])
        np.fill_diagonal(d, np.inf)
        assert d.min() >= p.min_separation
        assert validate(m) == []


def test_master_fields():
    m = generate_master(5)
    assert {q for q in m.qualities} == {60}
    assert set(m.kinds.tolist()) <= {0, 1}
    assert np.all(m.array[:, :2] == np.round(m.array[:, :2]))


@pytest.mark.slow
def test_count_distribution_mean():
    counts = [len(generate_master(derive_seed("count", i))) for i in range(5000)]
    assert abs(np.mean(counts) - 45) <= 1
    assert min(counts) >= 20 and max(counts) <= 80


def test_orientation_is_spatially_coherent():
    # neighbouring minutiae share ridge flow (axial angles, so compare doubled angles)
    m = generate_master(11)
    xy, th = m.array[:, :2], m.array[:, 2]
    d = np.hypot(xy[:, None, 0] - xy[None, :, 0], xy[:, None, 1] - xy[None, :, 1])
    np.fill_diagonal(d, np.inf)
    nn = d.argmin(axis=1)
    diff = np.abs(np.angle(np.exp(2j * (th - th[nn]))))
    assert np.median(diff) < 0.5


def test_placement_failure():
    p = GenParams(count_mean=80, count_std=0, count_min=80, count_max=80, width=60, height=60)
    with pytest.raises(GenerationError, match="attempts"):
        generate_master(3, p)


def test_bad_params():
    with pytest.raises(ValueError):
        GenParams(count_min=0)
    with pytest.raises(ValueError):
        GenParams(min_separation=0)


def test_identity_impression():
    m = generate_master(4)
    imp = derive_impression(m, 9, global_rotation_std=0, global_shift_std=0, retain_fraction_range=(1, 1))
    assert imp.minutiae == m.minutiae
    assert imp.finger_id == m.finger_id and imp.impression_id != m.impression_id


def test_impression_inverts_to_master():
    m = generate_master(8)
    for s in range(20):
        imp, tf, idx = derive_impression_with_transform(m, s)
        back = tf.invert(imp.array[:, :2])
        err = np.abs(back - m.array[idx, :2]).max()
        assert err <= 1e-9
        assert len(set(idx.tolist())) == len(idx)


def test_retain_fraction():
    m = generate_master(12, GenParams(count_mean=50, count_std=0))
    assert len(m) == 50
    imp = derive_impression(m, 1, global_rotation_std=0, global_shift_std=0, retain_fraction_range=(0.8, 0.8))
    assert len(imp) == 40


def test_genuine_beats_imposter(corpus):
    masters, imps = corpus
    n = len(masters)
    wins = trials = 0
    for i in range(n):
        for j in range(17):
            k = (i + 1 + j) % n
            g = match_score(masters[i], imps[i][0]).normalized
            im = match_score(masters[i], imps[k][0]).normalized
            wins += g > im
            trials += 1
    assert trials >= 1000
    assert wins / trials >= 0.99
