import json
import math
import struct

import numpy as np
import pytest

from minubench.core import MinutiaeTemplate
from minubench.datagen import generate_master
from minubench.distortion import (
    DistortionField,
    GridSpec,
    ModelFormatError,
    PressParams,
    TpsFitError,
    apply_field,
    field_from_tps,
    load_model,
    press_field,
    press_lattice,
    sample_field,
    save_model,
    synth_training_fields,
    tps_eval,
    tps_fit,
    train_distortion_model,
)

GRID = GridSpec()


def random_points(rng, n):
    return rng.uniform([0, 0], [416, 560], size=(n, 2))


def test_grid_defaults():
    g = GridSpec.covering(416, 560, 16)
    assert (g.cols, g.rows, g.dim) == (27, 36, 1944)
    assert g == GRID


def test_tps_identity():
    rng = np.random.default_rng(0)
    src = random_points(rng, 10)
    tps = tps_fit(src, src)
    assert np.allclose(tps.affine, [[0, 1, 0], [0, 0, 1]], atol=1e-10)
    assert np.abs(tps.weights).max() <= 1e-10
    test = random_points(rng, 50)
    assert np.allclose(tps_eval(tps, test), test, atol=1e-9)


def test_tps_affine_has_no_bending():
    rng = np.random.default_rng(1)
    src = random_points(rng, 12)
    A = np.array([[1.1, 0.2], [-0.15, 0.9]])
    b = np.array([5.0, -7.0])
    tps = tps_fit(src, src @ A.T + b)
    assert np.abs(tps.weights).max() <= 1e-8
    test = GRID.nodes
    assert np.abs(tps_eval(tps, test) - (test @ A.T + b)).max() <= 1e-8


def test_tps_interpolates_exactly():
    rng = np.random.default_rng(2)
    src = random_points(rng, 12)
    dst = src + rng.normal(0, 8, size=src.shape)
    tps = tps_fit(src, dst, 0.0)
    assert np.abs(tps_eval(tps, src) - dst).max() <= 1e-9
    assert tps.side_condition_residual <= 1e-8
    # a control point evaluated on its own hits U(0) = 0
    assert np.abs(tps(src[3]) - dst[3]).max() <= 1e-9


def test_tps_regularization_smooths():
    rng = np.random.default_rng(3)
    src = random_points(rng, 12)
    dst = src + rng.normal(0, 8, size=src.shape)
    exact = np.abs(tps_eval(tps_fit(src, dst, 0.0), src) - dst).max()
    smooth = np.abs(tps_eval(tps_fit(src, dst, 1e4), src) - dst).max()
    assert smooth > exact


def test_tps_failures():
    with pytest.raises(TpsFitError, match="at least 3"):
        tps_fit(np.zeros((2, 2)), np.zeros((2, 2)))
    line = np.column_stack([np.arange(5.0), 2 * np.arange(5.0)])
    with pytest.raises(TpsFitError, match="collinear"):
        tps_fit(line, line)
    dup = np.array([[0, 0], [10, 0], [0, 10], [10, 0]], float)
    with pytest.raises(TpsFitError, match="duplicate"):
        tps_fit(dup, dup)


def test_field_from_tps_identity_and_translation():
    src = press_lattice(PressParams())
    assert np.abs(field_from_tps(tps_fit(src, src), GRID).displacements).max() <= 1e-9
    f = field_from_tps(tps_fit(src, src + [5.0, 0.0]), GRID)
    assert np.allclose(f.displacements, np.broadcast_to([5.0, 0.0], f.displacements.shape), atol=1e-9)


def test_field_lookup_matches_control_displacements():
    rng = np.random.default_rng(4)
    src = press_lattice(PressParams())
    disp = rng.uniform(-15, 15, size=src.shape)
    f = field_from_tps(tps_fit(src, src + disp), GRID)
    inside = (src[:, 0] <= 416) & (src[:, 1] <= 560)
    assert np.abs(f.at(src[inside]) - disp[inside]).max() <= 0.5


def test_field_lookup_clamps_outside_grid():
    f = DistortionField(GRID, np.random.default_rng(0).normal(size=(36, 27, 2)))
    assert np.allclose(f.at(np.array([[-50.0, -50.0]])), f.displacements[0, 0])
    assert np.allclose(f.at(np.array([[1e4, 1e4]])), f.displacements[-1, -1])


def test_press_zero_draw_is_zero_field():
    f = press_field((208.0, 500.0), 0.0, 0.0, 0.0)
    assert np.abs(f.displacements).max() <= 1e-9


def test_synth_fields_deterministic_and_bounded():
    a = synth_training_fields(7, 320)
    b = synth_training_fields(7, 320)
    assert len(a) == 320
    assert all(np.array_equal(x.displacements, y.displacements) for x, y in zip(a, b))
    mag = np.mean([f.mean_magnitude() for f in a])
    assert 2.0 <= mag <= 15.0


def two_fields():
    rng = np.random.default_rng(5)
    return [DistortionField(GRID, rng.normal(size=(36, 27, 2))) for _ in range(2)]


def test_pca_two_field_closed_form():
    f1, f2 = two_fields()
    model = train_distortion_model([f1, f2], t=1)
    diff = f1.flatten() - f2.flatten()
    assert np.allclose(model.mean_field, (f1.flatten() + f2.flatten()) / 2, atol=1e-12)
    lam = diff @ diff / 2
    assert model.eigenvalues[0] == pytest.approx(lam, rel=1e-10)
    e = model.eigenfields[0]
    assert abs(abs(e @ diff) / np.linalg.norm(diff) - 1.0) <= 1e-10


def test_pca_identical_fields_are_degenerate():
    f = two_fields()[0]
    model = train_distortion_model([f, f, f], t=2)
    assert np.array_equal(model.mean_field, f.flatten())
    assert np.all(model.eigenvalues == 0) and model.degenerate


def test_pca_full_rank_reconstruction():
    fields = synth_training_fields(11, 20)
    model = train_distortion_model(fields, t=19)
    ev = model.eigenvalues
    assert np.all(ev >= 0) and np.all(np.diff(ev) <= 0)
    gram = model.eigenfields @ model.eigenfields.T
    assert np.abs(gram - np.eye(19)).max() <= 1e-8
    for f in fields:
        r = model.reconstruct(f).flatten()
        assert np.linalg.norm(r - f.flatten()) / np.linalg.norm(f.flatten()) <= 1e-6


def test_pca_needs_enough_fields():
    with pytest.raises(ValueError, match="t\\+1"):
        train_distortion_model(two_fields(), t=2)


@pytest.fixture(scope="module")
def model():
    return train_distortion_model(synth_training_fields(7, 320))


def test_sample_field_formula(model):
    assert np.array_equal(model.field_from_coefficients([0.0, 0.0]).flatten(), model.mean_field)
    d = model.field_from_coefficients([1.0, 0.0]).flatten() - model.mean_field
    assert np.abs(d - math.sqrt(model.eigenvalues[0]) * model.eigenfields[0]).max() <= 1e-12
    c1, c2 = np.array([0.3, -1.2]), np.array([-0.7, 0.4])
    lhs = model.field_from_coefficients(c1 + c2).flatten() - model.mean_field
    rhs = (model.field_from_coefficients(c1).flatten() - model.mean_field) + (
        model.field_from_coefficients(c2).flatten() - model.mean_field)
    assert np.abs(lhs - rhs).max() <= 1e-9


def test_sample_field_coefficient_spread(model):
    rng = np.random.default_rng(0)
    c = np.array([sample_field(model, 0.66, rng)[1] for _ in range(10_000)])
    assert abs(c[:, 0].std() - 0.66) <= 0.02
    f, c0 = sample_field(model, 0.0, rng)
    assert np.all(c0 == 0) and np.array_equal(f.flatten(), model.mean_field)


def test_apply_zero_field_is_identity():
    t = generate_master(3)
    assert apply_field(t, DistortionField(GRID, np.zeros((36, 27, 2)))).minutiae == t.minutiae


def test_apply_translation_field():
    t = generate_master(3)
    out = apply_field(t, DistortionField(GRID, np.broadcast_to([5.0, 0.0], (36, 27, 2)).copy()))
    inside = t.array[:, 0] + 5 < 416
    assert np.allclose(out.array[inside, :2], t.array[inside, :2] + [5, 0])
    d = np.angle(np.exp(1j * (out.array[:, 2] - t.array[:, 2])))
    assert np.abs(d).max() <= 1e-9


def test_apply_rotation_field():
    alpha = 0.1
    c = np.array([208.0, 280.0])
    nodes = GRID.nodes
    rel = nodes - c
    rot = np.column_stack([math.cos(alpha) * rel[:, 0] - math.sin(alpha) * rel[:, 1],
                           math.sin(alpha) * rel[:, 0] + math.cos(alpha) * rel[:, 1]])
    f = DistortionField(GRID, (rot - rel).reshape(36, 27, 2))
    t = generate_master(6)
    out = apply_field(t, f)
    xy = t.array[:, :2]
    far = (xy[:, 0] >= 20) & (xy[:, 0] < 396) & (xy[:, 1] >= 20) & (xy[:, 1] < 540)
    d = np.angle(np.exp(1j * (out.array[far, 2] - t.array[far, 2] - alpha)))
    assert np.abs(d).max() <= 0.02


def test_apply_preserves_count_and_attributes(model):
    t = generate_master(2)
    out = apply_field(t, sample_field(model, 3.0, np.random.default_rng(1))[0])
    assert len(out) == len(t)
    assert sorted(zip(out.kinds, out.qualities)) == sorted(zip(t.kinds, t.qualities))
    assert np.all((out.array[:, 0] >= 0) & (out.array[:, 0] < 416))
    assert np.all((out.array[:, 1] >= 0) & (out.array[:, 1] < 560))


def test_apply_empty_template(model):
    t = MinutiaeTemplate(())
    assert apply_field(t, sample_field(model, 1.0, np.random.default_rng(0))[0]) == t


def test_model_file_round_trip(tmp_path, model):
    p = tmp_path / "m.dmdl"
    save_model(p, model, {"seed": 7, "training_count": 320})
    back = load_model(p)
    assert back.grid == model.grid
    assert np.array_equal(back.mean_field, model.mean_field)
    assert np.array_equal(back.eigenvalues, model.eigenvalues)
    assert np.array_equal(back.eigenfields, model.eigenfields)
    side = json.loads((tmp_path / "m.dmdl.json").read_text())
    assert side["seed"] == 7 and side["training_count"] == 320 and side["t"] == 2
    assert p.read_bytes()[:4] == b"DMDL"


def test_model_file_errors(tmp_path, model):
    p = tmp_path / "m.dmdl"
    save_model(p, model)
    data = bytearray(p.read_bytes())
    struct.pack_into("<H", data, 4, 2)
    (tmp_path / "v2.dmdl").write_bytes(bytes(data))
    with pytest.raises(ModelFormatError, match="version 2"):
        load_model(tmp_path / "v2.dmdl")
    (tmp_path / "bad.dmdl").write_bytes(b"XXXX" + bytes(p.read_bytes()[4:]))
    with pytest.raises(ModelFormatError, match="magic"):
        load_model(tmp_path / "bad.dmdl")
    (tmp_path / "short.dmdl").write_bytes(p.read_bytes()[:-8])
    with pytest.raises(ModelFormatError, match="expected"):
        load_model(tmp_path / "short.dmdl")
