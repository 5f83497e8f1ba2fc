"""Parameter-space instruments: flattening, plane charts, barriers."""

import numpy as np
import pytest

from baryfuse.datasets import two_moons
from baryfuse.landscape import (
    flatten_model,
    grid_eval,
    grid_to_csv,
    make_plane,
    segment_barrier,
    unflatten_model,
)
from baryfuse.training import train
from helpers import (
    max_abs_param_diff,
    random_cnn,
    random_lstm,
    random_mlp,
    random_resmlp,
    random_rnn,
)


@pytest.mark.parametrize(
    "build", [random_mlp, random_cnn, random_resmlp, random_rnn, random_lstm]
)
def test_flatten_round_trip(build):
    rng = np.random.default_rng(0)
    m = build(rng)
    vec = flatten_model(m)
    assert vec.ndim == 1
    back = unflatten_model(m, vec)
    assert max_abs_param_diff(back, m) == 0.0


def test_flatten_length_check():
    rng = np.random.default_rng(1)
    m = random_mlp(rng)
    with pytest.raises(ValueError):
        unflatten_model(m, flatten_model(m)[:-1])


def test_unflatten_does_not_share_memory():
    rng = np.random.default_rng(2)
    m = random_mlp(rng)
    vec = flatten_model(m)
    back = unflatten_model(m, vec)
    back.layers[0].weight[0, 0] += 1.0
    assert m.layers[0].weight[0, 0] != back.layers[0].weight[0, 0]


def plane_for(rng, scale=1.0):
    m1 = random_mlp(rng)
    v1 = flatten_model(m1)
    v2 = v1 + scale * rng.standard_normal(v1.size)
    v3 = v1 + scale * rng.standard_normal(v1.size)
    return v1, v2, v3


def test_make_plane_orthonormal_basis():
    rng = np.random.default_rng(3)
    v1, v2, v3 = plane_for(rng)
    origin, u, v, coords = make_plane(v1, v2, v3)
    assert abs(np.linalg.norm(u) - 1.0) <= 1e-12
    assert abs(np.linalg.norm(v) - 1.0) <= 1e-12
    assert abs(float(u @ v)) <= 1e-12


def test_make_plane_anchor_reconstruction():
    rng = np.random.default_rng(4)
    v1, v2, v3 = plane_for(rng)
    origin, u, v, coords = make_plane(v1, v2, v3)
    for vec, (x, y) in zip((v1, v2, v3), coords):
        np.testing.assert_allclose(origin + x * u + y * v, vec, atol=1e-10)
    # first anchor sits at the chart origin, second on the x axis
    assert coords[0] == (0.0, 0.0)
    assert coords[1][1] == 0.0
    assert coords[1][0] > 0.0
    assert coords[2][1] >= 0.0


def test_make_plane_degenerate_raises():
    rng = np.random.default_rng(5)
    v1, v2, _ = plane_for(rng)
    with pytest.raises(ValueError):
        make_plane(v1, v1, v2)  # zero first direction
    with pytest.raises(ValueError):
        make_plane(v1, v2, 0.5 * (v1 + v2))  # collinear third anchor


def test_grid_eval_shapes_and_range():
    rng = np.random.default_rng(6)
    ds = two_moons(10, seed=0)
    m1 = train("mlp", ds, seed=0, epochs=10)
    m2 = train("mlp", ds, seed=1, epochs=10)
    v1, v2 = flatten_model(m1), flatten_model(m2)
    v3 = 0.5 * (v1 + v2) + 0.01 * rng.standard_normal(v1.size)
    plane = make_plane(v1, v2, v3)
    grid = grid_eval(plane, m1, ds, rows=5, cols=6)
    assert grid.grid.shape == (5, 6)
    assert grid.xs.shape == (6,)
    assert grid.ys.shape == (5,)
    assert np.all(grid.grid >= 0.0) and np.all(grid.grid <= 1.0)
    # bounds stretch past the anchors on both axes
    xs_anchor = [c[0] for c in grid.anchor_coords]
    assert grid.xs[0] < min(xs_anchor) and grid.xs[-1] > max(xs_anchor)


def test_grid_eval_rejects_bounds_excluding_anchors():
    ds = two_moons(5, seed=0)
    m1 = train("mlp", ds, seed=0, epochs=2)
    m2 = train("mlp", ds, seed=1, epochs=2)
    v1, v2 = flatten_model(m1), flatten_model(m2)
    v3 = v1 + 0.3 * (v2 - v1) + 0.01
    plane = make_plane(v1, v2, v3)
    with pytest.raises(ValueError):
        grid_eval(plane, m1, ds, rows=4, cols=4, bounds=(-2.0, -1.0, -2.0, -1.0))


def test_grid_to_csv_format(tmp_path):
    ds = two_moons(5, seed=0)
    m1 = train("mlp", ds, seed=0, epochs=2)
    m2 = train("mlp", ds, seed=1, epochs=2)
    v1, v2 = flatten_model(m1), flatten_model(m2)
    v3 = v1 + 0.25 * (v2 - v1) + 0.05
    plane = make_plane(v1, v2, v3)
    grid = grid_eval(plane, m1, ds, rows=4, cols=3)
    path = tmp_path / "grid.csv"
    grid_to_csv(grid, str(path))
    lines = path.read_text().strip().splitlines()
    anchors = [l for l in lines if l.startswith("#anchor,")]
    assert len(anchors) == 3
    names = [a.split(",")[1] for a in anchors]
    assert names == ["model1", "model2", "model2_aligned"]
    assert lines[3] == "x,y,error"
    data = lines[4:]
    assert len(data) == 4 * 3
    for row in data:
        x, y, err = (float(tok) for tok in row.split(","))
        assert 0.0 <= err <= 1.0


def test_barrier_of_identical_endpoints_is_zero():
    ds = two_moons(10, seed=1)
    m = train("mlp", ds, seed=0, epochs=5)
    v = flatten_model(m)
    assert segment_barrier(v, v, m, ds) == 0.0


def test_barrier_symmetry_and_sign():
    ds = two_moons(10, seed=1)
    m1 = train("mlp", ds, seed=0, epochs=10)
    m2 = train("mlp", ds, seed=1, epochs=10)
    v1, v2 = flatten_model(m1), flatten_model(m2)
    ab = segment_barrier(v1, v2, m1, ds, steps=21)
    ba = segment_barrier(v2, v1, m1, ds, steps=21)
    assert ab == ba
    assert ab >= 0.0


def test_barrier_step_validation():
    ds = two_moons(5, seed=1)
    m = train("mlp", ds, seed=0, epochs=2)
    v = flatten_model(m)
    with pytest.raises(ValueError):
        segment_barrier(v, v, m, ds, steps=1)


def test_barrier_detects_known_bump():
    # two perfect models whose hidden units are swapped copies of each
    # other: the midpoint zeroes the first layer and predicts one class,
    # so the barrier equals the error of that constant classifier
    from baryfuse.datasets import Dataset
    from baryfuse.model import DenseLayer, Model

    xs = np.array([[1.0], [2.0], [-1.0], [-2.0]])
    ys = np.array([1, 1, 0, 0])
    ds = Dataset(xs, ys)
    a = Model(
        [
            DenseLayer(np.array([[1.0], [-1.0]]), np.zeros(2)),
            DenseLayer(np.array([[0.0, 1.0], [1.0, 0.0]]), np.zeros(2)),
        ],
        1,
        "mlp",
    )
    b = Model(
        [
            DenseLayer(np.array([[-1.0], [1.0]]), np.zeros(2)),
            DenseLayer(np.eye(2), np.zeros(2)),
        ],
        1,
        "mlp",
    )
    v1, v2 = flatten_model(a), flatten_model(b)
    assert segment_barrier(v1, v1, a, ds) == 0.0
    bar = segment_barrier(v1, v2, a, ds, steps=21)
    assert bar == pytest.approx(0.5)
