import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from nersae.data import (
    CORN_OUTLIER,
    AreaInfo,
    DatasetError,
    SurveyDataset,
    UnitRecord,
    compose_area_mean,
    load_corn,
    load_dataset,
    residual,
    save_dataset,
    theta,
)

finite = st.floats(-1e6, 1e6, allow_nan=False)


def write(tmp_path, units, areas):
    u, a = tmp_path / "u.csv", tmp_path / "a.csv"
    u.write_text(units)
    a.write_text(areas)
    return u, a


def test_corn_shape(corn):
    assert (corn.m, corn.n, corn.p) == (12, 37, 3)
    assert corn.n_i.sum() == 37
    assert np.all(corn.X[:, 0] == 1.0) and np.all(corn.xbar[:, 0] == 1.0)


def test_corn_flagged_outlier(corn, corn_reduced):
    i = np.flatnonzero((corn.area == CORN_OUTLIER[0] - 1) & (corn.unit_id == CORN_OUTLIER[1]))
    assert corn.y[i].tolist() == [88.59]
    assert corn_reduced.n == 36
    # the county has two segments reporting 88.59; only segment 2 is dropped
    assert np.count_nonzero(corn_reduced.y == 88.59) == 1
    assert not np.any((corn_reduced.X[:, 1] == 340) & (corn_reduced.X[:, 2] == 87))


def test_single_area_loads(tmp_path):
    u, a = write(tmp_path, "area_id,unit_id,y\n1,1,3.5\n", "area_id,N\n1,10\n")
    d = load_dataset(u, a)
    assert (d.m, d.n, d.p) == (1, 1, 1)
    with pytest.raises(DatasetError):
        d.require_areas(3)


def test_missing_area_is_named(tmp_path):
    u, a = write(tmp_path, "area_id,unit_id,y,x1\n1,1,3,1\n7,1,2,2\n", "area_id,N,xbar1\n1,10,1.5\n")
    with pytest.raises(DatasetError, match="area_id 7"):
        load_dataset(u, a)


def test_errors_are_aggregated(tmp_path):
    u, a = write(
        tmp_path,
        "area_id,unit_id,y,x1\n1,1,abc,1\n1,2,2\n1,3,1,1\n1,4,1,1\n",
        "area_id,N,xbar1\n1,2,1.5\n",
    )
    with pytest.raises(DatasetError) as info:
        load_dataset(u, a)
    assert len(info.value.errors) >= 2


def test_sample_exceeding_population(tmp_path):
    u, a = write(tmp_path, "area_id,unit_id,y\n1,1,1\n1,2,2\n", "area_id,N\n1,1\n")
    with pytest.raises(DatasetError, match="exceeds"):
        load_dataset(u, a)


def test_residual_examples():
    assert residual(UnitRecord(1, 1, 5.0, (1.0, 2.0)), [1, 1], [2.0]) == 0.0
    assert residual(UnitRecord(1, 1, 5.0, (1.0, 2.0)), [0, 0], [0.0]) == 5.0
    # intercept-only model whose fitted mean is 120
    assert residual(UnitRecord(1, 2, 88.59, (1.0,)), [120.0], [0.0]) == pytest.approx(-31.41)
    with pytest.raises(ValueError):
        residual(UnitRecord(1, 1, 5.0, (1.0, 2.0)), [1.0], [0.0])


def test_theta_examples():
    assert theta(AreaInfo(1, 10, 2, (1.0, 1.0)), [1, 1], 0.0) == 2.0
    assert theta(AreaInfo(1, 10, 2, (1.0, 0.0)), [3.5, -17.0], 0.25) == 3.75
    g = np.random.default_rng(0)
    xb, v = g.normal(1, 1), g.normal()
    assert theta(AreaInfo(1, 200, 4, (1.0, xb)), [1, 1], v) == pytest.approx(1 + xb + v)
    with pytest.raises(ValueError):
        theta(AreaInfo(1, 10, 2, (1.0, 1.0)), [1.0], 0.0)


def test_compose_examples():
    assert compose_area_mean(AreaInfo(1, 2, 1, (1.0,)), 4.0, [6.0]) == 5.0
    assert compose_area_mean(AreaInfo(1, 3, 3, (1.0,)), 6.0, []) == 2.0
    g = np.random.default_rng(1)
    y = np.where(g.random(200) < 0.9, g.normal(0, 1, 200), g.normal(0, 5, 200))
    got = compose_area_mean(AreaInfo(1, 200, 4, (1.0,)), y[:4].sum(), y[4:])
    assert got == pytest.approx(sum(y.tolist()) / 200, rel=1e-14)
    with pytest.raises(ValueError):
        compose_area_mean(AreaInfo(1, 3, 1, (1.0,)), 1.0, [1.0])


@settings(max_examples=60, deadline=None)
@given(
    y=finite,
    x=arrays(float, 3, elements=finite),
    b1=arrays(float, 3, elements=finite),
    b2=arrays(float, 3, elements=finite),
    v=arrays(float, 2, elements=finite),
)
def test_residual_linear(y, x, b1, b2, v):
    r = UnitRecord(2, 1, y, tuple(x))
    lhs = residual(r, b1 + b2, v)
    rhs = residual(r, b1, v) + residual(r, b2, np.zeros(2)) - y
    scale = 1 + abs(y) + np.abs(x) @ (np.abs(b1) + np.abs(b2)) + np.abs(v).max()
    assert abs(lhs - rhs) <= 1e-12 * scale


@settings(max_examples=60, deadline=None)
@given(xb=arrays(float, 3, elements=finite), b=arrays(float, 3, elements=finite))
def test_theta_without_effect_is_linear_predictor(xb, b):
    assert theta(AreaInfo(1, 5, 1, tuple(xb)), b, 0.0) == float(np.dot(xb, b))


@settings(max_examples=60, deadline=None)
@given(draws=st.lists(finite, min_size=1, max_size=30), data=st.data())
def test_compose_permutation_invariant(draws, data):
    perm = data.draw(st.permutations(draws))
    a = AreaInfo(1, len(draws) + 2, 2, (1.0,))
    assert compose_area_mean(a, 3.0, draws) == compose_area_mean(a, 3.0, perm)


@settings(max_examples=25, deadline=None)
@given(
    n_i=st.lists(st.integers(1, 4), min_size=1, max_size=5),
    seed=st.integers(0, 2**32 - 1),
    k=st.integers(0, 2),
)
def test_csv_round_trip(tmp_path_factory, n_i, seed, k):
    g = np.random.default_rng(seed)
    m, n = len(n_i), sum(n_i)
    area = np.repeat(np.arange(m), n_i)
    X = np.column_stack([np.ones(n), g.normal(0, 1e3, (n, k))])
    xbar = np.column_stack([np.ones(m), g.normal(0, 1e3, (m, k))])
    d = SurveyDataset(g.normal(0, 1e4, n), X, area, np.arange(1, n + 1), np.array(n_i) + g.integers(0, 9, m), xbar)
    tmp = tmp_path_factory.mktemp("rt")
    save_dataset(d, tmp / "u.csv", tmp / "a.csv")
    e = load_dataset(tmp / "u.csv", tmp / "a.csv")
    for name in ("y", "X", "area", "unit_id", "N", "xbar", "n_i"):
        assert np.array_equal(getattr(d, name), getattr(e, name)), name


def test_dataset_is_read_only(corn):
    with pytest.raises(ValueError):
        corn.y[0] = 1.0


def test_drop_units_and_with_y(corn):
    d = corn.drop_units(corn.area == 0)
    assert d.n_i[0] == 0 and d.m == corn.m
    assert np.array_equal(corn.with_y(corn.y * 2).y, corn.y * 2)
