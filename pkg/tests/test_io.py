import json
import math

import numpy as np
import pytest

from rsjd.filter import run_filter
from rsjd.hjb import Grid, policy_iteration
from rsjd.io import (load_checkpoint, read_csv, save_checkpoint, to_jsonable, write_csv, write_filter, write_path,
                     write_report, write_value_grid)
from rsjd.sim import simulate_path


@pytest.fixture
def solved(jmodel):
    g = Grid(2.0, 21, 0.05, 1.0)
    return g, policy_iteration(g, jmodel)


def test_csv_round_trip_is_exact(tmp_path, rng):
    rows = rng.normal(size=(20, 3)) * 10.0 ** rng.integers(-12, 12, size=(20, 3))
    p = write_csv(tmp_path / "a.csv", "path", ["a", "b", "c"], rows)
    assert p.read_text().splitlines()[0] == "# rsjd path v1"
    cols, back = read_csv(p, "path")
    assert cols == ["a", "b", "c"]
    assert np.array_equal(back, rows)


def test_schema_checked(tmp_path):
    p = write_csv(tmp_path / "a.csv", "path", ["a"], [[1.0]])
    with pytest.raises(ValueError, match="schema"):
        read_csv(p, "filter")


def test_value_grid(tmp_path, solved):
    g, res = solved
    p = write_value_grid(tmp_path / "v.csv", res.values, res.policy, t_stride=5)
    cols, data = read_csv(p, "value_grid")
    assert cols == ["t", "x1", "phi_tilde", "phi", "h1", "h2"]
    assert data.shape == (5 * 21, 6)
    first = data[data[:, 0] == 0.0]
    np.testing.assert_array_equal(first[:, 2], res.values.values[0])
    np.testing.assert_array_equal(first[:, 4:], res.policy.h[0])


def test_checkpoint_round_trip(tmp_path, solved):
    g, res = solved
    p = save_checkpoint(tmp_path / "c.npz", res.values, res.policy, note="x", h=np.ones(2))
    vals, pol, extra = load_checkpoint(p)
    assert np.array_equal(vals.values, res.values.values)
    assert np.array_equal(pol.h, res.policy.h)
    assert vals.grid.shape == g.shape and vals.grid.dt == g.dt
    assert extra == {"note": "x", "h": [1.0, 1.0]}


def test_path_dump(tmp_path, jmodel):
    sp = simulate_path(jmodel, [0.2, 0.1], seed=1, dt=0.1)
    cols, data = read_csv(write_path(tmp_path / "p.csv", sp), "path")
    assert cols == ["t", "X1", "S1", "S2", "V", "chi"]
    np.testing.assert_array_equal(data[:, 4], sp.V)


def test_filter_dump(tmp_path, dmodel):
    t = np.linspace(0, 1, 11)
    fr = run_filter(dmodel, np.zeros((3, 10, 2)), t, [0.1], [[0.04]])
    with pytest.raises(ValueError):
        write_filter(tmp_path / "f.csv", fr)
    cols, data = read_csv(write_filter(tmp_path / "f.csv", fr, 1), "filter")
    assert cols == ["t", "x_hat1", "P11", "dU1", "dU2"]
    assert np.all(np.isnan(data[0, 3:])) and not np.any(np.isnan(data[1:]))


def test_report_json(tmp_path):
    p = write_report(tmp_path / "r.json", {"a": np.float64(1.5), "b": np.arange(3), "c": math.inf,
                                           "d": np.bool_(True)})
    assert json.loads(p.read_text()) == {"a": 1.5, "b": [0, 1, 2], "c": "inf", "d": True}
    assert to_jsonable((np.int64(2),)) == [2]
