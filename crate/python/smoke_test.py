"""Smoke test for the regionsel_py extension.

Build and install first:

    maturin build --release -m crates/regionsel-py/Cargo.toml -o dist
    pip install dist/regionsel_py-*.whl

Then run with `python python/smoke_test.py` or `pytest python/`.
"""

import math
import os
import tempfile

import regionsel_py as rs


def test_block_loglik_scalar():
    # one voxel, one subject: y ~ N(eta, nu2 + sigma2 + s2)
    got = rs.block_loglik([0.0], [1.0], 0.0, 1.0, 1.0)
    assert abs(got - (-0.5 * math.log(2 * math.pi * 3))) < 1e-12


def test_sparse_means_count():
    y, truth = rs.gen_sparse_means(5000, 1000, 4.0, 8.0, seed=1)
    assert len(y) == 5000 and sum(truth) == 1000
    r = rs.estimate_count(y)
    assert 700 < r["count"] < 1300
    assert len(r["selected"]) == r["count"]
    g = rs.ggm_fit(y)
    assert 0.0 < g["positive_weight"] < 1.0


def test_baseline():
    t = rs.t_map([3], [[1.0, -1.0, 0.0], [2.0, 1.0, 0.0], [3.0, 0.0, 0.0]])
    assert abs(t[0] - 2 * math.sqrt(3)) < 1e-12
    assert math.isnan(t[2])
    assert rs.adjust_pvalues([0.01, 0.02, 0.9], "bh", 0.05) == [0, 1]


def test_select_on_disc():
    ph = rs.simulate_disc(seed=1)
    regions = rs.select_regions(ph["dims"], ph["effects"], ph["variances"], ph["labels"], seed=1)
    assert [r["region"] for r in regions] == [0, 1]
    assert regions[1]["b"] > 0 and regions[1]["selected"]


def test_cli_passthrough():
    with tempfile.TemporaryDirectory() as d:
        assert rs.run_cli(["simulate", "--phantom", "sparse-means", "--n", "200", "--active", "20", "--out", d]) == 0
        assert os.path.exists(os.path.join(d, "provenance.json"))
        assert rs.run_cli(["select", "--bogus"]) == 2


if __name__ == "__main__":
    for name, fn in list(globals().items()):
        if name.startswith("test_") and callable(fn):
            fn()
            print(f"{name} ok")
