"""Smoke test for the `jobloss` extension module.

Build the module first, for example with
    maturin develop -m crates/python/Cargo.toml
or
    cargo build --release -p jobloss-py --features extension-module
    cp target/release/libjobloss.so python/jobloss.so
"""

import json
import random
import sys
import tempfile
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent))

import jobloss  # noqa: E402


def close(a, b, tol=1e-12):
    return abs(a - b) <= tol


def check_formulas():
    assert jobloss.growth_metric(0.0, 50.0) == 2.0
    assert close(jobloss.churn_rate(3, 3, 10, 10), 0.6)
    assert close(jobloss.reallocation_rate(3, 4, 9, 10), 6 / 9.5)
    assert close(jobloss.hhi([0.6, 0.3, 0.1]), 0.46)
    assert jobloss.aipw_score(1.0, 1.0, 0.5, 0.5, 0.0) == 1.0
    assert jobloss.insurance_degree(-0.4, 0.0) == 1.0
    try:
        jobloss.growth_metric(0.0, 0.0)
    except ValueError:
        pass
    else:
        raise AssertionError("growth_metric(0, 0) should raise")


def check_policy_tree():
    rng = random.Random(3)
    x = [rng.uniform(-1, 1) for _ in range(200)]
    gamma = [-1.0 if v > 0.2 else 0.5 for v in x]
    tree = json.loads(jobloss.fit_policy_tree([x], ["x"], gamma, cost=0.0, depth=1))
    assert tree["root"]["type"] == "split"
    thr = tree["root"]["threshold"]
    assert abs(thr - 0.2) < 0.05
    assert tree["objective"] == sum(g for v, g in zip(x, gamma) if v > thr)


def check_rate():
    gamma = [float(i % 7) - 3.0 for i in range(300)]
    result = json.loads(jobloss.rate(gamma, gamma, list(range(300)), n_bootstrap=20, seed=1))
    assert result["qini"] < 0
    assert len(result["toc_curve"]) == 50


def check_forest():
    rng = random.Random(11)
    n = 600
    x0 = [rng.uniform(-1, 1) for _ in range(n)]
    x1 = [rng.uniform(-1, 1) for _ in range(n)]
    w = [float(rng.random() < 0.5) for _ in range(n)]
    y = [0.2 * a + wi * (-0.3 + 0.4 * (a > 0)) + rng.gauss(0, 0.1) for a, wi in zip(x0, w)]
    clusters = [i // 4 for i in range(n)]
    params = json.dumps({"num_trees": 100, "seed": 5})
    forest = jobloss.CausalForest.fit([x0, x1], y, w, clusters, ["x0", "x1"], params)
    assert forest.num_trees == 100
    pred = forest.predict([[-0.5, 0.0], [0.5, 0.0]])
    assert pred[0] < pred[1], pred
    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "forest.bin"
        forest.save(str(path))
        again = jobloss.CausalForest.load(str(path))
        assert again.predict([[0.5, 0.0]]) == forest.predict([[0.5, 0.0]])


def check_simulate():
    with tempfile.TemporaryDirectory() as d:
        cfg = {"n_markets": 4, "establishments_per_market": [5, 5], "workers_per_establishment": [4, 4]}
        paths = jobloss.simulate(d, json.dumps(cfg))
        assert all(Path(p).exists() for p in paths)
        assert len(Path(paths[0]).read_text().splitlines()) > 1


if __name__ == "__main__":
    check_formulas()
    check_policy_tree()
    check_rate()
    check_forest()
    check_simulate()
    print("python smoke test passed")
