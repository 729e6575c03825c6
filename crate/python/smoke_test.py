"""Quick check that the extension module imports and its core calls agree
with values computed independently here.

    cd crates/python && maturin develop --release
    python python/smoke_test.py
"""
import math

import dipsgnn


def main():
    eps = 2.0
    c = dipsgnn.pm_range_constant(eps)
    assert abs(c - (1 + 2 / math.expm1(eps / 2))) < 1e-12, c

    draws = dipsgnn.perturb_number([0.0] * 20000, eps, seed=7)
    assert all(abs(v) <= c + 1e-12 for v in draws)
    assert abs(sum(draws) / len(draws)) < 0.05
    assert dipsgnn.perturb_number([0.3, -0.2], eps, seed=1) == dipsgnn.perturb_number([0.3, -0.2], eps, seed=1)

    bits = dipsgnn.perturb_onehot([0.0, 1.0, 0.0, 0.0], 1.0, seed=3)
    assert len(bits) == 4 and set(bits) <= {0.0, 1.0}
    assert dipsgnn.select_k(10, 20.0) == 8

    spec = dipsgnn.PrivacySpec(20.0, 5.0, 1e-5)
    sigma = dipsgnn.calibrate_sigma(5.0, 1e-5)
    assert spec.sigma == sigma and abs(sigma - 1.054) < 5e-3, spec
    assert abs(dipsgnn.epsilon2(sigma, 1e-5) - 5.0) < 1e-9
    assert abs(spec.recomputed_epsilon2() - 5.0) < 1e-9
    assert dipsgnn.PrivacySpec(20.0, math.inf, 1e-5).sigma == 0.0
    assert dipsgnn.rdp_to_dp(1.0, sigma, 1e-5) <= 5.0 + 1e-6
    assert abs(dipsgnn.delta_default(100) - 0.009) < 1e-15

    g = dipsgnn.build_graph([4, 2, 4, 7])
    assert g["node_items"] == [4, 2, 7] and g["positions"] == [0, 1, 0, 2]
    assert g["a_out"] == [[0, 1, 1], [1, 0, 0], [0, 0, 0]]

    clipped = dipsgnn.clip_rows([[3.0, 4.0], [0.0, 0.0]], 1.0)
    assert all(abs(a - b) < 1e-12 for a, b in zip(clipped[0], [0.6, 0.8])) and clipped[1] == [0.0, 0.0]

    ranked = dipsgnn.rank_items([0.1, 0.9, 0.5])
    assert ranked == [1, 2, 0]
    assert dipsgnn.recall_at_k(ranked, 2, 2) == 1.0
    assert dipsgnn.mrr_at_k(ranked, 2, 2) == 0.5

    config = """
methods = ["nonprivate"]
seeds = [1]
[synthetic]
kind = "cycle"
users = 20
items = 30
length = 8
[split]
max_len = 3
[model]
item_dim = 8
user_dim = 4
[training]
epochs = 2
learning_rate = 0.01
batch_size = 16
"""
    rows = dipsgnn.run_experiment(config)
    assert rows and all(0.0 <= r["value"] <= 100.0 for r in rows)
    assert rows == dipsgnn.run_experiment(config)
    print(f"dipsgnn {dipsgnn.__version__}: {len(rows)} report rows, sigma(5, 1e-5) = {sigma:.6f}")
    print("smoke test passed")


if __name__ == "__main__":
    main()
