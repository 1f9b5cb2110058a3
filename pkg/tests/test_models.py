import math

import numpy as np
import pytest

from svsl_lab.models import (
    AdamOptimizer,
    LagrangeState,
    RewardVectorModel,
    ValueSystemBank,
    ce_from_logits,
    ce_loss,
    grounding_loss_grad,
    jsd_bernoulli,
    per_agent_row_weights,
    smoothed_label,
    softmax_weights,
    value_system_loss_grad,
)


def test_softmax_weights():
    assert np.allclose(softmax_weights([0.0, 0.0]), [0.5, 0.5])
    assert np.allclose(softmax_weights([math.log(3.0), 0.0]), [0.75, 0.25])
    big = softmax_weights([1000.0, 0.0])
    assert np.isfinite(big).all() and abs(big[0] - 1.0) < 1e-12
    rng = np.random.default_rng(0)
    for _ in range(20):
        w = softmax_weights(rng.normal(size=4))
        assert abs(w.sum() - 1.0) < 1e-12
        assert np.all(w > 0.0)


def test_smoothed_label():
    assert smoothed_label(1.0) == 0.9
    assert smoothed_label(0.0) == pytest.approx(0.1)
    assert smoothed_label(0.5) == 0.5
    with pytest.raises(ValueError):
        smoothed_label(0.9)  # smoothing twice is rejected
    with pytest.raises(ValueError):
        smoothed_label([0.0, 0.7])


def test_ce_loss_values():
    assert abs(ce_loss(0.5, 0.5) - math.log(2.0)) < 1e-12
    expected = -0.9 * math.log(0.9) - 0.1 * math.log(0.1)
    assert abs(ce_loss(0.9, 0.9) - expected) < 1e-12
    # minimized at p = y
    ps = np.linspace(0.01, 0.99, 99)
    losses = [ce_loss(p, 0.9) for p in ps]
    assert ps[int(np.argmin(losses))] == pytest.approx(0.9, abs=0.01)
    with pytest.warns(UserWarning):
        ce_loss(1.5, 0.9)


def test_ce_from_logits_matches_direct():
    rng = np.random.default_rng(1)
    logits = rng.normal(scale=3.0, size=50)
    targets = rng.uniform(size=50)
    p = 1.0 / (1.0 + np.exp(-logits))
    direct = -targets * np.log(p) - (1.0 - targets) * np.log(1.0 - p)
    assert np.allclose(ce_from_logits(logits, targets), direct, atol=1e-12)


def test_jsd_bernoulli():
    assert jsd_bernoulli(0.37, 0.37) == 0.0
    val = jsd_bernoulli(0.9, 0.1)
    expected = 0.9 * math.log(1.8) + 0.1 * math.log(0.2)
    assert abs(val - expected) < 1e-12
    assert jsd_bernoulli(0.8, 0.3) == jsd_bernoulli(0.3, 0.8)
    assert 0.0 <= jsd_bernoulli(0.999, 0.001) <= math.log(2.0)


def test_per_agent_row_weights():
    w = per_agent_row_weights(np.array([0, 0, 0, 1]))
    # two agents weighted equally regardless of row counts
    assert np.allclose(w, [1 / 6, 1 / 6, 1 / 6, 1 / 2])
    assert w.sum() == pytest.approx(1.0)


def test_adam_converges_on_quadratic():
    # f(x) = 0.5 * sum((x - target)^2), no weight decay so the optimum is exact
    target = np.array([1.0, -2.0, 0.5])
    opt = AdamOptimizer(3, lr=0.05, weight_decay=0.0)
    x = np.zeros(3)
    for _ in range(2000):
        x = opt.step(x, x - target)
    assert np.max(np.abs(x - target)) < 1e-6


def test_tabular_model_bounds_and_gradient_at_zero():
    model = RewardVectorModel(num_cells=10, num_values=2)
    table = model.table()
    assert np.all(table == 0.0)
    upstream = np.arange(20.0).reshape(10, 2)
    grad = model.backward(upstream)
    # tanh'(0) = 1, so the gradient passes through unchanged
    assert np.allclose(grad, upstream.reshape(-1))
    model.set_params(np.random.default_rng(0).normal(size=20) * 5)
    assert np.all(np.abs(model.table()) < 1.0)


def _random_instance(rng, n_traj=6, n_rows=12, m=2, n_clusters=3):
    deltas_rows = rng.normal(size=(n_rows, m))
    label_pool = np.array([0.0, 0.5, 1.0])
    y_values = rng.choice(label_pool, size=(n_rows, m))
    y_vs = rng.choice(label_pool, size=n_rows)
    agents = rng.integers(0, 3, size=n_rows)
    row_cluster = rng.integers(0, n_clusters, size=n_rows)
    return deltas_rows, y_values, y_vs, agents, row_cluster


def _model_loss(model, counts, pairs, compute):
    """Evaluate a loss that depends on params through the alignment deltas."""
    table = model.table()
    align = counts @ table
    deltas = align[pairs[:, 0]] - align[pairs[:, 1]]
    return compute(deltas)


@pytest.mark.parametrize("mode", ["tabular-tanh", "mlp"])
def test_gradients_match_finite_differences(mode):
    rng = np.random.default_rng(100)
    num_cells, m = 8, 2
    features = np.eye(num_cells)
    for _ in range(4):
        model = RewardVectorModel(num_cells, m, mode=mode, features=features, rng=rng)
        if mode == "tabular-tanh":
            model.set_params(rng.normal(size=model.n_params))
        counts = rng.poisson(1.0, size=(5, num_cells)).astype(float)
        pairs = rng.integers(0, 5, size=(10, 2))
        _, y_values, y_vs, agents, row_cluster = _random_instance(rng, n_rows=10)
        bank = ValueSystemBank(3, m, rng=rng)
        weights = bank.weights()
        live = [0, 1, 2]
        probe = rng.normal(size=m)

        def full_loss(params_vec, omega_vec):
            model.set_params(params_vec)
            bank.set_omega(omega_vec.reshape(3, m))
            w = bank.weights()
            table = model.table()
            align = counts @ table
            deltas = align[pairs[:, 0]] - align[pairs[:, 1]]
            lv, _ = grounding_loss_grad(deltas, y_values, agents)
            lvs, _, _ = value_system_loss_grad(
                deltas, y_vs, agents, w, row_cluster, live
            )
            return lvs + probe @ lv  # composite with a fixed probe direction

        # analytic gradient
        base_params = model.params.copy()
        base_omega = bank.omega.copy()
        model.set_params(base_params)
        bank.set_omega(base_omega)
        w = bank.weights()
        table = model.table()
        align = counts @ table
        deltas = align[pairs[:, 0]] - align[pairs[:, 1]]
        _, d_deltas_v = grounding_loss_grad(deltas, y_values, agents)
        _, d_deltas_vs, d_weights = value_system_loss_grad(
            deltas, y_vs, agents, w, row_cluster, live
        )
        d_deltas = d_deltas_vs + d_deltas_v * probe
        d_align = np.zeros_like(align)
        np.add.at(d_align, pairs[:, 0], d_deltas)
        np.add.at(d_align, pairs[:, 1], -d_deltas)
        d_table = counts.T @ d_align
        model.table()
        g_theta = model.backward(d_table)
        g_omega = bank.backward(d_weights).reshape(-1)

        # relative error < 1e-4 with an absolute floor below FD resolution
        h = 1e-5
        idxs = rng.choice(model.n_params, size=min(20, model.n_params), replace=False)
        for i in idxs:
            up, dn = base_params.copy(), base_params.copy()
            up[i] += h
            dn[i] -= h
            fd = (full_loss(up, base_omega) - full_loss(dn, base_omega)) / (2 * h)
            err = abs(fd - g_theta[i])
            assert err < 1e-9 or err / max(abs(fd), abs(g_theta[i])) < 1e-4
        flat_omega = base_omega.reshape(-1)
        for i in range(len(flat_omega)):
            up, dn = flat_omega.copy(), flat_omega.copy()
            up[i] += h
            dn[i] -= h
            fd = (full_loss(base_params, up) - full_loss(base_params, dn)) / (2 * h)
            err = abs(fd - g_omega[i])
            assert err < 1e-9 or err / max(abs(fd), abs(g_omega[i])) < 1e-4


def test_value_system_loss_single_live_cluster():
    rng = np.random.default_rng(7)
    deltas, y_values, y_vs, agents, _ = _random_instance(rng)
    weights = ValueSystemBank(3, 2, rng=rng).weights()
    row_cluster = np.zeros(len(y_vs), dtype=int)
    loss, _, d_w = value_system_loss_grad(deltas, y_vs, agents, weights, row_cluster, [0])
    # no separation term: loss equals the pure representativeness CE
    w_rows = weights[row_cluster]
    logits = np.einsum("nm,nm->n", deltas, w_rows)
    rw = per_agent_row_weights(agents)
    assert loss == pytest.approx(float(rw @ ce_from_logits(logits, smoothed_label(y_vs))))
    # separation gradient of the unused clusters is exactly zero
    assert np.all(d_w[1:] == 0.0) or np.allclose(d_w[1:], 0.0)


def test_value_system_loss_identical_weights_no_separation():
    rng = np.random.default_rng(8)
    deltas, _, y_vs, agents, _ = _random_instance(rng)
    weights = np.array([[0.4, 0.6], [0.4, 0.6]])
    row_cluster = rng.integers(0, 2, size=len(y_vs))
    loss_two, _, _ = value_system_loss_grad(deltas, y_vs, agents, weights, row_cluster, [0, 1])
    rw = per_agent_row_weights(agents)
    logits = deltas @ weights[0]
    repr_only = float(rw @ ce_from_logits(logits, smoothed_label(y_vs)))
    assert loss_two == pytest.approx(repr_only)  # identical clusters add zero JSD


def test_value_system_loss_scalar_oracle():
    """Hand-built 2-agent, 2-pair instance against a scalar recomputation."""
    deltas = np.array([[1.0, -0.5], [0.2, 0.3]])
    y_vs = np.array([1.0, 0.0])
    agents = np.array([0, 1])
    weights = np.array([[0.7, 0.3], [0.2, 0.8]])
    row_cluster = np.array([0, 1])
    loss, _, _ = value_system_loss_grad(deltas, y_vs, agents, weights, row_cluster, [0, 1])

    def sig(x):
        return 1.0 / (1.0 + math.exp(-x))

    expect_repr = 0.0
    for r in range(2):
        w = weights[row_cluster[r]]
        p = sig(float(w @ deltas[r]))
        y = 0.1 + 0.8 * y_vs[r]
        expect_repr += 0.5 * (-y * math.log(p) - (1 - y) * math.log(1 - p))
    expect_conc = 0.0
    for r in range(2):
        pa = sig(float(weights[0] @ deltas[r]))
        pb = sig(float(weights[1] @ deltas[r]))
        expect_conc += 0.5 * jsd_bernoulli(pa, pb)
    assert loss == pytest.approx(expect_repr - expect_conc, abs=1e-10)


def test_lagrange_state_updates():
    st = LagrangeState(2, initial=1.0, decay=5e-5, rate=0.05)
    maxima = np.array([0.9, 0.5])
    losses = np.array([0.2, 0.4])
    st.update(losses, np.array([0.6, 0.5]), maxima)  # value 0 farthest below max
    assert st.multipliers[0] == pytest.approx((1 - 5e-5) * 1.0 + 0.05 * 0.2)
    assert st.multipliers[1] == pytest.approx(1.0 * (1 - 5e-5))  # at its max: decays
    # exponential weighted maximum: a better batch moves the max by 1%
    st2 = LagrangeState(1, smoothing=0.99)
    maxima2 = np.array([0.8])
    st2.update(np.array([0.0]), np.array([0.9]), maxima2)
    assert maxima2[0] == pytest.approx(0.01 * 0.9 + 0.99 * 0.8)
    st2.update(np.array([0.0]), np.array([0.5]), maxima2)
    assert maxima2[0] == pytest.approx(0.801)  # unchanged by a worse batch

    # multipliers never go negative under any update sequence
    st3 = LagrangeState(2, initial=0.001)
    maxima3 = np.zeros(2)
    rng = np.random.default_rng(0)
    for _ in range(200):
        st3.update(rng.uniform(0, 1, 2), rng.uniform(0, 1, 2), maxima3)
        assert np.all(st3.multipliers >= 0.0)


def test_bank_weights_on_simplex():
    bank = ValueSystemBank(5, 3, rng=np.random.default_rng(2))
    w = bank.weights()
    assert np.allclose(w.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(w > 0.0)


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    from svsl_lab.persist import decode_array, encode_array, load_json, save_json

    rng = np.random.default_rng(3)
    arr = rng.normal(size=(7, 3)) * 1e-7
    blob = {"version": 1, "theta": encode_array(arr)}
    path = tmp_path / "ck.json"
    save_json(path, blob)
    back = decode_array(load_json(path)["theta"])
    assert back.tobytes() == arr.tobytes()
