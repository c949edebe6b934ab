"""Gating, responsibilities, the mixture NLL, frozen-routing sampling.

Besides the spec'd arithmetic cases, the NLL gradients are cross-checked
against closed forms derived by hand for constant-output nets:
d(nll)/d(expert output) = mean_i gamma_ik (u_k - u*_i) / sigma^2 and
d(nll)/d(gate logit) = mean_i (pi_k - gamma_ik).
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moeflow import datasets, flow, moefm, nnet
from moeflow.errors import (
    DimensionMismatchError,
    IntegrationError,
    NonFiniteError,
    ValidationError,
)
from moeflow.flow import TrainBatch
from moeflow.moefm import MoeFlowModel, MoeTrainConfig


def const_net(vec, out_of=2):
    vec = np.asarray(vec, dtype=np.float64)
    sizes = (out_of + nnet.TIME_EMBED_WIDTH, len(vec))
    return nnet.MlpNet(sizes, [np.zeros(sizes)], [vec.copy()])


def const_model(expert_vecs, gate_logits, sigma=0.1, dim=2):
    """Experts and gate that ignore (z, t): biases carry the outputs."""
    experts = [const_net(v, out_of=dim) for v in expert_vecs]
    gate = const_net(gate_logits, out_of=dim)
    return MoeFlowModel(experts, gate, sigma)


def batch_from(z_t, t, u_star):
    z_t = np.atleast_2d(np.asarray(z_t, dtype=np.float64))
    u_star = np.atleast_2d(np.asarray(u_star, dtype=np.float64))
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    # Reverse-engineer a consistent (z0, z1) pair: z1 = z_t + (1-t) u*,
    # z0 = z1 - u*.
    z1 = z_t + (1 - t)[:, None] * u_star
    z0 = z1 - u_star
    return TrainBatch(z0, z1, t, z_t, u_star)


def test_gating_uniform_for_zero_gate():
    model = const_model([(0.0, 0.0)] * 4, np.zeros(4))
    pi = moefm.gating(model, np.zeros(2), 0.3)
    np.testing.assert_allclose(pi, np.full(4, 0.25), atol=1e-15)


def test_gating_k1_and_softmax_case():
    model = const_model([(0.0, 0.0)], np.zeros(1))
    np.testing.assert_allclose(moefm.gating(model, np.zeros(2), 0.0), [1.0])
    model = const_model([(0.0, 0.0)] * 2, np.array([np.log(3.0), 0.0]))
    np.testing.assert_allclose(
        moefm.gating(model, np.ones(2), 0.5), [0.75, 0.25], atol=1e-15
    )


def test_gating_simplex_on_random_model():
    model = moefm.init_moe_model(2, 5, seed=3)
    # random gate output layer (init zeroes it for uniform start)
    rng = np.random.default_rng(0)
    model.gate.weights[-1][:] = rng.normal(size=model.gate.weights[-1].shape)
    model.gate.biases[-1][:] = rng.normal(size=5)
    pi = moefm.gating(model, rng.normal(size=(40, 2)), 0.5)
    assert pi.shape == (40, 5)
    assert np.all(pi >= 0)
    np.testing.assert_allclose(pi.sum(axis=1), 1.0, atol=1e-9)


def test_responsibilities_symmetric_experts():
    model = const_model([(1.0, 0.0), (1.0, 0.0)], np.zeros(2))
    gamma = moefm.responsibilities(model, np.zeros(2), 0.2, np.array([3.0, -1.0]))
    np.testing.assert_allclose(gamma, [0.5, 0.5], atol=1e-15)


def test_responsibilities_degenerate_routing():
    # Routing mass pi_2 = e^-6000 (zero to double precision) must dominate
    # even though expert 2 sits exactly on u* and expert 1 is far away: the
    # kernel prefers expert 2 by a factor e^2500, far short of the routing
    # penalty. gamma underflows to exactly (1, 0).
    model = const_model([(5.0, 5.0), (0.0, 0.0)], np.array([3000.0, -3000.0]))
    gamma = moefm.responsibilities(model, np.zeros(2), 0.2, np.zeros(2))
    np.testing.assert_array_equal(gamma, [1.0, 0.0])


def test_responsibilities_frozen_distance_case():
    # distances 0 and 1 at sigma=0.1: gamma_1 = 1 / (1 + e^-50).
    model = const_model([(0.0, 0.0), (1.0, 0.0)], np.zeros(2), sigma=0.1)
    gamma = moefm.responsibilities(model, np.zeros(2), 0.5, np.zeros(2))
    assert gamma[0] == pytest.approx(1.0 / (1.0 + np.exp(-50.0)), rel=1e-14)
    assert gamma[1] == pytest.approx(np.exp(-50.0) / (1.0 + np.exp(-50.0)), rel=1e-14)


def test_responsibilities_rejects_bad_inputs():
    model = const_model([(0.0, 0.0)] * 2, np.zeros(2))
    with pytest.raises(NonFiniteError):
        moefm.responsibilities(model, np.zeros(2), 0.5, np.array([np.nan, 0.0]))
    with pytest.raises(DimensionMismatchError):
        moefm.responsibilities(model, np.zeros(2), 0.5, np.zeros(3))


def test_moefm_nll_k1_closed_form():
    # K=1: per-row loss is exactly d^2 / (2 sigma^2).
    sigma = 0.1
    model = const_model([(0.5, 0.0)], np.zeros(1), sigma=sigma)
    batch = batch_from([(0.0, 0.0)], [0.5], [(1.5, 0.0)])  # d = 1.0
    assert moefm.moefm_nll(model, batch) == pytest.approx(1.0 / (2 * sigma**2), rel=1e-12)
    perfect = const_model([(1.5, 0.0)], np.zeros(1), sigma=sigma)
    assert moefm.moefm_nll(perfect, batch) == pytest.approx(0.0, abs=1e-15)


def test_moefm_nll_two_perfect_experts():
    batch = batch_from([(0.0, 0.0)], [0.5], [(1.0, 2.0)])
    model = const_model([(1.0, 2.0), (1.0, 2.0)], np.zeros(2))
    assert moefm.moefm_nll(model, batch) == pytest.approx(0.0, abs=1e-12)


def test_moefm_nll_non_finite_row_reported():
    model = const_model([(0.0, 0.0)], np.zeros(1))
    batch = batch_from([(0.0, 0.0), (0.0, 0.0)], [0.5, 0.5], [(1.0, 0.0), (2.0, 0.0)])
    batch.u_star[1, 0] = np.nan  # corrupt one row after validation
    with pytest.raises(NonFiniteError) as err:
        moefm.moefm_nll(model, batch)
    assert err.value.where == 1


@settings(max_examples=25, deadline=None)
@given(
    st.lists(st.floats(-5, 5), min_size=4, max_size=4),
    st.lists(st.floats(-3, 3), min_size=2, max_size=2),
    st.lists(st.floats(-2, 2), min_size=2, max_size=2),
)
def test_moefm_nll_nonnegative(expert_flat, logits, u_star):
    # Exponents are <= 0 and the pis sum to 1, so the log argument is <= 1.
    model = const_model(
        [expert_flat[:2], expert_flat[2:]], np.asarray(logits), sigma=0.5
    )
    batch = batch_from([(0.1, -0.2)], [0.4], [u_star])
    assert moefm.moefm_nll(model, batch) >= 0.0


def test_k1_equivalence_with_vfm():
    sigma = 0.1
    spec = datasets.grid_spec()
    rng = np.random.default_rng(0)
    net = nnet.field_net(2, 2, hidden_width=16, hidden_layers=2, seed=5)
    gate = nnet.field_net(2, 1, hidden_width=4, hidden_layers=1, seed=6)
    model = MoeFlowModel([net], gate, sigma)
    for _ in range(10):
        batch = flow.make_batch(spec, 32, rng)
        nll = moefm.moefm_nll(model, batch)
        mse = flow.vfm_loss(net, batch)
        assert nll == pytest.approx(mse / (2 * sigma**2), abs=1e-9)
        _, (expert_g,), _ = moefm.moefm_nll_gradients(model, batch)
        _, vfm_g = flow.vfm_loss_gradients(net, batch)
        a = np.concatenate([g.ravel() for g in expert_g])
        b = np.concatenate([g.ravel() for g in vfm_g])
        cos = a @ b / (np.linalg.norm(a) * np.linalg.norm(b))
        assert cos == pytest.approx(1.0, abs=1e-9)


def test_nll_gradients_match_hand_formulas():
    # Constant nets: the only parameter the output depends on is the final
    # bias, so its gradient equals the derivative w.r.t. the output itself.
    sigma = 0.3
    model = const_model([(0.8, -0.2), (-0.5, 0.4)], np.array([0.3, -0.1]), sigma=sigma)
    z_t = np.array([[0.0, 0.0], [0.5, -0.5], [1.0, 0.2]])
    t = np.array([0.2, 0.5, 0.7])
    u_star = np.array([[1.0, 0.0], [-0.4, 0.3], [0.2, 0.2]])
    batch = batch_from(z_t, t, u_star)
    n = len(batch)

    value, expert_grads, gate_grads = moefm.moefm_nll_gradients(model, batch)
    gamma = moefm.responsibilities(model, z_t, t, u_star)
    pi = moefm.gating(model, z_t, t)

    for k, ex_g in enumerate(expert_grads):
        u_k = np.array(model.experts[k].biases[-1])
        want = (gamma[:, [k]] * (u_k[None, :] - u_star)).mean(axis=0) / sigma**2
        np.testing.assert_allclose(ex_g[-1], want, rtol=1e-10, atol=1e-12)

    want_gate = (pi - gamma).mean(axis=0)
    np.testing.assert_allclose(gate_grads[-1], want_gate, rtol=1e-10, atol=1e-12)


def test_nll_gradients_match_finite_differences():
    spec = datasets.grid_spec()
    batch = flow.make_batch(spec, 12, np.random.default_rng(4))
    model = moefm.init_moe_model(2, 3, sigma=0.1, hidden_width=5, hidden_layers=1, seed=8)
    value, expert_grads, gate_grads = moefm.moefm_nll_gradients(model, batch)
    params = moefm._model_params(model)
    grads = [g for eg in expert_grads for g in eg] + gate_grads
    step = 1e-4
    rng = np.random.default_rng(1)
    for _ in range(12):
        pi_idx = rng.integers(len(params))
        flat = params[pi_idx].reshape(-1)
        idx = rng.integers(flat.size)
        orig = flat[idx]
        flat[idx] = orig + step
        up = moefm.moefm_nll(model, batch)
        flat[idx] = orig - step
        down = moefm.moefm_nll(model, batch)
        flat[idx] = orig
        fd = (up - down) / (2 * step)
        got = grads[pi_idx].reshape(-1)[idx]
        assert abs(fd - got) / max(abs(fd), abs(got), 1e-8) < 1e-4


def test_train_moefm_separates_two_point_target():
    spec = datasets.explicit_spec([(0.5, -1.0, 0.0), (0.5, 1.0, 0.0)], dim=1)
    cfg = MoeTrainConfig(
        steps=500, batch_size=128, hidden_width=32, hidden_layers=2,
        k=2, sigma=0.1, seed=0, log_every=0,
    )
    result = moefm.train_moefm(spec, cfg)
    assert result.losses[-20:].mean() < result.losses[:20].mean()
    probe = np.array([[0.0]])
    u0 = nnet.forward(result.model.experts[0], probe, 0.0)[0, 0]
    u1 = nnet.forward(result.model.experts[1], probe, 0.0)[0, 0]
    assert abs(u0 - u1) > 0.5
    # held-out responsibilities stay on the simplex
    assert result.utilization.sum() == pytest.approx(1.0, abs=1e-9)
    assert np.all(result.utilization >= 0)


def test_frozen_routing_k1_bitwise_matches_euler():
    model = moefm.init_moe_model(2, 1, hidden_width=8, hidden_layers=1, seed=2)
    z0 = np.array([0.3, -0.9])
    traj = moefm.frozen_routing_sample(model, z0, 4, mode="greedy")
    ref = flow.euler_sample(model.experts[0], z0, 4)
    np.testing.assert_array_equal(traj.states, ref.states)
    assert traj.expert_id == 0


def test_frozen_routing_uses_only_chosen_expert():
    model = const_model([(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0)], np.array([0.0, 50.0, 0.0]))
    z0 = np.array([0.2, 0.2])
    traj = moefm.frozen_routing_sample(model, z0, 3, mode="greedy")
    assert traj.expert_id == 1
    # Perturb the other experts: trajectory must not change.
    model.experts[0].biases[-1][:] = 99.0
    model.experts[2].biases[-1][:] = -99.0
    again = moefm.frozen_routing_sample(model, z0, 3, mode="greedy")
    np.testing.assert_array_equal(traj.states, again.states)
    # Standalone re-integration of the recorded expert reproduces it.
    ref = flow.euler_sample(model.experts[1], z0, 3)
    np.testing.assert_array_equal(traj.states, ref.states)


def test_frozen_routing_sampled_needs_rng():
    model = moefm.init_moe_model(2, 2, hidden_width=4, hidden_layers=1)
    with pytest.raises(ValidationError):
        moefm.frozen_routing_sample(model, np.zeros(2), 2, mode="sampled")


def test_choose_expert_greedy_tie_breaks_low():
    assert moefm.choose_expert(np.array([0.4, 0.4, 0.2]), "greedy", None) == 0


def test_generate_frequencies_match_routing():
    model = moefm.init_moe_model(2, 4, hidden_width=8, hidden_layers=1, seed=1)
    rng = np.random.default_rng(3)
    model.gate.weights[-1][:] = 0.3 * rng.normal(size=model.gate.weights[-1].shape)
    model.gate.biases[-1][:] = np.array([0.5, -0.2, 0.1, -0.4])
    n = 1000
    samples, ids = moefm.generate(model, n, t_steps=2, mode="sampled", seed=17)
    z0 = np.stack([np.random.default_rng([17, i]).standard_normal(2) for i in range(n)])
    mean_pi = moefm.gating(model, z0, 0.0).mean(axis=0)
    freq = np.bincount(ids, minlength=4) / n
    se = np.sqrt(mean_pi * (1 - mean_pi) / n)
    assert np.all(np.abs(freq - mean_pi) <= 3 * se + 1e-12)


def test_generate_t1_is_single_euler_step():
    model = moefm.init_moe_model(2, 2, hidden_width=8, hidden_layers=1, seed=4)
    model.gate.biases[-1][:] = np.array([2.0, -2.0])
    samples, ids = moefm.generate(model, 64, t_steps=1, mode="greedy", seed=5)
    z0 = np.stack([np.random.default_rng([5, i]).standard_normal(2) for i in range(64)])
    for k in range(2):
        idx = np.flatnonzero(ids == k)
        if idx.size == 0:
            continue
        ref = z0[idx] + nnet.forward(model.experts[k], z0[idx], 0.0)
        np.testing.assert_array_equal(samples.points[idx], ref)


def test_generate_deterministic_and_thread_independent(monkeypatch):
    model = moefm.init_moe_model(2, 3, hidden_width=8, hidden_layers=1, seed=6)
    a, ids_a = moefm.generate(model, 40, t_steps=2, mode="sampled", seed=9)
    b, ids_b = moefm.generate(model, 40, t_steps=2, mode="sampled", seed=9)
    np.testing.assert_array_equal(a.points, b.points)
    np.testing.assert_array_equal(ids_a, ids_b)
    monkeypatch.setenv("MOEFLOW_THREADS", "3")
    c, ids_c = moefm.generate(model, 40, t_steps=2, mode="sampled", seed=9)
    np.testing.assert_array_equal(a.points, c.points)
    np.testing.assert_array_equal(ids_a, ids_c)


def test_generate_reports_failed_sample_indices():
    model = const_model([(1.0, 0.0), (0.0, 1.0)], np.zeros(2))
    model.experts[1].biases[-1][0] = np.nan
    with pytest.raises(IntegrationError) as err:
        moefm.generate(model, 20, t_steps=2, mode="sampled", seed=0)
    assert len(err.value.sample_indices) > 0


def test_generation_csv_round_trip(tmp_path):
    model = moefm.init_moe_model(2, 2, hidden_width=4, hidden_layers=1, seed=0)
    samples, ids = moefm.generate(model, 10, t_steps=2, mode="greedy", seed=1)
    path = tmp_path / "gen.csv"
    moefm.save_generation_csv(path, samples, ids)
    text = path.read_text()
    assert text.splitlines()[0] == "sample_id,expert_id,x0,x1"
    pts, back_ids = moefm.load_generation_csv(path)
    np.testing.assert_allclose(pts, samples.points, atol=5e-10)
    np.testing.assert_array_equal(back_ids, ids)


def test_model_validation():
    with pytest.raises(ValidationError):
        MoeFlowModel([], const_net(np.zeros(2)), 0.1)
    with pytest.raises(ValidationError):
        const_model([(0.0, 0.0)], np.zeros(1), sigma=0.0)
    with pytest.raises(DimensionMismatchError):
        # gate emits 3 logits for 2 experts
        MoeFlowModel([const_net(np.zeros(2)), const_net(np.zeros(2))], const_net(np.zeros(3)), 0.1)
    with pytest.raises(ValidationError):
        MoeTrainConfig(k=0)
