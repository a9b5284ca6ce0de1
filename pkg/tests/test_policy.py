"""Graph policy: sharing, equivariance, hierarchy identity, masking, selection."""

import numpy as np
import pytest

from strac import autodiff as ad
from strac import nn
from strac.policy import (
    ActionId,
    GraphSpec,
    MaskError,
    NetworkConfig,
    PolicyNetwork,
    S_ACTION_COUNT,
    I_ACTION_COUNT,
    _mean_excluding_self,
    _mean_over_senders,
    select_action,
)

SMALL = NetworkConfig(s_state=8, i_state=12, s_msg=4, i_msg=6, n_layers=2)


def make_net(cfg=SMALL, seed=0):
    return PolicyNetwork(cfg, np.random.default_rng(seed))


def random_features(rng, b, n, cfg=SMALL):
    return rng.normal(size=(b, n, cfg.s_feat)), rng.normal(size=(b, cfg.i_feat))


def test_graph_spec_flat_round_trip():
    spec = GraphSpec(n_slots=3)
    assert spec.n_actions == 3 * S_ACTION_COUNT + I_ACTION_COUNT
    seen = set()
    for flat in range(spec.n_actions):
        action = spec.action_at(flat)
        assert spec.flat_index(action) == flat
        seen.add((action.node, action.prim))
    assert len(seen) == spec.n_actions
    # I-node actions occupy the tail of the flat layout
    assert spec.flat_index(ActionId(node=0, prim=0)) == 9


def test_identical_slot_features_share_encoding():
    net = make_net()
    phi = np.random.default_rng(1).normal(size=SMALL.s_feat)
    phi_s = np.stack([phi, phi])[None]          # (1, 2, d)
    h_s, _ = net.encode_inputs(ad.Tensor(phi_s.reshape(2, -1)), ad.Tensor(np.zeros((1, SMALL.i_feat))))
    np.testing.assert_array_equal(h_s.value[0], h_s.value[1])


def test_zero_features_zero_bias_encode_to_zero():
    net = make_net()
    net.input_s.b_mu.value = np.zeros_like(net.input_s.b_mu.value)
    h_s, _ = net.encode_inputs(
        ad.Tensor(np.zeros((2, SMALL.s_feat))), ad.Tensor(np.zeros((1, SMALL.i_feat)))
    )
    np.testing.assert_array_equal(h_s.value, np.zeros_like(h_s.value))


def test_input_encoding_is_local_to_each_slot():
    net = make_net()
    rng = np.random.default_rng(2)
    phi_s, phi_i = random_features(rng, 1, 3)
    base_h, _ = net.encode_inputs(ad.Tensor(phi_s.reshape(3, -1)), ad.Tensor(phi_i))
    changed = phi_s.copy()
    changed[0, 1] += 1.0
    new_h, _ = net.encode_inputs(ad.Tensor(changed.reshape(3, -1)), ad.Tensor(phi_i))
    assert np.array_equal(base_h.value[0], new_h.value[0])
    assert not np.array_equal(base_h.value[1], new_h.value[1])
    assert np.array_equal(base_h.value[2], new_h.value[2])


def test_aggregation_mean_of_two_senders():
    msgs = ad.Tensor(np.array([[[1.0, 3.0], [3.0, 5.0]]]))  # (1, 2, 2)
    np.testing.assert_array_equal(_mean_over_senders(msgs).value, [[2.0, 4.0]])


def test_single_slot_aggregate_is_the_incoming_message():
    own = ad.Tensor(np.array([[[7.0, -2.0]]]))       # the node's own outgoing message
    incoming = ad.Tensor(np.array([[[1.5, 2.5]]]))
    agg = _mean_excluding_self(own, incoming, 1)
    np.testing.assert_array_equal(agg.value, [[[1.5, 2.5]]])


def test_forward_shapes_full_size():
    cfg = NetworkConfig()
    net = PolicyNetwork(cfg, np.random.default_rng(0))
    rng = np.random.default_rng(3)
    phi_s, phi_i = random_features(rng, 2, 3, cfg)
    fwd = net.forward(phi_s, phi_i)
    assert fwd.pi.value.shape == (2, 14)
    assert fwd.p_slot.value.shape == (2, 4)
    assert fwd.value.value.shape == (2,)


def test_slot_permutation_equivariance():
    net = make_net(seed=5)
    rng = np.random.default_rng(6)
    phi_s, phi_i = random_features(rng, 2, 5)
    perm = np.array([3, 0, 4, 1, 2])
    base = net.forward(phi_s, phi_i)
    permuted = net.forward(phi_s[:, perm], phi_i)

    n = 5
    base_f_slots = base.flat_prefs.value[:, : n * S_ACTION_COUNT].reshape(2, n, S_ACTION_COUNT)
    perm_f_slots = permuted.flat_prefs.value[:, : n * S_ACTION_COUNT].reshape(2, n, S_ACTION_COUNT)
    assert np.max(np.abs(perm_f_slots - base_f_slots[:, perm])) < 1e-9
    assert np.max(np.abs(permuted.slot_prefs.value[:, :n] - base.slot_prefs.value[:, perm])) < 1e-9
    # slot-independent outputs and the state value are unchanged
    assert np.max(np.abs(permuted.flat_prefs.value[:, -I_ACTION_COUNT:] - base.flat_prefs.value[:, -I_ACTION_COUNT:])) < 1e-9
    assert np.max(np.abs(permuted.value.value - base.value.value)) < 1e-9


def test_hierarchical_max_identity_exact():
    net = make_net(seed=7)
    rng = np.random.default_rng(8)
    phi_s, phi_i = random_features(rng, 4, 3)
    fwd = net.forward(phi_s, phi_i)
    f = fwd.flat_prefs.value
    h = fwd.slot_prefs.value
    spec = GraphSpec(3)
    for i in range(3):
        block = f[:, i * S_ACTION_COUNT : (i + 1) * S_ACTION_COUNT]
        np.testing.assert_array_equal(block.max(axis=1), h[:, i])
    np.testing.assert_array_equal(f[:, -I_ACTION_COUNT:].max(axis=1), h[:, spec.node_axis_index(0)])


def test_non_hierarchical_flag_changes_only_flat_prefs():
    cfg_h = SMALL
    cfg_flat = NetworkConfig(**{**SMALL.__dict__, "hierarchical": False})
    net_h = make_net(cfg_h, seed=11)
    net_flat = PolicyNetwork.from_arrays(cfg_flat, net_h.parameter_arrays())
    rng = np.random.default_rng(12)
    phi_s, phi_i = random_features(rng, 3, 4)
    a = net_h.forward(phi_s, phi_i)
    b = net_flat.forward(phi_s, phi_i)
    assert not np.allclose(a.flat_prefs.value, b.flat_prefs.value)
    np.testing.assert_array_equal(a.value.value, b.value.value)
    np.testing.assert_array_equal(a.p_slot.value, b.p_slot.value)
    np.testing.assert_array_equal(a.q_values.value, b.q_values.value)


def test_distributions_normalized_and_value_exact():
    net = make_net(seed=13)
    rng = np.random.default_rng(14)
    phi_s, phi_i = random_features(rng, 6, 4)
    fwd = net.forward(phi_s, phi_i)
    assert np.max(np.abs(fwd.pi.value.sum(axis=1) - 1.0)) < 1e-12
    assert np.max(np.abs(fwd.p_slot.value.sum(axis=1) - 1.0)) < 1e-12
    np.testing.assert_array_equal(
        fwd.value.value, (fwd.p_slot.value * fwd.q_values.value).sum(axis=1)
    )
    # V is a convex combination of the slot values
    assert np.all(fwd.value.value <= fwd.q_values.value.max(axis=1) + 1e-12)
    assert np.all(fwd.value.value >= fwd.q_values.value.min(axis=1) - 1e-12)


def test_parameters_independent_of_slot_count(tmp_path):
    cfg = NetworkConfig()
    net = PolicyNetwork(cfg, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    for n in (3, 11):
        phi_s, phi_i = random_features(rng, 1, n, cfg)
        fwd = net.forward(phi_s, phi_i)
        assert fwd.pi.value.shape == (1, S_ACTION_COUNT * n + I_ACTION_COUNT)
    p3 = nn.save_checkpoint(tmp_path / "n3.npz", net.parameter_arrays())
    p11 = nn.save_checkpoint(tmp_path / "n11.npz", net.parameter_arrays())
    assert p3.stat().st_size == p11.stat().st_size


def test_masked_actions_get_zero_probability():
    net = make_net(seed=15)
    rng = np.random.default_rng(16)
    phi_s, phi_i = random_features(rng, 1, 2)
    mask = np.ones(2 * S_ACTION_COUNT + I_ACTION_COUNT)
    mask[[0, 4, 7]] = 0.0
    fwd = net.forward(phi_s, phi_i, mask=mask)
    pi = fwd.pi.value[0]
    assert np.all(pi[[0, 4, 7]] == 0.0)
    assert abs(pi.sum() - 1.0) < 1e-12
    unmasked = net.forward(phi_s, phi_i)
    kept = np.flatnonzero(mask)
    renorm = np.exp(unmasked.flat_prefs.value[0, kept])
    renorm = renorm / renorm.sum()
    assert np.max(np.abs(pi[kept] - renorm)) < 1e-12


def test_select_action_uniform_two_actions():
    net = make_net(seed=17)
    rng = np.random.default_rng(18)
    phi_s, phi_i = random_features(rng, 1, 1)
    mask = np.zeros(S_ACTION_COUNT + I_ACTION_COUNT)
    mask[[1, 2]] = 1.0
    fwd = net.forward(phi_s, phi_i, mask=mask)
    # force the two unmasked logits equal
    fwd.pi.value[0][:] = 0.0
    fwd.pi.value[0][[1, 2]] = 0.5
    action, mu = select_action(fwd, GraphSpec(1), rng=np.random.default_rng(0))
    assert mu == 0.5
    assert (action.node, action.prim) in {(1, 1), (1, 2)}


def test_all_actions_masked_raises():
    net = make_net(seed=19)
    rng = np.random.default_rng(20)
    phi_s, phi_i = random_features(rng, 1, 1)
    with pytest.raises(MaskError):
        net.forward(phi_s, phi_i, mask=np.zeros(S_ACTION_COUNT + I_ACTION_COUNT))


def test_flat_greedy_equals_two_level_greedy():
    """The composed preferences make flat argmax pick (argmax_i h, argmax_j l)."""
    rng = np.random.default_rng(21)
    for _ in range(500):
        n = int(rng.integers(1, 8))
        h = rng.normal(size=n + 1)
        prims = [rng.normal(size=S_ACTION_COUNT) for _ in range(n)] + [rng.normal(size=I_ACTION_COUNT)]
        f = np.concatenate([h[i] + (l - l.max()) for i, l in enumerate(prims)])
        flat = int(np.argmax(f))
        best_node = int(np.argmax(h))
        best_prim = int(np.argmax(prims[best_node]))
        offset = sum(len(p) for p in prims[:best_node])
        assert flat == offset + best_prim


def test_greedy_tie_break_lowest_flat_index():
    net = make_net(seed=22)
    rng = np.random.default_rng(23)
    phi_s, phi_i = random_features(rng, 1, 1)
    fwd = net.forward(phi_s, phi_i)
    fwd.pi.value[0][:] = 1.0 / fwd.pi.value.shape[1]
    action, _ = select_action(fwd, GraphSpec(1), greedy=True)
    assert GraphSpec(1).flat_index(action) == 0


def test_noise_changes_forward_but_sigma_zero_does_not():
    net = make_net(seed=24)
    rng = np.random.default_rng(25)
    phi_s, phi_i = random_features(rng, 1, 2)
    noise = net.sample_noise(np.random.default_rng(26))
    noisy_out = net.forward(phi_s, phi_i, noise=noise).flat_prefs.value
    clean_out = net.forward(phi_s, phi_i).flat_prefs.value
    assert not np.array_equal(noisy_out, clean_out)
    for name, tensor in net.parameters().items():
        if name.endswith("sigma"):
            tensor.value = np.zeros_like(tensor.value)
    zeroed = net.forward(phi_s, phi_i, noise=noise).flat_prefs.value
    np.testing.assert_array_equal(zeroed, net.forward(phi_s, phi_i).flat_prefs.value)


def test_snapshot_round_trip_preserves_forward():
    net = make_net(seed=27)
    clone = PolicyNetwork.from_arrays(SMALL, net.parameter_arrays())
    rng = np.random.default_rng(28)
    phi_s, phi_i = random_features(rng, 2, 3)
    np.testing.assert_array_equal(
        net.forward(phi_s, phi_i).pi.value, clone.forward(phi_s, phi_i).pi.value
    )
