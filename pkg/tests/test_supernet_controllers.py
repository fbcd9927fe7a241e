# test_supernet_controllers.py
import numpy as np
import pytest

from data_loader import make_batches
from errors import ConfigError, InvariantError
from model_layers import candidate_forward, ce_loss, embed, masked_plan, padding_mask, score_items
from supernet_controllers import (
    ALPHA,
    BETA,
    SupernetConfig,
    build_supernet,
    candidate_prefix,
    fixed_fusion,
    gumbel_softmax,
    hard_path_forward,
    sample_fusion,
    supernet_forward,
)
from tensor_core import GradTape, Tensor, backward, mul, tensor_sum


@pytest.fixture
def window(toy_split, tiny_cfg):
    return make_batches(toy_split, tiny_cfg.max_seq_len, 16, 'val')[0]


class TestGumbelSoftmax:
    def test_argmax_frequency_follows_weights(self):
        rng = np.random.default_rng(0)
        log_w = np.log([1.0, 3.0])
        wins = sum(int(np.argmax(gumbel_softmax(log_w, 1.0, rng)[0].data)) for _ in range(20000))
        assert wins / 20000 == pytest.approx(0.75, abs=0.02)

    def test_output_is_on_the_simplex(self, rng):
        p, draws = gumbel_softmax(rng.normal(size=5), 0.7, rng)
        assert p.data.sum() == pytest.approx(1.0, abs=1e-12)
        assert np.all(p.data > 0.0)
        assert draws.shape == (5,)

    def test_expected_mode_has_no_noise(self):
        p, draws = gumbel_softmax(np.zeros(4), 0.3, mode='expected')
        np.testing.assert_allclose(p.data, np.full(4, 0.25), rtol=1e-15)
        np.testing.assert_array_equal(draws, np.zeros(4))

    def test_low_temperature_approaches_one_hot(self):
        p, _ = gumbel_softmax(np.array([0.0, 1.0, 0.5]), 0.01, mode='expected')
        assert p.data[1] > 0.999

    @pytest.mark.parametrize('tau', [0.0, -1.0])
    def test_non_positive_temperature(self, tau):
        with pytest.raises(ConfigError):
            gumbel_softmax(np.zeros(2), tau, np.random.default_rng(0))

    def test_sampling_needs_a_generator(self):
        with pytest.raises(ConfigError):
            gumbel_softmax(np.zeros(2), 1.0)

    def test_gradient_flows_to_logits(self, rng, finite_difference, rel_error):
        weights = rng.normal(size=3)
        cost = np.array([1.0, -2.0, 0.5])
        log_w = Tensor(rng.normal(size=3), requires_grad=True)
        with GradTape() as tape:
            p, _ = gumbel_softmax(log_w, 0.5, mode='expected')
            loss = tensor_sum(mul(p, cost * weights))
        grads = backward(tape, loss)

        def scalar(x):
            return float(np.sum(gumbel_softmax(x, 0.5, mode='expected')[0].data * cost * weights))

        assert rel_error(grads[log_w], finite_difference(scalar, log_w.numpy())) <= 1e-6


class TestSupernetConfig:
    @pytest.mark.parametrize('overrides', [
        {'hidden_size': 10, 'num_heads': 4},
        {'gamma_hidden': (0.0, 0.5), 'gamma_inner': (0.0,)},
        {'gamma_hidden': (), 'gamma_inner': ()},
        {'gamma_hidden': (0.0, 1.0), 'gamma_inner': (0.0, 0.5)},
        {'gate_layers': 5},
        {'dropout': 1.0},
        {'num_layers': 0},
        {'num_items': 0},
    ])
    def test_rejects_invalid(self, overrides):
        with pytest.raises(ConfigError):
            SupernetConfig(**{'num_items': 10, **overrides})

    def test_gate_width_defaults_to_hidden_size(self):
        assert SupernetConfig(num_items=5, hidden_size=16, num_heads=4).gate_width == 16
        assert SupernetConfig(num_items=5, gate_hidden=7).gate_width == 7


class TestBuildSupernet:
    def test_controllers_start_neutral(self, tiny_net):
        np.testing.assert_array_equal(tiny_net.alpha, np.zeros(2))
        np.testing.assert_array_equal(tiny_net.beta, np.zeros(2))
        assert tiny_net.arch[ALPHA].requires_grad and tiny_net.arch[BETA].requires_grad

    def test_every_candidate_layer_is_present(self, tiny_net):
        for i in range(2):
            for layer in (1, 2):
                assert f'{candidate_prefix(i, layer)}.wq' in tiny_net.weights

    def test_gate_outputs_match_live_widths(self, tiny_net):
        assert tiny_net.weights['cand0.layer1.gate1.w1'].shape == (8, 8)
        assert tiny_net.weights['cand1.layer1.gate1.w1'].shape == (8, 4)
        assert tiny_net.weights['cand1.layer2.gate2.w1'].shape == (8, 4)

    def test_same_seed_same_weights(self, tiny_cfg, tiny_net):
        again = build_supernet(tiny_cfg, np.random.default_rng(1))
        for name, tensor in tiny_net.weights.items():
            np.testing.assert_array_equal(tensor.data, again.weights[name].data)

    def test_with_weights_leaves_original(self, tiny_net):
        replaced = tiny_net.with_weights({})
        assert replaced.weights == {}
        assert 'emb.item' in tiny_net.weights
        assert set(tiny_net.all_tensors()) == set(tiny_net.weights) | {ALPHA, BETA}


class TestSupernetForward:
    def test_one_hot_weights_collapse_to_a_hard_path(self, tiny_net, window):
        for candidate in range(2):
            for depth in (1, 2):
                p = np.eye(2)[candidate]
                q = np.eye(2)[depth - 1]
                y, _ = supernet_forward(tiny_net, window.item_ids, fusion=fixed_fusion(p, q))
                path = hard_path_forward(tiny_net, window.item_ids, candidate, depth)
                np.testing.assert_allclose(y.data, path.data, rtol=1e-12, atol=1e-14)

    def test_matches_explicit_double_sum(self, tiny_net, window):
        p, q = np.array([0.3, 0.7]), np.array([0.6, 0.4])
        y, _ = supernet_forward(tiny_net, window.item_ids, fusion=fixed_fusion(p, q))

        cfg = tiny_net.cfg
        settings = cfg.block_settings()
        pad = padding_mask(window.item_ids)
        e = embed(window.item_ids, tiny_net.weights)
        states = []
        state = e
        for layer in (1, 2):
            outs = [candidate_forward(state, e, tiny_net.weights, candidate_prefix(i, layer),
                                      masked_plan(tiny_net.masks[i]), settings, pad).data for i in range(2)]
            state = Tensor(p[0] * outs[0] + p[1] * outs[1])
            states.append(state.data)
        np.testing.assert_allclose(y.data, q[0] * states[0] + q[1] * states[1], rtol=1e-10, atol=1e-12)

    def test_linear_in_depth_weights(self, tiny_net, window):
        p = np.array([0.4, 0.6])
        y1, _ = supernet_forward(tiny_net, window.item_ids, fusion=fixed_fusion(p, [1.0, 0.0]))
        y2, _ = supernet_forward(tiny_net, window.item_ids, fusion=fixed_fusion(p, [0.0, 1.0]))
        mixed, _ = supernet_forward(tiny_net, window.item_ids, fusion=fixed_fusion(p, [0.25, 0.75]))
        np.testing.assert_allclose(mixed.data, 0.25 * y1.data + 0.75 * y2.data, rtol=1e-10, atol=1e-12)

    def test_expected_mode_at_neutral_logits_is_uniform(self, tiny_net):
        fusion = sample_fusion(tiny_net, 0.5, mode='expected')
        np.testing.assert_allclose(fusion.p_values, [0.5, 0.5], rtol=1e-15)
        np.testing.assert_allclose(fusion.q_values, [0.5, 0.5], rtol=1e-15)

    def test_bad_fusion_shapes(self, tiny_net, window):
        with pytest.raises(InvariantError):
            supernet_forward(tiny_net, window.item_ids, fusion=fixed_fusion([0.2, 0.3, 0.5], [0.5, 0.5]))

    def test_bad_depth(self, tiny_net, window):
        with pytest.raises(InvariantError):
            hard_path_forward(tiny_net, window.item_ids, 0, 0)
        with pytest.raises(InvariantError):
            hard_path_forward(tiny_net, window.item_ids, 0, 3)

    def test_pruned_candidate_zeroes_its_channels(self, tiny_net, window):
        out = hard_path_forward(tiny_net, window.item_ids, 1, 2).data
        assert np.all(out[..., [2, 3, 6, 7]] == 0.0)

    def test_gradients_reach_both_controllers(self, tiny_net, window):
        with GradTape() as tape:
            y, _ = supernet_forward(tiny_net, window.item_ids, 1.0, np.random.default_rng(2))
            loss = ce_loss(score_items(y, tiny_net.weights['emb.item']), window.targets)
        grads = backward(tape, loss)
        assert np.any(grads[tiny_net.arch[ALPHA]] != 0.0)
        assert np.any(grads[tiny_net.arch[BETA]] != 0.0)
        assert np.any(grads[tiny_net.weights['cand1.layer2.wq']] != 0.0)

    def test_same_generator_same_draws(self, tiny_net, window):
        a, fa = supernet_forward(tiny_net, window.item_ids, 1.0, np.random.default_rng(5))
        b, fb = supernet_forward(tiny_net, window.item_ids, 1.0, np.random.default_rng(5))
        np.testing.assert_array_equal(a.data, b.data)
        np.testing.assert_array_equal(fa.alpha_draws, fb.alpha_draws)
