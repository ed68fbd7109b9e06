import math

import numpy as np
import pytest

from conftest import assert_grad_close, fd_grad, tiny_setup
from zsih import autodiff as ad
from zsih import layers, objective, pipeline
from zsih.autodiff import Node
from zsih.model import forward_multimodal
from zsih.objective import AdamState, adam_step, batch_loss, estimate_gradients


class TestBatchLoss:
    def test_decomposition_identity(self):
        _, _, params, batch, adj, eps, _ = tiny_setup()
        loss, bd = batch_loss(batch, params, adj, eps)
        assert loss.item() == bd.total
        assert bd.total == bd.entropy_term + bd.decode_term + bd.code_reg_term
        assert bd.code_reg_term >= 0.0

    def test_half_probability_entropy(self):
        config, _, params, batch, adj, eps, _ = tiny_setup()
        params.gcn2.w_theta.data[...] = 0.0  # code probabilities become 0.5
        _, bd = batch_loss(batch, params, adj, eps)
        expected = config.N_B * config.M * math.log(0.5)
        assert abs(bd.entropy_term - expected) < 1e-10

    def test_half_probability_code_regularizer(self):
        config, _, params, batch, adj, eps, _ = tiny_setup()
        params.gcn2.w_theta.data[...] = 0.0
        for enc in (params.enc_im, params.enc_sk):
            enc.w.data[...] = 0.0
            enc.b.data[...] = 0.0
        eps = np.full((config.N_B, config.M), 0.25)  # all bits sample to 1
        _, bd = batch_loss(batch, params, adj, eps)
        # per item and encoder: |0.5 - 1|^2 summed over M, scaled by 1/(2M)
        assert abs(bd.code_reg_term - config.N_B * 0.25) < 1e-12

    def test_regularizer_vanishes_when_encoders_hit_bits(self, rng):
        m = 4
        b = ad.constant(rng.uniform(0.3, 0.7, size=(2, m)))
        bits = rng.integers(0, 2, size=(2, m)).astype(float)
        bits_node = ad.constant(bits)
        dec = layers.GaussianDecoder(np.zeros((m, 2)), np.zeros(2),
                                     np.zeros((m, 2)), np.zeros(2))
        _, _, code_reg = objective.loss_terms(
            b, bits_node, bits, bits_node, bits_node, np.zeros((2, 2)), dec, m
        )
        assert code_reg.item() == 0.0

    def test_single_item_miniature_composes_layer_oracles(self, rng):
        # one item, M=1: total term values equal the hand-summed scalars
        b_val = 0.73
        bit = np.array([1.0])
        s = np.array([0.4, -1.1])
        dec = layers.GaussianDecoder(
            w_mu=rng.normal(size=(1, 2)), b_mu=rng.normal(size=2),
            w_logvar=rng.normal(size=(1, 2)) * 0.2, b_logvar=np.zeros(2),
        )
        f_val = np.array([0.61])
        g_val = np.array([0.28])
        b = ad.constant([b_val])
        bits_node = ad.constant(bit)
        entropy, decode, code_reg = objective.loss_terms(
            b, bits_node, bit, ad.constant(f_val), ad.constant(g_val), s, dec, 1
        )
        assert abs(entropy.item() - math.log(b_val)) < 1e-12
        expected_decode = -layers.log_p_gaussian(s, ad.constant(bit), dec).item()
        assert abs(decode.item() - expected_decode) < 1e-12
        expected_reg = ((f_val[0] - 1.0) ** 2 + (g_val[0] - 1.0) ** 2) / 2.0
        assert abs(code_reg.item() - expected_reg) < 1e-12

    def test_total_orders_with_code_entropy(self, rng):
        """The sampled-code log-probability enters the total with a plus
        sign, so minimizing the total presses E[log q] down (entropy up)."""
        m = 6
        b = ad.constant(np.full((2, m), 0.7))
        # constant decoder: the decode term cannot distinguish the states
        dec = layers.GaussianDecoder(np.zeros((m, 2)), np.zeros(2),
                                     np.zeros((m, 2)), np.zeros(2))
        sem = np.zeros((2, 2))
        totals = {}
        for tag, bit in (("likely", 1.0), ("unlikely", 0.0)):
            bits = np.full((2, m), bit)
            bits_node = ad.constant(bits)
            entropy, decode, reg = objective.loss_terms(
                b, bits_node, bits, bits_node, bits_node, sem, dec, m)
            totals[tag] = entropy.item() + decode.item() + reg.item()
        assert totals["unlikely"] < totals["likely"]

    def test_batch_too_small(self):
        _, _, params, batch, adj, eps, _ = tiny_setup()
        batch.sketch_feats = batch.sketch_feats[:1]
        batch.image_feats = batch.image_feats[:1]
        batch.semantics = batch.semantics[:1]
        batch.labels = batch.labels[:1]
        with pytest.raises(ValueError, match="at least 2"):
            batch_loss(batch, params, adj[:1, :1], eps[:1])

    def test_multi_draw_average_of_identical_draws(self):
        config, _, params, batch, adj, eps, _ = tiny_setup()
        _, bd1 = batch_loss(batch, params, adj, eps)
        stacked = np.stack([eps, eps])
        _, bd2 = batch_loss(batch, params, adj, stacked)
        assert bd1.total == bd2.total


class TestEstimateGradients:
    def test_deterministic(self):
        _, _, params, batch, adj, eps, _ = tiny_setup()
        loss1, _ = batch_loss(batch, params, adj, eps)
        g1 = estimate_gradients(loss1, params)
        loss2, _ = batch_loss(batch, params, adj, eps)
        g2 = estimate_gradients(loss2, params)
        for name in g1:
            np.testing.assert_array_equal(g1[name], g2[name])

    def test_constant_loss_gives_zero_gradients(self):
        _, _, params, _, _, _, _ = tiny_setup()
        loss = ad.reduce_sum(ad.square(ad.constant([1.0, 2.0])))
        grads = estimate_gradients(loss, params)
        assert all(np.all(g == 0.0) for g in grads.values())

    def test_full_objective_matches_fd(self):
        """Autodiff against central differences of the straight-through
        surrogate, for every parameter group."""
        _, _, params, batch, adj, eps, _ = tiny_setup()
        b, b_tilde, _, _ = forward_multimodal(batch, params, adj, eps)
        bits = b_tilde.data.copy()
        offset = bits - b.data

        loss, _ = batch_loss(batch, params, adj, eps)
        ad_grads = estimate_gradients(loss, params)

        def surrogate():
            value, _ = batch_loss(batch, params, adj, eps,
                                  code_offset=offset, frozen_bits=bits)
            return value.item()

        for name, node in params.named().items():
            assert_grad_close(ad_grads[name], fd_grad(surrogate, node))


class TestAdam:
    def _params_and_state(self, rng):
        config, _, params, _, _, _, _ = tiny_setup()
        state = AdamState.init(params, lr=0.01)
        return params, state

    def test_zero_gradient_leaves_params_unchanged(self, rng):
        params, state = self._params_and_state(rng)
        before = {k: n.data.copy() for k, n in params.named().items()}
        grads = {k: np.zeros_like(n.data) for k, n in params.named().items()}
        adam_step(params, grads, state)
        for k, n in params.named().items():
            np.testing.assert_array_equal(n.data, before[k])
        assert state.step == 1

    def test_first_step_is_normalized_gradient_direction(self, rng):
        params, state = self._params_and_state(rng)
        named = params.named()
        grads = {k: rng.normal(size=n.data.shape) for k, n in named.items()}
        before = {k: n.data.copy() for k, n in named.items()}
        adam_step(params, grads, state)
        for k, n in named.items():
            g = grads[k]
            expected = before[k] - state.lr * g / (np.abs(g) + state.eps_hat)
            np.testing.assert_allclose(n.data, expected, rtol=1e-9, atol=1e-12)

    def test_quadratic_bowl_descends_monotonically(self):
        theta = Node(np.full(6, 2.0), requires_grad=True)

        class Holder:
            def named(self):
                return {"theta": theta}

            def zero_grads(self):
                theta.zero_grad()

        holder = Holder()
        state = AdamState.init(holder, lr=0.01)
        losses = []
        for _ in range(100):
            loss = ad.mul(ad.reduce_sum(ad.square(theta)), 0.5)
            losses.append(loss.item())
            grads = estimate_gradients(loss, holder)
            adam_step(holder, grads, state)
        losses.append(0.5 * float(np.sum(theta.data ** 2)))
        assert all(a > b for a, b in zip(losses, losses[1:]))

    def test_non_finite_gradient_aborts(self, rng):
        params, state = self._params_and_state(rng)
        grads = {k: np.zeros_like(n.data) for k, n in params.named().items()}
        grads["gcn1.w_theta"][0, 0] = np.nan
        with pytest.raises(FloatingPointError, match="gcn1.w_theta"):
            adam_step(params, grads, state)


class TestToyDescent:
    def test_loss_drops_on_two_class_toy_across_seeds(self):
        wins = 0
        for seed in range(100):
            config, dataset, params, _, _, _, rng = tiny_setup(
                seed=seed, n_classes=2, per_class=4, length=1, channels=6,
                d_s=3, N_B=8, M=8, d_f=3, gcn_hidden=4,
            )
            state = AdamState.init(params, lr=config.lr)
            first = last = None
            for _ in range(300):
                batch = pipeline.sample_batch(dataset, config.N_B, rng)
                adj = pipeline.build_adjacency(batch.semantics, config.t)
                eps = rng.random((config.N_B, config.M))
                loss, bd = batch_loss(batch, params, adj, eps)
                grads = estimate_gradients(loss, params)
                adam_step(params, grads, state)
                if first is None:
                    first = bd.total
                last = bd.total
            if last < first:
                wins += 1
        assert wins >= 95
