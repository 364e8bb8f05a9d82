import numpy as np
import pytest
from scipy import stats

from fetrack.errors import NumericError, ParameterError, ShapeError
from fetrack.numerics import GradTape, Tensor, check_gradients, ops
from fetrack.prompts import (
    HARD,
    SOFT,
    PromptGenerator,
    PromptPool,
    RoutingNet,
    build_pool,
    generate_prompts,
    gumbel_select,
    route,
)


class TestPool:
    def test_ones_identity(self):
        w = np.random.default_rng(0).normal(size=(4, 8))
        np.testing.assert_array_equal(build_pool(w, np.ones((4, 8))).data, w)

    def test_zero(self):
        assert not build_pool(np.zeros((4, 8)), np.ones((4, 8))).data.any()

    def test_loop_oracle(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(4, 8)), rng.normal(size=(4, 8))
        out = build_pool(a, b).data
        for i in range(4):
            for j in range(8):
                assert out[i, j] == a[i, j] * b[i, j]

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            build_pool(np.ones((4, 8)), np.ones((4, 7)))


class TestRoute:
    def test_zero_weights_uniform(self):
        net = RoutingNet(6, 6, 5, np.random.default_rng(0))
        for p in net.parameters():
            p.data[...] = 0
        out = route(np.random.default_rng(1).normal(size=(2, 3, 6)), net).data
        np.testing.assert_allclose(out, -np.log(5), atol=1e-12)

    def test_single_prompt(self):
        net = RoutingNet(6, 6, 1, np.random.default_rng(0))
        out = route(np.random.default_rng(1).normal(size=(2, 3, 6)), net).data
        np.testing.assert_allclose(out, 0.0, atol=1e-12)

    def test_simplex(self):
        net = RoutingNet(6, 10, 8, np.random.default_rng(2))
        out = route(np.random.default_rng(3).normal(size=(2, 30, 6)) * 5, net).data
        np.testing.assert_allclose(np.exp(out).sum(-1), 1.0, atol=1e-6)

    def test_nonfinite(self):
        net = RoutingNet(2, 2, 3, np.random.default_rng(0))
        with pytest.raises(NumericError):
            route(np.array([[[np.nan, 0.0]]]), net)


class TestGumbel:
    def test_hard_rows_one_hot(self):
        logp = np.log(np.random.default_rng(0).dirichlet(np.ones(6), size=(3, 40)))
        out = gumbel_select(logp, 1.0, seed=7, mode=HARD).data
        assert set(np.unique(out)) == {0.0, 1.0}
        np.testing.assert_array_equal(out.sum(-1), 1.0)

    def test_single_prompt_always_one(self):
        out = gumbel_select(np.zeros((2, 5, 1)), 0.5, seed=3).data
        np.testing.assert_array_equal(out, 1.0)

    def test_soft_simplex(self):
        logp = np.log(np.random.default_rng(1).dirichlet(np.ones(5), size=(2, 20)))
        out = gumbel_select(logp, 0.7, seed=1, mode=SOFT).data
        np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-6)

    def test_deterministic_given_seed(self):
        logp = np.log(np.full((1, 10, 4), 0.25))
        a = gumbel_select(logp, 1.0, seed=11).data
        b = gumbel_select(logp, 1.0, seed=11).data
        np.testing.assert_array_equal(a, b)

    def test_inference_argmax_first_tie(self):
        out = gumbel_select(np.array([[0.0, 0.0, -1.0], [-3.0, -1.0, -2.0]]), 1.0, seed=None).data
        np.testing.assert_array_equal(out, [[1, 0, 0], [0, 1, 0]])

    def test_temperature_checked(self):
        with pytest.raises(ParameterError):
            gumbel_select(np.zeros((1, 2)), 0.0, seed=0)

    def test_near_certain_row(self):
        logp = np.array([[0.0, -1e9]])
        hits = sum(gumbel_select(logp, 1.0, seed=s).data[0, 0] for s in range(10_000))
        assert hits == 10_000

    def test_frequencies_chi_square(self):
        probs = np.array([0.5, 0.25, 0.15, 0.1])
        logp = np.log(probs)[None]
        counts = np.zeros(4)
        for s in range(10_000):
            counts += gumbel_select(logp, 1.0, seed=s).data[0]
        p_value = stats.chisquare(counts, probs * 10_000).pvalue
        assert p_value > 0.01

    def test_straight_through_gradient_matches_soft(self):
        rng = np.random.default_rng(4)
        logp = Tensor(np.log(rng.dirichlet(np.ones(5), size=(2, 6))), requires_grad=True)
        w = rng.normal(size=(2, 6, 5))
        grads = {}
        for mode in (HARD, SOFT):
            with GradTape() as tape:
                loss = ops.sum(ops.mul(gumbel_select(logp, 0.8, seed=9, mode=mode), Tensor(w)))
            grads[mode] = tape.gradient(loss, [logp])[0]
        np.testing.assert_array_equal(grads[HARD], grads[SOFT])
        assert np.abs(grads[SOFT]).max() > 0

    def test_soft_mode_gradcheck(self):
        rng = np.random.default_rng(5)
        logp = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 4)))
        errs = check_gradients(lambda: ops.sum(ops.mul(gumbel_select(logp, 0.6, seed=2, mode=SOFT), w)), [logp])
        assert max(errs.values()) < 1e-6


class TestGenerate:
    def setup_method(self):
        self.rng = np.random.default_rng(6)
        self.gen = PromptGenerator(dim=6, prompt_dim=4, n_prompts=5, rng=self.rng)
        self.h = self.rng.normal(size=(2, 11, 6))

    def test_hard_rows_are_pool_rows(self):
        P = self.gen.pool().data
        p_r, p_e = self.gen(self.h, self.rng.normal(size=(2, 11, 6)), seed=3)
        for out in (p_r.data, p_e.data):
            for row in out.reshape(-1, 4):
                assert any(np.array_equal(row, prow) for prow in P)

    def test_identical_inputs_identical_prompts(self):
        p_r, p_e = self.gen(self.h, self.h, seed=5)
        np.testing.assert_array_equal(p_r.data, p_e.data)

    def test_single_prompt_constant(self):
        gen = PromptGenerator(6, 4, 1, np.random.default_rng(0))
        p_r, p_e = gen(self.h, self.h * 2, seed=1)
        row = gen.pool().data[0]
        np.testing.assert_array_equal(p_r.data, np.broadcast_to(row, p_r.shape))
        np.testing.assert_array_equal(p_e.data, np.broadcast_to(row, p_e.shape))

    def test_high_temperature_limit(self):
        gen = self.gen
        gen.temperature = 1e7
        p_r, _ = gen(self.h, self.h, seed=2, mode=SOFT)
        mean = gen.pool().data.mean(0)
        assert np.abs(p_r.data - mean).max() < 1e-3

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            self.gen(self.h, self.h[:, :5], seed=0)

    def test_gradients_reach_pool_and_router(self):
        pool = PromptPool(4, 3, np.random.default_rng(1))
        net = RoutingNet(6, 6, 4, np.random.default_rng(2))
        w = Tensor(np.random.default_rng(3).normal(size=(2, 11, 3)))
        params = pool.parameters() + net.parameters()

        def loss():
            p_r, p_e = generate_prompts(self.h, self.h[:, ::-1], pool, net, 0.9, seed=4, mode=SOFT)
            return ops.sum(ops.mul(ops.add(p_r, p_e), w))

        errs = check_gradients(loss, params)
        assert max(errs.values()) < 1e-6
