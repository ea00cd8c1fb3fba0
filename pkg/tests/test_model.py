"""Model: init, forward shapes, functional updates, checkpoint round trip,
and the dual-branch inner objective on the real network."""

import numpy as np
import pytest

from metaux.errors import CheckpointError, ConfigError, ShapeError
from metaux.gradcheck import grad_check
from metaux.graph import ComputationGraph, Tensor, backward
from metaux.losses import KernelConfig, LossWeights, cross_entropy, inner_objective
from metaux.model import (ModelConfig, ParamSet, apply_update, forward, init_params,
                          load_params, param_spec, save_params)
from metaux import ops

TINY = ModelConfig(frames=8, height=16, width=16, in_channels=1, conv_widths=(2, 2, 2, 2),
                   embedding_dim=4, num_classes=3, aux_dim=4)


def tiny_batch(rng, b=2, cfg=TINY):
    return rng.uniform(0.0, 1.0, (b, cfg.frames, cfg.in_channels, cfg.height, cfg.width))


class TestInit:
    def test_same_seed_bit_identical(self):
        p1 = init_params(TINY, 7)
        p2 = init_params(TINY, 7)
        assert p1.names == p2.names
        for n in p1:
            assert np.array_equal(p1[n].data, p2[n].data)

    def test_different_seed_differs(self):
        p1, p2 = init_params(TINY, 7), init_params(TINY, 8)
        assert any(not np.array_equal(p1[n].data, p2[n].data) for n in p1)

    def test_first_block_weight_shape(self):
        cfg = ModelConfig(conv_widths=(8, 16, 16, 32), num_classes=5)
        params = init_params(cfg, 0)
        assert params["block1.conv.w"].shape == (8, cfg.in_channels, 3, 3)

    def test_he_uniform_sample_mean_within_3_sigma(self):
        cfg = ModelConfig()  # head_aux.w is 64x64 = 4096 draws
        params = init_params(cfg, 123)
        w = params["head_aux.w"].data
        assert w.size >= 1000
        bound = np.sqrt(6.0 / cfg.embedding_dim)
        sigma_mean = bound / np.sqrt(3.0 * w.size)
        assert abs(w.mean()) <= 3.0 * sigma_mean
        assert np.abs(w).max() <= bound

    def test_bias_and_norm_init(self):
        params = init_params(TINY, 0)
        assert np.array_equal(params["block1.bn.gamma"].data, np.ones(2))
        assert np.array_equal(params["head_pri.b"].data, np.zeros(3))

    def test_invalid_config_rejected(self):
        with pytest.raises(ConfigError):
            ModelConfig(frames=4).validate()  # below temporal kernel
        with pytest.raises(ConfigError):
            ModelConfig(height=8, width=8).validate()  # collapses under pooling
        with pytest.raises(ConfigError):
            ModelConfig(padding="reflect").validate()


class TestForward:
    def test_logits_shape(self):
        cfg = ModelConfig(num_classes=5)
        params = init_params(cfg, 0)
        rng = np.random.default_rng(0)
        batch = rng.uniform(0, 1, (2, 8, 1, 32, 32))
        out = forward(params, batch, cfg)
        assert out.logits.shape == (2, 5)
        assert out.embedding.shape == (2, cfg.embedding_dim)
        assert out.aux_embedding.shape == (2, cfg.aux_dim)
        assert np.isfinite(out.logits.data).all()

    def test_duplicated_sample_duplicates_logits_instance_mode(self):
        cfg = ModelConfig(frames=6, height=16, width=16, conv_widths=(2, 2, 2, 2),
                          embedding_dim=4, num_classes=3, aux_dim=4, norm_mode="instance")
        params = init_params(cfg, 1)
        rng = np.random.default_rng(2)
        x = rng.uniform(0, 1, (1, 6, 1, 16, 16))
        batch = np.concatenate([x, x, rng.uniform(0, 1, (1, 6, 1, 16, 16))])
        out = forward(params, batch, cfg).logits.data
        np.testing.assert_array_equal(out[0], out[1])

    def test_batch_permutation_permutes_outputs(self):
        cfg = ModelConfig(frames=6, height=16, width=16, conv_widths=(2, 2, 2, 2),
                          embedding_dim=4, num_classes=3, aux_dim=4, norm_mode="instance")
        params = init_params(cfg, 1)
        rng = np.random.default_rng(3)
        batch = rng.uniform(0, 1, (4, 6, 1, 16, 16))
        perm = np.array([2, 0, 3, 1])
        out = forward(params, batch, cfg).logits.data
        out_perm = forward(params, batch[perm], cfg).logits.data
        np.testing.assert_allclose(out_perm, out[perm], atol=1e-12)

    def test_forward_deterministic(self):
        params = init_params(TINY, 4)
        rng = np.random.default_rng(5)
        batch = tiny_batch(rng)
        a = forward(params, batch, TINY).logits.data
        b = forward(params, batch, TINY).logits.data
        assert np.array_equal(a, b)

    def test_shape_mismatch_rejected(self):
        params = init_params(TINY, 0)
        with pytest.raises(ShapeError):
            forward(params, np.zeros((2, 5, 1, 16, 16)), TINY)

    def test_gradcheck_cross_entropy_of_forward(self):
        # flatten all parameters into one vector and FD through the whole model
        rng = np.random.default_rng(6)
        batch = tiny_batch(rng, b=2)
        labels = np.array([0, 2])
        base = init_params(TINY, 3)
        spec = param_spec(TINY)
        sizes = [int(np.prod(s)) for _, s in spec]
        offsets = np.cumsum([0] + sizes)

        def unflatten(vec):
            return {name: ops.reshape(ops.slice_tensor(vec, (off,), (size,)), shape)
                    for (name, shape), off, size in zip(spec, offsets[:-1], sizes)}

        def f(vec):
            params = unflatten(vec)
            return cross_entropy(forward(params, batch, TINY).logits, labels)

        flat = np.concatenate([base[n].data.ravel() for n in base])
        rep = grad_check(f, flat)
        assert rep.passed(1e-5), f"max rel err {rep.max_rel_err:.2e}"


class TestApplyUpdate:
    def test_zero_lr_identity(self):
        params = init_params(TINY, 0)
        grads = {n: Tensor(np.ones(params[n].shape)) for n in params}
        updated = apply_update(params, grads, 0.0, differentiable=False)
        for n in params:
            assert np.array_equal(updated[n].data, params[n].data)

    def test_scalar_arithmetic(self):
        params = ParamSet([("p", Tensor(np.array(1.0)))])
        updated = apply_update(params, {"p": Tensor(np.array(0.5))}, 0.2,
                               differentiable=False)
        assert float(updated["p"].data) == pytest.approx(0.9, abs=1e-15)

    def test_missing_gradient_entry(self):
        params = init_params(TINY, 0)
        with pytest.raises(KeyError, match="block1.conv.w"):
            apply_update(params, {}, 0.1, differentiable=False)

    def test_differentiable_update_derivative_on_quadratic(self):
        # L = 0.5*c*p^2  =>  p' = p - lr*c*p, d(p')/dp = 1 - lr*c
        c, lr, p0 = 3.0, 0.2, 1.7
        g = ComputationGraph()
        p = g.watch(np.array(p0))
        loss = ops.mul(ops.square(p), 0.5 * c)
        grads = {"p": backward(g, loss, create_graph=True).grad(p)}
        updated = apply_update({"p": p}, grads, lr, differentiable=True)
        d = backward(g, updated["p"]).grad(p)
        assert d.item() == pytest.approx(1.0 - lr * c, abs=1e-12)

    def test_two_updates_compose_like_unrolled_map(self):
        # FD of the two-step update map on a scalar cubic-ish loss
        lr, p0 = 0.1, 0.8

        def two_step(p_start: float) -> float:
            g = ComputationGraph()
            p = g.watch(np.array(p_start))
            cur = p
            for _ in range(2):
                loss = ops.mul(ops.square(ops.square(cur)), 0.25)  # p^4/4
                gr = backward(g, loss, create_graph=True).grad(cur)
                cur = ops.sub(cur, ops.mul(gr, lr))
            return g, p, cur

        g, p, cur = two_step(p0)
        analytic = backward(g, cur).grad(p).item()
        eps = 1e-6
        hi = float(two_step(p0 + eps)[2].data)
        lo = float(two_step(p0 - eps)[2].data)
        assert analytic == pytest.approx((hi - lo) / (2 * eps), rel=1e-5)


class TestCheckpoint:
    def test_round_trip_bit_identical(self):
        params = init_params(TINY, 9)
        blob = save_params(params)
        loaded = load_params(blob, TINY)
        assert loaded.names == params.names
        for n in params:
            assert np.array_equal(loaded[n].data, params[n].data)
        assert save_params(loaded) == blob

    def test_bad_magic(self):
        blob = b"XXXXXXXX" + save_params(init_params(TINY, 0))[8:]
        with pytest.raises(CheckpointError, match="magic"):
            load_params(blob, TINY)

    def test_wrong_num_classes_names_head_tensor(self):
        blob = save_params(init_params(TINY, 0))
        other = ModelConfig(frames=8, height=16, width=16, conv_widths=(2, 2, 2, 2),
                            embedding_dim=4, num_classes=4, aux_dim=4)
        with pytest.raises(CheckpointError, match="head_pri"):
            load_params(blob, other)

    def test_truncated_payload(self):
        blob = save_params(init_params(TINY, 0))
        with pytest.raises(CheckpointError, match="truncated"):
            load_params(blob[:-10], TINY)


class TestParamSet:
    def test_duplicate_names_rejected(self):
        with pytest.raises(ValueError):
            ParamSet([("a", Tensor(np.ones(1))), ("a", Tensor(np.ones(1)))])

    def test_replace_validates_shape(self):
        ps = ParamSet([("a", Tensor(np.ones((2, 2))))])
        with pytest.raises(ShapeError):
            ps.replace({"a": Tensor(np.ones(3))})

    def test_replace_preserves_order(self):
        ps = ParamSet([("b", Tensor(np.zeros(1))), ("a", Tensor(np.zeros(1)))])
        ps2 = ps.replace({"a": Tensor(np.ones(1))})
        assert ps2.names == ("b", "a")


class TestInnerObjective:
    def setup_method(self):
        self.rng = np.random.default_rng(11)
        self.params = init_params(TINY, 2)
        self.sx = tiny_batch(self.rng, b=3)
        self.sy = np.array([0, 1, 2])
        self.ax = tiny_batch(self.rng, b=2)
        self.kcfg = KernelConfig(sigma=1.0)

    def test_lambda2_zero_equals_cross_entropy(self):
        loss = inner_objective(self.params, self.sx, self.sy, self.ax,
                               LossWeights(1.0, 0.0), self.kcfg, TINY)
        ce = cross_entropy(forward(self.params, self.sx, TINY).logits, self.sy)
        assert float(loss.data) == float(ce.data)

    def test_lambda1_zero_identical_sets_gives_zero(self):
        loss = inner_objective(self.params, self.sx, self.sy, self.sx.copy(),
                               LossWeights(0.0, 1.0), self.kcfg, TINY)
        assert float(loss.data) == 0.0

    def test_aux_required_when_weighted(self):
        with pytest.raises(ShapeError):
            inner_objective(self.params, self.sx, self.sy, None,
                            LossWeights(0.5, 0.5), self.kcfg, TINY)

    def test_cross_kernel_variant_runs(self):
        loss = inner_objective(self.params, self.sx, self.sy, self.ax,
                               LossWeights(0.55, 0.45), self.kcfg, TINY,
                               aux_loss="cross-kernel")
        assert np.isfinite(float(loss.data))

    def test_median_heuristic_sigma_default(self):
        loss = inner_objective(self.params, self.sx, self.sy, self.ax,
                               LossWeights(0.55, 0.45), KernelConfig(), TINY)
        assert np.isfinite(float(loss.data))

    def test_differentiable_to_all_params(self):
        g = ComputationGraph()
        watched = {n: g.watch(self.params[n]) for n in self.params}
        loss = inner_objective(watched, self.sx, self.sy, self.ax,
                               LossWeights(0.55, 0.45), self.kcfg, TINY)
        gm = backward(g, loss)
        grads = {n: gm.grad(watched[n]).data for n in watched}
        assert all(np.isfinite(v).all() for v in grads.values())
        # both heads receive signal
        assert np.abs(grads["head_pri.w"]).max() > 0
        assert np.abs(grads["head_aux.w"]).max() > 0
