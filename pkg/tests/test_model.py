"""Model tests: fast-state init, cache equivalence, effective-weight
additivity, causality, parameter accounting, checkpoints."""

import numpy as np
import pytest

from plasticformer import tensor as T
from plasticformer.model import (ConfigError, ModelConfig, StaticParams,
                                 forward_step, init_fast_state,
                                 positional_encoding)
from plasticformer.oracle import reference_forward_sequence


def tiny_cfg(rule="none", **kw):
    base = dict(input_dim=3, output_dim=2, d_model=8, d_ff=10, n_heads=2,
                n_layers=2, aux_dim=2, dropout=0.0, rule=rule)
    base.update(kw)
    return ModelConfig(**base)


def head_row(step):
    parts = [step.y.data[0]]
    if step.ybar is not None:
        parts.append(step.ybar.data[0])
    parts.append(step.eta_tilde.data[0])
    return np.concatenate(parts)


class TestConfig:
    def test_heads_must_divide(self):
        with pytest.raises(ConfigError):
            tiny_cfg(d_model=9, n_heads=2)

    def test_unknown_rule(self):
        with pytest.raises(ConfigError):
            tiny_cfg(rule="magic")

    def test_plastic_layer_range(self):
        with pytest.raises(ConfigError):
            tiny_cfg(plastic_layers=(7,))

    def test_default_plastic_set_is_all_ffn_matrices(self):
        assert tiny_cfg().plastic_layers == (0, 1, 2, 3)

    def test_head_width(self):
        assert tiny_cfg().head_width == 2 + 2 + 1
        assert tiny_cfg(aux_dim=0).head_width == 3


class TestFastState:
    def test_zero_init(self):
        cfg = tiny_cfg("hebbian")
        state = init_fast_state(cfg)
        for l in cfg.plastic_layers:
            assert np.linalg.norm(state.w[l].data) == 0.0
            assert np.linalg.norm(state.b[l].data) == 0.0
        assert state.t == 0
        assert all(kv is None for layer in state.kv for kv in layer)

    def test_rule_none_state_still_allocated(self):
        state = init_fast_state(tiny_cfg("none"))
        assert set(state.w) == {0, 1, 2, 3}

    def test_first_step_matches_cacheless_forward(self):
        cfg = tiny_cfg("none")
        params = StaticParams.init(cfg, 11)
        x = np.random.default_rng(0).normal(size=(1, 3))
        step, _ = forward_step(params, init_fast_state(cfg), x[0])
        ref = reference_forward_sequence(params, x)
        assert np.abs(head_row(step) - ref[0]).max() < 1e-12


class TestForward:
    def test_stepwise_equals_cacheless_sequence(self):
        cfg = tiny_cfg("none")
        params = StaticParams.init(cfg, 23)
        rng = np.random.default_rng(5)
        xs = rng.normal(size=(7, 3))
        ref = reference_forward_sequence(params, xs)
        state = init_fast_state(cfg)
        with T.no_grad():
            for t in range(7):
                step, state = forward_step(params, state, xs[t])
                assert np.abs(head_row(step) - ref[t]).max() < 1e-10

    def test_zero_fast_weights_match_none_rule_exactly(self):
        """Effective weights with w=0 equal the non-plastic forward."""
        cfg_p = tiny_cfg("hebbian")
        cfg_n = tiny_cfg("none")
        pp = StaticParams.init(cfg_p, 3)
        pn = StaticParams.init(cfg_n, 3)
        # shared tensors must be identical by name regardless of rule
        for name in pn.names():
            assert np.array_equal(pp[name].data, pn[name].data)
        x = np.random.default_rng(1).normal(size=3)
        sp, _ = forward_step(pp, init_fast_state(cfg_p), x)
        sn, _ = forward_step(pn, init_fast_state(cfg_n), x)
        assert np.array_equal(head_row(sp), head_row(sn))

    def test_effective_weight_additivity(self):
        """Forward with (W, w) equals forward with (W + w, 0) to 1e-12."""
        cfg = tiny_cfg("hebbian")
        params = StaticParams.init(cfg, 7)
        rng = np.random.default_rng(2)
        state = init_fast_state(cfg)
        for l in cfg.plastic_layers:
            state.w[l].data = rng.normal(scale=0.1,
                                         size=state.w[l].data.shape)
        x = rng.normal(size=3)
        step_plastic, _ = forward_step(params, state, x)

        folded = StaticParams.init(cfg, 7)
        for l in cfg.plastic_layers:
            block_i, which = divmod(l, 2)
            name = f"block{block_i}.ff{which + 1}.w"
            folded.tensors[name].data = params[name].data + state.w[l].data
        step_folded, _ = forward_step(folded, init_fast_state(cfg), x)
        assert np.abs(head_row(step_plastic)
                      - head_row(step_folded)).max() < 1e-12

    def test_causality_under_future_input_change(self):
        cfg = tiny_cfg("none")
        params = StaticParams.init(cfg, 9)
        rng = np.random.default_rng(3)
        xs = rng.normal(size=(6, 3))
        xs2 = xs.copy()
        xs2[4:] = rng.normal(size=(2, 3))  # change the future only

        def outputs(seq):
            state = init_fast_state(cfg)
            rows = []
            with T.no_grad():
                for t in range(len(seq)):
                    step, state = forward_step(params, state, seq[t])
                    rows.append(head_row(step))
            return np.stack(rows)

        a, b = outputs(xs), outputs(xs2)
        assert np.array_equal(a[:4], b[:4])
        assert not np.array_equal(a[4:], b[4:])

    def test_fast_weight_perturbation_only_affects_later_positions(self):
        cfg = tiny_cfg("hebbian")
        params = StaticParams.init(cfg, 13)
        rng = np.random.default_rng(4)
        xs = rng.normal(size=(5, 3))
        t_perturb = 3

        def outputs(perturb):
            state = init_fast_state(cfg)
            rows = []
            with T.no_grad():
                for t in range(len(xs)):
                    if perturb and t == t_perturb:
                        for l in cfg.plastic_layers:
                            state.w[l] = T.tensor(
                                state.w[l].data
                                + rng.normal(scale=0.05,
                                             size=state.w[l].data.shape))
                    step, state = forward_step(params, state, xs[t])
                    rows.append(head_row(step))
            return np.stack(rows)

        rng_state = rng.bit_generator.state
        base = outputs(False)
        rng.bit_generator.state = rng_state
        bumped = outputs(True)
        assert np.array_equal(base[:t_perturb], bumped[:t_perturb])
        assert not np.array_equal(base[t_perturb:], bumped[t_perturb:])

    def test_input_dim_mismatch(self):
        cfg = tiny_cfg()
        params = StaticParams.init(cfg, 1)
        with pytest.raises(T.ShapeError):
            forward_step(params, init_fast_state(cfg), np.zeros(5))

    def test_dropout_needs_rng_and_changes_output(self):
        cfg = tiny_cfg(dropout=0.3)
        params = StaticParams.init(cfg, 1)
        x = np.ones(3)
        with pytest.raises(ValueError):
            forward_step(params, init_fast_state(cfg), x, train=True)
        s1, _ = forward_step(params, init_fast_state(cfg), x, train=True,
                             rng=np.random.default_rng(0))
        s2, _ = forward_step(params, init_fast_state(cfg), x)
        assert not np.array_equal(head_row(s1), head_row(s2))

    def test_aux_dim_zero_ablation(self):
        cfg = tiny_cfg("gradient", aux_dim=0)
        params = StaticParams.init(cfg, 2)
        step, _ = forward_step(params, init_fast_state(cfg), np.ones(3))
        assert step.ybar is None
        assert step.y.data.shape == (1, 2)
        assert step.eta_tilde.data.shape == (1, 1)


class TestParams:
    def test_param_count_gap_is_exactly_alpha_beta(self):
        cfg_n = tiny_cfg("none")
        cfg_h = tiny_cfg("hebbian")
        cfg_g = tiny_cfg("gradient")
        n = StaticParams.init(cfg_n, 0).parameter_count()
        h = StaticParams.init(cfg_h, 0).parameter_count()
        g = StaticParams.init(cfg_g, 0).parameter_count()
        alpha_sizes = sum(np.prod(cfg_h.plastic_shape(l))
                          for l in cfg_h.plastic_layers)
        beta_sizes = sum(np.prod(cfg_g.plastic_bias_shape(l))
                         for l in cfg_g.plastic_layers)
        assert h - n == alpha_sizes
        assert g - n == alpha_sizes + beta_sizes

    def test_checkpoint_roundtrip(self, tmp_path):
        cfg = tiny_cfg("gradient")
        params = StaticParams.init(cfg, 42)
        path = tmp_path / "ckpt.json"
        params.save(path)
        loaded = StaticParams.load(path)
        assert loaded.seed == 42
        assert loaded.config == cfg
        assert loaded.names() == params.names()
        for name in params.names():
            assert np.array_equal(loaded[name].data, params[name].data)

    def test_positional_encoding_shape_and_range(self):
        pe = positional_encoding(12, 8)
        assert pe.shape == (1, 8)
        assert np.abs(pe).max() <= 1.0
