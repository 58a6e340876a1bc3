"""Topology, shapes, counting, and serialization checks for the six families."""

import numpy as np
import pytest

from dwnet import models, tensor as T
from dwnet.models import Family, ModelConfig, build, describe, param_count
from dwnet.tensor import PaddingMode, Tape

ALL_FAMILIES = [
    (Family.UNET_BASE, 1),
    (Family.UNET_MOD, 1),
    (Family.CNU_NET, 1),
    (Family.UNET_DEEP, 1),
    (Family.SINE_NET, 2),
    (Family.DW_NET, 3),
]


def cfg_for(family, waves, width=4, levels=5, cin=4, cout=1):
    return ModelConfig(family=family, in_channels=cin, out_channels=cout,
                       width=width, levels=levels, waves=waves)


def counted_params(records) -> int:
    """Independent per-layer counting over the declared wiring."""
    total = 0
    for r in records:
        if r.kind in ("conv3x3", "conv1x1", "conv7x7dw", "conv2x2s2"):
            total += r.out_channels * (r.in_channels // r.groups) * r.kernel ** 2
            total += r.out_channels
        elif r.kind == "convT2x2":
            total += r.in_channels * r.out_channels * 4 + r.out_channels
        elif r.kind == "group_norm":
            total += 2 * r.out_channels
    return total


class TestShapes:
    @pytest.mark.parametrize("family,waves", ALL_FAMILIES)
    @pytest.mark.parametrize("size", [32, 64])
    def test_forward_preserves_spatial_shape(self, family, waves, size):
        model = build(cfg_for(family, waves), seed=0)
        x = np.random.default_rng(0).standard_normal((2, 4, size, size)).astype(np.float32)
        out = model.forward(x)
        assert out.data.shape == (2, 1, size, size)
        assert np.all(np.isfinite(out.data))

    def test_128_grid(self):
        model = build(cfg_for(Family.UNET_BASE, 1), seed=0)
        x = np.zeros((1, 4, 128, 128), np.float32)
        assert model.forward(x).data.shape == (1, 1, 128, 128)

    def test_input_channel_mismatch_raises(self):
        model = build(cfg_for(Family.UNET_BASE, 1), seed=0)
        with pytest.raises(T.ShapeError):
            model.forward(np.zeros((1, 3, 32, 32), np.float32))

    def test_indivisible_spatial_size_raises(self):
        model = build(cfg_for(Family.UNET_BASE, 1), seed=0)
        with pytest.raises(T.ShapeError):
            model.forward(np.zeros((1, 4, 24, 24), np.float32))


class TestConfigValidation:
    def test_waves_must_be_one_for_single_wave_families(self):
        with pytest.raises(ValueError):
            build(ModelConfig(Family.UNET_BASE, 4, 1, waves=2), seed=0)

    def test_multi_wave_families_need_two_waves(self):
        with pytest.raises(ValueError):
            build(ModelConfig(Family.DW_NET, 4, 1, waves=1), seed=0)

    def test_levels_lower_bound(self):
        with pytest.raises(ValueError):
            build(ModelConfig(Family.UNET_BASE, 4, 1, levels=1), seed=0)


class TestTopology:
    @pytest.mark.parametrize("family,waves", ALL_FAMILIES)
    def test_five_levels_with_doubling_widths(self, family, waves):
        model = build(cfg_for(family, waves), seed=0)
        blocks = [r for r in describe(model) if r.kind == "block"]
        levels_seen = {r.level for r in blocks}
        assert levels_seen == set(range(5))
        for r in blocks:
            assert r.out_channels == 4 * 2 ** r.level

    def test_dwnet_cross_wave_concats_at_all_inner_levels(self):
        model = build(cfg_for(Family.DW_NET, 3), seed=0)
        recs = describe(model)
        for wave in (2, 3):
            levels = {r.level for r in recs
                      if r.kind == "concat" and r.role == "cross-wave" and r.wave == wave}
            assert levels.issuperset({1, 2, 3, 4}), \
                f"wave {wave} missing cross-wave levels: {sorted(levels)}"

    def test_sinenet_has_no_cross_wave_concats(self):
        model = build(cfg_for(Family.SINE_NET, 2), seed=0)
        assert not any(r.role == "cross-wave" for r in describe(model))

    def test_dwnet_intermediate_waves_skip_level_zero(self):
        model = build(cfg_for(Family.DW_NET, 3), seed=0)
        recs = describe(model)
        assert not any(r.wave == 2 and r.level == 0 for r in recs)
        wave1_l0 = [r for r in recs if r.wave == 1 and r.level == 0 and r.kind == "block"]
        wave3_l0 = [r for r in recs if r.wave == 3 and r.level == 0 and r.kind == "block"]
        assert wave1_l0 and wave3_l0

    def test_unet_deep_blocks_have_four_convs(self):
        model = build(cfg_for(Family.UNET_DEEP, 1), seed=0)
        recs = describe(model)
        for blk in (r for r in recs if r.kind == "block"):
            convs = [r for r in recs
                     if r.name.startswith(blk.name + ".") and r.role == "block-conv"]
            assert len(convs) == 4, blk.name

    def test_cnunet_block_structure(self):
        model = build(cfg_for(Family.CNU_NET, 1), seed=0)
        recs = describe(model)
        for blk in (r for r in recs if r.kind == "block"):
            inner = [r for r in recs if r.name.startswith(blk.name + ".")]
            dws = [r for r in inner if r.kind == "conv7x7dw"]
            ones = [r for r in inner if r.kind == "conv1x1" and r.role in ("expand", "contract")]
            assert len(dws) == 1
            assert len(ones) == 2
            expand, contract = ones
            assert expand.out_channels == 4 * expand.in_channels
            assert contract.in_channels == 4 * contract.out_channels

    def test_bottleneck_depth_base_vs_mod(self):
        base = build(cfg_for(Family.UNET_BASE, 1), seed=0)
        mod = build(cfg_for(Family.UNET_MOD, 1), seed=0)
        n_base = len({r.name for r in describe(base)
                      if r.kind == "block" and "bneck" in r.name})
        n_mod = len({r.name for r in describe(mod)
                     if r.kind == "block" and "bneck" in r.name})
        assert n_base == 1 and n_mod == 3

    def test_unet_mod_uses_learned_downsampling(self):
        mod = build(cfg_for(Family.UNET_MOD, 1), seed=0)
        recs = describe(mod)
        assert any(r.kind == "conv2x2s2" for r in recs)
        assert not any(r.kind == "max_pool" for r in recs)

    def test_pool_choice_per_family(self):
        for fam, waves, pool in [(Family.UNET_BASE, 1, "max_pool"),
                                 (Family.CNU_NET, 1, "max_pool"),
                                 (Family.UNET_DEEP, 1, "max_pool"),
                                 (Family.SINE_NET, 2, "avg_pool"),
                                 (Family.DW_NET, 2, "avg_pool")]:
            recs = describe(build(cfg_for(fam, waves), seed=0))
            assert any(r.kind == pool for r in recs), fam


class TestParamCount:
    @pytest.mark.parametrize("family,waves", ALL_FAMILIES)
    def test_matches_layerwise_counting_oracle(self, family, waves):
        model = build(cfg_for(family, waves), seed=0)
        assert param_count(model) == counted_params(describe(model))

    def test_two_level_unet_base_case(self):
        model = build(ModelConfig(Family.UNET_BASE, 1, 1, width=4, levels=2), seed=0)
        assert param_count(model) == counted_params(describe(model))

    @pytest.mark.parametrize("family,waves", ALL_FAMILIES)
    def test_monotone_in_width(self, family, waves):
        small = build(cfg_for(family, waves, width=4), seed=0)
        large = build(cfg_for(family, waves, width=8), seed=0)
        assert param_count(large) > param_count(small)

    def test_unet_mod_larger_than_base(self):
        base = build(cfg_for(Family.UNET_BASE, 1), seed=0)
        mod = build(cfg_for(Family.UNET_MOD, 1), seed=0)
        assert param_count(mod) > param_count(base)


class TestGradients:
    @pytest.mark.parametrize("family,waves", ALL_FAMILIES)
    def test_every_parameter_reachable(self, family, waves):
        model = build(cfg_for(family, waves, levels=4), seed=0)
        rng = np.random.default_rng(1)
        x = rng.standard_normal((1, 4, 16, 16)).astype(np.float32)
        y = rng.standard_normal((1, 1, 16, 16)).astype(np.float32)
        tape = Tape()
        out, bound = model.forward_training(tape, x)
        grads = T.backward(tape, T.mse_loss(out, y))
        dead = [name for name, leaf in bound.items()
                if grads[leaf.node] is None
                or float(np.abs(grads[leaf.node]).max()) == 0.0]
        assert not dead, f"parameters with zero gradient: {dead[:8]}"

    def test_dwnet_wave1_encoder_receives_gradient(self):
        model = build(cfg_for(Family.DW_NET, 3), seed=0)
        x = np.random.default_rng(2).standard_normal((1, 4, 32, 32)).astype(np.float32)
        tape = Tape()
        out, bound = model.forward_training(tape, x)
        grads = T.backward(tape, T.tsum(out))
        w1 = [n for n in bound if n.startswith("w1.enc0")]
        assert w1
        for name in w1:
            assert float(np.abs(grads[bound[name].node]).max()) > 0


class TestDeterminismAndIdentity:
    def test_build_is_bitwise_deterministic(self):
        a = build(cfg_for(Family.DW_NET, 3), seed=7)
        b = build(cfg_for(Family.DW_NET, 3), seed=7)
        assert a.params.keys() == b.params.keys()
        for k in a.params:
            assert np.array_equal(a.params[k], b.params[k]), k

    def test_different_seeds_differ(self):
        a = build(cfg_for(Family.UNET_BASE, 1), seed=1)
        b = build(cfg_for(Family.UNET_BASE, 1), seed=2)
        assert any(not np.array_equal(a.params[k], b.params[k]) for k in a.params)

    def test_zero_input_zero_params_gives_zero_output(self):
        for fam, waves in ALL_FAMILIES:
            model = build(cfg_for(fam, waves, levels=4), seed=0)
            for name in model.params:
                if name.endswith(".bias") or name.endswith(".beta"):
                    model.params[name] = np.zeros_like(model.params[name])
            x = np.zeros((1, 4, 16, 16), np.float32)
            assert np.all(model.forward(x).data == 0), fam

    def test_sinenet2_and_dwnet2_disagree(self):
        x = np.random.default_rng(3).standard_normal((1, 4, 32, 32)).astype(np.float32)
        sine = build(cfg_for(Family.SINE_NET, 2), seed=0)
        dw = build(cfg_for(Family.DW_NET, 2), seed=0)
        assert not np.allclose(sine.forward(x).data, dw.forward(x).data)

    def test_shift_equivariance_periodic_dwnet(self):
        model = build(cfg_for(Family.DW_NET, 3, levels=4), seed=0)
        x = np.random.default_rng(4).standard_normal((1, 4, 32, 32)).astype(np.float32)
        shift = 2 ** 3  # one pixel at the coarsest level
        base = model.forward(x).data
        rolled = model.forward(np.roll(x, (shift, shift), axis=(2, 3))).data
        assert np.abs(np.roll(base, (shift, shift), axis=(2, 3)) - rolled).max() < 1e-4


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        model = build(cfg_for(Family.DW_NET, 2), seed=5)
        extras = {"adam.step": np.asarray(12.0, np.float32),
                  "adam.m.head.weight": np.random.default_rng(0)
                  .standard_normal(model.params["head.weight"].shape).astype(np.float32)}
        p = tmp_path / "model.ckpt"
        models.save_checkpoint(p, model, extras)
        loaded, extras2 = models.load_checkpoint(p)
        assert loaded.config == model.config
        assert loaded.params.keys() == model.params.keys()
        for k in model.params:
            assert np.array_equal(loaded.params[k], model.params[k]), k
        assert set(extras2) == set(extras)
        for k in extras:
            assert np.array_equal(extras2[k], extras[k])

    def test_forward_identical_after_reload(self, tmp_path):
        model = build(cfg_for(Family.UNET_MOD, 1), seed=3)
        p = tmp_path / "m.ckpt"
        models.save_checkpoint(p, model)
        loaded, _ = models.load_checkpoint(p)
        x = np.random.default_rng(0).standard_normal((1, 4, 32, 32)).astype(np.float32)
        assert np.array_equal(model.forward(x).data, loaded.forward(x).data)

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "junk.ckpt"
        p.write_bytes(b"NOTCKPT1" + b"\0" * 16)
        with pytest.raises(ValueError):
            models.load_checkpoint(p)
