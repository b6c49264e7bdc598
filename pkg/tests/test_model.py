import numpy as np
import pytest
import torch

from engraf.errors import InvalidConfigError, ShapeMismatchError
from engraf.model import (
    BasicBlock,
    Bottleneck,
    EngrafConfig,
    build_model,
    param_count,
)

from conftest import micro_engraf_config


class TestConfig:
    def test_engraf18_head_shapes(self):
        cfg = EngrafConfig(variant="engraf", num_fine=100, num_coarse=20,
                           backbone_depth=18, graft_size=4)
        m = build_model(cfg, 0)
        assert tuple(m.fc1.weight.shape) == (100, 512)
        assert tuple(m.fc2.weight.shape) == (20, 512)
        assert tuple(m.fc3.weight.shape) == (100, 512)
        assert tuple(m.fc4.weight.shape) == (20, 256)
        assert tuple(m.fc0.weight.shape) == (100, 1792)  # 512*3 + 256

    def test_resnet_single_head(self):
        cfg = EngrafConfig(variant="resnet", num_fine=100, num_coarse=20)
        m = build_model(cfg, 0)
        assert tuple(m.fc0.weight.shape) == (100, 512)
        assert not hasattr(m, "fc1")

    def test_graft_zero_invalid(self):
        with pytest.raises(InvalidConfigError):
            EngrafConfig(variant="engraf", num_fine=10, num_coarse=2, graft_size=0)

    def test_bad_variant_and_depth(self):
        with pytest.raises(InvalidConfigError):
            EngrafConfig(variant="mlp", num_fine=10, num_coarse=2)
        with pytest.raises(InvalidConfigError):
            EngrafConfig(variant="engraf", num_fine=10, num_coarse=2,
                         backbone_depth=34)

    def test_hierarchy_depth_fixed(self):
        with pytest.raises(InvalidConfigError):
            EngrafConfig(variant="engraf", num_fine=10, num_coarse=2,
                         hierarchy_depth=2)

    def test_coarse_must_be_smaller(self):
        with pytest.raises(InvalidConfigError):
            EngrafConfig(variant="engraf", num_fine=10, num_coarse=10)

    def test_stage_override_validation(self):
        with pytest.raises(InvalidConfigError):
            EngrafConfig(variant="resnet", num_fine=4, num_coarse=2,
                         stage_widths=(8,), blocks_per_stage=(1,))
        with pytest.raises(InvalidConfigError):
            EngrafConfig(variant="resnet", num_fine=4, num_coarse=2,
                         stage_widths=(8, 16), blocks_per_stage=(1,))
        with pytest.raises(InvalidConfigError):
            EngrafConfig(variant="resnet", num_fine=4, num_coarse=2,
                         stage_widths=(8, 16))

    def test_dict_round_trip(self):
        cfg = micro_engraf_config()
        assert EngrafConfig.from_dict(cfg.to_dict()) == cfg
        full = EngrafConfig(variant="graft", num_fine=30, num_coarse=5,
                            backbone_depth=50, graft_size=3)
        assert EngrafConfig.from_dict(full.to_dict()) == full


class TestForward:
    def test_variant_heads_and_columns(self):
        x = torch.randn(2, 3, 16, 16)
        expected = {
            "resnet": {"z0": 4},
            "two_branch": {"z0": 4, "z1": 4, "z2": 2},
            "graft": {"z0": 4, "z3": 4, "z4": 2},
            "engraf": {"z0": 4, "z1": 4, "z2": 2, "z3": 4, "z4": 2},
        }
        for variant, heads in expected.items():
            m = build_model(micro_engraf_config(variant=variant), 1)
            out = m(x).present()
            assert set(out) == set(heads)
            for name, cols in heads.items():
                assert tuple(out[name].shape) == (2, cols)

    def test_wrong_channel_count(self):
        m = build_model(micro_engraf_config(), 0)
        with pytest.raises(ShapeMismatchError):
            m(torch.randn(2, 1, 16, 16))

    def test_too_small_input(self):
        cfg = EngrafConfig(variant="resnet", num_fine=4, num_coarse=2)
        m = build_model(cfg, 0)
        with pytest.raises(ShapeMismatchError):
            m(torch.randn(1, 3, 4, 4))

    def test_wrong_rank(self):
        m = build_model(micro_engraf_config(), 0)
        with pytest.raises(ShapeMismatchError):
            m(torch.randn(3, 16, 16))

    def test_eval_forward_bitwise_deterministic(self):
        m = build_model(micro_engraf_config(), 3)
        m.eval()
        x = torch.randn(4, 3, 16, 16, generator=torch.Generator().manual_seed(1))
        with torch.no_grad():
            a = m(x)
            b = m(x)
        for name, t in a.present().items():
            assert torch.equal(t, b.present()[name])

    def test_activation_maps_match_branches(self):
        m = build_model(micro_engraf_config(input_size=32), 3)
        _, feats = m(torch.randn(1, 3, 32, 32), return_features=True)
        assert set(feats.activations) == {"fine", "coarse", "graft-main", "graft-sub"}
        # 32px input, 2-stage micro plan: stage A keeps 32, stage B halves
        assert feats.activations["graft-sub"].shape[-2:] == (32, 32)
        assert feats.activations["fine"].shape[-2:] == (16, 16)

    def test_graft_sub_map_is_8x8_for_standard_depth18(self):
        cfg = EngrafConfig(variant="graft", num_fine=10, num_coarse=2,
                           backbone_depth=18, graft_size=1)
        m = build_model(cfg, 0)
        _, feats = m(torch.randn(1, 3, 32, 32), return_features=True)
        assert feats.activations["graft-sub"].shape[-2:] == (8, 8)

    def test_z0_is_fc0_of_ordered_concat(self):
        m = build_model(micro_engraf_config(), 5)
        m.eval()
        x = torch.randn(3, 3, 16, 16)
        with torch.no_grad():
            logits, feats = m(x, return_features=True)
            concat = torch.cat([feats.f1, feats.f2, feats.f3, feats.f4], dim=1)
            manual = concat @ m.fc0.weight.T + m.fc0.bias
        assert torch.allclose(logits.z0, manual, atol=1e-6)

    def test_permuting_concat_and_fc0_columns_together_is_identity(self):
        m = build_model(micro_engraf_config(), 5)
        m.eval()
        x = torch.randn(2, 3, 16, 16)
        with torch.no_grad():
            logits, feats = m(x, return_features=True)
            concat = feats.concat()
            perm = torch.randperm(concat.shape[1],
                                  generator=torch.Generator().manual_seed(9))
            permuted = concat[:, perm] @ m.fc0.weight[:, perm].T + m.fc0.bias
        assert torch.allclose(logits.z0, permuted, atol=1e-5)

    def test_imagenet_stem(self):
        cfg = EngrafConfig(variant="resnet", num_fine=4, num_coarse=2,
                           input_size=64, stem="imagenet",
                           stage_widths=(8, 16), blocks_per_stage=(1, 1))
        m = build_model(cfg, 0)
        _, feats = m(torch.randn(1, 3, 64, 64), return_features=True)
        # 7x7/2 conv + 3x3/2 pool -> 16, stage A keeps, stage B halves
        assert feats.activations["fine"].shape[-2:] == (8, 8)


class TestInit:
    def test_same_seed_same_weights(self):
        a = build_model(micro_engraf_config(), 7)
        b = build_model(micro_engraf_config(), 7)
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb
            assert torch.equal(pa, pb)

    def test_different_seed_different_weights(self):
        a = build_model(micro_engraf_config(), 7)
        b = build_model(micro_engraf_config(), 8)
        assert any(not torch.equal(pa, pb)
                   for pa, pb in zip(a.parameters(), b.parameters()))

    def test_batchnorm_identity_at_init(self):
        m = build_model(micro_engraf_config(), 0)
        for name, mod in m.named_modules():
            if isinstance(mod, torch.nn.BatchNorm2d):
                assert torch.all(mod.weight == 1.0)
                assert torch.all(mod.bias == 0.0)


def _basic_block_params(cin: int, width: int, downsample: bool) -> int:
    n = cin * width * 9 + 2 * width + width * width * 9 + 2 * width
    if downsample:
        n += cin * width + 2 * width
    return n


def _micro_resnet_param_oracle(num_fine: int) -> int:
    """Hand arithmetic for: cifar stem -> widths (4, 8), one block each,
    variant resnet, one linear head. Kept independent of the model code."""
    stem = 3 * 4 * 9 + 2 * 4
    stage_a = _basic_block_params(4, 4, downsample=False)   # stride 1, same width
    stage_b = _basic_block_params(4, 8, downsample=True)    # stride 2
    head = 8 * num_fine + num_fine
    return stem + stage_a + stage_b + head


class TestParamCount:
    def test_seed_independent(self):
        cfg = micro_engraf_config()
        assert param_count(build_model(cfg, 1)) == param_count(build_model(cfg, 2))

    def test_engraf_strictly_larger_than_resnet(self):
        kw = dict(num_fine=100, num_coarse=20, backbone_depth=18)
        engraf = build_model(EngrafConfig(variant="engraf", graft_size=4, **kw), 0)
        resnet = build_model(EngrafConfig(variant="resnet", **kw), 0)
        assert param_count(engraf) > param_count(resnet)

    def test_micro_two_stage_oracle(self):
        cfg = EngrafConfig(variant="resnet", num_fine=4, num_coarse=2,
                           stage_widths=(4, 8), blocks_per_stage=(1, 1),
                           input_size=16)
        assert param_count(build_model(cfg, 0)) == _micro_resnet_param_oracle(4)

    def test_graft_increment_is_one_block(self):
        for depth, width_mult in ((18, 1), (50, 4)):
            kw = dict(variant="engraf", num_fine=12, num_coarse=3,
                      backbone_depth=depth)
            small = param_count(build_model(EngrafConfig(graft_size=2, **kw), 0))
            big = param_count(build_model(EngrafConfig(graft_size=3, **kw), 0))
            c = 256 * width_mult
            assert big - small == 9 * c * c + 2 * c

    def test_expansion_dimensions_depth50(self):
        cfg = EngrafConfig(variant="engraf", num_fine=100, num_coarse=20,
                           backbone_depth=50, graft_size=4)
        m = build_model(cfg, 0)
        assert tuple(m.fc1.weight.shape) == (100, 2048)
        assert tuple(m.fc4.weight.shape) == (20, 1024)
        assert tuple(m.fc0.weight.shape) == (100, 2048 * 3 + 1024)

    def test_block_expansions(self):
        assert BasicBlock.expansion == 1
        assert Bottleneck.expansion == 4
