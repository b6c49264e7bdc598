import numpy as np
import pytest
import torch
from PIL import Image

from engraf.cam import (
    DEFAULT_HEAD_FOR_BRANCH,
    Heatmap,
    cam_map,
    grad_cam,
    normalized_input,
    render_overlay,
)
from engraf.data import generate_synthetic_dataset
from engraf.errors import ClassOutOfRangeError, UnknownBranchError
from engraf.model import build_model
from engraf.taxonomy import generate_synthetic_taxonomy
from engraf.train import TrainConfig, fit

from conftest import micro_engraf_config


class TestCamMap:
    def test_constant_positive_everything_gives_all_ones(self):
        acts = np.ones((4, 5, 5))
        grads = np.full((4, 5, 5), 0.3)
        out = cam_map(acts, grads)
        assert out.shape == (5, 5)
        assert np.allclose(out, 1.0)

    def test_zero_gradient_gives_all_zeros(self):
        acts = np.random.default_rng(0).normal(size=(4, 5, 5))
        out = cam_map(acts, np.zeros((4, 5, 5)))
        assert np.array_equal(out, np.zeros((5, 5), dtype=np.float32))

    def test_negative_sums_clipped_to_zero(self):
        acts = np.ones((2, 3, 3))
        grads = -np.ones((2, 3, 3))
        assert np.array_equal(cam_map(acts, grads), np.zeros((3, 3), np.float32))

    def test_range_and_idempotent_normalization(self):
        rng = np.random.default_rng(1)
        out = cam_map(rng.normal(size=(6, 7, 7)), rng.normal(size=(6, 7, 7)))
        assert out.min() >= 0.0 and out.max() <= 1.0
        assert out.max() == pytest.approx(1.0) or out.max() == 0.0
        again = cam_map(out[None, :, :], np.ones((1, 7, 7)))
        assert np.allclose(again, out, atol=1e-6)


@pytest.fixture(scope="module")
def trained_micro():
    tax = generate_synthetic_taxonomy(4, 2)
    train = generate_synthetic_dataset(tax, 24, 16, seed=31)
    test = generate_synthetic_dataset(tax, 6, 16, seed=32)
    model = build_model(micro_engraf_config(widths=(8, 16)), 13)
    cfg = TrainConfig(learning_rate=0.02, epochs=12, batch_size=16, seed=13)
    model, history = fit(model, train, test, tax, cfg)
    return model, test, history


class TestGradCam:
    def test_map_size_matches_activation(self, trained_micro):
        model, test, _ = trained_micro
        x = normalized_input(test[0])
        hm = grad_cam(model, x, "graft-sub", "z4", 0)
        assert hm.values.shape == (16, 16)  # stage A keeps 16px
        hm2 = grad_cam(model, x, "fine", "z1", 0)
        assert hm2.values.shape == (8, 8)

    def test_values_in_unit_range(self, trained_micro):
        model, test, _ = trained_micro
        for branch in ("fine", "coarse", "graft-main", "graft-sub"):
            head = DEFAULT_HEAD_FOR_BRANCH[branch]
            hm = grad_cam(model, normalized_input(test[1]), branch, head, 1)
            assert hm.values.min() >= 0.0
            assert hm.values.max() <= 1.0
            assert hm.source_branch == branch

    def test_zero_gradient_guard(self, trained_micro):
        model, test, _ = trained_micro
        # a head row with zeroed weights has constant score: gradient is 0
        with torch.no_grad():
            model.fc1.weight[2].zero_()
        hm = grad_cam(model, normalized_input(test[0]), "fine", "z1", 2)
        assert np.array_equal(hm.values, np.zeros((8, 8), dtype=np.float32))

    def test_unknown_branch(self, trained_micro):
        model, test, _ = trained_micro
        with pytest.raises(UnknownBranchError):
            grad_cam(model, normalized_input(test[0]), "stem", "z0", 0)

    def test_absent_branch_for_variant(self):
        model = build_model(micro_engraf_config(variant="resnet"), 0)
        tax = generate_synthetic_taxonomy(4, 2)
        rec = generate_synthetic_dataset(tax, 1, 16, seed=0)[0]
        with pytest.raises(UnknownBranchError):
            grad_cam(model, normalized_input(rec), "graft-sub", "z0", 0)

    def test_class_out_of_range(self, trained_micro):
        model, test, _ = trained_micro
        with pytest.raises(ClassOutOfRangeError):
            grad_cam(model, normalized_input(test[0]), "fine", "z1", 99)

    def test_class_sensitivity(self, trained_micro):
        # different target classes produce different maps on a trained model
        model, test, _ = trained_micro
        x = normalized_input(test[0])
        a = grad_cam(model, x, "fine", "z1", 0).values
        b = grad_cam(model, x, "fine", "z1", 3).values
        assert np.abs(a - b).max() > 0.0

    def test_branch_maps_differ(self, trained_micro):
        model, test, _ = trained_micro
        diff = 0
        for i in range(4):
            x = normalized_input(test[i])
            fine_map = grad_cam(model, x, "fine", "z1", 0).values
            sub_map = grad_cam(model, x, "graft-sub", "z4", 0).values
            up = torch.nn.functional.interpolate(
                torch.from_numpy(sub_map)[None, None], size=fine_map.shape,
                mode="bilinear", align_corners=False)[0, 0].numpy()
            if np.abs(fine_map - up).max() > 0:
                diff += 1
        assert diff >= 3


class TestRenderOverlay:
    def test_alpha_zero_reproduces_image(self, tmp_path, tiny_tax):
        rec = generate_synthetic_dataset(tiny_tax, 1, 16, seed=3)[0]
        hm = Heatmap(values=np.random.default_rng(0).random((8, 8)).astype(np.float32),
                     source_branch="fine", target_class=0, target_head="z1")
        out = tmp_path / "o.png"
        render_overlay(hm, rec, 0.0, out)
        with Image.open(out) as im:
            got = np.asarray(im.convert("RGB")).transpose(2, 0, 1)
        assert np.array_equal(got, rec.pixels)

    def test_output_dimensions(self, tmp_path, tiny_tax):
        rec = generate_synthetic_dataset(tiny_tax, 1, 32, seed=3)[0]
        hm = Heatmap(values=np.ones((4, 4), dtype=np.float32),
                     source_branch="fine", target_class=0, target_head="z1")
        out = tmp_path / "o.png"
        render_overlay(hm, rec, 0.4, out)
        with Image.open(out) as im:
            assert im.size == (32, 32)

    def test_zero_map_blends_uniform_zero_color(self, tmp_path, tiny_tax):
        rec = generate_synthetic_dataset(tiny_tax, 1, 16, seed=3)[0]
        rec.pixels[:] = 100
        hm = Heatmap(values=np.zeros((8, 8), dtype=np.float32),
                     source_branch="fine", target_class=0, target_head="z1")
        out = tmp_path / "o.png"
        render_overlay(hm, rec, 0.4, out)
        with Image.open(out) as im:
            got = np.asarray(im.convert("RGB"))
        # every pixel equals the same blend of gray 100 and the zero color
        assert len(np.unique(got.reshape(-1, 3), axis=0)) == 1
        expected = np.round((1 - 0.4) * 100 + 0.4 * np.array([0, 0, 127.5]))
        assert np.array_equal(got[0, 0], expected.astype(np.uint8))

    def test_alpha_validated(self, tmp_path, tiny_tax):
        rec = generate_synthetic_dataset(tiny_tax, 1, 16, seed=3)[0]
        hm = Heatmap(values=np.zeros((4, 4), dtype=np.float32),
                     source_branch="fine", target_class=0, target_head="z1")
        with pytest.raises(ValueError):
            render_overlay(hm, rec, 1.5, tmp_path / "x.png")
