"""
Tests for local gradient smoothing, IFGSM patch attacks and empirical
robust accuracy.
"""

import numpy as np
import pytest

from patchcert.attacks import (
    AttackConfig,
    LGSParams,
    attack_image,
    attack_placements,
    defended_predict,
    empirical_adversarial_accuracy,
    ifgsm_patch,
    ifgsm_patches,
    lgs_gradient_map,
    lgs_preprocess,
    smooth,
    tune_lgs,
)
from patchcert.certifier import certified_accuracy, placement_grid
from patchcert.datasets import Dataset
from patchcert.errors import ConfigError
from patchcert.tensor import Tensor
from patchcert.threats import PatchPlacement, ThreatModel, make_shape

from conftest import make_mlp

SQUARE2 = ThreatModel(mask=make_shape("square", 4))


def direct_lgs(image: np.ndarray, lam: float, window: int) -> np.ndarray:
    """Per-pixel smoothing without thresholding, each window scaled by its own peak."""
    channels, height, width = image.shape
    magnitude = np.zeros((height, width))
    for r in range(height):
        for c in range(width):
            total = 0.0
            for ch in range(channels):
                dx = image[ch, r, c + 1] - image[ch, r, c] if c < width - 1 else 0.0
                dy = image[ch, r + 1, c] - image[ch, r, c] if r < height - 1 else 0.0
                total += np.sqrt(dx * dx + dy * dy)
            magnitude[r, c] = total / channels
    g = np.zeros_like(magnitude)
    for top in range(0, height, window):
        for left in range(0, width, window):
            block = magnitude[top : top + window, left : left + window]
            if block.max() > 0:
                g[top : top + window, left : left + window] = block / block.max()
    return np.clip(image * (1.0 - lam * g[None]), 0.0, 1.0)


def edge_image() -> np.ndarray:
    image = np.full((1, 8, 8), 0.2, dtype=np.float32)
    image[:, :, :4] = 1.0
    return image


def two_edge_image() -> np.ndarray:
    # Strong edge at column 1 (step 0.8), weaker edge at column 5 (step 0.4)
    image = np.full((1, 4, 8), 0.1, dtype=np.float32)
    image[:, :, :2] = 0.9
    image[:, :, 6:] = 0.5
    return image


def constant_logit_net(favored: int = 0):
    net = make_mlp()
    net.last.weight.data[:] = 0.0
    net.last.bias.data[:] = 0.0
    net.last.bias.data[favored] = 1.0
    return net


def biased_net(seed: int, favored: int, gap: float):
    net = make_mlp(seed=seed)
    net.last.bias.data[favored] = gap
    return net


class TestLGS:
    def test_constant_image_is_unchanged(self):
        image = np.full((3, 8, 8), 0.6, dtype=np.float32)
        np.testing.assert_array_equal(lgs_preprocess(image, LGSParams(lam=4.0)), image)
        assert not lgs_gradient_map(image[None], LGSParams()).any()

    def test_zero_lambda_is_the_identity(self, rng):
        image = rng.uniform(0, 1, size=(1, 8, 8)).astype(np.float32)
        np.testing.assert_array_equal(lgs_preprocess(image, LGSParams(lam=0.0)), image)

    def test_sharp_edge(self):
        out = lgs_preprocess(edge_image(), LGSParams(lam=0.5, window=4, threshold=0.0))
        np.testing.assert_allclose(out[0, :, 3], 0.5)
        np.testing.assert_array_equal(np.delete(out, 3, axis=2), np.delete(edge_image(), 3, axis=2))

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_direct_formula(self, seed):
        rng = np.random.default_rng(seed)
        image = rng.uniform(0, 1, size=(3, 6, 7)).astype(np.float32)
        out = lgs_preprocess(image, LGSParams(lam=1.0, window=2, threshold=0.0))
        np.testing.assert_allclose(out, direct_lgs(image.astype(np.float64), 1.0, 2), atol=1e-6)

    def test_weak_windows_are_suppressed(self):
        # The edge column fills a quarter of each 4x4 window on its side
        kept = lgs_gradient_map(edge_image()[None], LGSParams(window=4, threshold=0.2))
        dropped = lgs_gradient_map(edge_image()[None], LGSParams(window=4, threshold=0.3))
        assert kept[0, 0, :, 3].min() == 1.0
        assert not dropped.any()

    def test_each_window_is_scaled_by_its_own_peak(self):
        g = lgs_gradient_map(two_edge_image()[None], LGSParams(window=4, threshold=0.1))
        np.testing.assert_allclose(g[0, 0, :, 1], 1.0)
        np.testing.assert_allclose(g[0, 0, :, 5], 1.0)
        assert np.count_nonzero(g) == 8

    def test_window_weak_against_the_image_is_suppressed(self):
        # Strengths relative to the image peak: 0.25 on the left, 0.125 on the right
        g = lgs_gradient_map(two_edge_image()[None], LGSParams(window=4, threshold=0.2))
        np.testing.assert_allclose(g[0, 0, :, 1], 1.0)
        assert not g[0, 0, :, 4:].any()
        out = lgs_preprocess(two_edge_image(), LGSParams(lam=0.5, window=4, threshold=0.2))
        np.testing.assert_array_equal(out[0, :, 4:], two_edge_image()[0, :, 4:])
        np.testing.assert_allclose(out[0, :, 1], 0.45)

    def test_never_brightens(self, rng):
        images = rng.uniform(0, 1, size=(4, 3, 8, 8)).astype(np.float32)
        out = lgs_preprocess(images, LGSParams(lam=2.0, window=2, threshold=0.05))
        assert np.all(out <= images)
        assert np.all(out >= 0.0)

    def test_smoothing_gradient_holds_the_map_fixed(self, rng):
        images = rng.uniform(0, 1, size=(2, 1, 6, 6)).astype(np.float32)
        params = LGSParams(lam=0.5, window=2, threshold=0.1)
        leaf = Tensor(images, requires_grad=True)
        out = smooth(leaf, params)
        np.testing.assert_allclose(out.data, lgs_preprocess(images, params), atol=1e-6)
        out.sum().backward()
        expected = np.broadcast_to(1.0 - params.lam * lgs_gradient_map(images, params), images.shape)
        np.testing.assert_allclose(leaf.grad, expected, atol=1e-6)

    @pytest.mark.parametrize(
        "params", [LGSParams(lam=-1.0), LGSParams(window=0), LGSParams(threshold=1.5)]
    )
    def test_invalid_params(self, params):
        with pytest.raises(ConfigError):
            params.validate()


class TestAttackConfig:
    def test_defaults(self):
        config = AttackConfig()
        config.validate()
        assert (config.steps, config.step_size, config.restarts) == (50, 0.05, 1)

    @pytest.mark.parametrize(
        "overrides",
        [
            {"steps": -1},
            {"step_size": 0.0},
            {"restarts": -1},
            {"locations": "edges"},
            {"locations": "list"},
            {"stride": 0},
            {"defense": "watermark"},
            {"placement_batch": 0},
            {"lgs": LGSParams(window=0)},
        ],
    )
    def test_invalid(self, overrides):
        with pytest.raises(ConfigError):
            AttackConfig(**overrides).validate()

    def test_location_sets(self):
        grid = placement_grid(SQUARE2.mask, (6, 6))
        assert attack_placements(grid, AttackConfig(locations="corners")) == [0, 4, 20, 24]
        assert attack_placements(grid, AttackConfig(locations="list", anchors=[(1, 2)])) == [7]
        assert attack_placements(grid, AttackConfig(stride=2)) == [0, 2, 4, 10, 12, 14, 20, 22, 24]
        assert attack_placements(grid, AttackConfig()) == list(range(25))


class TestIFGSM:
    def test_zero_steps(self, mlp, image6):
        placement = PatchPlacement(SQUARE2.mask, (1, 1))
        out = ifgsm_patch(mlp, image6, 0, placement, AttackConfig(steps=0))
        np.testing.assert_array_equal(out, image6)

    @pytest.mark.parametrize("restarts", [1, 3])
    def test_only_mask_pixels_change(self, restarts, image6):
        net = make_mlp(seed=2)
        placement = PatchPlacement(SQUARE2.mask, (2, 3))
        config = AttackConfig(steps=10, step_size=0.2, restarts=restarts)
        out = ifgsm_patch(net, image6, 1, placement, config)
        mask = placement.pixel_mask((6, 6))
        np.testing.assert_array_equal(out[0][~mask], image6[0][~mask])
        assert np.all((out >= 0.0) & (out <= 1.0))

    def test_constant_logits_never_flip(self, image6):
        net = constant_logit_net(favored=2)
        grid = placement_grid(SQUARE2.mask, (6, 6))
        result = ifgsm_patches(net, image6, 2, grid.masks, AttackConfig(steps=10))
        assert not result.success.any()
        assert np.all(result.predictions == 2)

    def test_successful_attack_is_misclassified(self, rng):
        # A patch covering the whole image can always reach the other label
        net = make_mlp(seed=3)
        image = rng.uniform(0, 1, size=(1, 6, 6)).astype(np.float32)
        label = int(net.predict(image[None])[0])
        whole = np.ones((1, 6, 6), dtype=bool)
        result = ifgsm_patches(net, image, label, whole, AttackConfig(steps=100, step_size=0.05))
        if result.success[0]:
            assert net.predict(result.images)[0] != label
            assert result.predictions[0] != label

    def test_defended_predictions_use_the_defense(self, mlp, rng):
        images = rng.uniform(0, 1, size=(3, 1, 6, 6)).astype(np.float32)
        config = AttackConfig(defense="lgs", lgs=LGSParams(lam=1.0, window=2, threshold=0.0))
        expected = mlp.predict(lgs_preprocess(images, config.lgs))
        np.testing.assert_array_equal(defended_predict(mlp, images, config), expected)

    def test_defense_aware_attack_respects_the_mask(self, image6):
        net = make_mlp(seed=5)
        config = AttackConfig(
            steps=5, defense="lgs", defense_aware=True, lgs=LGSParams(lam=1.0, window=2, threshold=0.0)
        )
        grid = placement_grid(SQUARE2.mask, (6, 6))
        result = ifgsm_patches(net, image6, 0, grid.masks[:4], config)
        for mask, adversarial in zip(grid.masks[:4], result.images):
            np.testing.assert_array_equal(adversarial[0][~mask], image6[0][~mask])


class TestEmpiricalAccuracy:
    def dataset(self, count=6, seed=0):
        rng = np.random.default_rng(seed)
        images = rng.uniform(0, 1, size=(count, 1, 6, 6)).astype(np.float32)
        return Dataset(images, np.arange(count) % 3, num_labels=3)

    def test_sandwich(self):
        net = biased_net(4, 0, 1.5)
        dataset = self.dataset()
        certified = certified_accuracy(net, dataset, SQUARE2)
        attacked = empirical_adversarial_accuracy(
            net, dataset, SQUARE2, AttackConfig(steps=20, step_size=0.1)
        )
        assert certified.certified_accuracy <= attacked.adversarial_accuracy
        assert attacked.adversarial_accuracy <= attacked.clean_accuracy
        assert attacked.clean_accuracy == certified.clean_accuracy

    def test_constant_network_survives_everything(self):
        dataset = Dataset(self.dataset().images, np.zeros(6, dtype=np.int64), num_labels=3)
        summary = empirical_adversarial_accuracy(
            constant_logit_net(0), dataset, SQUARE2, AttackConfig(steps=3)
        )
        assert summary.adversarial_accuracy == 1.0
        assert summary.placements == 25

    def test_more_locations_never_help_the_model(self):
        net = make_mlp(seed=6)
        dataset = self.dataset(seed=1)
        corners = empirical_adversarial_accuracy(
            net, dataset, SQUARE2, AttackConfig(steps=10, step_size=0.1, locations="corners")
        )
        everywhere = empirical_adversarial_accuracy(
            net, dataset, SQUARE2, AttackConfig(steps=10, step_size=0.1)
        )
        assert everywhere.adversarial_accuracy <= corners.adversarial_accuracy
        assert corners.placements == 4

    def test_records(self):
        records, done = [], []
        net = make_mlp(seed=7)
        empirical_adversarial_accuracy(
            net, self.dataset(count=3), SQUARE2, AttackConfig(steps=2), records.append, done.append
        )
        assert done == [1, 2, 3]
        assert [r["index"] for r in records] == [0, 1, 2]
        assert set(records[0]) == {"index", "label", "anchor", "success", "final_loss", "prediction"}

    def test_misclassified_clean_image(self, image6):
        net = constant_logit_net(favored=1)
        grid = placement_grid(SQUARE2.mask, (6, 6))
        record = attack_image(
            net, image6, 0, grid, range(25), AttackConfig(steps=1), np.random.default_rng(0)
        )
        assert record == {"anchor": None, "success": True, "final_loss": None, "prediction": 1}

    def test_needs_a_patch_threat(self, mlp):
        with pytest.raises(ConfigError):
            empirical_adversarial_accuracy(
                mlp, self.dataset(), ThreatModel(kind="sparse", k=1), AttackConfig()
            )


def test_tune_lgs_keeps_the_best_grid_point():
    rng = np.random.default_rng(2)
    images = rng.uniform(0, 1, size=(3, 1, 6, 6)).astype(np.float32)
    dataset = Dataset(images, [0, 1, 2], num_labels=3)
    grid = {"lam": (0.0, 2.0), "window": (2,), "threshold": (0.0, 0.5)}
    tuning = tune_lgs(make_mlp(seed=8), dataset, SQUARE2, AttackConfig(steps=3), grid)
    assert len(tuning.table) == 4
    scores = [row["adversarial_accuracy"] for row in tuning.table]
    assert tuning.best_accuracy == max(scores)
    first = tuning.table[scores.index(max(scores))]
    assert (tuning.best.lam, tuning.best.window, tuning.best.threshold) == (
        first["lam"], first["window"], first["threshold"],
    )
