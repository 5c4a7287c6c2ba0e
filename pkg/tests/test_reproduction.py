"""
Scaled reproduction runs on real MNIST.

These train full networks and take CPU-hours; they run only when
PATCHCERT_DATA points at a directory with the MNIST IDX files and are marked
slow (deselect with ``-m "not slow"``).
"""

import os
from pathlib import Path

import numpy as np
import pytest

from patchcert import functional as F
from patchcert.attacks import AttackConfig, LGSParams, empirical_adversarial_accuracy, tune_lgs
from patchcert.certifier import certified_accuracy, certify_patch, placement_grid
from patchcert.config import load_preset, merge, train_config_from
from patchcert.datasets import load_dataset
from patchcert.models import build_network
from patchcert.optim import Adam
from patchcert.tensor import Tensor
from patchcert.threats import PatchPlacement, ShapeMask, ThreatModel, make_shape
from patchcert.training import stages_from_groups, train

DATA = os.environ.get("PATCHCERT_DATA")

pytestmark = [
    pytest.mark.slow,
    pytest.mark.skipif(
        not DATA or not Path(DATA).is_dir(), reason="PATCHCERT_DATA is not set"
    ),
]

SQUARE2 = ThreatModel(mask=make_shape("square", 4))


@pytest.fixture(scope="module")
def mnist():
    return load_dataset("mnist", DATA, "train"), load_dataset("mnist", DATA, "test")


def run_preset(mnist, name, **overrides):
    train_set, test_set = mnist
    config = train_config_from(merge(load_preset(name), overrides))
    net = build_network("mlp255", train_set.image_shape, seed=config.seed)
    if name == "mnist-pool2":
        config.pool_stages = stages_from_groups(net, [(2, 2)])
        config.validate()
    return train(net, train_set, config, test_set.take(config.eval_size)).net


@pytest.fixture(scope="module")
def smoke_net(mnist):
    return run_preset(mnist, "mnist-smoke")


def test_smoke_schedule_certifies(smoke_net, mnist):
    summary = certified_accuracy(smoke_net, mnist[1], SQUARE2, early_exit=True)
    assert summary.certified_accuracy >= 0.70


def test_soundness_sandwich(smoke_net, mnist):
    sample = mnist[1].take(200)
    certified = certified_accuracy(smoke_net, sample, SQUARE2, early_exit=True)
    attacked = empirical_adversarial_accuracy(smoke_net, sample, SQUARE2, AttackConfig(steps=50))
    assert certified.certified_accuracy <= attacked.adversarial_accuracy <= attacked.clean_accuracy


def test_shape_transfer(smoke_net, mnist):
    sample = mnist[1].take(500)
    square = certified_accuracy(smoke_net, sample, SQUARE2, early_exit=True).certified_accuracy
    for kind in ("line", "diamond", "parallelogram"):
        threat = ThreatModel(mask=make_shape(kind, 4))
        other = certified_accuracy(smoke_net, sample, threat, early_exit=True).certified_accuracy
        assert abs(other - square) <= 0.04, kind


def test_subset_masks_are_dominated(smoke_net, mnist):
    sample = mnist[1].take(100)
    inner = ShapeMask.from_cells([(0, 0), (1, 1)])
    grid = placement_grid(SQUARE2.mask, sample.image_shape[1:])
    for image, label in zip(sample.images, sample.labels):
        for placement in grid.placements:
            outer = certify_patch(smoke_net, image, int(label), SQUARE2, placements=[placement])
            if outer.certified:
                inside = PatchPlacement(inner, placement.anchor)
                result = certify_patch(
                    smoke_net, image, int(label), ThreatModel(mask=inner), placements=[inside]
                )
                assert result.certified


def test_random_patch_schedule(mnist):
    net = run_preset(mnist, "mnist-random10")
    summary = certified_accuracy(net, mnist[1], SQUARE2, early_exit=True)
    assert summary.clean_accuracy >= 0.97
    assert summary.certified_accuracy >= 0.80


def test_sparse_single_pixel(mnist):
    net = run_preset(mnist, "mnist-sparse1")
    summary = certified_accuracy(net, mnist[1], ThreatModel(kind="sparse", k=1))
    assert summary.clean_accuracy >= 0.96
    assert summary.certified_accuracy >= 0.90


def test_pooling_costs_little(mnist):
    short = {"epochs": 20, "warmup": 12}
    sample = mnist[1].take(1000)
    pooled = run_preset(mnist, "mnist-pool2", **short)
    plain = run_preset(mnist, "mnist-all", **short)
    pooled_acc = certified_accuracy(pooled, sample, SQUARE2, early_exit=True).certified_accuracy
    plain_acc = certified_accuracy(plain, sample, SQUARE2, early_exit=True).certified_accuracy
    assert pooled_acc >= plain_acc - 0.03


def test_guided_keeps_up_with_random(mnist):
    short = {"epochs": 20, "warmup": 12}
    sample = mnist[1].take(1000)
    scores = {}
    for preset in ("mnist-guided10", "mnist-random10"):
        accuracies = [
            certified_accuracy(
                run_preset(mnist, preset, seed=seed, **short), sample, SQUARE2, early_exit=True
            ).certified_accuracy
            for seed in range(3)
        ]
        scores[preset] = float(np.mean(accuracies))
    assert scores["mnist-guided10"] >= scores["mnist-random10"] - 0.01


def plain_train(net, dataset, epochs=3, batch_size=128, seed=0):
    rng = np.random.default_rng(seed)
    optimizer = Adam(net.parameters(), lr=1e-3)
    for _ in range(epochs):
        order = rng.permutation(len(dataset))
        for start in range(0, len(order), batch_size):
            index = order[start : start + batch_size]
            loss = F.softmax_cross_entropy(net(Tensor(dataset.images[index])), dataset.labels[index])
            net.zero_grad()
            loss.backward()
            optimizer.step()
    return net


def test_defense_aware_attack_breaks_lgs(mnist):
    train_set, test_set = mnist
    net = plain_train(build_network("mlp255", train_set.image_shape, seed=0), train_set.take(10000))

    sample = test_set.take(100)
    threat = ThreatModel(mask=make_shape("square", 25))
    base = AttackConfig(steps=30, step_size=0.1, locations="corners")
    tuning = tune_lgs(net, sample, threat, base)
    unaware = AttackConfig(**dict(base.to_dict(), lgs=tuning.best, defense="lgs"))
    aware = AttackConfig(**dict(base.to_dict(), lgs=tuning.best, defense="lgs", defense_aware=True))
    unaware_acc = empirical_adversarial_accuracy(net, sample, threat, unaware).adversarial_accuracy
    aware_acc = empirical_adversarial_accuracy(net, sample, threat, aware).adversarial_accuracy
    assert aware_acc <= unaware_acc - 0.20
    assert isinstance(tuning.best, LGSParams)
