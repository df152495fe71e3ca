import numpy as np
import pytest

from anchorcodec.partition import PartitionConfig, partition
from anchorcodec.scene import canonical_order, scenes_identical, similarity_report
from anchorcodec.synth import SynthConfig, synthesize


@pytest.mark.parametrize("kind", ["grid", "clustered", "correlated"])
def test_deterministic(kind):
    cfg = SynthConfig(kind=kind, n_anchors=343, seed=5)
    a, b = synthesize(cfg), synthesize(cfg)
    assert scenes_identical(a, b)
    assert canonical_order(a).tolist() == list(range(343))


def test_seed_changes_scene():
    a = synthesize(SynthConfig(kind="clustered", n_anchors=100, seed=1))
    b = synthesize(SynthConfig(kind="clustered", n_anchors=100, seed=2))
    assert not scenes_identical(a, b)


def test_grid_positions():
    scene = synthesize(SynthConfig(kind="grid", n_anchors=1000, seed=0))
    assert len(scene) == 1000
    assert np.array_equal(scene.positions, np.round(scene.positions))
    assert len(np.unique(scene.positions, axis=0)) == 1000


def test_grid_needs_cube():
    with pytest.raises(ValueError):
        SynthConfig(kind="grid", n_anchors=999)


def test_shapes_and_float32():
    scene = synthesize(SynthConfig(kind="clustered", n_anchors=200, seed=3, feature_dim=8,
                                   n_offsets=4))
    assert scene.features.shape == (200, 8) and scene.offsets.shape == (200, 4, 3)
    for arr in (scene.positions, scene.features, scene.scaling, scene.offsets):
        assert np.array_equal(arr.astype(np.float32).astype(np.float64), arr)
    assert scene.masks.mean() == pytest.approx(0.9, abs=0.05)


def test_correlated_parent_similarity():
    cfg = SynthConfig(kind="correlated", n_anchors=1000, seed=0)
    scene = synthesize(cfg)
    part = partition(scene, PartitionConfig(levels=cfg.levels, tau=cfg.tau))
    assert similarity_report(scene, part).mean() >= 0.9


def test_iid_scene_has_no_parent_signal():
    cfg = SynthConfig(kind="clustered", n_anchors=1000, seed=0)
    scene = synthesize(cfg)
    part = partition(scene, PartitionConfig(levels=cfg.levels, tau=cfg.tau))
    assert similarity_report(scene, part).mean() < 0.2


def test_unknown_kind():
    with pytest.raises(ValueError):
        SynthConfig(kind="spiral")
