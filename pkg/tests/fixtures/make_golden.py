"""Regenerate the golden scene, model and bitstream in this directory.

    python tests/fixtures/make_golden.py

Only rerun this for a deliberate format change; test_golden.py checks that
encoding the stored scene with the stored model reproduces golden.cgsc.
"""

from __future__ import annotations

import sys
from pathlib import Path

HERE = Path(__file__).parent
sys.path.insert(0, str(HERE.parent))

from anchorcodec.codec import encode_scene  # noqa: E402
from anchorcodec.modelio import save_model  # noqa: E402
from anchorcodec.partition import PartitionConfig, partition  # noqa: E402
from anchorcodec.scene import save_scene  # noqa: E402
from anchorcodec.synth import SynthConfig, synthesize  # noqa: E402
from conftest import small_model  # noqa: E402

SYNTH = SynthConfig(kind="correlated", n_anchors=64, seed=7, feature_dim=8, n_offsets=2)
PARTITION = PartitionConfig(levels=3, tau=0.3)


def build():
    scene = synthesize(SYNTH)
    part = partition(scene, PARTITION)
    model = small_model(scene, PARTITION.levels, seed=11, hyper_dim=2, hidden=8).as_stored()
    return scene, part, model


if __name__ == "__main__":
    scene, part, model = build()
    save_scene(scene, HERE / "golden_scene.ply")
    save_model(model, HERE / "golden_model.cgsm")
    (HERE / "golden.cgsc").write_bytes(encode_scene(scene, part, model).data)
