import csv
import io
import json
import subprocess
import sys

import pytest

from anchorcodec.cli import main
from anchorcodec.scene import load_scene

TRAIN = ["--iterations", "30", "--hidden", "8", "--hyper-dim", "2"]


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["synth", "correlated", "-o", str(d / "s.ply"), "--anchors", "150",
                 "--seed", "3"]) == 0
    assert main(["train", str(d / "s.ply"), "-o", str(d / "m.cgsm")] + TRAIN) == 0
    return d


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_synth_writes_manifest(work):
    man = json.loads((work / "s.ply.manifest.json").read_text())
    assert man["command"] == "synth" and man["seed"] == 3
    assert len(man["sha256"]) == 64
    assert len(load_scene(work / "s.ply")) == 150


def test_train_manifest_records_inputs(work):
    man = json.loads((work / "m.cgsm.manifest.json").read_text())
    assert man["inputs"][0]["path"].endswith("s.ply")
    assert man["config"]["train"]["iterations"] == 30


def test_encode_verify_and_decode(work, capsys):
    code, out, _ = run(capsys, "encode", work / "s.ply", work / "m.cgsm", "-o", work / "s.cgsc",
                       "--verify", "--stats")
    assert code == 0 and "verify: PASS" in out
    code, _, _ = run(capsys, "decode", work / "s.cgsc", "-o", work / "back.ply")
    assert code == 0 and len(load_scene(work / "back.ply")) == 150


def test_stats_formats(work, capsys):
    run(capsys, "encode", work / "s.ply", work / "m.cgsm", "-o", work / "t.cgsc")
    code, out, _ = run(capsys, "stats", work / "t.cgsc")
    rows = list(csv.DictReader(io.StringIO(out)))
    assert code == 0 and int(rows[0]["total"]) == (work / "t.cgsc").stat().st_size
    code, out, _ = run(capsys, "stats", work / "t.cgsc", "--format", "json")
    assert json.loads(out)[0]["total"] == (work / "t.cgsc").stat().st_size


def test_external_model(work, capsys):
    run(capsys, "encode", work / "s.ply", work / "m.cgsm", "-o", work / "x.cgsc",
        "--external-model")
    code, _, err = run(capsys, "decode", work / "x.cgsc", "-o", work / "x.ply")
    assert code == 3 and "model" in err
    code, _, _ = run(capsys, "decode", work / "x.cgsc", "-o", work / "x.ply",
                     "--model", work / "m.cgsm")
    assert code == 0


def test_partition_report(work, capsys, tmp_path):
    code, out, _ = run(capsys, "partition", work / "s.ply", "--format", "json",
                       "--report", tmp_path / "p.json")
    assert code == 0
    data = json.loads(out)
    assert sum(data["level_counts"]) == 150
    assert json.loads((tmp_path / "p.json").read_text()) == data


def test_corrupt_stream_exit_code(work, capsys, tmp_path):
    data = bytearray((work / "s.cgsc").read_bytes())
    data[40] ^= 1
    (tmp_path / "bad.cgsc").write_bytes(bytes(data))
    code, _, err = run(capsys, "decode", tmp_path / "bad.cgsc", "-o", tmp_path / "o.ply")
    assert code == 3 and "CRC" in err


def test_missing_file_exit_code(capsys, tmp_path):
    code, _, _ = run(capsys, "stats", tmp_path / "nope.cgsc")
    assert code == 2


def test_bad_scene_exit_code(capsys, tmp_path):
    (tmp_path / "x.ply").write_bytes(b"not a ply")
    code, _, _ = run(capsys, "partition", tmp_path / "x.ply")
    assert code == 2


def test_bad_arguments_exit_code(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train"])
    assert exc.value.code == 2


def test_ablate_and_figures(work, capsys, tmp_path):
    code, out, _ = run(capsys, "ablate", work / "s.ply", "--variants", "full", "no-context",
                       *TRAIN, "--figures", tmp_path / "fig")
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    assert [r["variant"] for r in rows] == ["full", "no-context"]
    assert any(p.suffix == ".png" for p in (tmp_path / "fig").iterdir())


def test_rd_sweep(work, capsys):
    code, out, _ = run(capsys, "rd", work / "s.ply", "--lambdas", "0.001", "0.004", *TRAIN,
                       "--format", "json")
    assert code == 0
    points = json.loads(out)
    assert [p["lambda_e"] for p in points] == [0.001, 0.004]


def test_console_script(work):
    res = subprocess.run([sys.executable, "-m", "anchorcodec.cli", "--version"],
                         capture_output=True, text=True)
    assert res.returncode == 0 and "anchorcodec" in res.stdout
