import json
import shutil

import numpy as np
import pytest
import yaml

from docdepth import calib, io as dio, scenes
from docdepth.cli import main


@pytest.fixture(scope="module")
def seq(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    script = root / "scene.yaml"
    d = scenes.crossing_scene(n_frames=20, cross_time=1.0, camera_times=[0.5, 1.0, 1.5])
    script.write_text(yaml.safe_dump(d))
    assert main(["synth", str(root / "seq"), "--script", str(script)]) == 0
    manifest = root / "seq" / "manifest.yaml"
    assert main(["annotate", str(manifest), "--workers", "2", "--no-previews"]) == 0
    return root / "seq", manifest


def _bytes(d, pattern):
    return {p.name: p.read_bytes() for p in sorted(d.glob(pattern))}


def test_annotate_writes_every_output_and_caches(seq, capsys):
    root, manifest = seq
    out = root / "output"
    assert len(list((out / "ground").glob("*.label"))) == 20
    assert len(list((out / "labels").glob("*.label"))) == 20
    assert len(list((out / "depth").glob("*.bin"))) == 3
    assert len(list((out / "depth").glob("*.png"))) == 3
    assert (out / "density.csv").exists()
    assert main(["annotate", str(manifest)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert [l for l in lines if ":" in l and not l.startswith("mean")] == \
        ["ground: cached", "doc: cached", "render: cached"]


def test_fresh_run_is_bit_identical(seq, tmp_path):
    # different output root and worker count
    root, manifest = seq
    assert main(["annotate", str(manifest), "--output-root", str(tmp_path), "--workers", "1",
                 "--no-previews"]) == 0
    for sub, pat in (("ground", "*.label"), ("labels", "*.label"), ("depth", "*.bin")):
        assert _bytes(tmp_path / sub, pat) == _bytes(root / "output" / sub, pat)


def test_deleting_labels_reruns_downstream_only(seq, tmp_path, capsys):
    root, manifest = seq
    out = tmp_path / "out"
    shutil.copytree(root / "output", out)
    shutil.rmtree(out / "labels")
    assert main(["annotate", str(manifest), "--output-root", str(out), "--no-previews"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "ground: cached"
    assert lines[1].startswith("doc: ran 20 items")
    assert lines[2].startswith("render: ran 3 items")
    assert _bytes(out / "depth", "*.bin") == _bytes(root / "output" / "depth", "*.bin")


def test_parameter_change_invalidates_stage(seq, tmp_path, capsys):
    root, manifest = seq
    out = tmp_path / "out"
    shutil.copytree(root / "output", out)
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({"render": {"d_step": 0.5}}))
    assert main(["annotate", str(manifest), "--output-root", str(out), "--config", str(cfg),
                 "--no-previews"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[:2] == ["ground: cached", "doc: cached"]
    assert lines[2].startswith("render: ran 3 items")


def test_resume_processes_only_missing_frames(seq, tmp_path, capsys):
    root, manifest = seq
    out = tmp_path / "out"
    shutil.copytree(root / "output", out)
    rec_path = out / "labels" / "stage.json"
    rec = json.loads(rec_path.read_text())
    rec.update(complete=False, stamp=None)
    rec_path.write_text(json.dumps(rec))
    for i in (3, 11, 17):
        (out / "labels" / f"{i:06d}.label").unlink()
    assert main(["doc", str(manifest), "--output-root", str(out), "--resume"]) == 0
    assert capsys.readouterr().out.splitlines()[0].startswith("doc: ran 3 items")
    assert _bytes(out / "labels", "*.label") == _bytes(root / "output" / "labels", "*.label")


def test_render_without_upstream_is_data_error(seq, tmp_path, capsys):
    _, manifest = seq
    assert main(["render", str(manifest), "--output-root", str(tmp_path)]) == 3
    assert "doc stage outputs" in capsys.readouterr().err


def test_bad_config_key_exit_code(seq, tmp_path, capsys):
    _, manifest = seq
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({"voting": {"wdith": 5}}))
    assert main(["annotate", str(manifest), "--config", str(cfg)]) == 2
    assert "voting.wdith" in capsys.readouterr().err


def test_missing_manifest_exit_code(tmp_path, capsys):
    assert main(["annotate", str(tmp_path / "nope.yaml")]) == 3
    assert main(["annotate"]) == 2
    capsys.readouterr()


def test_eval_depth_thresholds(seq, tmp_path, capsys):
    root, _ = seq
    pred, truth = root / "output" / "depth", root / "truth_depth"
    assert main(["eval", "depth", str(pred), str(truth), "--out", str(tmp_path), "--max-rmse", "1e-6"]) == 1
    text = capsys.readouterr().out
    assert "FAIL\trmse" in text
    assert main(["eval", "depth", str(pred), str(truth), "--out", str(tmp_path), "--max-rmse", "1e6",
                 "--min-density", "0.1", "--point-to-point", "--rig", str(root / "rig.yaml")]) == 0
    text = capsys.readouterr().out
    assert "PASS\trmse" in text and "PASS\tdensity" in text
    header = text.splitlines()[0].split("\t")
    assert header[:3] == ["frame", "rmse", "mae"]
    for f in ("report.csv", "report.json", "depth_errors.png"):
        assert (tmp_path / f).stat().st_size > 0
    assert list(tmp_path.glob("error_map_*.png"))
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["failed"] == [] and len(rep["frames"]) == 3
    assert rep["summary"]["point_to_point"] >= 0


def test_eval_depth_point_to_point_needs_rig(seq, tmp_path, capsys):
    root, _ = seq
    code = main(["eval", "depth", str(root / "output" / "depth"), str(root / "truth_depth"),
                 "--out", str(tmp_path), "--point-to-point"])
    assert code == 2
    capsys.readouterr()


def test_eval_labels(seq, tmp_path, capsys):
    root, _ = seq
    code = main(["eval", "labels", str(root / "output" / "labels"), str(root / "truth"),
                 "--out", str(tmp_path), "--min-sa", "99.0", "--min-da", "80.0"])
    text = capsys.readouterr().out
    assert code == 0
    assert "PASS\tSA" in text and "PASS\tDA" in text
    assert (tmp_path / "classification.png").exists()
    rows = (tmp_path / "report.csv").read_text().splitlines()
    assert len(rows) == 1 + 20 + 1


def test_eval_no_matching_files(tmp_path, capsys):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    assert main(["eval", "labels", str(tmp_path / "a"), str(tmp_path / "b")]) == 3
    capsys.readouterr()


def test_calibrate_recovers_synthetic_rig(tmp_path, capsys):
    assert main(["synth", str(tmp_path), "--preset", "calibration", "--views", "5"]) == 0
    assert main(["calibrate", str(tmp_path / "session.yaml")]) == 0
    out = capsys.readouterr().out
    assert "rig written to" in out
    est, truth = dio.read_rig(tmp_path / "rig.yaml"), dio.read_rig(tmp_path / "rig_truth.yaml")
    assert np.allclose(est.C_cl.rotation, truth.C_cl.rotation, atol=1e-6)
    assert np.allclose(est.C_cl.u, truth.C_cl.u, atol=1e-6)
    assert len(calib.read_session(tmp_path / "session.yaml").views) == 5
