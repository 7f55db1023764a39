import json

import numpy as np
import pytest

from affordkit import cli, gradcheck


def run_ok(*args):
    assert cli.run([str(a) for a in args]) == 0


@pytest.fixture(scope="module")
def small_pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("pipe")
    run_ok("synth", "--out", d / "scene", "--seed", 2, "--frames", 4, "--width", 96,
           "--height", 72, "--focal", 90, "--landmarks", 80, "--trajectories", 8)
    m = d / "scene" / "manifest.json"
    run_ok("calibrate-scale", "--manifest", m, "--out", d / "scale.json")
    run_ok("refine-poses", "--manifest", m, "--scale", d / "scale.json", "--out",
           d / "refined.json", "--max-outer", 5)
    run_ok("extract-affordance", "--manifest", m, "--refined", d / "refined.json",
           "--out", d / "sample.json", "--ply", d / "sample.ply")
    run_ok("fuse-tsdf", "--manifest", m, "--refined", d / "refined.json", "--out",
           d / "vol.tsdf", "--voxel", 0.02)
    return d


# exit codes ---------------------------------------------------------------------

def test_help_exits_zero(capsys):
    assert cli.run(["--help"]) == 0
    assert "generate" in capsys.readouterr().out
    assert cli.run(["rank", "--help"]) == 0


def test_usage_errors_exit_two(capsys):
    assert cli.run([]) == 2
    assert cli.run(["rank"]) == 2
    assert cli.run(["gradcheck", "--targets", ","]) == 2
    assert "target" in capsys.readouterr().err


def test_missing_file_exits_one(tmp_path, capsys):
    assert cli.run(["rank", "--batch", str(tmp_path / "missing.json")]) == 1
    assert "MissingFile" in capsys.readouterr().err


def test_bad_json_exits_one(tmp_path, capsys):
    (tmp_path / "b.json").write_text("{not json")
    assert cli.run(["rank", "--batch", str(tmp_path / "b.json")]) == 1
    assert "ManifestParse" in capsys.readouterr().err
    (tmp_path / "c.json").write_text('{"foo": 1}')
    assert cli.run(["rank", "--batch", str(tmp_path / "c.json")]) == 1


def test_unknown_gradcheck_target_exits_one():
    assert cli.run(["gradcheck", "--targets", "goal,bogus"]) == 1


def test_gradcheck_passes_and_detects_corruption(monkeypatch, capsys):
    assert cli.run(["gradcheck", "--targets", "goal,trilinear", "--points", "10"]) == 0
    monkeypatch.setitem(gradcheck.CHECKS, "goal", lambda seed, n: 0.5)
    assert cli.run(["gradcheck", "--targets", "goal", "--points", "10"]) == 1
    assert "FAIL" in capsys.readouterr().out


# ply ----------------------------------------------------------------------------

def test_ply_single_point(tmp_path):
    assert cli.export_ply([[0.1, 0.2, 0.3]], None, tmp_path / "a.ply") == (1, 0)
    V, gray, E = cli.read_ply(tmp_path / "a.ply")
    assert np.allclose(V, [[0.1, 0.2, 0.3]]) and E.shape == (0, 2)


def test_ply_trajectory_round_trip(tmp_path):
    T = np.random.default_rng(0).normal(size=(16, 3))
    assert cli.export_ply(None, [T], tmp_path / "t.ply") == (16, 15)
    V, gray, E = cli.read_ply(tmp_path / "t.ply")
    assert np.allclose(V, T, rtol=1e-8, atol=1e-12)
    assert np.array_equal(E, np.column_stack([np.arange(15), np.arange(1, 16)]))


def test_ply_rank_shading(tmp_path):
    T = [np.zeros((2, 3)), np.ones((2, 3)), np.full((2, 3), 2.0)]
    cli.export_ply(np.zeros((1, 3)), T, tmp_path / "r.ply", ranks=[2, 0, 1])
    _, gray, E = cli.read_ply(tmp_path / "r.ply")
    assert gray[0] == 128
    assert list(gray[1::2]) == [224, 0, 112]
    assert E.shape == (3, 2)


def test_ply_nothing_to_export(tmp_path):
    from affordkit.errors import IoError
    with pytest.raises(IoError):
        cli.export_ply(np.zeros((0, 3)), [], tmp_path / "x.ply")


# pipeline -----------------------------------------------------------------------

def test_pipeline_outputs(small_pipeline):
    d = small_pipeline
    s = json.loads((d / "scale.json").read_text())
    assert s["s_g"] > 0
    V, _, E = cli.read_ply(d / "sample.ply")
    assert len(V) > 0 and len(E) > 0
    assert (d / "vol.tsdf").is_file()
    assert len(list((d / "scene" / "trajectories").glob("*.json"))) == 8
    assert not list(d.rglob("*.tmp"))


def test_generate_is_deterministic(small_pipeline, tmp_path):
    d = small_pipeline
    outs = []
    for name in ("a.json", "b.json"):
        run_ok("generate", "--volume", d / "vol.tsdf", "--sample", d / "sample.json",
               "--out", tmp_path / name, "--n", 4, "--seed", 11, "--steps-k", 50)
        outs.append((tmp_path / name).read_bytes())
    assert outs[0] == outs[1]
    run_ok("generate", "--volume", d / "vol.tsdf", "--sample", d / "sample.json",
           "--out", tmp_path / "c.json", "--n", 4, "--seed", 12, "--steps-k", 50)
    assert (tmp_path / "c.json").read_bytes() != outs[0]


def test_rank_writes_sorted_order(small_pipeline, tmp_path, capsys):
    d = small_pipeline
    run_ok("generate", "--volume", d / "vol.tsdf", "--sample", d / "sample.json",
           "--out", tmp_path / "g.json", "--n", 6, "--seed", 0, "--steps-k", 50)
    run_ok("rank", "--batch", tmp_path / "g.json", "--out", tmp_path / "o.json",
           "--ply", tmp_path / "o.ply", "--top", 3)
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[-4].startswith("rank") and len(lines[-3:]) == 3
    o = json.loads((tmp_path / "o.json").read_text())
    assert sorted(o["order"]) == list(range(6))
    assert np.all(np.diff(o["totals"]) >= 0)


def test_train_and_generate_with_model(small_pipeline, tmp_path):
    d = small_pipeline
    run_ok("train-denoiser", "--data", d / "scene" / "trajectories", "--out",
           tmp_path / "m.bin", "--epochs", 20, "--widths", "16,16", "--steps-k", 50,
           "--losses", tmp_path / "loss.json")
    loss = json.loads((tmp_path / "loss.json").read_text())
    assert len(loss["loss"]) == 20 and all(np.isfinite(loss["loss"]))
    run_ok("generate", "--volume", d / "vol.tsdf", "--sample", d / "sample.json",
           "--out", tmp_path / "g.json", "--n", 3, "--model", tmp_path / "m.bin")
    g = json.loads((tmp_path / "g.json").read_text())
    assert g["config"]["schedule"]["K"] == 50
    assert np.asarray(g["trajectories"]).shape == (3, 16, 3)
