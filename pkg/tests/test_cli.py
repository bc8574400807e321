import numpy as np

from app import cli
from app.services import formats
from app.services.evaluation import Trajectory
from app.services.geometry import Pose
from app.services.world_model import PointCloud


def test_sim_list(capsys):
    assert cli.main(["sim", "list"]) == cli.EXIT_OK
    out = capsys.readouterr().out
    assert "conveyor_up: 46 frames" in out
    assert "rotation: 37 frames" in out


def test_eval_ate(tmp_path, capsys):
    trajectory = Trajectory.from_samples((t, Pose(translation=(t, 0.0, 0.0))) for t in (0.0, 1.0, 2.0))
    formats.write_tum(tmp_path / "a.txt", trajectory)
    assert cli.main(["eval", "ate", str(tmp_path / "a.txt"), str(tmp_path / "a.txt")]) == cli.EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "metric,value,stddev"
    assert lines[1].startswith("ate_rmse_m,0.000000000,")


def test_eval_with_a_missing_file_fails(tmp_path, capsys):
    code = cli.main(["eval", "rpe", str(tmp_path / "a.txt"), str(tmp_path / "b.txt")])
    assert code == cli.EXIT_ERROR
    assert "mmf: error:" in capsys.readouterr().err


def test_run_on_a_dataset_without_intrinsics(tmp_path, capsys):
    (tmp_path / "associations.txt").write_text("")
    code = cli.main(["run", "--dataset", str(tmp_path), "--out", str(tmp_path / "out")])
    assert code == cli.EXIT_ERROR
    err = capsys.readouterr().err
    assert str(tmp_path / "intrinsics.txt") in err


def test_inspect_a_model(tmp_path, capsys):
    grid = np.stack(np.meshgrid(np.linspace(0, 0.2, 5), np.linspace(0, 0.1, 5), [0.0, 0.05]), -1).reshape(-1, 3)
    formats.write_ply(tmp_path / "m.ply", PointCloud(grid, np.full_like(grid, np.nan), np.zeros(len(grid)), "m"))
    assert cli.main(["inspect", str(tmp_path / "m.ply")]) == cli.EXIT_OK
    out = capsys.readouterr().out
    assert "points 50" in out
    assert "normals 0" in out
    assert "half extents" in out


def test_run_a_scene_file(tmp_path, static_corner, capsys):
    scene = tmp_path / "corner.json"
    scene.write_text(static_corner.model_dump_json())
    out = tmp_path / "out"
    code = cli.main([
        "run", "--sim", str(scene), "--out", str(out), "--seed", "1",
        "--set", "frontend.flow_provider=ground_truth",
    ])
    assert code == cli.EXIT_OK
    printed = capsys.readouterr().out
    assert "camera_ate_m" in printed
    assert f"{static_corner.frame_count} frames" in printed
    assert (out / "events.log").is_file()


def test_bad_override_is_reported(tmp_path, static_corner, capsys):
    scene = tmp_path / "corner.json"
    scene.write_text(static_corner.model_dump_json())
    code = cli.main(["run", "--sim", str(scene), "--set", "crf.pairwise_weight=-2"])
    assert code == cli.EXIT_ERROR
    assert "crf.pairwise_weight" in capsys.readouterr().err
