import hashlib
import json
import subprocess
import sys
from argparse import Namespace

import numpy as np
import pytest

from meshfuse import body_model as bm
from meshfuse.cli import cmd_gradcheck, main
from meshfuse.fit import evaluate_terms
from meshfuse.geometry import GridSpec
from meshfuse.io import ConfigError, load_params, parse_config, save_cloud, save_obj
from meshfuse.occupancy import FREE, OCCUPIED, PEDESTRIAN, UNKNOWN, VoxelGrid, load_grid, save_grid

from conftest import unit_cube

ROAD = 2


def tree_hash(d):
    h = hashlib.sha256()
    for p in sorted(d.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(d)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def scene(tmp_path_factory):
    d = tmp_path_factory.mktemp("scene")
    assert main(["simulate", "--seed", "3", "--out-dir", str(d)]) == 0
    return d


# ---------------------------------------------------------------------------
# simulate / fit


def test_simulate_writes_bundle(scene):
    man = json.loads((scene / "manifest.json").read_text())
    assert man["format"] == "meshfuse-scene/1" and man["seed"] == 3
    for f in man["files"].values():
        assert (scene / f).exists()
    assert man["n_points"] > 100


def test_fit_round_trip(scene, tmp_path):
    assert main(["fit", "--bundle", str(scene), "--out-dir", str(tmp_path), "--dump-meshes"]) == 0
    stages = json.loads((tmp_path / "stages.json").read_text())
    assert stages["mode"] == "2d+3d"
    assert stages["truth_pve_mm"] < 20.0
    assert stages["losses"]["final"] <= stages["losses"]["init"]
    assert (tmp_path / "mesh_final.obj").exists()


def test_fit_zero_iterations_returns_init(scene, tmp_path):
    assert main(["fit", "--bundle", str(scene), "--out-dir", str(tmp_path),
                 "--max-iters", "0"]) == 0
    got, init = load_params(tmp_path / "params.json"), load_params(scene / "init_params.json")
    for f in ("beta", "theta_global", "theta_body", "t_cam"):
        np.testing.assert_array_equal(getattr(got, f), getattr(init, f))


def test_fit_from_flags_without_prior(scene, tmp_path):
    args = ["fit", "--out-dir", str(tmp_path), "--max-iters", "5"]
    for k in ("init", "keypoints", "cloud", "camera"):
        args += [f"--{k}", str(scene / json.loads((scene / "manifest.json").read_text())["files"][k])]
    assert main(args) == 0


def test_fit_missing_keypoints_is_input_error(scene, tmp_path, capsys):
    rc = main(["fit", "--init", str(scene / "init_params.json"), "--cloud", str(scene / "cloud.csv"),
               "--camera", str(scene / "camera.json"), "--out-dir", str(tmp_path)])
    assert rc == 2
    assert "keypoints" in capsys.readouterr().err


def test_fit_corrupt_cloud(scene, tmp_path):
    bad = tmp_path / "bundle"
    bad.mkdir()
    for f in scene.iterdir():
        (bad / f.name).write_bytes(f.read_bytes())
    (bad / "cloud.csv").write_text("x,y,z\n1,2\n")
    assert main(["fit", "--bundle", str(bad), "--out-dir", str(tmp_path / "o")]) == 2


def test_simulate_is_deterministic_across_threads(tmp_path):
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    assert main(["simulate", "--seed", "5", "--count", "2", "--out-dir", str(a)]) == 0
    assert main(["simulate", "--seed", "5", "--count", "2", "--out-dir", str(b)]) == 0
    assert main(["simulate", "--seed", "5", "--count", "2", "--threads", "2",
                 "--out-dir", str(c)]) == 0
    assert tree_hash(a) == tree_hash(b) == tree_hash(c)
    assert sorted(p.name for p in a.iterdir()) == ["scene_0005", "scene_0006"]


def test_sensor_file_with_zero_channels(tmp_path):
    f = tmp_path / "s.json"
    f.write_text(json.dumps({"name": "broken", "vertical_channels": 0, "horizontal_channels": 8}))
    assert main(["simulate", "--sensor-file", str(f), "--out-dir", str(tmp_path)]) == 2


def test_unknown_sensor_and_part(tmp_path):
    assert main(["simulate", "--sensor", "Ouster-16", "--out-dir", str(tmp_path)]) == 2
    assert main(["simulate", "--occlude", "tail", "--out-dir", str(tmp_path)]) == 2


def test_occluded_bundle_reports_parts(tmp_path):
    assert main(["simulate", "--seed", "2", "--occlude", "l_forearm", "--out-dir",
                 str(tmp_path / "s")]) == 0
    assert main(["fit", "--bundle", str(tmp_path / "s"), "--out-dir", str(tmp_path / "f"),
                 "--max-iters", "20"]) == 0
    stages = json.loads((tmp_path / "f" / "stages.json").read_text())
    assert stages["occluded_parts"]


def test_make_toy_model(tmp_path):
    assert main(["make-toy-model", "--density", "1", "--out-dir", str(tmp_path)]) == 0
    m = bm.load_model(tmp_path / "toy_model.bma")
    assert m.n_vertices == bm.make_toy_model(1).n_vertices


def test_bad_config_file(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[optimizer]\nmax_iters=soon\n")
    assert main(["simulate", "--config", str(cfg), "--out-dir", str(tmp_path)]) == 2


def test_usage_error_exit_code():
    assert main(["fit", "--no-such-flag"]) == 2
    assert main(["--threads", "0"]) == 2


# ---------------------------------------------------------------------------
# fuse


def write_fuse_case(d):
    """2x2x1 grid: a road return in cell (1,0), a small human cube in cell (0,1)."""
    save_cloud(d / "f0.csv", [[0.75, 0.25, 0.25]], [ROAD])
    m = unit_cube((0.1, 0.6, 0.1), 0.2)
    save_obj(d / "h.obj", m.vertices, m.faces)
    man = {"grid": {"min": [0, 0, 0], "max": [1, 1, 0.5], "resolution": 0.5},
           "frames": [{"name": "a", "cloud": "f0.csv",
                       "humans": [{"instance": 1, "mesh": "h.obj", "velocity": [0.5, 0.0]}]}]}
    (d / "m.json").write_text(json.dumps(man))
    return d / "m.json"


def test_fuse_hand_case(tmp_path):
    man = write_fuse_case(tmp_path)
    assert main(["fuse", "--manifest", str(man), "--out-dir", str(tmp_path), "--csv"]) == 0
    g = load_grid(tmp_path / "frame_a.vox")
    np.testing.assert_array_equal(g.state.ravel(), [FREE, OCCUPIED, OCCUPIED, UNKNOWN])
    np.testing.assert_array_equal(g.cls.ravel(), [0, PEDESTRIAN, ROAD, 0])
    np.testing.assert_array_equal(g.instance.ravel(), [0, 1, 0, 0])
    np.testing.assert_allclose(g.velocity.reshape(-1, 2)[1], [0.5, 0.0])
    assert len((tmp_path / "frame_a.csv").read_text().splitlines()) == 5


def test_fuse_threads_identical(tmp_path):
    man = write_fuse_case(tmp_path)
    data = json.loads(man.read_text())
    data["frames"].append({**data["frames"][0], "name": "b"})
    man.write_text(json.dumps(data))
    (tmp_path / "o1").mkdir()
    (tmp_path / "o2").mkdir()
    assert main(["fuse", "--manifest", str(man), "--out-dir", str(tmp_path / "o1")]) == 0
    assert main(["fuse", "--manifest", str(man), "--out-dir", str(tmp_path / "o2"),
                 "--threads", "2"]) == 0
    assert tree_hash(tmp_path / "o1") == tree_hash(tmp_path / "o2")


def test_fuse_default_grid_is_benchmark(tmp_path):
    save_cloud(tmp_path / "f.csv", [[5.0, 0.0, 0.0]], [ROAD])
    (tmp_path / "m.json").write_text(json.dumps({"frames": [{"name": "x", "cloud": "f.csv"}]}))
    assert main(["fuse", "--manifest", str(tmp_path / "m.json"), "--out-dir", str(tmp_path)]) == 0
    assert load_grid(tmp_path / "frame_x.vox").state.shape == (48, 48, 24)


@pytest.mark.parametrize("manifest", [{"frames": []}, {}])
def test_fuse_empty_manifest(tmp_path, manifest):
    (tmp_path / "m.json").write_text(json.dumps(manifest))
    assert main(["fuse", "--manifest", str(tmp_path / "m.json"), "--out-dir", str(tmp_path)]) == 2


def test_fuse_unlabeled_cloud(tmp_path):
    save_cloud(tmp_path / "f.csv", [[5.0, 0.0, 0.0]])
    (tmp_path / "m.json").write_text(json.dumps({"frames": [{"cloud": "f.csv"}]}))
    assert main(["fuse", "--manifest", str(tmp_path / "m.json"), "--out-dir", str(tmp_path)]) == 2


# ---------------------------------------------------------------------------
# evaluate


def line_grid(cells, inst=1):
    spec = GridSpec((0, 0, 0), (10, 1, 1), 1.0)
    state = np.full(10, FREE)
    cls = np.zeros(10)
    ids = np.zeros(10)
    state[cells], cls[cells], ids[cells] = OCCUPIED, PEDESTRIAN, inst
    return VoxelGrid(spec, state, cls, ids)


def test_evaluate_identical_grids(tmp_path):
    save_grid(tmp_path / "g.vox", line_grid([0, 1, 2]))
    assert main(["evaluate", "--pred", str(tmp_path / "g.vox"), "--gt", str(tmp_path / "g.vox"),
                 "--out-dir", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "report.json").read_text())["items"][0]
    assert rep["occupancy"]["iou"]["iou"] == 1.0
    assert rep["occupancy"]["panoptic"]["pq"] == 1.0
    assert rep["mesh"].startswith("omitted")


def test_evaluate_pq_06(tmp_path):
    save_grid(tmp_path / "p.vox", line_grid([0, 1, 2]))
    save_grid(tmp_path / "g.vox", line_grid([0, 1, 2, 3, 4]))
    assert main(["evaluate", "--pred", str(tmp_path / "p.vox"), "--gt", str(tmp_path / "g.vox"),
                 "--out-dir", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "report.json").read_text())["items"][0]
    assert rep["occupancy"]["panoptic"]["pedestrian"]["pq"] == pytest.approx(0.6)


def test_evaluate_meshes_omit_occupancy(tmp_path):
    m = unit_cube()
    save_obj(tmp_path / "a.obj", m.vertices, m.faces)
    save_obj(tmp_path / "b.obj", m.vertices + [0, 0, 0.01], m.faces)
    assert main(["evaluate", "--pred", str(tmp_path / "a.obj"), "--gt", str(tmp_path / "b.obj"),
                 "--out-dir", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "report.json").read_text())["items"][0]
    assert rep["mesh"]["pve_mm"] == pytest.approx(10.0)
    assert rep["occupancy"].startswith("omitted")
    assert "omitted" in (tmp_path / "report.txt").read_text()


def test_evaluate_params_against_truth(scene, tmp_path):
    assert main(["evaluate", "--pred", str(scene / "truth_params.json"),
                 "--gt", str(scene / "truth_params.json"), "--out-dir", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "report.json").read_text())["items"][0]
    assert rep["mesh"]["pve_mm"] == 0.0 and rep["mesh"]["mpjpe_mm"] == 0.0


def test_evaluate_kind_mismatch(tmp_path):
    m = unit_cube()
    save_obj(tmp_path / "a.obj", m.vertices, m.faces)
    save_grid(tmp_path / "g.vox", line_grid([0]))
    assert main(["evaluate", "--pred", str(tmp_path / "a.obj"), "--gt", str(tmp_path / "g.vox"),
                 "--out-dir", str(tmp_path)]) == 2
    assert main(["evaluate", "--pred", str(tmp_path / "nope.vox"), "--gt", str(tmp_path / "g.vox"),
                 "--out-dir", str(tmp_path)]) == 2


# ---------------------------------------------------------------------------
# gradcheck


def gradcheck_args(tmp_path, **kw):
    base = dict(model=None, h=1e-5, tolerance=1e-4, count=1, seed=0,
                weights_section="3dpw", out_dir=str(tmp_path))
    return Namespace(**{**base, **kw})


def test_gradcheck_passes(tmp_path, capsys):
    assert main(["gradcheck", "--count", "2", "--out-dir", str(tmp_path)]) == 0
    assert "all terms pass" in capsys.readouterr().out


def test_gradcheck_reports_corrupted_gradient(tmp_path, capsys):
    def broken(problem, params):
        g = evaluate_terms(problem, params)[1]
        g["3d"] = g["3d"] * 1.05
        return g
    assert cmd_gradcheck(gradcheck_args(tmp_path), parse_config(""), grad_fn=broken) == 1
    out = capsys.readouterr().out
    assert "FAIL" in out and "gradient check FAILED" in out


def test_gradcheck_rejects_nonpositive_step(tmp_path):
    with pytest.raises(ConfigError):
        cmd_gradcheck(gradcheck_args(tmp_path, h=0.0), parse_config(""))
    assert main(["gradcheck", "--h", "0", "--out-dir", str(tmp_path)]) == 2


def test_console_script_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "meshfuse.cli", "gradcheck", "--out-dir",
                        str(tmp_path)], capture_output=True, text=True)
    assert r.returncode == 0 and "all terms pass" in r.stdout
