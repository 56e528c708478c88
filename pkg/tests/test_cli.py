import json
import shutil

import numpy as np

from conftest import SCENARIOS
from modalshape.cli import main
from modalshape.harness import read_csv
from modalshape.mesh import read_mesh
from modalshape.modal import load_basis


def _last_json(capsys):
    return json.loads(capsys.readouterr().out.strip().splitlines()[-1])


def test_run_converges_exit_0(tmp_path, capsys):
    out = tmp_path / "b.csv"
    assert main(["run", str(SCENARIOS / "benchmark.yaml"), "--out", str(out), "--seed", "3"]) == 0
    s = _last_json(capsys)
    assert s["status"] == "converged"
    assert len(read_csv(out)) == s["ticks"]


def test_run_baseline(capsys):
    assert main(["run", str(SCENARIOS / "compare/good.yaml"), "--baseline"]) == 0
    assert _last_json(capsys)["controller"] == "baseline"


def test_stall_exit_2(capsys):
    assert main(["run", str(SCENARIOS / "sim/local_minimum/fixed_front_left.yaml")]) == 2
    assert _last_json(capsys)["status"] == "stall"


def test_errors_exit_1(tmp_path, capsys):
    assert main(["run", str(tmp_path / "missing.yaml")]) == 1
    bad = tmp_path / "bad.yaml"
    bad.write_text("family: sim\nunknown_key: 1\n")
    assert main(["run", str(bad)]) == 1
    src = (SCENARIOS / "benchmark.yaml").read_text()
    mesh_dir = tmp_path / "meshes"
    shutil.copytree(SCENARIOS / "meshes", mesh_dir)
    broken = tmp_path / "broken.yaml"
    broken.write_text(src + "events: ['2 lose 123456']\n")
    assert main(["run", str(broken)]) == 1
    assert "tick 2" in capsys.readouterr().err


def test_sweep_directory(tmp_path, capsys):
    assert main(["sweep", str(SCENARIOS / "sim" / "material"), "--out", str(tmp_path)]) == 0
    lines = [json.loads(l) for l in capsys.readouterr().out.strip().splitlines()]
    assert len(lines) == 4 and all(l["status"] == "converged" for l in lines)
    assert len(list(tmp_path.glob("*.csv"))) == 4
    assert main(["sweep", str(tmp_path / "nothing")]) == 1


def test_mesh_gen_and_modes(tmp_path, capsys):
    spec = tmp_path / "e.yaml"
    spec.write_text("a_x: 3\na_y: 2\na_z: 1\nn_lat: 6\nn_lon: 8\nn_rad: 1\ntranslation: [1, 2, 3]\n")
    assert main(["mesh", "gen", str(spec)]) == 0
    info = _last_json(capsys)
    mesh = read_mesh(info["file"])
    np.testing.assert_allclose(mesh.nodes.max(axis=0), [4, 4, 4], atol=1e-12)
    assert main(["modes", info["file"], "10", "--out", str(tmp_path / "e.modes")]) == 0
    basis = load_basis(tmp_path / "e.modes")
    assert basis.m == 10 and basis.n_dofs == mesh.n_dofs
    spec.write_text("a_x: 3\na_y: 2\n")
    assert main(["mesh", "gen", str(spec)]) == 1
