import json

import numpy as np
import pytest

from spherereg.cli import main
from spherereg.formats import MeshRecord, parse_report, read_deform, read_mesh, write_mesh
from spherereg.mesh import build_icosphere
from spherereg.synth import synthetic_suite


def report(path):
    return parse_report(path.read_text())


def test_icosphere_command(tmp_path, capsys):
    out = tmp_path / "ico3.mesh"
    assert main(["icosphere", "--level", "3", "--out", str(out)]) == 0
    assert out.read_text().splitlines()[1] == "vertices 642 faces 1280 channels 0 parcels 0"
    assert main(["icosphere", "--level", "0", "--out", str(tmp_path / "ico0.mesh")]) == 0
    assert (tmp_path / "ico0.mesh").read_text().splitlines()[1].startswith("vertices 12 faces 20 ")
    rec = read_mesh(out)
    assert np.array_equal(rec.vertices, build_icosphere(3).mesh.vertices)
    assert main(["icosphere", "--level", "9", "--out", str(out)]) == 2
    assert "error" in capsys.readouterr().err
    assert main(["icosphere", "--level", "1", "--out", str(tmp_path / "missing" / "x.mesh")]) == 5
    assert main(["icosphere"]) == 2


def test_synth_resample_and_metrics(tmp_path):
    d = tmp_path / "corpus"
    assert main(["synth", "--seed", "1", "--n", "3", "--level", "6", "--parcels", "6", "--out-dir", str(d)]) == 0
    files = sorted(d.glob("*.mesh"))
    assert len(files) == 3
    src = files[0]
    same = tmp_path / "same.mesh"
    assert main(["resample", "--src", str(src), "--dst", str(src), "--out", str(same)]) == 0
    assert same.read_bytes() == src.read_bytes()
    down = tmp_path / "down.mesh"
    assert main(["resample", "--src", str(src), "--dst-level", "4", "--out", str(down)]) == 0
    a, b = read_mesh(src), read_mesh(down)
    assert np.array_equal(b.features, a.features[: len(b.features)])
    assert np.array_equal(b.labels, a.labels[: len(b.labels)])
    rep = tmp_path / "m.txt"
    assert main(["metrics", "--a", str(src), "--b", str(src), "--report", str(rep)]) == 0
    r = report(rep)
    assert float(r["ncc"]) == 1.0 and float(r["mae"]) == 0.0 and float(r["dice"]) == 1.0
    assert main(["metrics", "--original", str(src), "--deformed", str(src), "--report", str(rep)]) == 0
    r = report(rep)
    assert max(float(r[k]) for k in ("areal_distortion", "shape_distortion", "edge_distortion")) < 1e-12
    assert r["fold_count"] == "0"


def test_resample_rejects_non_sphere(tmp_path):
    m = build_icosphere(1).mesh
    p = tmp_path / "flat.mesh"
    write_mesh(p, MeshRecord(m.vertices * 2.0, m.faces, np.ones((42, 1)), None, 0))
    assert main(["resample", "--src", str(p), "--dst-level", "1", "--out", str(tmp_path / "o.mesh")]) == 2


def test_metrics_stretch_fixture(tmp_path):
    v = np.array([[0.0, 0, 0], [1, 0, 0], [0.3, 0.8, 0]])
    f = np.array([[0, 1, 2]])
    o, d = tmp_path / "o.mesh", tmp_path / "d.mesh"
    write_mesh(o, MeshRecord(v, f, np.zeros((3, 0)), None, 0))
    write_mesh(d, MeshRecord(v * [2.0, 1.0, 1.0], f, np.zeros((3, 0)), None, 0))
    rep = tmp_path / "r.txt"
    assert main(["metrics", "--original", str(o), "--deformed", str(d), "--report", str(rep)]) == 0
    assert float(report(rep)["areal_distortion"]) == pytest.approx(1.0)
    assert main(["metrics", "--a", str(o), "--report", str(rep)]) == 2


def test_register_identity_and_learned_without_model(tmp_path):
    pair = synthetic_suite(n_pairs=1, level=3)[0]
    p = tmp_path / "fixed.mesh"
    write_mesh(p, pair.fixed)
    rep = tmp_path / "r.txt"
    code = main(["register", "--moving", str(p), "--fixed", str(p), "--levels", "3", "--report", str(rep),
                 "--out-deform", str(tmp_path / "phi.def"), "--out-mesh", str(tmp_path / "moved.mesh")])
    assert code == 0
    r = report(rep)
    assert float(r["ncc"]) == pytest.approx(1.0, abs=1e-9)
    assert r["fold_count"] == "0" and r["success"] == "true"
    assert np.abs(read_deform(tmp_path / "phi.ico3.def")).max() < 1e-4
    assert main(["register", "--moving", str(p), "--fixed", str(p), "--mode", "learned"]) == 2


def test_register_bundled_pair_is_idempotent(tmp_path):
    pair = synthetic_suite(n_pairs=1)[0]
    mv, fx = tmp_path / "m.mesh", tmp_path / "f.mesh"
    write_mesh(mv, pair.moving)
    write_mesh(fx, pair.fixed)
    args = ["register", "--moving", str(mv), "--fixed", str(fx), "--levels", "3,4"]
    # missing output directory is an I/O failure
    assert main(args + ["--out-deform", str(tmp_path / "nowhere" / "x.def")]) == 5
    reps = []
    for k in range(2):
        (tmp_path / f"phi{k}").mkdir()
        reps.append(tmp_path / f"r{k}.txt")
        assert main(args + ["--report", str(reps[k]), "--out-deform", str(tmp_path / f"phi{k}" / "x{level}.def")]) == 0
    assert reps[0].read_bytes() == reps[1].read_bytes()
    assert (tmp_path / "phi0" / "x4.def").read_bytes() == (tmp_path / "phi1" / "x4.def").read_bytes()
    assert float(report(reps[0])["sim_reduction"]) >= 0.5


def test_weights_file_validation(tmp_path):
    pair = synthetic_suite(n_pairs=1, level=3)[0]
    p = tmp_path / "f.mesh"
    write_mesh(p, pair.fixed)
    w = tmp_path / "w.json"
    w.write_text(json.dumps({"foldd": [0, 0, 0, 0]}))
    assert main(["register", "--moving", str(p), "--fixed", str(p), "--levels", "3", "--weights-file", str(w)]) == 2


def test_train_two_subjects_deterministic(tmp_path):
    d = tmp_path / "corpus"
    assert main(["synth", "--seed", "0", "--n", "2", "--level", "3", "--out-dir", str(d)]) == 0
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"train": {"epochs": 2, "widths": [4, 8], "heads": 1}, "registration": {"levels": [3]}}))
    outs = []
    for k in range(2):
        out = tmp_path / f"m{k}.bin"
        hist = tmp_path / f"h{k}.jsonl"
        assert main(["train", "--corpus-dir", str(d), "--config", str(cfg), "--out-model", str(out),
                     "--history", str(hist)]) == 0
        outs.append((out, hist))
    assert outs[0][0].read_bytes() == outs[1][0].read_bytes()
    records = [json.loads(line) for line in outs[0][1].read_text().splitlines()]
    assert records and all(np.isfinite(v) for r in records for v in r.values() if isinstance(v, float))
    # the trained bundle drives learned registration end to end
    s = sorted(d.glob("*.mesh"))
    rep = tmp_path / "r.txt"
    code = main(["register", "--moving", str(s[0]), "--fixed", str(s[1]), "--mode", "learned",
                 "--model", str(outs[0][0]), "--report", str(rep)])
    assert code in (0, 3)
    assert report(rep)["mode"] == "learned"
