import csv

import numpy as np
import pytest
from PIL import Image

from ostr import cli
from ostr import episodes as ep

DATA = ["--n-classes", "8", "--images-per-class", "2", "--n-test", "2"]


def run(capsys, *argv):
    try:
        code = cli.main([str(a) for a in argv])
    except SystemExit as exc:
        code = exc.code
    out = capsys.readouterr().out.strip().splitlines()
    return code, out[-1] if out else ""


def _fields(line):
    return dict(p.split("=", 1) for p in line.split()[2:])


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code = cli.main(["train", "--out", str(out), "--epochs", "1", "--episodes-per-epoch", "4",
                     "--batch-size", "2", "--lr", "1e-4", "--seed", "3", *DATA])
    assert code == 0
    return out


def test_summary_line_format(capsys):
    cli.summary("eval", mean_iou="0.5", note="two words")
    line = capsys.readouterr().out.strip()
    assert line == 'OSTR eval status=ok mean_iou=0.5 note="two words"'


def test_dump_dirmaps_is_deterministic(tmp_path, capsys):
    code, line = run(capsys, "dump-dirmaps", "--out", tmp_path / "a", "--size", "8")
    assert code == 0 and line.startswith("OSTR dump-dirmaps status=ok")
    run(capsys, "dump-dirmaps", "--out", tmp_path / "b", "--size", "8")
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert len(files) == 8
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    img = np.asarray(Image.open(tmp_path / "a" / "0_right.png"))
    assert img[0, 0] == 255 and img[0, -1] == 0


def test_synth_data_round_trips_through_the_loader(tmp_path, capsys):
    code, line = run(capsys, "synth-data", "--out", tmp_path, "--n", "3", "--size", "32",
                     "--seed", "5", *DATA)
    assert code == 0 and _fields(line)["n"] == "3"
    bank = ep.load_bank(tmp_path / "bank")
    built = ep.procedural_bank(8, 2, 32, 0)
    assert all(np.array_equal(bank.images[c][0], built.images[c][0]) for c in built.classes)
    split = ep.holdout_split(built, 2)
    expected = ep.episodes(built, split, "train", 5, 3, 32)
    for i, e in enumerate(expected):
        back = ep.load_episode(tmp_path / "episodes" / f"{i:05d}")
        assert back.Q.tobytes() == e.Q.tobytes()
        assert back.R.tobytes() == e.R.tobytes()
        assert back.T.tobytes() == e.T.tobytes()


def test_train_writes_artifacts_and_is_deterministic(trained, tmp_path, capsys):
    for name in ("last.ostr", "run.json", "steps.csv", "summary.json"):
        assert (trained / name).exists()
    code, line = run(capsys, "train", "--out", tmp_path, "--epochs", "1", "--episodes-per-epoch", "4",
                     "--batch-size", "2", "--lr", "1e-4", "--seed", "3", *DATA)
    assert code == 0 and line.startswith("OSTR train status=ok")
    assert (tmp_path / "steps.csv").read_bytes() == (trained / "steps.csv").read_bytes()
    assert (tmp_path / "last.ostr").read_bytes() == (trained / "last.ostr").read_bytes()


def test_train_config_file_and_flag_precedence(tmp_path, capsys):
    conf = tmp_path / "train.conf"
    conf.write_text("# desk run\nlr = 0.5\nepochs = 1\nepisodes_per_epoch = 2\nbatch_size = 2\nno_gating = true\n")
    code, _ = run(capsys, "train", "--out", tmp_path / "o", "--config", conf, "--lr", "1e-5", *DATA)
    assert code == 0
    import json
    run_info = json.loads((tmp_path / "o" / "run.json").read_text())
    assert run_info["train"]["lr"] == 1e-5 and run_info["train"]["epochs"] == 1
    assert run_info["net"]["use_gating"] is False


def test_eval_is_deterministic(trained, tmp_path, capsys):
    ck = trained / "last.ostr"
    code, line = run(capsys, "eval", "--checkpoint", ck, "--n", "4", "--out", tmp_path / "a.csv")
    assert code == 0 and "mean_iou" in _fields(line)
    run(capsys, "eval", "--checkpoint", ck, "--n", "4", "--out", tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    rows = list(csv.DictReader(open(tmp_path / "a.csv")))
    assert len(rows) == 4 and set(rows[0]) == {"episode_id", "subset", "class", "iou", "loss"}


def _episode_pngs(tmp_path):
    bank = ep.procedural_bank(8, 2, 64, 0)
    e = ep.episodes(bank, ep.holdout_split(bank, 2), ("test", 0), 0, 1, 64)[0]
    ep.save_episode(e, tmp_path / "ep")
    return tmp_path / "ep"


def test_segment_outputs(trained, tmp_path, capsys):
    d = _episode_pngs(tmp_path)
    ck = trained / "last.ostr"
    args = ["segment", "--checkpoint", ck, "--query", d / "Q.png", "--reference", d / "R.png",
            "--truth", d / "T.png"]
    code, line = run(capsys, *args, "--out", tmp_path / "m1.png")
    assert code == 0 and "iou" in _fields(line)
    run(capsys, *args, "--out", tmp_path / "m2.png")
    mask = np.asarray(Image.open(tmp_path / "m1.png"))
    assert set(np.unique(mask)) <= {0, 255}
    prob = Image.open(tmp_path / "m1_prob.png")
    assert np.asarray(prob).dtype in (np.uint16, np.int32)
    assert (tmp_path / "m1.png").read_bytes() == (tmp_path / "m2.png").read_bytes()
    assert (tmp_path / "m1_prob.png").read_bytes() == (tmp_path / "m2_prob.png").read_bytes()


@pytest.mark.parametrize("bad", ["0", "0.0", "1", "1.5"])
def test_segment_rejects_closed_thresholds(trained, tmp_path, capsys, bad):
    d = _episode_pngs(tmp_path)
    code, line = run(capsys, "segment", "--checkpoint", trained / "last.ostr", "--query", d / "Q.png",
                     "--reference", d / "R.png", "--out", tmp_path / "m.png", "--threshold", bad)
    assert code != 0 and "status=err" in line


def test_invariance_scale_identity_row(trained, tmp_path, capsys):
    out = tmp_path / "inv.csv"
    code, line = run(capsys, "invariance", "--checkpoint", trained / "last.ostr", "--mode", "scale",
                     "--n", "3", "--out", out)
    assert code == 0
    rows = list(csv.DictReader(open(out)))
    assert len(rows) == 3 * 3
    for r in rows:
        if r["level"] == "1":
            assert r["iou"] == r["baseline_iou"] and float(r["delta"]) == 0.0
    assert _fields(line)["iou@1"] == _fields(line)["baseline"]


def test_invariance_zero_affine_matches_baseline(trained, tmp_path, capsys):
    out = tmp_path / "aff.csv"
    code, _ = run(capsys, "invariance", "--checkpoint", trained / "last.ostr", "--mode", "affine",
                  "--n", "3", "--out", out)
    assert code == 0
    rows = [r for r in csv.DictReader(open(out)) if float(r["level"]) == 0.0]
    assert len(rows) == 3
    assert all(abs(float(r["delta"])) <= 1e-4 for r in rows)


def test_export_gates(trained, tmp_path, capsys):
    out = tmp_path / "g.csv"
    code, line = run(capsys, "export-gates", "--checkpoint", trained / "last.ostr", "--n", "4", "--out", out)
    assert code == 0 and "intra_cos" in _fields(line)
    rows = list(csv.reader(open(out)))
    assert rows[0][0] == "class" and len(rows[0]) == 1 + 32
    values = np.array([[float(x) for x in r[1:]] for r in rows[1:]])
    assert values.shape == (4, 32) and ((values > 0) & (values < 1)).all()


def test_export_gates_needs_gating(tmp_path, capsys):
    run(capsys, "train", "--out", tmp_path, "--epochs", "1", "--episodes-per-epoch", "2",
        "--batch-size", "2", "--no-gating", *DATA)
    code, line = run(capsys, "export-gates", "--checkpoint", tmp_path / "last.ostr", "--out", tmp_path / "g.csv")
    assert code == 1 and "status=err" in line


def test_gate_similarity_ordering():
    labels = ["a", "a", "b", "b"]
    g = [[1, 0.1], [0.9, 0.2], [0.1, 1], [0.2, 0.8]]
    intra, inter = cli.gate_similarity(labels, g)
    assert intra > inter


def test_gradcheck_command(capsys):
    code, line = run(capsys, "gradcheck", "--samples", "20")
    assert code == 0 and _fields(line)["result"] == "PASS"


def test_error_paths_exit_nonzero(tmp_path, capsys):
    code, line = run(capsys, "eval", "--checkpoint", tmp_path / "missing.ostr")
    assert code == 1 and line.startswith("OSTR eval status=err")
    code, line = run(capsys, "eval", "--checkpoint", "x", "--bogus-flag")
    assert code == 2 and "status=err" in line
    bad = tmp_path / "bad.ostr"
    bad.write_bytes(b"nope")
    code, line = run(capsys, "segment", "--checkpoint", bad, "--query", "q", "--reference", "r",
                     "--out", tmp_path / "m.png")
    assert code == 1 and "status=err" in line


def test_seed_falls_back_to_environment(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("OSTR_SEED", "5")
    run(capsys, "synth-data", "--out", tmp_path / "a", "--n", "1", "--size", "32", *DATA)
    monkeypatch.delenv("OSTR_SEED")
    run(capsys, "synth-data", "--out", tmp_path / "b", "--n", "1", "--size", "32", "--seed", "5", *DATA)
    a = (tmp_path / "a" / "episodes" / "00000" / "Q.png").read_bytes()
    b = (tmp_path / "b" / "episodes" / "00000" / "Q.png").read_bytes()
    assert a == b
