import json
import subprocess
import sys

import numpy as np
import pytest

from cinelstm.cli import main
from cinelstm.experiment import RunConfig
from cinelstm.pipeline.cineio import read_cine, write_cine

COHORT = {
    "base": {"size": 16, "frames": 4, "inner_radius": 3.0, "outer_radius": 5.0, "beat_amplitude": 1.0,
             "center_drift": 0.5, "jitter": 0.5},
    "lesion_length": 2,
    "seed": 1,
}


def tiny_config(tmp_path, **kw):
    cfg = {
        "seed": 4,
        "cohort": COHORT,
        "subjects": 2,
        "cycles_per_subject": 3,
        "members": 2,
        "train": {"encoder_preset": "tiny", "frames": 4, "cnn_epochs": 1, "rnn_epochs": 1},
    }
    cfg.update(kw)
    path = tmp_path / "run.json"
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture
def cohort_dir(tmp_path):
    spec = tmp_path / "cohort.json"
    spec.write_text(json.dumps(COHORT))
    out = tmp_path / "data"
    assert main(["phantom", "--spec", str(spec), "--out", str(out), "--subjects", "2", "--cycles-per-subject", "3"]) == 0
    return out


class TestPhantom:
    def test_files_and_manifest(self, cohort_dir):
        files = sorted(cohort_dir.glob("*.cine"))
        assert len(files) == 6
        manifest = json.loads((cohort_dir / "manifest.json").read_text())
        assert len(manifest["files"]) == 6 and manifest["subjects"] == 2
        seq = read_cine(files[0])
        assert seq.frames.shape == (4, 16, 16) and seq.masks is not None

    def test_single(self, tmp_path):
        assert main(["phantom", "--out", str(tmp_path / "o"), "--subjects", "1", "--cycles-per-subject", "1"]) == 0
        assert len(list((tmp_path / "o").glob("*.cine"))) == 1

    def test_invalid_spec(self, tmp_path, capsys):
        spec = tmp_path / "bad.json"
        spec.write_text(json.dumps({"base": {"inner_radius": 20.0, "outer_radius": 10.0}}))
        assert main(["phantom", "--spec", str(spec), "--out", str(tmp_path / "o")]) == 2
        assert "error" in capsys.readouterr().err

    def test_unknown_key(self, tmp_path):
        spec = tmp_path / "bad.json"
        spec.write_text(json.dumps({"radius": 3}))
        assert main(["phantom", "--spec", str(spec), "--out", str(tmp_path / "o")]) == 2

    def test_unwritable(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        assert main(["phantom", "--out", str(blocker / "sub"), "--subjects", "1", "--cycles-per-subject", "1"]) == 2


class TestTrain:
    def test_checkpoints_and_determinism(self, tmp_path):
        cfg = tiny_config(tmp_path)
        outs = [tmp_path / "a", tmp_path / "b"]
        for out in outs:
            assert main(["train", "--config", str(cfg), "--fold", "subject01", "--variant", "cnn", "--out", str(out)]) == 0
        for k in range(2):
            a = (outs[0] / f"member{k}" / "cnn.segm").read_bytes()
            assert a == (outs[1] / f"member{k}" / "cnn.segm").read_bytes()
        assert (outs[0] / "member0" / "cnn.segm").read_bytes() != (outs[0] / "member1" / "cnn.segm").read_bytes()
        resolved = RunConfig.load(outs[0] / "config.resolved.json")
        assert resolved.variants == ("cnn",) and resolved.folds == ("subject01",)
        lines = (outs[0] / "member0" / "train_log.jsonl").read_text().splitlines()
        assert {"stage", "epoch", "split", "loss", "timestamp"} <= set(json.loads(lines[0]))
        manifest = json.loads((outs[0] / "manifest.json").read_text())
        assert manifest["folds"][0]["test_subject"] == "subject01"

    def test_recurrent_from_data_dir(self, tmp_path, cohort_dir):
        cfg = tiny_config(tmp_path, data_dir=str(cohort_dir), members=1)
        assert main(["train", "--config", str(cfg), "--fold", "subject00", "--variant", "multi-level",
                     "--out", str(tmp_path / "o")]) == 0
        assert (tmp_path / "o" / "member0" / "multi-level.segm").exists()

    def test_missing_fold(self, tmp_path, capsys):
        cfg = tiny_config(tmp_path)
        assert main(["train", "--config", str(cfg), "--fold", "nobody", "--out", str(tmp_path / "o")]) == 2
        assert "nobody" in capsys.readouterr().err

    def test_bad_config(self, tmp_path):
        cfg = tiny_config(tmp_path, epochs=3)
        assert main(["train", "--config", str(cfg), "--fold", "subject00", "--out", str(tmp_path / "o")]) == 2
        (tmp_path / "broken.json").write_text("{")
        assert main(["train", "--config", str(tmp_path / "broken.json"), "--fold", "s", "--out", str(tmp_path / "o")]) == 2

    def test_divergence_exit_code(self, tmp_path, cohort_dir):
        f = sorted(cohort_dir.glob("*.cine"))[1]
        seq = read_cine(f)
        seq.frames[0, 3, 3] = np.nan
        write_cine(f, seq)
        cfg = tiny_config(tmp_path, data_dir=str(cohort_dir), members=1)
        assert main(["train", "--config", str(cfg), "--fold", "subject01", "--variant", "cnn",
                     "--out", str(tmp_path / "o")]) == 3

    def test_thread_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv("CINELSTM_THREADS", "zero")
        cfg = tiny_config(tmp_path)
        assert main(["train", "--config", str(cfg), "--fold", "subject00", "--out", str(tmp_path / "o")]) == 2


def test_loo_two_subjects(tmp_path, capsys):
    cfg = tiny_config(tmp_path, overlays=True)
    assert main(["loo", "--config", str(cfg), "--out", str(tmp_path / "loo")]) == 0
    out = tmp_path / "loo"
    assert sorted(p.name for p in out.glob("fold_*")) == ["fold_subject00", "fold_subject01"]
    table = (out / "report.txt").read_text()
    for v in ("cnn", "one-level", "multi-level"):
        assert v in table
        rep = json.loads((out / f"report_{v}.json").read_text())
        assert len(rep["records"]) == 2 * 3 * 4
    assert len(list((out / "fold_subject00" / "overlays" / "cnn").glob("*.pgm"))) == 3 * 4
    assert "DSC" in capsys.readouterr().out


def test_loo_parallel_matches_serial(tmp_path):
    serial = tiny_config(tmp_path, variants=["cnn"], members=1)
    assert main(["loo", "--config", str(serial), "--out", str(tmp_path / "s")]) == 0
    assert main(["loo", "--config", str(serial), "--out", str(tmp_path / "p"), "--jobs", "2"]) == 0
    for fold in ("fold_subject00", "fold_subject01"):
        a = (tmp_path / "s" / fold / "member0" / "cnn.segm").read_bytes()
        assert a == (tmp_path / "p" / fold / "member0" / "cnn.segm").read_bytes()
    assert (tmp_path / "s" / "report_cnn.json").read_text() == (tmp_path / "p" / "report_cnn.json").read_text()


def test_loo_partial_failure(tmp_path, cohort_dir):
    f = sorted(cohort_dir.glob("subject01*.cine"))[0]
    seq = read_cine(f)
    seq.frames[:] = np.nan
    write_cine(f, seq)
    cfg = tiny_config(tmp_path, data_dir=str(cohort_dir), variants=["cnn"], members=1)
    # fold subject00 trains on subject01's corrupted cycle; fold subject01 only tests on it
    code = main(["loo", "--config", str(cfg), "--out", str(tmp_path / "loo")])
    assert code == 3
    assert (tmp_path / "loo" / "fold_subject01" / "report_cnn.json").exists()
    assert "failed folds: subject00" in (tmp_path / "loo" / "report.txt").read_text()


class TestSegmentEvaluate:
    @pytest.fixture
    def trained(self, tmp_path):
        cfg = tiny_config(tmp_path, members=1)
        main(["train", "--config", str(cfg), "--fold", "subject00", "--variant", "one-level", "--out", str(tmp_path / "t")])
        return tmp_path / "t" / "member0" / "one-level.segm"

    def test_five_copies_equal_single(self, tmp_path, trained, cohort_dir):
        cine = sorted(cohort_dir.glob("*.cine"))[0]
        assert main(["segment", "--checkpoints", *[str(trained)] * 5, "--in", str(cine), "--out", str(tmp_path / "five")]) == 0
        assert main(["segment", "--checkpoints", str(trained), "--in", str(cine), "--out", str(tmp_path / "one"),
                     "--expected", "1", "--no-overlays"]) == 0
        a = read_cine(tmp_path / "five" / cine.name)
        b = read_cine(tmp_path / "one" / cine.name)
        assert np.array_equal(a.masks, b.masks)
        assert len(list((tmp_path / "five" / "overlays").glob("*.pgm"))) == 4
        assert not (tmp_path / "one" / "overlays").exists()

    def test_size_mismatch(self, tmp_path, trained):
        main(["phantom", "--out", str(tmp_path / "big"), "--subjects", "1", "--cycles-per-subject", "1"])
        assert main(["segment", "--checkpoints", str(trained), "--in", str(tmp_path / "big"), "--out", str(tmp_path / "o")]) == 2

    def test_evaluate_self(self, tmp_path, cohort_dir):
        assert main(["evaluate", "--pred", str(cohort_dir), "--truth", str(cohort_dir), "--out", str(tmp_path / "r" / "rep")]) == 0
        rep = json.loads((tmp_path / "r" / "rep.json").read_text())
        assert rep["aggregate"]["dsc"]["mean"] == 1.0 and rep["excluded"] == 0
        assert "1.000 (0.000)" in (tmp_path / "r" / "rep.txt").read_text()

    def test_evaluate_empty_prediction(self, tmp_path, cohort_dir):
        pred = tmp_path / "pred"
        pred.mkdir()
        for f in cohort_dir.glob("*.cine"):
            seq = read_cine(f)
            if f.name.startswith("subject00") and seq.ids.cycle == 0:
                seq.masks[2] = 0
            write_cine(pred / f.name, seq)
        assert main(["evaluate", "--pred", str(pred), "--truth", str(cohort_dir), "--out", str(tmp_path / "rep.json")]) == 0
        assert json.loads((tmp_path / "rep.json").read_text())["excluded"] == 1

    def test_evaluate_mismatch(self, tmp_path, cohort_dir, capsys):
        pred = tmp_path / "pred"
        pred.mkdir()
        f = sorted(cohort_dir.glob("*.cine"))[0]
        write_cine(pred / f.name, read_cine(f))
        assert main(["evaluate", "--pred", str(pred), "--truth", str(cohort_dir), "--out", str(tmp_path / "r.json")]) == 2
        assert "mismatched ids" in capsys.readouterr().err


def test_entry_point_help():
    res = subprocess.run([sys.executable, "-m", "cinelstm.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "loo" in res.stdout
    res = subprocess.run([sys.executable, "-m", "cinelstm.cli", "bogus"], capture_output=True, text=True)
    assert res.returncode == 2
