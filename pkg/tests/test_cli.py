import subprocess
import sys

import pytest

from dprnn.cli import main
from dprnn.evaluation import RecallReport

from test_data import trees_equal

SYNTH = ["--concepts", "8", "--train-pairs", "16", "--val-pairs", "0", "--test-pairs", "10", "--k", "4", "--img-dim", "8"]
TRAIN = ["--epochs", "3", "--h", "6", "--q", "4", "--k", "4", "--img-dim", "8", "--batch-size", "8", "--lr", "0.002"]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(base / "ds"), "--seed", "3", *SYNTH]) == 0
    assert main(["train", "--data", str(base / "ds"), "--out", str(base / "run"), *TRAIN]) == 0
    return base


def first_test_pair(root):
    for line in (root / "manifest.txt").read_text().splitlines():
        parts = line.split("\t")
        if parts[0] == "image" and parts[1] == "test":
            return parts[2], parts[4].split(",")[0]
    raise AssertionError("no test image")


class TestSynth:
    def test_same_seed_identical_trees(self, tmp_path):
        for name in ("a", "b"):
            assert main(["synth", "--out", str(tmp_path / name), "--seed", "7", *SYNTH]) == 0
        assert trees_equal(tmp_path / "a", tmp_path / "b")


class TestTrain:
    def test_artifacts(self, trained):
        run = trained / "run"
        assert sorted(p.name for p in run.iterdir()) == [
            "config.txt", "epoch_000.ckpt", "epoch_001.ckpt", "epoch_002.ckpt", "model.ckpt", "train_log.jsonl",
        ]
        assert len((run / "train_log.jsonl").read_text().splitlines()) == 3

    def test_config_file_and_flag_precedence(self, trained, tmp_path):
        cfg = tmp_path / "c.txt"
        cfg.write_text("gamma=0.5\nepochs=1\nh=6\nq=4\nk=4\nimg_dim=8\nbatch_size=8\n")
        out = tmp_path / "run"
        assert main(["train", "--data", str(trained / "ds"), "--out", str(out), "--config", str(cfg), "--gamma", "0.3"]) == 0
        written = dict(line.split("=", 1) for line in (out / "config.txt").read_text().splitlines())
        assert written["gamma"] == "0.3"
        assert written["epochs"] == "1"
        assert written["lambda1"] == "9.0"

    def test_shape_mismatch_is_runtime_error(self, trained, tmp_path, capsys):
        code = main(["train", "--data", str(trained / "ds"), "--out", str(tmp_path / "x"), "--epochs", "1", "--k", "5"])
        assert code == 1
        assert "error" in capsys.readouterr().err


class TestEval:
    def test_five_fold_report(self, trained, capsys):
        code = main(["eval", "--data", str(trained / "ds"), "--checkpoint", str(trained / "run" / "model.ckpt"), "--folds", "5"])
        assert code == 0
        text = capsys.readouterr().out
        lines = text.strip().splitlines()
        assert len(lines) == 6
        assert [l.split()[0] for l in lines] == ["fold=0", "fold=1", "fold=2", "fold=3", "fold=4", "fold=mean"]
        assert len(RecallReport.from_text(text).folds) == 5

    def test_report_file_and_ensemble(self, trained, tmp_path):
        ckpt = str(trained / "run" / "model.ckpt")
        out = tmp_path / "r.txt"
        args = ["eval", "--data", str(trained / "ds"), "--folds", "2", "--out", str(out)]
        assert main([*args, "--checkpoint", ckpt]) == 0
        single = out.read_text()
        assert main([*args, "--checkpoint", ckpt, "--checkpoint", ckpt]) == 0
        assert out.read_text() == single


class TestRetrieve:
    def test_text_query(self, trained, capsys):
        image, text = first_test_pair(trained / "ds")
        code = main(["retrieve", "--data", str(trained / "ds"), "--checkpoint", str(trained / "run" / "model.ckpt"),
                     "--text", text, "--top-k", "3"])
        assert code == 0
        rows = [l.split("\t") for l in capsys.readouterr().out.strip().splitlines()]
        assert [r[0] for r in rows] == ["1", "2", "3"]
        scores = [float(r[2]) for r in rows]
        assert scores == sorted(scores, reverse=True)

    def test_unknown_id(self, trained):
        code = main(["retrieve", "--data", str(trained / "ds"), "--checkpoint", str(trained / "run" / "model.ckpt"),
                     "--image", "nope"])
        assert code == 1


class TestDumpAttention:
    def test_files(self, trained, tmp_path):
        image, text = first_test_pair(trained / "ds")
        out = tmp_path / "att"
        code = main(["dump-attention", "--data", str(trained / "ds"), "--checkpoint", str(trained / "run" / "model.ckpt"),
                     "--image", image, "--text", text, "--out", str(out)])
        assert code == 0
        alpha = [[float(v) for v in line.split()] for line in (out / "alpha.txt").read_text().splitlines()]
        assert len(alpha) == 4
        for row in alpha:
            assert sum(row) == pytest.approx(1.0, abs=1e-5)
            assert all(len(v.split(".")[1]) == 6 for v in (out / "alpha.txt").read_text().split())
        pair = (out / "pair.txt").read_text()
        assert "permutation=" in pair and "anchor_word=" in pair
        assert (out / "word_weights.txt").exists() and (out / "relatedness.txt").exists()


class TestGradcheck:
    def test_passes(self, capsys):
        assert main(["gradcheck", "--seed", "3"]) == 0
        assert "max_rel_error" in capsys.readouterr().out

    def test_fails_with_impossible_tolerance(self):
        assert main(["gradcheck", "--tolerance", "0"]) == 1


class TestUsage:
    @pytest.mark.parametrize(
        "argv",
        [["bogus"], ["synth", "--out", "x", "--sede", "3"], ["eval", "--folds", "2"], ["synth", "--out", "x", "--seed", "many"], []],
    )
    def test_usage_errors_exit_2(self, argv):
        with pytest.raises(SystemExit) as exc:
            main(argv)
        assert exc.value.code == 2

    def test_console_script(self, tmp_path):
        proc = subprocess.run([sys.executable, "-m", "dprnn.cli", "train", "--gama", "0.2"], capture_output=True, text=True)
        assert proc.returncode == 2
        assert "usage" in proc.stderr

    def test_missing_dataset_exit_1(self, tmp_path):
        assert main(["eval", "--data", str(tmp_path), "--checkpoint", str(tmp_path / "m.ckpt")]) == 1
