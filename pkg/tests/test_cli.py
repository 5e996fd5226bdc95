import csv

import numpy as np
import pytest

from conftest import TINY
from epd.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from epd.config import Config


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = Config().updated(TINY)
    cfg.save(root / "tiny.cfg")
    return root


@pytest.fixture(scope="module")
def trained(workspace):
    out = workspace / "run"
    assert main(["train", str(workspace / "tiny.cfg"), "--out", str(out)]) == EXIT_OK
    return out


def write_raw(directory, scenes=("eth", "hotel", "zara1")):
    directory.mkdir()
    for i, name in enumerate(scenes):
        lines = []
        for pid in (1, 2):
            for f in range(22):
                lines.append(f"{f * 10}\t{pid}\t{0.1 * f + i:.3f}\t{0.05 * f * pid:.3f}")
        (directory / f"{name}.txt").write_text("\n".join(lines) + "\n")


class TestUsage:
    def test_no_command(self, capsys):
        with pytest.raises(SystemExit) as info:
            main([])
        assert info.value.code == EXIT_USAGE

    def test_unknown_flag(self):
        with pytest.raises(SystemExit) as info:
            main(["eval", "x", "--bogus"])
        assert info.value.code == EXIT_USAGE

    def test_missing_config(self, tmp_path, capsys):
        assert main(["train", str(tmp_path / "none.cfg"), "--out", str(tmp_path)]) == EXIT_USAGE
        assert "not found" in capsys.readouterr().err

    def test_bad_override(self, workspace):
        assert main(["train", str(workspace / "tiny.cfg"), "--out", "x", "--set", "train.seed"]) == EXIT_USAGE
        assert main(["train", str(workspace / "tiny.cfg"), "--out", "x", "--set", "train.bogus=1"]) == EXIT_USAGE


class TestData:
    def test_missing_checkpoint(self, tmp_path, capsys):
        assert main(["eval", str(tmp_path / "nope")]) == EXIT_DATA
        assert "data error" in capsys.readouterr().err

    def test_missing_raw_directory(self, tmp_path):
        assert main(["ingest", str(tmp_path / "absent"), "--out", str(tmp_path / "o")]) == EXIT_DATA

    def test_ingest(self, tmp_path, capsys):
        write_raw(tmp_path / "raw")
        assert main(["ingest", str(tmp_path / "raw"), "--out", str(tmp_path / "cache")]) == EXIT_OK
        rows = list(csv.DictReader(open(tmp_path / "cache" / "scenes.csv")))
        assert [r["scene"] for r in rows] == ["eth", "hotel", "zara1"]
        assert all(int(r["windows"]) == 6 for r in rows)
        assert "scene" in capsys.readouterr().out

    def test_malformed_raw(self, tmp_path):
        (tmp_path / "raw").mkdir()
        (tmp_path / "raw" / "bad.txt").write_text("not numbers at all\n" * 10)
        assert main(["ingest", str(tmp_path / "raw"), "--out", str(tmp_path / "o")]) == EXIT_DATA

    def test_train_on_ingested_cache(self, tmp_path):
        write_raw(tmp_path / "raw")
        main(["ingest", str(tmp_path / "raw"), "--out", str(tmp_path / "cache")])
        cfg = Config().updated({**TINY, "data.source": str(tmp_path / "cache"), "train.stages": "1"})
        cfg.save(tmp_path / "c.cfg")
        assert main(["train", str(tmp_path / "c.cfg"), "--out", str(tmp_path / "run")]) == EXIT_OK


class TestPipelineCommands:
    def test_train_writes_stages(self, trained):
        for s in (1, 2, 3, 4):
            assert (trained / f"stage{s}" / "manifest.json").exists()
        assert (trained / "final" / "losses.csv").exists()

    def test_resume_is_noop_when_complete(self, workspace, trained, capsys):
        assert main(["train", str(workspace / "tiny.cfg"), "--out", str(trained), "--resume"]) == EXIT_OK

    def test_resume_rejects_other_config(self, workspace, trained):
        assert main(["train", str(workspace / "tiny.cfg"), "--out", str(trained), "--resume",
                     "--set", "train.seed=5"]) == EXIT_USAGE

    def test_eval(self, trained, tmp_path, capsys):
        out = tmp_path / "ev"
        assert main(["eval", str(trained / "final"), "--k", "5", "--out", str(out)]) == EXIT_OK
        row = next(csv.DictReader(open(out / "metrics.csv")))
        assert row["k"] == "5" and int(row["invocations"]) == 5 * int(row["windows"])
        assert "minADE" in capsys.readouterr().out
        assert (out / "timing.csv").exists()

    def test_eval_is_reproducible(self, trained, tmp_path):
        for name in ("a", "b"):
            main(["eval", str(trained / "final"), "--k", "3", "--out", str(tmp_path / name)])
        assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()

    def test_eval_untrained_stage(self, trained):
        assert main(["eval", str(trained / "stage2"), "--mode", "full"]) == EXIT_DATA

    def test_bench(self, trained, tmp_path):
        out = tmp_path / "b"
        assert main(["bench", str(trained / "final"), "--k", "4", "--windows", "2", "--out", str(out)]) == EXIT_OK
        rows = {r["mode"]: r for r in csv.DictReader(open(out / "bench.csv"))}
        assert float(rows["full"]["relative_time"]) == 1.0
        assert float(rows["baseline"]["invocations_per_window"]) == 400

    def test_plot(self, trained, tmp_path):
        out = tmp_path / "p.svg"
        assert main(["plot", str(trained / "final"), "--window-id", "0", "--out", str(out)]) == EXIT_OK
        assert out.exists() and out.with_suffix(".csv").exists()

    def test_plot_bad_window(self, trained):
        assert main(["plot", str(trained / "final"), "--window-id", "999"]) == EXIT_USAGE

    def test_plot_unwritable(self, trained, tmp_path):
        assert main(["plot", str(trained / "final"), "--window-id", "0", "--out",
                     str(tmp_path / "no" / "p.svg")]) == EXIT_DATA

    def test_divergence_exit_code(self, tmp_path):
        raw = tmp_path / "raw"
        write_raw(raw)
        # coordinates whose squared errors overflow
        (raw / "eth.txt").write_text("".join(f"{f * 10}\t1\t{f * 1e200:.6e}\t0.0\n" for f in range(22)))
        main(["ingest", str(raw), "--out", str(tmp_path / "cache")])
        cfg = Config().updated({**TINY, "data.source": str(tmp_path / "cache"), "data.held_out": "zara1",
                                "train.stages": "1"})
        cfg.save(tmp_path / "c.cfg")
        with np.errstate(over="ignore", invalid="ignore"):
            code = main(["train", str(tmp_path / "c.cfg"), "--out", str(tmp_path / "run")])
        assert code == EXIT_NUMERIC

    def test_ablate(self, workspace, tmp_path):
        out = tmp_path / "ab"
        code = main(["ablate", str(workspace / "tiny.cfg"), "--out", str(out), "--set", "train.epochs_pd=5",
                     "--set", "train.epochs_ft=2"])
        assert code == EXIT_OK
        rows = list(csv.DictReader(open(out / "ablation.csv")))
        assert [(r["use_sc"], r["use_pd"]) for r in rows] == [("True", "False"), ("False", "True"), ("True", "True")]
        assert rows[0]["invocations"] == "0"
