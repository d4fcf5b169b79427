import csv
import json

import pytest

from ordinal_siamese import cohort as C
from ordinal_siamese.cli import EXIT_CONFIG, EXIT_DATA, EXIT_IO, main

CONFIG = {
    "workdir": "work",
    "synth": {"volume_shape": [1, 6, 6, 6], "noise_sigma": 0.1, "seed": 0,
              "level_quotas": {"0.4": 1, "0.5": 2, "0.6": 3, "0.7": 4, "0.8": 5, "0.9": 6, "1.0": 9}},
    "encoder": {"input_shape": [1, 6, 6, 6], "stem_channels": 2, "stem_stride": 2,
                "stages": [[1, 2, 1]], "head_dims": [4, 3], "embedding_dim": 3},
    "split": {"train_fraction": 0.6},
    "train": {"epochs": 2, "seeds": [1, 2]},
    "tsne": {"train_perplexity": 4, "test_perplexity": 2, "iterations": 300},
}


def write_config(path, **overrides):
    doc = {**CONFIG, **overrides}
    path.write_text(json.dumps(doc))
    return str(path)


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture
def cfg(tmp_path):
    return write_config(tmp_path / "c.json")


@pytest.fixture
def prepared(cfg, capsys):
    for cmd in ("gen", "label", "split"):
        assert run(capsys, cmd, "--config", cfg)[0] == 0
    return cfg


def snapshot(root):
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file() and p.name != "timing.json"}


class TestConfigErrors:
    def test_missing_config(self, tmp_path, capsys):
        code, _, err = run(capsys, "gen", "--config", str(tmp_path / "nope.json"))
        assert code == EXIT_CONFIG
        assert "nope.json" in err

    def test_unknown_key(self, tmp_path, capsys):
        path = write_config(tmp_path / "c.json", extra=1)
        assert run(capsys, "gen", "--config", path)[0] == EXIT_CONFIG

    def test_invalid_json(self, tmp_path, capsys):
        (tmp_path / "c.json").write_text("{")
        assert run(capsys, "gen", "--config", str(tmp_path / "c.json"))[0] == EXIT_CONFIG

    def test_missing_inputs_is_io_error(self, cfg, capsys):
        assert run(capsys, "label", "--config", cfg)[0] == EXIT_IO
        assert run(capsys, "train", "--config", cfg)[0] == EXIT_IO


class TestStages:
    def test_gen_echoes_table(self, cfg, tmp_path, capsys):
        code, out, _ = run(capsys, "gen", "--config", cfg)
        assert code == 0
        records = C.read_cohort_csv(tmp_path / "work" / "cohort" / "cohort.csv")
        for level, n in C.distribution_table(C.label_cohort(records)).items():
            assert f"rho={level}: {n}" in out

    def test_gen_twice_identical(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json")
        run(capsys, "gen", "--config", cfg, "--seed", "7", "--workdir", str(tmp_path / "a"))
        run(capsys, "gen", "--config", cfg, "--seed", "7", "--workdir", str(tmp_path / "b"))
        assert snapshot(tmp_path / "a") == snapshot(tmp_path / "b")

    def test_idempotent_unless_forced(self, prepared, tmp_path, capsys):
        manifest = tmp_path / "work" / "manifests" / "train.json"
        manifest.write_text(manifest.read_text())  # same bytes, new mtime
        before = manifest.stat().st_mtime_ns
        code, out, _ = run(capsys, "split", "--config", prepared)
        assert code == 0 and "skipping" in out
        assert manifest.stat().st_mtime_ns == before
        code, out, _ = run(capsys, "split", "--config", prepared, "--force")
        assert "skipping" not in out

    def test_split_seed_changes_manifest(self, prepared, tmp_path, capsys):
        first = (tmp_path / "work" / "manifests" / "train.json").read_text()
        run(capsys, "split", "--config", prepared, "--seed", "3", "--force")
        assert (tmp_path / "work" / "manifests" / "train.json").read_text() != first

    def test_verify_clean_and_tampered(self, prepared, tmp_path, capsys):
        assert run(capsys, "verify", "--config", prepared)[0] == 0
        path = tmp_path / "work" / "manifests" / "test.json"
        train = json.loads((tmp_path / "work" / "manifests" / "train.json").read_text())
        doc = json.loads(path.read_text())
        doc["triplets"].append(train["triplets"][0])
        path.write_text(json.dumps(doc))
        code, out, _ = run(capsys, "verify", "--config", prepared)
        assert code == EXIT_DATA
        assert "violation" in out

    def test_bad_cohort_is_data_error(self, cfg, tmp_path, capsys):
        run(capsys, "gen", "--config", cfg)
        csv_path = tmp_path / "work" / "cohort" / "cohort.csv"
        csv_path.write_text(csv_path.read_text() + "P0001,1999-01-01,MAYBE,x.vol\n")
        assert run(capsys, "label", "--config", cfg)[0] == EXIT_DATA


class TestTrainEval:
    def test_full_chain(self, prepared, tmp_path, capsys):
        work = tmp_path / "work"
        code, out, _ = run(capsys, "train", "--config", prepared, "--loss", "weighted", "--seeds", "1,2")
        assert code == 0
        for s in (1, 2):
            assert (work / "runs" / "weighted" / f"seed{s}" / "checkpoint.ckpt").exists()
            assert (work / "runs" / "weighted" / f"seed{s}" / "log.csv").exists()

        code, out, _ = run(capsys, "eval", "--config", prepared, "--loss", "weighted", "--seeds", "1,2")
        assert code == 0
        assert out.count("mae=") == 3 and "mean over 2 runs" in out
        scatter = work / "eval" / "weighted" / "seed1" / "scatter.csv"
        assert scatter.read_text().splitlines()[0] == "scan_ref,true_rho,distance,pred_rho"
        summary = json.loads((work / "eval" / "weighted" / "summary.json").read_text())
        assert summary["runs"] == 2

        code, out, _ = run(capsys, "embed", "--config", prepared, "--split", "test", "--run-seed", "1")
        assert code == 0

        test_scans = C.TripletManifest.load(
            work / "manifests" / "test.json",
            {s.scan_ref: s for s in C.read_labels_csv(work / "labels.csv")}).scans()
        code, out, _ = run(capsys, "tsne", "--config", prepared, "--split", "test", "--perplexity", "2",
                           "--run-seed", "1")
        assert code == 0
        with open(work / "tsne" / "weighted_seed1_test.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["scan_ref", "true_rho", "x", "y"]
        assert len(rows) - 1 == len(test_scans)
        trace = json.loads((work / "tsne" / "weighted_seed1_test_trace.json").read_text())
        assert [e["iteration"] for e in trace["kl"]] == list(range(50, 301, 50))

        drop = sorted({str(s.level) for s in test_scans})[0]
        run(capsys, "tsne", "--config", prepared, "--split", "test", "--perplexity", "1.5",
            "--run-seed", "1", "--drop-levels", drop)
        with open(work / "tsne" / "weighted_seed1_test.csv") as fh:
            kept = list(csv.reader(fh))[1:]
        assert len(kept) == sum(1 for s in test_scans if str(s.level) != drop)

    def test_infeasible_perplexity(self, prepared, capsys):
        run(capsys, "train", "--config", prepared, "--loss", "weighted", "--seed", "1")
        code, _, err = run(capsys, "tsne", "--config", prepared, "--perplexity", "50", "--run-seed", "1")
        assert code == EXIT_CONFIG and "perplexity" in err

    def test_eval_without_checkpoint(self, prepared, capsys):
        assert run(capsys, "eval", "--config", prepared, "--seed", "9")[0] == EXIT_IO

    def test_train_skips_existing(self, prepared, capsys):
        run(capsys, "train", "--config", prepared, "--loss", "unweighted", "--seed", "1")
        code, out, _ = run(capsys, "train", "--config", prepared, "--loss", "unweighted", "--seed", "1")
        assert code == 0 and "skipping" in out
