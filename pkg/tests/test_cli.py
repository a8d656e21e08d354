import csv
import json

import numpy as np
import pytest

from conceptda.cli import main
from conceptda.model import ModelConfig, init_params, load_checkpoint

SPEC = {"Q": 2, "K": 3, "D": 6, "B": [[0.8, 0.3, 0.5], [0.2, 0.7, 0.9]], "noise_sigma": 0.5,
        "spurious_dim": 2, "spurious_corr_source": 0.9, "spurious_corr_target": -0.9,
        "marginal_gap": [0.1, 0.0, 0.0]}
CONFIG = {"alpha1": 1e-3, "alpha2": 1e-3, "lambda_c": 5.0, "lambda_d": 0.3, "tau": 0.5,
          "weight_decay": 4e-5, "batch": 32, "epochs": 2, "seed": 0, "mode": "cuda",
          "optimizer": "adam", "model": {"d": 2, "backbone_widths": [8]}}


def write_json(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def data_dir(tmp_path):
    out = tmp_path / "data"
    assert main(["gen", "--spec", write_json(tmp_path / "spec.json", SPEC), "--n-source", "300",
                 "--n-target", "300", "--seed", "3", "--out", str(out)]) == 0
    return out


def train_run(tmp_path, data_dir, name="run", **overrides):
    cfg = {**CONFIG, **overrides}
    run = tmp_path / name
    code = main(["train", "--config", write_json(tmp_path / f"{name}.json", cfg),
                 "--data", str(data_dir), "--out", str(run)])
    return code, run


class TestGen:
    def test_writes_csvs(self, data_dir):
        assert (data_dir / "source.csv").exists() and (data_dir / "target.csv").exists()
        assert json.loads((data_dir / "spec.json").read_text())["spec"]["K"] == 3

    def test_deterministic(self, tmp_path, data_dir):
        again = tmp_path / "again"
        main(["gen", "--spec", str(tmp_path / "spec.json"), "--n-source", "300", "--n-target", "300",
              "--seed", "3", "--out", str(again)])
        for name in ("source.csv", "target.csv"):
            assert (again / name).read_bytes() == (data_dir / name).read_bytes()

    def test_bad_spec(self, tmp_path, capsys):
        code = main(["gen", "--spec", write_json(tmp_path / "s.json", {**SPEC, "D": 2}), "--n-source", "5",
                     "--n-target", "5", "--seed", "0", "--out", str(tmp_path / "o")])
        assert code == 2
        assert "bad spec" in capsys.readouterr().err

    def test_unwritable_dir(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        code = main(["gen", "--spec", write_json(tmp_path / "s.json", SPEC), "--n-source", "5",
                     "--n-target", "5", "--seed", "0", "--out", str(blocker / "sub")])
        assert code == 3

    def test_missing_argument(self):
        assert main(["gen", "--spec", "x.json"]) == 2


class TestTrain:
    def test_outputs(self, tmp_path, data_dir):
        code, run = train_run(tmp_path, data_dir)
        assert code == 0
        manifest = json.loads((run / "manifest.json").read_text())
        assert manifest["seed"] == 0 and manifest["config"]["tau"] == 0.5
        assert set(manifest["datasets"]) == {"source", "target"}
        assert len(read_rows(run / "trainlog.csv")) == 2

    def test_table4_style_config(self, tmp_path, data_dir):
        code, _ = train_run(tmp_path, data_dir, batch=64, epochs=1)
        assert code == 0

    def test_zero_epochs_is_init(self, tmp_path, data_dir):
        code, run = train_run(tmp_path, data_dir, epochs=0, seed=7)
        assert code == 0
        init = init_params(ModelConfig(D=6, K=3, d=2, Q=2, backbone_widths=[8]), 7)
        assert load_checkpoint(run / "checkpoint.bin").equals(init)

    def test_missing_key(self, tmp_path, data_dir, capsys):
        cfg = dict(CONFIG)
        del cfg["lambda_c"]
        code = main(["train", "--config", write_json(tmp_path / "c.json", cfg), "--data", str(data_dir),
                     "--out", str(tmp_path / "r")])
        assert code == 2
        assert "lambda_c" in capsys.readouterr().err

    def test_unknown_model_key(self, tmp_path, data_dir):
        code, _ = train_run(tmp_path, data_dir, model={"width": 3})
        assert code == 2

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_numerical_abort(self, tmp_path, data_dir, capsys):
        code, _ = train_run(tmp_path, data_dir, optimizer="sgd", alpha2=1e200)
        assert code == 4
        err = capsys.readouterr().err
        assert "epoch" in err and "step" in err and "op" in err

    def test_bitwise_rerun(self, tmp_path, data_dir):
        _, a = train_run(tmp_path, data_dir, name="a")
        _, b = train_run(tmp_path, data_dir, name="b")
        for name in ("checkpoint.bin", "trainlog.csv", "manifest.json"):
            assert (a / name).read_bytes() == (b / name).read_bytes()


class TestEvalAndReport:
    def test_intervention_curve(self, tmp_path, data_dir):
        _, run = train_run(tmp_path, data_dir)
        assert main(["eval", "--run", str(run), "--split", "target", "--intervene", "0,0.25,0.5,0.75,1"]) == 0
        rows = read_rows(run / "intervention_curve.csv")
        assert len(rows) == 5 and float(rows[-1]["concept_acc"]) == 1.0
        assert (run / "intervention_curve.svg").read_text().startswith("<svg")
        first = (run / "intervention_curve.csv").read_bytes(), (run / "metrics.csv").read_bytes()
        main(["eval", "--run", str(run), "--split", "target", "--intervene", "0,0.25,0.5,0.75,1"])
        assert ((run / "intervention_curve.csv").read_bytes(), (run / "metrics.csv").read_bytes()) == first

    def test_source_beats_target_for_source_only(self, tmp_path, data_dir):
        _, run = train_run(tmp_path, data_dir, mode="source_only", epochs=8)
        main(["eval", "--run", str(run), "--split", "source"])
        main(["eval", "--run", str(run), "--split", "target"])
        rows = {r["split"]: r for r in read_rows(run / "metrics.csv")}
        assert float(rows["source"]["class_acc"]) >= float(rows["target"]["class_acc"])

    def test_missing_checkpoint(self, tmp_path, data_dir):
        _, run = train_run(tmp_path, data_dir)
        (run / "checkpoint.bin").unlink()
        assert main(["eval", "--run", str(run)]) == 2

    def test_bad_ratios(self, tmp_path, data_dir):
        _, run = train_run(tmp_path, data_dir)
        assert main(["eval", "--run", str(run), "--intervene", "0.5,0.2"]) == 2

    def test_report(self, tmp_path, data_dir):
        _, run = train_run(tmp_path, data_dir)
        assert main(["report", "--run", str(run)]) == 2  # not evaluated yet
        main(["eval", "--run", str(run)])
        assert main(["report", "--run", str(run)]) == 0
        report = run / "report"
        cols = read_rows(report / "concept_distributions.csv")[0].keys()
        assert {"jsd_source_target_chat", "jsd_target_chat_gt"} <= set(cols)
        summary = {r["quantity"]: r["value"] for r in read_rows(report / "summary.csv")}
        assert summary["eta_c"] == "not computable"
        snapshot = {p.name: p.read_bytes() for p in report.iterdir()}
        assert main(["report", "--run", str(run)]) == 0
        assert {p.name: p.read_bytes() for p in report.iterdir()} == snapshot

    def test_report_empty_dir(self, tmp_path):
        (tmp_path / "empty").mkdir()
        assert main(["report", "--run", str(tmp_path / "empty")]) == 2


class TestVerify:
    def test_unknown_check(self):
        assert main(["verify", "--check", "nope"]) == 2

    def test_lemma3_passes(self, capsys):
        assert main(["verify", "--check", "lemma3", "--seed", "1"]) == 0
        assert "PASS" in capsys.readouterr().out
