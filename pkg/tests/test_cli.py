import csv
import json
from pathlib import Path

import jsonschema
import numpy as np
import pytest

import gdcan.autodiff as ad
from gdcan import data as data_mod
from gdcan.cli import EXIT_CHECK, EXIT_OK, EXIT_USAGE, main
from gdcan.reports import ATTENTION_HEADER, SWEEP_HEADER
from gdcan.routing import REPORT_HEADER

ROOT = Path(__file__).resolve().parents[1]
SCHEMAS = {p.stem.split(".")[0]: json.loads(p.read_text()) for p in (ROOT / "docs/schemas").glob("*.json")}

TINY = {
    "train": {"epochs": 1, "channels": [4, 8], "hidden_dim": 8, "calibration_samples": 16, "batch_per_domain": 8, "seed": 2},
    "data": {"classes": 3, "samples_per_class": 8, "image_size": [3, 8, 8]},
}


def write_config(tmp_path, name="cfg.json", **train):
    doc = json.loads(json.dumps(TINY))
    doc["train"].update(train)
    doc["out_dir"] = str(tmp_path / "run")
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return path


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.reader(f))


def jsonl(path):
    return [json.loads(line) for line in Path(path).read_text().splitlines()]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("trained")
    cfg = write_config(tmp)
    assert main(["train", "--config", str(cfg)]) == EXIT_OK
    return cfg, tmp / "run"


class TestTrain:
    def test_missing_config(self, tmp_path, capsys):
        missing = tmp_path / "absent.json"
        assert main(["train", "--config", str(missing)]) == EXIT_USAGE
        assert str(missing) in capsys.readouterr().err

    def test_unknown_key_is_usage_error(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"train": {"alfa": 1}}))
        assert main(["train", "--config", str(path)]) == EXIT_USAGE

    def test_artifacts_validate(self, trained):
        _, out = trained
        names = {p.name for p in out.iterdir()}
        assert {"model.npz", "metrics.jsonl", "steps.jsonl", "routing.csv", "config.json", "run_info.json"} <= names
        for rec in jsonl(out / "metrics.jsonl"):
            jsonschema.validate(rec, SCHEMAS["metrics"])
        for rec in jsonl(out / "steps.jsonl"):
            jsonschema.validate(rec, SCHEMAS["steps"])
        jsonschema.validate(json.loads((out / "config.json").read_text()), SCHEMAS["config"])
        jsonschema.validate(json.loads((out / "run_info.json").read_text()), SCHEMAS["run_info"])
        rows = read_csv(out / "routing.csv")
        assert tuple(rows[0]) == REPORT_HEADER and len(rows) == 3

    def test_rerun_is_byte_identical(self, trained, tmp_path):
        cfg, out = trained
        again = tmp_path / "again"
        assert main(["train", "--config", str(cfg), "--out", str(again)]) == EXIT_OK
        for name in ("model.npz", "metrics.jsonl", "steps.jsonl", "routing.csv"):
            assert (out / name).read_bytes() == (again / name).read_bytes(), name

    def test_seed_flag_overrides_config(self, trained, tmp_path):
        cfg, out = trained
        other = tmp_path / "seeded"
        assert main(["train", "--config", str(cfg), "--out", str(other), "--seed", "9"]) == EXIT_OK
        assert json.loads((other / "config.json").read_text())["train"]["seed"] == 9
        assert (out / "model.npz").read_bytes() != (other / "model.npz").read_bytes()

    def test_source_only_at_lambda_one_never_separates(self, tmp_path):
        cfg = write_config(tmp_path, alpha=0.0, beta=0.0, **{"lambda": 1.0})
        assert main(["train", "--config", str(cfg)]) == EXIT_OK
        out = tmp_path / "run"
        assert (out / "metrics.jsonl").is_file()
        rows = read_csv(out / "routing.csv")[1:]
        assert rows and all(float(r[2]) == 0.0 for r in rows)


class TestGradcheck:
    def test_empty_selection(self):
        assert main(["gradcheck", "--only", ","]) == EXIT_USAGE

    def test_unknown_case(self, capsys):
        assert main(["gradcheck", "--only", "cosh"]) == EXIT_USAGE
        assert "cosh" in capsys.readouterr().err

    def test_list(self, capsys):
        assert main(["gradcheck", "--list"]) == EXIT_OK
        names = capsys.readouterr().out.split()
        assert "sigmoid" in names and "objective" in names

    def test_selected_cases_pass(self, capsys):
        assert main(["gradcheck", "--only", "sigmoid,conv2d,mmd2_unbiased,attention"]) == EXIT_OK
        assert capsys.readouterr().out.count("ok") == 4

    def test_broken_sigmoid_backward(self, monkeypatch, capsys):
        def broken(a):
            out = 1.0 / (1.0 + np.exp(-a.data))
            return ad.Tensor._make(out, "sigmoid", (a,), lambda g: (g * out,))  # missing (1 - out)

        monkeypatch.setattr(ad, "sigmoid", broken)
        assert main(["gradcheck", "--only", "tanh,sigmoid"]) == EXIT_CHECK
        err = capsys.readouterr().err
        assert "sigmoid" in err and "tanh" not in err

    def test_malformed_flag(self):
        with pytest.raises(SystemExit) as info:
            main(["gradcheck", "--tol", "abc"])
        assert info.value.code == EXIT_USAGE


class TestReports:
    def test_attention_report(self, trained, tmp_path):
        cfg, out = trained
        dest = tmp_path / "att"
        assert main(["report-attention", "--config", str(cfg), "--model", str(out / "model.npz"), "--out", str(dest)]) == EXIT_OK
        rows = read_csv(dest / "attention_diff.csv")
        assert tuple(rows[0]) == ATTENTION_HEADER
        assert len(rows) - 1 == 4 + 8
        assert {r[0] for r in rows[1:]} == {"stage1", "stage2"}

    def test_missing_model(self, trained, tmp_path):
        cfg, _ = trained
        assert main(["report-attention", "--config", str(cfg), "--model", str(tmp_path / "x.npz")]) == EXIT_USAGE

    def test_sweep(self, tmp_path):
        cfg = write_config(tmp_path)
        out = tmp_path / "sweep"
        assert main(["sweep-lambda", "--config", str(cfg), "--out", str(out), "--lambdas", "0,0.5,1"]) == EXIT_OK
        rows = read_csv(out / "sweep.csv")
        assert tuple(rows[0]) == SWEEP_HEADER
        fracs = [float(r[2]) for r in rows[1:]]
        assert fracs[0] == 1.0 and fracs[-1] == 0.0
        assert all(a >= b for a, b in zip(fracs, fracs[1:]))
        assert {p.name for p in out.iterdir()} >= {"lambda_0", "lambda_0.5", "lambda_1"}

    @pytest.mark.parametrize("bad", ["", "0,x", "0.5,1.5"])
    def test_sweep_bad_lambdas(self, tmp_path, bad):
        cfg = write_config(tmp_path)
        assert main(["sweep-lambda", "--config", str(cfg), "--lambdas", bad]) == EXIT_USAGE


class TestData:
    def test_gen_data(self, tmp_path):
        cfg = write_config(tmp_path)
        out = tmp_path / "data"
        assert main(["gen-data", "--config", str(cfg), "--out", str(out), "--seed", "4"]) == EXIT_OK
        src = data_mod.load(out / "source.dcds")
        tgt = data_mod.load(out / "target.dcds")
        assert len(src) == len(tgt) == 24 and src.manifest["seed"] == 4
        manifests = json.loads((out / "manifest.json").read_text())
        for m in manifests.values():
            jsonschema.validate(m, SCHEMAS["manifest"])
        first = (out / "source.dcds").read_bytes()
        assert main(["gen-data", "--config", str(cfg), "--out", str(out), "--seed", "4"]) == EXIT_OK
        assert (out / "source.dcds").read_bytes() == first

    def test_eval(self, trained, tmp_path, capsys):
        cfg, out = trained
        assert main(["eval", "--config", str(cfg), "--model", str(out / "model.npz"), "--out", str(tmp_path)]) == EXIT_OK
        printed = json.loads(capsys.readouterr().out)
        stored = json.loads((tmp_path / "eval.json").read_text())
        last = jsonl(out / "metrics.jsonl")[-1]
        assert printed == stored
        assert stored["src_acc"] == last["src_acc"] and stored["tgt_acc"] == last["tgt_acc"]
