import json

import numpy as np
import pytest

from anyvar import dataset as ds
from anyvar.cli import main
from anyvar.checkpoint import load_checkpoint
from anyvar.metrics import write_forecast_file


TINY_TRAIN = {
    "model": {"n_layers": 1, "d_model": 16, "n_heads": 2, "d_ff": 32,
              "patch_size": 4, "n_mixture_components": 2},
    "train": {"peak_lr": 3e-3, "warmup_steps": 5, "total_steps": 40,
              "batch_size": 8, "eval_interval": 20, "seed": 0, "max_tokens": 64},
}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["syndata", "--kind", "wavelet", "--n", "40", "--length", "48",
                 "--seed", "1", "--out", str(root / "train.jsonl")]) == 0
    assert main(["syndata", "--kind", "wavelet", "--n", "12", "--length", "48",
                 "--seed", "2", "--out", str(root / "val.jsonl")]) == 0
    (root / "cfg.json").write_text(json.dumps(TINY_TRAIN))
    return root


class TestSyndata:
    def test_writes_readable_jsonl(self, workdir):
        records = ds.read_jsonl(workdir / "train.jsonl")
        assert len(records) == 40
        assert all(len(r.variates[0]) == 48 for r in records)

    def test_mixed_and_multivariate(self, tmp_path):
        out = tmp_path / "mixed.jsonl"
        assert main(["syndata", "--kind", "mixed", "--n", "10", "--length", "32",
                     "--frac-garch", "0.5", "--out", str(out)]) == 0
        recs = ds.read_jsonl(out)
        tags = [r.id.split("-")[0] for r in recs]
        assert tags.count("garch") == 5
        out2 = tmp_path / "mv.jsonl"
        assert main(["syndata", "--kind", "multivariate", "--n", "3", "--length", "32",
                     "--variates", "4", "--correlated", "--out", str(out2)]) == 0
        assert all(r.n_variates == 4 for r in ds.read_jsonl(out2))

    def test_seed_reproducible(self, tmp_path):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        for out in (a, b):
            main(["syndata", "--kind", "garch", "--n", "5", "--length", "24",
                  "--seed", "9", "--out", str(out)])
        assert a.read_text() == b.read_text()


class TestTrainCommands:
    def test_pretrain_finetune_evaluate(self, workdir):
        ckpt_path = workdir / "model.avck"
        rc = main(["pretrain", "--config", str(workdir / "cfg.json"),
                   "--data", str(workdir / "train.jsonl"),
                   "--out", str(ckpt_path), "--seed", "0"])
        assert rc == 0
        assert ckpt_path.exists()
        assert (workdir / "model.avck.trace.csv").exists()
        assert (workdir / "provenance.json").exists()
        ckpt = load_checkpoint(ckpt_path)
        assert ckpt.step == 40

        ft_cfg = workdir / "ft.json"
        ft_cfg.write_text(json.dumps({"train": {"total_steps": 10, "warmup_steps": 2,
                                                "eval_interval": 5, "batch_size": 8,
                                                "max_tokens": 64}}))
        rc = main(["finetune", "--ckpt", str(ckpt_path),
                   "--data", str(workdir / "train.jsonl"),
                   "--val", str(workdir / "val.jsonl"),
                   "--config", str(ft_cfg),
                   "--context", "16", "--horizon", "8",
                   "--out", str(workdir / "ft.avck")])
        assert rc == 0 and (workdir / "ft.avck").exists()

        rc = main(["evaluate", "--ckpt", str(ckpt_path),
                   "--data", str(workdir / "val.jsonl"),
                   "--horizon", "8", "--context", "16",
                   "--out", str(workdir / "eval")])
        assert rc == 0
        text = (workdir / "eval" / "report.csv").read_text()
        assert text.splitlines()[0] == "dataset,horizon,metric,value"

    def test_pretrain_without_data_fails_cleanly(self, workdir, capsys):
        rc = main(["pretrain", "--out", str(workdir / "x.avck")])
        assert rc == 1
        assert "no training data" in capsys.readouterr().err


class TestMetricsCommand:
    def test_score_files(self, tmp_path, capsys):
        rng = np.random.default_rng(0)
        y = rng.normal(5.0, 1.0, size=32)
        ds.write_jsonl([ds.TimeSeriesRecord(
            id="s", variates=[ds.VariateSeries("x", y)])], tmp_path / "truth.jsonl")
        write_forecast_file([{
            "id": "s", "variate": "x", "levels": [0.1, 0.5, 0.9],
            "quantiles": [[v - 1, v, v + 1] for v in y[-8:]],
            "mean": [float(v) for v in y[-8:]], "nll": None,
        }], tmp_path / "fc.jsonl")
        rc = main(["metrics", "--forecasts", str(tmp_path / "fc.jsonl"),
                   "--truth", str(tmp_path / "truth.jsonl")])
        assert rc == 0
        out = capsys.readouterr().out
        assert "MAE" in out and "s/x" in out

    def test_missing_file_exit_code(self, tmp_path, capsys):
        rc = main(["metrics", "--forecasts", str(tmp_path / "nope.jsonl"),
                   "--truth", str(tmp_path / "nope2.jsonl")])
        assert rc == 1
        assert "nope" in capsys.readouterr().err


class TestBayesCommand:
    def test_wavelet_fit(self, tmp_path):
        rc = main(["syndata", "--kind", "wavelet", "--n", "2", "--length", "32",
                   "--wavelet-mode", "continuous_prior", "--seed", "5",
                   "--out", str(tmp_path / "data.jsonl")])
        assert rc == 0
        rc = main(["bayes", "--model", "mixture", "--data", str(tmp_path / "data.jsonl"),
                   "--steps", "200", "--horizon", "8", "--evidence-samples", "500",
                   "--seed", "0", "--out", str(tmp_path / "bayes")])
        assert rc == 0
        report = (tmp_path / "bayes" / "report.csv").read_text()
        assert "predictive_nll" in report
        assert any(p.name.startswith("chain_") for p in (tmp_path / "bayes").iterdir())


class TestExperimentCommand:
    def test_bayes_study_micro(self, tmp_path):
        cfg = tmp_path / "exp.json"
        cfg.write_text(json.dumps({
            "bayes_replications": 2, "bayes_mh_steps": 200, "bayes_evidence_samples": 200,
        }))
        rc = main(["experiment", "--tag", "bayes_study", "--seeds", "1",
                   "--config", str(cfg), "--out", str(tmp_path / "exp")])
        assert rc == 0
        assert (tmp_path / "exp" / "report.csv").exists()
        assert (tmp_path / "exp" / "report.md").exists()
        prov = json.loads((tmp_path / "exp" / "provenance.json").read_text())
        assert prov["tag"] == "bayes_study" and prov["seeds"] == [0]

    def test_unknown_tag_usage_error(self):
        assert main(["experiment", "--tag", "bogus"]) == 2


class TestExitCodes:
    def test_unknown_flag_is_usage_error(self):
        assert main(["syndata", "--frobnicate"]) == 2

    def test_unknown_command_is_usage_error(self):
        assert main(["frobnicate"]) == 2

    def test_missing_input_file_is_runtime_error(self, tmp_path, capsys):
        rc = main(["evaluate", "--ckpt", str(tmp_path / "missing.avck"),
                   "--data", str(tmp_path / "missing.jsonl")])
        assert rc == 1
        assert "missing.avck" in capsys.readouterr().err
