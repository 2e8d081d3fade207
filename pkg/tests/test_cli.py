import csv
import json

import numpy as np
import pytest

from alphavi.cli import COMMAND_DEFAULTS, ExperimentConfig, apply_override, fmt, main, resolve_config
from alphavi.core_math import RngStream
from alphavi.errors import ConfigError
from alphavi.experiments import factorized_validation
from alphavi.snr_theory import snr_factorized_gaussian


def read_csv(path):
    lines = path.read_text().splitlines()
    meta = [line for line in lines if line.startswith("#")]
    rows = list(csv.DictReader(line for line in lines if not line.startswith("#")))
    return meta, rows


def run_cli(tmp_path, command, *overrides, quick=False, config=None):
    argv = [command, "--override", f"output_dir={json.dumps(str(tmp_path))}"]
    for o in overrides:
        argv += ["--override", o]
    if quick:
        argv.append("--quick")
    if config is not None:
        argv += ["--config", str(config)]
    return main(argv)


class TestConfig:
    def test_defaults(self):
        cfg = resolve_config("gauss-scale")
        assert cfg.steps == 1000 and cfg.replications == 15
        assert cfg.step_size_grid[0] == pytest.approx(1e-7) and cfg.step_size_grid[-1] == pytest.approx(1e7)

    @pytest.mark.parametrize("command", list(COMMAND_DEFAULTS))
    def test_round_trip_is_idempotent(self, command):
        cfg = resolve_config(command, quick=True)
        text = cfg.to_json()
        again = ExperimentConfig.from_dict(json.loads(text))
        assert again.to_json() == text and again == cfg

    def test_layering_order(self):
        cfg = resolve_config("gauss-scale", {"steps": 10, "replications": 3}, ["steps=20"], quick=True)
        assert (cfg.steps, cfg.replications) == (20, 3)

    def test_nested_override(self):
        doc = apply_override({"dataset": {"name": "iris"}}, "dataset.subset_seed=4")
        assert doc["dataset"] == {"name": "iris", "subset_seed": 4}
        assert apply_override({}, "optimizer=adam")["optimizer"] == "adam"

    @pytest.mark.parametrize(
        "file_doc,overrides,field",
        [
            ({"alphas": []}, [], "alphas"),
            ({}, ["optimizer=\"rmsprop\""], "optimizer"),
            ({}, ["estimator=\"score\""], "estimator"),
            ({}, ["bogus=1"], "bogus"),
            ({}, ["dataset.bogus=1"], "dataset.bogus"),
            ({"experiment": "logreg"}, [], "experiment"),
        ],
    )
    def test_validation_errors_name_the_field(self, file_doc, overrides, field):
        with pytest.raises(ConfigError) as info:
            resolve_config("gauss-scale", file_doc, overrides)
        assert field in str(info.value)

    def test_fmt(self):
        assert fmt(0.1) == "0.10000000000000001"
        assert fmt(3) == "3" and fmt(True) == "true" and fmt(None) == ""
        assert fmt(np.float64(1 / 3)) == "0.33333333333333331"


class TestExitCodes:
    def test_config_error(self, tmp_path, capsys):
        assert run_cli(tmp_path, "gauss-scale", "alphas=[]") == 2
        assert "alphas" in capsys.readouterr().err

    def test_bad_json(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text("{not json")
        assert run_cli(tmp_path, "snr-table", config=p) == 2

    def test_missing_config_file(self, tmp_path):
        assert run_cli(tmp_path, "snr-table", config=tmp_path / "nope.json") == 2

    def test_missing_dataset(self, tmp_path):
        code = run_cli(tmp_path, "logreg", 'dataset.name=null', f'dataset.path={json.dumps(str(tmp_path / "x.csv"))}', quick=True)
        assert code == 2


class TestSnrTable:
    def test_rows_and_reproducibility(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        args = ("d=[1,5,50]", "alphas=[0,0.5,1.5]")
        assert run_cli(a, "snr-table", *args) == 0
        assert run_cli(b, "snr-table", *args) == 0
        for name in ("snr_table.csv", "snr_sigma_sweep.csv"):
            assert (a / name).read_bytes().split(b"# config")[0] == (b / name).read_bytes().split(b"# config")[0]
            assert [l for l in (a / name).read_text().splitlines() if not l.startswith("#")] == [
                l for l in (b / name).read_text().splitlines() if not l.startswith("#")
            ]
        meta, rows = read_csv(a / "snr_table.csv")
        assert any(m.startswith("# config: ") for m in meta) and any(m.startswith("# version: ") for m in meta)
        for col in ("d", "alpha", "lambda_spec", "status", "snr_or_bound", "existence_margin"):
            assert col in rows[0]
        zero = [r for r in rows if (r["family"], r["quantity"], r["d"], r["alpha"]) == ("fullrank", "snr", "5", "0")]
        assert zero and float(zero[0]["snr_or_bound"]) == pytest.approx(1 / 7)
        big = [r for r in rows if r["family"] == "factorized" and r["quantity"] == "snr" and r["d"] == "50" and r["alpha"] == "0.5" and r["lambda_spec"] == "iso:4"]
        assert big and float(big[0]["snr_or_bound"]) == pytest.approx(1.2179e-5, rel=1e-3)


class TestSnrValidate:
    def test_quick_grid_passes(self, tmp_path):
        # alpha = 0.4 with lambda = 0.25 is left out: there the MC estimate has infinite fourth moments
        code = run_cli(tmp_path, "snr-validate", "d=[1,2]", "alphas=[0,0.9,1.5]", "lambdas=[0.25,4]", "mc_samples=200000",
                       "fullrank_pairs=2", "fullrank_alphas=[-0.5]", quick=True)
        meta, rows = read_csv(tmp_path / "snr_validate.csv")
        assert code == 0
        verdicts = {r["verdict"] for r in rows}
        assert "pass" in verdicts and "fail" not in verdicts
        assert any(r["verdict"] == "skipped-undefined" for r in rows)

    def test_corrupted_theory_fails(self):
        def corrupted(sp, sq, alpha, j):
            report = snr_factorized_gaussian(sp, sq, alpha, j)
            return report if not report.defined else type(report)(report.status, 1.1 * report.value, report.upper_bound, report.existence_margin, report.log_value)

        rows = factorized_validation([1], [0.4], [4.0], 200_000, RngStream(0), theory=corrupted)
        assert any(r.failed for r in rows)


class TestVarCheck:
    def test_quick(self, tmp_path):
        code = run_cli(tmp_path, "var-check", "d=[1,4]", "alphas=[0.25,0.4]", "lambdas=[1,4]", "mc_samples=100000")
        _, rows = read_csv(tmp_path / "var_check.csv")
        assert code == 0
        equal = [r for r in rows if r["lambda"] == "1"]
        assert equal and all(float(r["bound"]) == 0 and float(r["mc_variance_component_0"]) == 0 for r in equal)
        one_d = [r for r in rows if r["d"] == "1" and r["alpha"] == "0.25" and r["lambda"] == "4"][0]
        assert float(one_d["bound"]) == pytest.approx(0.965981, abs=1e-6)
        assert float(one_d["mc_variance_component_0"]) <= 0.965981


class TestExperiments:
    def test_gauss_scale_quick_cell(self, tmp_path):
        code = run_cli(tmp_path, "gauss-scale", "d=[8]", "alphas=[0]", "n_samples_list=[1]", "step_size_grid=[0.1,1]", "replications=2", "steps=100")
        assert code == 0
        _, summary = read_csv(tmp_path / "gauss_scale_summary.csv")
        assert float(summary[0]["final_mean_error"]) < 1e-3
        traces = [p for p in tmp_path.iterdir() if p.name.startswith("gauss_scale_d8")]
        _, rows = read_csv(traces[0])
        assert list(rows[0]) == ["step", "mean_error", "stderr_error", "chosen_step_size"]
        assert len(rows) == 101

    def test_logreg_and_path(self, tmp_path):
        code = run_cli(tmp_path, "logreg", "alphas=[0.2]", "n_samples_list=[5]", "step_size_grid=[0.1]", "replications=1",
                       "steps=30", "final_samples=2000", "loss_samples=100")
        assert code == 0
        code = run_cli(tmp_path, "snr-path", "alphas=[0,0.3]", "steps=20", "record_every=10", "mc_samples=200",
                       'dataset.name="iris"')
        assert code == 0
        _, rows = read_csv(tmp_path / "snr_path_iris.csv")
        assert [(r["step"], r["alpha"]) for r in rows][:2] == [("0", "0"), ("0", "0.29999999999999999")]
        assert all(r["status"] == "ok" for r in rows)
