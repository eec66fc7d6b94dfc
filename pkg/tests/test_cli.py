import csv
import json
import subprocess
import sys

import pytest
import yaml

from fuzzyadapt import cli

SMALL = {
    "domain": {"samples_per_class": 40},
    "seeds": [0, 1],
    "source_train": {"max_epochs": 3},
    "adapt": {"epochs": 2},
    "compare": {"objectives": ["fal", "ce"]},
    "verify": {
        "boundedness_samples": 2000,
        "boundedness_ks": [2, 3],
        "risk_gap_matrices": 3,
        "risk_gap_samples": 20,
        "gradcheck_instances": 20,
    },
}


def write_config(path, data):
    path.write_text(yaml.safe_dump(data))
    return str(path)


def merged(**sections):
    out = json.loads(json.dumps(SMALL))
    for key, value in sections.items():
        if isinstance(value, dict):
            out.setdefault(key, {}).update(value)
        else:
            out[key] = value
    return out


def run(cmd, cfg, out, *extra):
    return cli.main([cmd, "--config", cfg, "--out", str(out), *extra])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def cfg(tmp_path):
    return write_config(tmp_path / "cfg.yaml", SMALL)


def pipeline(cfg, out, *extra):
    return [run(c, cfg, out, *extra) for c in ("gen", "train-source", "adapt")]


class TestPipeline:
    def test_files_and_columns(self, cfg, tmp_path):
        out = tmp_path / "o"
        assert pipeline(cfg, out, "--seed", "3") == [0, 0, 0]
        for rel in (
            "data/source.fads",
            "data/target.fads",
            "data/target_eval.fads",
            "data/manifest.json",
            "checkpoints/source_model.json",
            "checkpoints/adapted_model.json",
            "reports/adapt_report.json",
        ):
            assert (out / rel).exists(), rel
        for name in ("source_metrics.csv", "source_train_loss.csv", "adapt_metrics.csv"):
            rows = read_csv(out / "reports" / name)
            assert rows and {"seed", "config_hash"} <= set(rows[0])
            assert {r["seed"] for r in rows} == {"3"}
        assert (out / "reports" / "adapt.config.yaml").exists()

    def test_target_file_is_unlabeled(self, cfg, tmp_path):
        from fuzzyadapt import datagen

        run("gen", cfg, tmp_path)
        t = datagen.load(tmp_path / "data" / "target.fads")
        assert t.labels is None and t.noisy_labels is None

    def test_rerun_is_bit_identical(self, cfg, tmp_path):
        pipeline(cfg, tmp_path / "a")
        pipeline(cfg, tmp_path / "b")
        files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        assert len(files) >= 10
        for rel in files:
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel

    def test_adapt_without_source_data(self, cfg, tmp_path):
        run("gen", cfg, tmp_path)
        run("train-source", cfg, tmp_path)
        (tmp_path / "data" / "source.fads").unlink()
        assert run("adapt", cfg, tmp_path) == 0

    def test_zero_learning_rate(self, tmp_path):
        c = write_config(tmp_path / "c.yaml", merged(adapt={"epochs": 1, "train": {"lr_backbone": 0.0, "lr_head": 0.0}}))
        assert pipeline(c, tmp_path) == [0, 0, 0]
        rows = {r["stage"]: r for r in read_csv(tmp_path / "reports" / "adapt_metrics.csv")}
        assert rows["pre"]["accuracy"] == rows["post"]["accuracy"]
        assert rows["pre"]["per_class_acc"] == rows["post"]["per_class_acc"]

    def test_output_env_var(self, cfg, tmp_path, monkeypatch):
        monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "env"))
        assert cli.main(["gen", "--config", cfg]) == 0
        assert (tmp_path / "env" / "data" / "source.fads").exists()

    def test_plots(self, cfg, tmp_path):
        pytest.importorskip("matplotlib")
        assert pipeline(cfg, tmp_path, "--emit-plots") == [0, 0, 0]
        assert list((tmp_path / "reports").glob("*.png"))


class TestExitCodes:
    def test_missing_checkpoint(self, cfg, tmp_path):
        run("gen", cfg, tmp_path)
        assert run("adapt", cfg, tmp_path) == 2

    def test_missing_config_file(self, tmp_path):
        assert cli.main(["gen", "--config", str(tmp_path / "nope.yaml"), "--out", str(tmp_path)]) == 2

    @pytest.mark.parametrize(
        "data",
        [
            {"adapt": {"epochs": 0}},
            {"adapt": {"lerning_rate": 1}},
            {"domain": {"n_classes": 1}},
            {"seeds": []},
            {"compare": {"objectives": ["shot"]}},
            ["not", "a", "mapping"],
        ],
    )
    def test_config_errors(self, tmp_path, data, caplog):
        c = write_config(tmp_path / "bad.yaml", data)
        assert cli.main(["gen", "--config", c, "--out", str(tmp_path)]) == 2
        assert caplog.records

    def test_field_named_in_message(self, tmp_path, caplog):
        c = write_config(tmp_path / "bad.yaml", {"adapt": {"lerning_rate": 1}})
        cli.main(["gen", "--config", c, "--out", str(tmp_path)])
        assert "adapt.lerning_rate" in caplog.text

    def test_invalid_yaml(self, tmp_path):
        p = tmp_path / "bad.yaml"
        p.write_text("adapt: [unclosed\n")
        assert cli.main(["gen", "--config", str(p), "--out", str(tmp_path)]) == 2

    def test_corrupt_dataset(self, cfg, tmp_path):
        run("gen", cfg, tmp_path)
        p = tmp_path / "data" / "source.fads"
        p.write_bytes(p.read_bytes()[:100])
        assert run("train-source", cfg, tmp_path) == 2

    def test_diverged(self, tmp_path):
        c = write_config(tmp_path / "c.yaml", merged(source_train={"lr_backbone": 1e300, "lr_head": 1e300}))
        run("gen", c, tmp_path)
        assert run("train-source", c, tmp_path) == 3

    def test_failed_theory_check(self, tmp_path):
        c = write_config(tmp_path / "c.yaml", merged(verify={"gradcheck_tol": 1e-30}))
        assert run("verify", c, tmp_path, "--seed", "0") == 4


class TestExperiments:
    def test_verify_small(self, cfg, tmp_path):
        assert run("verify", cfg, tmp_path, "--seed", "0") == 0
        rep = tmp_path / "reports"
        assert all(r["within_bound"] == "True" for r in read_csv(rep / "risk_gap.csv"))
        assert all(r["violations"] == "0" for r in read_csv(rep / "boundedness.csv"))
        grads = read_csv(rep / "gradcheck.csv")
        assert "network" in {r["loss"] for r in grads} and all(r["pass"] == "True" for r in grads)
        assert len(json.loads((rep / "risk_gap.json").read_text())) == 3

    def test_compare_small(self, cfg, tmp_path):
        assert run("compare", cfg, tmp_path) == 0
        rows = read_csv(tmp_path / "reports" / "compare.csv")
        assert {"loss", "seed", "config_hash", "pre_acc", "post_acc", "per_class_acc"} <= set(rows[0])
        assert len(rows) == 4
        summary = read_csv(tmp_path / "reports" / "compare_summary.csv")
        assert [r["loss"] for r in summary] == ["fal", "ce"]

    def test_compare_parallel_matches_serial(self, cfg, tmp_path):
        run("compare", cfg, tmp_path / "s")
        run("compare", cfg, tmp_path / "p", "--jobs", "2")
        a = (tmp_path / "s" / "reports" / "compare.csv").read_bytes()
        assert a == (tmp_path / "p" / "reports" / "compare.csv").read_bytes()

    def test_ablate_small(self, cfg, tmp_path):
        assert run("ablate", cfg, tmp_path) == 0
        summary = read_csv(tmp_path / "reports" / "ablation_summary.csv")
        assert [r["variant"] for r in summary] == [
            "source-only",
            "term1",
            "term2",
            "term1+term2",
            "term1+term2+weights",
        ]
        assert len(read_csv(tmp_path / "reports" / "ablation_ordering.csv")) == 4


def test_console_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "fuzzyadapt.cli", "gen", "--out", str(tmp_path), "--seed", "0"],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "data" / "manifest.json").exists()


def test_verify_on_defaults(tmp_path):
    assert cli.main(["verify", "--seed", "0", "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "reports" / "risk_gap.csv")
    assert len(rows) == 100 and all(r["within_bound"] == "True" for r in rows)
