import json

import numpy as np
import pytest

from mgp_atttcn import cli, data
from mgp_atttcn import eval_metrics as em

from . import oracles


def write_config(path, out_dir, data_dir=None, extra_train="", extra=""):
    data_dir = data_dir or out_dir
    path.write_text(
        f"""
[common]
seed = 3
threads = 1
out_dir = {out_dir}

[generate]
n_patients = 40
m_vitals = 2
m_labs = 1
label_effect = 3.0
span_min_hours = 8
span_max_hours = 20
min_observations = 20
max_horizon = 2

[train]
data_dir = {data_dir}
s_count = 2
batch_size = 4
max_epochs = 2
hidden_channels = 4
n_blocks = 1
kernel_size = 2
n_grid = 10
patience = 2
{extra_train}

[evaluate]
data_dir = {data_dir}
checkpoint = {out_dir}/checkpoint.mgpatt
split = test
s_count = 2
bootstrap_n = 20

[explain]
data_dir = {data_dir}
checkpoint = {out_dir}/checkpoint.mgpatt
patient_id = PATIENT
horizon = 0
s_count = 2

[baselines]
data_dir = {data_dir}
n_hours = 10
bootstrap_n = 20
export_features = true
{extra}
"""
    )


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One generate+train run shared by the read-only command tests."""
    root = tmp_path_factory.mktemp("cli")
    config = root / "run.ini"
    write_config(config, root)
    assert cli.main(["generate", "--config", str(config)]) == 0
    assert cli.main(["train", "--config", str(config)]) == 0
    splits, _ = data.load_dataset(root)
    patient = splits.test[0]
    explained = root / "explain.ini"
    write_config(explained, root)
    explained.write_text(explained.read_text().replace("PATIENT", patient.patient_id))
    return root, explained, patient


class TestGenerate:
    def test_outputs_and_recount_oracle(self, tmp_path):
        config = tmp_path / "run.ini"
        write_config(config, tmp_path)
        assert cli.main(["generate", "--config", str(config)]) == 0
        for name in ("train.jsonl", "validation.jsonl", "test.jsonl", "features.json",
                     "truth.json", "stats.csv", "stats.png"):
            assert (tmp_path / name).exists(), name
        stats = (tmp_path / "stats.csv").read_text().strip().splitlines()
        assert len(stats) == 8  # header + 7 horizons
        # recount the emitted records per horizon and compare with the table
        recount = {h: 0 for h in range(7)}
        for split in ("train", "validation", "test"):
            for s in data.read_jsonl(tmp_path / f"{split}.jsonl"):
                recount[s.horizon] += 1
        for line in stats[1:]:
            horizon, n_series = int(line.split(",")[0]), int(line.split(",")[1])
            assert recount[horizon] == n_series

    def test_fixed_seed_identical_files(self, tmp_path):
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        for out in (out_a, out_b):
            config = tmp_path / f"{out.name}.ini"
            write_config(config, out)
            assert cli.main(["generate", "--config", str(config)]) == 0
        for name in ("train.jsonl", "validation.jsonl", "test.jsonl", "features.json"):
            assert (out_a / name).read_bytes() == (out_b / name).read_bytes()


class TestTrain:
    def test_artifacts(self, pipeline):
        root, _, _ = pipeline
        assert (root / "checkpoint.mgpatt").exists()
        history = (root / "history.csv").read_text().strip().splitlines()
        assert history[0] == "epoch,train_loss,val_auroc,val_aupr"
        assert len(history) >= 2
        assert (root / "history.png").stat().st_size > 0

    def test_resume_reproduces_next_epoch(self, pipeline, tmp_path):
        root, _, _ = pipeline
        resumed = tmp_path / "resumed"
        config = tmp_path / "resume.ini"
        write_config(config, resumed, data_dir=root,
                     extra_train=f"resume = {root}/checkpoint.mgpatt")
        config.write_text(config.read_text().replace("max_epochs = 2", "max_epochs = 3"))
        assert cli.main(["train", "--config", str(config)]) == 0
        rows = (resumed / "history.csv").read_text().strip().splitlines()
        assert len(rows) == 2  # header + the one resumed epoch
        assert rows[1].startswith("2,")

    def test_invalid_ablation_is_usage_error(self, pipeline, tmp_path):
        root, _, _ = pipeline
        config = tmp_path / "bad.ini"
        write_config(config, tmp_path, data_dir=root, extra_train="ablation = bogus")
        assert cli.main(["train", "--config", str(config)]) == 1


class TestEvaluate:
    def test_metrics_reproducible_from_scores(self, pipeline):
        root, config, _ = pipeline
        assert cli.main(["evaluate", "--config", str(config)]) == 0
        rows = [json.loads(line) for line in (root / "metrics.jsonl").read_text().splitlines()]
        assert [r["horizon"] for r in rows] == list(range(7))
        assert (root / "metrics.png").stat().st_size > 0

        table = (root / "scores.csv").read_text().strip().splitlines()[1:]
        horizons = np.array([int(line.split(",")[1]) for line in table])
        labels = np.array([int(line.split(",")[2]) for line in table])
        scores = np.array([float(line.split(",")[3]) for line in table])
        for row in rows:
            sel = horizons == row["horizon"]
            assert row["n_cases"] == int((labels[sel] == 1).sum())
            if row["auroc"] is None:
                continue
            point = oracles.auroc_pairs(scores[sel], labels[sel])
            # bootstrap mean wanders around the point estimate, not far at these sizes
            assert abs(row["auroc"]["mean"] - point) <= max(4 * row["auroc"]["std"], 0.15)

    def test_unknown_split_usage_error(self, pipeline, tmp_path):
        root, _, _ = pipeline
        bad = tmp_path / "bad.ini"
        write_config(bad, root)
        bad.write_text(bad.read_text().replace("split = test", "split = holdout"))
        assert cli.main(["evaluate", "--config", str(bad)]) == 1


class TestExplain:
    def test_trace_faithful_and_valid(self, pipeline):
        root, config, patient = pipeline
        assert cli.main(["explain", "--config", str(config)]) == 0
        summary = json.loads((root / "explain_summary.json").read_text())
        assert summary["patient_id"] == patient.patient_id
        rows = [json.loads(line) for line in (root / "trace.jsonl").read_text().splitlines()]
        assert len(rows) == 10  # n_grid
        alpha = np.array([r["alpha"] for r in rows])
        masked = np.array([r["masked"] for r in rows])
        assert np.allclose(alpha[~masked].sum(axis=0), 1.0, atol=1e-6)
        contributions = np.array([r["contributions"] for r in rows])
        score = contributions.sum(axis=(0, 1))
        probs = np.exp(score - score.max())
        probs /= probs.sum()
        assert np.max(np.abs(probs - np.array(summary["probabilities"]))) < 1e-10
        for idx in (0, 1):
            matrix = np.loadtxt(root / f"covariance_cluster{idx}.csv", delimiter=",", skiprows=1)
            assert np.max(np.abs(matrix - matrix.T)) < 1e-12
        assert (root / "journey.png").stat().st_size > 0
        assert (root / "covariance.png").stat().st_size > 0

    def test_unknown_patient_is_data_error(self, pipeline, tmp_path):
        root, _, _ = pipeline
        config = tmp_path / "missing.ini"
        write_config(config, root)
        config.write_text(config.read_text().replace("PATIENT", "nobody"))
        assert cli.main(["explain", "--config", str(config)]) == 2


class TestBaselines:
    def test_runs_and_exports(self, pipeline):
        root, config, _ = pipeline
        assert cli.main(["baselines", "--config", str(config)]) == 0
        rows = [json.loads(line) for line in (root / "baseline_metrics.jsonl").read_text().splitlines()]
        models = {r["model"] for r in rows}
        assert models == {"logreg-hourly", "insight"}
        counts = (root / "insight_counts.csv").read_text().strip().splitlines()
        assert len(counts) == 8
        features = (root / "insight_features_test.csv").read_text().splitlines()
        header = features[0].split(",")
        from mgp_atttcn import baselines as bl

        assert len(header) == 3 + bl.n_insight_features(10, 3)
        assert (root / "baseline_metrics.png").stat().st_size > 0


class TestUsageErrors:
    def test_missing_config_file(self):
        assert cli.main(["train", "--config", "/nonexistent.ini"]) == 1

    def test_unknown_key_rejected(self, tmp_path):
        config = tmp_path / "bad.ini"
        config.write_text("[common]\nseed = 1\nbananas = 2\n")
        assert cli.main(["generate", "--config", str(config)]) == 1

    def test_unknown_section_rejected(self, tmp_path):
        config = tmp_path / "bad.ini"
        config.write_text("[common]\nseed = 1\n\n[frobnicate]\nx = 1\n")
        assert cli.main(["generate", "--config", str(config)]) == 1

    def test_missing_required_key(self, tmp_path):
        config = tmp_path / "bad.ini"
        config.write_text("[common]\nseed = 1\n\n[train]\ns_count = 2\n")
        assert cli.main(["train", "--config", str(config)]) == 1

    def test_missing_data_dir(self, tmp_path):
        config = tmp_path / "bad.ini"
        config.write_text(f"[common]\nseed = 1\n\n[train]\ndata_dir = {tmp_path}/nope\n")
        assert cli.main(["train", "--config", str(config)]) == 1

    def test_cli_overrides_apply(self, tmp_path):
        config = tmp_path / "run.ini"
        write_config(config, tmp_path / "ignored")
        out = tmp_path / "actual"
        assert cli.main(["generate", "--config", str(config), "--out", str(out), "--seed", "9"]) == 0
        assert (out / "train.jsonl").exists()
        assert not (tmp_path / "ignored").exists()
