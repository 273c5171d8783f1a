import csv
import json

import numpy as np
import pytest

from icepp import cli
from icepp import hawkes as H
from icepp import store as ST
from icepp.model import ModelConfig, ModelWeights

from harness import forced_head_weights, write_poisson_prior_config
from test_model import TINY


@pytest.fixture
def poisson_dataset(tmp_path):
    cfg = write_poisson_prior_config(tmp_path / "prior.json")
    out = str(tmp_path / "data.jsonl")
    rc = cli.main(["generate", "--config", cfg, "--n-instances", "1", "--out", out])
    assert rc == 0
    return out


@pytest.fixture
def tiny_checkpoint(tmp_path):
    path = str(tmp_path / "tiny_ckpt")
    ModelWeights.init(TINY, seed=0).save(path)
    return path


class TestGenerate:
    def test_poisson_only_config(self, tmp_path, poisson_dataset):
        seqs, ids, instances, manifest = ST.read_dataset(poisson_dataset)
        assert len(instances) == 1
        assert len(seqs) == 5
        assert set(ids) == {0}
        assert instances[0].base[0].params["level"] == 2.0

    def test_fixed_seed_reproduces_bytes(self, tmp_path):
        cfg = write_poisson_prior_config(tmp_path / "p.json")
        a, b = str(tmp_path / "a.jsonl"), str(tmp_path / "b.jsonl")
        assert cli.main(["generate", "--config", cfg, "--n-instances", "2", "--out", a, "--seed", "9"]) == 0
        assert cli.main(["generate", "--config", cfg, "--n-instances", "2", "--out", b, "--seed", "9"]) == 0
        assert open(a, "rb").read() == open(b, "rb").read()

    def test_mixed_mark_counts_lift_to_common_space(self, tmp_path):
        cfg = {
            "prior": {
                "num_marks_range": [1, 3], "window_end": 10.0, "sparsity": 1.0,
                "base_kinds": ["constant"], "seed": 21,
            },
            "sequences_per_instance": 2,
        }
        path = tmp_path / "mixed.json"
        path.write_text(json.dumps(cfg))
        out = str(tmp_path / "mixed.jsonl")
        assert cli.main(["generate", "--config", str(path), "--n-instances", "6",
                         "--out", out]) == 0
        seqs, ids, instances, manifest = ST.read_dataset(out)
        assert len({s.num_marks for s in seqs}) == 1
        assert all(inst.num_marks == manifest.num_marks for inst in instances)
        # padded marks are inert: zero base rate, zero signs
        for inst in instances:
            for b in inst.base[manifest.num_marks:]:
                assert b.params["level"] == 0.0

    def test_explosive_ranges_exit_2(self, tmp_path):
        cfg = {
            "prior": {
                "num_marks_range": [1, 1],
                "sparsity": 0.0,
                "inhibition_prob": 0.0,
                "ranges": {"kernel_weight": [50.0, 50.0]},
                "seed": 1,
            }
        }
        path = tmp_path / "boom.json"
        path.write_text(json.dumps(cfg))
        rc = cli.main(["generate", "--config", str(path), "--n-instances", "1",
                       "--out", str(tmp_path / "d.jsonl")])
        assert rc == 2

    def test_missing_config_exit_2(self, tmp_path):
        rc = cli.main(["generate", "--config", str(tmp_path / "none.json"),
                       "--n-instances", "1", "--out", str(tmp_path / "d.jsonl")])
        assert rc == 2


class TestTrainCLI:
    def _config(self, tmp_path, steps=0):
        cfg = {
            "model": {
                "d_model": 16, "n_heads": 2, "n_layers_seq_encoder": 1,
                "n_layers_cross_encoder": 1, "n_layers_decoder": 1,
                "d_ff": 16, "max_marks": 2, "max_events": 32,
            },
            "prior": {
                "num_marks_range": [1, 1], "window_end": 10.0, "sparsity": 1.0,
                "base_kinds": ["constant"], "seed": 3,
            },
            "train": {
                "steps": steps, "batch_instances": 2, "sequences_per_instance": 4,
                "rotations_per_instance": 2, "warmup_steps": 1,
                "checkpoint_every": 50, "seed": 3,
            },
        }
        path = tmp_path / "train.json"
        path.write_text(json.dumps(cfg))
        return str(path)

    def test_zero_steps_writes_checkpoint(self, tmp_path):
        out = str(tmp_path / "run")
        rc = cli.main(["train", "--config", self._config(tmp_path, 0), "--out", out])
        assert rc == 0
        assert (tmp_path / "run" / "state_final.json").exists()

    def test_malformed_config_exit_2(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"train": {"no_such_field": 1}}))
        rc = cli.main(["train", "--config", str(path), "--out", str(tmp_path / "o")])
        assert rc == 2

    def test_resume_equals_uninterrupted(self, tmp_path):
        cfg4 = self._config(tmp_path, 4)
        full_out = str(tmp_path / "full")
        assert cli.main(["train", "--config", cfg4, "--out", full_out]) == 0
        cfg2 = json.loads(open(cfg4).read())
        cfg2["train"]["steps"] = 2
        half_path = tmp_path / "half.json"
        half_path.write_text(json.dumps(cfg2))
        part_out = str(tmp_path / "part")
        assert cli.main(["train", "--config", str(half_path), "--out", part_out]) == 0
        assert cli.main(["train", "--config", cfg4, "--out", part_out, "--resume"]) == 0
        a = open(tmp_path / "full" / "state_final.bin", "rb").read()
        b = open(tmp_path / "part" / "state_final.bin", "rb").read()
        assert a == b

    def test_metrics_plot_written(self, tmp_path):
        out = tmp_path / "plotted"
        rc = cli.main(["train", "--config", self._config(tmp_path, 2), "--out", str(out)])
        assert rc == 0
        png = (out / "metrics.png").read_bytes()
        assert png[:8] == b"\x89PNG\r\n\x1a\n"


class TestFinetuneCLI:
    def test_finetune_from_weights_checkpoint(self, tmp_path, tiny_checkpoint):
        cfg = write_poisson_prior_config(tmp_path / "p.json", sequences=12, T=10.0)
        data = str(tmp_path / "target.jsonl")
        assert cli.main(["generate", "--config", cfg, "--n-instances", "1",
                         "--out", data, "--seed", "6"]) == 0
        ft = tmp_path / "ft.json"
        ft.write_text(json.dumps({"train": {
            "steps": 2, "batch_instances": 1, "sequences_per_instance": 4,
            "rotations_per_instance": 2, "warmup_steps": 1,
            "checkpoint_every": 10, "eval_every": 1, "seed": 6,
        }}))
        out = str(tmp_path / "ftrun")
        rc = cli.main(["finetune", "--checkpoint", tiny_checkpoint, "--data", data,
                       "--config", str(ft), "--out", out])
        assert rc == 0
        assert (tmp_path / "ftrun" / "state_final.json").exists()
        rows = (tmp_path / "ftrun" / "metrics.csv").read_text().strip().splitlines()
        assert len(rows) >= 3  # header + zero-shot row + steps


class TestInfer:
    def test_missing_checkpoint_exit_2(self, tmp_path, poisson_dataset):
        rc = cli.main(["infer", "--checkpoint", str(tmp_path / "ghost"),
                       "--context", poisson_dataset, "--grid", "0.1:10:5",
                       "--out", str(tmp_path / "c.csv")])
        assert rc == 2

    def test_empty_history_curve(self, tmp_path, poisson_dataset, tiny_checkpoint):
        out = str(tmp_path / "curve.csv")
        rc = cli.main(["infer", "--checkpoint", tiny_checkpoint, "--context",
                       poisson_dataset, "--history", "empty",
                       "--grid", "0.01:20:50", "--out", out])
        assert rc == 0
        rows = list(csv.DictReader(open(out)))
        assert len(rows) == 50
        assert {r["mark"] for r in rows} == {"0"}
        assert (tmp_path / "curve.png").read_bytes()[:4] == b"\x89PNG"

    def test_single_point_grid(self, tmp_path, poisson_dataset, tiny_checkpoint):
        out = str(tmp_path / "one.csv")
        rc = cli.main(["infer", "--checkpoint", tiny_checkpoint, "--context",
                       poisson_dataset, "--grid", "5:5:1", "--out", out])
        assert rc == 0
        assert len(list(csv.DictReader(open(out)))) == 1

    def test_lambda_true_matches_direct_evaluation(self, tmp_path, poisson_dataset, tiny_checkpoint):
        out = str(tmp_path / "truth.csv")
        rc = cli.main(["infer", "--checkpoint", tiny_checkpoint, "--context",
                       poisson_dataset, "--history", "seq:0@prefix:2",
                       "--grid", "15:19:7", "--out", out])
        assert rc == 0
        seqs, ids, instances, _ = ST.read_dataset(poisson_dataset)
        hist = seqs[0].prefix(2)
        for row in csv.DictReader(open(out)):
            want = H.ground_truth_intensity(
                instances[0], hist, float(row["t"]), int(row["mark"])
            )
            # bit-identical: the CSV stores exact round-trip reprs
            assert float(row["lambda_true"]).hex() == want.hex()

    def test_grid_inside_history_rejected(self, tmp_path, poisson_dataset, tiny_checkpoint):
        rc = cli.main(["infer", "--checkpoint", tiny_checkpoint, "--context",
                       poisson_dataset, "--history", "seq:0@prefix:3",
                       "--grid", "0.001:10:5", "--out", str(tmp_path / "x.csv")])
        assert rc == 2


class TestEval:
    def test_report_aggregate_is_mean_of_rows(self, tmp_path, tiny_checkpoint):
        cfg = write_poisson_prior_config(tmp_path / "p.json", sequences=4)
        data = str(tmp_path / "ev.jsonl")
        assert cli.main(["generate", "--config", cfg, "--n-instances", "3",
                         "--out", data, "--seed", "4"]) == 0
        out = str(tmp_path / "report.json")
        rc = cli.main(["eval", "--checkpoint", tiny_checkpoint, "--data", data,
                       "--out", out, "--context-size", "3",
                       "--forecast-samples", "50", "--grid-points", "20",
                       "--seed", "1"])
        assert rc == 0
        rep = json.load(open(out))
        rows = rep["per_instance"]
        assert len(rows) == 3
        gaps = [r["nll_gap_per_event"] for r in rows]
        assert rep["aggregate"]["nll_gap_per_event"] == pytest.approx(np.mean(gaps))
        for r in rows:
            for key in ("model_nll_per_event", "truth_nll_per_event", "intensity_rmse"):
                assert np.isfinite(r[key])
        assert (tmp_path / "report.csv").exists()
        assert (tmp_path / "report.png").read_bytes()[:4] == b"\x89PNG"

    def test_eval_without_sidecar_warns_and_limits(self, tmp_path, tiny_checkpoint, caplog):
        seqs = [
            H.EventSequence(np.sort(np.random.default_rng(i).uniform(0.1, 9, 4)),
                            [0, 1, 0, 1], 10.0, 2)
            for i in range(4)
        ]
        data = str(tmp_path / "plain.jsonl")
        ST.write_dataset(data, seqs, instance_ids=[0, 0, 0, 0])
        out = str(tmp_path / "rep.json")
        rc = cli.main(["eval", "--checkpoint", tiny_checkpoint, "--data", data,
                       "--out", out, "--context-size", "2", "--seed", "1",
                       "--forecast-samples", "20"])
        assert rc == 0
        rep = json.load(open(out))
        assert rep["aggregate"]["truth_nll_per_event"] is None
        assert rep["aggregate"]["model_nll_per_event"] is not None


class TestForecast:
    def test_zero_samples_valid_json(self, tmp_path, poisson_dataset, tiny_checkpoint):
        out = str(tmp_path / "f.json")
        rc = cli.main(["forecast", "--checkpoint", tiny_checkpoint, "--context",
                       poisson_dataset, "--horizon", "5", "--n-samples", "0",
                       "--out", out, "--seed", "1"])
        assert rc == 0
        payload = json.load(open(out))
        assert payload["trajectories"] == []
        assert payload["next_event"]["censored"] == 0

    def test_null_intensity_checkpoint_gives_empty_trajectories(self, tmp_path, poisson_dataset):
        ckpt = str(tmp_path / "null_ckpt")
        forced_head_weights(TINY, 0.0, 0.0, 1.0).save(ckpt)
        out = str(tmp_path / "fn.json")
        rc = cli.main(["forecast", "--checkpoint", ckpt, "--context",
                       poisson_dataset, "--horizon", "5", "--n-samples", "20",
                       "--out", out, "--seed", "1"])
        assert rc == 0
        payload = json.load(open(out))
        assert all(t == [] for t in payload["trajectories"])
        assert payload["next_event"]["censored"] == 20
        assert (tmp_path / "fn.png").exists()

    def test_nonpositive_horizon_exit_2(self, tmp_path, poisson_dataset, tiny_checkpoint):
        rc = cli.main(["forecast", "--checkpoint", tiny_checkpoint, "--context",
                       poisson_dataset, "--horizon", "-1", "--n-samples", "5",
                       "--out", str(tmp_path / "x.json"), "--seed", "1"])
        assert rc == 2


class TestImportCSV:
    def test_round_trip(self, tmp_path):
        src = tmp_path / "log.csv"
        src.write_text(
            "sequence_id,timestamp,mark\n"
            "s1,0.0,click\ns1,1.5,buy\ns2,0.7,click\ns2,0.9,click\n"
        )
        out = str(tmp_path / "imported.jsonl")
        rc = cli.main(["import-csv", "--input", str(src), "--out", out])
        assert rc == 0
        seqs, ids, instances, manifest = ST.read_dataset(out)
        assert len(seqs) == 2
        assert manifest.num_marks == 2
        assert manifest.time_unit == "imported"


def test_usage_error_exit_code():
    assert cli.main(["no-such-command"]) == 2
    assert cli.main(["train"]) == 2
