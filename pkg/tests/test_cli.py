from pathlib import Path

import numpy as np
import pytest

from causalcdr import cli, data, evaluation

BASE_CONFIG = """
dataset.kind=synthetic
synth.n_users=80
synth.n_source_items=120
synth.n_target_items=110
synth.k=4
synth.target_density=0.03
synth.source_density=0.05
synth.attribute_shift=1.0
synth.seed=11
split.kind=iid
split.seed=11
train.k=4
train.epochs=2
train.batch_size=64
eval.ks=5,10
seeds=1,2
"""


def write_config(tmp_path, text=BASE_CONFIG, **extra):
    lines = [text.strip()]
    for key, value in extra.items():
        lines.append(f"{key}={value}")
    path = tmp_path / "exp.cfg"
    path.write_text("\n".join(lines) + "\n")
    return path


class TestConfigParsing:
    def test_round_trip_values(self, tmp_path):
        path = write_config(tmp_path, sparsity="0.5")
        config = cli.load_config(path)
        assert config.synth.n_users == 80
        assert config.train.epochs == 2
        assert config.seeds == (1, 2)
        assert config.sparsity_fraction == 0.5
        assert config.eval_ks == (5, 10)

    def test_unknown_key_rejected(self, tmp_path):
        path = write_config(tmp_path)
        path.write_text(path.read_text() + "train.bogus=1\n")
        with pytest.raises(cli.ConfigError, match="bogus"):
            cli.load_config(path)

    def test_bad_line_reports_number(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("train.epochs=2\nnot a pair\n")
        with pytest.raises(cli.ConfigError, match="line 2"):
            cli.load_config(path)

    def test_split_mix_pairs(self, tmp_path):
        path = write_config(tmp_path)
        path.write_text(path.read_text().replace("split.kind=iid",
                                                 "split.kind=ood_attribute\n"
                                                 "split.train_ratio=0.8,0.2\n"
                                                 "split.test_ratio=0.2,0.8"))
        config = cli.load_config(path)
        assert config.split.kind == "ood_attribute"
        assert config.split.train_mix == (0.8, 0.2)
        assert config.split.test_mix == (0.2, 0.8)

    def test_empty_seeds_rejected(self, tmp_path):
        path = write_config(tmp_path)
        with pytest.raises(ValueError):
            cli.parse_config_text(path.read_text() + "sparsity=1.5\n")

    def test_hash_stable_and_content_sensitive(self, tmp_path):
        config_a = cli.load_config(write_config(tmp_path))
        config_b = cli.load_config(write_config(tmp_path))
        assert cli.config_hash(config_a) == cli.config_hash(config_b)
        config_b.train.epochs = 3
        assert cli.config_hash(config_a) != cli.config_hash(config_b)


class TestPipeline:
    def test_run_experiment_writes_artifacts(self, tmp_path):
        config = cli.load_config(write_config(tmp_path))
        config.out_dir = str(tmp_path / "run")
        report = cli.run_experiment(config)
        out = Path(config.out_dir)
        assert (out / "status.txt").read_text() == "complete\n"
        assert (out / "metrics.csv").exists()
        assert (out / "metrics.md").exists()
        for seed in (1, 2):
            assert (out / f"seed_{seed}" / "checkpoint.nmc").exists()
            history = (out / f"seed_{seed}" / "history.csv").read_text()
            assert history.splitlines()[1].startswith("epoch,L_t,L_s,")
        assert set(report.mean) == {"HR@5", "HR@10", "NDCG@5", "NDCG@10"}

    def test_rerun_is_byte_identical(self, tmp_path):
        config = cli.load_config(write_config(tmp_path))
        config.out_dir = str(tmp_path / "run_a")
        cli.run_experiment(config)
        config.out_dir = str(tmp_path / "run_b")
        cli.run_experiment(config)
        for rel in ("metrics.csv", "seed_1/checkpoint.nmc", "seed_1/history.csv",
                    "seed_2/metrics_seed.csv"):
            a = (tmp_path / "run_a" / rel).read_bytes()
            b = (tmp_path / "run_b" / rel).read_bytes()
            assert a == b, rel

    def test_report_regeneration_matches(self, tmp_path):
        config = cli.load_config(write_config(tmp_path))
        config.out_dir = str(tmp_path / "run")
        cli.run_experiment(config)
        out = Path(config.out_dir)
        first = (out / "metrics.csv").read_bytes()
        runs = cli.load_seed_metrics(out, config.seeds)
        cli.write_report(config, runs, out)
        assert (out / "metrics.csv").read_bytes() == first

    def test_sparsity_subsamples_target_train_only(self, tmp_path):
        config = cli.load_config(write_config(tmp_path))
        dataset, _, full_split = cli.prepare(config, tmp_path / "full")
        config.sparsity_fraction = 0.5
        _, _, sparse_split = cli.prepare(config, tmp_path / "sparse")
        n_full = len(full_split.train[data.TARGET])
        n_sparse = len(sparse_split.train[data.TARGET])
        assert n_sparse == max(1, int(round(0.5 * n_full)))
        assert sparse_split.train[data.SOURCE] == full_split.train[data.SOURCE]
        assert sparse_split.test[data.TARGET] == full_split.test[data.TARGET]

    def test_failure_marks_stage(self, tmp_path):
        config = cli.load_config(write_config(tmp_path))
        config.out_dir = str(tmp_path / "runf")
        config.synth.target_density = 0.9  # infeasible: rejected by the generator
        with pytest.raises(cli.StageFailure) as err:
            cli.run_experiment(config)
        assert err.value.stage == "prepare"
        status = (tmp_path / "runf" / "status.txt").read_text()
        assert status.startswith("incomplete stage=prepare")


class TestCommands:
    def test_train_and_report_cli(self, tmp_path, capsys):
        path = write_config(tmp_path, out_dir=str(tmp_path / "run"))
        assert cli.main(["train", "--config", str(path)]) == 0
        out = capsys.readouterr().out
        assert "HR@10" in out
        assert cli.main(["report", "--config", str(path)]) == 0

    def test_gradcheck_pass_and_fail(self, capsys):
        assert cli.main(["gradcheck"]) == 0
        out = capsys.readouterr().out
        assert "PASS" in out
        # the reversed-path blocks are called out separately
        assert "shared_encoder" in out and "compensated" in out
        assert cli.main(["gradcheck", "--corrupt-block", "fusion_t"]) == 3
        assert "fusion_t" in capsys.readouterr().out

    def test_config_error_exit_code(self, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text("nonsense.key=1\n")
        assert cli.main(["train", "--config", str(bad)]) == 1

    def test_synth_command_writes_dataset(self, tmp_path):
        path = write_config(tmp_path, out_dir=str(tmp_path / "synthout"))
        assert cli.main(["synth", "--config", str(path)]) == 0
        out = tmp_path / "synthout"
        assert (out / "source.csv").exists()
        assert (out / "target.csv").exists()
        edges = (out / "true_edges.csv").read_text().splitlines()
        assert edges[0] == "i,j,weight"
        # round trip through ingestion
        ds = data.ingest_csv(out / "source.csv", out / "target.csv")
        assert ds.n_users > 0

    def test_ablate_command(self, tmp_path):
        path = write_config(tmp_path, out_dir=str(tmp_path / "runab"))
        assert cli.main(["ablate", "--config", str(path), "--mode",
                         "no_causal"]) == 0
        assert (tmp_path / "runab" / "ablate_no_causal" / "metrics.csv").exists()
