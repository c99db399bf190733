import json

import yaml
from click.testing import CliRunner

from msr.cli import main

from conftest import write_dataset


def write_config(tmp_path, **overrides):
    inter, items = write_dataset(tmp_path, n_users=10)
    cfg = {
        "interactions_file": str(inter),
        "items_file": str(items),
        "work_dir": str(tmp_path / "work"),
        "cache_dir": str(tmp_path / "cache"),
        "min_item_interactions": 1,
        "mock": True,
        "mock_behavior": "oracle_yes",
        "summarize_mode": "text_only",
        "seed": 5,
    }
    cfg.update(overrides)
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


def invoke(*args):
    return CliRunner().invoke(main, list(args), catch_exceptions=False)


class TestExitCodes:
    def test_missing_config_file_is_exit_2(self):
        result = invoke("ingest", "--config", "/nonexistent/config.yaml")
        assert result.exit_code == 2

    def test_stage_out_of_order_is_exit_3(self, tmp_path):
        config = write_config(tmp_path)
        result = invoke("score", "--config", str(config))
        assert result.exit_code == 3
        assert "run" in result.output

    def test_success_is_exit_0(self, tmp_path):
        config = write_config(tmp_path)
        assert invoke("ingest", "--config", str(config)).exit_code == 0


class TestStages:
    def test_full_run_writes_report(self, tmp_path):
        config = write_config(tmp_path)
        result = invoke("run", "--config", str(config))
        assert result.exit_code == 0
        report = json.loads((tmp_path / "work" / "report.json").read_text())
        assert report["mean"]["auc"] == 1.0
        assert (tmp_path / "work" / "report.txt").exists()

    def test_stagewise_invocation(self, tmp_path):
        config = write_config(tmp_path)
        for cmd in (
            ["ingest"],
            ["summarize-items", "--mode", "text_only"],
            ["infer-preferences", "--mode", "recurrent", "--block-size", "3"],
            ["build-sft"],
            ["score"],
            ["evaluate", "--k", "5"],
        ):
            result = invoke(*cmd, "--config", str(config))
            assert result.exit_code == 0, (cmd, result.output)

    def test_evaluate_prints_table(self, tmp_path):
        config = write_config(tmp_path)
        invoke("run", "--config", str(config))
        result = invoke("evaluate", "--config", str(config))
        assert "AUC" in result.output
        assert "HR@5" in result.output

    def test_eval_loss_command(self, tmp_path):
        config = write_config(tmp_path, mock_behavior="uniform_logprob")
        invoke("run", "--stages", "ingest,summarize-items,infer-preferences,build-sft",
               "--config", str(config))
        result = invoke("eval-loss", "--config", str(config))
        assert result.exit_code == 0
        payload = json.loads(result.output)
        assert payload["n_examples"] == 20

    def test_flag_overrides_config(self, tmp_path):
        config = write_config(tmp_path)
        result = invoke(
            "infer-preferences", "--config", str(config), "--block-size", "2"
        )
        assert result.exit_code == 3  # still needs upstream stages first

    def test_second_run_skips_all_stages(self, tmp_path):
        config = write_config(tmp_path)
        invoke("run", "--config", str(config))
        result = invoke("run", "--config", str(config))
        manifest = json.loads(result.output)
        assert all(
            e["skipped"] and e["backend_calls"] == 0 for e in manifest["stages"].values()
        )


class TestSweepCommand:
    def test_block_size_sweep(self, tmp_path):
        config = write_config(tmp_path)
        result = invoke("sweep", "block_size", "--values", "1,3", "--config", str(config))
        assert result.exit_code == 0
        rows = json.loads(result.output)
        assert [r["value"] for r in rows] == [1, 3]
        assert all(r["status"] == "ok" for r in rows)

    def test_bad_values_exit_2(self, tmp_path):
        config = write_config(tmp_path)
        result = invoke("sweep", "block_size", "--values", "a,b", "--config", str(config))
        assert result.exit_code == 2
