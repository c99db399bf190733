import json

import pytest
import torch
import yaml
from click.testing import CliRunner

from train_adapter.cli import main
from train_adapter.errors import AdapterError
from train_adapter.train import TrainSpec, build_batches, token_length_histogram, train
from train_adapter.validate import load_examples

from conftest import export_dataset


def write_config(tmp_path, dataset, **overrides):
    cfg = {"dataset": str(dataset), "output_dir": str(tmp_path / "out"), **overrides}
    path = tmp_path / "train.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


class TestSpec:
    def test_defaults(self, tmp_path, dataset_path):
        spec = TrainSpec.from_file(write_config(tmp_path, dataset_path))
        assert spec.adapter_rank == 8
        assert spec.learning_rate == 2e-5
        assert spec.batch_size == 1
        assert spec.gradient_accumulation_steps == 8
        assert spec.epochs == 10

    def test_requires_dataset(self, tmp_path):
        p = tmp_path / "bad.yaml"
        p.write_text(yaml.safe_dump({"epochs": 1}))
        with pytest.raises(AdapterError, match="dataset"):
            TrainSpec.from_file(p)

    def test_rejects_unknown_key(self, tmp_path, dataset_path):
        with pytest.raises(AdapterError, match="warmup"):
            TrainSpec.from_file(write_config(tmp_path, dataset_path, warmup=5))


class TestBatches:
    def test_loss_mask_covers_only_label(self, dataset_path):
        spec = TrainSpec(dataset=str(dataset_path), batch_size=1)
        batches = build_batches(load_examples(dataset_path), spec)
        for b in batches:
            mask = b["loss_mask"][0]
            # prompt positions are zero, a non-empty suffix is one
            assert mask.sum() >= 1
            assert mask[0] == 0

    def test_batching_pads_to_common_width(self, dataset_path):
        spec = TrainSpec(dataset=str(dataset_path), batch_size=4)
        for b in build_batches(load_examples(dataset_path), spec):
            assert b["input_ids"].shape == b["loss_mask"].shape

    def test_histogram_counts_every_example(self, dataset_path):
        spec = TrainSpec(dataset=str(dataset_path))
        hist = token_length_histogram(load_examples(dataset_path), spec)
        assert sum(hist.values()) == len(load_examples(dataset_path))


class TestDryRun:
    def test_completes_without_gpu(self, tmp_path, dataset_path, capsys):
        assert not torch.cuda.is_available()
        spec = TrainSpec(dataset=str(dataset_path), output_dir=str(tmp_path / "out"))
        assert train(spec, dry_run=True) is None
        out = capsys.readouterr().out
        assert "dry run ok" in out
        assert "token-length histogram" in out

    def test_writes_no_weights(self, tmp_path, dataset_path):
        out_dir = tmp_path / "out"
        spec = TrainSpec(dataset=str(dataset_path), output_dir=str(out_dir))
        train(spec, dry_run=True)
        assert not out_dir.exists()

    def test_epochs_zero_emits_noop_adapter(self, tmp_path, dataset_path):
        out_dir = tmp_path / "out"
        spec = TrainSpec(dataset=str(dataset_path), output_dir=str(out_dir), epochs=0)
        result = train(spec)
        assert result == out_dir
        config = json.loads((out_dir / "adapter_config.json").read_text())
        assert config["trained_epochs"] == 0
        assert torch.load(out_dir / "adapter_model.bin", weights_only=True) == {}

    def test_real_training_gated_on_environment(self, tmp_path, dataset_path):
        # no GPU (and possibly no peft) in this environment: the check must
        # fire before any training step, with exit-code-3 semantics
        spec = TrainSpec(dataset=str(dataset_path), output_dir=str(tmp_path / "out"))
        with pytest.raises(AdapterError) as exc:
            train(spec)
        assert exc.value.exit_code == 3
        assert not (tmp_path / "out").exists()


class TestCli:
    def test_validate_command(self, dataset_path):
        result = CliRunner().invoke(main, ["validate", str(dataset_path)])
        assert result.exit_code == 0
        assert "examples: 16" in result.output

    def test_validate_bad_file_exit_2(self, tmp_path):
        p = tmp_path / "bad.jsonl"
        p.write_text("{}\n")
        result = CliRunner().invoke(main, ["validate", str(p)])
        assert result.exit_code == 2

    def test_train_dry_run(self, tmp_path, dataset_path):
        cfg = write_config(tmp_path, dataset_path)
        result = CliRunner().invoke(main, ["train", "--config", str(cfg), "--dry-run"])
        assert result.exit_code == 0
        assert "dry run ok" in result.output

    def test_train_without_gpu_exit_3(self, tmp_path, dataset_path):
        cfg = write_config(tmp_path, dataset_path)
        result = CliRunner().invoke(main, ["train", "--config", str(cfg)])
        assert result.exit_code == 3

    def test_train_missing_config_exit_1(self, tmp_path):
        result = CliRunner().invoke(main, ["train", "--config", str(tmp_path / "x.yaml")])
        assert result.exit_code == 1
