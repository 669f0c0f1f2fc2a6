import json

from dhrd.cli import main
from dhrd.sequences import load_dataset


def lines_of(path):
    return [l for l in path.read_text().splitlines() if l.strip()]


class TestGen:
    def test_writes_three_splits(self, tmp_path, capsys):
        out = tmp_path / "data"
        rc = main(["gen", "--task", "chain", "--n", "20", "--n-val", "10", "--n-test", "10", "--out", str(out)])
        assert rc == 0
        assert len(lines_of(out / "train.jsonl")) == 20
        assert len(lines_of(out / "val.jsonl")) == 10
        assert len(lines_of(out / "test.jsonl")) == 10
        assert (out / "config.resolved.txt").exists()

    def test_datasets_loadable(self, tmp_path):
        out = tmp_path / "data"
        main(["gen", "--task", "parity", "--n", "10", "--n-val", "4", "--n-test", "4", "--out", str(out)])
        examples = load_dataset(out / "train.jsonl")
        assert len(examples) == 10
        assert sum(e.label_index for e in examples) == 5


class TestPromptPipeline:
    def test_export_then_import(self, tmp_path, capsys):
        data = tmp_path / "d"
        main(["gen", "--task", "chain", "--n", "10", "--n-val", "2", "--n-test", "2", "--out", str(data)])
        prompts = tmp_path / "prompts.jsonl"
        rc = main(["export-prompts", "--data", str(data / "train.jsonl"), "--out", str(prompts)])
        assert rc == 0
        first = json.loads(lines_of(prompts)[0])
        assert set(first) == {"id", "prompt"}

        # play the teacher with the construction-time reasoning
        rationales = tmp_path / "rat.jsonl"
        with open(rationales, "w") as f:
            for line in lines_of(data / "train.jsonl"):
                row = json.loads(line)
                f.write(json.dumps({"id": row["id"], "reasoning": row["reasoning"], "answer": row["label"]}) + "\n")
        joined = tmp_path / "joined.jsonl"
        rc = main(["import-rationales", "--data", str(data / "train.jsonl"), "--rationales", str(rationales), "--out", str(joined)])
        assert rc == 0
        assert len(lines_of(joined)) == 10
        out = capsys.readouterr().out
        assert "joined=10" in out


class TestTrainEvalBench:
    def prepare(self, tmp_path):
        data = tmp_path / "d"
        main(["gen", "--task", "chain", "--n", "12", "--n-val", "4", "--n-test", "4", "--out", str(data)])
        return data

    def test_train_eval_bench_smoke(self, tmp_path, capsys):
        data = self.prepare(tmp_path)
        capsys.readouterr()  # drop the gen command's output
        run = tmp_path / "run"
        rc = main([
            "train", "--train", str(data / "train.jsonl"), "--val", str(data / "val.jsonl"),
            "--out", str(run), "--epochs", "1", "--d-model", "32", "--n-layers", "1", "--seed", "3",
        ])
        assert rc == 0
        summary = json.loads(capsys.readouterr().out)
        ckpt = summary["checkpoint"]

        rc = main(["eval", "--checkpoint", ckpt, "--data", str(data / "test.jsonl"), "--out", str(tmp_path / "scores.csv")])
        assert rc == 0
        assert "macro_avg" in capsys.readouterr().out
        assert (tmp_path / "scores.csv").exists()

        rc = main([
            "bench", "--checkpoint", ckpt, "--data", str(data / "test.jsonl"),
            "--limit", "2", "--max-new-tokens", "4", "--warmup", "1", "--reps", "1",
            "--out", str(tmp_path / "bench.jsonl"),
        ])
        assert rc == 0
        assert "speedup" in capsys.readouterr().out
        assert (tmp_path / "bench.jsonl").exists()

    def test_ablate_setting_flag(self, tmp_path, capsys):
        data = self.prepare(tmp_path)
        rc = main([
            "ablate", "--train", str(data / "train.jsonl"), "--out", str(tmp_path / "ab"),
            "--epochs", "1", "--d-model", "32", "--n-layers", "1", "--setting", "OnlyLabel",
        ])
        assert rc == 0
        resolved = (tmp_path / "ab" / "config.resolved.txt").read_text()
        assert "ablation.setting=OnlyLabel" in resolved

    def test_config_file_with_flag_override(self, tmp_path, capsys):
        data = self.prepare(tmp_path)
        cfg = tmp_path / "cfg.txt"
        cfg.write_text(
            f"data.train={data / 'train.jsonl'}\n"
            f"out={tmp_path / 'cfgrun'}\n"
            "model.d_model=32\nmodel.n_layers=1\noptim.epochs=2\n"
        )
        rc = main(["train", "--config", str(cfg), "--epochs", "1"])
        assert rc == 0
        resolved = (tmp_path / "cfgrun" / "config.resolved.txt").read_text()
        assert "optim.epochs=1" in resolved  # flag wins over file


class TestErrors:
    def test_unknown_command_usage_error(self, capsys):
        assert main(["frobnicate"]) == 1

    def test_missing_file_is_runtime_error(self, tmp_path):
        assert main(["eval", "--checkpoint", str(tmp_path / "no.ckpt"), "--data", str(tmp_path / "no.jsonl")]) == 2

    def test_bad_config_key(self, tmp_path):
        cfg = tmp_path / "bad.txt"
        cfg.write_text("bogus.key=1\n")
        assert main(["train", "--config", str(cfg)]) == 2
