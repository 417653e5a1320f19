"""End-to-end CLI coverage: every subcommand, the config override chain, and
the error contract (nonzero exit, single `error:` line)."""

import json
import numpy as np
import pytest

from dualvqa.cli import main
from dualvqa.data import read_jsonl, render_grid
from dualvqa.model import answer_scores, generate_question_ids
from dualvqa.training import save_model

TINY_CONFIG = """
[train]
epochs = 2
batch_size = 16
lr = 0.002
seed = 0

[data]
n_train = 60
n_val = 30
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    config = root / "tiny.ini"
    config.write_text(TINY_CONFIG)
    data_dir = root / "data"
    rc = main(["gen-data", "--config", str(config), "--out", str(data_dir)])
    assert rc == 0
    return root, config, data_dir


@pytest.fixture(scope="module")
def run_dir(workspace):
    root, config, data_dir = workspace
    out = root / "run"
    rc = main([
        "train", "--config", str(config), "--data", str(data_dir),
        "--out", str(out), "--regime", "dt",
    ])
    assert rc == 0
    return out


class TestGenData:
    def test_artifacts_written(self, workspace):
        _, _, data_dir = workspace
        for name in ("train.jsonl", "val.jsonl", "manifest.json", "words.vocab", "answers.vocab"):
            assert (data_dir / name).exists()
        assert len(read_jsonl(data_dir / "train.jsonl")) == 60
        manifest = json.loads((data_dir / "manifest.json").read_text())
        assert manifest["seed"] == 0 and manifest["grid_size"] == 4

    def test_deterministic_outputs(self, workspace, tmp_path):
        root, config, data_dir = workspace
        again = tmp_path / "data2"
        assert main(["gen-data", "--config", str(config), "--out", str(again)]) == 0
        assert (again / "train.jsonl").read_bytes() == (data_dir / "train.jsonl").read_bytes()

    def test_config_echoed_before_work(self, workspace, tmp_path, capsys):
        root, config, _ = workspace
        main(["gen-data", "--config", str(config), "--out", str(tmp_path / "d3")])
        out = capsys.readouterr().out
        assert "effective config:" in out
        assert "train.seed = 0" in out
        assert "data.grid_size = 4" in out


class TestTrain:
    def test_artifacts_written(self, run_dir):
        assert (run_dir / "best.ckpt").exists()
        records = [json.loads(line) for line in (run_dir / "metrics.jsonl").read_text().splitlines()]
        assert {r["split"] for r in records} == {"train", "val"}
        assert {r["epoch"] for r in records} == {1, 2}

    def test_flag_overrides_config_file(self, workspace, tmp_path, capsys):
        root, config, data_dir = workspace
        out = tmp_path / "seedrun"
        rc = main([
            "train", "--config", str(config), "--data", str(data_dir),
            "--out", str(out), "--seed", "7",
        ])
        assert rc == 0
        assert "train.seed = 7" in capsys.readouterr().out

    def test_metrics_byte_identical_across_reruns(self, workspace, tmp_path):
        root, config, data_dir = workspace
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert main(["train", "--config", str(config), "--data", str(data_dir), "--out", str(out)]) == 0
            outs.append((out / "metrics.jsonl").read_bytes())
        assert outs[0] == outs[1]


class TestEval:
    def test_report_printed_and_written(self, workspace, run_dir, tmp_path, capsys):
        root, config, data_dir = workspace
        out = tmp_path / "evalout"
        rc = main([
            "eval", str(run_dir / "best.ckpt"), "--config", str(config),
            "--data", str(data_dir), "--out", str(out),
        ])
        assert rc == 0
        stdout = capsys.readouterr().out
        assert "acc1=" in stdout and "bleu=" in stdout
        report = json.loads((out / "report.json").read_text())
        assert 0.0 <= report["acc1"] <= 1.0
        assert (out / "report.txt").read_text().startswith("acc1=")

    def test_untrained_model_scores_at_chance(self, tmp_path, capsys):
        # fresh init over 15 answer classes: Acc@1 should sit near 1/15
        from dualvqa.config import TrainConfig
        from dualvqa.model import Model

        config_file = tmp_path / "chance.ini"
        config_file.write_text("[data]\nn_train = 500\nn_val = 500\n")
        data_dir = tmp_path / "data"
        assert main(["gen-data", "--config", str(config_file), "--out", str(data_dir)]) == 0
        model = Model.init(TrainConfig(), 27, 15, np.random.default_rng(0))
        ckpt = tmp_path / "fresh.ckpt"
        save_model(ckpt, model)
        rc = main(["eval", str(ckpt), "--config", str(config_file), "--data", str(data_dir)])
        assert rc == 0
        lines = dict(
            line.split("=") for line in capsys.readouterr().out.splitlines() if "=" in line and "." in line.split("=")[-1]
        )
        acc1 = float(lines["acc1"])
        assert abs(acc1 - 1 / 15) <= 0.05


class TestAnswerAndGenerate:
    def test_answer_prints_top5(self, workspace, run_dir, capsys):
        root, config, data_dir = workspace
        record = read_jsonl(data_dir / "val.jsonl")[0]
        rc = main([
            "answer", str(run_dir / "best.ckpt"), record.image_id,
            " ".join(record.question), "--data", str(data_dir),
        ])
        assert rc == 0
        lines = [l for l in capsys.readouterr().out.splitlines() if l[:2] in ("1.", "2.", "3.", "4.", "5.")]
        assert len(lines) == 5

    def test_generate_prints_question(self, workspace, run_dir, capsys):
        root, config, data_dir = workspace
        record = read_jsonl(data_dir / "val.jsonl")[0]
        rc = main([
            "generate", str(run_dir / "best.ckpt"), record.image_id, record.answer,
            "--data", str(data_dir), "--beam", "2",
        ])
        assert rc == 0
        lines = capsys.readouterr().out.splitlines()
        assert isinstance(lines[-1], str)

    def test_unknown_answer_token_rejected(self, workspace, run_dir, capsys):
        root, config, data_dir = workspace
        record = read_jsonl(data_dir / "val.jsonl")[0]
        rc = main([
            "generate", str(run_dir / "best.ckpt"), record.image_id, "zebra",
            "--data", str(data_dir),
        ])
        assert rc == 1
        assert capsys.readouterr().err.startswith("error:")


class TestAugmentCli:
    def test_writes_synthetic_jsonl(self, workspace, run_dir, tmp_path, capsys):
        root, config, data_dir = workspace
        out = tmp_path / "aug"
        rc = main([
            "augment", str(run_dir / "best.ckpt"), "--config", str(config),
            "--data", str(data_dir / "val.jsonl"), "--out", str(out),
        ])
        assert rc == 0
        synth = read_jsonl(out / "synthetic.jsonl")
        assert all(ex.synthetic for ex in synth)
        stdout = capsys.readouterr().out
        assert "synthesized=" in stdout


class TestGradcheckCli:
    def test_fresh_init_passes_and_exits_zero(self, capsys):
        rc = main(["gradcheck", "--seed", "0"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "all" in out and "gradient checks passed" in out
        assert "FAIL" not in out


class TestErrors:
    def test_missing_data_file(self, workspace, capsys):
        root, config, data_dir = workspace
        rc = main(["train", "--config", str(config), "--data", str(root / "nope"), "--out", str(root / "x")])
        assert rc == 1
        err = capsys.readouterr().err
        assert err.startswith("error:") and err.count("\n") == 1

    def test_malformed_jsonl_reports_line(self, workspace, tmp_path, capsys):
        root, config, data_dir = workspace
        bad_dir = tmp_path / "bad"
        bad_dir.mkdir()
        good = (data_dir / "train.jsonl").read_text().splitlines()
        (bad_dir / "train.jsonl").write_text("\n".join([good[0], "{oops", *good[1:]]) + "\n")
        (bad_dir / "val.jsonl").write_text("\n".join(good[:5]) + "\n")
        rc = main(["train", "--config", str(config), "--data", str(bad_dir), "--out", str(tmp_path / "o")])
        assert rc == 1
        assert "line 2" in capsys.readouterr().err

    def test_missing_checkpoint(self, workspace, capsys):
        root, config, data_dir = workspace
        rc = main(["eval", str(root / "ghost.ckpt"), "--data", str(data_dir)])
        assert rc == 1
        assert capsys.readouterr().err.startswith("error:")

    def test_unknown_flag_rejected(self):
        with pytest.raises(SystemExit):
            main(["train", "--bogus-flag", "1"])

    def test_invalid_config_value(self, workspace, tmp_path, capsys):
        root, _, data_dir = workspace
        config = tmp_path / "bad.ini"
        config.write_text("[train]\nregime = warp\n")
        rc = main(["train", "--config", str(config), "--data", str(data_dir), "--out", str(tmp_path / "o")])
        assert rc == 1
        assert "error:" in capsys.readouterr().err

    def test_unknown_config_section(self, workspace, tmp_path, capsys):
        root, _, data_dir = workspace
        config = tmp_path / "bad2.ini"
        config.write_text("[warp]\nspeed = 9\n")
        rc = main(["gen-data", "--config", str(config), "--out", str(tmp_path / "d")])
        assert rc == 1
        assert "unknown config section" in capsys.readouterr().err


class TestTrainedModelQuality:
    def test_generate_then_answer_round_trip(self, trained_micro, vocabs):
        # synthesize a question for a known answer, then answer it back
        model, report, dc, val_ex = trained_micro
        word_vocab, answer_vocab = vocabs
        hits = 0
        cases = val_ex[:100]
        for ex in cases:
            grid = render_grid(ex.scene, dc)
            ids = generate_question_ids(model, grid, answer_vocab.id_of(ex.answer))
            if not ids:
                continue
            scores = answer_scores(model, grid, ids)
            if int(np.argmax(scores)) == answer_vocab.id_of(ex.answer):
                hits += 1
        assert hits / len(cases) >= 0.70

    def test_synthesized_questions_match_answer_category(self, trained_micro, vocabs):
        from dualvqa.data import SplitSpec, answer_category, split_for_augmentation
        from dualvqa.training import augment_with_vqg

        model, report, dc, val_ex = trained_micro
        word_vocab, answer_vocab = vocabs
        _, set2 = split_for_augmentation(val_ex, SplitSpec(fraction_pairs=0.5, seed=1))
        synth, dropped = augment_with_vqg(model, set2, word_vocab, answer_vocab, dc)
        assert synth
        matched = sum(
            1 for ex in synth
            if len(ex.question) >= 2 and ex.question[0] == "what"
            and ex.question[1] == answer_category(ex.answer)
        )
        assert matched / len(synth) >= 0.80
