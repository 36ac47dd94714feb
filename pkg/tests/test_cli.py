"""Command-line surface: flags, config resolution, errors and an end-to-end smoke run."""

import json
import subprocess
import sys

import pytest
import torch

from longssm.checkpoint import save_checkpoint
from longssm.cli import DEFAULTS, build_parser, main
from longssm.data import Document, write_packed
from longssm.model import LmModel, ModelConfig, zero_head_
from longssm.ssm import BlockConfig


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def write_csv(path, header, rows):
    path.write_text("\n".join([",".join(header)] + [",".join(map(str, r)) for r in rows]) + "\n")


class TestParser:
    @pytest.mark.parametrize("command", sorted(DEFAULTS))
    def test_help_lists_every_flag(self, command):
        sub = build_parser()._subparsers._group_actions[0].choices[command]
        text = sub.format_help()
        for flag in ("--config", "--seed", "--threads", "--out"):
            assert flag in text
        for key in DEFAULTS[command]:
            assert "--" + key.replace("_", "-") in text, key

    def test_unknown_flag_is_error(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["score", "--pred", "a", "--gold", "b", "--bogus", "1"])
        assert exc.value.code == 2
        assert "unrecognized arguments: --bogus" in capsys.readouterr().err

    def test_console_script(self):
        out = subprocess.run([sys.executable, "-m", "longssm.cli", "--help"], capture_output=True, text=True)
        assert out.returncode == 0
        for cmd in DEFAULTS:
            assert cmd in out.stdout


class TestScore:
    def fixture(self, tmp_path, perfect=True):
        rows, gold = [], []
        for d in ("d1", "d2", "d3"):
            for t, y in (("a", 1), ("b", 0)):
                s = 0.9 if y else 0.1
                lab = y if perfect else 1 - y
                rows.append((d, t, s if perfect else 1 - s, lab))
                gold.append((d, t, y))
        write_csv(tmp_path / "pred.csv", ["doc_id", "task_id", "score", "label"], rows)
        write_csv(tmp_path / "gold.csv", ["doc_id", "task_id", "gold"], gold)

    def test_perfect_predictions(self, tmp_path, capsys):
        self.fixture(tmp_path)
        code, out, _ = run(["score", "--pred", tmp_path / "pred.csv", "--gold", tmp_path / "gold.csv",
                            "--out", tmp_path / "o"], capsys)
        assert code == 0
        summary = json.loads(out)
        assert summary["f1"] == 1.0 and summary["rocauc"] == 1.0
        assert (tmp_path / "o" / "metrics.csv").read_text().splitlines()[1].startswith("micro,1.000000")

    def test_inverted_predictions(self, tmp_path, capsys):
        self.fixture(tmp_path, perfect=False)
        code, out, _ = run(["score", "--pred", tmp_path / "pred.csv", "--gold", tmp_path / "gold.csv",
                            "--out", tmp_path], capsys)
        assert code == 0 and json.loads(out)["f1"] == 0.0 and json.loads(out)["rocauc"] == 0.0

    def test_missing_file_structured_error(self, tmp_path, capsys):
        code, out, err = run(["score", "--pred", tmp_path / "nope.csv", "--gold", tmp_path / "g.csv",
                              "--out", tmp_path], capsys)
        assert code == 1 and out == ""
        payload = json.loads(err.strip().splitlines()[-1])
        assert payload["error"] == "CliError" and "not found" in payload["message"]

    def test_missing_required_setting(self, tmp_path, capsys):
        code, _, err = run(["score", "--out", tmp_path], capsys)
        assert code == 1 and "--pred" in json.loads(err)["message"]


class TestConfig:
    def test_precedence_and_resolved_file(self, tmp_path, capsys):
        TestScore().fixture(tmp_path)
        cfg = {"score": {"pred": str(tmp_path / "pred.csv"), "gold": str(tmp_path / "gold.csv"), "seed": 5}}
        (tmp_path / "c.json").write_text(json.dumps(cfg))
        code, _, _ = run(["score", "--config", tmp_path / "c.json", "--seed", 9, "--out", tmp_path / "o"], capsys)
        assert code == 0
        resolved = json.loads((tmp_path / "o" / "resolved_config.json").read_text())
        assert resolved["seed"] == 9 and resolved["pred"] == str(tmp_path / "pred.csv")
        assert resolved["command"] == "score"

        code, _, _ = run(["score", "--config", tmp_path / "c.json", "--out", tmp_path / "p"], capsys)
        assert json.loads((tmp_path / "p" / "resolved_config.json").read_text())["seed"] == 5

    def test_unknown_config_key(self, tmp_path, capsys):
        (tmp_path / "c.json").write_text(json.dumps({"pred": "a", "gold": "b", "learning_rat": 1}))
        code, _, err = run(["score", "--config", tmp_path / "c.json", "--out", tmp_path], capsys)
        assert code == 1 and "learning_rat" in json.loads(err)["message"]

    def test_bad_config_json(self, tmp_path, capsys):
        (tmp_path / "c.json").write_text("{")
        code, _, err = run(["score", "--config", tmp_path / "c.json", "--out", tmp_path], capsys)
        assert code == 1 and json.loads(err)["error"] == "CliError"


class TestEvalPpl:
    def test_uniform_model_gives_vocab(self, tmp_path, capsys):
        cfg = ModelConfig(num_layer=1, d_model=16, vocab_size=258, context_len=8192,
                          block=BlockConfig.from_width(16, d_state=4), eot_id=256)
        ckpt = save_checkpoint(zero_head_(LmModel(cfg)), tmp_path / "u.ckpt")
        g = torch.Generator().manual_seed(0)
        docs = [Document(f"v{i}", "", torch.randint(0, 256, (3000,), generator=g).tolist()) for i in range(2)]
        write_packed(docs, tmp_path / "data", 258, 256, 257)
        code, out, _ = run(["eval-ppl", "--checkpoint", ckpt, "--data", tmp_path / "data",
                            "--lengths", "1024,4096", "--out", tmp_path / "o", "--plot", "true"], capsys)
        assert code == 0
        ppl = json.loads(out)["perplexity"]
        assert ppl["1024"] == pytest.approx(258, rel=1e-9) and ppl["4096"] == pytest.approx(258, rel=1e-9)
        assert (tmp_path / "o" / "ppl.svg").exists()


def test_pipeline_smoke(tmp_path, capsys):
    out = tmp_path
    assert run(["gen-corpus", "--n-visits", 12, "--seed", 1, "--out", out / "corpus"], capsys)[0] == 0
    (out / "held.txt").write_text("V1-000000\nV1-000001\n")
    code, text, _ = run(["prepare", "--notes", out / "corpus" / "notes.jsonl", "--heldout", out / "held.txt",
                         "--out", out / "prep"], capsys)
    assert code == 0 and json.loads(text)["heldout"] == 2
    code, text, _ = run(["pretrain", "--data", out / "prep", "--steps", 200, "--seq-len", 128, "--num-layer", 2,
                         "--d-model", 32, "--d-state", 4, "--peak-lr", 3e-3, "--out", out / "pt"], capsys)
    assert code == 0
    curve = (out / "pt" / "curve.csv").read_text().splitlines()
    assert len(curve) == 201
    first, last = float(curve[1].split(",")[1]), json.loads(text)["final_loss"]
    assert last < first
    code, text, _ = run(["eval-ppl", "--checkpoint", out / "pt" / "final.ckpt", "--data", out / "prep",
                         "--lengths", "512,2048", "--out", out / "ev"], capsys)
    assert code == 0
    ppl = json.loads(text)["perplexity"]
    assert all(1.0 < v < 258 for v in ppl.values())
    code, text, _ = run(["bench", "--checkpoint", out / "pt" / "final.ckpt", "--lengths", "256", "--reps", 1,
                         "--out", out / "bench"], capsys)
    assert code == 0 and json.loads(text)["tokens_per_s"]["256"] > 0
    assert run(["gen-corpus", "--kind", "cohort", "--shots", 2, "--n-dev", 0, "--n-test", 4,
                "--out", out / "cohort"], capsys)[0] == 0
    code, text, _ = run(["finetune", "--checkpoint", out / "pt" / "final.ckpt", "--corpus", out / "cohort",
                         "--shots", 2, "--steps", 2, "--out", out / "ft"], capsys)
    assert code == 0 and json.loads(text)["predicted_docs"] == 4
    code, text, _ = run(["score", "--pred", out / "ft" / "predictions.csv", "--gold", out / "ft" / "gold.csv",
                         "--out", out / "sc"], capsys)
    assert code == 0
    assert (out / "sc" / "metrics.csv").read_bytes() == (out / "ft" / "metrics.csv").read_bytes()
