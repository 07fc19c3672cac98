import json

import pytest

from ccnrank.cli import EXIT_IO, EXIT_OK, EXIT_USAGE, EXIT_VERIFICATION, main
from ccnrank.corpus import load_eval, load_train


@pytest.fixture(autouse=True)
def run_in_tmpdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


def gen(tmp_path, n_train=80, n_eval=10, seed=7, out="data"):
    rc = main(
        [
            "gen-synthetic",
            "--seed", str(seed),
            "--train", str(n_train),
            "--eval", str(n_eval),
            "--out", str(tmp_path / out),
        ]
    )
    assert rc == EXIT_OK
    return tmp_path / out


def train_tiny(tmp_path, data, arch="dual_lstm", out="model.ckpt", extra=()):
    rc = main(
        [
            "train",
            "--arch", arch,
            "--train", str(data / "train.csv"),
            "--val", str(data / "validation.csv"),
            "--out", str(tmp_path / out),
            "--seed", "1",
            "--epochs", "1",
            "--batch-size", "16",
            "--hidden-size", "4",
            "--embedding-dim", "4",
            "--max-len", "16",
            *extra,
        ]
    )
    return rc, tmp_path / out


class TestGenSynthetic:
    def test_writes_three_csvs_and_manifest(self, run_in_tmpdir):
        out = gen(run_in_tmpdir)
        for name in ("train.csv", "validation.csv", "eval.csv", "manifest.json"):
            assert (out / name).exists()
        assert len(load_train(out / "train.csv")) == 80
        assert len(load_eval(out / "eval.csv")) == 10
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["command"] == "gen-synthetic"
        assert manifest["seed"] == 7

    def test_missing_out_is_usage_error(self, run_in_tmpdir):
        rc = main(["gen-synthetic", "--seed", "1", "--train", "10", "--eval", "2"])
        assert rc == EXIT_USAGE

    def test_rerun_is_byte_identical(self, run_in_tmpdir):
        a = gen(run_in_tmpdir, out="a")
        b = gen(run_in_tmpdir, out="b")
        for name in ("train.csv", "validation.csv", "eval.csv"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_config_file_merges_under_flags(self, run_in_tmpdir):
        cfg = run_in_tmpdir / "syn.cfg"
        cfg.write_text("topics = 3\nseed = 5\n")
        rc = main(
            [
                "gen-synthetic",
                "--train", "20",
                "--eval", "2",
                "--out", str(run_in_tmpdir / "c"),
                "--config", str(cfg),
                "--seed", "9",  # explicit flag wins over the config value
            ]
        )
        assert rc == EXIT_OK
        manifest = json.loads((run_in_tmpdir / "c" / "manifest.json").read_text())
        assert manifest["seed"] == 9
        assert manifest["configuration"]["topics"] == 3

    def test_bad_config_value_is_usage_error(self, run_in_tmpdir):
        cfg = run_in_tmpdir / "syn.cfg"
        cfg.write_text("topics = 0\n")
        rc = main(
            ["gen-synthetic", "--train", "10", "--eval", "2",
             "--out", str(run_in_tmpdir / "x"), "--config", str(cfg)]
        )
        assert rc == EXIT_USAGE


class TestPrepareVocab:
    def test_writes_vocab_and_manifest(self, run_in_tmpdir, capsys):
        data = gen(run_in_tmpdir)
        out = run_in_tmpdir / "vocab.txt"
        rc = main(["prepare-vocab", "--train", str(data / "train.csv"), "--out", str(out)])
        assert rc == EXIT_OK
        assert out.exists()
        assert (run_in_tmpdir / "vocab.txt.manifest.json").exists()
        stdout = capsys.readouterr().out
        assert "vocab_size\t" in stdout and "vocab_hash\t" in stdout

    def test_missing_train_file_is_io_error(self, run_in_tmpdir):
        rc = main(["prepare-vocab", "--train", "nope.csv", "--out", "v.txt"])
        assert rc == EXIT_IO


class TestTrain:
    def test_writes_checkpoint_log_vocab_manifest(self, run_in_tmpdir, capsys):
        data = gen(run_in_tmpdir)
        rc, ckpt = train_tiny(run_in_tmpdir, data)
        assert rc == EXIT_OK
        assert ckpt.exists()
        assert (run_in_tmpdir / "model.ckpt.log").exists()
        assert (run_in_tmpdir / "model.ckpt.vocab.txt").exists()
        assert (run_in_tmpdir / "model.ckpt.manifest.json").exists()
        stdout = capsys.readouterr().out
        assert "val_accuracy\t" in stdout
        assert "val_recall@1\t" in stdout

    def test_bogus_architecture_is_usage_error(self, run_in_tmpdir, capsys):
        data = gen(run_in_tmpdir)
        rc, _ = train_tiny(run_in_tmpdir, data, arch="bogus")
        assert rc == EXIT_USAGE
        assert "dual_lstm" in capsys.readouterr().err  # usage lists valid choices

    def test_pretrained_embeddings_coverage_printed(self, run_in_tmpdir, capsys):
        data = gen(run_in_tmpdir)
        words = set()
        for inst in load_train(data / "train.csv")[:20]:
            words.update(inst.context)
        vectors = run_in_tmpdir / "vectors.txt"
        with open(vectors, "w") as f:
            for w in sorted(words)[:10]:
                f.write(w + " " + " ".join(["0.25"] * 4) + "\n")
        rc, _ = train_tiny(run_in_tmpdir, data, extra=("--embeddings", str(vectors)))
        assert rc == EXIT_OK
        assert "pretrained_coverage\t10" in capsys.readouterr().out


class TestEvaluate:
    def make_model(self, tmp_path, arch="dual_lstm", out="m.ckpt"):
        data = gen(tmp_path)
        rc, ckpt = train_tiny(tmp_path, data, arch=arch, out=out)
        assert rc == EXIT_OK
        return data, ckpt, tmp_path / "model.ckpt.vocab.txt" if out == "model.ckpt" else (
            tmp_path / f"{out}.vocab.txt"
        )

    def test_single_model_report(self, run_in_tmpdir, capsys):
        data = gen(run_in_tmpdir)
        rc, ckpt = train_tiny(run_in_tmpdir, data)
        vocab = run_in_tmpdir / "model.ckpt.vocab.txt"
        capsys.readouterr()
        rc = main(
            ["evaluate", "--models", str(ckpt), "--vocab", str(vocab),
             "--eval", str(data / "eval.csv"), "--cwf-scale", "0"]
        )
        assert rc == EXIT_OK
        out = capsys.readouterr().out
        assert "recall@1\t" in out and "recall@5\t" in out and "n_instances\t10" in out
        assert (run_in_tmpdir / "run-manifest.json").exists()

    def test_tune_cwf_prints_scale(self, run_in_tmpdir, capsys):
        data = gen(run_in_tmpdir)
        rc, ckpt = train_tiny(run_in_tmpdir, data)
        vocab = run_in_tmpdir / "model.ckpt.vocab.txt"
        capsys.readouterr()
        rc = main(
            ["evaluate", "--models", str(ckpt), "--vocab", str(vocab),
             "--eval", str(data / "eval.csv"), "--tune-cwf", str(data / "validation.csv")]
        )
        assert rc == EXIT_OK
        out = capsys.readouterr().out
        assert "tuned_scale\t" in out

    def test_ensemble_eval_two_models(self, run_in_tmpdir, capsys):
        data = gen(run_in_tmpdir)
        rc1, ckpt1 = train_tiny(run_in_tmpdir, data, out="a.ckpt")
        vocab = run_in_tmpdir / "a.ckpt.vocab.txt"
        rc2, ckpt2 = train_tiny(
            run_in_tmpdir, data, arch="ccn_lstm", out="b.ckpt", extra=("--vocab", str(vocab))
        )
        assert rc1 == rc2 == EXIT_OK
        capsys.readouterr()
        rc = main(
            ["ensemble-eval", "--models", f"{ckpt1},{ckpt2}", "--vocab", str(vocab),
             "--eval", str(data / "eval.csv")]
        )
        assert rc == EXIT_OK
        assert "recall@1\t" in capsys.readouterr().out

    def test_vocab_hash_mismatch_is_usage_error(self, run_in_tmpdir):
        data = gen(run_in_tmpdir)
        rc, ckpt = train_tiny(run_in_tmpdir, data)
        other = gen(run_in_tmpdir, seed=99, out="other")
        rc, _ = train_tiny(run_in_tmpdir, other, out="other.ckpt")
        rc = main(
            ["evaluate", "--models", str(ckpt), "--vocab",
             str(run_in_tmpdir / "other.ckpt.vocab.txt"), "--eval", str(data / "eval.csv")]
        )
        assert rc == EXIT_USAGE

    def test_rescore_requires_scale_or_tuning(self, run_in_tmpdir):
        data = gen(run_in_tmpdir)
        rc, ckpt = train_tiny(run_in_tmpdir, data)
        vocab = run_in_tmpdir / "model.ckpt.vocab.txt"
        rc = main(
            ["rescore", "--models", str(ckpt), "--vocab", str(vocab),
             "--eval", str(data / "eval.csv")]
        )
        assert rc == EXIT_USAGE
        rc = main(
            ["rescore", "--models", str(ckpt), "--vocab", str(vocab),
             "--eval", str(data / "eval.csv"), "--cwf-scale", "0.5"]
        )
        assert rc == EXIT_OK


class TestGradcheck:
    @pytest.mark.parametrize("arch", ["dual_lstm", "mfcw_lstm", "ccn_lstm"])
    def test_passes_for_each_architecture(self, run_in_tmpdir, arch, capsys):
        rc = main(["gradcheck", "--arch", arch, "--seed", "0"])
        out = capsys.readouterr().out
        assert rc == EXIT_OK, out
        assert "max_relative_error\t" in out
        assert "passed\t1" in out

    def test_corrupted_gradient_fails_with_exit_4(self, run_in_tmpdir):
        rc = main(["gradcheck", "--arch", "dual_lstm", "--corrupt-gradient", "2.0"])
        assert rc == EXIT_VERIFICATION

    def test_writes_manifest_first(self, run_in_tmpdir):
        main(["gradcheck", "--arch", "dual_lstm"])
        manifest = json.loads((run_in_tmpdir / "run-manifest.json").read_text())
        assert manifest["command"] == "gradcheck"
