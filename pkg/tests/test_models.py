import numpy as np
import pytest

from ccnrank.corpus import TrainInstance
from ccnrank.models import (
    randomize_parameters,
    ARCHITECTURES,
    CheckpointError,
    ModelConfig,
    build_model,
    ccn_lstm_forward,
    dual_forward,
    forward_batch,
    load_checkpoint,
    mfcw_forward,
    parameter_spec,
    prepare_pairs,
    save_checkpoint,
)
from ccnrank.numerics import ContractError, finite_diff_check, mean, mul, sub, Tensor
from ccnrank.vocab import PAD_ID, build_vocab, encode


def tiny_vocab(n_high=4, n_low=3):
    """Vocabulary with n_high frequent and n_low rare words, threshold 5."""
    instances = []
    for i in range(n_high):
        for _ in range(6):
            instances.append(TrainInstance((f"hi{i}",), (f"hi{i}",), 1))
    for i in range(n_low):
        instances.append(TrainInstance((f"lo{i}",), (f"lo{i}",), 0))
    return build_vocab(instances)


def tiny_config(arch, **kw):
    defaults = dict(architecture=arch, embedding_dim=2, hidden_size=2, max_len=3, k=1, seed=3)
    defaults.update(kw)
    return ModelConfig(**defaults)


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def lstm_forward_oracle(ids, w_in, w_rec, bias, table, hidden):
    """Hand-rolled embed + LSTM + final hidden state, independent of the tape."""
    h, c = np.zeros(hidden), np.zeros(hidden)
    for token_id in ids:
        x = table[token_id]
        pre = w_in @ x + w_rec @ h + bias
        i = sigmoid(pre[:hidden])
        f = sigmoid(pre[hidden : 2 * hidden])
        g = np.tanh(pre[2 * hidden : 3 * hidden])
        o = sigmoid(pre[3 * hidden :])
        c = f * c + i * g
        h = o * np.tanh(c)
    return h


def high_ids(tokens, vocab, threshold, length, side):
    kept = list(tokens[-length:] if side == "context" else tokens[:length])
    return [vocab.word_to_id[t] for t in kept if vocab.counts.get(t, 0) > threshold]


class TestZeroScoreBranches:
    """With every score-branch parameter zeroed, the probability is exactly 0.5."""

    def zero_heads(self, model):
        for name in model.params.names():
            if name.startswith(("bilinear", "common_head", "ccn")):
                model.params[name].data[:] = 0.0

    @pytest.mark.parametrize("arch", ARCHITECTURES)
    def test_probability_is_half(self, arch):
        vocab = tiny_vocab()
        model, _ = build_model(tiny_config(arch), vocab)
        self.zero_heads(model)
        pairs = [(("hi0", "hi1", "lo0"), ("hi2", "lo1"))]
        prob = forward_batch(model, prepare_pairs(model, pairs))
        assert float(prob.data[0]) == 0.5

    def test_empty_pair_is_half_without_zeroing(self):
        vocab = tiny_vocab()
        model, _ = build_model(tiny_config("dual_lstm"), vocab)
        prob = forward_batch(model, prepare_pairs(model, [((), ())]))
        assert float(prob.data[0]) == 0.5


class TestDualForward:
    def test_matches_independent_oracle(self):
        vocab = tiny_vocab()
        config = tiny_config("dual_lstm")
        model, _ = build_model(config, vocab)
        ctx_tokens = ("hi0", "lo0", "hi1", "hi2")  # 4 tokens, L=3 keeps last 3
        resp_tokens = ("hi3", "lo1")
        ctx = encode(ctx_tokens, vocab, 3, "context")
        resp = encode(resp_tokens, vocab, 3, "response")
        got = dual_forward(ctx, resp, model)

        table = model.params["embedding_high"].data
        w_in = model.params["encoder.w_in"].data
        w_rec = model.params["encoder.w_rec"].data
        bias = model.params["encoder.bias"].data
        m = model.params["bilinear"].data
        c = lstm_forward_oracle(high_ids(ctx_tokens, vocab, 5, 3, "context"), w_in, w_rec, bias, table, 2)
        r = lstm_forward_oracle(high_ids(resp_tokens, vocab, 5, 3, "response"), w_in, w_rec, bias, table, 2)
        expected = sigmoid(c @ m @ r)
        assert got == pytest.approx(expected, abs=1e-10)

    def test_architecture_mismatch(self):
        vocab = tiny_vocab()
        model, _ = build_model(tiny_config("mfcw_lstm"), vocab)
        enc = encode(("hi0",), vocab, 3, "context")
        with pytest.raises(ContractError):
            dual_forward(enc, enc, model)

    def test_tied_encoder_is_the_same_object(self):
        vocab = tiny_vocab()
        model, _ = build_model(tiny_config("dual_lstm"), vocab)
        assert model.lstm("encoder").w_in is model.lstm("encoder").w_in
        # one parameter tensor serves both context and response encodes
        assert model.params["encoder.w_in"] is model.lstm("encoder").w_in

    def test_forward_deterministic_bitwise(self):
        vocab = tiny_vocab()
        model, _ = build_model(tiny_config("dual_lstm"), vocab)
        ctx = encode(("hi0", "hi1"), vocab, 3, "context")
        resp = encode(("hi2",), vocab, 3, "response")
        assert dual_forward(ctx, resp, model) == dual_forward(ctx, resp, model)


class TestCcnForward:
    def test_matches_composed_oracle(self):
        vocab = tiny_vocab()
        config = tiny_config("ccn_lstm", k=2, max_len=3)
        model, _ = build_model(config, vocab)
        ctx_tokens = ("hi0", "hi1", "lo0")
        resp_tokens = ("hi2", "hi0")
        ctx = encode(ctx_tokens, vocab, 3, "context")
        resp = encode(resp_tokens, vocab, 3, "response")
        got = ccn_lstm_forward(ctx, resp, model)

        p = model.params
        ids_c = high_ids(ctx_tokens, vocab, 5, 3, "context")
        ids_r = high_ids(resp_tokens, vocab, 5, 3, "response")
        c = lstm_forward_oracle(ids_c, p["encoder.w_in"].data, p["encoder.w_rec"].data,
                                p["encoder.bias"].data, p["embedding_lstm"].data, 2)
        r = lstm_forward_oracle(ids_r, p["encoder.w_in"].data, p["encoder.w_rec"].data,
                                p["encoder.bias"].data, p["embedding_lstm"].data, 2)
        s_lstm = c @ p["bilinear"].data @ r

        table = p["embedding_ccn"].data
        k, length = config.k, config.max_len
        pooled = []
        for i in range(length):
            r_vec = table[ids_r[i]] if i < len(ids_r) else np.zeros(2)
            row = [float(r_vec @ table[j]) for j in ids_c]
            row.sort(reverse=True)
            row = row[:k] + [0.0] * max(0, k - len(row))
            pooled.extend(row)
        s_ccn = p["ccn.weight"].data @ np.array(pooled) + p["ccn.bias"].data[0]
        alphas = p["branch_weights"].data
        expected = sigmoid(alphas[0] * s_lstm + alphas[1] * s_ccn)
        assert got == pytest.approx(expected, abs=1e-10)

    def test_zero_response(self):
        vocab = tiny_vocab()
        model, _ = build_model(tiny_config("ccn_lstm"), vocab)
        for name in ("bilinear", "ccn.weight"):
            model.params[name].data[:] = 0.0
        model.params["ccn.bias"].data[:] = 0.25
        ctx = encode(("hi0", "hi1"), vocab, 3, "context")
        resp = encode((), vocab, 3, "response")
        # lstm branch scores 0 (r = 0), ccn branch scores its bias
        alphas = model.params["branch_weights"].data
        assert ccn_lstm_forward(ctx, resp, model) == pytest.approx(sigmoid(alphas[1] * 0.25))

    def test_architecture_mismatch(self):
        vocab = tiny_vocab()
        model, _ = build_model(tiny_config("dual_lstm"), vocab)
        enc = encode(("hi0",), vocab, 3, "context")
        with pytest.raises(ContractError):
            ccn_lstm_forward(enc, enc, model)


class TestMfcwForward:
    def test_no_common_words_zeroes_common_branches(self):
        vocab = tiny_vocab()
        model, _ = build_model(tiny_config("mfcw_lstm"), vocab)
        # zero the pair branches so only common branches could contribute
        model.params["bilinear_high"].data[:] = 0.0
        model.params["bilinear_low"].data[:] = 0.0
        assert mfcw_forward(("hi0", "lo0"), ("hi1", "lo1"), model) == 0.5

    def test_every_nonpad_token_lands_in_exactly_one_band(self):
        vocab = tiny_vocab()
        model, _ = build_model(tiny_config("mfcw_lstm", max_len=8), vocab)
        pairs = [(("hi0", "lo0", "hi1", "nonsense"), ("lo1", "hi2", "hi0"))]
        prepared = prepare_pairs(model, pairs)
        for side, tokens in (("ctx", pairs[0][0]), ("resp", pairs[0][1])):
            hi_ids, hi_len = prepared.columns[f"{side}_high"]
            lo_ids, lo_len = prepared.columns[f"{side}_low"]
            merged = sorted(list(hi_ids[0][: hi_len[0]]) + list(lo_ids[0][: lo_len[0]]))
            expected = sorted(vocab.lookup(t) for t in tokens)
            assert merged == expected

    def test_common_branch_uses_token_types_not_oov_ids(self):
        vocab = tiny_vocab()
        model, _ = build_model(tiny_config("mfcw_lstm", max_len=4), vocab)
        # distinct unknown words share the oov id but are not common words
        prepared = prepare_pairs(model, [(("ghost1",), ("ghost2",))])
        assert prepared.columns["common_low"][1][0] == 0
        prepared = prepare_pairs(model, [(("ghost1",), ("ghost1",))])
        assert prepared.columns["common_low"][1][0] == 1

    def test_architecture_mismatch(self):
        vocab = tiny_vocab()
        model, _ = build_model(tiny_config("ccn_lstm"), vocab)
        with pytest.raises(ContractError):
            mfcw_forward(("hi0",), ("hi0",), model)


class TestEndToEndGradients:
    @pytest.mark.parametrize("arch", ARCHITECTURES)
    def test_batch_loss_gradients(self, arch):
        vocab = tiny_vocab()
        model, _ = build_model(tiny_config(arch, max_len=4), vocab)
        # init-scale weights make the loss nearly flat and finite differences
        # noise-bound; check at a well-conditioned random operating point
        randomize_parameters(model, np.random.default_rng(0))
        pairs = [
            (("hi0", "lo0", "hi1"), ("hi1", "lo0")),
            (("hi2", "hi3"), ("hi2", "lo1")),
        ]
        labels = Tensor(np.array([1.0, 0.0]))
        prepared = prepare_pairs(model, pairs)

        def loss():
            p = forward_batch(model, prepared)
            d = sub(p, labels)
            return mean(mul(d, d))

        # h=1e-4: central-difference roundoff at h=1e-5 exceeds the tolerance
        # on coordinates whose true gradient is ~1e-8
        report = finite_diff_check(loss, model.params, h=1e-4, max_coords_per_param=8)
        assert report.passed, (arch, report.worst_parameter, report.max_relative_error)


class TestCheckpoint:
    def build(self, arch="ccn_lstm"):
        vocab = tiny_vocab()
        model, _ = build_model(tiny_config(arch), vocab)
        return model, vocab

    def test_round_trip_is_byte_identical(self, tmp_path):
        model, vocab = self.build()
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(model, p1)
        loaded = load_checkpoint(p1, vocab=vocab)
        save_checkpoint(loaded, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_parameters_bit_exact(self, tmp_path):
        model, vocab = self.build("mfcw_lstm")
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path)
        loaded = load_checkpoint(path, vocab=vocab)
        for name in model.params.names():
            assert loaded.params[name].data.tobytes() == model.params[name].data.tobytes()
        assert loaded.config == model.config

    def test_loaded_model_scores_identically(self, tmp_path):
        model, vocab = self.build("dual_lstm")
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path)
        loaded = load_checkpoint(path, vocab=vocab)
        pairs = [(("hi0", "hi1"), ("hi2",)), (("hi3",), ("hi0", "lo1"))]
        np.testing.assert_array_equal(model.score_pairs(pairs), loaded.score_pairs(pairs))

    def test_truncated_file_rejected(self, tmp_path):
        model, _ = self.build()
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) - 10])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "m.ckpt"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 16)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_version_mismatch_rejected(self, tmp_path):
        model, _ = self.build()
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path)
        blob = bytearray(path.read_bytes())
        # bump format_version inside the JSON header
        idx = blob.find(b'"format_version":1')
        blob[idx : idx + len(b'"format_version":1')] = b'"format_version":9'
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path)

    def test_shape_mismatch_names_field(self, tmp_path):
        model, _ = self.build("dual_lstm")
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path)
        blob = path.read_bytes()
        # shrink the declared bilinear shape without touching the payload
        broken = blob.replace(b'"name":"bilinear","shape":[2,2]', b'"name":"bilinear","shape":[2,1]')
        assert broken != blob
        path.write_bytes(broken)
        with pytest.raises(CheckpointError, match="bilinear"):
            load_checkpoint(path)

    def test_vocab_hash_mismatch_rejected(self, tmp_path):
        model, _ = self.build()
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path)
        other_vocab = build_vocab([TrainInstance(("zzz",) * 8, ("qqq",), 1)] * 3)
        with pytest.raises(ContractError, match="hash"):
            load_checkpoint(path, vocab=other_vocab)

    def test_pad_row_zero_after_load(self, tmp_path):
        model, vocab = self.build("mfcw_lstm")
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path)
        loaded = load_checkpoint(path, vocab=vocab)
        np.testing.assert_array_equal(loaded.params["embedding_low"].data[PAD_ID], 0.0)


class TestParameterSpec:
    def test_covers_all_architectures(self):
        for arch in ARCHITECTURES:
            spec = parameter_spec(tiny_config(arch), vocab_size=10)
            names = [n for n, _ in spec]
            assert len(names) == len(set(names))
            assert any(n.startswith("embedding") for n in names)

    def test_parallel_head_adds_second_dense(self):
        spec = dict(parameter_spec(tiny_config("ccn_lstm", ccn_head="parallel"), 10))
        assert "ccn2.weight" in spec and "ccn2.bias" in spec

    def test_bad_config_rejected(self):
        with pytest.raises(ContractError):
            ModelConfig(architecture="transformer")
        with pytest.raises(ContractError):
            ModelConfig(architecture="dual_lstm", hidden_size=0)
        with pytest.raises(ContractError):
            ModelConfig(architecture="dual_lstm", precision="float16")
