import numpy as np
import pytest
from scipy import stats

from dhrd import autodiff as ad
from dhrd import tokenizer
from dhrd.model import (
    CheckpointError,
    DecodeSettings,
    DualHeadModel,
    IndexOutOfRange,
    ModelConfig,
    ModelError,
    PrefixTooLong,
    SequenceTooLong,
    TokenOutOfRange,
    load_checkpoint,
    sample_token,
    save_checkpoint,
)

def tiny_model(seed=0, **kw):
    cfg = ModelConfig(d_model=32, n_layers=2, n_heads=2, d_ff=64, max_len=64, seed=seed, **kw)
    return DualHeadModel(cfg)


class TestForward:
    def test_shapes(self):
        model = tiny_model()
        tokens = np.arange(10)[None, :] % 250
        hidden = model.forward_hidden(tokens)
        assert hidden.data.shape == (1, 10, 32)
        z = model.classify(hidden, [9])
        assert z.data.shape == (1, 2)
        lm = model.lm_logits(hidden)
        assert lm.data.shape == (1, 10, tokenizer.VOCAB_SIZE)

    def test_deterministic_given_seed(self):
        a, b = tiny_model(seed=5), tiny_model(seed=5)
        tokens = np.arange(8)[None, :]
        assert np.array_equal(a.forward_hidden(tokens).data, b.forward_hidden(tokens).data)

    def test_different_seed_differs(self):
        a, b = tiny_model(seed=5), tiny_model(seed=6)
        assert a.param_checksum() != b.param_checksum()

    def test_too_long_rejected(self):
        with pytest.raises(SequenceTooLong):
            tiny_model().forward_hidden(np.zeros((1, 65), dtype=np.int64))

    def test_token_out_of_range(self):
        with pytest.raises(TokenOutOfRange):
            tiny_model().forward_hidden(np.array([[0, 300]]))

    def test_pool_index_out_of_range(self):
        model = tiny_model()
        hidden = model.forward_hidden(np.arange(6)[None, :])
        with pytest.raises(IndexOutOfRange):
            model.classify(hidden, [6])


class TestCausality:
    def test_prefix_states_ignore_suffix(self):
        """Hidden states over x alone equal those same positions when a suffix
        (rationale and label tokens) is appended. This is what lets training
        use the full sequence while inference sees only x."""
        model = tiny_model()
        x = list(np.arange(12) % 250)
        suffix = [tokenizer.REASON, 70, 71, tokenizer.ANS, 89]
        h_short = model.forward_hidden(np.array([x]))
        h_long = model.forward_hidden(np.array([x + suffix]))
        diff = np.abs(h_short.data[0] - h_long.data[0, : len(x)]).max()
        assert diff <= 1e-6

    def test_pooled_logits_invariant_to_suffix(self):
        model = tiny_model()
        x = list((np.arange(9) * 7) % 250)
        pool = [len(x) - 1]
        z_short = model.classify(model.forward_hidden(np.array([x])), pool)
        z_long = model.classify(model.forward_hidden(np.array([x + [tokenizer.ANS, 50]])), pool)
        assert np.abs(z_short.data - z_long.data).max() <= 1e-6

    def test_changing_future_token_leaves_past_logits(self):
        model = tiny_model()
        base = np.arange(10)[None, :]
        other = base.copy()
        other[0, -1] = 123
        la = model.lm_logits(model.forward_hidden(base)).data
        lb = model.lm_logits(model.forward_hidden(other)).data
        assert np.abs(la[0, :-1] - lb[0, :-1]).max() <= 1e-6
        assert np.abs(la[0, -1] - lb[0, -1]).max() > 1e-3

    def test_padded_keys_do_not_affect_real_positions(self):
        model = tiny_model()
        x = np.arange(7)
        h_bare = model.forward_hidden(x[None, :])
        padded = np.concatenate([x, [tokenizer.PAD] * 5])[None, :]
        pad_mask = np.array([[1] * 7 + [0] * 5])
        h_pad = model.forward_hidden(padded, pad_mask)
        assert np.abs(h_bare.data[0] - h_pad.data[0, :7]).max() <= 1e-6


class TestWeightTying:
    def test_lm_head_reads_token_embedding(self):
        model = tiny_model()
        hidden = model.forward_hidden(np.arange(5)[None, :])
        logits = model.lm_logits(hidden)
        expect = hidden.data.reshape(-1, 32) @ model.params["emb"].data.T
        assert np.allclose(logits.data.reshape(-1, tokenizer.VOCAB_SIZE), expect, atol=1e-5)

    def test_embedding_gets_gradient_from_both_ends(self):
        model = tiny_model()
        tokens = np.arange(5)[None, :]
        hidden = model.forward_hidden(tokens)
        loss = ad.sum_all(model.lm_logits(hidden))
        ad.backward(loss)
        assert model.params["emb"].grad is not None
        assert np.abs(model.params["emb"].grad).sum() > 0


class TestSampling:
    def test_argmax_at_zero_temperature(self):
        logits = np.array([0.1, 3.0, -1.0])
        rng = np.random.default_rng(0)
        assert sample_token(logits, 0.0, 0.9, rng) == 1

    def test_top_p_excludes_tail(self):
        # p = [0.6, 0.3, 0.1]; top_p 0.5 keeps only the top token
        logits = np.log(np.array([0.6, 0.3, 0.1]))
        rng = np.random.default_rng(0)
        draws = {sample_token(logits, 1.0, 0.5, rng) for _ in range(50)}
        assert draws == {0}

    def test_top_p_one_keeps_everything(self):
        logits = np.log(np.array([0.5, 0.3, 0.2]))
        rng = np.random.default_rng(0)
        draws = {sample_token(logits, 1.0, 1.0, rng) for _ in range(300)}
        assert draws == {0, 1, 2}

    def test_sampled_frequencies_match_distribution(self):
        probs = np.array([0.5, 0.3, 0.2])
        rng = np.random.default_rng(42)
        counts = np.zeros(3)
        n = 3000
        for _ in range(n):
            counts[sample_token(np.log(probs), 1.0, 1.0, rng)] += 1
        _, p_value = stats.chisquare(counts, probs * n)
        assert p_value > 0.001

    def test_temperature_sharpens(self):
        logits = np.array([1.0, 0.0])
        rng = np.random.default_rng(7)
        cold = sum(sample_token(logits, 0.1, 1.0, rng) for _ in range(200))
        hot = sum(sample_token(logits, 5.0, 1.0, rng) for _ in range(200))
        assert cold < hot

    def test_generate_respects_stop_token(self):
        model = tiny_model()
        out = model.generate([1, 2, 3], DecodeSettings(temperature=0.0, max_new_tokens=30, stop_token=None))
        assert len(out) <= model.cfg.max_len
        assert out[:3] == [1, 2, 3]

    def test_generate_prefix_too_long(self):
        model = tiny_model()
        with pytest.raises(PrefixTooLong):
            model.generate(list(range(64)), DecodeSettings())

    def test_decode_settings_validation(self):
        with pytest.raises(ModelError):
            DecodeSettings(temperature=-1.0)
        with pytest.raises(ModelError):
            DecodeSettings(top_p=0.0)
        with pytest.raises(ModelError):
            DecodeSettings(max_new_tokens=0)


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        model = tiny_model(seed=3)
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path)
        back = load_checkpoint(path)
        assert back.cfg == model.cfg
        for name, p in model.params.items():
            assert np.array_equal(p.data, back.params[name].data), name

    def test_round_trip_preserves_forward(self, tmp_path):
        model = tiny_model(seed=3)
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path)
        back = load_checkpoint(path)
        tokens = np.arange(11)[None, :]
        assert np.array_equal(
            model.forward_hidden(tokens).data, back.forward_hidden(tokens).data
        )

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_truncated_file(self, tmp_path):
        model = tiny_model()
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) - 17])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_config_validation(self):
        with pytest.raises(ModelError):
            ModelConfig(d_model=30, n_heads=4)  # not divisible
