import numpy as np
import pytest

from barl import numerics as nx
from barl.model import _init_from_shapes
from barl.numerics import ContractError, ParamSet, Tensor
from barl.text import (CLS, PAD, UNK, TokenSequence, Vocab, build_vocab, encode, encode_batch,
                       encoder_param_count, encoder_param_shapes, pad_batch, tokenize)


def enc_params(vocab_size=12, d=8, layers=2, max_len=16, seed=0):
    shapes = encoder_param_shapes("enc", vocab_size, d, layers, max_len)
    return _init_from_shapes(shapes, seed, {})


class TestVocab:
    def test_empty_corpus(self):
        v = build_vocab([], 10)
        assert len(v) == 3 and v.itos[:3] == ["[PAD]", "[UNK]", "[CLS]"]

    def test_frequency_order(self):
        v = build_vocab(["a a b"], 5)
        assert "a" in v and "b" in v
        assert v.id("a") < v.id("b")

    def test_overflow_maps_to_unk(self):
        v = build_vocab(["a a a b b c"], 4)
        assert len(v) == 4
        assert tokenize(v, "c b a", 8).ids == (CLS, UNK, UNK, v.id("a"))

    def test_tie_break_by_token(self):
        assert build_vocab(["z y x"], 10).itos[3:] == ["x", "y", "z"]

    def test_deterministic(self):
        corpus = ["q w e", "w e", "e"]
        assert build_vocab(corpus, 6) == build_vocab(list(corpus), 6)

    def test_min_size(self):
        with pytest.raises(ValueError):
            build_vocab(["a"], 3)

    def test_round_trip(self):
        v = build_vocab(["hello world hello"], 10)
        text = v.dumps()
        assert text.splitlines()[0] == "#barl-vocab v1"
        assert text.splitlines()[1] == "hello"  # line 1 past the header is id 3
        assert Vocab.loads(text) == v


class TestTokenize:
    def test_empty_text(self):
        assert tokenize(build_vocab(["a"], 5), "", 4).ids == (CLS,)

    def test_case_folding(self):
        v = build_vocab(["hello"], 5)
        h = v.id("hello")
        assert tokenize(v, "Hello hello", 8).ids == (CLS, h, h)

    def test_truncation(self):
        v = build_vocab(["a"], 5)
        assert len(tokenize(v, " ".join(["a"] * 100), 16)) == 16

    def test_pad_only_as_suffix(self):
        v = build_vocab(["a b c"], 10)
        ids, mask = pad_batch([tokenize(v, "a", 8), tokenize(v, "a b c", 8)])
        assert ids.shape == (2, 4)
        assert list(ids[0]) == [CLS, v.id("a"), PAD, PAD]
        assert mask.sum() == 6

    def test_sequence_must_start_with_cls(self):
        with pytest.raises(ValueError):
            TokenSequence((5, 6))


class TestEncoder:
    def test_shapes(self):
        ps = enc_params()
        out = encode(ps, TokenSequence((CLS, 4, 5, 6)), layers=2, heads=2)
        assert out.token_reps.shape == (4, 8)
        assert out.pooled.shape == (1, 8)

    def test_single_token_pooled_equals_row(self):
        out = encode(enc_params(), TokenSequence((CLS,)), layers=2, heads=2)
        np.testing.assert_array_equal(out.pooled.data, out.token_reps.data)

    def test_layer_norm_statistics(self):
        # with unit gain and zero bias the block output is the raw normalisation
        ps = enc_params()
        out = encode(ps, TokenSequence((CLS, 3, 4, 5, 6)), layers=2, heads=2)
        rows = out.token_reps.data
        assert np.abs(rows.mean(axis=1)).max() <= 1e-9
        assert np.abs(rows.var(axis=1) - 1).max() <= 1e-6

    def test_deterministic(self):
        ps = enc_params()
        s = TokenSequence((CLS, 7, 8))
        a = encode(ps, s, layers=2, heads=2)
        b = encode(ps, s, layers=2, heads=2)
        np.testing.assert_array_equal(a.token_reps.data, b.token_reps.data)

    def test_pad_gets_zero_attention(self):
        ps = enc_params()
        ids, mask = pad_batch([TokenSequence((CLS, 4)), TokenSequence((CLS, 4, 5, 6))])
        out = encode_batch(ps, ids, mask, layers=2, heads=2, keep_attention=True)
        for w in out.attn_weights:
            assert (w.data[0, :, :, 2:] == 0).all()

    def test_padding_does_not_change_reps(self):
        ps = enc_params()
        short = TokenSequence((CLS, 4))
        alone = encode(ps, short, layers=2, heads=2)
        ids, mask = pad_batch([short, TokenSequence((CLS, 4, 5, 6, 7))])
        batched = encode_batch(ps, ids, mask, layers=2, heads=2)
        np.testing.assert_allclose(batched.pooled.data[0], alone.pooled.data[0], atol=1e-12)

    def test_id_out_of_range(self):
        with pytest.raises(ContractError):
            encode(enc_params(vocab_size=12), TokenSequence((CLS, 12)), layers=2, heads=2)

    def test_param_count_formula(self):
        for v, d, l, m in [(12, 8, 1, 16), (50, 32, 2, 16), (7, 4, 3, 5)]:
            shapes = encoder_param_shapes("e", v, d, l, m)
            assert sum(int(np.prod(s)) for s in shapes.values()) == encoder_param_count(v, d, l, m)

    def test_pooled_gradient_check(self):
        ps = enc_params(vocab_size=8, d=4, layers=1, max_len=6)
        rng = np.random.default_rng(0)
        c = Tensor(rng.normal(size=(2, 4)))
        ids, mask = pad_batch([TokenSequence((CLS, 3, 4)), TokenSequence((CLS, 5, 6, 7))])

        def f(p):
            out = encode_batch(p, ids, mask, layers=1, heads=2)
            return nx.sum_(nx.tanh(out.pooled) * c)

        assert nx.check_gradients(f, ps, h=1e-5) <= 1e-4
