import numpy as np
import pytest

import reference
from barl import numerics as nx
from barl.model import (ABLATION_FLAGS, ConfigError, ModelConfig, PairInputs, baseline_batch,
                        forward_baseline, forward_batch, forward_score, forward_score_plus, init_baseline_params,
                        init_params, nca_fuse, nca_param_count, param_count, score_plus_batch, tca_fuse)
from barl.numerics import ContractError, Tensor
from barl.objectives import bce_t
from barl.text import CLS, TokenSequence

CFG = ModelConfig(vocab_size=20, hidden_dim=8, layers=2, heads=2, max_len=8, k_neighbors=3)


def seq(*ids):
    return TokenSequence((CLS,) + ids)


Q, I = seq(4, 5, 6), seq(7, 8)
QBN = [seq(7, 9), seq(10), seq(11, 12, 13)]
IBN = [seq(4, 5), seq(14)]


def jitter(ps, seed=1, scale=0.3):
    """Move every tensor off its structured init so biases and gains matter."""
    rng = np.random.default_rng(seed)
    for _, t in ps.items():
        t.data += scale * rng.normal(size=t.shape)
    return ps


class TestConfig:
    def test_zero_hidden_dim(self):
        with pytest.raises(ConfigError, match="hidden_dim"):
            ModelConfig(hidden_dim=0)

    def test_heads_must_divide(self):
        with pytest.raises(ConfigError):
            ModelConfig(hidden_dim=10, heads=3)

    def test_json_round_trip(self):
        cfg = CFG.replace(use_nca=False, temperature=0.3)
        assert ModelConfig.from_json(cfg.to_json()) == cfg

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="bogus"):
            ModelConfig.from_json({"bogus": 1})


class TestInit:
    def test_deterministic(self):
        assert init_params(CFG, 3).checksum() == init_params(CFG, 3).checksum()
        assert init_params(CFG, 3).checksum() != init_params(CFG, 4).checksum()

    def test_count_matches_tensors(self):
        for flags in [{}, {"use_nca": False}, {"use_qbn": False, "use_tca": False}, {"shared_encoder": False}]:
            cfg = CFG.replace(**flags)
            assert init_params(cfg, 0).count() == param_count(cfg)

    def test_nca_delta(self):
        # disabling NCA removes the NCA block on both sides and nothing else
        d = CFG.hidden_dim
        assert param_count(CFG) - param_count(CFG.replace(use_nca=False)) == 2 * nca_param_count(d)
        assert nca_param_count(d) == 3 * d * d + 2 * d

    def test_toggle_keeps_other_tensors(self):
        full, ablated = init_params(CFG, 5), init_params(CFG.replace(use_nca=False), 5)
        for name, t in ablated.items():
            np.testing.assert_array_equal(t.data, full[name].data)


class TestFusionBlocks:
    def setup_method(self):
        self.ps = jitter(init_params(CFG, 0))
        self.rng = np.random.default_rng(2)

    def test_nca_no_neighbors_is_identity(self):
        t = Tensor(self.rng.normal(size=(1, 8)))
        assert nca_fuse(self.ps, t, None) is t
        assert nca_fuse(self.ps, t, np.zeros((0, 8))) is t

    def test_nca_identical_neighbors(self):
        # equal keys -> uniform weights -> attended vector is the shared projected value
        t = Tensor(self.rng.normal(size=(1, 8)))
        n = self.rng.normal(size=(1, 8))
        one = nca_fuse(self.ps, t, Tensor(n))
        three = nca_fuse(self.ps, t, Tensor(np.repeat(n, 3, axis=0)))
        np.testing.assert_allclose(three.data, one.data, atol=1e-12)

    def test_nca_width_mismatch(self):
        with pytest.raises(nx.DimensionError):
            nca_fuse(self.ps, Tensor(np.zeros((1, 8))), Tensor(np.zeros((2, 6))))

    def test_tca_no_neighbors_is_mean(self):
        tok = Tensor(self.rng.normal(size=(4, 8)))
        np.testing.assert_allclose(tca_fuse(self.ps, tok, None).data[0], tok.data.mean(axis=0), atol=1e-15)

    def test_tca_single_neighbor_token(self):
        # one key -> every query row attends to it with weight 1
        tok = Tensor(self.rng.normal(size=(3, 8)))
        nb = self.rng.normal(size=(1, 8))
        out = tca_fuse(self.ps, tok, Tensor(nb))
        np.testing.assert_allclose(out.data[0], (nb @ self.ps["q.tca.wv"].data)[0], atol=1e-12)


class TestForward:
    def test_matches_reference(self):
        ps = jitter(init_params(CFG, 7))
        score, _ = forward_score(ps, CFG, Q, I, QBN, IBN)
        sq, si, final = reference.score(ps, CFG, Q.ids, I.ids, [s.ids for s in QBN], [s.ids for s in IBN])
        assert abs(score.score_q - sq) <= 1e-10
        assert abs(score.score_i - si) <= 1e-10
        assert abs(score.final - final) <= 1e-10

    @pytest.mark.parametrize("flags", [{"use_nca": False}, {"use_tca": False}, {"shared_encoder": False},
                                       {"use_qbn": False}])
    def test_matches_reference_variants(self, flags):
        cfg = CFG.replace(**flags)
        ps = jitter(init_params(cfg, 7))
        score, _ = forward_score(ps, cfg, Q, I, QBN, IBN)
        _, _, final = reference.score(ps, cfg, Q.ids, I.ids, [s.ids for s in QBN], [s.ids for s in IBN])
        assert abs(score.final - final) <= 1e-10

    def test_batch_equals_single(self):
        ps = jitter(init_params(CFG, 1))
        pairs = [(Q, I, QBN, IBN), (seq(4), seq(9, 9, 9), [], IBN[:1]), (seq(5, 6), I, QBN[:2], [])]
        out = forward_batch(ps, CFG, PairInputs(*[list(x) for x in zip(*pairs)]))
        for b, p in enumerate(pairs):
            single, _ = forward_score(ps, CFG, *p)
            assert abs(out.final.data[b] - single.final) <= 1e-12

    @pytest.mark.parametrize("seed", range(5))
    def test_scores_in_unit_interval(self, seed):
        s, _ = forward_score(jitter(init_params(CFG, seed), seed=seed), CFG, Q, I, QBN, IBN)
        for v in (s.score_q, s.score_i, s.final):
            assert 0 < v < 1

    def test_mean_combiner(self):
        s, _ = forward_score(init_params(CFG, 0), CFG, Q, I, QBN, IBN)
        assert s.final == pytest.approx((s.score_q + s.score_i) / 2, abs=1e-15)

    def test_too_many_neighbors(self):
        with pytest.raises(ContractError):
            forward_score(init_params(CFG, 0), CFG, Q, I, QBN + [seq(4)], IBN)

    @pytest.mark.parametrize("flag", ["use_qbn", "use_ibn"])
    def test_flag_equals_empty_neighbors(self, flag):
        ablated = CFG.replace(**{flag: False})
        a, _ = forward_score(init_params(ablated, 11), ablated, Q, I, QBN, IBN)
        qbn, ibn = ([], IBN) if flag == "use_qbn" else (QBN, [])
        b, _ = forward_score(init_params(CFG, 11), CFG, Q, I, qbn, ibn)
        assert a == b

    @pytest.mark.parametrize("flag", ["use_nca", "use_tca"])
    def test_fusion_flag_equals_skipped_fusion(self, flag):
        ablated = CFG.replace(**{flag: False})
        a, (qs, _) = forward_score(init_params(ablated, 11), ablated, Q, I, QBN, IBN)
        # full parameters with the block skipped: the extra tensors are simply unused
        b, _ = forward_score(init_params(CFG, 11), ablated, Q, I, QBN, IBN)
        assert a == b
        attr = "nca" if flag == "use_nca" else "tca"
        np.testing.assert_array_equal(getattr(qs, attr).data, qs.target.data)

    @pytest.mark.parametrize("flag", ["use_qntc", "use_intc", "use_mutual"])
    def test_loss_flags_leave_forward_unchanged(self, flag):
        ablated = CFG.replace(**{flag: False})
        a, _ = forward_score(init_params(ablated, 2), ablated, Q, I, QBN, IBN)
        b, _ = forward_score(init_params(CFG, 2), CFG, Q, I, QBN, IBN)
        assert a == b

    def test_every_flag_is_covered(self):
        assert set(ABLATION_FLAGS) == {"use_qbn", "use_ibn", "use_nca", "use_tca", "use_qntc", "use_intc",
                                       "use_mutual"}

    def test_end_to_end_gradient(self):
        cfg = ModelConfig(vocab_size=16, hidden_dim=4, layers=1, heads=2, max_len=5, k_neighbors=2)
        ps = jitter(init_params(cfg, 3), scale=0.1)
        inputs = PairInputs([seq(4, 5), seq(6)], [seq(7), seq(8, 9)], [[seq(10)], []], [[seq(11), seq(4)], []])
        labels = np.array([1, 0])

        def f(p):
            return bce_t(forward_batch(p, cfg, inputs).final, labels)

        assert nx.check_gradients(f, ps, h=1e-5) <= 1e-4


class TestBaselines:
    def test_two_tower_identical_texts(self):
        ps = jitter(init_baseline_params("two_tower", CFG, 0))
        s = forward_baseline("two_tower", ps, CFG, Q, Q)
        assert s == pytest.approx(1 / (1 + np.exp(-ps["tt.scale"].data[0])), abs=1e-12)

    def test_two_tower_symmetric(self):
        ps = jitter(init_baseline_params("two_tower", CFG, 0))
        assert forward_baseline("two_tower", ps, CFG, Q, I) == pytest.approx(
            forward_baseline("two_tower", ps, CFG, I, Q), abs=1e-15)

    def test_two_tower_reference(self):
        ps = jitter(init_baseline_params("two_tower", CFG, 4))
        assert forward_baseline("two_tower", ps, CFG, Q, I) == pytest.approx(
            reference.two_tower(ps, CFG, Q.ids, I.ids), abs=1e-10)

    def test_cross_encoder_reference(self):
        ps = jitter(init_baseline_params("cross_encoder", CFG, 4))
        assert forward_baseline("cross_encoder", ps, CFG, Q, I) == pytest.approx(
            reference.cross_encoder(ps, CFG, Q.ids, I.ids), abs=1e-10)

    def test_cross_encoder_truncates(self):
        ps = init_baseline_params("cross_encoder", CFG, 0)
        long = seq(*range(3, 10))
        s = forward_baseline("cross_encoder", ps, CFG, long, long)
        assert 0 < s < 1

    def test_batch_equals_single(self):
        for kind in ("two_tower", "cross_encoder"):
            ps = jitter(init_baseline_params(kind, CFG, 2))
            batch = baseline_batch(kind, ps, CFG, [Q, seq(9)], [I, seq(4, 5, 6, 7)])
            assert batch.data[1] == pytest.approx(forward_baseline(kind, ps, CFG, seq(9), seq(4, 5, 6, 7)),
                                                  abs=1e-12)

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            init_baseline_params("bm25", CFG, 0)


class TestRouting:
    def setup_method(self):
        self.barl = init_params(CFG, 0, "v1")
        self.base = init_baseline_params("two_tower", CFG, 0, "v1")

    def test_no_neighbors_routes_to_baseline(self):
        s = forward_score_plus(self.barl, self.base, CFG, Q, I, [], [])
        assert s.used_fallback
        assert s.final == forward_baseline("two_tower", self.base, CFG, Q, I)

    @pytest.mark.parametrize("qbn,ibn", [(QBN, []), ([], IBN), (QBN, IBN)])
    def test_any_neighbor_keeps_barl(self, qbn, ibn):
        s = forward_score_plus(self.barl, self.base, CFG, Q, I, qbn, ibn)
        ref, _ = forward_score(self.barl, CFG, Q, I, qbn, ibn)
        assert not s.used_fallback and s.final == ref.final

    def test_batch_routing(self):
        inputs = PairInputs([Q, Q, Q], [I, I, I], [QBN, [], []], [[], IBN, []])
        final, fallback, _ = score_plus_batch(self.barl, self.base, CFG, inputs)
        assert list(fallback) == [False, False, True]
        assert final[2] == pytest.approx(forward_baseline("two_tower", self.base, CFG, Q, I), abs=1e-12)

    def test_vocab_mismatch(self):
        other = init_baseline_params("two_tower", CFG, 0, "v2")
        with pytest.raises(ContractError, match="vocabulary"):
            forward_score_plus(self.barl, other, CFG, Q, I, QBN, IBN)
