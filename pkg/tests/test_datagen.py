import numpy as np
import pytest

from barl.behavior_graph import coverage_stats, ingest_log
from barl.dataset import Dataset, LabeledPair, dumps_jsonl
from barl.datagen import DatasetStats, SyntheticConfig, describe, generate
from barl.model import ConfigError

SMALL = SyntheticConfig(n_queries=300, n_items=300, n_pairs=2000, seed=1)


class TestConfig:
    def test_fractions_must_sum_to_one(self):
        with pytest.raises(ConfigError):
            SyntheticConfig(train_fraction=0.5, valid_fraction=0.1, test_fraction=0.1)

    def test_label_noise_range(self):
        with pytest.raises(ConfigError):
            SyntheticConfig(label_noise=0.5)

    def test_counts_positive(self):
        with pytest.raises(ConfigError):
            SyntheticConfig(n_topics=0)

    def test_infeasible_withholding(self):
        # 2 cold queries x 2 cold items cannot host round(0.5 * 200) neighborless test pairs
        with pytest.raises(ConfigError):
            generate(SMALL.replace(n_queries=40, n_items=40, no_neighbor_fraction=0.5))

    def test_split_sizes(self):
        assert SyntheticConfig().split_sizes == (20000, 2500, 2500)


class TestGenerate:
    def test_deterministic_bytes(self):
        a, b = generate(SMALL), generate(SMALL)
        for x, y in zip(a[:3], b[:3]):
            assert dumps_jsonl(p.to_json() for p in x) == dumps_jsonl(p.to_json() for p in y)
        assert a.clicks == b.clicks

    def test_seed_changes_world(self):
        assert generate(SMALL).train != generate(SMALL.replace(seed=2)).train

    def test_one_topic_no_noise_all_good(self):
        w = generate(SMALL.replace(n_topics=1, label_noise=0.0))
        assert all(p.label == 1 for split in w[:3] for p in split)

    def test_splits_disjoint(self):
        w = generate(SMALL)
        keys = [{(p.query_id, p.item_id) for p in split} for split in w[:3]]
        assert not (keys[0] & keys[1] or keys[0] & keys[2] or keys[1] & keys[2])
        assert [len(s) for s in w[:3]] == list(SMALL.split_sizes)

    def test_coverage_target_small(self):
        w = generate(SMALL)
        frac = coverage_stats(ingest_log(w.clicks), w.test, 5).frac_no_neighbors
        assert frac == round(0.063 * len(w.test)) / len(w.test)

    def test_no_withholding(self):
        w = generate(SMALL.replace(no_neighbor_fraction=0.0))
        assert coverage_stats(ingest_log(w.clicks), w.test, 5).frac_no_neighbors == 0.0

    def test_positive_share(self):
        w = generate(SMALL)
        share = np.mean([p.label for p in w.train])
        assert 0.5 < share < 0.7

    @pytest.mark.parametrize("seed", range(5))
    def test_matching_pairs_get_more_clicks(self, seed):
        w = generate(SMALL.replace(seed=seed))
        text_topic = {}
        for split in w[:3]:
            for p in split:
                text_topic[p.query] = w.query_topics[p.query_id]
        n_q = np.bincount([text_topic[t] for t in text_topic], minlength=SMALL.n_topics)
        n_i = np.bincount(list(w.item_topics.values()), minlength=SMALL.n_topics)
        match_pairs = float(n_q @ n_i)
        other_pairs = float(n_q.sum() * n_i.sum()) - match_pairs
        match = other = 0
        for r in w.clicks:
            if r.query_text not in text_topic:
                continue
            if text_topic[r.query_text] == w.item_topics[r.item_id]:
                match += r.weight
            else:
                other += r.weight
        assert other > 0  # click noise exists
        assert match / match_pairs > other / other_pairs


class TestDescribe:
    def test_counts(self):
        ds = Dataset([LabeledPair("q1", "a", "i1", "x", 1), LabeledPair("q1", "a", "i2", "y", 1),
                      LabeledPair("q2", "b", "i1", "x", 0)])
        assert describe(ds) == DatasetStats(3, 2, 2, 2, 1)

    def test_order_invariant(self):
        ds = generate(SMALL).test
        assert describe(ds) == describe(Dataset(list(reversed(ds))))

    def test_partition(self):
        st = describe(generate(SMALL).train)
        assert st.n_good + st.n_bad == st.n_sample

    def test_columns(self):
        assert list(describe(generate(SMALL).valid).to_json()) == ["# Sample", "# Query", "# Item", "# Good", "# Bad"]

    def test_empty(self):
        with pytest.raises(ValueError):
            describe(Dataset())
