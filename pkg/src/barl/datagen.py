"""Seeded synthetic search world: labeled pairs plus a correlated click log.

Every query and item has a latent topic. Texts mix topic words with generic
words, so text alone is only partially informative; clicks land mostly on
topic-matching pairs, so behavior neighbors carry extra topic evidence. A
fixed share of test pairs is built from cold-start queries and items that
never appear in the click log.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .behavior_graph import ClickRecord
from .dataset import Dataset, LabeledPair
from .model import ConfigError


@dataclass(frozen=True)
class SyntheticConfig:
    n_topics: int = 8
    n_queries: int = 2000
    n_items: int = 2000
    vocab_pool: int = 400  # distinct words in the world
    generic_words: int = 80  # words shared by all topics
    tokens_per_text: int = 5
    topic_word_prob: float = 0.3
    label_noise: float = 0.1
    match_prob: float = 0.625  # share of sampled pairs whose topics match
    clicks_per_pair: float = 3.0
    items_clicked_per_query: int = 6
    click_noise: float = 0.05
    no_neighbor_fraction: float = 0.063
    cold_fraction: float = 0.05  # queries/items held out of the click log
    n_pairs: int = 25000
    train_fraction: float = 0.8
    valid_fraction: float = 0.1
    test_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for name in ("n_topics", "n_queries", "n_items", "vocab_pool", "tokens_per_text",
                     "items_clicked_per_query", "n_pairs"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not 0 <= self.generic_words < self.vocab_pool:
            raise ConfigError("generic_words must be in [0, vocab_pool)")
        if (self.vocab_pool - self.generic_words) < self.n_topics:
            raise ConfigError("vocab_pool leaves no words for some topic")
        if not 0 <= self.label_noise < 0.5:
            raise ConfigError("label_noise must lie in [0, 0.5)")
        if not 0 <= self.no_neighbor_fraction < 1:
            raise ConfigError("no_neighbor_fraction must lie in [0, 1)")
        for name in ("topic_word_prob", "match_prob", "click_noise", "cold_fraction"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.clicks_per_pair < 1:
            raise ConfigError("clicks_per_pair must be >= 1")
        fr = (self.train_fraction, self.valid_fraction, self.test_fraction)
        if min(fr) < 0 or abs(sum(fr) - 1.0) > 1e-9:
            raise ConfigError("train/valid/test fractions must be non-negative and sum to 1")

    def replace(self, **kw) -> SyntheticConfig:
        return dataclasses.replace(self, **kw)

    @property
    def split_sizes(self) -> tuple[int, int, int]:
        n_train = round(self.n_pairs * self.train_fraction)
        n_valid = round(self.n_pairs * self.valid_fraction)
        return n_train, n_valid, self.n_pairs - n_train - n_valid


class World(NamedTuple):
    train: Dataset
    valid: Dataset
    test: Dataset
    clicks: list[ClickRecord]
    query_topics: dict[str, int] = {}  # query_id -> latent topic
    item_topics: dict[str, int] = {}  # item_id -> latent topic


def _texts(rng, topics: np.ndarray, cfg: SyntheticConfig, topic_words: list[np.ndarray],
           generic: np.ndarray, words: list[str]) -> list[str]:
    out, seen = [], set()
    for t in topics:
        while True:
            toks = []
            for _ in range(cfg.tokens_per_text):
                if len(generic) == 0 or rng.random() < cfg.topic_word_prob:
                    toks.append(words[rng.choice(topic_words[t])])
                else:
                    toks.append(words[rng.choice(generic)])
            text = " ".join(toks)
            if text not in seen:
                seen.add(text)
                out.append(text)
                break
    return out


def generate(cfg: SyntheticConfig | None = None) -> World:
    """Build the world. Deterministic for a given config (seed included)."""
    cfg = cfg or SyntheticConfig()
    rng = np.random.default_rng(cfg.seed)
    n_train, n_valid, n_test = cfg.split_sizes
    n_cold_pairs = round(cfg.no_neighbor_fraction * n_test)
    n_cold_q = round(cfg.cold_fraction * cfg.n_queries) if n_cold_pairs else 0
    n_cold_i = round(cfg.cold_fraction * cfg.n_items) if n_cold_pairs else 0
    if n_cold_pairs > n_cold_q * n_cold_i:
        raise ConfigError(f"cannot draw {n_cold_pairs} neighborless test pairs from "
                          f"{n_cold_q} cold queries x {n_cold_i} cold items")
    if n_cold_q >= cfg.n_queries or n_cold_i >= cfg.n_items:
        raise ConfigError("cold_fraction leaves no logged queries or items")

    words = [f"w{j:04d}" for j in range(cfg.vocab_pool)]
    perm = rng.permutation(cfg.vocab_pool)
    generic = perm[: cfg.generic_words]
    topic_words = np.array_split(perm[cfg.generic_words:], cfg.n_topics)

    q_topic = rng.integers(cfg.n_topics, size=cfg.n_queries)
    i_topic = rng.integers(cfg.n_topics, size=cfg.n_items)
    q_text = _texts(rng, q_topic, cfg, topic_words, generic, words)
    i_text = _texts(rng, i_topic, cfg, topic_words, generic, words)
    q_ids = [f"q{j:05d}" for j in range(cfg.n_queries)]
    i_ids = [f"i{j:05d}" for j in range(cfg.n_items)]

    # the last n_cold queries/items never reach the click log
    warm_q = np.arange(cfg.n_queries - n_cold_q)
    warm_i = np.arange(cfg.n_items - n_cold_i)
    cold_q = np.arange(cfg.n_queries - n_cold_q, cfg.n_queries)
    cold_i = np.arange(cfg.n_items - n_cold_i, cfg.n_items)
    warm_by_topic = [warm_i[i_topic[warm_i] == t] for t in range(cfg.n_topics)]

    clicks: dict[tuple[int, int], int] = {}
    for q in warm_q:
        same = warm_by_topic[q_topic[q]]
        other = warm_i[i_topic[warm_i] != q_topic[q]]
        pool = same if len(same) else warm_i
        m = min(cfg.items_clicked_per_query, len(pool))
        for i in rng.choice(pool, size=m, replace=False):
            n_events = 1 + rng.poisson(cfg.clicks_per_pair - 1.0)
            for _ in range(n_events):
                tgt = i
                if len(other) and rng.random() < cfg.click_noise:
                    tgt = rng.choice(other)
                clicks[(int(q), int(tgt))] = clicks.get((int(q), int(tgt)), 0) + 1
    click_log = [ClickRecord(q_text[q], i_ids[i], i_text[i], w) for (q, i), w in sorted(clicks.items())]

    def sample_pairs(n: int, q_pool: np.ndarray, i_pool: np.ndarray, taken: set) -> list[LabeledPair]:
        by_topic = [i_pool[i_topic[i_pool] == t] for t in range(cfg.n_topics)]
        out = []
        while len(out) < n:
            q = int(rng.choice(q_pool))
            same = by_topic[q_topic[q]]
            diff = i_pool[i_topic[i_pool] != q_topic[q]]
            want_match = rng.random() < cfg.match_prob
            cands = same if (want_match and len(same)) or not len(diff) else diff
            if not len(cands):
                continue
            i = int(rng.choice(cands))
            if (q, i) in taken:
                continue
            taken.add((q, i))
            rel = int(q_topic[q] == i_topic[i])
            label = 1 - rel if rng.random() < cfg.label_noise else rel
            out.append(LabeledPair(q_ids[q], q_text[q], i_ids[i], i_text[i], label))
        return out

    taken: set = set()
    train = sample_pairs(n_train, warm_q, warm_i, taken)
    valid = sample_pairs(n_valid, warm_q, warm_i, taken)
    test = sample_pairs(n_test - n_cold_pairs, warm_q, warm_i, taken)
    if n_cold_pairs:
        test += sample_pairs(n_cold_pairs, cold_q, cold_i, taken)
        order = rng.permutation(len(test))
        test = [test[j] for j in order]
    return World(Dataset(train), Dataset(valid), Dataset(test), click_log,
                 {q_ids[j]: int(t) for j, t in enumerate(q_topic)}, {i_ids[j]: int(t) for j, t in enumerate(i_topic)})


class DatasetStats(NamedTuple):
    n_sample: int
    n_query: int
    n_item: int
    n_good: int
    n_bad: int

    COLUMNS = ("# Sample", "# Query", "# Item", "# Good", "# Bad")

    def to_json(self) -> dict:
        return dict(zip(self.COLUMNS, self))


def describe(ds: Dataset) -> DatasetStats:
    """Counts in the column order of the human-annotated dataset summary."""
    if not ds:
        raise ValueError("describe needs a non-empty dataset")
    good = sum(p.label for p in ds)
    return DatasetStats(len(ds), len({p.query_id for p in ds}), len({p.item_id for p in ds}),
                        good, len(ds) - good)
