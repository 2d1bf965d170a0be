"""Session-wide cache of trained models on the default synthetic world.

Several acceptance checks look at the same trained models (the trend,
routing and ablation checks share seeds), so each (kind, seed, variant)
is trained once per pytest session. CPU seconds are recorded per run.
"""

import functools
import time

from barl.behavior_graph import ingest_log
from barl.datagen import SyntheticConfig, generate
from barl.evaluation import BarlPlusScorer, BarlScorer, BaselineScorer, evaluate, variant_config
from barl.model import ModelConfig
from barl.text import build_vocab
from barl.training import TrainConfig, train

CPU_SECONDS: dict[tuple, float] = {}


@functools.lru_cache(maxsize=None)
def default_world():
    w = generate(SyntheticConfig())
    g = ingest_log(w.clicks)
    vocab = build_vocab([p.query for p in w.train] + [p.item for p in w.train], ModelConfig().vocab_size)
    cfg = ModelConfig(vocab_size=len(vocab))
    return w, g, vocab, cfg


@functools.lru_cache(maxsize=None)
def trained(kind: str, seed: int, variant: str = "full"):
    w, g, vocab, cfg = default_world()
    cfg = variant_config(cfg, variant) if kind == "barl" else cfg
    t0 = time.process_time()
    res = train(w.train, g, vocab, TrainConfig(model=cfg, seed=seed), kind)
    CPU_SECONDS[("train", kind, seed, variant)] = time.process_time() - t0
    return res, cfg


@functools.lru_cache(maxsize=None)
def evaluation(kind: str, seed: int, variant: str = "full"):
    """Test-split evaluation; kind "barl+" routes neighborless pairs to the two-tower run of the same seed."""
    w, g, vocab, _ = default_world()
    if kind == "barl+":
        (res, cfg), (base, _) = trained("barl", seed), trained("two_tower", seed)
        scorer = BarlPlusScorer(res.params, base.params, cfg, vocab, g)
    elif kind == "barl":
        res, cfg = trained("barl", seed, variant)
        scorer = BarlScorer(res.params, cfg, vocab, g)
    else:
        res, cfg = trained(kind, seed)
        scorer = BaselineScorer(kind, res.params, cfg, vocab, g)
    t0 = time.process_time()
    ev = evaluate(scorer, w.test)
    CPU_SECONDS[("eval", kind, seed, variant)] = time.process_time() - t0
    return ev
