"""Quickstart: a small synthetic world end to end.

Generates queries, items and a click log, builds the behavior graph, trains
BARL and a two-tower baseline for a couple of epochs, then compares them on
the held-out pairs, split by whether the pair has behavior neighbors.

    python demos/quickstart.py          # a few minutes on one core
"""

from barl.behavior_graph import coverage_stats, ingest_log, pair_neighbors
from barl.datagen import SyntheticConfig, generate
from barl.evaluation import BarlPlusScorer, BarlScorer, BaselineScorer, evaluate
from barl.model import ModelConfig
from barl.text import build_vocab
from barl.training import TrainConfig, train

world = generate(SyntheticConfig(n_queries=1000, n_items=1000, n_pairs=8000, seed=7))
graph = ingest_log(world.clicks)
vocab = build_vocab([p.query for p in world.train] + [p.item for p in world.train])
cfg = ModelConfig(vocab_size=len(vocab))

print(f"{len(world.train)} train / {len(world.test)} test pairs, {graph.n_edges} click edges")
cov = coverage_stats(graph, world.test, cfg.k_neighbors)
print(f"test pairs with no neighbor on either side: {cov.frac_no_neighbors:.1%}")

# what the model sees for one pair besides the two texts
p = world.test[0]
qbn, ibn = pair_neighbors(graph, p.query, p.item_id, cfg.k_neighbors)
print(f"\nquery {p.query!r}\n  clicked items: {qbn.texts}")
print(f"item {p.item!r}\n  queries that clicked it: {ibn.texts}\n")

tc = TrainConfig(model=cfg, epochs=4, seed=0)
barl = train(world.train, graph, vocab, tc, "barl")
tt = train(world.train, graph, vocab, tc, "two_tower")
for e, h in enumerate(barl.history):
    print(f"barl epoch {e}: total loss {h.total:.3f}")

runs = {"two_tower": BaselineScorer("two_tower", tt.params, cfg, vocab, graph),
        "barl": BarlScorer(barl.params, cfg, vocab, graph),
        "barl+": BarlPlusScorer(barl.params, tt.params, cfg, vocab, graph)}
print(f"\n{'model':<10}" + "".join(f"{s:>16}" for s in ("all", "w/ neighbors", "w/o neighbors")))
for name, scorer in runs.items():
    ev = evaluate(scorer, world.test)
    print(f"{name:<10}" + "".join(f"{ev.reports[s].auc:>16.3f}" for s in ("all", "w/ neighbors", "w/o neighbors")))
