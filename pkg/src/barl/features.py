"""Turn labeled pairs into model inputs: tokenization plus neighbor lookup."""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np

from .behavior_graph import BehaviorGraph, pair_neighbors
from .dataset import LabeledPair
from .model import ModelConfig, PairInputs
from .text import TokenSequence, Vocab, tokenize


class Featurizer:
    """Tokenizes texts (memoized) and looks up QBN/IBN in the behavior graph."""

    def __init__(self, vocab: Vocab, cfg: ModelConfig, graph: BehaviorGraph | None = None):
        self.vocab = vocab
        self.cfg = cfg
        self.graph = graph if graph is not None else BehaviorGraph()
        self._tok: dict[str, TokenSequence] = {}

    def tok(self, text: str) -> TokenSequence:
        s = self._tok.get(text)
        if s is None:
            s = tokenize(self.vocab, text, self.cfg.max_len)
            self._tok[text] = s
        return s

    def neighbors(self, pair: LabeledPair):
        return pair_neighbors(self.graph, pair.query, pair.item_id, self.cfg.k_neighbors,
                              self.cfg.exclude_counterpart)

    def inputs(self, pairs: Sequence[LabeledPair]) -> PairInputs:
        qs, its, qbn, ibn = [], [], [], []
        for p in pairs:
            qn, inb = self.neighbors(p)
            qs.append(self.tok(p.query))
            its.append(self.tok(p.item))
            qbn.append([self.tok(t) for t in qn.texts])
            ibn.append([self.tok(t) for t in inb.texts])
        return PairInputs(qs, its, qbn, ibn, [p.query for p in pairs], [p.item_id for p in pairs])

    def labels(self, pairs: Sequence[LabeledPair]) -> np.ndarray:
        return np.array([p.label for p in pairs], dtype=np.float64)
