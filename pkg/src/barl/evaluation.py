"""Metrics, neighbor-aware evaluation splits, the ablation harness and latency timing."""

from __future__ import annotations

import json
import statistics
import time
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .behavior_graph import BehaviorGraph
from .dataset import Dataset, LabeledPair
from .features import Featurizer
from .model import ModelConfig, baseline_batch, forward_batch, score_plus_batch
from .numerics import ParamSet
from .text import Vocab

REPORT_VERSION = 1
SPLITS = ("all", "w/ neighbors", "w/o neighbors")
VARIANTS = {
    "full": None,
    "w/o QBN": "use_qbn",
    "w/o IBN": "use_ibn",
    "w/o NCA": "use_nca",
    "w/o TCA": "use_tca",
    "w/o QNTC": "use_qntc",
    "w/o INTC": "use_intc",
    "w/o Mutual": "use_mutual",
}


class UndefinedMetricError(ValueError):
    pass


def auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative; ties count half.

    Counting is done in integers (twice the Mann-Whitney U) and divided once.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative label")
    order = np.argsort(s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    twice_u = 0
    neg_below = 0
    i = 0
    n = len(s)
    while i < n:
        j = i
        while j < n and s_sorted[j] == s_sorted[i]:
            j += 1
        grp = y_sorted[i:j]
        pos_g = int(grp.sum())
        neg_g = (j - i) - pos_g
        twice_u += pos_g * (2 * neg_below + neg_g)
        neg_below += neg_g
        i = j
    return twice_u / (2 * n_pos * n_neg)


class ClassificationMetrics(NamedTuple):
    f1: float
    fnr: float
    precision: float
    recall: float


def classification_metrics(scores, labels, threshold: float = 0.5) -> ClassificationMetrics:
    """Predict Good iff score >= threshold; Good (label 1) is the positive class."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    pred = s >= threshold
    tp = int((pred & (y == 1)).sum())
    fp = int((pred & (y == 0)).sum())
    fn = int((~pred & (y == 1)).sum())
    if tp + fn == 0:
        raise UndefinedMetricError("FNR is undefined without positive labels")
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn)
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return ClassificationMetrics(f1, fn / (tp + fn), precision, recall)


@dataclass
class MetricsReport:
    split: str
    n_examples: int
    auc: float | None
    f1: float
    fnr: float | None
    threshold: float = 0.5

    def to_json(self) -> dict:
        return {"split": self.split, "n_examples": self.n_examples, "auc": self.auc,
                "f1": self.f1, "fnr": self.fnr, "threshold": self.threshold}


def metrics_report(split: str, scores, labels, threshold: float = 0.5) -> MetricsReport:
    try:
        a = auc(scores, labels)
    except UndefinedMetricError:
        a = None
    try:
        cm = classification_metrics(scores, labels, threshold)
        f1, fnr = cm.f1, cm.fnr
    except UndefinedMetricError:
        f1, fnr = 0.0, None
    return MetricsReport(split, len(scores), a, f1, fnr, threshold)


# ---------------------------------------------------------------------------
# scorers


class ScoreResult(NamedTuple):
    scores: np.ndarray
    used_fallback: np.ndarray
    has_neighbors: np.ndarray


class Scorer:
    """Scores labeled pairs in batches; neighbor lookup happens inside."""

    def __init__(self, cfg: ModelConfig, vocab: Vocab, graph: BehaviorGraph, batch_size: int = 256):
        self.cfg = cfg
        self.feat = Featurizer(vocab, cfg, graph)
        self.batch_size = batch_size

    def _score_inputs(self, inputs):
        raise NotImplementedError

    def score_pairs(self, pairs) -> ScoreResult:
        scores, fb, has = [], [], []
        for lo in range(0, len(pairs), self.batch_size):
            inputs = self.feat.inputs(pairs[lo: lo + self.batch_size])
            s, f = self._score_inputs(inputs)
            scores.append(s)
            fb.append(f)
            has.append(inputs.has_neighbors())
        return ScoreResult(np.concatenate(scores), np.concatenate(fb), np.concatenate(has))


class BarlScorer(Scorer):
    def __init__(self, params: ParamSet, cfg, vocab, graph, batch_size: int = 256):
        super().__init__(cfg, vocab, graph, batch_size)
        self.params = params

    def _score_inputs(self, inputs):
        out = forward_batch(self.params, self.cfg, inputs)
        return out.final.data.copy(), np.zeros(len(inputs), dtype=bool)


class BarlPlusScorer(Scorer):
    def __init__(self, params: ParamSet, baseline_params: ParamSet, cfg, vocab, graph,
                 baseline_kind: str = "two_tower", batch_size: int = 256):
        super().__init__(cfg, vocab, graph, batch_size)
        self.params, self.baseline_params, self.kind = params, baseline_params, baseline_kind

    def _score_inputs(self, inputs):
        final, fallback, _ = score_plus_batch(self.params, self.baseline_params, self.cfg, inputs, self.kind)
        return final, fallback


class BaselineScorer(Scorer):
    def __init__(self, kind: str, params: ParamSet, cfg, vocab, graph, batch_size: int = 256):
        super().__init__(cfg, vocab, graph, batch_size)
        self.kind, self.params = kind, params

    def _score_inputs(self, inputs):
        s = baseline_batch(self.kind, self.params, self.cfg, inputs.queries, inputs.items)
        return s.data.copy(), np.zeros(len(inputs), dtype=bool)


@dataclass
class Evaluation:
    reports: dict[str, MetricsReport]
    scores: np.ndarray
    used_fallback: np.ndarray
    has_neighbors: np.ndarray

    def to_json(self) -> dict:
        return {"version": REPORT_VERSION, "splits": {k: v.to_json() for k, v in self.reports.items()},
                "n_fallback": int(self.used_fallback.sum())}


def evaluate(scorer: Scorer, ds: Dataset, threshold: float = 0.5) -> Evaluation:
    """Score every pair once; report "all", "w/ neighbors" and "w/o neighbors".

    Empty splits are omitted; a single-class split reports ``auc = None``.
    """
    res = scorer.score_pairs(list(ds))
    y = np.array([p.label for p in ds])
    reports = {}
    for name, sel in (("all", np.ones(len(ds), bool)), ("w/ neighbors", res.has_neighbors),
                      ("w/o neighbors", ~res.has_neighbors)):
        if sel.any():
            reports[name] = metrics_report(name, res.scores[sel], y[sel], threshold)
    return Evaluation(reports, res.scores, res.used_fallback, res.has_neighbors)


# ---------------------------------------------------------------------------
# ablations


@dataclass
class AblationTable:
    rows: dict[str, MetricsReport]  # variant -> mean metrics on the "all" split
    per_seed: dict[str, list[MetricsReport]]
    param_counts: dict[str, int]

    def to_csv(self) -> str:
        lines = ["variant,auc,f1,fnr"]
        for name, r in self.rows.items():
            lines.append(f"{name},{r.auc!r},{r.f1!r},{r.fnr!r}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> dict:
        return {"version": REPORT_VERSION,
                "variants": {k: {**v.to_json(), "params": self.param_counts[k],
                                 "per_seed": [r.to_json() for r in self.per_seed[k]]}
                             for k, v in self.rows.items()}}


def variant_config(base: ModelConfig, variant: str) -> ModelConfig:
    flag = VARIANTS[variant]
    return base if flag is None else base.replace(**{flag: False})


def _mean_report(reps: list[MetricsReport]) -> MetricsReport:
    def avg(vals):
        vals = [v for v in vals if v is not None]
        return statistics.fmean(vals) if vals else None

    return MetricsReport("all", reps[0].n_examples, avg([r.auc for r in reps]),
                         avg([r.f1 for r in reps]), avg([r.fnr for r in reps]), reps[0].threshold)


def run_ablations(ds_train: Dataset, ds_test: Dataset, g: BehaviorGraph, vocab: Vocab, train_cfg,
                  seeds, variants=None, progress=None) -> AblationTable:
    """Train every variant from scratch for every seed (identical data order) and
    average its test metrics."""
    from .model import param_count
    from .training import train

    seeds = list(seeds)
    if not seeds:
        raise ValueError("run_ablations needs at least one seed")
    names = list(variants or VARIANTS)
    per_seed: dict[str, list[MetricsReport]] = {n: [] for n in names}
    counts = {}
    for name in names:
        cfg = variant_config(train_cfg.model, name)
        counts[name] = param_count(cfg)
        for seed in seeds:
            res = train(ds_train, g, vocab, train_cfg.replace(model=cfg, seed=seed, checkpoint_path=None))
            ev = evaluate(BarlScorer(res.params, cfg, vocab, g), ds_test)
            per_seed[name].append(ev.reports["all"])
            if progress:
                progress(name, seed, ev.reports["all"])
    return AblationTable({n: _mean_report(per_seed[n]) for n in names}, per_seed, counts)


# ---------------------------------------------------------------------------
# latency


@dataclass
class LatencyReport:
    mean_ms: float
    p50_ms: float
    p99_ms: float
    n_pairs: int
    threads: int = 1
    samples_ms: list[float] | None = None

    def to_json(self) -> dict:
        return {"version": REPORT_VERSION, "mean_ms": self.mean_ms, "p50_ms": self.p50_ms,
                "p99_ms": self.p99_ms, "n_pairs": self.n_pairs, "threads": self.threads}


def latency_bench(scorer: Scorer, ds: Dataset, n_warmup: int = 20, n_measure: int = 200) -> LatencyReport:
    """Single-pair wall-clock latency, neighbor lookup and tokenization included."""
    if n_measure < 100:
        raise ValueError("n_measure must be >= 100")
    pairs: list[LabeledPair] = list(ds)
    if not pairs:
        raise ValueError("latency_bench needs a non-empty dataset")
    for j in range(n_warmup):
        scorer.score_pairs([pairs[j % len(pairs)]])
    samples = []
    for j in range(n_measure):
        p = pairs[j % len(pairs)]
        t0 = time.perf_counter()
        scorer.score_pairs([p])
        samples.append((time.perf_counter() - t0) * 1e3)
    arr = np.array(samples)
    return LatencyReport(float(arr.mean()), float(np.percentile(arr, 50)), float(np.percentile(arr, 99)),
                         n_measure, 1, samples)


def dumps_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"
