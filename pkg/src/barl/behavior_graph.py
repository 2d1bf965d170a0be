"""Click-log ingestion and behavior-neighbor mining.

A click log is folded into a weighted bipartite query/item graph. A query's
behavior neighbors are the items most clicked under it; an item's behavior
neighbors are the queries that clicked it most.
"""

from __future__ import annotations

import json
from collections import defaultdict
from collections.abc import Iterable, Iterator
from dataclasses import dataclass, field

from .dataset import Dataset, atomic_write, dumps_jsonl

GRAPH_FORMAT = {"format": "bgraph", "version": 1}


class LogParseError(ValueError):
    pass


@dataclass(frozen=True)
class ClickRecord:
    query_text: str
    item_id: str
    item_text: str
    weight: int = 1

    def __post_init__(self):
        if not self.query_text or not self.item_id:
            raise ValueError("query_text and item_id must be non-empty")
        if isinstance(self.weight, bool) or not isinstance(self.weight, int) or self.weight < 1:
            raise ValueError(f"weight must be a positive integer, got {self.weight!r}")


@dataclass
class BehaviorGraph:
    query_index: dict[str, list[tuple[str, int]]] = field(default_factory=dict)
    item_index: dict[str, tuple[str, list[tuple[str, int]]]] = field(default_factory=dict)

    @property
    def n_edges(self) -> int:
        return sum(len(v) for v in self.query_index.values())

    def edges(self) -> Iterator[tuple[str, str, str, int]]:
        for q in sorted(self.query_index):
            for i, w in self.query_index[q]:
                yield q, i, self.item_index[i][0], w

    def item_text(self, item_id: str) -> str:
        return self.item_index[item_id][0]

    def __eq__(self, other):
        if not isinstance(other, BehaviorGraph):
            return NotImplemented
        return self.query_index == other.query_index and self.item_index == other.item_index


@dataclass(frozen=True)
class NeighborSet:
    owner: str
    neighbors: tuple[tuple[str, int], ...] = ()

    def __len__(self):
        return len(self.neighbors)

    @property
    def texts(self) -> list[str]:
        return [t for t, _ in self.neighbors]


@dataclass(frozen=True)
class CoverageReport:
    n_pairs: int
    frac_no_neighbors: float
    frac_query_side: float  # pairs whose query has >= 1 neighbor
    frac_item_side: float  # pairs whose item has >= 1 neighbor
    frac_query_only: float
    frac_item_only: float
    frac_both: float

    def to_json(self) -> dict:
        return dict(self.__dict__)


def parse_click_line(line: str, lineno: int) -> ClickRecord:
    try:
        obj = json.loads(line)
        if not isinstance(obj, dict):
            raise ValueError("record is not an object")
        return ClickRecord(str(obj["query"]), str(obj["item_id"]), str(obj["item_text"]),
                           obj.get("weight", 1))
    except (ValueError, KeyError, TypeError) as exc:
        raise LogParseError(f"line {lineno}: malformed click record ({exc})") from exc


def read_click_log(lines: Iterable[str]) -> Iterator[ClickRecord]:
    """Parse JSON Lines click records; blank lines are skipped."""
    for lineno, line in enumerate(lines, 1):
        if line.strip():
            yield parse_click_line(line, lineno)


def dumps_click_log(records: Iterable[ClickRecord]) -> str:
    """JSON Lines in the format :func:`read_click_log` accepts."""
    return "".join(json.dumps({"query": r.query_text, "item_id": r.item_id, "item_text": r.item_text,
                               "weight": r.weight}, sort_keys=True) + "\n" for r in records)


def ingest_log(records: Iterable[ClickRecord]) -> BehaviorGraph:
    """Accumulate click records into a graph. Order of records is irrelevant."""
    weights: dict[tuple[str, str], int] = defaultdict(int)
    texts: dict[str, str] = {}
    for r in records:
        prev = texts.setdefault(r.item_id, r.item_text)
        if prev != r.item_text:
            raise LogParseError(f"item {r.item_id!r} logged with two different texts")
        weights[(r.query_text, r.item_id)] += r.weight
    q_adj: dict[str, list[tuple[str, int]]] = defaultdict(list)
    i_adj: dict[str, list[tuple[str, int]]] = defaultdict(list)
    for (q, i), w in sorted(weights.items()):
        q_adj[q].append((i, w))
        i_adj[i].append((q, w))
    g = BehaviorGraph()
    for q in sorted(q_adj):
        g.query_index[q] = sorted(q_adj[q], key=lambda e: (-e[1], e[0]))
    for i in sorted(i_adj):
        g.item_index[i] = (texts[i], sorted(i_adj[i], key=lambda e: (-e[1], e[0])))
    return g


def _top_k(owner: str, cands: Iterable[tuple[str, int]], k: int) -> NeighborSet:
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    ranked = sorted(cands, key=lambda e: (-e[1], e[0]))
    seen: set[str] = set()
    out = []
    for text, w in ranked:
        # distinct ids sharing a text collapse onto the heavier one
        if text in seen:
            continue
        seen.add(text)
        out.append((text, w))
        if len(out) == k:
            break
    return NeighborSet(owner, tuple(out))


def neighbors_of_query(g: BehaviorGraph, query_text: str, k: int,
                       exclude_item: str | None = None) -> NeighborSet:
    """Top-k item texts clicked under ``query_text`` (weight desc, text asc)."""
    adj = g.query_index.get(query_text, ())
    cands = ((g.item_index[i][0], w) for i, w in adj if i != exclude_item)
    return _top_k(query_text, cands, k)


def neighbors_of_item(g: BehaviorGraph, item_id: str, k: int,
                      exclude_query: str | None = None) -> NeighborSet:
    """Top-k query texts that clicked ``item_id`` (weight desc, text asc)."""
    entry = g.item_index.get(item_id)
    adj = entry[1] if entry else ()
    return _top_k(item_id, ((q, w) for q, w in adj if q != exclude_query), k)


def pair_neighbors(g: BehaviorGraph, query: str, item_id: str, k: int,
                   exclude_counterpart: bool = False) -> tuple[NeighborSet, NeighborSet]:
    qbn = neighbors_of_query(g, query, k, item_id if exclude_counterpart else None)
    ibn = neighbors_of_item(g, item_id, k, query if exclude_counterpart else None)
    return qbn, ibn


def coverage_stats(g: BehaviorGraph, ds: Dataset, k: int,
                   exclude_counterpart: bool = False) -> CoverageReport:
    if not ds:
        raise ValueError("coverage_stats needs a non-empty dataset")
    nq = ni = none = qonly = ionly = both = 0
    for p in ds:
        qbn, ibn = pair_neighbors(g, p.query, p.item_id, k, exclude_counterpart)
        hq, hi = len(qbn) > 0, len(ibn) > 0
        nq += hq
        ni += hi
        none += not (hq or hi)
        qonly += hq and not hi
        ionly += hi and not hq
        both += hq and hi
    n = len(ds)
    return CoverageReport(n, none / n, nq / n, ni / n, qonly / n, ionly / n, both / n)


def dump_graph(g: BehaviorGraph) -> str:
    rows = [GRAPH_FORMAT] + [{"q": q, "i": i, "it": it, "w": w} for q, i, it, w in g.edges()]
    return dumps_jsonl(rows)


def save_graph(g: BehaviorGraph, path):
    atomic_write(path, dump_graph(g))


def load_graph(path) -> BehaviorGraph:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise LogParseError("graph file is empty")
    header = json.loads(lines[0])
    if header != GRAPH_FORMAT:
        raise LogParseError(f"unsupported graph header {header!r}")
    recs = []
    for lineno, line in enumerate(lines[1:], 2):
        try:
            e = json.loads(line)
            recs.append(ClickRecord(e["q"], e["i"], e["it"], int(e["w"])))
        except (ValueError, KeyError, TypeError) as exc:
            raise LogParseError(f"line {lineno}: malformed edge ({exc})") from exc
    return ingest_log(recs)
