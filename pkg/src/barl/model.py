"""Behavior-augmented dual-tower relevance scorer and two semantic baselines.

Each tower encodes its target text and the texts of its behavior
neighbors, fuses them with neighbor-level (NCA) and token-level (TCA)
co-attention, and feeds ``[target, NCA, TCA, counterpart]`` to a small
feed-forward head. The query tower uses the query's neighbors (clicked
items); the item tower uses the item's neighbors (clicking queries).
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import ContractError, ParamSet, Tensor
from .text import (CLS, TokenSequence, encode_batch, encoder_param_count, encoder_param_shapes,
                   masked_mean, pad_batch)


class ConfigError(ValueError):
    pass


ABLATION_FLAGS = ("use_qbn", "use_ibn", "use_nca", "use_tca", "use_qntc", "use_intc", "use_mutual")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 5000
    hidden_dim: int = 32
    layers: int = 2
    heads: int = 2
    max_len: int = 16
    k_neighbors: int = 5
    temperature: float = 0.1
    lambda_qntc: float = 0.1
    lambda_intc: float = 0.1
    lambda_mutual: float = 0.5
    pooling: str = "mean"
    shared_encoder: bool = True
    combiner: str = "mean"
    exclude_counterpart: bool = False
    use_qbn: bool = True
    use_ibn: bool = True
    use_nca: bool = True
    use_tca: bool = True
    use_qntc: bool = True
    use_intc: bool = True
    use_mutual: bool = True

    def __post_init__(self):
        for name in ("vocab_size", "hidden_dim", "layers", "heads", "max_len", "k_neighbors"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or v <= 0:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.vocab_size < 3:
            raise ConfigError("vocab_size must cover the reserved tokens")
        if self.max_len < 2:
            raise ConfigError("max_len must be >= 2")
        if self.hidden_dim % self.heads:
            raise ConfigError(f"heads must divide hidden_dim ({self.heads} vs {self.hidden_dim})")
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        for name in ("lambda_qntc", "lambda_intc", "lambda_mutual"):
            if not getattr(self, name) >= 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.pooling not in ("mean", "cls"):
            raise ConfigError(f"pooling must be 'mean' or 'cls', got {self.pooling!r}")
        if self.combiner not in ("mean", "query", "item"):
            raise ConfigError(f"combiner must be mean, query or item, got {self.combiner!r}")

    def replace(self, **kw) -> ModelConfig:
        return dataclasses.replace(self, **kw)

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> ModelConfig:
        unknown = set(obj) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**obj)

    def side_active(self, side: str) -> bool:
        return self.use_qbn if side == "q" else self.use_ibn


# ---------------------------------------------------------------------------
# parameters


def _encoder_prefixes(cfg: ModelConfig) -> dict[str, str]:
    """Which encoder each text kind goes through."""
    if cfg.shared_encoder:
        return {"query": "enc", "item": "enc"}
    return {"query": "encq", "item": "enci"}


def nca_param_count(d: int) -> int:
    return 3 * d * d + 2 * d


def tca_param_count(d: int) -> int:
    return 3 * d * d


def head_param_count(d: int) -> int:
    return 4 * d * d + d + d + 1


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d = cfg.hidden_dim
    shapes: dict[str, tuple[int, ...]] = {}
    for prefix in sorted(set(_encoder_prefixes(cfg).values())):
        shapes.update(encoder_param_shapes(prefix, cfg.vocab_size, d, cfg.layers, cfg.max_len))
    for side in ("q", "i"):
        if cfg.side_active(side) and cfg.use_nca:
            for w in ("wq", "wk", "wv"):
                shapes[f"{side}.nca.{w}"] = (d, d)
            shapes[f"{side}.nca.ln_g"] = (d,)
            shapes[f"{side}.nca.ln_b"] = (d,)
        if cfg.side_active(side) and cfg.use_tca:
            for w in ("wq", "wk", "wv"):
                shapes[f"{side}.tca.{w}"] = (d, d)
        shapes[f"{side}.head.w1"] = (4 * d, d)
        shapes[f"{side}.head.b1"] = (d,)
        shapes[f"{side}.head.w2"] = (d, 1)
        shapes[f"{side}.head.b2"] = (1,)
    return shapes


def param_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count.

    encoders + per active side (NCA: 3d^2+2d, TCA: 3d^2) + two heads (4d^2+2d+1 each).
    """
    d = cfg.hidden_dim
    n_enc = 1 if cfg.shared_encoder else 2
    total = n_enc * encoder_param_count(cfg.vocab_size, d, cfg.layers, cfg.max_len)
    for side in ("q", "i"):
        if cfg.side_active(side):
            total += cfg.use_nca * nca_param_count(d) + cfg.use_tca * tca_param_count(d)
    return total + 2 * head_param_count(d)


def _name_seed(seed: int, name: str) -> np.random.Generator:
    # per-name streams: toggling a component leaves every other tensor's init unchanged
    h = int.from_bytes(hashlib.sha256(name.encode()).digest()[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), h]))


def _init_from_shapes(shapes: dict[str, tuple[int, ...]], seed: int, meta: dict) -> ParamSet:
    entries = {}
    for name, shape in shapes.items():
        if len(shape) == 2:
            entries[name] = nx.init_uniform(_name_seed(seed, name), shape, shape[0], shape[1])
        elif name.endswith("_g"):
            entries[name] = Tensor(np.ones(shape), requires_grad=True)
        else:
            entries[name] = Tensor(np.zeros(shape), requires_grad=True)
    return ParamSet(entries, rng_seed=seed, meta=meta)


def init_params(cfg: ModelConfig, seed: int, vocab_fingerprint: str = "") -> ParamSet:
    """Xavier-uniform matrices, unit gains, zero biases; deterministic in (cfg, seed)."""
    if not isinstance(cfg, ModelConfig):
        raise ConfigError("init_params needs a ModelConfig")
    return _init_from_shapes(param_shapes(cfg), seed, {"kind": "barl", "vocab": vocab_fingerprint})


BASELINE_KINDS = ("two_tower", "cross_encoder")
TWO_TOWER_SCALE_INIT = 5.0


def baseline_param_shapes(kind: str, cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d = cfg.hidden_dim
    if kind == "two_tower":
        shapes = encoder_param_shapes("tt.enc", cfg.vocab_size, d, cfg.layers, cfg.max_len)
        shapes["tt.scale"] = (1,)
    elif kind == "cross_encoder":
        shapes = encoder_param_shapes("ce.enc", cfg.vocab_size, d, cfg.layers, cfg.max_len, segments=True)
        shapes.update({"ce.head.w1": (d, d), "ce.head.b1": (d,), "ce.head.w2": (d, 1), "ce.head.b2": (1,)})
    else:
        raise ConfigError(f"unknown baseline kind {kind!r}")
    return shapes


def init_baseline_params(kind: str, cfg: ModelConfig, seed: int, vocab_fingerprint: str = "") -> ParamSet:
    ps = _init_from_shapes(baseline_param_shapes(kind, cfg), seed, {"kind": kind, "vocab": vocab_fingerprint})
    if kind == "two_tower":
        ps["tt.scale"].data[:] = TWO_TOWER_SCALE_INIT
    return ps


# ---------------------------------------------------------------------------
# fusion blocks


def _nca_batched(params: ParamSet, side: str, target: Tensor, nb: Tensor, valid: np.ndarray):
    """target [B,d], nb [B,K,d], valid [B,K] -> (fused [B,d], attended [B,d], weights [B,K])."""
    b, d = target.shape
    q = nx.reshape(nx.matmul(target, params[f"{side}.nca.wq"]), (b, 1, d))
    k = nx.matmul(nb, params[f"{side}.nca.wk"])
    v = nx.matmul(nb, params[f"{side}.nca.wv"])
    att, w = nx.attention(q, k, v, 1.0 / math.sqrt(d), valid[:, None, :])
    att = nx.reshape(att, (b, d))
    fused = nx.layer_norm(target + att, params[f"{side}.nca.ln_g"], params[f"{side}.nca.ln_b"])
    has = valid.any(axis=1).astype(np.float64)[:, None]
    return _gate(fused, target, has), att, nx.reshape(w, (b, -1))


def _tca_batched(params: ParamSet, side: str, tokens: Tensor, tmask: np.ndarray,
                 nb_tokens: Tensor, nb_mask: np.ndarray):
    """tokens [B,T,d], nb_tokens [B,N,d] -> (fused [B,d], weights [B,T,N])."""
    d = tokens.shape[-1]
    q = nx.matmul(tokens, params[f"{side}.tca.wq"])
    k = nx.matmul(nb_tokens, params[f"{side}.tca.wk"])
    v = nx.matmul(nb_tokens, params[f"{side}.tca.wv"])
    att, w = nx.attention(q, k, v, 1.0 / math.sqrt(d), nb_mask[:, None, :])
    fused = masked_mean(att, tmask)
    has = nb_mask.any(axis=1).astype(np.float64)[:, None]
    return _gate(fused, masked_mean(tokens, tmask), has), w


def _gate(on: Tensor, off: Tensor, has: np.ndarray) -> Tensor:
    if has.all():
        return on
    if not has.any():
        return off
    return nx.mul(on, has) + nx.mul(off, 1.0 - has)


def nca_fuse(params: ParamSet, target_pooled: Tensor, neighbor_pooleds: Tensor | None, side: str = "q") -> Tensor:
    """Neighbor-level co-attention for one target: ``[1,d]`` x ``[b,d]`` -> ``[1,d]``.

    With no neighbors (``None`` or zero rows) the target comes back unchanged.
    """
    d = target_pooled.shape[-1]
    if neighbor_pooleds is None or (not isinstance(neighbor_pooleds, Tensor) and np.size(neighbor_pooleds) == 0):
        return target_pooled
    nb = nx.as_tensor(neighbor_pooleds)
    if nb.shape[-1] != d:
        raise nx.DimensionError(f"neighbor width {nb.shape[-1]} != target width {d}")
    nb3 = nx.reshape(nb, (1, nb.shape[0], d))
    fused, _, _ = _nca_batched(params, side, nx.reshape(target_pooled, (1, d)), nb3,
                               np.ones((1, nb.shape[0]), dtype=bool))
    return fused


def tca_fuse(params: ParamSet, target_tokens: Tensor, neighbor_tokens: Tensor | None, side: str = "q") -> Tensor:
    """Token-level co-attention for one target: ``[t,d]`` x ``[n,d]`` -> ``[1,d]``."""
    t, d = target_tokens.shape
    tok3 = nx.reshape(target_tokens, (1, t, d))
    tmask = np.ones((1, t), dtype=bool)
    if neighbor_tokens is None or (not isinstance(neighbor_tokens, Tensor) and np.size(neighbor_tokens) == 0):
        return masked_mean(tok3, tmask)
    nbt = nx.as_tensor(neighbor_tokens)
    fused, _ = _tca_batched(params, side, tok3, tmask, nx.reshape(nbt, (1,) + nbt.shape),
                            np.ones((1, nbt.shape[0]), dtype=bool))
    return fused


# ---------------------------------------------------------------------------
# batched forward


@dataclass
class PairInputs:
    """Tokenized pairs plus their behavior neighbors, ready for a forward pass."""

    queries: list[TokenSequence]
    items: list[TokenSequence]
    qbn: list[list[TokenSequence]]
    ibn: list[list[TokenSequence]]
    query_keys: list[str] = field(default_factory=list)
    item_keys: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.queries)

    def has_neighbors(self) -> np.ndarray:
        return np.array([bool(a) or bool(b) for a, b in zip(self.qbn, self.ibn)])


@dataclass
class TowerIntermediates:
    target: Tensor  # [B,d] pooled target rep
    neighbors: Tensor | None  # [B,K,d] pooled neighbor reps
    valid: np.ndarray  # [B,K] neighbor slot mask
    nca: Tensor  # [B,d]
    tca: Tensor  # [B,d]
    aggregate: Tensor  # [B,d] neighbor summary used as the contrastive positive
    head_input: Tensor  # [B,4d]

    @property
    def has_neighbors(self) -> np.ndarray:
        return self.valid.any(axis=1)


@dataclass
class ForwardOutput:
    score_q: Tensor  # [B]
    score_i: Tensor
    final: Tensor
    query_side: TowerIntermediates
    item_side: TowerIntermediates


@dataclass(frozen=True)
class RelevanceScore:
    score_q: float
    score_i: float
    final: float
    used_fallback: bool = False


def _encode_groups(params, cfg, groups: dict[str, list[TokenSequence]], prefix: str, dedupe: bool):
    """Encode several sequence lists through one encoder call.

    Returns per-group (token_reps, pooled, mask) slices of the shared output.
    """
    seqs: list[TokenSequence] = []
    spans = {}
    rows_of: dict[tuple[int, ...], int] = {}
    for key, lst in groups.items():
        idx = []
        for s in lst:
            if dedupe and s.ids in rows_of:
                idx.append(rows_of[s.ids])
                continue
            rows_of[s.ids] = len(seqs)
            idx.append(len(seqs))
            seqs.append(s)
        spans[key] = np.array(idx, dtype=np.int64)
    if not seqs:
        return {}, None
    ids, mask = pad_batch(seqs)
    out = encode_batch(params, ids, mask, prefix=prefix, layers=cfg.layers, heads=cfg.heads,
                       pooling=cfg.pooling)
    return spans, (out.token_reps, out.pooled, mask)


def _neighbor_block(lists: list[list[TokenSequence]], k: int):
    flat: list[TokenSequence] = []
    slot = np.zeros((len(lists), k), dtype=np.int64)
    valid = np.zeros((len(lists), k), dtype=bool)
    for b, lst in enumerate(lists):
        if len(lst) > k:
            raise ContractError(f"{len(lst)} neighbors exceed k_neighbors={k}")
        for j, s in enumerate(lst):
            slot[b, j] = len(flat)
            valid[b, j] = True
            flat.append(s)
    return flat, slot, valid


def forward_batch(params: ParamSet, cfg: ModelConfig, inputs: PairInputs) -> ForwardOutput:
    """Score a batch of pairs; gradients flow when called under a tape."""
    bsz = len(inputs)
    d, k = cfg.hidden_dim, cfg.k_neighbors
    prefixes = _encoder_prefixes(cfg)
    q_lists = inputs.qbn if cfg.use_qbn else [[] for _ in range(bsz)]
    i_lists = inputs.ibn if cfg.use_ibn else [[] for _ in range(bsz)]
    # QBN are item texts, IBN are query texts
    nb_kind = {"q": "item", "i": "query"}
    nb_flat = {}
    for side, lists in (("q", q_lists), ("i", i_lists)):
        nb_flat[side] = _neighbor_block(lists, k)

    targets: dict[str, tuple[Tensor, Tensor, np.ndarray]] = {}
    for prefix in sorted(set(prefixes.values())):
        groups = {}
        if prefixes["query"] == prefix:
            groups["query"] = inputs.queries
        if prefixes["item"] == prefix:
            groups["item"] = inputs.items
        spans, enc = _encode_groups(params, cfg, groups, prefix, dedupe=False)
        tok, pooled, mask = enc
        for key, rows in spans.items():
            lo, hi = int(rows[0]), int(rows[-1]) + 1
            targets[key] = (nx.index(tok, slice(lo, hi)), nx.index(pooled, slice(lo, hi)), mask[lo:hi])

    neighbors: dict[str, tuple[Tensor, Tensor, np.ndarray] | None] = {"q": None, "i": None}
    for prefix in sorted(set(prefixes.values())):
        groups = {side: nb_flat[side][0] for side in ("q", "i")
                  if prefixes[nb_kind[side]] == prefix and nb_flat[side][0]}
        if not groups:
            continue
        spans, (tok, pooled, mask) = _encode_groups(params, cfg, groups, prefix, dedupe=True)
        for side, rows in spans.items():
            _, slot, valid = nb_flat[side]
            gather = np.where(valid, rows[slot], rows[0])
            nb_pooled = nx.index(pooled, gather)  # [B,K,d]
            nb_tok = nx.index(tok, gather)  # [B,K,T,d]
            tw = tok.shape[1]
            nb_tok = nx.reshape(nb_tok, (bsz, k * tw, d))
            nb_mask = (mask[gather] & valid[:, :, None]).reshape(bsz, k * tw)
            neighbors[side] = (nb_pooled, nb_tok, nb_mask)

    sides = {}
    for side, own, other in (("q", "query", "item"), ("i", "item", "query")):
        tok, pooled, tmask = targets[own]
        valid = nb_flat[side][2]
        nbr = neighbors[side]
        if nbr is not None and cfg.use_nca:
            nca, att, _ = _nca_batched(params, side, pooled, nbr[0], valid)
        else:
            nca, att = pooled, None
        if nbr is not None and cfg.use_tca:
            tca, _ = _tca_batched(params, side, tok, tmask, nbr[1], nbr[2])
        else:
            tca = pooled if cfg.pooling == "mean" else masked_mean(tok, tmask)
        if nbr is None:
            agg = pooled
        elif att is not None:
            agg = att
        else:
            agg = masked_mean(nbr[0], valid)
        head_in = nx.concat([pooled, nca, tca, targets[other][1]], axis=-1)
        sides[side] = TowerIntermediates(pooled, nbr[0] if nbr else None, valid, nca, tca, agg, head_in)

    scores = {}
    for side in ("q", "i"):
        h = nx.gelu(nx.matmul(sides[side].head_input, params[f"{side}.head.w1"]) + params[f"{side}.head.b1"])
        logit = nx.matmul(h, params[f"{side}.head.w2"]) + params[f"{side}.head.b2"]
        scores[side] = nx.sigmoid(nx.reshape(logit, (bsz,)))
    if cfg.combiner == "mean":
        final = nx.scale(scores["q"] + scores["i"], 0.5)
    elif cfg.combiner == "query":
        final = scores["q"]
    else:
        final = scores["i"]
    return ForwardOutput(scores["q"], scores["i"], final, sides["q"], sides["i"])


def forward_score(params: ParamSet, cfg: ModelConfig, query: TokenSequence, item: TokenSequence,
                  qbn: Sequence[TokenSequence], ibn: Sequence[TokenSequence]):
    """Score one pair. Returns ``(RelevanceScore, (query_side, item_side))``."""
    out = forward_batch(params, cfg, PairInputs([query], [item], [list(qbn)], [list(ibn)]))
    score = RelevanceScore(out.score_q.item(), out.score_i.item(), out.final.item(), False)
    return score, (out.query_side, out.item_side)


# ---------------------------------------------------------------------------
# baselines


def _cross_sequence(query: TokenSequence, item: TokenSequence, max_len: int):
    ids = (CLS,) + query.ids[1:] + item.ids[1:]
    seg = [0] * len(query.ids) + [1] * (len(item.ids) - 1)
    return TokenSequence(ids[:max_len]), seg[:max_len]


def baseline_batch(kind: str, params: ParamSet, cfg: ModelConfig, queries: Sequence[TokenSequence],
                   items: Sequence[TokenSequence]) -> Tensor:
    """Baseline relevance scores ``[B]`` in (0, 1)."""
    bsz = len(queries)
    if kind == "two_tower":
        ids, mask = pad_batch(list(queries) + list(items))
        out = encode_batch(params, ids, mask, prefix="tt.enc", layers=cfg.layers, heads=cfg.heads,
                           pooling=cfg.pooling)
        z = nx.l2_normalize(out.pooled)
        cos = nx.sum_(nx.index(z, slice(0, bsz)) * nx.index(z, slice(bsz, 2 * bsz)), axis=-1)
        return nx.sigmoid(cos * params["tt.scale"])
    if kind == "cross_encoder":
        pairs = [_cross_sequence(q, i, cfg.max_len) for q, i in zip(queries, items)]
        ids, mask = pad_batch([p[0] for p in pairs])
        seg = np.zeros_like(ids)
        for r, (_, s) in enumerate(pairs):
            seg[r, : len(s)] = s
        out = encode_batch(params, ids, mask, prefix="ce.enc", layers=cfg.layers, heads=cfg.heads,
                           pooling=cfg.pooling, segments=seg)
        h = nx.gelu(nx.matmul(out.pooled, params["ce.head.w1"]) + params["ce.head.b1"])
        logit = nx.matmul(h, params["ce.head.w2"]) + params["ce.head.b2"]
        return nx.sigmoid(nx.reshape(logit, (bsz,)))
    raise ConfigError(f"unknown baseline kind {kind!r}")


def forward_baseline(kind: str, params: ParamSet, cfg: ModelConfig, query: TokenSequence,
                     item: TokenSequence) -> float:
    return baseline_batch(kind, params, cfg, [query], [item]).item()


# ---------------------------------------------------------------------------
# routing variant


def check_same_vocab(params: ParamSet, baseline_params: ParamSet):
    a, b = params.meta.get("vocab", ""), baseline_params.meta.get("vocab", "")
    if a != b:
        raise ContractError(f"vocabulary mismatch between models ({a!r} vs {b!r})")


def score_plus_batch(params: ParamSet, baseline_params: ParamSet, cfg: ModelConfig,
                     inputs: PairInputs, baseline_kind: str = "two_tower"):
    """Route fully neighborless pairs to the baseline.

    Returns ``(final scores, used_fallback mask, ForwardOutput)``.
    """
    check_same_vocab(params, baseline_params)
    out = forward_batch(params, cfg, inputs)
    final = out.final.data.copy()
    q_has = np.array([bool(x) for x in inputs.qbn]) & cfg.use_qbn
    i_has = np.array([bool(x) for x in inputs.ibn]) & cfg.use_ibn
    fallback = ~(q_has | i_has)
    if fallback.any():
        rows = np.flatnonzero(fallback)
        base = baseline_batch(baseline_kind, baseline_params, cfg,
                              [inputs.queries[r] for r in rows], [inputs.items[r] for r in rows])
        final[rows] = base.data
    return final, fallback, out


def forward_score_plus(params: ParamSet, baseline_params: ParamSet, cfg: ModelConfig,
                       query: TokenSequence, item: TokenSequence, qbn: Sequence[TokenSequence],
                       ibn: Sequence[TokenSequence], baseline_kind: str = "two_tower") -> RelevanceScore:
    check_same_vocab(params, baseline_params)
    score, _ = forward_score(params, cfg, query, item, qbn, ibn)
    if (qbn and cfg.use_qbn) or (ibn and cfg.use_ibn):
        return score
    base = forward_baseline(baseline_kind, baseline_params, cfg, query, item)
    return RelevanceScore(score.score_q, score.score_i, base, True)
