"""Training objectives: per-head BCE, neighbor/target contrast, mutual distillation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .model import ForwardOutput, ModelConfig, PairInputs, TowerIntermediates, forward_batch
from .numerics import ContractError, NonFiniteError, ParamSet, Tape, Tensor

EPS = 1e-7


def _clamp(s: float) -> float:
    return min(max(s, EPS), 1.0 - EPS)


def bce(score: float, label: int) -> float:
    s = _clamp(float(score))
    return -(label * math.log(s) + (1 - label) * math.log(1.0 - s))


def mutual_distill(score_q: float, score_i: float) -> float:
    """Symmetric Bernoulli KL: 0.5*KL(p_q||p_i) + 0.5*KL(p_i||p_q)."""
    p, r = _clamp(float(score_q)), _clamp(float(score_i))
    # the two KLs sum to (p - r) * (logit p - logit r); both factors share a
    # sign, so this form cannot cancel to a tiny negative when p ~ r
    dlogit = (math.log(p) - math.log(r)) - (math.log1p(-p) - math.log1p(-r))
    return 0.5 * (p - r) * dlogit


def _cos(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ContractError("cosine similarity of a zero-norm vector")
    return float(a @ b / (na * nb))


def info_nce(anchor, positive, negatives, tau: float) -> float:
    """-log softmax of the positive's cosine/tau among positive + negatives."""
    if tau <= 0:
        raise ContractError("temperature must be positive")
    a = np.asarray(getattr(anchor, "data", anchor), dtype=float).reshape(-1)
    p = np.asarray(getattr(positive, "data", positive), dtype=float).reshape(-1)
    negs = np.asarray(getattr(negatives, "data", negatives), dtype=float)
    negs = negs.reshape(-1, a.size)
    if len(negs) < 1:
        raise ContractError("info_nce needs at least one negative")
    logits = np.array([_cos(a, p)] + [_cos(a, n) for n in negs]) / tau
    m = logits.max()
    return float(m + math.log(np.exp(logits - m).sum()) - logits[0])


# ---------------------------------------------------------------------------
# tensor versions used in training


def bce_t(scores: Tensor, labels: np.ndarray) -> Tensor:
    s = nx.clip(scores, EPS, 1.0 - EPS)
    y = np.asarray(labels, dtype=np.float64)
    ll = nx.mul(nx.log(s), y) + nx.mul(nx.log(1.0 - s), 1.0 - y)
    return nx.neg(nx.mean(ll))


def mutual_t(score_q: Tensor, score_i: Tensor) -> Tensor:
    p = nx.clip(score_q, EPS, 1.0 - EPS)
    r = nx.clip(score_i, EPS, 1.0 - EPS)
    lp, lr = nx.log(p), nx.log(r)
    lp1, lr1 = nx.log(1.0 - p), nx.log(1.0 - r)
    return nx.mean(nx.scale((p - r) * ((lp - lr) - (lp1 - lr1)), 0.5))


def contrast_masks(keys: list[str], has: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Logit mask ``[B,B]`` (diagonal = positive) and the kept-anchor vector.

    Negatives are other examples that have neighbors and a different key.
    Anchors without neighbors or without any negative are skipped.
    """
    keys_arr = np.asarray(keys, dtype=object)
    diff = keys_arr[:, None] != keys_arr[None, :]
    neg = diff & has[None, :]
    np.fill_diagonal(neg, False)
    kept = has & neg.any(axis=1)
    mask = neg.copy()
    np.fill_diagonal(mask, True)
    return mask, kept


def neighbor_target_contrast(side: TowerIntermediates, keys: list[str], tau: float) -> Tensor | None:
    """Mean InfoNCE of target (anchor) vs. own neighbor aggregate (positive),
    with other examples' aggregates as in-batch negatives.

    Returns None when every anchor is skipped.
    """
    bsz = side.target.shape[0]
    if bsz < 2:
        raise ContractError("contrastive loss needs a batch of at least 2")
    has = side.has_neighbors
    mask, kept = contrast_masks(keys, has)
    if not kept.any():
        return None
    # rows without neighbors only sit in masked slots; keep them non-zero for normalisation
    hasf = has.astype(np.float64)[:, None]
    pos = side.aggregate if has.all() else nx.mul(side.aggregate, hasf) + nx.mul(side.target, 1.0 - hasf)
    za = nx.l2_normalize(side.target)
    zp = nx.l2_normalize(pos)
    logits = nx.scale(nx.matmul(za, nx.transpose(zp)), 1.0 / tau)  # [B,B]
    lse = nx.reshape(nx.logsumexp(logits, mask), (bsz,))
    diag = nx.index(logits, (np.arange(bsz), np.arange(bsz)))
    w = kept.astype(np.float64) / kept.sum()
    return nx.sum_(nx.mul(lse - diag, w))


def qntc_loss(side: TowerIntermediates, query_keys: list[str], tau: float) -> float:
    out = neighbor_target_contrast(side, query_keys, tau)
    return 0.0 if out is None else out.item()


def intc_loss(side: TowerIntermediates, item_keys: list[str], tau: float) -> float:
    out = neighbor_target_contrast(side, item_keys, tau)
    return 0.0 if out is None else out.item()


@dataclass
class LossBreakdown:
    l_sup_q: float = 0.0
    l_sup_i: float = 0.0
    l_qntc: float = 0.0
    l_intc: float = 0.0
    l_mutual: float = 0.0
    total: float = 0.0
    node: Tensor | None = field(default=None, repr=False, compare=False)

    FIELDS = ("l_sup_q", "l_sup_i", "l_qntc", "l_intc", "l_mutual", "total")

    def as_row(self) -> list[float]:
        return [getattr(self, f) for f in self.FIELDS]

    def to_json(self) -> dict:
        return {f: getattr(self, f) for f in self.FIELDS}

    @classmethod
    def mean(cls, items: list[LossBreakdown]) -> LossBreakdown:
        n = max(len(items), 1)
        return cls(*[sum(getattr(x, f) for x in items) / n for f in cls.FIELDS])


def _term(name: str, fn):
    try:
        return fn()
    except NonFiniteError as exc:
        raise NonFiniteError(f"non-finite value in loss term {name}: {exc}") from exc


def losses_from_output(out: ForwardOutput, inputs: PairInputs, labels, cfg: ModelConfig) -> LossBreakdown:
    """Combine the loss terms of a forward pass (record on the active tape)."""
    labels = np.asarray(labels)
    terms: dict[str, Tensor | None] = {}
    terms["l_sup_q"] = _term("l_sup_q", lambda: bce_t(out.score_q, labels))
    terms["l_sup_i"] = _term("l_sup_i", lambda: bce_t(out.score_i, labels))
    contrast = cfg.use_qntc or cfg.use_intc
    if contrast and len(inputs) < 2:
        raise ContractError("contrastive terms need a batch of at least 2")
    terms["l_qntc"] = (_term("l_qntc", lambda: neighbor_target_contrast(
        out.query_side, inputs.query_keys, cfg.temperature)) if cfg.use_qntc else None)
    terms["l_intc"] = (_term("l_intc", lambda: neighbor_target_contrast(
        out.item_side, inputs.item_keys, cfg.temperature)) if cfg.use_intc else None)
    terms["l_mutual"] = _term("l_mutual", lambda: mutual_t(out.score_q, out.score_i)) if cfg.use_mutual else None

    weights = {"l_sup_q": 1.0, "l_sup_i": 1.0, "l_qntc": cfg.lambda_qntc,
               "l_intc": cfg.lambda_intc, "l_mutual": cfg.lambda_mutual}
    total = None
    for name, t in terms.items():
        if t is None or weights[name] == 0:
            continue
        wt = t if weights[name] == 1.0 else nx.scale(t, weights[name])
        total = wt if total is None else total + wt
    vals = {k: (0.0 if v is None else v.item()) for k, v in terms.items()}
    tot = total.item()
    if not math.isfinite(tot):
        raise NonFiniteError("non-finite total loss")
    return LossBreakdown(**vals, total=tot, node=total)


def total_loss(batch, params: ParamSet, cfg: ModelConfig):
    """Forward + all enabled loss terms on a fresh tape.

    ``batch`` is ``(PairInputs, labels)``. Returns ``(LossBreakdown, tape)``;
    the total's tape node is ``breakdown.node``.
    """
    inputs, labels = batch
    with Tape() as tape:
        out = forward_batch(params, cfg, inputs)
        lb = losses_from_output(out, inputs, labels, cfg)
    return lb, tape
