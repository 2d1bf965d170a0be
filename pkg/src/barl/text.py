"""Whitespace tokenizer, vocabulary, and a small transformer encoder."""

from __future__ import annotations

import hashlib
import math
from collections import Counter
from collections.abc import Iterable, Sequence
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import ContractError, ParamSet, Tensor

PAD, UNK, CLS = 0, 1, 2
RESERVED = ("[PAD]", "[UNK]", "[CLS]")
VOCAB_HEADER = "#barl-vocab v1"


def split_words(text: str) -> list[str]:
    return text.lower().split()


class Vocab:
    def __init__(self, tokens: Sequence[str] = ()):
        self.itos: list[str] = list(RESERVED) + list(tokens)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("vocabulary tokens must be unique")

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token: str):
        return token in self.stoi

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def fingerprint(self) -> str:
        return hashlib.sha256("\n".join(self.itos).encode()).hexdigest()[:16]

    def dumps(self) -> str:
        return "\n".join([VOCAB_HEADER, *self.itos[len(RESERVED):]]) + "\n"

    @classmethod
    def loads(cls, text: str) -> Vocab:
        lines = text.splitlines()
        if not lines or lines[0] != VOCAB_HEADER:
            raise ValueError("not a vocabulary file (bad header)")
        return cls(lines[1:])

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.itos == other.itos


def build_vocab(corpus: Iterable[str], max_size: int = 5000) -> Vocab:
    """Most frequent tokens first; ties broken by the token itself."""
    if max_size < 4:
        raise ValueError(f"max_size must be >= 4, got {max_size}")
    counts = Counter()
    for text in corpus:
        counts.update(split_words(text))
    for tok in RESERVED:
        counts.pop(tok, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocab([t for t, _ in ranked[: max_size - len(RESERVED)]])


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]

    def __post_init__(self):
        if not self.ids or self.ids[0] != CLS:
            raise ValueError("a token sequence starts with CLS")

    def __len__(self):
        return len(self.ids)

    @property
    def attention_length(self) -> int:
        return sum(1 for i in self.ids if i != PAD)


def tokenize(v: Vocab, text: str, max_len: int = 16) -> TokenSequence:
    if max_len < 2:
        raise ValueError(f"max_len must be >= 2, got {max_len}")
    ids = [CLS] + [v.id(w) for w in split_words(text)]
    return TokenSequence(tuple(ids[:max_len]))


def pad_batch(seqs: Sequence[TokenSequence], min_len: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Stack sequences into ``(ids, mask)`` arrays padded to the longest one."""
    width = max([min_len] + [len(s) for s in seqs])
    ids = np.full((len(seqs), width), PAD, dtype=np.int64)
    for r, s in enumerate(seqs):
        ids[r, : len(s)] = s.ids
    return ids, ids != PAD


# ---------------------------------------------------------------------------
# encoder


def encoder_param_shapes(prefix: str, vocab_size: int, d: int, layers: int, max_len: int,
                         segments: bool = False) -> dict[str, tuple[int, ...]]:
    f = 2 * d
    shapes = {f"{prefix}.tok_emb": (vocab_size, d), f"{prefix}.pos_emb": (max_len, d)}
    if segments:
        shapes[f"{prefix}.seg_emb"] = (2, d)
    for l in range(layers):
        p = f"{prefix}.layer{l}"
        for w in ("wq", "wk", "wv", "wo"):
            shapes[f"{p}.{w}"] = (d, d)
        for b in ("bq", "bk", "bv", "bo"):
            shapes[f"{p}.{b}"] = (d,)
        shapes[f"{p}.ffn_w1"] = (d, f)
        shapes[f"{p}.ffn_b1"] = (f,)
        shapes[f"{p}.ffn_w2"] = (f, d)
        shapes[f"{p}.ffn_b2"] = (d,)
        for ln in ("ln1", "ln2"):
            shapes[f"{p}.{ln}_g"] = (d,)
            shapes[f"{p}.{ln}_b"] = (d,)
    return shapes


def encoder_param_count(vocab_size: int, d: int, layers: int, max_len: int, segments: bool = False) -> int:
    per_layer = 4 * d * d + 4 * d + 2 * d * (2 * d) + 2 * d + d + 4 * d
    return (vocab_size + max_len + (2 if segments else 0)) * d + layers * per_layer


def _layer_norm(params: ParamSet, p: str, x: Tensor) -> Tensor:
    return nx.layer_norm(x, params[f"{p}_g"], params[f"{p}_b"])


def _self_attention(params: ParamSet, p: str, x: Tensor, key_mask: np.ndarray, heads: int):
    n, t, d = x.shape
    dh = d // heads

    def proj(w):
        y = nx.matmul(x, params[f"{p}.w{w}"]) + params[f"{p}.b{w}"]
        return nx.transpose(nx.reshape(y, (n, t, heads, dh)), (0, 2, 1, 3))

    q, k, v = proj("q"), proj("k"), proj("v")
    out, w = nx.attention(q, k, v, 1.0 / math.sqrt(dh), key_mask[:, None, None, :])
    out = nx.reshape(nx.transpose(out, (0, 2, 1, 3)), (n, t, d))
    return nx.matmul(out, params[f"{p}.wo"]) + params[f"{p}.bo"], w


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean of ``x[..., t, :]`` over positions where ``mask`` is set.

    Rows with an empty mask give zeros.
    """
    m = mask.astype(np.float64)
    cnt = m.sum(axis=-1, keepdims=True)
    wts = m / np.where(cnt > 0, cnt, 1.0)
    return nx.sum_(nx.mul(x, wts[..., None]), axis=-2)


@dataclass
class EncoderOutput:
    token_reps: Tensor  # [..., len, d]
    pooled: Tensor  # [..., d]
    attn_weights: list | None = None


def encode_batch(params: ParamSet, ids: np.ndarray, mask: np.ndarray, *, prefix: str = "enc",
                 layers: int, heads: int, pooling: str = "mean",
                 segments: np.ndarray | None = None, keep_attention: bool = False) -> EncoderOutput:
    """Encode a padded ``[n, t]`` id matrix into ``[n, t, d]`` token reps and ``[n, d]`` pooled reps."""
    tok = params[f"{prefix}.tok_emb"]
    pos = params[f"{prefix}.pos_emb"]
    n, t = ids.shape
    if t > pos.shape[0]:
        raise ContractError(f"sequence length {t} exceeds max_len {pos.shape[0]}")
    x = nx.embedding(tok, ids) + nx.index(pos, slice(0, t))
    if segments is not None:
        x = x + nx.embedding(params[f"{prefix}.seg_emb"], segments)
    attn = []
    for l in range(layers):
        p = f"{prefix}.layer{l}"
        a, w = _self_attention(params, p, x, mask, heads)
        if keep_attention:
            attn.append(w)
        x = _layer_norm(params, f"{p}.ln1", x + a)
        h = nx.gelu(nx.matmul(x, params[f"{p}.ffn_w1"]) + params[f"{p}.ffn_b1"])
        h = nx.matmul(h, params[f"{p}.ffn_w2"]) + params[f"{p}.ffn_b2"]
        x = _layer_norm(params, f"{p}.ln2", x + h)
    if pooling == "mean":
        pooled = masked_mean(x, mask)
    elif pooling == "cls":
        pooled = nx.index(x, (slice(None), 0))
    else:
        raise ContractError(f"unknown pooling mode {pooling!r}")
    return EncoderOutput(x, pooled, attn if keep_attention else None)


def encode(params: ParamSet, seq: TokenSequence, *, prefix: str = "enc", layers: int = 2,
           heads: int = 2, pooling: str = "mean") -> EncoderOutput:
    """Encode one sequence: token reps ``[len, d]`` and pooled ``[1, d]``."""
    ids, mask = pad_batch([seq])
    out = encode_batch(params, ids, mask, prefix=prefix, layers=layers, heads=heads, pooling=pooling)
    d = out.pooled.shape[-1]
    return EncoderOutput(nx.reshape(out.token_reps, (len(seq), d)), out.pooled)
