"""Straight-line numpy re-implementation of the scorer, one example at a time.

Written independently of the tape-based code path: no batching, no masks,
no padding. Used only as a test oracle.
"""

import math

import numpy as np

LN_EPS = 1e-10


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)))


def layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS) * g + b


def softmax(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def encode(P, prefix, ids, layers, heads, segments=None):
    ids = list(ids)
    x = P[f"{prefix}.tok_emb"][ids] + P[f"{prefix}.pos_emb"][: len(ids)]
    if segments is not None:
        x = x + P[f"{prefix}.seg_emb"][list(segments)]
    d = x.shape[1]
    dh = d // heads
    for l in range(layers):
        p = f"{prefix}.layer{l}"
        q = x @ P[f"{p}.wq"] + P[f"{p}.bq"]
        k = x @ P[f"{p}.wk"] + P[f"{p}.bk"]
        v = x @ P[f"{p}.wv"] + P[f"{p}.bv"]
        heads_out = []
        for h in range(heads):
            sl = slice(h * dh, (h + 1) * dh)
            w = softmax(q[:, sl] @ k[:, sl].T / math.sqrt(dh))
            heads_out.append(w @ v[:, sl])
        a = np.concatenate(heads_out, axis=1) @ P[f"{p}.wo"] + P[f"{p}.bo"]
        x = layer_norm(x + a, P[f"{p}.ln1_g"], P[f"{p}.ln1_b"])
        f = gelu(x @ P[f"{p}.ffn_w1"] + P[f"{p}.ffn_b1"]) @ P[f"{p}.ffn_w2"] + P[f"{p}.ffn_b2"]
        x = layer_norm(x + f, P[f"{p}.ln2_g"], P[f"{p}.ln2_b"])
    return x, x.mean(axis=0)


def tower(P, cfg, side, target_ids, nb_ids, counterpart_pooled, prefix_target, prefix_nb):
    d = cfg.hidden_dim
    tok, pooled = encode(P, prefix_target, target_ids, cfg.layers, cfg.heads)
    nbs = [encode(P, prefix_nb, ids, cfg.layers, cfg.heads) for ids in nb_ids]
    if nbs and cfg.use_nca:
        nb_pool = np.stack([p for _, p in nbs])
        q = pooled @ P[f"{side}.nca.wq"]
        w = softmax(q @ (nb_pool @ P[f"{side}.nca.wk"]).T / math.sqrt(d))
        att = w @ (nb_pool @ P[f"{side}.nca.wv"])
        nca = layer_norm(pooled + att, P[f"{side}.nca.ln_g"], P[f"{side}.nca.ln_b"])
    else:
        nca = pooled
    if nbs and cfg.use_tca:
        nb_tok = np.concatenate([t for t, _ in nbs], axis=0)
        q = tok @ P[f"{side}.tca.wq"]
        w = softmax(q @ (nb_tok @ P[f"{side}.tca.wk"]).T / math.sqrt(d))
        tca = (w @ (nb_tok @ P[f"{side}.tca.wv"])).mean(axis=0)
    else:
        tca = tok.mean(axis=0)
    head_in = np.concatenate([pooled, nca, tca, counterpart_pooled])
    h = gelu(head_in @ P[f"{side}.head.w1"] + P[f"{side}.head.b1"])
    return sigmoid(float(h @ P[f"{side}.head.w2"][:, 0] + P[f"{side}.head.b2"][0]))


def score(params, cfg, q_ids, i_ids, qbn_ids, ibn_ids):
    P = {k: t.data for k, t in params.items()}
    pq = "enc" if cfg.shared_encoder else "encq"
    pi = "enc" if cfg.shared_encoder else "enci"
    _, q_pool = encode(P, pq, q_ids, cfg.layers, cfg.heads)
    _, i_pool = encode(P, pi, i_ids, cfg.layers, cfg.heads)
    qbn_ids = qbn_ids if cfg.use_qbn else []
    ibn_ids = ibn_ids if cfg.use_ibn else []
    sq = tower(P, cfg, "q", q_ids, qbn_ids, i_pool, pq, pi)
    si = tower(P, cfg, "i", i_ids, ibn_ids, q_pool, pi, pq)
    return sq, si, (sq + si) / 2


def cross_encoder(params, cfg, q_ids, i_ids):
    P = {k: t.data for k, t in params.items()}
    ids = ([q_ids[0]] + list(q_ids[1:]) + list(i_ids[1:]))[: cfg.max_len]
    seg = ([0] * len(q_ids) + [1] * (len(i_ids) - 1))[: cfg.max_len]
    _, pooled = encode(P, "ce.enc", ids, cfg.layers, cfg.heads, seg)
    h = gelu(pooled @ P["ce.head.w1"] + P["ce.head.b1"])
    return sigmoid(float(h @ P["ce.head.w2"][:, 0] + P["ce.head.b2"][0]))


def two_tower(params, cfg, q_ids, i_ids):
    P = {k: t.data for k, t in params.items()}
    _, a = encode(P, "tt.enc", q_ids, cfg.layers, cfg.heads)
    _, b = encode(P, "tt.enc", i_ids, cfg.layers, cfg.heads)
    cos = a @ b / (np.linalg.norm(a) * np.linalg.norm(b))
    return sigmoid(float(P["tt.scale"][0] * cos))
