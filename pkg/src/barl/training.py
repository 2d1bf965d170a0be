"""Deterministic mini-batch training with Adam, plus checkpoint and config I/O."""

from __future__ import annotations

import dataclasses
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .behavior_graph import BehaviorGraph
from .dataset import Dataset, LabeledPair, atomic_write
from .features import Featurizer
from .model import (BASELINE_KINDS, ConfigError, ModelConfig, PairInputs, baseline_batch,
                    forward_batch, init_baseline_params, init_params)
from .numerics import ContractError, NonFiniteError, ParamSet, Tape, Tensor
from .objectives import LossBreakdown, bce_t, losses_from_output
from .text import Vocab

log = logging.getLogger(__name__)

CKPT_FORMAT, CKPT_VERSION = "barl-ckpt", 1
MODEL_KINDS = ("barl",) + BASELINE_KINDS


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    checkpoint_path: str | None = None
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if not self.lr >= 0:
            raise ConfigError("lr must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.batch_size < 2 and (self.model.use_qntc or self.model.use_intc):
            raise ConfigError("batch_size must be >= 2 when a contrastive term is on")

    def replace(self, **kw) -> TrainConfig:
        return dataclasses.replace(self, **kw)


@dataclass
class Batch:
    pairs: list[LabeledPair]
    inputs: PairInputs
    labels: np.ndarray

    def __len__(self):
        return len(self.pairs)


def make_batches(ds: Dataset, g: BehaviorGraph, vocab: Vocab, cfg: ModelConfig, seed: int,
                 batch_size: int = 32, featurizer: Featurizer | None = None) -> list[Batch]:
    """Seeded shuffle of ``ds`` into batches with neighbors looked up from ``g``."""
    if not ds:
        raise ContractError("make_batches needs a non-empty dataset")
    feat = featurizer or Featurizer(vocab, cfg, g)
    order = np.random.default_rng(seed).permutation(len(ds))
    batches = []
    for lo in range(0, len(ds), batch_size):
        pairs = [ds[j] for j in order[lo: lo + batch_size]]
        batches.append(Batch(pairs, feat.inputs(pairs), feat.labels(pairs)))
    return batches


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_update(params: ParamSet, state: AdamState, lr: float, beta1: float = 0.9,
                beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam step using each parameter's ``.grad``."""
    t = state.step + 1
    c1, c2 = 1.0 - beta1 ** t, 1.0 - beta2 ** t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - beta1) * g if m is None else beta1 * m + (1 - beta1) * g
        v = (1 - beta2) * g * g if v is None else beta2 * v + (1 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        if lr:
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    state.step = t
    return state


def _batch_loss(kind: str, params: ParamSet, cfg: ModelConfig, batch: Batch) -> LossBreakdown:
    if kind == "barl":
        out = forward_batch(params, cfg, batch.inputs)
        return losses_from_output(out, batch.inputs, batch.labels, cfg)
    scores = baseline_batch(kind, params, cfg, batch.inputs.queries, batch.inputs.items)
    loss = bce_t(scores, batch.labels)
    return LossBreakdown(l_sup_q=loss.item(), total=loss.item(), node=loss)


def train_step(params: ParamSet, batch: Batch, opt_state: AdamState, train_cfg: TrainConfig,
               kind: str = "barl"):
    """Forward, backward and one Adam update. Returns ``(params, opt_state, LossBreakdown)``."""
    params.zero_grad()
    with Tape() as tape:
        lb = _batch_loss(kind, params, train_cfg.model, batch)
    for name in LossBreakdown.FIELDS:
        if not math.isfinite(getattr(lb, name)):
            raise NonFiniteError(f"non-finite loss term {name}")
    nx.backward(tape, lb.node)
    adam_update(params, opt_state, train_cfg.lr, train_cfg.beta1, train_cfg.beta2, train_cfg.eps)
    lb.node = None
    return params, opt_state, lb


def init_for(kind: str, cfg: ModelConfig, seed: int, vocab: Vocab) -> ParamSet:
    if kind == "barl":
        return init_params(cfg, seed, vocab.fingerprint())
    return init_baseline_params(kind, cfg, seed, vocab.fingerprint())


@dataclass
class TrainResult:
    params: ParamSet
    history: list[LossBreakdown]  # per-epoch means
    steps: list[tuple[int, int, LossBreakdown]]
    opt_state: AdamState


def train(ds: Dataset, g: BehaviorGraph, vocab: Vocab, train_cfg: TrainConfig, kind: str = "barl",
          params: ParamSet | None = None) -> TrainResult:
    """``epochs`` passes of seeded batches; a checkpoint is written after every epoch."""
    if kind not in MODEL_KINDS:
        raise ConfigError(f"unknown model kind {kind!r}")
    cfg = train_cfg.model
    if params is None:
        params = init_for(kind, cfg, train_cfg.seed, vocab)
    opt = AdamState()
    feat = Featurizer(vocab, cfg, g)
    history, steps = [], []
    for epoch in range(train_cfg.epochs):
        batches = make_batches(ds, g, vocab, cfg, seed=train_cfg.seed * 1000 + epoch,
                               batch_size=train_cfg.batch_size, featurizer=feat)
        losses = []
        for step, batch in enumerate(batches):
            if len(batch) < 2 and kind == "barl" and (cfg.use_qntc or cfg.use_intc):
                continue  # trailing singleton cannot form in-batch negatives
            _, _, lb = train_step(params, batch, opt, train_cfg, kind)
            losses.append(lb)
            steps.append((epoch, step, lb))
        mean = LossBreakdown.mean(losses)
        history.append(mean)
        log.info("%s epoch %d: total %.4f", kind, epoch, mean.total)
        if train_cfg.checkpoint_path:
            save_checkpoint(train_cfg.checkpoint_path, params, cfg, kind, opt)
    return TrainResult(params, history, steps, opt)


# ---------------------------------------------------------------------------
# checkpoints


def dumps_checkpoint(params: ParamSet, cfg: ModelConfig, kind: str = "barl",
                     opt_state: AdamState | None = None) -> bytes:
    tensors = [(name, t.data) for name, t in params.items()]
    if opt_state is not None:
        tensors += [(f"adam.m/{n}", opt_state.m[n]) for n in sorted(opt_state.m)]
        tensors += [(f"adam.v/{n}", opt_state.v[n]) for n in sorted(opt_state.v)]
    header = {"format": CKPT_FORMAT, "version": CKPT_VERSION, "config": cfg.to_json(), "kind": kind,
              "seed": params.rng_seed, "vocab": params.meta.get("vocab", ""),
              "adam_step": None if opt_state is None else opt_state.step, "n_tensors": len(tensors)}
    buf = io.BytesIO()
    buf.write((json.dumps(header, sort_keys=True) + "\n").encode())
    for name, arr in tensors:
        buf.write((json.dumps({"name": name, "shape": list(arr.shape)}, sort_keys=True) + "\n").encode())
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def loads_checkpoint(blob: bytes):
    """Inverse of :func:`dumps_checkpoint`: ``(params, cfg, kind, opt_state | None)``."""
    stream = io.BytesIO(blob)
    header = json.loads(stream.readline())
    if header.get("format") != CKPT_FORMAT or header.get("version") != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint header: {header.get('format')!r} v{header.get('version')!r}")
    cfg = ModelConfig.from_json(header["config"])
    entries, opt = {}, None
    if header["adam_step"] is not None:
        opt = AdamState(step=header["adam_step"])
    for _ in range(header["n_tensors"]):
        meta = json.loads(stream.readline())
        shape = tuple(meta["shape"])
        n = int(np.prod(shape)) if shape else 1
        raw = stream.read(8 * n)
        if len(raw) != 8 * n:
            raise ValueError(f"truncated checkpoint at tensor {meta['name']!r}")
        arr = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
        name = meta["name"]
        if name.startswith("adam.m/"):
            opt.m[name[7:]] = arr
        elif name.startswith("adam.v/"):
            opt.v[name[7:]] = arr
        else:
            entries[name] = Tensor(arr, requires_grad=True)
    if stream.read(1):
        raise ValueError("trailing bytes after last tensor")
    params = ParamSet(entries, rng_seed=header["seed"], meta={"kind": header["kind"], "vocab": header["vocab"]})
    return params, cfg, header["kind"], opt


def save_checkpoint(path, params: ParamSet, cfg: ModelConfig, kind: str = "barl",
                    opt_state: AdamState | None = None):
    atomic_write(path, dumps_checkpoint(params, cfg, kind, opt_state))


def load_checkpoint(path):
    return loads_checkpoint(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# key=value config files and loss history


def parse_kv(text: str, source: str = "<config>") -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = val
    return out


def _coerce(value: str, typ, key: str):
    typ = str(typ)
    try:
        if "bool" in typ:
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if "int" in typ:
            return int(value)
        if "float" in typ:
            return float(value)
        if "None" in typ and value.lower() in ("", "none"):
            return None
        return value
    except ValueError:
        raise ConfigError(f"bad value for {key}: {value!r}") from None


def dataclass_from_kv(cls, kv: dict[str, str]):
    fields = {f.name: f.type for f in dataclasses.fields(cls)}
    unknown = set(kv) - set(fields)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return cls(**{k: _coerce(v, fields[k], k) for k, v in kv.items()})


MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)}
TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)} - {"model"}


def train_config_from_kv(kv: dict[str, str]) -> TrainConfig:
    """Training and model keys share one flat namespace; unknown keys are errors."""
    unknown = set(kv) - MODEL_KEYS - TRAIN_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    model = dataclass_from_kv(ModelConfig, {k: v for k, v in kv.items() if k in MODEL_KEYS})
    tkv = {k: v for k, v in kv.items() if k in TRAIN_KEYS}
    fields = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    return TrainConfig(model=model, **{k: _coerce(v, fields[k], k) for k, v in tkv.items()})


HISTORY_HEADER = "epoch,step," + ",".join(LossBreakdown.FIELDS)


def history_csv(steps) -> str:
    lines = [HISTORY_HEADER]
    for epoch, step, lb in steps:
        lines.append(f"{epoch},{step}," + ",".join(repr(float(x)) for x in lb.as_row()))
    return "\n".join(lines) + "\n"
