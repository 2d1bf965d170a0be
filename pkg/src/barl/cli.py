"""Command-line pipeline: gen -> ingest -> train -> eval -> ablate -> bench, plus describe.

Every command takes ``--config PATH --out DIR [--seed N]``. Configs are flat
``key = value`` files; relative paths inside them resolve against the
config file's directory. Exit codes: 0 success, 1 runtime failure, 2 usage
or config error.
"""

from __future__ import annotations

import os

# BLAS thread cap; only effective when numpy has not been imported yet
_THREADS = os.environ.get("BARL_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, _THREADS)

import argparse  # noqa: E402
import dataclasses  # noqa: E402
import hashlib  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from datetime import datetime, timezone  # noqa: E402
from pathlib import Path  # noqa: E402

from . import __version__  # noqa: E402
from .behavior_graph import (GRAPH_FORMAT, coverage_stats, dumps_click_log, ingest_log, load_graph,  # noqa: E402
                             read_click_log, save_graph)
from .dataset import atomic_write, read_dataset, write_dataset  # noqa: E402
from .datagen import SyntheticConfig, describe, generate  # noqa: E402
from .evaluation import (REPORT_VERSION, VARIANTS, BarlPlusScorer, BarlScorer, BaselineScorer,  # noqa: E402
                         dumps_json, evaluate, latency_bench, run_ablations)
from .model import ConfigError  # noqa: E402
from .text import VOCAB_HEADER, Vocab, build_vocab  # noqa: E402
from .training import (CKPT_FORMAT, CKPT_VERSION, MODEL_KEYS, TRAIN_KEYS, _coerce, dataclass_from_kv,  # noqa: E402
                       history_csv, load_checkpoint, parse_kv, save_checkpoint, train,
                       train_config_from_kv)

log = logging.getLogger("barl")

COMMANDS = ("gen", "ingest", "train", "eval", "ablate", "bench", "describe")
MANIFEST = "run-manifest.json"
FORMATS = {
    "dataset": "jsonl-v1",
    "click_log": "jsonl-v1",
    "graph": f"{GRAPH_FORMAT['format']}-v{GRAPH_FORMAT['version']}",
    "checkpoint": f"{CKPT_FORMAT}-v{CKPT_VERSION}",
    "vocab": VOCAB_HEADER.lstrip("#").replace(" ", "-"),
    "report": f"barl-report-v{REPORT_VERSION}",
}

# keys holding file paths, per command; value True = required
PATH_KEYS = {
    "gen": {},
    "ingest": {"clicks": True, "data": False},
    "train": {"train_data": True, "graph": True},
    "eval": {"model": True, "vocab": True, "graph": True, "data": True, "baseline": False},
    "ablate": {"train_data": True, "test_data": True, "graph": True},
    "bench": {"model": True, "vocab": True, "graph": True, "data": True},
    "describe": {"data": True},
}
EXTRA_KEYS = {
    "gen": {f.name: f.type for f in dataclasses.fields(SyntheticConfig)},
    "ingest": {"k_neighbors": "int", "exclude_counterpart": "bool"},
    "train": {"kind": "str"},
    "eval": {"threshold": "float"},
    "ablate": {"seeds": "str", "variants": "str"},
    "bench": {"n_warmup": "int", "n_measure": "int"},
    "describe": {},
}
TRAINING_COMMANDS = ("train", "ablate")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# config handling


def load_config(command: str, path: str, seed: int | None) -> tuple[dict[str, str], Path]:
    cfg_path = Path(path)
    if not cfg_path.is_file():
        raise UsageError(f"config file not found: {path}")
    kv = parse_kv(cfg_path.read_text(encoding="utf-8"), str(cfg_path))
    allowed = set(PATH_KEYS[command]) | set(EXTRA_KEYS[command])
    if command in TRAINING_COMMANDS:
        allowed |= (MODEL_KEYS | TRAIN_KEYS) - {"checkpoint_path"}
    unknown = sorted(set(kv) - allowed)
    if unknown:
        raise ConfigError(f"{path}: unknown config keys for '{command}': {unknown}")
    missing = sorted(k for k, req in PATH_KEYS[command].items() if req and k not in kv)
    if missing:
        raise ConfigError(f"{path}: missing required keys for '{command}': {missing}")
    if seed is not None:
        kv["seed" if command != "ablate" else "seeds"] = str(seed)
    return kv, cfg_path.parent


def _path(kv, base: Path, key: str) -> Path | None:
    if key not in kv:
        return None
    p = Path(kv[key])
    return p if p.is_absolute() else base / p


def _extra(kv, command: str, key: str, default):
    if key not in kv:
        return default
    return _coerce(kv[key], EXTRA_KEYS[command][key], key)


def config_hash(command: str, kv: dict[str, str]) -> str:
    blob = json.dumps({"command": command, "config": kv}, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


# ---------------------------------------------------------------------------
# commands; each writes under --out and returns (output file names, seed)


def cmd_gen(kv, base, out: Path):
    cfg = dataclass_from_kv(SyntheticConfig, {k: v for k, v in kv.items()})
    world = generate(cfg)
    for name, ds in (("train", world.train), ("valid", world.valid), ("test", world.test)):
        write_dataset(out / f"{name}.jsonl", ds)
    atomic_write(out / "clicks.jsonl", dumps_click_log(world.clicks))
    log.info("generated %d/%d/%d pairs and %d click records", len(world.train), len(world.valid),
             len(world.test), len(world.clicks))
    return ["train.jsonl", "valid.jsonl", "test.jsonl", "clicks.jsonl"], cfg.seed


def cmd_ingest(kv, base, out: Path):
    with open(_path(kv, base, "clicks"), encoding="utf-8") as fh:
        g = ingest_log(read_click_log(fh))
    save_graph(g, out / "graph.jsonl")
    outputs = ["graph.jsonl"]
    data = _path(kv, base, "data")
    if data is not None:
        rep = coverage_stats(g, read_dataset(data), _extra(kv, "ingest", "k_neighbors", 5),
                             _extra(kv, "ingest", "exclude_counterpart", False))
        atomic_write(out / "coverage.json", dumps_json({"version": REPORT_VERSION, **rep.to_json()}))
        outputs.append("coverage.json")
    return outputs, None


def _train_config(kv):
    return train_config_from_kv({k: v for k, v in kv.items() if k in MODEL_KEYS | TRAIN_KEYS})


def _vocab_and_config(kv, ds):
    tc = _train_config(kv)
    vocab = build_vocab([p.query for p in ds] + [p.item for p in ds], tc.model.vocab_size)
    # the embedding table is sized to the vocabulary actually built
    return vocab, tc.replace(model=tc.model.replace(vocab_size=len(vocab)))


def cmd_train(kv, base, out: Path):
    ds = read_dataset(_path(kv, base, "train_data"))
    g = load_graph(_path(kv, base, "graph"))
    vocab, tc = _vocab_and_config(kv, ds)
    kind = _extra(kv, "train", "kind", "barl")
    atomic_write(out / "vocab.txt", vocab.dumps())
    res = train(ds, g, vocab, tc.replace(checkpoint_path=str(out / "model.ckpt")), kind)
    if tc.epochs == 0:  # no epoch ran, so no checkpoint was written yet
        save_checkpoint(out / "model.ckpt", res.params, tc.model, kind, res.opt_state)
    atomic_write(out / "history.csv", history_csv(res.steps))
    return ["vocab.txt", "model.ckpt", "history.csv"], tc.seed


def _load_scorer(kv, base, command):
    params, cfg, kind, _ = load_checkpoint(_path(kv, base, "model"))
    vocab = Vocab.loads(_path(kv, base, "vocab").read_text(encoding="utf-8"))
    g = load_graph(_path(kv, base, "graph"))
    baseline = _path(kv, base, "baseline") if command == "eval" else None
    if kind == "barl" and baseline is not None:
        bparams, _, bkind, _ = load_checkpoint(baseline)
        return BarlPlusScorer(params, bparams, cfg, vocab, g, bkind), "barl+"
    if kind == "barl":
        return BarlScorer(params, cfg, vocab, g), kind
    return BaselineScorer(kind, params, cfg, vocab, g), kind


def cmd_eval(kv, base, out: Path):
    scorer, name = _load_scorer(kv, base, "eval")
    ev = evaluate(scorer, read_dataset(_path(kv, base, "data")), _extra(kv, "eval", "threshold", 0.5))
    atomic_write(out / "metrics.json", dumps_json({"model": name, **ev.to_json()}))
    for split, rep in ev.reports.items():
        log.info("%-14s n=%-5d auc=%s f1=%.4f", split, rep.n_examples, rep.auc, rep.f1)
    return ["metrics.json"], None


def cmd_ablate(kv, base, out: Path):
    ds_train = read_dataset(_path(kv, base, "train_data"))
    ds_test = read_dataset(_path(kv, base, "test_data"))
    g = load_graph(_path(kv, base, "graph"))
    vocab, tc = _vocab_and_config({k: v for k, v in kv.items() if k not in ("seeds", "variants")}, ds_train)
    try:
        seeds = [int(s) for s in kv.get("seeds", "0,1,2").split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"bad value for seeds: {kv['seeds']!r}") from None
    variants = [v.strip() for v in kv["variants"].split(",")] if "variants" in kv else list(VARIANTS)
    bad = [v for v in variants if v not in VARIANTS]
    if bad:
        raise ConfigError(f"unknown ablation variants: {bad}")
    table = run_ablations(ds_train, ds_test, g, vocab, tc, seeds, variants,
                          progress=lambda n, s, r: log.info("%-10s seed %d auc=%s", n, s, r.auc))
    atomic_write(out / "ablation.csv", table.to_csv())
    atomic_write(out / "ablation.json", dumps_json(table.to_json()))
    return ["ablation.csv", "ablation.json"], seeds[0] if seeds else None


def cmd_bench(kv, base, out: Path):
    scorer, name = _load_scorer(kv, base, "bench")
    rep = latency_bench(scorer, read_dataset(_path(kv, base, "data")), _extra(kv, "bench", "n_warmup", 20),
                        _extra(kv, "bench", "n_measure", 200))
    atomic_write(out / "latency.json", dumps_json({"model": name, **rep.to_json()}))
    log.info("mean %.2f ms, p50 %.2f ms, p99 %.2f ms", rep.mean_ms, rep.p50_ms, rep.p99_ms)
    return ["latency.json"], None


def cmd_describe(kv, base, out: Path):
    stats = {}
    for raw in kv["data"].split(","):
        p = Path(raw.strip())
        p = p if p.is_absolute() else base / p
        stats[p.name] = describe(read_dataset(p)).to_json()
    atomic_write(out / "stats.json", dumps_json({"version": REPORT_VERSION, "datasets": stats}))
    return ["stats.json"], None


HANDLERS = {"gen": cmd_gen, "ingest": cmd_ingest, "train": cmd_train, "eval": cmd_eval,
            "ablate": cmd_ablate, "bench": cmd_bench, "describe": cmd_describe}


def write_manifest(out: Path, command: str, kv: dict[str, str], seed, outputs: list[str]):
    digests = {name: hashlib.sha256((out / name).read_bytes()).hexdigest() for name in outputs}
    manifest = {
        "command": command,
        "config": kv,
        "config_hash": config_hash(command, kv),
        "seed": seed,
        "formats": FORMATS,
        "package_version": __version__,
        "threads": int(_THREADS) if _THREADS.isdigit() else _THREADS,
        "outputs": digests,
        "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    atomic_write(out / MANIFEST, dumps_json(manifest))


# ---------------------------------------------------------------------------
# entry points


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="barl", description="Behavior-augmented relevance pipeline.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="flat key=value config file")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="overrides the config's seed")
    return ap


def run(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(message)s")
    if not _THREADS.isdigit() or int(_THREADS) < 1:
        print(f"barl: BARL_THREADS must be a positive integer, got {_THREADS!r}", file=sys.stderr)
        return 2
    try:
        kv, base = load_config(args.command, args.config, args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        outputs, seed = HANDLERS[args.command](kv, base, out)
        if seed is None and "seed" in kv:
            seed = int(kv["seed"])
        write_manifest(out, args.command, kv, seed, outputs)
    except (UsageError, ConfigError) as exc:
        print(f"barl {args.command}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure: diagnostic, no traceback
        print(f"barl {args.command}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run())
