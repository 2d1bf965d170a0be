"""Labeled query/item pairs and their JSON Lines representation."""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path


@dataclass(frozen=True)
class LabeledPair:
    query_id: str
    query: str
    item_id: str
    item: str
    label: int  # 1 = Good, 0 = Bad

    def to_json(self) -> dict:
        return {"query_id": self.query_id, "query": self.query, "item_id": self.item_id,
                "item": self.item, "label": self.label}


class Dataset(list):
    """A list of :class:`LabeledPair` with a few helpers."""

    @property
    def labels(self) -> list[int]:
        return [p.label for p in self]


def read_dataset(path) -> Dataset:
    ds = Dataset()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                label = int(obj["label"])
                if label not in (0, 1):
                    raise ValueError(f"label must be 0 or 1, got {label}")
                ds.append(LabeledPair(str(obj["query_id"]), str(obj["query"]),
                                      str(obj["item_id"]), str(obj["item"]), label))
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed record ({exc})") from exc
    return ds


def dumps_jsonl(objs) -> str:
    return "".join(json.dumps(o, sort_keys=True, separators=(",", ":")) + "\n" for o in objs)


def atomic_write(path, data: str | bytes):
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"encoding": "utf-8", "newline": "\n"})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_dataset(path, ds):
    atomic_write(path, dumps_jsonl(p.to_json() for p in ds))
