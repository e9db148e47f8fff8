"""Run artifacts (checkpoints, CSV tables, JSON-lines metrics), always written via temp file + rename."""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from collections.abc import Iterable, Sequence
from pathlib import Path

import numpy as np

from rnn_policy import CheckpointError, RnnParams, load_params, save_params


def write_atomic(path: str | Path, data: bytes | str) -> Path:
    """Write to a temp file in the target directory, then os.replace it over path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = data.encode("utf-8") if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise
    return path


def _plain(value):
    if isinstance(value, np.generic):
        return value.item()
    return value


def write_csv(path: str | Path, columns: Sequence[str], rows: Iterable[dict]) -> Path:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: repr(_plain(v)) if isinstance(_plain(v), float) else _plain(v) for k, v in row.items()})
    return write_atomic(path, buf.getvalue())


def write_jsonl(path: str | Path, records: Iterable[dict]) -> Path:
    lines = [json.dumps({k: _plain(v) for k, v in r.items()}, sort_keys=True) for r in records]
    return write_atomic(path, "".join(line + "\n" for line in lines))


def read_jsonl(path: str | Path) -> list[dict]:
    text = Path(path).read_text(encoding="utf-8")
    return [json.loads(line) for line in text.splitlines() if line.strip()]


def write_json(path: str | Path, data: dict) -> Path:
    return write_atomic(path, json.dumps({k: _plain(v) for k, v in data.items()}, indent=2, sort_keys=True) + "\n")


def save_checkpoint(path: str | Path, params: RnnParams) -> Path:
    return write_atomic(path, save_params(params))


def load_checkpoint(path: str | Path, expected_tag: str | None = None) -> RnnParams:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from None
    params = load_params(data)
    if expected_tag is not None and params.tag != expected_tag:
        raise CheckpointError(f"{path} holds a {params.tag} network, expected {expected_tag}")
    return params


def checkpoint_paths(out_dir: str | Path, label: str) -> tuple[Path, Path]:
    """(control, price) checkpoint paths, e.g. epoch_3_v.ckpt / epoch_3_pi.ckpt or final_v.ckpt."""
    base = Path(out_dir) / "checkpoints"
    return base / f"{label}_v.ckpt", base / f"{label}_pi.ckpt"
