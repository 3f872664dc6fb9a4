"""Artifact files with an embedded provenance header, written atomically.

CSV artifacts start with one ``# {json}`` comment line; JSON artifacts carry
the same record under ``"_meta"``. The record holds the format version, the
config hash and the seed. Readers refuse other format versions.
"""

from __future__ import annotations

import csv
import io
import json
import os
from pathlib import Path

from .exceptions import FormatError

FORMAT_VERSION = 1


def artifact_meta(config_hash: str, seed: int, kind: str, **extra) -> dict:
    return {"format_version": FORMAT_VERSION, "kind": kind, "config_hash": config_hash, "seed": seed, **extra}


def atomic_write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)
    return path


def write_csv(path, header, rows, meta: dict | None = None) -> Path:
    buf = io.StringIO()
    if meta is not None:
        buf.write("# " + json.dumps(meta, sort_keys=True) + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return atomic_write_text(path, buf.getvalue())


def write_json(path, payload: dict, meta: dict | None = None) -> Path:
    body = dict(payload)
    if meta is not None:
        body["_meta"] = meta
    return atomic_write_text(path, json.dumps(body, sort_keys=True, indent=1, allow_nan=False) + "\n")


def _check(meta: dict | None, path, kind: str | None) -> dict:
    if meta is None:
        raise FormatError(f"{path} has no provenance header")
    if meta.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{path} has format version {meta.get('format_version')}, expected {FORMAT_VERSION}")
    if kind is not None and meta.get("kind") != kind:
        raise FormatError(f"{path} holds {meta.get('kind')!r}, expected {kind!r}")
    return meta


def read_csv_meta(path, kind: str | None = None, required: bool = True) -> dict | None:
    """Provenance record of a CSV artifact; ``None`` for plain input files when not required."""
    with open(path, newline="") as fh:
        first = fh.readline()
    meta = None
    if first.startswith("# "):
        try:
            meta = json.loads(first[2:])
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path} has a malformed header line") from exc
    if meta is None and not required:
        return None
    return _check(meta, path, kind)


def read_json(path, kind: str | None = None) -> tuple[dict, dict]:
    body = json.loads(Path(path).read_text())
    meta = body.pop("_meta", None)
    return body, _check(meta, path, kind)


def read_csv_rows(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        reader = csv.reader(line for line in fh if not line.startswith("#"))
        header = next(reader)
        return header, list(reader)
