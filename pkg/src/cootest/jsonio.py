"""Canonical JSON encoding shared by scene files, manifests, and reports.

Canonical form: sorted keys, 2-space indent, shortest round-trip float
repr (Python's default), UTF-8, LF newlines, trailing newline.  Writing
the same value twice therefore produces byte-identical files.
"""

from __future__ import annotations

import json
from pathlib import Path


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def write_canonical_json(path: Path, obj) -> None:
    path.write_text(canonical_json(obj), encoding="utf-8", newline="\n")


def read_json(path: Path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)
