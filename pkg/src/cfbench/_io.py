"""Canonical JSON helpers shared by every stage that writes files."""

from __future__ import annotations

import json
import os
import threading
from pathlib import Path
from typing import Any

_write_locks: dict[str, threading.Lock] = {}
_registry_lock = threading.Lock()


def dumps(obj: Any) -> str:
    """Serialize ``obj`` the same way every time (key order as built, 2-space indent)."""
    return json.dumps(obj, indent=2, ensure_ascii=False, allow_nan=False) + "\n"


def compact(obj: Any) -> str:
    """Single-line form used inside LLM payloads and hashes."""
    return json.dumps(obj, ensure_ascii=False, sort_keys=True, separators=(",", ":"))


def _lock_for(path: Path) -> threading.Lock:
    key = os.path.abspath(path)
    with _registry_lock:
        return _write_locks.setdefault(key, threading.Lock())


def write_json(path: str | os.PathLike, obj: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with _lock_for(path):
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(dumps(obj), encoding="utf-8")
        os.replace(tmp, path)
    return path


def write_text(path: str | os.PathLike, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with _lock_for(path):
        path.write_text(text, encoding="utf-8")
    return path


def read_json(path: str | os.PathLike) -> Any:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)
