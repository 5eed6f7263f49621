"""Recursive content hash of an output tree, ignoring timing fields."""

import hashlib
import json
from pathlib import Path

TIMING_MARKERS = ("wall_time", "timing")


def _strip(value):
    if isinstance(value, dict):
        return {k: _strip(v) for k, v in value.items() if not any(m in k for m in TIMING_MARKERS)}
    if isinstance(value, list):
        return [_strip(v) for v in value]
    return value


def file_digest(path: Path) -> str:
    raw = path.read_bytes()
    if path.suffix == ".json":
        try:
            raw = json.dumps(_strip(json.loads(raw)), sort_keys=True).encode()
        except ValueError:
            pass
    return hashlib.sha256(raw).hexdigest()


def tree_digest(root) -> dict[str, str]:
    """``relative path -> digest`` for every file under ``root``."""
    root = Path(root)
    return {p.relative_to(root).as_posix(): file_digest(p) for p in sorted(root.rglob("*")) if p.is_file()}
