"""Atomic file output and the JSON layouts shared by the CLI."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path
from typing import Iterable

from .geometry import Box
from .synthetic import Scene


def atomic_write(path, text: str) -> None:
    """Write ``text`` to a temporary file next to ``path`` and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def scenes_to_json(scenes: Iterable[Scene], categories: int) -> str:
    return dump_json({"n_categories": categories, "scenes": [s.to_dict() for s in scenes]})


def load_scenes(path) -> tuple[list[Scene], int]:
    d = json.loads(Path(path).read_text())
    return [Scene.from_dict(s) for s in d["scenes"]], int(d["n_categories"])


def proposals_to_json(proposals: dict[str, list]) -> str:
    """``proposals`` maps scene id to a list of boxes (``Box`` or 4-sequences)."""
    out = {
        sid: [b.to_list() if isinstance(b, Box) else [float(v) for v in b] for b in boxes]
        for sid, boxes in proposals.items()
    }
    return dump_json({"proposals": out})


def load_proposals(path) -> dict[str, list[list[float]]]:
    return json.loads(Path(path).read_text())["proposals"]
