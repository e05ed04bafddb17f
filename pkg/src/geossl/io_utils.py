"""Atomic file writes."""

import json
import os
import tempfile
from pathlib import Path

from .errors import TrainingAbort


def atomic_write_bytes(path, data):
    """Write ``data`` to ``path`` via a temp file and rename.

    On any OS error (disk full included) the temp file is removed and
    :class:`TrainingAbort` is raised; ``path`` keeps its previous content.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except OSError as exc:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise TrainingAbort(f"could not write {path}: {exc}", path=str(path)) from exc
    return path


def atomic_write_text(path, text):
    return atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path, obj):
    return atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)
