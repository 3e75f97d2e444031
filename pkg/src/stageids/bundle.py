"""Versioned text container for models and reports.

Line 1 is ``stageids-<kind> v<version>``; the rest is canonical JSON
(sorted keys, fixed separators). Floats are written with ``repr`` so a
write/read round trip is bit-exact.
"""

import json
from pathlib import Path

from .errors import BundleFormatError

FORMAT_VERSION = 1


def dumps(kind: str, payload: dict) -> str:
    body = json.dumps(payload, sort_keys=True, separators=(",", ":"), allow_nan=False)
    return f"stageids-{kind} v{FORMAT_VERSION}\n{body}\n"


def write(path, kind: str, payload: dict) -> None:
    Path(path).write_text(dumps(kind, payload), encoding="utf-8")


def read(path, kind: str) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    head, _, body = text.partition("\n")
    expected = f"stageids-{kind} v{FORMAT_VERSION}"
    if head.strip() != expected:
        raise BundleFormatError(f"{path}: expected header {expected!r}, found {head.strip()!r}")
    try:
        return json.loads(body)
    except json.JSONDecodeError as exc:
        raise BundleFormatError(f"{path}: corrupt body ({exc})") from None
