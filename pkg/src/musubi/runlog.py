"""Run records shared by the command-line steps: logging setup and JSON manifests."""

from __future__ import annotations

import hashlib
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Mapping

from . import __version__

logger = logging.getLogger(__name__)


def utc_now_iso() -> str:
    return datetime.now(timezone.utc).replace(microsecond=0).isoformat()


def configure_logging(verbose: bool = False) -> None:
    """Route ``musubi.*`` records to stderr; idempotent across repeated calls."""

    root = logging.getLogger("musubi")
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    if not any(getattr(h, "_musubi", False) for h in root.handlers):
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        handler._musubi = True  # type: ignore[attr-defined]
        root.addHandler(handler)


def sha256_file(path: str | Path) -> str:
    digest = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(path: str | Path, payload: Mapping[str, Any], *, timestamp: bool = True) -> Path:
    """Write a step manifest; ``version`` and, unless disabled, ``created_utc`` are filled in here.

    Manifests written without a timestamp are a pure function of the payload.
    """

    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    manifest: dict[str, Any] = {"version": __version__}
    if timestamp:
        manifest["created_utc"] = utc_now_iso()
    manifest.update(payload)
    p.write_text(json.dumps(manifest, indent=2, default=str), encoding="utf-8")
    return p


def run_step(body: Callable[[], int]) -> int:
    """Run a CLI body, turning escaping exceptions into ``error: ...`` and status 1."""

    try:
        return body()
    except Exception as exc:
        logger.debug("step failed", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1
