"""Minimal JSON-over-HTTP client shared by the optional external-service slots."""

from __future__ import annotations

import json
import urllib.error
import urllib.request

from .errors import RemoteError, SchemaError


def post_json(endpoint: str, payload: dict, timeout: float = 30.0, ref: str | None = None) -> dict:
    """POST ``payload`` and return the decoded JSON object reply."""
    body = json.dumps(payload).encode()
    req = urllib.request.Request(endpoint, data=body, headers={"Content-Type": "application/json"}, method="POST")
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            status = resp.status
            raw = resp.read()
    except urllib.error.HTTPError as exc:
        raise RemoteError(f"service returned HTTP {exc.code}", ref) from exc
    except (urllib.error.URLError, TimeoutError, OSError) as exc:
        raise RemoteError(f"service unreachable: {exc}", ref) from exc
    if status != 200:
        raise RemoteError(f"service returned HTTP {status}", ref)
    try:
        obj = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"service reply for {ref} is not JSON") from exc
    if not isinstance(obj, dict):
        raise SchemaError(f"service reply for {ref} must be a JSON object")
    return obj
