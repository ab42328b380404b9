"""Shared HTTP plumbing for the remote model services."""
from __future__ import annotations

import os
import time

import requests

ENDPOINT_ENV = "OPENVOXEL_MODEL_ENDPOINT"


class TransportError(RuntimeError):
    """A remote model service could not be reached or replied abnormally."""


def resolve_endpoint(endpoint: str | None) -> str:
    endpoint = endpoint or os.environ.get(ENDPOINT_ENV, "")
    if not endpoint:
        raise TransportError(f"no endpoint configured (flag or {ENDPOINT_ENV})")
    return endpoint.rstrip("/")


def post_json(endpoint: str, path: str, payload: dict, timeout: float = 30.0,
              retries: int = 2) -> dict:
    url = endpoint.rstrip("/") + path
    last: Exception | None = None
    for attempt in range(retries + 1):
        try:
            resp = requests.post(url, json=payload, timeout=timeout)
            resp.raise_for_status()
            return resp.json()
        except (requests.RequestException, ValueError) as exc:
            last = exc
            if attempt < retries:
                time.sleep(0.2 * (attempt + 1))
    raise TransportError(f"POST {url} failed after {retries + 1} attempts: {last}")
