from __future__ import annotations

from fastapi import Header

from zdalab.errors import APIError
from zdalab.settings import get_settings


def api_key_guard(x_api_key: str | None = Header(default=None, alias="X-API-Key")) -> None:
    """Require X-API-Key only when API_KEY is configured; open service otherwise."""
    expected = get_settings().api_key
    if not expected:
        return
    if not x_api_key:
        raise APIError(401, "missing_api_key", "X-API-Key header is required")
    if x_api_key != expected:
        raise APIError(403, "invalid_api_key", "X-API-Key is invalid")
