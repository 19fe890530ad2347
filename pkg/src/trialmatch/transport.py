"""JSON-over-HTTP POST with bounded retries and exponential backoff."""

from __future__ import annotations

import logging
import time
from typing import Any, Callable, Optional

import httpx

from .errors import BackendUnavailable, Timeout

logger = logging.getLogger(__name__)

DEFAULT_RETRIES = 2
DEFAULT_TIMEOUT = 60.0
BACKOFF_BASE = 0.5
BACKOFF_CAP = 8.0


def backoff_delay(attempt: int, base: float = BACKOFF_BASE) -> float:
    return min(BACKOFF_CAP, base * (2 ** attempt))


def post_with_retries(
    url: str,
    payload: dict,
    *,
    retries: int = DEFAULT_RETRIES,
    timeout: float = DEFAULT_TIMEOUT,
    client: Optional[httpx.Client] = None,
    accept: Callable[[httpx.Response], Any] = lambda r: r,
    backoff: float = BACKOFF_BASE,
    sleep: Callable[[float], None] = time.sleep,
) -> Any:
    """POST ``payload`` up to ``retries + 1`` times.

    ``accept`` turns a response into the caller's value; returning ``None``
    (e.g. an empty completion) counts as a failed attempt and is retried.
    Raises :class:`Timeout` if the last failure was a timeout, otherwise
    :class:`BackendUnavailable`.
    """
    if retries < 0:
        raise ValueError("retries must be >= 0")
    owned = client is None
    client = client or httpx.Client(timeout=timeout)
    last: Optional[Exception] = None
    try:
        for attempt in range(retries + 1):
            if attempt:
                sleep(backoff_delay(attempt - 1, backoff))
            try:
                resp = client.post(url, json=payload, timeout=timeout)
                resp.raise_for_status()
            except httpx.TimeoutException as exc:
                last = Timeout(f"{url}: {exc}")
            except httpx.HTTPError as exc:
                last = BackendUnavailable(f"{url}: {exc}")
            else:
                value = accept(resp)
                if value is not None:
                    return value
                last = BackendUnavailable(f"{url}: empty response")
            logger.warning("attempt %d/%d to %s failed: %s", attempt + 1, retries + 1, url, last)
    finally:
        if owned:
            client.close()
    assert last is not None
    raise last
