import logging
import os
from typing import Dict, Optional

import requests

from memory.context import ContextProvider

logger = logging.getLogger(__name__)


class HttpContextProvider(ContextProvider):
    """GET endpoint returning the signal value as plain text."""

    def __init__(self, url: str, headers: Optional[Dict[str, str]] = None, ttl_ms: Optional[int] = None,
                 timeout_s: float = 2.0):
        self.url = url
        self.headers = headers or {}
        self.ttl_ms = ttl_ms
        self.timeout_s = timeout_s

    def fetch(self, user_id, now_ms):
        headers = {k: os.path.expandvars(v) for k, v in self.headers.items()}
        params = {"user_id": user_id, "now_ms": now_ms}
        try:
            response = requests.get(self.url, params=params, headers=headers, timeout=self.timeout_s)
            logger.debug(f"Context endpoint {self.url} status: {response.status_code}")
            if response.status_code != 200:
                logger.error(f"Context endpoint error: {response.text}")
                return None
            value = response.text.strip()
            return value or None
        except requests.RequestException as e:
            logger.error(f"Error calling context endpoint {self.url}: {str(e)}")
            return None
