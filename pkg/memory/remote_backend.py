import logging
import os
import threading
from typing import Dict, Optional

import requests

from memory.backend import GenerationBackend, check_messages
from memory.errors import BackendError

logger = logging.getLogger(__name__)

DEFAULT_MAX_IN_FLIGHT = 4


class RemoteChatBackend(GenerationBackend):
    """Chat endpoint taking {"messages": [...]} and answering {"content": ...}.

    Header values may reference environment variables ("Bearer $API_TOKEN").
    """

    def __init__(self, url: str, headers: Optional[Dict[str, str]] = None, timeout_s: float = 30.0,
                 max_in_flight: int = DEFAULT_MAX_IN_FLIGHT):
        if not url:
            raise ValueError("Remote backend needs a URL")
        self.url = url
        self.headers = headers or {}
        self.timeout_s = timeout_s
        self._slots = threading.BoundedSemaphore(max_in_flight)

    def _expanded_headers(self) -> Dict[str, str]:
        headers = {"Content-Type": "application/json"}
        headers.update({k: os.path.expandvars(v) for k, v in self.headers.items()})
        return headers

    def generate(self, messages, seed=0):
        check_messages(messages)
        payload = {"messages": [m.to_dict() for m in messages], "seed": seed}
        with self._slots:
            try:
                response = requests.post(self.url, json=payload, headers=self._expanded_headers(),
                                         timeout=self.timeout_s)
            except requests.RequestException as e:
                logger.error(f"Chat endpoint unreachable: {str(e)}")
                raise BackendError(f"Chat endpoint unreachable: {e}")

        logger.debug(f"Chat endpoint response status: {response.status_code}")
        if response.status_code != 200:
            retry_after = response.headers.get("Retry-After")
            try:
                retry_after = float(retry_after) if retry_after is not None else None
            except ValueError:
                retry_after = None
            logger.error(f"Chat endpoint error {response.status_code}: {response.text}")
            raise BackendError(f"Chat endpoint returned {response.status_code}", response.status_code, retry_after)
        try:
            content = response.json()["content"]
        except (ValueError, KeyError, TypeError) as e:
            raise BackendError(f"Malformed chat endpoint response: {e}", response.status_code)
        return str(content)
