"""Client for an external captioning service, with a deterministic offline mode."""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import time
import urllib.error
import urllib.request
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from .config import CaptionConfig
from .errors import CaptionUnavailableError

logger = logging.getLogger(__name__)


@dataclass
class CaptionRequest:
    images: list  # paths of pre-rendered views, 2x2 collage order
    template: str

    def __post_init__(self):
        if not 1 <= len(self.images) <= 4:
            raise ValueError("a caption request takes 1 to 4 images")
        if not self.template.strip():
            raise ValueError("prompt template is empty")

    def body(self) -> bytes:
        encoded = [base64.b64encode(Path(p).read_bytes()).decode("ascii") for p in self.images]
        return json.dumps({"images": encoded, "prompt": self.template}).encode("utf-8")


def mock_enabled() -> bool:
    return os.environ.get("CAPTION_MOCK") == "1"


def record_digest(record_json: str) -> str:
    return hashlib.sha256(record_json.encode("utf-8")).hexdigest()


def mock_caption(record_json: str) -> str:
    return f"mock caption {record_digest(record_json)[:12]}"


def _post(endpoint: str, body: bytes, timeout: float) -> str:
    req = urllib.request.Request(endpoint, data=body, method="POST",
                                 headers={"Content-Type": "application/json"})
    with urllib.request.urlopen(req, timeout=timeout) as resp:
        payload = json.loads(resp.read().decode("utf-8"))
    caption = payload.get("caption")
    if not isinstance(caption, str):
        raise ValueError("response has no caption field")
    return caption


def caption_request(record_json: str, images: Sequence = (), endpoint: Optional[str] = None,
                    cfg: CaptionConfig = None, mock: Optional[bool] = None, sleep=time.sleep) -> str:
    """Caption one shape.

    In mock mode (``CAPTION_MOCK=1`` or ``mock=True``) the caption is a placeholder
    derived from the record's JSON text. Otherwise the images and prompt template are
    POSTed to ``endpoint`` (default ``$CAPTION_ENDPOINT``); failures are retried with
    exponential backoff and then raise CaptionUnavailableError.
    """
    cfg = cfg or CaptionConfig()
    if mock if mock is not None else mock_enabled():
        return mock_caption(record_json)
    endpoint = endpoint or os.environ.get("CAPTION_ENDPOINT")
    if not endpoint:
        raise CaptionUnavailableError("no caption endpoint configured")
    body = CaptionRequest(list(images), cfg.template).body()
    last = None
    for attempt in range(cfg.retries):
        try:
            return _post(endpoint, body, cfg.timeout)
        except (urllib.error.URLError, OSError, ValueError) as exc:
            last = exc
            logger.warning("caption attempt %d/%d failed: %s", attempt + 1, cfg.retries, exc)
            if attempt + 1 < cfg.retries:
                sleep(cfg.backoff * 2 ** attempt)
    raise CaptionUnavailableError(f"caption service failed after {cfg.retries} attempts: {last}")
