"""Captioner and caption-cleaner clients.

Live clients speak JSON over HTTP; fixture clients answer from JSON files so
experiments and tests run offline. The fixture files are:

``captioner.json``::

    {"<image_id>": "caption"}                       # any min_tokens
    {"<image_id>": {"0": "short", "40": "long..."}}  # per min_tokens

``cleaner.json``::

    {"<domain>": {"<caption>": "cleaned caption"}}
"""
from __future__ import annotations

import base64
import io
import json
import logging
import os
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable

import httpx
import numpy as np

log = logging.getLogger(__name__)

CAPTION_ENDPOINT_ENV = "TADP_CAPTION_ENDPOINT"
CLEANER_ENDPOINT_ENV = "TADP_CLEANER_ENDPOINT"
FIXTURE_DIR_ENV = "TADP_FIXTURE_DIR"


class CaptionServiceError(RuntimeError):
    pass


class FixtureMissError(CaptionServiceError, KeyError):
    pass


@dataclass
class RetryPolicy:
    attempts: int = 3
    backoff: float = 1.0
    sleep: Callable[[float], None] = time.sleep

    def run(self, fn, what: str):
        delay = self.backoff
        for attempt in range(1, self.attempts + 1):
            try:
                return fn()
            except (httpx.TransportError, httpx.HTTPStatusError) as exc:
                if attempt == self.attempts:
                    raise CaptionServiceError(f"{what} failed after {attempt} attempts: {exc}") from exc
                log.warning("%s failed (%s), retrying in %.1fs", what, exc, delay)
                self.sleep(delay)
                delay *= 2


def _image_png_b64(image) -> str:
    from PIL import Image

    if isinstance(image, (str, Path)):
        return base64.b64encode(Path(image).read_bytes()).decode("ascii")
    if not isinstance(image, Image.Image):
        arr = np.asarray(image)
        if arr.dtype != np.uint8:
            arr = np.clip(arr * 255.0, 0, 255).astype(np.uint8)
        image = Image.fromarray(arr)
    buf = io.BytesIO()
    image.save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


class CaptionerClient:
    model_id: str = "captioner"
    provenance: str = "live"

    def caption(self, image_id: str, image, min_tokens: int) -> str:
        raise NotImplementedError


class CleanerClient:
    model_id: str = "cleaner"
    provenance: str = "live"

    def clean(self, caption: str, target_domain: str) -> str:
        raise NotImplementedError


@dataclass
class HttpCaptionerClient(CaptionerClient):
    """POST ``{"model", "image" (base64 PNG), "min_length"}`` -> ``{"caption"}``."""

    endpoint: str
    model_id: str = "blip2-opt-2.7b"
    timeout: float = 60.0
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    transport: httpx.BaseTransport | None = None

    def caption(self, image_id: str, image, min_tokens: int) -> str:
        payload = {"model": self.model_id, "image": _image_png_b64(image), "min_length": int(min_tokens)}

        def call():
            with httpx.Client(timeout=self.timeout, transport=self.transport) as client:
                resp = client.post(self.endpoint, json=payload)
                resp.raise_for_status()
                return resp.json()["caption"]

        return self.retry.run(call, f"caption {image_id}").strip()


def load_cleaner_prompt(version: str = "v1") -> str:
    return resources.files("tadp.data").joinpath(f"cleaner_prompt_{version}.txt").read_text(encoding="utf-8")


@dataclass
class HttpCleanerClient(CleanerClient):
    """OpenAI-compatible chat-completions request built from the versioned prompt file."""

    endpoint: str
    model_id: str = "gpt-3.5-turbo"
    prompt_version: str = "v1"
    timeout: float = 60.0
    api_key: str | None = None
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    transport: httpx.BaseTransport | None = None

    def clean(self, caption: str, target_domain: str) -> str:
        instruction = load_cleaner_prompt(self.prompt_version).format(domain=target_domain)
        payload = {
            "model": self.model_id,
            "temperature": 0,
            "messages": [
                {"role": "system", "content": instruction},
                {"role": "user", "content": caption},
            ],
        }
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}

        def call():
            with httpx.Client(timeout=self.timeout, transport=self.transport) as client:
                resp = client.post(self.endpoint, json=payload, headers=headers)
                resp.raise_for_status()
                return resp.json()["choices"][0]["message"]["content"]

        return self.retry.run(call, "clean caption").strip()


class FixtureCaptionerClient(CaptionerClient):
    provenance = "fixture"

    def __init__(self, fixture_dir: str | Path, model_id: str = "fixture-captioner"):
        self.path = Path(fixture_dir) / "captioner.json"
        self.model_id = model_id
        self.table = json.loads(self.path.read_text(encoding="utf-8")) if self.path.exists() else {}

    def caption(self, image_id: str, image, min_tokens: int) -> str:
        entry = self.table.get(image_id)
        if entry is None:
            raise FixtureMissError(f"no fixture caption for image {image_id!r} in {self.path}")
        if isinstance(entry, str):
            return entry
        key = str(min_tokens)
        if key in entry:
            return entry[key]
        # closest shorter setting
        usable = sorted((int(k) for k in entry if int(k) <= min_tokens), reverse=True)
        if not usable:
            raise FixtureMissError(f"no fixture caption for {image_id!r} at min_tokens={min_tokens}")
        return entry[str(usable[0])]


class FixtureCleanerClient(CleanerClient):
    provenance = "fixture"

    def __init__(self, fixture_dir: str | Path, model_id: str = "fixture-cleaner"):
        self.path = Path(fixture_dir) / "cleaner.json"
        self.model_id = model_id
        self.table = json.loads(self.path.read_text(encoding="utf-8")) if self.path.exists() else {}

    def clean(self, caption: str, target_domain: str) -> str:
        try:
            return self.table[target_domain][caption]
        except KeyError:
            raise FixtureMissError(f"no fixture cleaning for {caption!r} in domain {target_domain!r}") from None


def builtin_fixture_dir() -> Path:
    return Path(str(resources.files("tadp.data").joinpath("fixtures")))


def captioner_from_env(fixture_dir: str | Path | None = None) -> CaptionerClient:
    fixture_dir = fixture_dir or os.environ.get(FIXTURE_DIR_ENV)
    if fixture_dir:
        return FixtureCaptionerClient(fixture_dir)
    endpoint = os.environ.get(CAPTION_ENDPOINT_ENV)
    if not endpoint:
        raise CaptionServiceError(f"set {FIXTURE_DIR_ENV} for fixture mode or {CAPTION_ENDPOINT_ENV} for a live captioner")
    return HttpCaptionerClient(endpoint)


def cleaner_from_env(fixture_dir: str | Path | None = None) -> CleanerClient:
    fixture_dir = fixture_dir or os.environ.get(FIXTURE_DIR_ENV)
    if fixture_dir:
        return FixtureCleanerClient(fixture_dir)
    endpoint = os.environ.get(CLEANER_ENDPOINT_ENV)
    if not endpoint:
        raise CaptionServiceError(f"set {FIXTURE_DIR_ENV} for fixture mode or {CLEANER_ENDPOINT_ENV} for a live cleaner")
    return HttpCleanerClient(endpoint, api_key=os.environ.get("OPENAI_API_KEY"))
