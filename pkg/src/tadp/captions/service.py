from __future__ import annotations

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

from .cache import CaptionCache, CaptionRecord, CleanCache
from .clients import CaptionerClient, CaptionServiceError, CleanerClient

log = logging.getLogger(__name__)

_WORDS = re.compile(r"\w+|[^\w\s]")


def word_token_count(text: str) -> int:
    return len(_WORDS.findall(text))


class ImageSource(Protocol):
    def image_ids(self) -> list[str]: ...

    def image(self, image_id: str): ...


def caption_image(
    image_id: str,
    image,
    min_tokens: int,
    client: CaptionerClient,
    cache: CaptionCache | None = None,
    builder: str = "Caption",
    count_tokens: Callable[[str], int] = word_token_count,
) -> CaptionRecord:
    """Caption one image, serving from ``cache`` when possible."""
    if min_tokens < 0:
        raise ValueError("min_tokens must be non-negative")
    if cache is not None:
        hit = cache.get(image_id, builder, min_tokens, client.model_id)
        if hit is not None:
            return hit
    text = client.caption(image_id, image, min_tokens)
    if client.provenance == "live" and min_tokens > 0 and count_tokens(text) < min_tokens:
        raise CaptionServiceError(
            f"captioner returned {count_tokens(text)} tokens for {image_id!r}, min_tokens={min_tokens}"
        )
    record = CaptionRecord(
        image_id=image_id,
        caption=text,
        builder=builder,
        min_tokens=min_tokens,
        model_id=client.model_id,
        provenance=client.provenance,
    )
    if cache is not None:
        cache.put(record)
    return record


def clean_caption(caption: str, target_domain: str, client: CleanerClient, cache: CleanCache | None = None) -> str:
    """Strip mentions of the target-domain style so test captions match the training format."""
    if not caption.strip():
        raise ValueError("caption is empty")
    if cache is not None:
        hit = cache.get(caption, target_domain, client.model_id)
        if hit is not None:
            return hit
    cleaned = client.clean(caption, target_domain).strip()
    if cache is not None:
        cache.put(caption, target_domain, client.model_id, cleaned)
    return cleaned


@dataclass
class BatchReport:
    cache_path: Path
    n_records: int
    client_calls: int
    failed: dict[str, str] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.failed


class _CountingCaptioner(CaptionerClient):
    def __init__(self, inner: CaptionerClient):
        self.inner = inner
        self.model_id = inner.model_id
        self.provenance = inner.provenance
        self.calls = 0

    def caption(self, image_id, image, min_tokens):
        self.calls += 1
        return self.inner.caption(image_id, image, min_tokens)


def batch_caption(
    dataset: ImageSource,
    min_tokens: int,
    client: CaptionerClient,
    cache_path: str | Path,
    parallelism: int = 1,
    builder: str = "Caption",
) -> BatchReport:
    """Caption every image of ``dataset``; resumes from an existing cache.

    Failures do not abort the batch; they are listed in the report and in
    ``<cache>.failures.json``.
    """
    cache = CaptionCache(cache_path)
    counting = _CountingCaptioner(client)
    todo = [i for i in dataset.image_ids() if cache.get(i, builder, min_tokens, client.model_id) is None]
    failed: dict[str, str] = {}

    def work(image_id: str):
        try:
            caption_image(image_id, dataset.image(image_id), min_tokens, counting, cache, builder)
        except Exception as exc:  # reported, not raised
            return image_id, f"{type(exc).__name__}: {exc}"
        return image_id, None

    if parallelism > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            results = list(pool.map(work, todo))
    else:
        results = [work(i) for i in todo]
    for image_id, err in results:
        if err is not None:
            failed[image_id] = err
            log.error("caption failed for %s: %s", image_id, err)
    path = cache.finalize()
    failure_file = Path(str(path) + ".failures.json")
    if failed:
        failure_file.write_text(json.dumps(dict(sorted(failed.items())), indent=2) + "\n", encoding="utf-8")
    elif failure_file.exists():
        failure_file.unlink()
    return BatchReport(path, len(cache), counting.calls, failed)
