from .cache import CaptionCache, CaptionRecord, CleanCache, cache_filename
from .clients import (
    CAPTION_ENDPOINT_ENV,
    CLEANER_ENDPOINT_ENV,
    FIXTURE_DIR_ENV,
    CaptionerClient,
    CaptionServiceError,
    CleanerClient,
    FixtureCaptionerClient,
    FixtureCleanerClient,
    FixtureMissError,
    HttpCaptionerClient,
    HttpCleanerClient,
    RetryPolicy,
    builtin_fixture_dir,
    captioner_from_env,
    cleaner_from_env,
    load_cleaner_prompt,
)
from .service import BatchReport, batch_caption, caption_image, clean_caption, word_token_count
