from .builders import (
    build_avg_eos,
    build_class_embs,
    build_class_names,
    build_from_caption,
    build_room_type,
    build_single_eos,
    class_names_string,
)
from .nouns import LexiconTagger, default_tagger, nouns_only
from .oracle import (
    build_oracle,
    perturb_oracle,
    perturbation_sizes,
    precision_recall,
    present_class_indices,
    round_half_up,
)
from .types import (
    CaptionTruncatedWarning,
    ClassVocabulary,
    ConditioningMatrix,
    EmptyPromptWarning,
    OracleCaptionSpec,
    PromptValidationError,
    Strategy,
    load_templates,
)
