"""Oracle captions from ground-truth masks, and their controlled corruption."""
from __future__ import annotations

import math
import random
import warnings
from typing import Mapping, Sequence

import numpy as np

from .types import ClassVocabulary, EmptyPromptWarning, OracleCaptionSpec, PromptValidationError


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def present_class_indices(mask: np.ndarray, n_classes: int | None = None, ignore_index: int = 255) -> list[int]:
    values = np.unique(np.asarray(mask))
    values = values[values != ignore_index]
    if n_classes is not None:
        bad = values[(values < 0) | (values >= n_classes)]
        if bad.size:
            raise KeyError(f"mask contains unknown class index {int(bad[0])}")
    return sorted(int(v) for v in values)


def build_oracle(mask: np.ndarray, class_map: Sequence[str] | Mapping[int, str], ignore_index: int = 255) -> str:
    """Space-prefixed names of the classes in ``mask``, in dataset index order."""
    if not isinstance(class_map, Mapping):
        class_map = dict(enumerate(class_map))
    present = present_class_indices(mask, ignore_index=ignore_index)
    for idx in present:
        if idx not in class_map:
            raise KeyError(f"mask contains unknown class index {idx}")
    if not present:
        warnings.warn("mask has no labelled classes; oracle caption is empty", EmptyPromptWarning, stacklevel=2)
        return ""
    return "".join(" " + class_map[i] for i in present)


def perturbation_sizes(n_present: int, target_precision: float, target_recall: float) -> tuple[int, int]:
    """(kept true classes, added distractors) for one image."""
    if n_present == 0:
        return 0, 0
    k = max(1, round_half_up(target_recall * n_present))
    d = round_half_up(k * (1 - target_precision) / target_precision)
    return k, d


def perturb_oracle(spec: OracleCaptionSpec, universe: ClassVocabulary | Sequence[str]) -> list[str]:
    """Drop true classes and add distractors to hit the target precision/recall.

    Returns class names ordered by their index in ``universe``. Sizes depend
    only on the targets and |B(x)|; the seed picks which classes.
    """
    names = list(universe.names if isinstance(universe, ClassVocabulary) else universe)
    order = {n: i for i, n in enumerate(names)}
    unknown = spec.present_classes - order.keys()
    if unknown:
        raise PromptValidationError(f"present classes not in universe: {sorted(unknown)}")
    present = sorted(spec.present_classes, key=order.__getitem__)
    k, d = perturbation_sizes(len(present), spec.target_precision, spec.target_recall)
    pool = [n for n in names if n not in spec.present_classes]
    if d > len(pool):
        raise PromptValidationError(
            f"need {d} distractors but only {len(pool)} classes lie outside the present set"
        )
    rng = random.Random(spec.rng_seed)
    kept = rng.sample(present, k)
    added = rng.sample(pool, d)
    return sorted(kept + added, key=order.__getitem__)


def precision_recall(predicted: Sequence[str], present: Sequence[str]) -> tuple[float, float]:
    p, g = set(predicted), set(present)
    tp = len(p & g)
    precision = tp / len(p) if p else 1.0
    recall = tp / len(g) if g else 1.0
    return precision, recall
