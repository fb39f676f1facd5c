"""Noun filtering of captions."""
from __future__ import annotations

import logging
import re
import warnings
from typing import Callable, Sequence

from .types import EmptyPromptWarning

log = logging.getLogger(__name__)

Tagger = Callable[[Sequence[str]], Sequence[tuple[str, str]]]

_TOKEN_RE = re.compile(r"[A-Za-z0-9]+(?:['-][A-Za-z]+)*")

_CLOSED_CLASS = {
    "DT": "a an the this that these those some any each every no another either neither",
    "IN": "of in on at by for with from to into onto over under above below near next behind between "
    "through across along around beside during while against among toward towards up down off out about",
    "CC": "and or but nor yet so",
    "PRP": "i you he she it we they me him her us them itself themselves its his their our my your",
    "VBZ": "is are was were be been being am has have had does do did can could will would should may might",
    "RB": "not very too also just there here then now quite rather",
    "JJ": "red green blue yellow black white brown gray grey orange pink purple dark bright small large big "
    "little tall short long old new young empty full wooden open closed many several few other same "
    "different sunny cloudy busy",
    "CD": "one two three four five six seven eight nine ten",
}
_LEXICON = {w: tag for tag, words in _CLOSED_CLASS.items() for w in words.split()}


class LexiconTagger:
    """Offline fallback: closed-class lexicon plus suffix rules, everything else NN.

    Coarse, but caption vocabulary is narrow: determiners, prepositions,
    colours, ``-ing`` verbs and ``-ly`` adverbs cover most non-nouns.
    """

    def __call__(self, words: Sequence[str]) -> list[tuple[str, str]]:
        out = []
        for w in words:
            lw = w.lower()
            if lw in _LEXICON:
                tag = _LEXICON[lw]
            elif lw.isdigit():
                tag = "CD"
            elif lw.endswith("ly") and len(lw) > 4:
                tag = "RB"
            elif lw.endswith("ing") and len(lw) > 5:
                tag = "VBG"
            elif lw.endswith("ed") and len(lw) > 4:
                tag = "VBD"
            else:
                tag = "NN"
            out.append((w, tag))
        return out


def nltk_tagger() -> Tagger | None:
    try:
        import nltk

        nltk.pos_tag(["probe"])
    except (ImportError, LookupError):
        return None
    return nltk.pos_tag


def default_tagger() -> Tagger:
    tagger = nltk_tagger()
    if tagger is None:
        log.info("NLTK tagger unavailable; falling back to the lexicon tagger")
        return LexiconTagger()
    return tagger


def nouns_only(caption: str, pos_tagger: Tagger | None = None) -> str:
    """Keep the words tagged as nouns (NN*), in their original order."""
    tagger = pos_tagger or default_tagger()
    words = _TOKEN_RE.findall(caption)
    nouns = [w for w, tag in tagger(words) if tag.startswith("NN")]
    if not nouns:
        warnings.warn(f"no nouns in caption {caption!r}", EmptyPromptWarning, stacklevel=2)
    return " ".join(nouns)
