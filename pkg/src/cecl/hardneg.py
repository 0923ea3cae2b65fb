"""Featured hard-negative caption generation.

Four perturbations per positive caption: a relation negative (first and last
noun swap places), and attribute / action / object negatives (one adjective,
verb or noun is masked and refilled). Inapplicable perturbations yield
``PLACEHOLDER``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Iterator, Protocol

import numpy as np

from .errors import FillerViolation
from .textproc import Lexicon, LexiconTagger, PosClass, TaggedCaption, Tagger, default_lexicon

PLACEHOLDER = "<HN_PLACEHOLDER>"


class NegType(str, enum.Enum):
    REL = "REL"
    ATT = "ATT"
    ACT = "ACT"
    OBJ = "OBJ"

    @property
    def index(self) -> int:
        return NEG_TYPES.index(self)


NEG_TYPES: tuple[NegType, ...] = (NegType.REL, NegType.ATT, NegType.ACT, NegType.OBJ)

MASK_CLASS = {NegType.ATT: PosClass.ADJ, NegType.ACT: PosClass.VERB, NegType.OBJ: PosClass.NOUN}


def is_placeholder(caption: str) -> bool:
    return caption == PLACEHOLDER


@dataclass(frozen=True)
class HardNegativeSet:
    rel: str
    att: str
    act: str
    obj: str

    def __getitem__(self, neg_type: NegType) -> str:
        return getattr(self, NegType(neg_type).value.lower())

    def items(self) -> Iterator[tuple[NegType, str]]:
        for t in NEG_TYPES:
            yield t, self[t]

    def to_record(self, record_id: str, caption: str) -> dict:
        return {
            "id": record_id,
            "caption": caption,
            "hn_rel": self.rel,
            "hn_att": self.att,
            "hn_act": self.act,
            "hn_obj": self.obj,
        }

    @classmethod
    def from_record(cls, record: dict) -> "HardNegativeSet":
        return cls(record["hn_rel"], record["hn_att"], record["hn_act"], record["hn_obj"])

    @classmethod
    def empty(cls) -> "HardNegativeSet":
        return cls(PLACEHOLDER, PLACEHOLDER, PLACEHOLDER, PLACEHOLDER)


class MaskFiller(Protocol):
    def fill(
        self, tagged: TaggedCaption, mask_index: int, pos_class: PosClass, rng: np.random.Generator
    ) -> str | None:
        """Return a replacement word of ``pos_class`` for the masked token.

        ``None`` means no admissible replacement exists.
        """
        ...


class LexiconFiller:
    """Uniform sample from same-class lexicon words, excluding the masked word.

    ``restrict_to`` narrows the candidate pool to a word set (e.g. the corpus
    vocabulary) so fills stay in-domain.
    """

    def __init__(self, lexicon: Lexicon | None = None, restrict_to: Iterable[str] | None = None):
        self.lexicon = lexicon if lexicon is not None else default_lexicon()
        allowed = None if restrict_to is None else set(restrict_to)
        self._pool = {
            cls: [w for w in self.lexicon.words(cls) if allowed is None or w in allowed]
            for cls in PosClass
        }

    def candidates(self, pos_class: PosClass, exclude: str) -> list[str]:
        return [w for w in self._pool[pos_class] if w != exclude]

    def fill(self, tagged, mask_index, pos_class, rng):
        cands = self.candidates(pos_class, tagged.words[mask_index])
        if not cands:
            return None
        return cands[int(rng.integers(len(cands)))]


def gen_relation(tagged: TaggedCaption) -> str:
    nouns = tagged.positions(PosClass.NOUN)
    if len(nouns) < 2:
        return PLACEHOLDER
    words = tagged.words
    first, last = nouns[0], nouns[-1]
    if words[first] == words[last]:
        # swap would reproduce the positive
        return PLACEHOLDER
    words[first], words[last] = words[last], words[first]
    return " ".join(words)


def gen_masked(
    tagged: TaggedCaption,
    neg_type: NegType,
    filler: MaskFiller,
    rng: np.random.Generator,
    lexicon: Lexicon | None = None,
) -> str:
    neg_type = NegType(neg_type)
    if neg_type not in MASK_CLASS:
        raise ValueError(f"gen_masked handles ATT/ACT/OBJ, got {neg_type.value}")
    pos_class = MASK_CLASS[neg_type]
    slots = tagged.positions(pos_class)
    if not slots:
        return PLACEHOLDER
    idx = slots[int(rng.integers(len(slots)))]
    words = tagged.words
    word = filler.fill(tagged, idx, pos_class, rng)
    if word is None:
        return PLACEHOLDER
    lexicon = lexicon if lexicon is not None else getattr(filler, "lexicon", None) or default_lexicon()
    if word == words[idx]:
        raise FillerViolation(f"filler returned the masked word {word!r}")
    if lexicon[word] is not pos_class:
        raise FillerViolation(f"filler returned {word!r} ({lexicon[word].value}), expected {pos_class.value}")
    words[idx] = word
    return " ".join(words)


def gen_all(
    caption: str,
    tagger: Tagger | None = None,
    filler: MaskFiller | None = None,
    rng: np.random.Generator | None = None,
) -> HardNegativeSet:
    tagger = tagger if tagger is not None else LexiconTagger()
    filler = filler if filler is not None else LexiconFiller(getattr(tagger, "lexicon", None))
    rng = rng if rng is not None else np.random.default_rng(0)
    lexicon = getattr(tagger, "lexicon", None)
    tagged = tagger(caption)
    return HardNegativeSet(
        rel=gen_relation(tagged),
        att=gen_masked(tagged, NegType.ATT, filler, rng, lexicon),
        act=gen_masked(tagged, NegType.ACT, filler, rng, lexicon),
        obj=gen_masked(tagged, NegType.OBJ, filler, rng, lexicon),
    )


def record_stream(seed: int, index: int, *extra: int) -> np.random.Generator:
    """Independent generator for one record, derived from (seed, index)."""
    return np.random.default_rng(np.random.SeedSequence([seed, index, *extra]))


def augment(
    records: Iterable[dict],
    seed: int,
    tagger: Tagger | None = None,
    filler: MaskFiller | None = None,
    epoch: int | None = None,
) -> list[dict]:
    """Hard negatives for every ``{"id", "caption"}`` record, as JSONL-ready dicts."""
    tagger = tagger if tagger is not None else LexiconTagger()
    extra = () if epoch is None else (epoch,)
    out = []
    for i, rec in enumerate(records):
        hns = gen_all(rec["caption"], tagger, filler, record_stream(seed, i, *extra))
        out.append(hns.to_record(str(rec["id"]), rec["caption"]))
    return out
