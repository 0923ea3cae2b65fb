"""Tokenization and closed-lexicon part-of-speech tagging."""

from __future__ import annotations

import enum
import unicodedata
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Protocol


class PosClass(str, enum.Enum):
    NOUN = "NOUN"
    ADJ = "ADJ"
    VERB = "VERB"
    RELWORD = "RELWORD"
    OTHER = "OTHER"


@dataclass(frozen=True)
class Token:
    surface: str
    index: int


@dataclass(frozen=True)
class TaggedCaption:
    tokens: tuple[tuple[Token, PosClass], ...]

    @property
    def words(self) -> list[str]:
        return [tok.surface for tok, _ in self.tokens]

    @property
    def classes(self) -> list[PosClass]:
        return [cls for _, cls in self.tokens]

    def positions(self, pos_class: PosClass) -> list[int]:
        return [tok.index for tok, cls in self.tokens if cls is pos_class]

    def text(self) -> str:
        return " ".join(self.words)

    def __len__(self) -> int:
        return len(self.tokens)


class Lexicon:
    """Word -> PosClass mapping. Words not in the table tag as OTHER."""

    def __init__(self, entries: Mapping[str, PosClass], version: str = "unversioned"):
        self._entries = {w.lower(): PosClass(c) for w, c in entries.items()}
        self.version = version

    def __getitem__(self, word: str) -> PosClass:
        return self._entries.get(word, PosClass.OTHER)

    def __contains__(self, word: object) -> bool:
        return word in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def words(self, pos_class: PosClass | None = None) -> list[str]:
        """Sorted words, optionally restricted to one class."""
        return sorted(w for w, c in self._entries.items() if pos_class is None or c is pos_class)

    @classmethod
    def from_lines(cls, lines: Iterable[str], version: str | None = None) -> "Lexicon":
        entries: dict[str, PosClass] = {}
        header_version = None
        for lineno, raw in enumerate(lines, 1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            if line.startswith("#"):
                if header_version is None and "lexicon" in line:
                    header_version = line.lstrip("# ").strip()
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"lexicon line {lineno}: expected 'word<TAB>CLASS', got {line!r}")
            word, cls_name = parts[0].strip().lower(), parts[1].strip()
            try:
                entries[word] = PosClass(cls_name)
            except ValueError:
                raise ValueError(f"lexicon line {lineno}: unknown class {cls_name!r}") from None
        return cls(entries, version or header_version or "unversioned")

    @classmethod
    def load(cls, path: str | Path) -> "Lexicon":
        with open(path, encoding="utf-8") as fh:
            return cls.from_lines(fh)


@lru_cache(maxsize=1)
def default_lexicon() -> Lexicon:
    """The lexicon shipped with the package (synthetic world + worked examples)."""
    text = resources.files("cecl").joinpath("data/lexicon.tsv").read_text(encoding="utf-8")
    return Lexicon.from_lines(text.splitlines())


def _strip_punct(word: str) -> str:
    start, end = 0, len(word)
    while start < end and unicodedata.category(word[start]).startswith("P"):
        start += 1
    while end > start and unicodedata.category(word[end - 1]).startswith("P"):
        end -= 1
    return word[start:end]


def tokenize(text: str) -> list[Token]:
    """Lowercase, split on whitespace, strip punctuation from token edges."""
    surfaces = (_strip_punct(w) for w in text.lower().split())
    return [Token(s, i) for i, s in enumerate(s for s in surfaces if s)]


def tag(tokens: list[Token], lexicon: Lexicon) -> TaggedCaption:
    return TaggedCaption(tuple((tok, lexicon[tok.surface]) for tok in tokens))


class Tagger(Protocol):
    def __call__(self, text: str) -> TaggedCaption: ...


class LexiconTagger:
    """Default tagger: ``tokenize`` followed by a lexicon lookup.

    Any callable ``str -> TaggedCaption`` can stand in for it, e.g. a wrapper
    around a statistical tagger that maps its tag set onto ``PosClass``.
    """

    def __init__(self, lexicon: Lexicon | None = None):
        self.lexicon = lexicon if lexicon is not None else default_lexicon()

    def __call__(self, text: str) -> TaggedCaption:
        return tag(tokenize(text), self.lexicon)
