"""Token-id layout and the closed instruction vocabulary.

The joint vocabulary places mask tokens first, then the two separator
tokens, then the text words::

    [0, K)            mask tokens
    K                 <BOI>  (begin of image)
    K + 1             <BOM>  (begin of mask)
    [K + 2, K + 2 + text_vocab_size)   text words

All instruction text is built from a small closed word list so the text
side needs no external tokenizer.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .validation import ValidationError

COLORS = ("red", "green", "blue", "yellow")
KINDS = ("circle", "rectangle", "triangle")
ATTRIBUTES = ("leftmost", "rightmost", "topmost", "bottommost", "largest", "smallest")

COLOR_RGB = {
    "red": (255, 0, 0),
    "green": (0, 255, 0),
    "blue": (0, 0, 255),
    "yellow": (255, 255, 0),
}

_SLOT = "{object name}"

TEMPLATES = (
    "Produce a segmentation mask for the {object name}.",
    "Segment the {object name}.",
    "Generate a mask covering the {object name}.",
    "Highlight the {object name} with a binary mask.",
    "Create a segmentation mask of the {object name}.",
    "Please segment the {object name}.",
    "Output the mask region for the {object name}.",
    "Mark every pixel belonging to the {object name}.",
    "Show a mask for the {object name}.",
    "Extract the {object name} as a mask.",
)

MAX_VOCAB_WORDS = 64

_WORD_RE = re.compile(r"^[a-z]+$")


def fill_template(template_id: int, object_name: str) -> str:
    """Instantiate one of the fixed instruction templates."""
    if not 0 <= template_id < len(TEMPLATES):
        raise ValidationError(
            f"template id must be in [0, {len(TEMPLATES)}), got {template_id}"
        )
    return TEMPLATES[template_id].replace(_SLOT, object_name)


def normalize_text(s: str) -> str:
    """Lowercase, drop sentence punctuation, collapse whitespace."""
    return " ".join(s.lower().replace(".", " ").replace(",", " ").split())


def _collect_words() -> tuple:
    words: list = []
    seen = set()
    sources = [normalize_text(t.replace(_SLOT, " ")) for t in TEMPLATES]
    sources += [" ".join(COLORS), " ".join(KINDS), " ".join(ATTRIBUTES)]
    for source in sources:
        for word in source.split():
            if word not in seen:
                seen.add(word)
                words.append(word)
    return tuple(words)


WORDS = _collect_words()


@dataclass(frozen=True)
class Vocabulary:
    """Joint id space for mask tokens, separators, and instruction words."""

    n_mask_codes: int
    words: tuple = WORDS
    _word_ids: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.n_mask_codes < 1:
            raise ValidationError("vocabulary needs at least one mask token")
        words = tuple(self.words)
        if len(words) > MAX_VOCAB_WORDS:
            raise ValidationError(
                f"closed vocabulary limited to {MAX_VOCAB_WORDS} words, got {len(words)}"
            )
        if len(set(words)) != len(words):
            raise ValidationError("vocabulary words must be unique")
        for word in words:
            if not _WORD_RE.match(word):
                raise ValidationError(f"vocabulary word {word!r} is not a lowercase word")
        object.__setattr__(self, "words", words)
        object.__setattr__(
            self, "_word_ids", {w: self.text_base + i for i, w in enumerate(words)}
        )

    @property
    def boi_id(self) -> int:
        return self.n_mask_codes

    @property
    def bom_id(self) -> int:
        return self.n_mask_codes + 1

    @property
    def text_base(self) -> int:
        return self.n_mask_codes + 2

    @property
    def text_vocab_size(self) -> int:
        return len(self.words)

    @property
    def total_tokens(self) -> int:
        return self.n_mask_codes + 2 + len(self.words)

    @property
    def pad_id(self) -> int:
        """Extra embedding slot used only to right-pad batches; never predicted."""
        return self.total_tokens

    def encode_text(self, s: str) -> list:
        """Tokenize an instruction string into text-word ids.

        The string is normalized (lowercased, punctuation stripped) and split
        on whitespace; every word must belong to the closed vocabulary.
        """
        ids = []
        for word in normalize_text(s).split():
            wid = self._word_ids.get(word)
            if wid is None:
                raise ValidationError(f"word {word!r} is not in the closed vocabulary")
            ids.append(wid)
        return ids

    def decode_text(self, ids) -> str:
        words = []
        for tid in ids:
            idx = int(tid) - self.text_base
            if not 0 <= idx < len(self.words):
                raise ValidationError(f"id {tid} is not a text token")
            words.append(self.words[idx])
        return " ".join(words)

    def is_mask_token(self, tid: int) -> bool:
        return 0 <= tid < self.n_mask_codes


def tokenize_text(s: str, vocab: Vocabulary) -> list:
    """Functional alias for :meth:`Vocabulary.encode_text`."""
    return vocab.encode_text(s)


def detokenize_text(ids, vocab: Vocabulary) -> str:
    return vocab.decode_text(ids)
