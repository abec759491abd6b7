"""Closed toy vocabulary: control tokens, box characters, task words.

Prose (questions, answers) is tokenized at word level; box text is
tokenized per character so coordinate digits are genuine autoregressive
predictions. Ids are stable for a given (colors, shapes, extra_words)
triple: specials first, then characters, then words in listed order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ProtocolError

SPECIAL_TOKENS = (
    ("pad", "<pad>"),
    ("bos", "<bos>"),
    ("eos", "<eos>"),
    ("img_start", "<img>"),
    ("img_end", "</img>"),
    ("roi_start", "<roi>"),
    ("roi_end", "</roi>"),
    ("ctx_start", "<ctx>"),
    ("ctx_end", "</ctx>"),
    ("user", "<user>"),
    ("agent", "<agent>"),
    ("slot", "<v>"),
)

BOX_CHARS = tuple("0123456789.,[] ")

BASE_WORDS = (
    "what",
    "color",
    "shape",
    "is",
    "the",
    "small",
    "object",
    "objects",
    "list",
    "to",
    "of",
    "left",
    "right",
    "top",
    "bottom",
    "?",
)


@dataclass(frozen=True)
class Vocab:
    """Token table shared by the encoder-side protocol and the decoder."""

    words: tuple[str, ...]
    token_strings: tuple[str, ...] = field(init=False)
    _word_ids: dict = field(init=False, repr=False)
    _char_ids: dict = field(init=False, repr=False)

    def __post_init__(self):
        strings = [s for _, s in SPECIAL_TOKENS] + list(BOX_CHARS) + list(self.words)
        if len(set(strings)) != len(strings):
            raise ProtocolError(f"duplicate token strings in vocab: {strings}")
        object.__setattr__(self, "token_strings", tuple(strings))
        char_base = len(SPECIAL_TOKENS)
        object.__setattr__(
            self, "_char_ids", {c: char_base + i for i, c in enumerate(BOX_CHARS)}
        )
        word_base = char_base + len(BOX_CHARS)
        object.__setattr__(
            self, "_word_ids", {w: word_base + i for i, w in enumerate(self.words)}
        )

    @classmethod
    def build(cls, colors: tuple[str, ...], shapes: tuple[str, ...]) -> "Vocab":
        words = BASE_WORDS + tuple(colors) + tuple(shapes)
        return cls(words=words)

    def __len__(self) -> int:
        return len(self.token_strings)

    # Special-token ids, by position in SPECIAL_TOKENS.
    @property
    def pad(self) -> int:
        return 0

    @property
    def bos(self) -> int:
        return 1

    @property
    def eos(self) -> int:
        return 2

    @property
    def img_start(self) -> int:
        return 3

    @property
    def img_end(self) -> int:
        return 4

    @property
    def roi_start(self) -> int:
        return 5

    @property
    def roi_end(self) -> int:
        return 6

    @property
    def ctx_start(self) -> int:
        return 7

    @property
    def ctx_end(self) -> int:
        return 8

    @property
    def user(self) -> int:
        return 9

    @property
    def agent(self) -> int:
        return 10

    @property
    def slot(self) -> int:
        return 11

    def encode_words(self, text: str) -> list[int]:
        """Tokenize whitespace-separated prose; unknown words are protocol errors."""
        ids = []
        for word in text.split():
            if word not in self._word_ids:
                raise ProtocolError(f"word not in vocabulary: {word!r}")
            ids.append(self._word_ids[word])
        return ids

    def encode_chars(self, text: str) -> list[int]:
        """Tokenize box text one character at a time."""
        ids = []
        for ch in text:
            if ch not in self._char_ids:
                raise ProtocolError(f"character not in box alphabet: {ch!r}")
            ids.append(self._char_ids[ch])
        return ids

    def is_char(self, token_id: int) -> bool:
        base = len(SPECIAL_TOKENS)
        return base <= token_id < base + len(BOX_CHARS)

    def is_word(self, token_id: int) -> bool:
        return token_id >= len(SPECIAL_TOKENS) + len(BOX_CHARS)

    def word_id(self, word: str) -> int:
        if word not in self._word_ids:
            raise ProtocolError(f"word not in vocabulary: {word!r}")
        return self._word_ids[word]

    def render(self, ids: list[int]) -> str:
        """Human-readable rendering: words space-separated, char runs joined."""
        parts: list[str] = []
        prev_char = False
        for t in ids:
            if not 0 <= t < len(self.token_strings):
                raise ProtocolError(f"token id out of range: {t}")
            s = self.token_strings[t]
            if self.is_char(t) and prev_char:
                parts[-1] += s
            elif self.is_char(t):
                parts.append(s)
            else:
                parts.append(s)
            prev_char = self.is_char(t)
        return " ".join(parts)
