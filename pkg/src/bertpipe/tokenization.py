"""Basic normalization plus greedy WordPiece against a fixed vocabulary.

Follows the uncased-BERT conventions: lower-case, strip combining accents,
split each punctuation character into its own word, then greedy
longest-prefix WordPiece with "##" continuation pieces and whole-word [UNK]
fallback. No [CLS]/[SEP] framing happens here; that is the instance
generator's job.
"""

from __future__ import annotations

import hashlib
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path

from importlib import resources

SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")
DEFAULT_MAX_CHARS_PER_WORD = 200


class VocabularyError(Exception):
    """Vocabulary file missing, malformed, or lacking a special token."""


@dataclass(frozen=True)
class Vocabulary:
    """Ordered token list; a token's id is its line index in the vocab file."""

    tokens: tuple[str, ...]
    token_to_id: dict[str, int] = field(repr=False, compare=False)
    pad_id: int
    unk_id: int
    cls_id: int
    sep_id: int
    mask_id: int

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def special_ids(self) -> frozenset[int]:
        return frozenset((self.pad_id, self.unk_id, self.cls_id, self.sep_id, self.mask_id))

    def non_special_ids(self) -> list[int]:
        specials = self.special_ids
        return [i for i in range(len(self.tokens)) if i not in specials]


@dataclass(frozen=True)
class TokenSequence:
    """Token ids plus a parallel flag marking "##" continuation pieces."""

    ids: tuple[int, ...]
    is_continuation: tuple[bool, ...]

    def __post_init__(self):
        if len(self.ids) != len(self.is_continuation):
            raise ValueError("ids and is_continuation must have equal length")

    def __len__(self) -> int:
        return len(self.ids)


def make_vocabulary(tokens: list[str]) -> Vocabulary:
    """Build a Vocabulary from an ordered token list, validating specials."""
    token_to_id: dict[str, int] = {}
    for i, token in enumerate(tokens):
        if token in token_to_id:
            raise VocabularyError(f"duplicate token {token!r} at lines {token_to_id[token] + 1} and {i + 1}")
        token_to_id[token] = i
    for special in SPECIAL_TOKENS:
        if special not in token_to_id:
            raise VocabularyError(f"vocabulary is missing special token {special}")
    return Vocabulary(
        tokens=tuple(tokens),
        token_to_id=token_to_id,
        pad_id=token_to_id["[PAD]"],
        unk_id=token_to_id["[UNK]"],
        cls_id=token_to_id["[CLS]"],
        sep_id=token_to_id["[SEP]"],
        mask_id=token_to_id["[MASK]"],
    )


def load_vocab(path: str | Path) -> Vocabulary:
    """Load a one-token-per-line vocabulary file; id = 0-based line index."""
    path = Path(path)
    if not path.is_file():
        raise VocabularyError(f"vocabulary file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        tokens = [line.rstrip("\n") for line in fh]
    # A trailing newline produces one empty last entry; drop it.
    if tokens and tokens[-1] == "":
        tokens.pop()
    return make_vocabulary(tokens)


def resolve_vocab(name_or_path: str) -> Path:
    """Resolve TOKENIZER.NAME_OR_PATH to a vocabulary file.

    A filesystem path wins; otherwise the name is looked up among the
    vocabularies bundled with the package (``<name>.txt``).
    """
    p = Path(name_or_path)
    if p.is_file():
        return p
    bundled = resources.files("bertpipe") / "vocabs" / f"{name_or_path}.txt"
    try:
        if bundled.is_file():
            return Path(str(bundled))
    except OSError:
        pass
    raise VocabularyError(
        f"cannot resolve tokenizer vocabulary {name_or_path!r}: "
        f"not a file and no bundled vocabulary of that name"
    )


def vocab_digest(vocab: Vocabulary) -> str:
    """Short content digest identifying a vocabulary (provenance metadata)."""
    return hashlib.sha256("\n".join(vocab.tokens).encode("utf-8")).hexdigest()[:16]


def _is_punctuation(char: str) -> bool:
    cp = ord(char)
    # Treat all non-alphanumeric ASCII as punctuation (covers ^ $ ` which are
    # not in the Unicode P* classes), plus everything Unicode calls punctuation.
    if (33 <= cp <= 47) or (58 <= cp <= 64) or (91 <= cp <= 96) or (123 <= cp <= 126):
        return True
    return unicodedata.category(char).startswith("P")


def _strip_accents(text: str) -> str:
    return "".join(
        c for c in unicodedata.normalize("NFD", text) if unicodedata.category(c) != "Mn"
    )


def basic_tokenize(text: str, do_lower_case: bool = True) -> list[str]:
    """Split on Unicode whitespace and isolate punctuation characters.

    With ``do_lower_case`` the text is lower-cased and combining accent marks
    are stripped (canonical decomposition) before splitting.
    """
    if do_lower_case:
        text = _strip_accents(text.lower())
    words: list[str] = []
    current: list[str] = []
    for char in text:
        if char.isspace():
            if current:
                words.append("".join(current))
                current = []
        elif _is_punctuation(char):
            if current:
                words.append("".join(current))
                current = []
            words.append(char)
        else:
            current.append(char)
    if current:
        words.append("".join(current))
    return words


def wordpiece(
    word: str,
    vocab: Vocabulary,
    max_chars_per_word: int = DEFAULT_MAX_CHARS_PER_WORD,
) -> list[int]:
    """Greedy longest-prefix WordPiece of a single word.

    Non-initial pieces are matched with a "##" prefix. If any position fails
    to match, or the word is longer than ``max_chars_per_word``, the whole
    word maps to the single [UNK] id.
    """
    if not word:
        raise ValueError("wordpiece expects a non-empty word")
    if len(word) > max_chars_per_word:
        return [vocab.unk_id]
    ids: list[int] = []
    start = 0
    while start < len(word):
        end = len(word)
        piece_id = None
        while start < end:
            piece = word[start:end]
            if start > 0:
                piece = "##" + piece
            found = vocab.token_to_id.get(piece)
            if found is not None:
                piece_id = found
                break
            end -= 1
        if piece_id is None:
            return [vocab.unk_id]
        ids.append(piece_id)
        start = end
    return ids


def tokenize(text: str, vocab: Vocabulary, do_lower_case: bool = True) -> TokenSequence:
    """basic_tokenize then wordpiece per word, concatenated. No framing tokens."""
    ids: list[int] = []
    cont: list[bool] = []
    for word in basic_tokenize(text, do_lower_case):
        for piece_id in wordpiece(word, vocab):
            ids.append(piece_id)
            cont.append(vocab.tokens[piece_id].startswith("##"))
    return TokenSequence(ids=tuple(ids), is_continuation=tuple(cont))
