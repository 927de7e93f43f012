"""WordPiece subword tokenization with word- and sentence-boundary metadata.

Word boundaries only influence which tokens are grouped for selection;
model inputs are always the subword pieces themselves.
"""

from __future__ import annotations

import unicodedata
from dataclasses import dataclass, field

from .errors import VocabFormatError

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, MASK)
CONTINUATION_PREFIX = "##"

# Words longer than this map straight to [UNK]; guards pathological inputs.
MAX_WORD_CHARS = 100

_SENTENCE_TERMINALS = "。！？.!?"

# Unified ideographs and compatibility blocks; each codepoint is its own word
# when no external segmentation is supplied.
_CJK_RANGES = (
    (0x4E00, 0x9FFF), (0x3400, 0x4DBF), (0x20000, 0x2A6DF),
    (0x2A700, 0x2B73F), (0x2B740, 0x2B81F), (0x2B820, 0x2CEAF),
    (0xF900, 0xFAFF), (0x2F800, 0x2FA1F),
)


def _is_cjk(ch: str) -> bool:
    code = ord(ch)
    return any(lo <= code <= hi for lo, hi in _CJK_RANGES)


def _is_punctuation(ch: str) -> bool:
    return unicodedata.category(ch).startswith("P")


@dataclass(frozen=True)
class Vocab:
    """Dense token-id mapping with the five required special tokens."""

    tokens: tuple[str, ...]
    index: dict[str, int] = field(repr=False)

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def unk_id(self) -> int:
        return self.index[UNK]

    @property
    def cls_id(self) -> int:
        return self.index[CLS]

    @property
    def sep_id(self) -> int:
        return self.index[SEP]

    @property
    def mask_id(self) -> int:
        return self.index[MASK]

    def id_of(self, token: str) -> int:
        return self.index.get(token, self.index[UNK])


def build_vocab(tokens) -> Vocab:
    """Construct a Vocab from an ordered token iterable, validating specials."""
    tokens = tuple(tokens)
    index: dict[str, int] = {}
    for i, token in enumerate(tokens):
        if token in index:
            raise VocabFormatError(
                f"duplicate token {token!r} at line {i + 1} "
                f"(first seen at line {index[token] + 1})"
            )
        index[token] = i
    for special in SPECIAL_TOKENS:
        if special not in index:
            raise VocabFormatError(f"missing special token {special}")
    if index[PAD] != 0:
        raise VocabFormatError(
            f"{PAD} must have id 0, found at id {index[PAD]}"
        )
    return Vocab(tokens=tokens, index=index)


def load_vocab(path) -> Vocab:
    """Read a one-token-per-line vocabulary file; id = zero-based line number."""
    with open(path, encoding="utf-8") as handle:
        lines = [line.rstrip("\n") for line in handle]
    if lines and lines[-1] == "":
        lines.pop()
    return build_vocab(lines)


def tokenize_word(word: str, vocab: Vocab) -> list[str]:
    """Greedy longest-match-first WordPiece split of a single word.

    Falls back to ["[UNK]"] when any remainder has no vocabulary match.
    """
    if not word or any(ch.isspace() for ch in word):
        raise ValueError(f"tokenize_word requires a non-empty word, got {word!r}")
    if len(word) > MAX_WORD_CHARS:
        return [UNK]
    pieces = []
    start = 0
    while start < len(word):
        end = len(word)
        match = None
        while start < end:
            piece = word[start:end]
            if start > 0:
                piece = CONTINUATION_PREFIX + piece
            if piece in vocab.index:
                match = piece
                break
            end -= 1
        if match is None:
            return [UNK]
        pieces.append(match)
        start = end
    return pieces


def default_word_splitter(sentence: str) -> list[str]:
    """Whitespace splitting; CJK codepoints and punctuation become own words."""
    words: list[str] = []
    buf: list[str] = []

    def flush():
        if buf:
            words.append("".join(buf))
            buf.clear()

    for ch in sentence:
        if ch.isspace():
            flush()
        elif _is_cjk(ch) or _is_punctuation(ch):
            flush()
            words.append(ch)
        else:
            buf.append(ch)
    flush()
    return words


def default_sentence_splitter(text: str) -> list[str]:
    """Split after terminal punctuation followed by whitespace or end of text."""
    sentences: list[str] = []
    buf: list[str] = []
    i = 0
    n = len(text)
    while i < n:
        ch = text[i]
        buf.append(ch)
        if ch in _SENTENCE_TERMINALS:
            j = i + 1
            while j < n and text[j] in _SENTENCE_TERMINALS:
                buf.append(text[j])
                j += 1
            if j >= n or text[j].isspace():
                sentences.append("".join(buf))
                buf.clear()
            i = j
        else:
            i += 1
    tail = "".join(buf)
    if tail.strip():
        sentences.append(tail)
    return [s for s in sentences if s.strip()]


@dataclass
class TokenizedSequence:
    """Subword ids aligned with per-token word, sentence and special flags."""

    token_ids: list[int]
    word_ids: list[int]
    sentence_ids: list[int]
    is_special: list[bool]

    def __len__(self) -> int:
        return len(self.token_ids)

    @property
    def word_count(self) -> int:
        return self.word_ids[-1] + 1 if self.word_ids else 0


def tokenize_sentences(sentences: list[list[str]], vocab: Vocab,
                       lowercase: bool = False) -> TokenizedSequence:
    """Tokenize pre-split sentences (lists of words) into one sequence."""
    token_ids: list[int] = []
    word_ids: list[int] = []
    sentence_ids: list[int] = []
    word_index = 0
    for sent_index, words in enumerate(sentences):
        for word in words:
            if lowercase:
                word = word.lower()
            pieces = tokenize_word(word, vocab)
            for piece in pieces:
                token_ids.append(vocab.index.get(piece, vocab.unk_id))
                word_ids.append(word_index)
                sentence_ids.append(sent_index)
            word_index += 1
    return TokenizedSequence(
        token_ids=token_ids,
        word_ids=word_ids,
        sentence_ids=sentence_ids,
        is_special=[False] * len(token_ids),
    )


def tokenize_text(text: str, vocab: Vocab, word_splitter=None,
                  sentence_splitter=None, lowercase: bool = False) -> TokenizedSequence:
    """Tokenize raw text; empty input yields an empty sequence."""
    word_splitter = word_splitter or default_word_splitter
    sentence_splitter = sentence_splitter or default_sentence_splitter
    sentences = [word_splitter(s) for s in sentence_splitter(text)]
    sentences = [words for words in sentences if words]
    return tokenize_sentences(sentences, vocab, lowercase=lowercase)


def detokenize_word(pieces: list[str]) -> str:
    """Inverse of tokenize_word for fully-covered words."""
    return "".join(
        p[len(CONTINUATION_PREFIX):] if p.startswith(CONTINUATION_PREFIX) else p
        for p in pieces
    )


def read_corpus_documents(path, pre_segmented: bool = False):
    """Yield one document per blank-line-separated block.

    Raw mode yields each document's text; pre-segmented mode yields a list of
    sentences, each a list of space-separated words (one sentence per line).
    """
    with open(path, encoding="utf-8") as handle:
        block: list[str] = []
        for line in handle:
            line = line.rstrip("\n")
            if line.strip():
                block.append(line)
            elif block:
                yield _finish_block(block, pre_segmented)
                block = []
        if block:
            yield _finish_block(block, pre_segmented)


def _finish_block(lines: list[str], pre_segmented: bool):
    if pre_segmented:
        return [line.split(" ") for line in lines if line.strip()]
    return "\n".join(lines)
