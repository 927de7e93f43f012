"""Synthetic corpora with recoverable word order.

Sentences are sorted runs of distinct alphabet tokens, so the canonical
position of every token is fully determined by its identity within the
sentence. That makes permutation recovery learnable by a small encoder and
gives the order-corruption task an unambiguous ground truth.
"""

from __future__ import annotations

import numpy as np

from .seeding import derive_rng
from .tokenizer import SPECIAL_TOKENS, Vocab, build_vocab


def toy_alphabet(size: int = 40) -> list[str]:
    width = len(str(size - 1))
    return [f"t{i:0{width}d}" for i in range(size)]


def toy_vocab(alphabet_size: int = 40) -> Vocab:
    return build_vocab(list(SPECIAL_TOKENS) + toy_alphabet(alphabet_size))


def generate_toy_sentences(count: int, seed: int, *, alphabet_size: int = 40,
                           min_words: int = 12, max_words: int = 24) -> list[list[str]]:
    """Sorted distinct-token sentences of varying length."""
    alphabet = toy_alphabet(alphabet_size)
    rng = derive_rng(seed, "toy-sentences")
    sentences = []
    for _ in range(count):
        m = int(rng.integers(min_words, max_words + 1))
        picks = sorted(rng.choice(alphabet_size, size=m, replace=False))
        sentences.append([alphabet[int(i)] for i in picks])
    return sentences


def write_corpus(path, sentences: list[list[str]],
                 sentences_per_document: int = 1) -> None:
    """Pre-segmented corpus file: space-joined words, blank line between docs."""
    with open(path, "w", encoding="utf-8") as handle:
        for i, words in enumerate(sentences):
            handle.write(" ".join(words) + "\n")
            if (i + 1) % sentences_per_document == 0:
                handle.write("\n")


def write_vocab(path, alphabet_size: int = 40) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for token in list(SPECIAL_TOKENS) + toy_alphabet(alphabet_size):
            handle.write(token + "\n")
