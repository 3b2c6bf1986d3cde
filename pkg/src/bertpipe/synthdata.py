"""Deterministic synthetic corpora for tests and experiments.

Generates blank-line-delimited article files whose words come from the
bundled vocabulary, so tokenization produces few [UNK]s and masking
statistics are meaningful. Generation is seeded and fast enough for
gigabyte-scale corpora: sentences are drawn from a fixed pre-built pool and
only composed per article.
"""

from __future__ import annotations

import random
from pathlib import Path

from .tokenization import load_vocab, resolve_vocab

_SENTENCE_POOL_SIZE = 512


def word_pool() -> list[str]:
    """Plain words of the bundled vocabulary (no specials, pieces, or punctuation)."""
    vocab = load_vocab(resolve_vocab("mini-uncased"))
    return [t for t in vocab.tokens if t.isalpha() and len(t) > 1]


def _sentence_pool(rng: random.Random, words: list[str]) -> list[str]:
    pool = []
    for _ in range(_SENTENCE_POOL_SIZE):
        k = rng.randint(5, 14)
        sentence = " ".join(rng.choice(words) for _ in range(k))
        pool.append(sentence.capitalize() + rng.choice([".", ".", ".", "?", "!"]))
    return pool


def generate_corpus(
    out_dir: str | Path,
    target_bytes: int,
    seed: int = 0,
    n_files: int = 4,
    salt: str = "",
    article_sentences: tuple[int, int] = (2, 10),
) -> list[Path]:
    """Write ~target_bytes of article text into ``n_files`` files under out_dir.

    Articles have a unique header line plus ``article_sentences`` pooled
    sentences (min, max), separated by blank lines. Fully determined by the
    arguments.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = random.Random(seed)
    words = word_pool()
    sentences = _sentence_pool(rng, words)
    low, high = article_sentences

    per_file = target_bytes // n_files
    paths = []
    article_no = 0
    for file_no in range(n_files):
        path = out_dir / f"part-{file_no:03d}.txt"
        written = 0
        chunks: list[str] = []
        while written < per_file:
            n_lines = rng.randint(low, high)
            lines = [f"Article {article_no}{salt} about {rng.choice(words)}."]
            lines += rng.choices(sentences, k=n_lines)
            article = "\n".join(lines) + "\n\n"
            chunks.append(article)
            written += len(article)
            article_no += 1
        path.write_text("".join(chunks), encoding="utf-8")
        paths.append(path)
    return paths
