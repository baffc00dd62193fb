"""Synonym perturbation of attack prompts.

Implements the disturbed-input variant of prompt construction: each word is
marked for substitution with a fixed probability, protected tokens (PII-like
patterns and stopwords) are left alone, and marked words are replaced by
their most cosine-similar embedding neighbor that shares a part-of-speech
tag. Embeddings, the POS lexicon, and the stoplist are pluggable plain-text
files so the mechanism can run on any corpus.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass

import numpy as np

log = logging.getLogger("fedleak.perturb")


class PerturbError(ValueError):
    pass


@dataclass(frozen=True)
class PerturbConfig:
    p_sub: float
    embeddings_path: str
    pos_path: str
    stoplist_path: str
    neighbor_count: int = 5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p_sub <= 1.0:
            raise PerturbError(f"perturb.p_sub: must be in [0, 1], got {self.p_sub}")
        if self.neighbor_count < 1:
            raise PerturbError(f"perturb.neighbor_count: must be >= 1, got {self.neighbor_count}")


# Token-level shapes of the synthetic PII formats: bare digit runs (phone
# parts, dates, ids) and URL scheme/host markers. Names are protected by
# their absence from the substitution embedding table.
PII_TOKEN_PATTERNS = (
    re.compile(r"\d+"),
    re.compile(r"https?"),
    re.compile(r"www"),
    re.compile(r"[^a-z0-9]+"),
)


def is_pii_like(token: str) -> bool:
    return any(p.fullmatch(token) for p in PII_TOKEN_PATTERNS)


class Perturber:
    """Loaded embedding table + POS lexicon + stoplist with a kNN cache."""

    def __init__(self, words, vectors: np.ndarray, pos: dict, stoplist: set, neighbor_count: int):
        self.words = list(words)
        self.index = {w: i for i, w in enumerate(self.words)}
        norms = np.linalg.norm(vectors, axis=1, keepdims=True)
        norms[norms == 0.0] = 1.0
        self.vectors = vectors / norms
        self.pos = pos
        self.stoplist = stoplist
        self.neighbor_count = neighbor_count
        self._neighbor_cache: dict[str, list[tuple[str, float]]] = {}

    @classmethod
    def from_config(cls, config: PerturbConfig) -> "Perturber":
        words, vectors = load_embeddings(config.embeddings_path)
        pos = load_pos_lexicon(config.pos_path)
        stop = load_stoplist(config.stoplist_path)
        return cls(words, vectors, pos, stop, config.neighbor_count)

    def neighbors(self, word: str) -> list[tuple[str, float]]:
        """Top-k cosine neighbors of a word, excluding itself; ties broken by
        (higher similarity, lexicographically smaller word)."""
        cached = self._neighbor_cache.get(word)
        if cached is not None:
            return cached
        i = self.index[word]
        sims = self.vectors @ self.vectors[i]
        sims[i] = -np.inf
        k = min(self.neighbor_count, len(self.words) - 1)
        candidates = sorted(
            ((float(sims[j]), self.words[j]) for j in range(len(self.words)) if j != i),
            key=lambda sw: (-sw[0], sw[1]),
        )[:k]
        result = [(w, s) for s, w in candidates]
        self._neighbor_cache[word] = result
        return result


def load_embeddings(path):
    """Plain-text word-vector file: ``word v1 ... vd`` per line, with an
    optional ``count dim`` header line."""
    words = []
    rows = []
    with open(path, encoding="utf-8") as fh:
        first = fh.readline().split()
        if len(first) == 2 and all(p.isdigit() for p in first):
            pass  # header line: counts only
        elif first:
            words.append(first[0])
            rows.append([float(v) for v in first[1:]])
        for lineno, line in enumerate(fh, start=2):
            parts = line.split()
            if not parts:
                continue
            words.append(parts[0])
            try:
                rows.append([float(v) for v in parts[1:]])
            except ValueError as exc:
                raise PerturbError(f"{path}:{lineno}: bad embedding row: {exc}") from exc
    if not words:
        raise PerturbError(f"{path}: empty embedding file")
    dims = {len(r) for r in rows}
    if len(dims) != 1:
        raise PerturbError(f"{path}: inconsistent embedding dimensions {sorted(dims)}")
    return words, np.asarray(rows, dtype=np.float64)


def load_pos_lexicon(path) -> dict:
    """``word TAB tag`` lines; the first tag wins for ambiguous words."""
    pos: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if "\t" not in line:
                raise PerturbError(f"{path}:{lineno}: expected 'word<TAB>tag'")
            word, tag = line.split("\t", 1)
            pos.setdefault(word, tag.split("\t")[0])
    return pos


def load_stoplist(path) -> set:
    with open(path, encoding="utf-8") as fh:
        return {line.strip() for line in fh if line.strip()}


def perturb_input(tokens: list[str], perturber: Perturber, config: PerturbConfig, seed=None) -> list[str]:
    """Apply the five-step substitution procedure to a token list.

    A Bernoulli(p_sub) mark is drawn for every token so the random stream
    does not depend on which tokens happen to be protected.
    """
    rng = np.random.default_rng(config.seed if seed is None else seed)
    out = list(tokens)
    for pos_idx, token in enumerate(tokens):
        selected = rng.random() < config.p_sub
        if not selected:
            continue
        if is_pii_like(token) or token in perturber.stoplist:
            continue
        if token not in perturber.index:
            log.debug("perturb: token %r absent from embedding table, kept", token)
            continue
        tag = perturber.pos.get(token)
        if tag is None:
            continue
        for candidate, _sim in perturber.neighbors(token):
            if perturber.pos.get(candidate) == tag:
                out[pos_idx] = candidate
                break
    return out


# A small built-in synonym inventory covering the synthetic corpus templates;
# used to write toy embedding/POS/stoplist files so disturbed-input runs work
# out of the box.
TOY_SYNONYM_GROUPS = (
    ("NOUN", ("note", "memo", "message")),
    ("NOUN", ("update", "status", "bulletin")),
    ("NOUN", ("numbers", "figures", "totals")),
    ("NOUN", ("copy", "duplicate", "printout")),
    ("NOUN", ("summary", "digest", "overview")),
    ("NOUN", ("slides", "deck", "charts")),
    ("NOUN", ("draft", "version", "revision")),
    ("NOUN", ("vendor", "supplier", "contractor")),
    ("NOUN", ("meeting", "walkthrough", "session")),
    ("NOUN", ("week", "cycle", "sprint")),
    ("NOUN", ("folder", "directory", "share")),
    ("NOUN", ("plan", "schedule", "roadmap")),
    ("VERB", ("call", "ring", "dial")),
    ("VERB", ("send", "forward", "mail")),
    ("VERB", ("posted", "uploaded", "published")),
    ("VERB", ("sharing", "circulating", "distributing")),
    ("VERB", ("closed", "resolved", "finished")),
    ("VERB", ("promised", "pledged", "guaranteed")),
    ("VERB", ("asked", "requested", "urged")),
    ("VERB", ("signed", "approved", "endorsed")),
    ("ADJ", ("quick", "fast", "brief")),
    ("ADJ", ("short", "small", "minor")),
    ("ADJ", ("rough", "coarse", "unpolished")),
    ("ADJ", ("open", "pending", "unresolved")),
    ("ADJ", ("final", "last", "closing")),
    ("ADJ", ("old", "prior", "earlier")),
)

DEFAULT_STOPWORDS = (
    "a", "an", "the", "of", "to", "in", "on", "at", "for", "and", "or", "but",
    "is", "are", "was", "were", "be", "been", "by", "with", "from", "as", "if",
    "so", "we", "i", "you", "it", "this", "that", "our", "your", "my", "me",
    "us", "per", "via",
)


def write_toy_perturbation_files(out_dir, seed: int = 0, dim: int = 16):
    """Emit embeddings/POS/stoplist files for ``TOY_SYNONYM_GROUPS``.

    Words in the same group share a base direction plus a small jitter, so
    each word's nearest neighbors are its own group mates (same POS tag).
    Returns the three file paths (embeddings, pos, stoplist).
    """
    import os

    rng = np.random.default_rng(seed)
    words = []
    vectors = []
    pos_rows = []
    for tag, group in TOY_SYNONYM_GROUPS:
        base = rng.normal(size=dim)
        base /= np.linalg.norm(base)
        for word in group:
            jitter = rng.normal(scale=0.05, size=dim)
            vec = base + jitter
            vec /= np.linalg.norm(vec)
            words.append(word)
            vectors.append(vec)
            pos_rows.append((word, tag))

    emb_path = os.path.join(out_dir, "perturb_embeddings.txt")
    pos_path = os.path.join(out_dir, "perturb_pos.tsv")
    stop_path = os.path.join(out_dir, "perturb_stoplist.txt")
    with open(emb_path, "w", encoding="utf-8") as fh:
        fh.write(f"{len(words)} {dim}\n")
        for word, vec in zip(words, vectors):
            fh.write(word + " " + " ".join(f"{v:.8f}" for v in vec) + "\n")
    with open(pos_path, "w", encoding="utf-8") as fh:
        for word, tag in pos_rows:
            fh.write(f"{word}\t{tag}\n")
    with open(stop_path, "w", encoding="utf-8") as fh:
        for word in DEFAULT_STOPWORDS:
            fh.write(word + "\n")
    return emb_path, pos_path, stop_path
