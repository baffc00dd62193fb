"""Synthetic corpora, tokenization, vocabulary, and client/round partitioning.

Documents are plain strings with optional PII annotations (phone, email,
name, date, link). The tokenizer is deliberately simple: lowercase words
split on whitespace, with every punctuation mark isolated as its own token.
The same tokenizer backs both model training and similarity scoring, so the
two always agree on what a "token" is.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field

import numpy as np

PII_KINDS = ("phone", "email", "name", "date", "link")

BOS, EOS, UNK, PAD = "[BOS]", "[EOS]", "[UNK]", "[PAD]"
SPECIALS = (BOS, EOS, UNK, PAD)
BOS_ID, EOS_ID, UNK_ID, PAD_ID = 0, 1, 2, 3

_TOKEN_RE = re.compile(r"[a-z0-9]+|[^a-z0-9\s]")


class CorpusError(ValueError):
    """Bad corpus configuration or unreadable/malformed corpus file."""


def tokenize(text: str) -> list[str]:
    """Lowercase and split into word tokens, isolating punctuation marks."""
    return _TOKEN_RE.findall(text.lower())


def normalize(text: str) -> str:
    """Canonical single-spaced lowercase form; used for substring matching."""
    return " ".join(tokenize(text))


@dataclass(frozen=True)
class PiiSpan:
    kind: str
    surface: str


@dataclass(frozen=True)
class Document:
    id: int
    text: str
    pii_spans: tuple[PiiSpan, ...] = ()


@dataclass(frozen=True)
class Corpus:
    documents: tuple[Document, ...]

    def __len__(self) -> int:
        return len(self.documents)

    def __iter__(self):
        return iter(self.documents)

    def __getitem__(self, i: int) -> Document:
        return self.documents[i]

    def by_id(self, doc_id: int) -> Document:
        doc = self.documents[doc_id]
        if doc.id != doc_id:
            raise CorpusError(f"document ids are not sequential near id {doc_id}")
        return doc


@dataclass(frozen=True)
class CorpusSpec:
    n_docs: int
    pii_density: float
    seed: int

    def __post_init__(self):
        if self.n_docs < 1:
            raise CorpusError(f"corpus.n_docs: must be >= 1, got {self.n_docs}")
        if not 0.0 <= self.pii_density <= 1.0:
            raise CorpusError(
                f"corpus.pii_density: must be in [0, 1], got {self.pii_density}"
            )


# Word pools for the synthetic email-like frames. Pool sizes are chosen so a
# few hundred documents produce a vocabulary in the high hundreds.
_FIRST_NAMES = [
    "alice", "bruno", "carla", "derek", "elena", "felix", "greta", "hector",
    "irene", "jonas", "karin", "lucas", "maria", "nadia", "oscar", "petra",
    "quinn", "rosa", "simon", "tanya", "ulrich", "vera", "wade", "ximena",
    "yusuf", "zelda", "amir", "bella", "ciro", "dora", "edgar", "fiona",
    "gilles", "hana", "ivan", "june", "kamal", "lidia", "marco", "nora",
]
_LAST_NAMES = [
    "alvarez", "becker", "castillo", "dubois", "eriksen", "fontaine", "garber",
    "haines", "ibarra", "jansen", "kowalski", "lindgren", "moreau", "novak",
    "okafor", "petrov", "quiroga", "reyes", "sandoval", "tanaka", "ueda",
    "vasquez", "weber", "xu", "yamada", "zhang", "abbott", "bauer", "cuellar",
    "duarte", "ellison", "ferraro", "grimaldi", "holt", "iverson", "jimenez",
    "keller", "lombardi", "mercer", "nilsson",
]
_COMPANIES = ["acme", "globex", "initech", "hooli", "vandelay", "umbrella", "aperture", "wernham"]
_TLDS = ["com", "org", "net"]
_MONTHS = ["Jan", "Feb", "Mar", "Apr", "May", "Jun", "Jul", "Aug", "Sep", "Oct", "Nov", "Dec"]
_LINK_PATHS = [
    "q3-summary", "draft-v2", "roadmap", "agenda", "budget-final", "notes",
    "onboarding", "retro-board", "forecast", "checklist", "timeline", "minutes",
    "handbook", "survey", "archive", "slides",
]
_SUBJECTS = [
    "quarterly numbers", "vendor contract", "site migration", "travel approval",
    "budget review", "release schedule", "audit findings", "training session",
    "office move", "invoice backlog", "hiring plan", "security patch",
    "customer escalation", "maintenance window", "board update", "design review",
]
_TEAMS = [
    "billing desk", "support team", "legal group", "ops crew", "finance office",
    "records room", "lab staff", "field unit",
]
_GREETS = ["team", "folks", "all", "everyone", "there"]
_INTROS = [
    "quick note about the {subject} .",
    "following up on the {subject} .",
    "sharing an update on the {subject} .",
    "the {subject} needs one more look .",
    "flagging a change to the {subject} .",
    "please treat the {subject} as urgent .",
]
_PHONE_TPL = "call me at {phone} with questions ."
_PHONE_ALTS = [
    "call the front desk with questions .",
    "ring the main line with questions .",
    "reach the duty phone with questions .",
    "use the help line with questions .",
]
_EMAIL_TPL = "send the signed copy to {email} ."
_EMAIL_ALTS = [
    "send the signed copy to the shared folder .",
    "drop the signed copy in the archive .",
    "leave the signed copy with reception .",
    "file the signed copy under review .",
]
_DATE_TPL = "the walkthrough is set for {date} ."
_DATE_ALTS = [
    "the walkthrough is set for next week .",
    "the walkthrough moves to a later slot .",
    "the walkthrough stays on the usual day .",
    "the walkthrough will be rescheduled soon .",
]
_LINK_TPL = "the slides are posted at {link} ."
_LINK_ALTS = [
    "the slides are posted on the wiki .",
    "the slides sit in the team drive .",
    "the slides went out with the agenda .",
    "the slides follow in a second note .",
]
_NAME_TPL = "thanks , {name}"
_NAME_ALTS = ["thanks , the {team}", "regards , the {team}", "best , the {team}", "cheers , the {team}"]


def generate_synthetic_corpus(spec: CorpusSpec) -> Corpus:
    """Build a deterministic synthetic corpus of templated email-like notes.

    Each document carries five candidate PII slots (phone, email, name,
    date, link); every slot is independently filled with probability
    ``spec.pii_density`` and recorded in ``pii_spans``, otherwise a neutral
    filler phrase takes its place.
    """
    rng = np.random.default_rng(spec.seed)
    docs = []
    for doc_id in range(spec.n_docs):
        first = _FIRST_NAMES[rng.integers(len(_FIRST_NAMES))]
        last = _LAST_NAMES[rng.integers(len(_LAST_NAMES))]
        company = _COMPANIES[rng.integers(len(_COMPANIES))]
        tld = _TLDS[rng.integers(len(_TLDS))]
        subject = _SUBJECTS[rng.integers(len(_SUBJECTS))]
        team = _TEAMS[rng.integers(len(_TEAMS))]
        greet = _GREETS[rng.integers(len(_GREETS))]
        intro = _INTROS[rng.integers(len(_INTROS))].format(subject=subject)

        ref = rng.integers(1000, 10000)
        keep = rng.random(5) < spec.pii_density
        alts = rng.integers(4, size=5)
        spans = []

        if keep[0]:
            phone = f"555-{rng.integers(10000):04d}"
            phone_sent = _PHONE_TPL.format(phone=phone)
            spans.append(PiiSpan("phone", phone))
        else:
            phone_sent = _PHONE_ALTS[alts[0]]
        if keep[1]:
            email = f"{first}.{last}@{company}.{tld}"
            email_sent = _EMAIL_TPL.format(email=email)
            spans.append(PiiSpan("email", email))
        else:
            email_sent = _EMAIL_ALTS[alts[1]]
        if keep[2]:
            date = f"{rng.integers(1, 29)} {_MONTHS[rng.integers(12)]} {rng.integers(2021, 2028)}"
            date_sent = _DATE_TPL.format(date=date)
            spans.append(PiiSpan("date", date))
        else:
            date_sent = _DATE_ALTS[alts[2]]
        if keep[3]:
            link = f"http://{company}.{tld}/{_LINK_PATHS[rng.integers(len(_LINK_PATHS))]}"
            link_sent = _LINK_TPL.format(link=link)
            spans.append(PiiSpan("link", link))
        else:
            link_sent = _LINK_ALTS[alts[3]]
        if keep[4]:
            name = f"{first} {last}"
            closing = _NAME_TPL.format(name=name)
            spans.append(PiiSpan("name", name))
        else:
            closing = _NAME_ALTS[alts[4]].format(team=team)

        parts = [
            f"from the {team} . subject : {subject} ( ref {ref} ) .",
            f"hi {greet} , {intro}",
            phone_sent,
            email_sent,
            date_sent,
            link_sent,
            closing,
        ]
        docs.append(Document(doc_id, " ".join(parts), tuple(spans)))
    return Corpus(tuple(docs))


def ingest_corpus(path, fmt: str) -> Corpus:
    """Read a corpus from disk: one document per line (``plain_lines``) or
    per JSON record with a ``text`` field (``jsonl``)."""
    if fmt not in ("plain_lines", "jsonl"):
        raise CorpusError(f"unknown corpus format {fmt!r}")
    docs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if fmt == "plain_lines":
                docs.append(Document(len(docs), line))
                continue
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: invalid JSON record: {exc}") from exc
            if not isinstance(record, dict) or "text" not in record:
                raise CorpusError(f"{path}:{lineno}: record has no 'text' field")
            spans = tuple(
                PiiSpan(p["kind"], p["surface"]) for p in record.get("pii", [])
            )
            docs.append(Document(len(docs), str(record["text"]), spans))
    return Corpus(tuple(docs))


def save_corpus_jsonl(corpus: Corpus, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for doc in corpus:
            record = {
                "id": doc.id,
                "text": doc.text,
                "pii": [{"kind": s.kind, "surface": s.surface} for s in doc.pii_spans],
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]
    token_to_id: dict = field(repr=False, hash=False, compare=False, default=None)

    def __post_init__(self):
        object.__setattr__(
            self, "token_to_id", {t: i for i, t in enumerate(self.tokens)}
        )

    def __len__(self) -> int:
        return len(self.tokens)

    def encode_tokens(self, tokens: list[str]) -> list[int]:
        lookup = self.token_to_id
        return [lookup.get(t, UNK_ID) for t in tokens]

    def encode(self, text: str) -> list[int]:
        return self.encode_tokens(tokenize(text))

    def id_to_token(self, token_id: int) -> str:
        if not 0 <= token_id < len(self.tokens):
            raise CorpusError(f"token id {token_id} out of range for vocab of {len(self.tokens)}")
        return self.tokens[token_id]

    def decode_tokens(self, ids) -> list[str]:
        return [self.id_to_token(int(i)) for i in ids]

    def decode(self, ids) -> str:
        return " ".join(self.decode_tokens(ids))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for token in self.tokens:
                fh.write(token + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            tokens = tuple(line.rstrip("\n") for line in fh)
        if tokens[: len(SPECIALS)] != SPECIALS:
            raise CorpusError(f"{path}: vocab file does not start with the special tokens")
        return cls(tokens)


def build_vocab(corpus: Corpus, max_size: int) -> Vocab:
    """Specials plus the most frequent corpus tokens, ties broken lexicographically."""
    if max_size < len(SPECIALS):
        raise CorpusError(f"vocab max_size must be >= {len(SPECIALS)}, got {max_size}")
    counts: dict[str, int] = {}
    for doc in corpus:
        for token in tokenize(doc.text):
            counts[token] = counts.get(token, 0) + 1
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = [token for token, _ in ranked[: max_size - len(SPECIALS)]]
    return Vocab(SPECIALS + tuple(kept))


@dataclass(frozen=True)
class RoundPlan:
    n_clients: int
    n_rounds: int
    shards: dict  # (round, client) -> tuple of document ids

    def shard(self, round_idx: int, client_idx: int) -> tuple[int, ...]:
        return self.shards[(round_idx, client_idx)]

    def round_doc_ids(self, round_idx: int) -> list[int]:
        ids: list[int] = []
        for client in range(self.n_clients):
            ids.extend(self.shards[(round_idx, client)])
        return ids


def partition(corpus: Corpus, n_clients: int, n_rounds: int, seed: int) -> RoundPlan:
    """Shuffle documents and deal them into ``n_rounds * n_clients`` near-equal
    shards so that every document is trained on exactly once."""
    n_cells = n_clients * n_rounds
    if len(corpus) < n_cells:
        raise CorpusError(
            f"corpus too small: {len(corpus)} documents for {n_clients} clients x "
            f"{n_rounds} rounds (need at least {n_cells})"
        )
    rng = np.random.default_rng(seed)
    order = [int(i) for i in rng.permutation(len(corpus))]
    base, extra = divmod(len(order), n_cells)
    shards = {}
    pos = 0
    cell = 0
    for round_idx in range(n_rounds):
        for client_idx in range(n_clients):
            size = base + (1 if cell < extra else 0)
            shards[(round_idx, client_idx)] = tuple(order[pos : pos + size])
            pos += size
            cell += 1
    return RoundPlan(n_clients, n_rounds, shards)


def doc_token_ids(vocab: Vocab, doc: Document) -> list[int]:
    """Token-id stream for training: [BOS] body [EOS]."""
    return [BOS_ID] + vocab.encode(doc.text) + [EOS_ID]


def build_examples(vocab: Vocab, docs, context_len: int):
    """Sliding next-token examples over each document's id stream.

    Contexts are left-padded with [PAD] to exactly ``context_len`` ids; one
    example per predicted position, from the first body token through [EOS].
    """
    contexts = []
    targets = []
    for doc in docs:
        stream = doc_token_ids(vocab, doc)
        padded = [PAD_ID] * context_len + stream
        for j in range(1, len(stream)):
            end = context_len + j
            contexts.append(padded[end - context_len : end])
            targets.append(stream[j])
    return (
        np.asarray(contexts, dtype=np.int64),
        np.asarray(targets, dtype=np.int64),
    )


def prefix_split(tokens: list[str], prefix_fraction: float) -> tuple[list[str], list[str]]:
    """Ceiling split by token count; raises if either side would be empty."""
    if not 0.0 < prefix_fraction < 1.0:
        raise CorpusError(f"prefix_fraction must be in (0, 1), got {prefix_fraction}")
    cut = math.ceil(prefix_fraction * len(tokens))
    if cut == 0 or cut >= len(tokens):
        raise CorpusError(
            f"document with {len(tokens)} tokens cannot be split at fraction {prefix_fraction}"
        )
    return tokens[:cut], tokens[cut:]
