"""Document model and corpus ingestion.

The JSON layout mirrors DocRED: each document is an object with ``title``,
``sents`` (list of token lists), ``vertexSet`` (list of entities, each a
list of mentions with ``name`` / ``sent_id`` / ``pos`` / ``type``), and
``labels`` (list of ``{h, t, r}``).  Files may hold either a JSON array of
documents or one JSON object per line.
"""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from typing import Optional, Sequence


class CorpusError(ValueError):
    """Raised for malformed corpora; message carries doc id and location."""


@dataclass(frozen=True)
class Mention:
    """A contiguous token span inside one sentence. ``pos`` is half-open."""

    sent_id: int
    start: int
    end: int
    name: str = ""

    def __post_init__(self):
        if self.end <= self.start:
            raise CorpusError(
                f"mention {self.name!r}: span [{self.start}, {self.end}) is empty"
            )


@dataclass(frozen=True)
class Entity:
    """A set of coreferential mentions with one type label."""

    etype: str
    mentions: tuple[Mention, ...]

    def __post_init__(self):
        if not self.mentions:
            raise CorpusError("entity with zero mentions")
        object.__setattr__(self, "mentions", tuple(self.mentions))


@dataclass(frozen=True)
class RelationFact:
    """Directed fact: subject entity ordinal, object ordinal, relation name."""

    h: int
    t: int
    r: str

    def __post_init__(self):
        if self.h == self.t:
            raise CorpusError(f"fact {self.r!r}: subject equals object ({self.h})")


@dataclass(frozen=True)
class Document:
    doc_id: str
    sentences: tuple[tuple[str, ...], ...]
    entities: tuple[Entity, ...]
    facts: tuple[RelationFact, ...]

    def __post_init__(self):
        object.__setattr__(
            self, "sentences", tuple(tuple(s) for s in self.sentences)
        )
        object.__setattr__(self, "entities", tuple(self.entities))
        object.__setattr__(self, "facts", tuple(self.facts))

    def token_count(self) -> int:
        return sum(len(s) for s in self.sentences)

    def tokens(self) -> list[str]:
        return [tok for sent in self.sentences for tok in sent]

    def sentence_offsets(self) -> list[int]:
        offsets = []
        total = 0
        for sent in self.sentences:
            offsets.append(total)
            total += len(sent)
        return offsets

    def global_span(self, mention: Mention) -> tuple[int, int]:
        base = self.sentence_offsets()[mention.sent_id]
        return base + mention.start, base + mention.end

    def mention_tokens(self, entity_index: int) -> list[int]:
        """Global token indices across all mentions of one entity."""
        out = []
        for mention in self.entities[entity_index].mentions:
            lo, hi = self.global_span(mention)
            out.extend(range(lo, hi))
        return out


def validate_document(doc: Document, schema: Optional[Sequence[str]] = None) -> None:
    """Check span bounds, mention disjointness, and fact indices.

    ``schema``, when given, restricts admissible relation names.
    """
    claimed: dict[int, str] = {}
    for entity in doc.entities:
        for mention in entity.mentions:
            if not (0 <= mention.sent_id < len(doc.sentences)):
                raise CorpusError(
                    f"doc {doc.doc_id!r}: mention {mention.name!r} names "
                    f"sentence {mention.sent_id}, document has {len(doc.sentences)}"
                )
            sent_len = len(doc.sentences[mention.sent_id])
            if mention.end > sent_len:
                raise CorpusError(
                    f"doc {doc.doc_id!r}: mention {mention.name!r} span "
                    f"[{mention.start}, {mention.end}) exceeds sentence "
                    f"{mention.sent_id} of length {sent_len}"
                )
            lo, hi = doc.global_span(mention)
            for t in range(lo, hi):
                if t in claimed:
                    raise CorpusError(
                        f"doc {doc.doc_id!r}: mention {mention.name!r} overlaps "
                        f"mention {claimed[t]!r} at token {t}"
                    )
                claimed[t] = mention.name
    for fact in doc.facts:
        for side, idx in (("subject", fact.h), ("object", fact.t)):
            if not (0 <= idx < len(doc.entities)):
                raise CorpusError(
                    f"doc {doc.doc_id!r}: fact {fact.r!r} {side} index {idx} "
                    f"out of range for {len(doc.entities)} entities"
                )
        if schema is not None and fact.r not in schema:
            raise CorpusError(
                f"doc {doc.doc_id!r}: unknown relation {fact.r!r} in labels"
            )


def _document_from_json(obj: dict, index: int) -> Document:
    doc_id = obj.get("title", f"doc{index}")
    try:
        sents = obj["sents"]
        vertex_set = obj["vertexSet"]
    except KeyError as exc:
        raise CorpusError(f"doc {doc_id!r}: missing field {exc.args[0]!r}") from exc
    entities = []
    for mentions in vertex_set:
        if not mentions:
            raise CorpusError(f"doc {doc_id!r}: entity with zero mentions")
        parsed = []
        etype = mentions[0].get("type", "")
        for m in mentions:
            try:
                start, end = m["pos"]
                parsed.append(
                    Mention(
                        sent_id=int(m["sent_id"]),
                        start=int(start),
                        end=int(end),
                        name=str(m.get("name", "")),
                    )
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise CorpusError(
                    f"doc {doc_id!r}: malformed mention {m!r}"
                ) from exc
        entities.append(Entity(etype=etype, mentions=tuple(parsed)))
    facts = []
    for label in obj.get("labels", []):
        try:
            facts.append(
                RelationFact(h=int(label["h"]), t=int(label["t"]), r=str(label["r"]))
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise CorpusError(f"doc {doc_id!r}: malformed label {label!r}") from exc
    doc = Document(
        doc_id=doc_id,
        sentences=tuple(tuple(str(tok) for tok in sent) for sent in sents),
        entities=tuple(entities),
        facts=tuple(facts),
    )
    return doc


def parse_corpus(path, schema: Optional[Sequence[str]] = None) -> list[Document]:
    """Load and validate a corpus file.

    Accepts a JSON array or one JSON object per line.  Every document is
    validated; errors identify the document and the offending mention or
    label.
    """
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    stripped = text.lstrip()
    if not stripped:
        return []
    try:
        if stripped.startswith("["):
            raw = json.loads(text)
        else:
            raw = [json.loads(line) for line in text.splitlines() if line.strip()]
    except json.JSONDecodeError as exc:
        raise CorpusError(f"{path}: malformed JSON: {exc}") from exc
    docs = []
    for i, obj in enumerate(raw):
        doc = _document_from_json(obj, i)
        validate_document(doc, schema)
        docs.append(doc)
    return docs


def document_to_json(doc: Document) -> dict:
    return {
        "title": doc.doc_id,
        "sents": [list(sent) for sent in doc.sentences],
        "vertexSet": [
            [
                {
                    "name": m.name,
                    "sent_id": m.sent_id,
                    "pos": [m.start, m.end],
                    "type": e.etype,
                }
                for m in e.mentions
            ]
            for e in doc.entities
        ],
        "labels": [{"h": f.h, "t": f.t, "r": f.r} for f in doc.facts],
    }


def write_corpus(docs: Sequence[Document], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump([document_to_json(d) for d in docs], fh, ensure_ascii=False)
        fh.write("\n")


PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"


@dataclass(frozen=True)
class Vocabulary:
    word_to_index: dict[str, int]
    pad_index: int = 0
    unk_index: int = 1

    def __len__(self) -> int:
        return len(self.word_to_index)

    def index(self, word: str) -> int:
        return self.word_to_index.get(word, self.unk_index)


def build_vocab(docs: Sequence[Document], min_count: int = 1) -> Vocabulary:
    """Word-to-index map with reserved padding and unknown slots.

    Words below ``min_count`` fall through to the unknown index.  Index
    order is first occurrence over the corpus, so a fixed corpus yields a
    fixed vocabulary.
    """
    counts: Counter[str] = Counter()
    first_seen: list[str] = []
    seen = set()
    for doc in docs:
        for tok in doc.tokens():
            counts[tok] += 1
            if tok not in seen:
                seen.add(tok)
                first_seen.append(tok)
    mapping = {PAD_TOKEN: 0, UNK_TOKEN: 1}
    for tok in first_seen:
        if counts[tok] >= min_count:
            mapping[tok] = len(mapping)
    return Vocabulary(word_to_index=mapping)


def entity_type_labels(docs: Sequence[Document]) -> list[str]:
    """Sorted closed set of entity type labels present in a corpus."""
    return sorted({e.etype for doc in docs for e in doc.entities})


@dataclass(frozen=True)
class CorpusStats:
    documents: int
    entities_per_doc: float
    mentions_per_doc: float
    mentions_per_sentence: float
    relation_types: int

    def render(self) -> str:
        lines = [
            "metric\tvalue",
            f"documents\t{self.documents}",
            f"entities_per_doc\t{self.entities_per_doc:.4f}",
            f"mentions_per_doc\t{self.mentions_per_doc:.4f}",
            f"mentions_per_sentence\t{self.mentions_per_sentence:.4f}",
            f"relation_types\t{self.relation_types}",
        ]
        return "\n".join(lines) + "\n"


def corpus_stats(docs: Sequence[Document]) -> CorpusStats:
    """Corpus averages; sentences with no mention are excluded from the
    mentions-per-sentence denominator."""
    n_docs = len(docs)
    total_entities = 0
    total_mentions = 0
    mention_bearing_sentences = 0
    relations = set()
    for doc in docs:
        total_entities += len(doc.entities)
        sentences_with = set()
        for e in doc.entities:
            total_mentions += len(e.mentions)
            for m in e.mentions:
                sentences_with.add(m.sent_id)
        mention_bearing_sentences += len(sentences_with)
        relations.update(f.r for f in doc.facts)
    return CorpusStats(
        documents=n_docs,
        entities_per_doc=total_entities / n_docs if n_docs else 0.0,
        mentions_per_doc=total_mentions / n_docs if n_docs else 0.0,
        mentions_per_sentence=(
            total_mentions / mention_bearing_sentences
            if mention_bearing_sentences
            else 0.0
        ),
        relation_types=len(relations),
    )
