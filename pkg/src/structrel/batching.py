"""Document encoding and batch assembly.

Documents are turned into index arrays (word, position is implicit,
entity-type, coreference ordinal) plus their structure matrix.  Batches
right-pad everything to the longest member; padded tokens use the pad
word index, feature index 0, and NA structure cells.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import Document, Entity, Mention, RelationFact, Vocabulary
from .structure import (
    DependencyType,
    StructureMatrix,
    apply_ablation,
    build_structure_matrix,
)


class TruncationWarning(UserWarning):
    pass


@dataclass(frozen=True)
class EncodedDocument:
    doc: Document
    word_idx: np.ndarray      # (n,) vocabulary indices
    etype_idx: np.ndarray     # (n,) 0 = non-entity, else 1 + type ordinal
    coref_idx: np.ndarray     # (n,) 0 = non-entity, else 1 + entity ordinal
    structure: StructureMatrix
    entity_tokens: tuple[tuple[int, ...], ...]
    first_starts: tuple[int, ...]  # earliest mention start per entity

    @property
    def n(self) -> int:
        return len(self.word_idx)

    @property
    def n_entities(self) -> int:
        return len(self.entity_tokens)


def encode_document(doc: Document, vocab: Vocabulary,
                    etype_to_index: dict[str, int], coref_cap: int,
                    excluded: frozenset[DependencyType] = frozenset(),
                    ) -> EncodedDocument:
    n = doc.token_count()
    word_idx = np.array([vocab.index(tok) for tok in doc.tokens()], dtype=np.int64)
    etype_idx = np.zeros(n, dtype=np.int64)
    coref_idx = np.zeros(n, dtype=np.int64)
    entity_tokens = []
    first_starts = []
    for e_ord, entity in enumerate(doc.entities):
        if e_ord + 1 > coref_cap:
            raise ValueError(
                f"doc {doc.doc_id!r}: entity ordinal {e_ord} exceeds the "
                f"coreference table capacity {coref_cap}"
            )
        if entity.etype not in etype_to_index:
            raise ValueError(
                f"doc {doc.doc_id!r}: unknown entity type {entity.etype!r}"
            )
        tokens = doc.mention_tokens(e_ord)
        entity_tokens.append(tuple(tokens))
        starts = [doc.global_span(m)[0] for m in entity.mentions]
        first_starts.append(min(starts))
        for t in tokens:
            etype_idx[t] = 1 + etype_to_index[entity.etype]
            coref_idx[t] = 1 + e_ord
    structure = build_structure_matrix(doc)
    if excluded:
        structure = apply_ablation(structure, excluded)
    return EncodedDocument(
        doc=doc,
        word_idx=word_idx,
        etype_idx=etype_idx,
        coref_idx=coref_idx,
        structure=structure,
        entity_tokens=tuple(entity_tokens),
        first_starts=tuple(first_starts),
    )


def truncate_document(doc: Document, max_len: int) -> Document:
    """Cut a document to its first ``max_len`` tokens.

    Mentions that cross or fall beyond the cut are dropped, entities left
    with no mention disappear, and facts touching a removed entity are
    dropped; every loss is warned.
    """
    if doc.token_count() <= max_len:
        return doc
    sentences: list[tuple[str, ...]] = []
    budget = max_len
    for sent in doc.sentences:
        if budget <= 0:
            break
        kept = sent[:budget]
        sentences.append(tuple(kept))
        budget -= len(kept)
    remap: dict[int, int] = {}
    entities: list[Entity] = []
    for e_ord, entity in enumerate(doc.entities):
        kept_mentions: list[Mention] = []
        for m in entity.mentions:
            lo, hi = doc.global_span(m)
            if hi <= max_len:
                kept_mentions.append(m)
            else:
                warnings.warn(
                    f"doc {doc.doc_id!r}: dropping mention {m.name!r} at "
                    f"[{lo}, {hi}) beyond the {max_len}-token cut",
                    TruncationWarning,
                )
        if kept_mentions:
            remap[e_ord] = len(entities)
            entities.append(Entity(entity.etype, tuple(kept_mentions)))
        else:
            warnings.warn(
                f"doc {doc.doc_id!r}: entity {e_ord} lost all mentions to "
                f"truncation",
                TruncationWarning,
            )
    facts: list[RelationFact] = []
    for fact in doc.facts:
        if fact.h in remap and fact.t in remap:
            facts.append(RelationFact(remap[fact.h], remap[fact.t], fact.r))
        else:
            warnings.warn(
                f"doc {doc.doc_id!r}: dropping fact ({fact.h}, {fact.t}, "
                f"{fact.r!r}); an endpoint was truncated away",
                TruncationWarning,
            )
    return Document(doc.doc_id, tuple(sentences), tuple(entities), tuple(facts))


@dataclass(frozen=True)
class Batch:
    """Padded grids plus the per-document encodings they were built from."""

    encodings: tuple[EncodedDocument, ...]
    token_grid: np.ndarray      # (B, L) word indices, pad index where padded
    pad_mask: np.ndarray        # (B, L) True at real tokens
    etype_grid: np.ndarray      # (B, L)
    coref_grid: np.ndarray      # (B, L)
    structure_grid: np.ndarray  # (B, L, L) dependency codes, NA where padded

    @property
    def size(self) -> int:
        return len(self.encodings)

    @property
    def length(self) -> int:
        return self.token_grid.shape[1]

    def gold_facts(self) -> list[tuple[str, int, int, str]]:
        return [
            (enc.doc.doc_id, f.h, f.t, f.r)
            for enc in self.encodings
            for f in enc.doc.facts
        ]


def _assemble(encodings: Sequence[EncodedDocument],
              pad_index: int) -> Batch:
    B = len(encodings)
    L = max(enc.n for enc in encodings)
    token_grid = np.full((B, L), pad_index, dtype=np.int64)
    pad_mask = np.zeros((B, L), dtype=bool)
    etype_grid = np.zeros((B, L), dtype=np.int64)
    coref_grid = np.zeros((B, L), dtype=np.int64)
    structure_grid = np.full(
        (B, L, L), DependencyType.NA, dtype=np.int8
    )
    for i, enc in enumerate(encodings):
        n = enc.n
        token_grid[i, :n] = enc.word_idx
        pad_mask[i, :n] = True
        etype_grid[i, :n] = enc.etype_idx
        coref_grid[i, :n] = enc.coref_idx
        structure_grid[i, :n, :n] = enc.structure.codes
    return Batch(
        encodings=tuple(encodings),
        token_grid=token_grid,
        pad_mask=pad_mask,
        etype_grid=etype_grid,
        coref_grid=coref_grid,
        structure_grid=structure_grid,
    )


def make_batches(docs: Sequence[Document], vocab: Vocabulary,
                 etype_to_index: dict[str, int], max_len: int,
                 batch_size: int, seed: int, coref_cap: int = 64,
                 excluded: frozenset[DependencyType] = frozenset(),
                 shuffle: bool = True) -> list[Batch]:
    """Seeded shuffle, truncation, encoding, and padding."""
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    order = np.arange(len(docs))
    if shuffle:
        order = np.random.default_rng(seed).permutation(len(docs))
    batches = []
    chunk: list[EncodedDocument] = []
    for pos in order:
        doc = truncate_document(docs[pos], max_len)
        chunk.append(
            encode_document(doc, vocab, etype_to_index, coref_cap, excluded)
        )
        if len(chunk) == batch_size:
            batches.append(_assemble(chunk, vocab.pad_index))
            chunk = []
    if chunk:
        batches.append(_assemble(chunk, vocab.pad_index))
    return batches
