"""Relation extraction model: feature embedding, entity pooling, and the
pairwise bilinear classifier on top of the structured encoder.

Input embeddings sum word, learned absolute position, entity-type, and
coreference-ordinal tables.  Entity representations are the mean of all
their mention tokens.  Every ordered entity pair (subject != object) gets
its two vectors augmented with a signed-distance bucket embedding and is
scored against every relation with an independent bilinear form followed
by a sigmoid.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .autodiff import (
    Adam,
    ParameterStore,
    Tensor,
    add,
    binary_cross_entropy,
    concat,
    constant,
    matmul,
    mul,
    sigmoid,
    sum_all,
    sum_axis,
    take_rows,
    xavier_uniform,
)
from .batching import EncodedDocument
from .config import ModelConfig
from .corpus import Vocabulary
from .encoder import (
    BiasRecorder,
    EncoderConfig,
    encoder_forward,
    init_encoder_params,
)

#: Symmetric distance-bucket boundaries; index 9 is distance zero, positive
#: distances grow to the right, negative mirror to the left.
DISTANCE_BOUNDARIES = (1, 2, 4, 8, 16, 32, 64, 128, 256)
N_DISTANCE_BUCKETS = 2 * len(DISTANCE_BOUNDARIES) + 1


def distance_bucket(distance: int) -> int:
    """Bucket a signed token distance, symmetric around zero."""
    if distance == 0:
        return len(DISTANCE_BOUNDARIES)
    level = int(np.searchsorted(DISTANCE_BOUNDARIES, abs(distance), side="right"))
    if distance > 0:
        return len(DISTANCE_BOUNDARIES) + level
    return len(DISTANCE_BOUNDARIES) - level


@dataclass(frozen=True)
class PairScore:
    subject_index: int
    object_index: int
    probabilities: np.ndarray  # (M,) in schema order


@dataclass(frozen=True)
class PredictedFact:
    doc_id: str
    h: int
    t: int
    r: str
    probability: float


@dataclass
class ForwardResult:
    doc_id: str
    pairs: list[tuple[int, int]]
    probabilities: Optional[Tensor]  # (P, M), None when < 2 entities
    hidden: Tensor

    def pair_scores(self) -> list[PairScore]:
        if self.probabilities is None:
            return []
        values = self.probabilities.values
        return [
            PairScore(s, o, values[i].copy())
            for i, (s, o) in enumerate(self.pairs)
        ]


class RelationExtractor:
    """Owns all parameters and wires embeddings, encoder, and head."""

    def __init__(self, cfg: ModelConfig, vocab: Vocabulary,
                 etype_labels: Sequence[str], schema: Sequence[str]):
        if len(set(schema)) != len(schema):
            raise ValueError("relation schema contains duplicate names")
        if not schema:
            raise ValueError("relation schema is empty")
        self.cfg = cfg
        self.vocab = vocab
        self.etype_labels = list(etype_labels)
        self.etype_to_index = {t: i for i, t in enumerate(self.etype_labels)}
        self.schema = list(schema)
        self.rel_to_index = {r: i for i, r in enumerate(self.schema)}
        self.encoder_cfg = EncoderConfig(
            n_layers=cfg.layers,
            n_heads=cfg.heads,
            d_model=cfg.d_model,
            ffn_mult=cfg.ffn_mult,
            transformation=cfg.transformation(),
            structured_layers=cfg.resolve_structured_layers(),
        )
        self.store = ParameterStore()
        rng = np.random.default_rng(cfg.seed)
        d = cfg.d_model
        self.store.create("embed.word",
                          xavier_uniform(rng, len(vocab), d, (len(vocab), d)))
        self.store.create("embed.pos",
                          xavier_uniform(rng, cfg.max_len, d, (cfg.max_len, d)))
        n_types = len(self.etype_labels) + 1
        self.store.create("embed.etype",
                          xavier_uniform(rng, n_types, d, (n_types, d)))
        n_coref = cfg.coref_cap + 1
        self.store.create("embed.coref",
                          xavier_uniform(rng, n_coref, d, (n_coref, d)))
        init_encoder_params(self.store, rng, self.encoder_cfg)
        self.store.create(
            "head.dist",
            xavier_uniform(rng, N_DISTANCE_BUCKETS, cfg.d_dist,
                           (N_DISTANCE_BUCKETS, cfg.d_dist)),
        )
        d_e = d + cfg.d_dist
        for r in self.schema:
            self.store.create(f"head.rel.{r}.W",
                              xavier_uniform(rng, d_e, d_e, (d_e, d_e)))

    # ---- forward pieces -------------------------------------------------

    def embed_inputs(self, enc: EncodedDocument) -> Tensor:
        """Sum of word, position, entity-type, and coreference embeddings."""
        n = enc.n
        if n > self.cfg.max_len:
            raise ValueError(
                f"doc {enc.doc.doc_id!r} has {n} tokens, max_len is "
                f"{self.cfg.max_len}; truncate first"
            )
        x = take_rows(self.store["embed.word"].tensor, enc.word_idx)
        x = add(x, take_rows(self.store["embed.pos"].tensor, np.arange(n)))
        x = add(x, take_rows(self.store["embed.etype"].tensor, enc.etype_idx))
        x = add(x, take_rows(self.store["embed.coref"].tensor, enc.coref_idx))
        return x

    def pool_entities(self, hidden: Tensor, enc: EncodedDocument) -> Tensor:
        """Average each entity's mention tokens; (N, d_model)."""
        n, N = enc.n, enc.n_entities
        pool = np.zeros((N, n))
        for e, tokens in enumerate(enc.entity_tokens):
            pool[e, list(tokens)] = 1.0 / len(tokens)
        return matmul(constant(pool), hidden)

    def pair_features(self, entities: Tensor, enc: EncodedDocument,
                      ) -> tuple[Tensor, Tensor, list[tuple[int, int]]]:
        """Augment both sides of every ordered pair with its signed
        distance-bucket embedding."""
        N = enc.n_entities
        pairs = [(s, o) for s in range(N) for o in range(N) if s != o]
        subj = [s for s, _ in pairs]
        obj = [o for _, o in pairs]
        starts = enc.first_starts
        subj_buckets = [distance_bucket(starts[s] - starts[o]) for s, o in pairs]
        obj_buckets = [distance_bucket(starts[o] - starts[s]) for s, o in pairs]
        dist = self.store["head.dist"].tensor
        e_s = concat([take_rows(entities, subj), take_rows(dist, subj_buckets)],
                     axis=1)
        e_o = concat([take_rows(entities, obj), take_rows(dist, obj_buckets)],
                     axis=1)
        return e_s, e_o, pairs

    def score_relations(self, e_s: Tensor, e_o: Tensor) -> Tensor:
        """Sigmoid of the bilinear form per relation; (P, M)."""
        cols = []
        for r in self.schema:
            w = self.store[f"head.rel.{r}.W"].tensor
            cols.append(sum_axis(mul(matmul(e_s, w), e_o), axis=1, keepdims=True))
        return sigmoid(concat(cols, axis=1))

    def forward(self, enc: EncodedDocument,
                recorder: Optional[BiasRecorder] = None,
                key_padding: Optional[np.ndarray] = None) -> ForwardResult:
        x = self.embed_inputs(enc)
        hidden = encoder_forward(self.store, x, enc.structure,
                                 self.encoder_cfg, key_padding=key_padding,
                                 recorder=recorder)
        if enc.n_entities < 2:
            return ForwardResult(enc.doc.doc_id, [], None, hidden)
        entities = self.pool_entities(hidden, enc)
        e_s, e_o, pairs = self.pair_features(entities, enc)
        probs = self.score_relations(e_s, e_o)
        return ForwardResult(enc.doc.doc_id, pairs, probs, hidden)

    # ---- training and prediction ----------------------------------------

    def compute_loss(self, result: ForwardResult, enc: EncodedDocument) -> Tensor:
        """Summed binary cross entropy over every ordered pair and every
        relation of one document."""
        if result.probabilities is None:
            return constant(0.0)
        targets = np.zeros((len(result.pairs), len(self.schema)))
        row_of = {pair: i for i, pair in enumerate(result.pairs)}
        for fact in enc.doc.facts:
            if fact.r not in self.rel_to_index:
                raise ValueError(
                    f"doc {enc.doc.doc_id!r}: relation {fact.r!r} is not in "
                    f"the schema"
                )
            targets[row_of[(fact.h, fact.t)], self.rel_to_index[fact.r]] = 1.0
        return sum_all(binary_cross_entropy(result.probabilities, targets))

    def predict(self, result: ForwardResult,
                threshold: float) -> list[PredictedFact]:
        """Every (pair, relation) whose probability reaches the threshold;
        the comparison is inclusive."""
        if not 0.0 < threshold < 1.0:
            raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
        if result.probabilities is None:
            return []
        out = []
        values = result.probabilities.values
        for i, (s, o) in enumerate(result.pairs):
            for j, r in enumerate(self.schema):
                if values[i, j] >= threshold:
                    out.append(
                        PredictedFact(result.doc_id, s, o, r,
                                      float(values[i, j]))
                    )
        return out

    def make_optimizer(self) -> Adam:
        return Adam(
            self.store,
            lr=self.cfg.lr,
            betas=(self.cfg.beta1, self.cfg.beta2),
            eps=self.cfg.adam_eps,
        )

    def parameter_arrays(self) -> dict[str, np.ndarray]:
        return self.store.state_arrays()

    def load_parameter_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.store.load_state_arrays(arrays)
