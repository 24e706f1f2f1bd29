"""Structured self-attention encoder.

Each block is standard post-norm multi-head attention plus a feed-forward
network, with one addition: before the softmax, every query-key score
receives a learned scalar bias chosen by the dependency type of that token
pair.  Two bias parameterizations are supported, a bilinear (biaffine)
form ``q A_s k^T + b_s`` and a decomposed linear form
``q K_s + Q_s k + b_s`` whose three terms can be toggled independently.
NA cells carry no parameters and contribute exactly zero, so a model whose
structure is all NA computes the same function as the unstructured
baseline.

Bias parameters are owned per layer, per head, and per dependency type;
they are never shared.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .autodiff import (
    ParameterStore,
    Tensor,
    add,
    concat,
    constant,
    masked_fill,
    matmul,
    mul,
    relu,
    scale,
    softmax_rows,
    layer_norm,
    transpose,
    xavier_uniform,
)
from .structure import STRUCTURED_TYPES, DependencyType, StructureMatrix

NEG_FILL = -1e30


class TransformationError(ValueError):
    pass


@dataclass(frozen=True)
class Transformation:
    """Bias parameterization: which form, and which terms are live.

    ``mode`` is one of ``none``, ``biaffine``, ``decomp``.  Mode ``none``
    forces every toggle off.  The decomposed toggles (``query_conditioned``,
    ``key_conditioned``) belong to decomp mode; ``biaffine_core`` belongs to
    biaffine mode; ``prior`` is available to both.
    """

    mode: str = "none"
    biaffine_core: bool = False
    query_conditioned: bool = False
    key_conditioned: bool = False
    prior: bool = False

    def __post_init__(self):
        if self.mode not in ("none", "biaffine", "decomp"):
            raise TransformationError(f"unknown transformation mode {self.mode!r}")
        if self.mode == "none" and any(
            (self.biaffine_core, self.query_conditioned, self.key_conditioned,
             self.prior)
        ):
            raise TransformationError("mode 'none' admits no bias terms")
        if self.mode == "biaffine" and (self.query_conditioned or self.key_conditioned):
            raise TransformationError(
                "query/key conditioned terms belong to decomp mode"
            )
        if self.mode == "decomp" and self.biaffine_core:
            raise TransformationError("the bilinear core belongs to biaffine mode")

    @property
    def active(self) -> bool:
        return self.mode != "none" and any(
            (self.biaffine_core, self.query_conditioned, self.key_conditioned,
             self.prior)
        )

    @staticmethod
    def none() -> "Transformation":
        return Transformation("none")

    @staticmethod
    def biaffine(core: bool = True, prior: bool = True) -> "Transformation":
        return Transformation("biaffine", biaffine_core=core, prior=prior)

    @staticmethod
    def decomp(query: bool = True, key: bool = True,
               prior: bool = True) -> "Transformation":
        return Transformation(
            "decomp", query_conditioned=query, key_conditioned=key, prior=prior
        )


@dataclass(frozen=True)
class EncoderConfig:
    n_layers: int
    n_heads: int
    d_model: int
    ffn_mult: int = 4
    transformation: Transformation = Transformation.none()
    structured_layers: frozenset[int] = frozenset()

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} is not divisible by {self.n_heads} heads"
            )
        bad = [l for l in self.structured_layers if not 0 <= l < self.n_layers]
        if bad:
            raise ValueError(f"structured layers {bad} outside [0, {self.n_layers})")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


@dataclass(frozen=True)
class BiasRecord:
    """Mean attentive bias over one document's cells of one dependency
    type, for one layer and head."""

    layer: int
    head: int
    dependency: DependencyType
    mean_bias: float
    count: int

    def __post_init__(self):
        if self.dependency == DependencyType.NA:
            raise ValueError("NA cells are never recorded")
        if self.count <= 0:
            raise ValueError("a bias record requires at least one cell")


def _dep_key(dep: DependencyType) -> str:
    return dep.name.lower()


def bias_param_prefix(layer: int, head: int, dep: DependencyType) -> str:
    if dep == DependencyType.NA:
        raise TransformationError("NA carries no bias parameters")
    return f"layer{layer}.head{head}.bias.{_dep_key(dep)}"


def init_encoder_params(store: ParameterStore, rng: np.random.Generator,
                        cfg: EncoderConfig) -> None:
    """Create all encoder parameters.

    Projections are Xavier-uniform; bias-transformation parameters start at
    zero so an untrained structured model is exactly the baseline.
    """
    d, dh = cfg.d_model, cfg.d_head
    tf = cfg.transformation
    for l in range(cfg.n_layers):
        for h in range(cfg.n_heads):
            for name in ("wq", "wk", "wv"):
                store.create(
                    f"layer{l}.head{h}.{name}",
                    xavier_uniform(rng, d, dh, (d, dh)),
                )
            if tf.active and l in cfg.structured_layers:
                for dep in STRUCTURED_TYPES:
                    prefix = bias_param_prefix(l, h, dep)
                    if tf.biaffine_core:
                        store.create(f"{prefix}.A", np.zeros((dh, dh)))
                    if tf.query_conditioned:
                        store.create(f"{prefix}.qvec", np.zeros((dh, 1)))
                    if tf.key_conditioned:
                        store.create(f"{prefix}.kvec", np.zeros((dh, 1)))
                    if tf.prior:
                        store.create(f"{prefix}.b", np.zeros(()))
        store.create(f"layer{l}.wo", xavier_uniform(rng, d, d, (d, d)))
        store.create(f"layer{l}.ln1.gain", np.ones(d))
        store.create(f"layer{l}.ln1.bias", np.zeros(d))
        store.create(f"layer{l}.ffn.w1", xavier_uniform(rng, d, d * cfg.ffn_mult,
                                                        (d, d * cfg.ffn_mult)))
        store.create(f"layer{l}.ffn.b1", np.zeros(d * cfg.ffn_mult))
        store.create(f"layer{l}.ffn.w2", xavier_uniform(rng, d * cfg.ffn_mult, d,
                                                        (d * cfg.ffn_mult, d)))
        store.create(f"layer{l}.ffn.b2", np.zeros(d))
        store.create(f"layer{l}.ln2.gain", np.ones(d))
        store.create(f"layer{l}.ln2.bias", np.zeros(d))


def project_qkv(store: ParameterStore, x: Tensor, layer: int,
                head: int) -> tuple[Tensor, Tensor, Tensor]:
    """Project token representations into query/key/value, no biases."""
    q = matmul(x, store[f"layer{layer}.head{head}.wq"].tensor)
    k = matmul(x, store[f"layer{layer}.head{head}.wk"].tensor)
    v = matmul(x, store[f"layer{layer}.head{head}.wv"].tensor)
    return q, k, v


def raw_scores(q: Tensor, k: Tensor) -> Tensor:
    """Scaled query-key dot products, (n, n)."""
    d = q.shape[-1]
    return scale(matmul(q, transpose(k)), 1.0 / math.sqrt(d))


def biaffine_bias(q: Tensor, k: Tensor, A: Tensor,
                  b: Optional[Tensor] = None) -> Tensor:
    """Bilinear bias ``q A k^T (+ b)`` for every query/key pair at once."""
    out = matmul(matmul(q, A), transpose(k))
    if b is not None:
        out = add(out, b)
    return out


def decomp_bias(q: Tensor, k: Tensor, qvec: Optional[Tensor] = None,
                kvec: Optional[Tensor] = None,
                b: Optional[Tensor] = None) -> Tensor:
    """Decomposed bias: query-conditioned plus key-conditioned plus prior.

    Disabled terms are simply absent and contribute zero.  The result
    broadcasts to (n, m).
    """
    terms: list[Tensor] = []
    if qvec is not None:
        terms.append(matmul(q, qvec))            # (n, 1)
    if kvec is not None:
        terms.append(transpose(matmul(k, kvec)))  # (1, m)
    if b is not None:
        terms.append(b)
    if not terms:
        raise TransformationError("decomposed bias with every term disabled")
    out = terms[0]
    for term in terms[1:]:
        out = add(out, term)
    return out


def type_bias(store: ParameterStore, q: Tensor, k: Tensor, layer: int,
              head: int, dep: DependencyType, tf: Transformation) -> Tensor:
    """The attentive bias for one dependency type, before masking."""
    if dep == DependencyType.NA:
        raise TransformationError("NA bypasses the transformation entirely")
    prefix = bias_param_prefix(layer, head, dep)
    if tf.mode == "biaffine":
        if tf.biaffine_core:
            return biaffine_bias(
                q, k, A=store[f"{prefix}.A"].tensor,
                b=store[f"{prefix}.b"].tensor if tf.prior else None,
            )
        if tf.prior:
            return store[f"{prefix}.b"].tensor
    elif tf.mode == "decomp":
        return decomp_bias(
            q, k,
            qvec=store[f"{prefix}.qvec"].tensor if tf.query_conditioned else None,
            kvec=store[f"{prefix}.kvec"].tensor if tf.key_conditioned else None,
            b=store[f"{prefix}.b"].tensor if tf.prior else None,
        )
    raise TransformationError("mode 'none' produces no bias")


class BiasRecorder:
    """Accumulates per-(layer, head, dependency) mean biases per document."""

    def __init__(self):
        self.records: list[BiasRecord] = []

    def add(self, layer: int, head: int, dep: DependencyType,
            masked_values: np.ndarray, count: int) -> None:
        self.records.append(
            BiasRecord(
                layer=layer,
                head=head,
                dependency=dep,
                mean_bias=float(masked_values.sum() / count),
                count=count,
            )
        )


def structured_scores(store: ParameterStore, q: Tensor, k: Tensor,
                      structure: StructureMatrix, layer: int, head: int,
                      tf: Transformation,
                      key_padding: Optional[np.ndarray] = None,
                      recorder: Optional[BiasRecorder] = None) -> Tensor:
    """Attention scores with structural bias: ``(q k^T + bias) / sqrt(d)``.

    Cells whose dependency is NA receive no bias; padded key positions are
    filled with a large negative constant before the softmax.
    """
    n = q.shape[0]
    if structure.n != n:
        raise ValueError(
            f"structure matrix is {structure.n}x{structure.n} but the "
            f"document has {n} tokens"
        )
    scores = matmul(q, transpose(k))
    total_bias: Optional[Tensor] = None
    if tf.active:
        for dep in STRUCTURED_TYPES:
            mask = structure.codes == dep.value
            count = int(mask.sum())
            if count == 0:
                continue
            term = type_bias(store, q, k, layer, head, dep, tf)
            masked = mul(constant(mask.astype(np.float64)), term)
            if recorder is not None:
                recorder.add(layer, head, dep, masked.values, count)
            total_bias = masked if total_bias is None else add(total_bias, masked)
    if total_bias is not None:
        scores = add(scores, total_bias)
    scores = scale(scores, 1.0 / math.sqrt(q.shape[-1]))
    if key_padding is not None and key_padding.any():
        grid = np.broadcast_to(np.asarray(key_padding, bool)[None, :], (n, n))
        scores = masked_fill(scores, grid, NEG_FILL)
    return scores


def attend(scores: Tensor, v: Tensor) -> Tensor:
    """Softmax over keys, then aggregate values."""
    return matmul(softmax_rows(scores), v)


def encoder_forward(store: ParameterStore, x: Tensor,
                    structure: StructureMatrix, cfg: EncoderConfig,
                    key_padding: Optional[np.ndarray] = None,
                    recorder: Optional[BiasRecorder] = None) -> Tensor:
    """Run the full block stack.

    Layers outside ``structured_layers`` attend without bias.  Each block
    is post-norm: ``LN(x + MHA(x))`` then ``LN(x + FFN(x))``.
    """
    none = Transformation.none()
    for l in range(cfg.n_layers):
        tf = cfg.transformation if l in cfg.structured_layers else none
        heads = []
        for h in range(cfg.n_heads):
            q, k, v = project_qkv(store, x, l, h)
            scores = structured_scores(
                store, q, k, structure, l, h, tf,
                key_padding=key_padding, recorder=recorder,
            )
            heads.append(attend(scores, v))
        merged = matmul(concat(heads, axis=1), store[f"layer{l}.wo"].tensor)
        x = layer_norm(add(x, merged), store[f"layer{l}.ln1.gain"].tensor,
                       store[f"layer{l}.ln1.bias"].tensor)
        hidden = relu(add(matmul(x, store[f"layer{l}.ffn.w1"].tensor),
                          store[f"layer{l}.ffn.b1"].tensor))
        ffn = add(matmul(hidden, store[f"layer{l}.ffn.w2"].tensor),
                  store[f"layer{l}.ffn.b2"].tensor)
        x = layer_norm(add(x, ffn), store[f"layer{l}.ln2.gain"].tensor,
                       store[f"layer{l}.ln2.bias"].tensor)
    return x


def aggregate_bias_records(
    records: Sequence[BiasRecord],
) -> dict[tuple[int, DependencyType], tuple[float, int]]:
    """Cell-count weighted mean bias per (layer, dependency), pooled over
    heads and documents."""
    sums: dict[tuple[int, DependencyType], float] = {}
    counts: dict[tuple[int, DependencyType], int] = {}
    for rec in records:
        key = (rec.layer, rec.dependency)
        sums[key] = sums.get(key, 0.0) + rec.mean_bias * rec.count
        counts[key] = counts.get(key, 0) + rec.count
    return {key: (sums[key] / counts[key], counts[key]) for key in sums}


def export_bias_heatmap(records: Sequence[BiasRecord], n_layers: int) -> str:
    """Render the layer-by-dependency mean-bias grid as tab-separated text.

    Every layer emits one row per dependency type including NA, which is
    structurally zero with no samples.
    """
    if not records:
        raise ValueError("no bias records to export")
    grid = aggregate_bias_records(records)
    lines = ["layer\tdependency\tmean_bias\tcount"]
    for l in range(n_layers):
        for dep in DependencyType:
            if dep == DependencyType.NA:
                mean, count = 0.0, 0
            else:
                mean, count = grid.get((l, dep), (0.0, 0))
            lines.append(f"{l}\t{_dep_key(dep)}\t{mean:.10g}\t{count}")
    return "\n".join(lines) + "\n"
