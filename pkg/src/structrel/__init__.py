"""Structured self-attention relation extraction at desk scale.

Builds six-way token-pair dependency matrices over documents, injects
them as learned attentive biases inside every self-attention layer, and
trains and evaluates a document-level relation extractor, including the
ablation and bias-visualization machinery.
"""

__version__ = "0.1.0"

from .autodiff import (
    Adam,
    Parameter,
    ParameterStore,
    Tensor,
    grad_check,
    load_checkpoint,
    save_checkpoint,
)
from .batching import Batch, EncodedDocument, encode_document, make_batches
from .config import ModelConfig, load_config, save_config
from .corpus import (
    CorpusError,
    CorpusStats,
    Document,
    Entity,
    Mention,
    RelationFact,
    Vocabulary,
    build_vocab,
    corpus_stats,
    entity_type_labels,
    parse_corpus,
    write_corpus,
)
from .encoder import (
    BiasRecord,
    BiasRecorder,
    EncoderConfig,
    Transformation,
    encoder_forward,
    export_bias_heatmap,
)
from .harness import (
    DivergenceError,
    TrainResult,
    ablate_bias_terms,
    ablate_dependencies,
    ablate_layers,
    evaluate,
    load_run,
    save_run,
    train,
    tune_threshold,
)
from .metrics import EvalReport, evaluate_facts, f1_score
from .model import (
    PairScore,
    PredictedFact,
    RelationExtractor,
    distance_bucket,
)
from .structure import (
    DependencyType,
    StructureMatrix,
    TokenAnnotation,
    apply_ablation,
    build_structure_matrix,
    classify_dependency,
    dependency_histogram,
    read_grid,
    write_grid,
)
from .synth import SYNTH_SCHEMA, SynthSpec, default_relation_rule, generate_synthetic
