"""Training, evaluation, threshold tuning, and the ablation suites.

Runs are deterministic given a config and seed: batch order, parameter
initialization, and optimizer state all derive from the seed, so repeating
a run reproduces checkpoints and reports byte for byte.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .autodiff import load_checkpoint, save_checkpoint
from .batching import encode_document, make_batches
from .config import ModelConfig, load_config, save_config
from .corpus import (
    Document,
    Vocabulary,
    build_vocab,
    entity_type_labels,
)
from .encoder import BiasRecorder, export_bias_heatmap
from .metrics import (
    EvalReport,
    build_train_fact_index,
    evaluate_facts,
    f1_score,
    make_in_train_checker,
)
from .model import PredictedFact, RelationExtractor
from .structure import STRUCTURED_TYPES, DependencyType


class DivergenceError(RuntimeError):
    pass


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    dev_f1: Optional[float] = None
    dev_precision: Optional[float] = None
    dev_recall: Optional[float] = None


@dataclass
class TrainResult:
    model: RelationExtractor
    best_arrays: dict[str, np.ndarray]
    best_epoch: int
    best_dev_f1: float
    log: list[EpochLog] = field(default_factory=list)

    def restore_best(self) -> None:
        params = {
            name: arr for name, arr in self.best_arrays.items()
            if not name.startswith("adam.")
        }
        self.model.load_parameter_arrays(params)


def resolve_schema(config: ModelConfig,
                   train_docs: Sequence[Document]) -> list[str]:
    """Schema file when configured, otherwise the sorted relation names
    observed in the training corpus."""
    if config.schema_path:
        with open(config.schema_path, "r", encoding="utf-8") as fh:
            schema = [line.strip() for line in fh if line.strip()]
        if not schema:
            raise ValueError(f"{config.schema_path}: empty relation schema")
        return schema
    names = sorted({f.r for doc in train_docs for f in doc.facts})
    if not names:
        raise ValueError(
            "training corpus has no relation labels and no schema file "
            "was configured"
        )
    return names


def build_model(config: ModelConfig, train_docs: Sequence[Document],
                schema: Optional[Sequence[str]] = None) -> RelationExtractor:
    vocab = build_vocab(train_docs, config.vocab_min_count)
    etypes = entity_type_labels(train_docs)
    if schema is None:
        schema = resolve_schema(config, train_docs)
    return RelationExtractor(config, vocab, etypes, list(schema))


def _forward_facts(model: RelationExtractor, docs: Sequence[Document],
                   threshold: float,
                   recorder: Optional[BiasRecorder] = None,
                   ) -> tuple[list[PredictedFact], list]:
    """Frozen-parameter predictions over a document list."""
    excluded = model.cfg.excluded_dependency_set()
    predictions: list[PredictedFact] = []
    encodings = []
    for doc in docs:
        enc = encode_document(
            doc, model.vocab, model.etype_to_index, model.cfg.coref_cap,
            excluded,
        )
        result = model.forward(enc, recorder=recorder)
        predictions.extend(model.predict(result, threshold))
        encodings.append((enc, result))
    return predictions, encodings


def evaluate(model: RelationExtractor, docs: Sequence[Document],
             train_docs: Sequence[Document] = (),
             threshold: Optional[float] = None,
             ) -> tuple[EvalReport, list[PredictedFact]]:
    """Score thresholded predictions against the documents' gold facts.

    ``train_docs`` feed the ignore-train variant; an empty list makes the
    ignore metrics equal the plain ones.
    """
    threshold = model.cfg.threshold if threshold is None else threshold
    predictions, _ = _forward_facts(model, docs, threshold)
    predicted = {(p.doc_id, p.h, p.t, p.r) for p in predictions}
    gold = {(d.doc_id, f.h, f.t, f.r) for d in docs for f in d.facts}
    if train_docs:
        checker = make_in_train_checker(build_train_fact_index(train_docs), docs)
    else:
        checker = lambda fact: False
    return evaluate_facts(predicted, gold, checker), predictions


def tune_threshold(model: RelationExtractor,
                   dev_docs: Sequence[Document]) -> float:
    """Sweep the observed probabilities; return the F1-maximizing
    threshold, preferring the larger one on ties."""
    excluded = model.cfg.excluded_dependency_set()
    probs: list[float] = []
    flags: list[bool] = []
    for doc in dev_docs:
        enc = encode_document(
            doc, model.vocab, model.etype_to_index, model.cfg.coref_cap,
            excluded,
        )
        result = model.forward(enc)
        if result.probabilities is None:
            continue
        gold = {(f.h, f.t, f.r) for f in doc.facts}
        values = result.probabilities.values
        for i, (s, o) in enumerate(result.pairs):
            for j, r in enumerate(model.schema):
                probs.append(float(values[i, j]))
                flags.append((s, o, r) in gold)
    n_gold = sum(flags)
    if not probs or n_gold == 0:
        return model.cfg.threshold
    order = np.argsort(probs)[::-1]
    sorted_probs = np.asarray(probs)[order]
    sorted_flags = np.asarray(flags)[order]
    cum_correct = np.cumsum(sorted_flags)
    best_theta, best_f1 = model.cfg.threshold, -1.0
    for i in range(len(sorted_probs)):
        # predicting everything with probability >= sorted_probs[i]
        if i + 1 < len(sorted_probs) and sorted_probs[i + 1] == sorted_probs[i]:
            continue
        theta = float(sorted_probs[i])
        if not 0.0 < theta < 1.0:
            continue
        precision = cum_correct[i] / (i + 1)
        recall = cum_correct[i] / n_gold
        f1 = f1_score(precision, recall)
        if f1 > best_f1 or (f1 == best_f1 and theta > best_theta):
            best_f1, best_theta = f1, theta
    return best_theta


def train(config: ModelConfig, train_docs: Sequence[Document],
          dev_docs: Sequence[Document] = (),
          schema: Optional[Sequence[str]] = None,
          eval_every: int = 1,
          stop_train_f1: Optional[float] = None,
          quiet: bool = True) -> TrainResult:
    """Epochs of batched forward/loss/backward/update with best-checkpoint
    tracking on dev F1.

    Raises :class:`DivergenceError` the moment a batch loss goes
    non-finite.  ``stop_train_f1`` stops early once the training-set F1
    reaches the target (checked at the eval cadence).
    """
    model = build_model(config, train_docs, schema)
    optimizer = model.make_optimizer()
    excluded = config.excluded_dependency_set()
    best_arrays = {**model.parameter_arrays(), **optimizer.state_arrays()}
    best_dev, best_epoch = -1.0, -1
    log: list[EpochLog] = []
    step = 0
    for epoch in range(config.epochs):
        batches = make_batches(
            train_docs, model.vocab, model.etype_to_index, config.max_len,
            config.batch_size, seed=config.seed + epoch,
            coref_cap=config.coref_cap, excluded=excluded,
        )
        epoch_loss = 0.0
        n_docs = 0
        for batch in batches:
            optimizer.zero_grad()
            losses = []
            for enc in batch.encodings:
                result = model.forward(enc)
                losses.append(model.compute_loss(result, enc))
            total = losses[0]
            for extra in losses[1:]:
                total = total + extra
            mean_loss = total * (1.0 / len(losses))
            value = float(mean_loss.values)
            if not np.isfinite(value):
                raise DivergenceError(
                    f"non-finite loss at step {step} (epoch {epoch})"
                )
            mean_loss.backward()
            optimizer.step()
            step += 1
            epoch_loss += value * len(losses)
            n_docs += len(losses)
        entry = EpochLog(epoch=epoch, train_loss=epoch_loss / max(n_docs, 1))
        if (epoch + 1) % eval_every == 0 or epoch == config.epochs - 1:
            if dev_docs:
                report, _ = evaluate(model, dev_docs, train_docs=train_docs)
                entry.dev_f1 = report.f1
                entry.dev_precision = report.precision
                entry.dev_recall = report.recall
                if report.f1 > best_dev:
                    best_dev = report.f1
                    best_epoch = epoch
                    best_arrays = {
                        **model.parameter_arrays(),
                        **optimizer.state_arrays(),
                    }
            if stop_train_f1 is not None:
                train_report, _ = evaluate(model, train_docs)
                if train_report.f1 >= stop_train_f1:
                    log.append(entry)
                    if not dev_docs:
                        best_arrays = {
                            **model.parameter_arrays(),
                            **optimizer.state_arrays(),
                        }
                        best_epoch = epoch
                    break
        log.append(entry)
        if not quiet:
            dev_text = "" if entry.dev_f1 is None else f"  dev F1 {entry.dev_f1:.4f}"
            print(f"epoch {epoch}  loss {entry.train_loss:.6f}{dev_text}")
    if not dev_docs and best_epoch < 0:
        best_arrays = {**model.parameter_arrays(), **optimizer.state_arrays()}
        best_epoch = config.epochs - 1
        best_dev = 0.0
    return TrainResult(
        model=model,
        best_arrays=best_arrays,
        best_epoch=best_epoch,
        best_dev_f1=best_dev,
        log=log,
    )


# ---- ablation suites -----------------------------------------------------


def _dep_name(dep: DependencyType) -> str:
    return dep.name.lower()


def _run_row(config: ModelConfig, train_docs, dev_docs,
             schema: Optional[Sequence[str]]) -> EvalReport:
    result = train(config, train_docs, dev_docs, schema=schema)
    result.restore_best()
    report, _ = evaluate(result.model, dev_docs, train_docs=train_docs)
    return report


def ablate_dependencies(config: ModelConfig, train_docs, dev_docs,
                        schema: Optional[Sequence[str]] = None,
                        ) -> list[tuple[str, EvalReport]]:
    """Retrain with each dependency type excluded, plus the all-excluded
    run that degenerates to the unstructured baseline."""
    rows = [("full", config)]
    for dep in STRUCTURED_TYPES:
        rows.append(
            (f"-{_dep_name(dep)}", config.replace(excluded_deps=_dep_name(dep)))
        )
    rows.append(
        ("-all",
         config.replace(
             excluded_deps=",".join(_dep_name(d) for d in STRUCTURED_TYPES)))
    )
    return [(label, _run_row(cfg, train_docs, dev_docs, schema))
            for label, cfg in rows]


TERM_ROWS = (
    ("baseline", dict(mode="none", bias_core=False, bias_query=False,
                      bias_key=False, bias_prior=False)),
    ("prior", dict(mode="decomp", bias_core=False, bias_query=False,
                   bias_key=False, bias_prior=True)),
    ("key_conditioned", dict(mode="decomp", bias_core=False, bias_query=False,
                             bias_key=True, bias_prior=False)),
    ("query_conditioned", dict(mode="decomp", bias_core=False, bias_query=True,
                               bias_key=False, bias_prior=False)),
    ("decomp", dict(mode="decomp", bias_core=False, bias_query=True,
                    bias_key=True, bias_prior=True)),
    ("biaffine_core", dict(mode="biaffine", bias_core=True, bias_query=False,
                           bias_key=False, bias_prior=False)),
    ("biaffine", dict(mode="biaffine", bias_core=True, bias_query=False,
                      bias_key=False, bias_prior=True)),
)


def ablate_bias_terms(config: ModelConfig, train_docs, dev_docs,
                      schema: Optional[Sequence[str]] = None,
                      ) -> list[tuple[str, EvalReport]]:
    """One run per bias-term configuration, from the unbiased baseline to
    the full biaffine and decomposed forms."""
    return [
        (label, _run_row(config.replace(**changes), train_docs, dev_docs,
                         schema))
        for label, changes in TERM_ROWS
    ]


def ablate_layers(config: ModelConfig, train_docs, dev_docs,
                  ks: Sequence[int],
                  schema: Optional[Sequence[str]] = None,
                  ) -> list[tuple[int, float]]:
    """F1 when only the top k blocks receive structural bias."""
    curve = []
    for k in ks:
        if not 0 <= k <= config.layers:
            raise ValueError(f"top-{k} is outside the {config.layers}-layer stack")
        cfg = config.replace(structured_layers=f"top:{k}")
        report = _run_row(cfg, train_docs, dev_docs, schema)
        curve.append((k, report.f1))
    return curve


def render_ablation_table(rows: list[tuple[str, EvalReport]]) -> str:
    lines = ["configuration\tign_f1\tf1\tprecision\trecall"]
    for label, report in rows:
        lines.append(
            f"{label}\t{report.ign_f1:.6f}\t{report.f1:.6f}\t"
            f"{report.precision:.6f}\t{report.recall:.6f}"
        )
    return "\n".join(lines) + "\n"


def render_layer_curve(curve: list[tuple[int, float]]) -> str:
    lines = ["structured_top_k\tf1"]
    for k, f1 in curve:
        lines.append(f"{k}\t{f1:.6f}")
    return "\n".join(lines) + "\n"


# ---- run directories -----------------------------------------------------

CONFIG_FILE = "config.txt"
VOCAB_FILE = "vocab.txt"
ETYPES_FILE = "etypes.txt"
SCHEMA_FILE = "schema.txt"
CHECKPOINT_FILE = "checkpoint.bin"
LOG_FILE = "train_log.tsv"
REPORT_FILE = "dev_report.txt"
PREDICTIONS_FILE = "predictions.tsv"
HEATMAP_FILE = "bias_heatmap.tsv"


def save_run(run_dir, result: TrainResult) -> None:
    """Persist everything required to rebuild and rerun the model."""
    os.makedirs(run_dir, exist_ok=True)
    model = result.model
    save_config(model.cfg, os.path.join(run_dir, CONFIG_FILE))
    index_to_word = sorted(
        model.vocab.word_to_index, key=model.vocab.word_to_index.get
    )
    _write_lines(os.path.join(run_dir, VOCAB_FILE), index_to_word)
    _write_lines(os.path.join(run_dir, ETYPES_FILE), model.etype_labels)
    _write_lines(os.path.join(run_dir, SCHEMA_FILE), model.schema)
    save_checkpoint(os.path.join(run_dir, CHECKPOINT_FILE), result.best_arrays)
    lines = ["epoch\ttrain_loss\tdev_precision\tdev_recall\tdev_f1"]
    for entry in result.log:
        dev = (
            f"{entry.dev_precision:.6f}\t{entry.dev_recall:.6f}\t"
            f"{entry.dev_f1:.6f}"
            if entry.dev_f1 is not None
            else "-\t-\t-"
        )
        lines.append(f"{entry.epoch}\t{entry.train_loss:.6f}\t{dev}")
    with open(os.path.join(run_dir, LOG_FILE), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_run(run_dir) -> RelationExtractor:
    """Rebuild the model from a run directory and load its checkpoint."""
    config = load_config(os.path.join(run_dir, CONFIG_FILE))
    words = _read_lines(os.path.join(run_dir, VOCAB_FILE))
    vocab = Vocabulary({w: i for i, w in enumerate(words)})
    etypes = _read_lines(os.path.join(run_dir, ETYPES_FILE))
    schema = _read_lines(os.path.join(run_dir, SCHEMA_FILE))
    model = RelationExtractor(config, vocab, etypes, schema)
    arrays = load_checkpoint(os.path.join(run_dir, CHECKPOINT_FILE))
    params = {k: v for k, v in arrays.items() if not k.startswith("adam.")}
    model.load_parameter_arrays(params)
    return model


def write_predictions(path, predictions: Sequence[PredictedFact]) -> None:
    lines = ["doc_id\th\tt\tr\tprobability"]
    for p in predictions:
        lines.append(f"{p.doc_id}\t{p.h}\t{p.t}\t{p.r}\t{p.probability:.6f}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def collect_bias_heatmap(model: RelationExtractor,
                         docs: Sequence[Document]) -> str:
    """Run the encoder over a corpus with bias recording on and render the
    layer-by-dependency grid."""
    recorder = BiasRecorder()
    _forward_facts(model, docs, threshold=model.cfg.threshold,
                   recorder=recorder)
    return export_bias_heatmap(recorder.records, model.cfg.layers)


def _write_lines(path, lines) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for line in lines:
            fh.write(f"{line}\n")


def _read_lines(path) -> list[str]:
    with open(path, "r", encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh]
