import math

import numpy as np
import pytest

from structrel.autodiff import Parameter, ParameterStore, Tensor, grad_check
from structrel.encoder import (
    BiasRecord,
    BiasRecorder,
    EncoderConfig,
    Transformation,
    TransformationError,
    attend,
    biaffine_bias,
    decomp_bias,
    encoder_forward,
    export_bias_heatmap,
    init_encoder_params,
    project_qkv,
    raw_scores,
    structured_scores,
    type_bias,
)
from structrel.structure import (
    STRUCTURED_TYPES,
    DependencyType,
    StructureMatrix,
    build_structure_matrix,
)

from conftest import random_document

D = DependencyType


def make_store(cfg: EncoderConfig, seed: int = 0) -> ParameterStore:
    store = ParameterStore()
    init_encoder_params(store, np.random.default_rng(seed), cfg)
    return store


def fixture_structure(doc_fixture) -> StructureMatrix:
    return build_structure_matrix(doc_fixture)


def all_na(n: int) -> StructureMatrix:
    return StructureMatrix("na", np.zeros((n, n), dtype=np.int8))


class TestTransformation:
    def test_mode_none_forces_toggles_off(self):
        with pytest.raises(TransformationError):
            Transformation("none", prior=True)

    def test_mode_term_compatibility(self):
        with pytest.raises(TransformationError):
            Transformation("biaffine", query_conditioned=True)
        with pytest.raises(TransformationError):
            Transformation("decomp", biaffine_core=True)
        with pytest.raises(TransformationError):
            Transformation("weird")

    def test_active_flag(self):
        assert not Transformation.none().active
        assert Transformation.biaffine().active
        assert not Transformation("biaffine").active  # no terms enabled


class TestProjections:
    def test_identity_slice_projection(self):
        cfg = EncoderConfig(n_layers=1, n_heads=2, d_model=4)
        store = make_store(cfg)
        eye_slice = np.zeros((4, 2))
        eye_slice[0, 0] = eye_slice[1, 1] = 1.0
        store["layer0.head0.wq"].tensor.values = eye_slice.copy()
        x = Tensor(np.arange(8, dtype=float).reshape(2, 4))
        q, _, _ = project_qkv(store, x, 0, 0)
        assert np.array_equal(q.values, x.values[:, :2])

    def test_zero_input_gives_zero_qkv(self):
        cfg = EncoderConfig(n_layers=1, n_heads=1, d_model=4)
        store = make_store(cfg)
        q, k, v = project_qkv(store, Tensor(np.zeros((3, 4))), 0, 0)
        assert not q.values.any() and not k.values.any() and not v.values.any()

    def test_shapes(self):
        cfg = EncoderConfig(n_layers=1, n_heads=2, d_model=8)
        store = make_store(cfg)
        q, k, v = project_qkv(store, Tensor(np.random.default_rng(0).normal(size=(5, 8))), 0, 1)
        assert q.shape == k.shape == v.shape == (5, 4)

    def test_indivisible_heads_rejected(self):
        with pytest.raises(ValueError, match="divisible"):
            EncoderConfig(n_layers=1, n_heads=3, d_model=8)


class TestRawScores:
    def test_zero_vectors(self):
        e = raw_scores(Tensor(np.zeros((2, 4))), Tensor(np.zeros((2, 4))))
        assert not e.values.any()

    def test_all_ones_d4(self):
        q = Tensor(np.ones((1, 4)))
        assert raw_scores(q, q).values[0, 0] == pytest.approx(2.0)

    def test_matches_double_loop(self):
        rng = np.random.default_rng(3)
        q, k = rng.normal(size=(5, 6)), rng.normal(size=(5, 6))
        e = raw_scores(Tensor(q), Tensor(k)).values
        for i in range(5):
            for j in range(5):
                assert e[i, j] == pytest.approx(
                    float(q[i] @ k[j]) / math.sqrt(6), rel=1e-12
                )


class TestBiasForms:
    def test_biaffine_zero_parameters(self):
        q, k = Tensor([[1.0, 2.0]]), Tensor([[3.0, 4.0]])
        out = biaffine_bias(q, k, Tensor(np.zeros((2, 2))), Tensor(0.0))
        assert out.values[0, 0] == 0.0

    def test_biaffine_identity_reduces_to_dot(self):
        q, k = Tensor([[1.0, 2.0]]), Tensor([[3.0, 4.0]])
        out = biaffine_bias(q, k, Tensor(np.eye(2)), Tensor(0.5))
        assert out.values[0, 0] == pytest.approx(11.5)

    def test_biaffine_matches_triple_loop(self):
        rng = np.random.default_rng(9)
        q, k = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        A, b = rng.normal(size=(3, 3)), rng.normal()
        out = biaffine_bias(Tensor(q), Tensor(k), Tensor(A), Tensor(b)).values
        for i in range(4):
            for j in range(4):
                expect = sum(
                    q[i, a] * A[a, c] * k[j, c]
                    for a in range(3)
                    for c in range(3)
                ) + b
                assert out[i, j] == pytest.approx(expect, rel=1e-12)

    def test_decomp_all_zero(self):
        q, k = Tensor([[1.0, 2.0]]), Tensor([[3.0, 4.0]])
        out = decomp_bias(q, k, Tensor(np.zeros((2, 1))),
                          Tensor(np.zeros((2, 1))), Tensor(0.0))
        assert out.values[0, 0] == 0.0

    def test_decomp_worked_example(self):
        # query side dotted with [1,1], key side with [0,1]:
        # (1 + 2) + 4 + 0 = 7
        q, k = Tensor([[1.0, 2.0]]), Tensor([[3.0, 4.0]])
        out = decomp_bias(q, k, Tensor([[1.0], [1.0]]),
                          Tensor([[0.0], [1.0]]), Tensor(0.0))
        assert out.values[0, 0] == pytest.approx(7.0)

    def test_decomp_prior_only_is_constant(self):
        rng = np.random.default_rng(1)
        q, k = Tensor(rng.normal(size=(3, 2))), Tensor(rng.normal(size=(3, 2)))
        out = decomp_bias(q, k, b=Tensor(0.3))
        assert out.values == pytest.approx(0.3)

    def test_decomp_without_any_term_rejected(self):
        with pytest.raises(TransformationError):
            decomp_bias(Tensor([[1.0]]), Tensor([[1.0]]))

    def test_na_rejected(self):
        cfg = EncoderConfig(n_layers=1, n_heads=1, d_model=4,
                            transformation=Transformation.biaffine(),
                            structured_layers=frozenset({0}))
        store = make_store(cfg)
        q = Tensor(np.zeros((2, 4)))
        with pytest.raises(TransformationError, match="NA"):
            type_bias(store, q, q, 0, 0, D.NA, cfg.transformation)


class TestStructuredScores:
    def _setup(self, mode: Transformation, seed=0, n=6, d=4):
        cfg = EncoderConfig(
            n_layers=1, n_heads=1, d_model=d, transformation=mode,
            structured_layers=frozenset({0}) if mode.active else frozenset(),
        )
        store = make_store(cfg, seed)
        rng = np.random.default_rng(seed + 100)
        q = Tensor(rng.normal(size=(n, d)))
        k = Tensor(rng.normal(size=(n, d)))
        codes = rng.integers(0, 6, size=(n, n)).astype(np.int8)
        codes = np.triu(codes) + np.triu(codes, 1).T  # symmetric
        return store, q, k, StructureMatrix("s", codes)

    def test_mode_none_equals_raw(self):
        store, q, k, S = self._setup(Transformation.none())
        scores = structured_scores(store, q, k, S, 0, 0, Transformation.none())
        assert scores.values.tobytes() == raw_scores(q, k).values.tobytes()

    def test_zero_init_parameters_equal_raw(self):
        store, q, k, S = self._setup(Transformation.biaffine())
        scores = structured_scores(store, q, k, S, 0, 0,
                                   Transformation.biaffine())
        assert scores.values.tobytes() == raw_scores(q, k).values.tobytes()

    def test_all_na_bypasses_trained_parameters(self):
        tf = Transformation.biaffine()
        store, q, k, _ = self._setup(tf)
        rng = np.random.default_rng(77)
        for dep in STRUCTURED_TYPES:
            store[f"layer0.head0.bias.{dep.name.lower()}.A"].tensor.values = (
                rng.normal(size=(4, 4))
            )
            store[f"layer0.head0.bias.{dep.name.lower()}.b"].tensor.values = (
                np.array(rng.normal())
            )
        scores = structured_scores(store, q, k, all_na(6), 0, 0, tf)
        assert scores.values.tobytes() == raw_scores(q, k).values.tobytes()

    def test_bias_lands_only_on_matching_cells(self):
        tf = Transformation.biaffine()
        store, q, k, S = self._setup(tf, seed=5)
        base = structured_scores(store, q, k, S, 0, 0, tf).values
        delta = 0.37
        dep = D.INTRA_RELATE
        store[f"layer0.head0.bias.{dep.name.lower()}.b"].tensor.values += delta
        bumped = structured_scores(store, q, k, S, 0, 0, tf).values
        diff = bumped - base
        mask = S.codes == dep.value
        assert np.allclose(diff[mask], delta / math.sqrt(4))
        assert np.allclose(diff[~mask], 0.0)

    def test_dimension_mismatch_rejected(self):
        store, q, k, _ = self._setup(Transformation.none())
        with pytest.raises(ValueError, match="tokens"):
            structured_scores(store, q, k, all_na(3), 0, 0,
                              Transformation.none())

    def test_padded_keys_are_masked(self):
        store, q, k, S = self._setup(Transformation.none())
        pad = np.array([False] * 4 + [True] * 2)
        scores = structured_scores(store, q, k, S, 0, 0,
                                   Transformation.none(), key_padding=pad)
        attn = attend(scores, Tensor(np.eye(6))).values
        assert np.allclose(attn[:, 4:], 0.0)
        assert np.abs(attn[:4, :4].sum(axis=1) - 1.0).max() < 1e-12


class TestAttend:
    def test_uniform_scores_average_values(self):
        v = Tensor(np.array([[1.0, 3.0], [3.0, 5.0]]))
        z = attend(Tensor(np.zeros((2, 2))), v)
        assert np.allclose(z.values, [[2.0, 4.0], [2.0, 4.0]])

    def test_dominant_score_selects_value(self):
        scores = Tensor(np.array([[0.0, 200.0], [0.0, 0.0]]))
        v = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
        z = attend(scores, v)
        assert z.values[0] == pytest.approx([0.0, 1.0], abs=1e-12)

    def test_matches_double_loop(self):
        rng = np.random.default_rng(8)
        scores, v = rng.normal(size=(4, 4)), rng.normal(size=(4, 3))
        z = attend(Tensor(scores), Tensor(v)).values
        weights = np.exp(scores - scores.max(axis=1, keepdims=True))
        weights /= weights.sum(axis=1, keepdims=True)
        for i in range(4):
            expect = sum(weights[i, j] * v[j] for j in range(4))
            assert np.allclose(z[i], expect)


class TestEncoderForward:
    def test_single_block_hand_trace(self):
        # one layer, one head, bias mode off, FFN forced to zero: the output
        # must equal LN(LN(x + attention(x))) computed with plain numpy
        cfg = EncoderConfig(n_layers=1, n_heads=1, d_model=2)
        store = make_store(cfg, seed=4)
        for name in ("ffn.w1", "ffn.w2", "ffn.b1", "ffn.b2"):
            store[f"layer0.{name}"].tensor.values[...] = 0.0
        x = np.array([[0.5, -1.0], [2.0, 0.25], [-0.75, 1.5]])
        out = encoder_forward(store, Tensor(x), all_na(3), cfg).values

        wq = store["layer0.head0.wq"].values
        wk = store["layer0.head0.wk"].values
        wv = store["layer0.head0.wv"].values
        wo = store["layer0.wo"].values
        scores = (x @ wq) @ (x @ wk).T / math.sqrt(2)
        weights = np.exp(scores - scores.max(axis=1, keepdims=True))
        weights /= weights.sum(axis=1, keepdims=True)
        attn_out = (weights @ (x @ wv)) @ wo

        def ln(m):
            mu = m.mean(axis=-1, keepdims=True)
            var = ((m - mu) ** 2).mean(axis=-1, keepdims=True)
            return (m - mu) / np.sqrt(var + 1e-5)

        expected = ln(ln(x + attn_out))
        assert np.allclose(out, expected, atol=1e-12)

    def test_empty_structured_range_is_bitwise_baseline(self, two_sentence_doc):
        S = fixture_structure(two_sentence_doc)
        rng = np.random.default_rng(6)
        x = rng.normal(size=(S.n, 8))
        cfg_none = EncoderConfig(n_layers=2, n_heads=2, d_model=8)
        cfg_empty = EncoderConfig(
            n_layers=2, n_heads=2, d_model=8,
            transformation=Transformation.biaffine(),
            structured_layers=frozenset(),
        )
        out_none = encoder_forward(make_store(cfg_none, 3), Tensor(x), S,
                                   cfg_none).values
        out_empty = encoder_forward(make_store(cfg_empty, 3), Tensor(x), S,
                                    cfg_empty).values
        assert out_none.tobytes() == out_empty.tobytes()

    def test_baseline_equivalence_three_ways(self, two_sentence_doc):
        # mode none / zero-init biaffine / all-NA structure with trained
        # parameters agree bitwise on random inputs
        S = fixture_structure(two_sentence_doc)
        cfg_none = EncoderConfig(n_layers=2, n_heads=2, d_model=8)
        cfg_bi = EncoderConfig(
            n_layers=2, n_heads=2, d_model=8,
            transformation=Transformation.biaffine(),
            structured_layers=frozenset({0, 1}),
        )
        store_none = make_store(cfg_none, 12)
        store_zero = make_store(cfg_bi, 12)
        store_trained = make_store(cfg_bi, 12)
        rng = np.random.default_rng(0)
        for p in store_trained:
            if ".bias." in p.name:
                p.tensor.values = rng.normal(size=p.values.shape) * 0.3
        for trial in range(20):
            x = np.random.default_rng(trial).normal(size=(S.n, 8))
            a = encoder_forward(store_none, Tensor(x), S, cfg_none).values
            b = encoder_forward(store_zero, Tensor(x), S, cfg_bi).values
            c = encoder_forward(store_trained, Tensor(x), all_na(S.n),
                                cfg_bi).values
            assert a.tobytes() == b.tobytes() == c.tobytes()

    def test_only_structured_layers_emit_records(self, two_sentence_doc):
        S = fixture_structure(two_sentence_doc)
        cfg = EncoderConfig(
            n_layers=3, n_heads=2, d_model=8,
            transformation=Transformation.biaffine(),
            structured_layers=frozenset({2}),
        )
        store = make_store(cfg, 2)
        recorder = BiasRecorder()
        encoder_forward(store, Tensor(np.zeros((S.n, 8))), S, cfg,
                        recorder=recorder)
        assert recorder.records
        assert {rec.layer for rec in recorder.records} == {2}

    def test_permutation_consistency(self, two_sentence_doc):
        S = fixture_structure(two_sentence_doc)
        cfg = EncoderConfig(
            n_layers=2, n_heads=2, d_model=8,
            transformation=Transformation.biaffine(),
            structured_layers=frozenset({0, 1}),
        )
        store = make_store(cfg, 21)
        rng = np.random.default_rng(31)
        for p in store:
            if ".bias." in p.name:
                p.tensor.values = rng.normal(size=p.values.shape) * 0.2
        x = rng.normal(size=(S.n, 8))
        out = encoder_forward(store, Tensor(x), S, cfg).values
        perm = rng.permutation(S.n)
        S_perm = StructureMatrix("p", S.codes[np.ix_(perm, perm)])
        out_perm = encoder_forward(store, Tensor(x[perm]), S_perm, cfg).values
        assert np.allclose(out_perm, out[perm], rtol=1e-10, atol=1e-12)

    def test_padding_equivalence(self, two_sentence_doc):
        # appending padded tokens (masked keys, NA structure) must not
        # change the real positions
        S = fixture_structure(two_sentence_doc)
        cfg = EncoderConfig(n_layers=2, n_heads=2, d_model=8)
        store = make_store(cfg, 9)
        rng = np.random.default_rng(14)
        x = rng.normal(size=(S.n, 8))
        out = encoder_forward(store, Tensor(x), S, cfg).values

        n_pad = 3
        padded_x = np.vstack([x, np.zeros((n_pad, 8))])
        padded_codes = np.zeros((S.n + n_pad, S.n + n_pad), dtype=np.int8)
        padded_codes[:S.n, :S.n] = S.codes
        pad = np.array([False] * S.n + [True] * n_pad)
        out_padded = encoder_forward(
            store, Tensor(padded_x), StructureMatrix("pad", padded_codes),
            cfg, key_padding=pad,
        ).values
        assert np.allclose(out_padded[:S.n], out, rtol=1e-12, atol=1e-14)

    def test_gradients_reach_transformation_parameters(self, two_sentence_doc):
        from structrel.autodiff import constant, mul, sum_all

        S = fixture_structure(two_sentence_doc)
        readout = np.random.default_rng(55).normal(size=(S.n, 8))
        for tf in (Transformation.biaffine(), Transformation.decomp()):
            cfg = EncoderConfig(
                n_layers=2, n_heads=2, d_model=8, transformation=tf,
                structured_layers=frozenset({0, 1}),
            )
            store = make_store(cfg, 33)
            rng = np.random.default_rng(44)
            for p in store:
                if ".bias." in p.name:
                    p.tensor.values = rng.normal(size=p.values.shape) * 0.1
            x = rng.normal(size=(S.n, 8))
            params = [p for p in store if ".bias." in p.name]

            def build():
                out = encoder_forward(store, Tensor(x), S, cfg)
                return sum_all(mul(out, constant(readout)))

            err = grad_check(build, params, max_elements_per_param=6)
            assert err < 1e-4, f"{tf.mode}: {err}"


class TestBiasRecordsAndHeatmap:
    def test_record_invariants(self):
        with pytest.raises(ValueError):
            BiasRecord(0, 0, D.NA, 0.0, 1)
        with pytest.raises(ValueError):
            BiasRecord(0, 0, D.INTRA_COREF, 0.0, 0)

    def test_single_record_grid_cell(self):
        text = export_bias_heatmap(
            [BiasRecord(0, 0, D.INTRA_COREF, 1.0, 4)], n_layers=1
        )
        rows = [line.split("\t") for line in text.strip().splitlines()[1:]]
        assert len(rows) == 6  # one layer, six dependency rows
        cell = next(r for r in rows if r[1] == "intra_coref")
        assert float(cell[2]) == 1.0 and int(cell[3]) == 4

    def test_two_heads_average(self):
        records = [
            BiasRecord(3, 0, D.INTER_COREF, 1.0, 10),
            BiasRecord(3, 1, D.INTER_COREF, 3.0, 10),
        ]
        text = export_bias_heatmap(records, n_layers=4)
        rows = [line.split("\t") for line in text.strip().splitlines()[1:]]
        cell = next(r for r in rows if r[0] == "3" and r[1] == "inter_coref")
        assert float(cell[2]) == 2.0 and int(cell[3]) == 20

    def test_zero_init_model_records_all_zero(self, two_sentence_doc):
        S = fixture_structure(two_sentence_doc)
        cfg = EncoderConfig(
            n_layers=2, n_heads=2, d_model=8,
            transformation=Transformation.biaffine(),
            structured_layers=frozenset({0, 1}),
        )
        store = make_store(cfg, 1)
        recorder = BiasRecorder()
        encoder_forward(store, Tensor(np.ones((S.n, 8))), S, cfg,
                        recorder=recorder)
        assert recorder.records
        assert all(rec.mean_bias == 0.0 for rec in recorder.records)

    def test_empty_records_rejected(self):
        with pytest.raises(ValueError, match="no bias records"):
            export_bias_heatmap([], n_layers=2)

    def test_grid_is_layers_by_six(self):
        records = [BiasRecord(0, 0, D.INTRA_NE, 0.5, 2)]
        text = export_bias_heatmap(records, n_layers=3)
        rows = text.strip().splitlines()[1:]
        assert len(rows) == 3 * 6
