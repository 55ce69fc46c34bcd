"""Tests for the graph-conditioned encoder-decoder network."""

import logging

import numpy as np
import pytest

from kgreport.model import (
    CGTModel,
    ModelConfig,
    TokenSequence,
    build_visible_matrix,
    desk_config,
    graph_token_sequence,
    init_params,
    parameter_count,
    parameter_shapes,
    position_encoding,
    position_encoding_matrix,
)
from kgreport.tensor import NonFiniteError, ShapeError, Tensor
from kgreport.vocab import EOS, PAD, SOS


def tiny_config(**overrides):
    base = dict(vocab_size=20, d_model=8, heads=2, encoder_layers=1,
                decoder_layers=1, n_slots=4, group_size=2, max_report_len=10,
                feature_rows=4, feature_dim=6, ffn_dim=16)
    base.update(overrides)
    return ModelConfig(**base)


def layer_norm_ref(x, gain, bias, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return gain * (x - mu) / np.sqrt(var + eps) + bias


def dense_encoder_ref(model, x):
    """Standard unmasked transformer encoder, written head by head in plain numpy."""
    cfg = model.config
    weights = {k: t.data for k, t in model.params.items()}
    dh = cfg.d_model // cfg.heads
    y = x.copy()
    for l in range(cfg.encoder_layers):
        q = y @ weights[f"enc{l}.attn.wq"]
        k = y @ weights[f"enc{l}.attn.wk"]
        v = y @ weights[f"enc{l}.attn.wv"]
        ctx = np.zeros_like(y)
        for h in range(cfg.heads):
            cols = slice(h * dh, (h + 1) * dh)
            s = q[:, cols] @ k[:, cols].T / np.sqrt(dh)
            e = np.exp(s - s.max(axis=1, keepdims=True))
            ctx[:, cols] = (e / e.sum(axis=1, keepdims=True)) @ v[:, cols]
        y = layer_norm_ref(ctx @ weights[f"enc{l}.attn.wo"] + y,
                           weights[f"enc{l}.attn_norm.gain"],
                           weights[f"enc{l}.attn_norm.bias"])
        f = np.maximum(y @ weights[f"enc{l}.ffn.w1"] + weights[f"enc{l}.ffn.b1"], 0.0)
        f = f @ weights[f"enc{l}.ffn.w2"] + weights[f"enc{l}.ffn.b2"]
        y = layer_norm_ref(f + y,
                           weights[f"enc{l}.ffn_norm.gain"],
                           weights[f"enc{l}.ffn_norm.bias"])
    return y


class TestModelConfig:
    def test_full_scale_defaults(self):
        """The default preset is the 512-wide 8-head 6+6-layer network."""
        cfg = ModelConfig(vocab_size=100)
        assert (cfg.d_model, cfg.heads) == (512, 8)
        assert (cfg.encoder_layers, cfg.decoder_layers) == (6, 6)
        assert (cfg.max_t, cfg.group_size, cfg.n_slots) == (90, 6, 84)
        assert cfg.pe_base == 1000.0
        assert cfg.ffn_dim == 2048

    def test_desk_preset_is_small(self):
        """The desk preset shrinks width and depth but keeps the same layout rules."""
        cfg = desk_config(30)
        assert cfg.d_model == 64 and cfg.encoder_layers == 2
        assert cfg.n_slots == 12 and cfg.group_size == 6

    def test_heads_must_divide_width(self):
        """d_model not divisible by heads is a config error."""
        with pytest.raises(ValueError, match="divisible"):
            ModelConfig(vocab_size=20, d_model=10, heads=4)

    def test_slots_must_fit_sequence_cap(self):
        """One visual token plus all slots must fit within max_t."""
        with pytest.raises(ValueError, match="max_t"):
            ModelConfig(vocab_size=20, n_slots=90, max_t=90)

    def test_unknown_norm_mode_rejected(self):
        """Only layernorm and batchnorm are valid norm modes."""
        with pytest.raises(ValueError, match="norm"):
            tiny_config(norm="rmsnorm")

    def test_group_count_rounds_up(self):
        """A partial trailing group still gets its own segment id."""
        assert tiny_config(n_slots=7, group_size=3).n_groups == 3


class TestPositionEncoding:
    def test_position_zero(self):
        """Position 0 gives 0 on even dims and 1 on odd dims."""
        vals = [position_encoding(0, i, 8) for i in range(8)]
        np.testing.assert_allclose(vals, [0, 1] * 4)

    def test_position_one_dim_zero(self):
        """pos=1, dim=0 is sin(1) regardless of width."""
        np.testing.assert_allclose(position_encoding(1, 0, 64), 0.841471, atol=5e-7)

    def test_values_bounded(self):
        """Every table entry lies in [-1, 1]."""
        pe = position_encoding_matrix(50, 16)
        assert np.all(pe >= -1.0) and np.all(pe <= 1.0)

    def test_matrix_matches_scalar(self):
        """The vectorized table agrees with the scalar definition cell by cell."""
        pe = position_encoding_matrix(7, 6, base=1000.0)
        for pos in range(7):
            for dim in range(6):
                np.testing.assert_allclose(pe[pos, dim],
                                           position_encoding(pos, dim, 6), rtol=1e-12)

    def test_base_is_configurable(self):
        """Changing the base changes the wavelength."""
        a = position_encoding_matrix(4, 8, base=1000.0)
        b = position_encoding_matrix(4, 8, base=10000.0)
        assert not np.allclose(a, b)

    def test_dim_out_of_range(self):
        """A dimension index at or past d is rejected."""
        with pytest.raises(ValueError):
            position_encoding(1, 8, 8)


class TestTokenSequence:
    def test_graph_layout_groups_of_six(self):
        """Twelve slots behind the visual token form groups 1..2 of six."""
        cfg = desk_config(30)
        seq = graph_token_sequence(np.full(12, 5), cfg)
        np.testing.assert_array_equal(seq.group_of, [0] + [1] * 6 + [2] * 6)
        assert seq.tokens[0] == PAD and len(seq) == 13
        assert seq.pad_mask.all()

    def test_length_cap_enforced(self):
        """A sequence longer than the cap is rejected."""
        with pytest.raises(ValueError, match="exceeds maximum"):
            TokenSequence(np.zeros(91, dtype=int), np.zeros(91, dtype=int),
                          np.ones(91, dtype=bool))

    def test_mismatched_lengths_rejected(self):
        """tokens, group_of and pad_mask must be the same length."""
        with pytest.raises(ValueError, match="equal length"):
            TokenSequence([0, 5], [0], [True, True])

    def test_position_zero_is_group_zero(self):
        """The first position must carry the visual group id 0."""
        with pytest.raises(ValueError, match="group 0"):
            TokenSequence([0, 5], [1, 1], [True, True])


class TestVisibleMatrix:
    def test_hand_case_two_groups(self):
        """Groups [0,1,1,2,2] produce the block pattern with a universal row 0."""
        seq = TokenSequence([0, 5, 6, 7, 8], [0, 1, 1, 2, 2], [True] * 5)
        want = np.array([
            [1, 1, 1, 1, 1],
            [1, 1, 1, 0, 0],
            [1, 1, 1, 0, 0],
            [1, 0, 0, 1, 1],
            [1, 0, 0, 1, 1],
        ], dtype=bool)
        np.testing.assert_array_equal(build_visible_matrix(seq), want)

    def test_pad_isolated_except_diagonal(self):
        """A padded slot sees and is seen by nothing but itself."""
        seq = TokenSequence([0, 5, 6, 7, PAD], [0, 1, 1, 2, 2], [1, 1, 1, 1, 0])
        vis = build_visible_matrix(seq)
        assert vis[4, 4]
        np.testing.assert_array_equal(vis[4, :4], [False] * 4)
        np.testing.assert_array_equal(vis[:4, 4], [False] * 4)

    def test_symmetric_with_true_diagonal(self):
        """Any group/pad layout yields a symmetric matrix with a true diagonal."""
        rng = np.random.default_rng(7)
        for _ in range(25):
            n = int(rng.integers(2, 12))
            groups = np.concatenate([[0], rng.integers(1, 4, size=n - 1)])
            pads = np.concatenate([[True], rng.random(n - 1) > 0.3])
            vis = build_visible_matrix(TokenSequence(np.zeros(n, int), groups, pads))
            np.testing.assert_array_equal(vis, vis.T)
            assert vis.diagonal().all()

    def test_cross_group_invisible(self):
        """Tokens of different groups cannot attend to each other."""
        seq = graph_token_sequence(np.full(12, 5), desk_config(30))
        vis = build_visible_matrix(seq)
        assert not vis[1, 7] and not vis[7, 1]
        assert vis[1, 2] and vis[7, 8]


class TestInitParams:
    def test_registry_is_complete_and_unique(self):
        """Every declared parameter appears exactly once with its declared shape."""
        cfg = tiny_config()
        shapes = parameter_shapes(cfg)
        params = init_params(cfg, seed=0)
        assert len(params) == len(shapes)
        for name, shape, _ in shapes:
            assert params[name].shape == shape
        assert parameter_count(params) == sum(int(np.prod(s)) for _, s, _ in shapes)

    def test_biases_zero_gains_one(self):
        """Additive parameters start at zero and norm gains at one."""
        params = init_params(tiny_config(), seed=3)
        assert np.all(params["out.bias"].data == 0.0)
        assert np.all(params["enc0.attn_norm.gain"].data == 1.0)
        assert np.all(params["restore.time.bias"].data == 0.0)

    def test_seed_pins_every_value(self):
        """The same seed rebuilds bitwise-identical parameters."""
        a = init_params(tiny_config(), seed=11)
        b = init_params(tiny_config(), seed=11)
        for name in a:
            np.testing.assert_array_equal(a[name].data, b[name].data)

    def test_different_seeds_differ(self):
        """Two seeds give different weight draws."""
        a = init_params(tiny_config(), seed=1)
        b = init_params(tiny_config(), seed=2)
        assert not np.array_equal(a["token_table"].data, b["token_table"].data)

    def test_untied_output_adds_projection(self):
        """Untying the output head registers a separate projection matrix."""
        names = {n for n, _, _ in parameter_shapes(tiny_config(tied_output=False))}
        assert "out.weight" in names
        assert "out.weight" not in {n for n, _, _ in parameter_shapes(tiny_config())}


class TestRestoreSubgraph:
    def test_zero_features_give_output_bias(self):
        """All-zero features reach the logit bias unchanged through the head."""
        model = CGTModel(tiny_config(), seed=0)
        rng = np.random.default_rng(5)
        model.params["restore.out.bias"].data = rng.normal(size=20)
        logits = model.restore_subgraph(np.zeros((4, 6)), training=True)
        np.testing.assert_array_equal(
            logits.data, np.tile(model.params["restore.out.bias"].data, (4, 1)))

    def test_logit_shape_is_slots_by_vocab(self):
        """Output is always [n_slots, vocab] for a valid feature grid."""
        model = CGTModel(tiny_config(n_slots=5, group_size=3), seed=1)
        logits = model.restore_subgraph(np.random.default_rng(0).normal(size=(4, 6)))
        assert logits.shape == (5, 20)

    def test_wrong_feature_shape_rejected(self):
        """A feature grid of the wrong shape raises a shape error."""
        model = CGTModel(tiny_config(), seed=0)
        with pytest.raises(ShapeError, match="features"):
            model.restore_subgraph(np.zeros((3, 6)))

    def test_non_finite_features_rejected(self):
        """NaN in the features aborts before any weight is touched."""
        model = CGTModel(tiny_config(), seed=0)
        bad = np.zeros((4, 6))
        bad[1, 2] = np.nan
        with pytest.raises(NonFiniteError):
            model.restore_subgraph(bad)

    def test_training_updates_bn_stats(self):
        """Training-mode passes fold batch statistics into the running buffers."""
        model = CGTModel(tiny_config(), seed=0)
        x = np.random.default_rng(2).normal(size=(4, 6))
        model.restore_subgraph(x, training=True)
        assert model.bn_states["restore.bn"].updates == 1


class TestSlotHeads:
    def test_distributions_match_plain_softmax(self):
        """Slot distributions equal a dense softmax over the non-special columns."""
        model = CGTModel(tiny_config(), seed=0)
        logits = np.random.default_rng(3).normal(size=(4, 20))
        probs = model.slot_distributions(Tensor(logits)).data
        body = logits[:, 4:]
        e = np.exp(body - body.max(axis=1, keepdims=True))
        np.testing.assert_allclose(probs, e / e.sum(axis=1, keepdims=True), atol=1e-12)
        np.testing.assert_allclose(probs.sum(axis=1), np.ones(4), atol=1e-12)

    def test_expected_embedding_of_one_hot(self):
        """A one-hot slot distribution returns exactly that token's embedding row."""
        model = CGTModel(tiny_config(), seed=4)
        probs = np.zeros((1, 16))
        probs[0, 3] = 1.0
        out = model.expected_token_embeddings(Tensor(probs))
        np.testing.assert_array_equal(out.data[0], model.params["token_table"].data[7])

    def test_discretize_one_hot(self):
        """A spike at one column selects that token id."""
        model = CGTModel(tiny_config(), seed=0)
        logits = np.zeros((4, 20))
        logits[2, 9] = 4.0
        assert model.discretize_subgraph(Tensor(logits))[2] == 9

    def test_discretize_tie_takes_lowest_id(self):
        """An exact tie between ids 7 and 12 resolves to 7."""
        logits = np.zeros((1, 20))
        logits[0, 7] = logits[0, 12] = 5.0
        model = CGTModel(tiny_config(), seed=0)
        assert model.discretize_subgraph(Tensor(logits))[0] == 7

    def test_discretize_skips_specials(self):
        """A huge logit on a special id never wins the argmax."""
        logits = np.zeros((3, 20))
        logits[:, :4] = 100.0
        logits[1, 11] = 1.0
        model = CGTModel(tiny_config(), seed=0)
        ids = model.discretize_subgraph(Tensor(logits))
        assert ids[1] == 11 and np.all(ids >= 4)

    def test_discretize_range_property(self):
        """Random logits always map into the non-special id range."""
        model = CGTModel(tiny_config(), seed=0)
        rng = np.random.default_rng(13)
        for _ in range(1000):
            ids = model.discretize_subgraph(Tensor(rng.normal(size=(4, 20))))
            assert np.all((ids >= 4) & (ids < 20))

    def test_discretize_positive_scale_invariant(self):
        """Multiplying all logits by a positive constant keeps the argmax."""
        model = CGTModel(tiny_config(), seed=0)
        rng = np.random.default_rng(17)
        for _ in range(50):
            logits = rng.normal(size=(4, 20))
            a = model.discretize_subgraph(Tensor(logits))
            b = model.discretize_subgraph(Tensor(logits * 3.7))
            np.testing.assert_array_equal(a, b)


class TestCompressVisualToken:
    def test_zero_features_give_bias(self):
        """Zero features compress to exactly the affine bias."""
        model = CGTModel(tiny_config(), seed=0)
        model.params["compress.bias"].data = np.arange(8.0)
        out = model.compress_visual_token(np.zeros((4, 6)))
        np.testing.assert_array_equal(out.data, np.arange(8.0)[None, :])

    def test_row_permutation_invariant(self):
        """Mean pooling makes the token independent of feature row order."""
        model = CGTModel(tiny_config(), seed=1)
        rng = np.random.default_rng(9)
        x = rng.normal(size=(4, 6))
        a = model.compress_visual_token(x).data
        b = model.compress_visual_token(x[[2, 0, 3, 1]]).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_identical_rows_reduce_to_affine(self):
        """If every row equals f the token is f @ W_c + b_c."""
        model = CGTModel(tiny_config(), seed=2)
        f = np.random.default_rng(4).normal(size=6)
        out = model.compress_visual_token(np.tile(f, (4, 1))).data
        want = f @ model.params["compress.weight"].data + model.params["compress.bias"].data
        np.testing.assert_allclose(out[0], want, rtol=1e-12)


class TestEmbedInput:
    def test_visual_only_sequence(self):
        """A lone visual position embeds as T_v + PE(0) + segment(0)."""
        model = CGTModel(tiny_config(), seed=0)
        t_v = Tensor(np.random.default_rng(1).normal(size=(1, 8)))
        seq = TokenSequence([0], [0], [True])
        out = model.embed_input(seq, t_v)
        want = (t_v.data + position_encoding_matrix(1, 8, 1000.0)
                + model.params["segment_table"].data[0])
        np.testing.assert_allclose(out.data, want, atol=1e-12)

    def test_same_token_across_groups_differs_by_pe_and_segment(self):
        """Two copies of one token id differ exactly by position plus segment deltas."""
        model = CGTModel(tiny_config(n_slots=2, group_size=1), seed=3)
        seq = graph_token_sequence([9, 9], model.config)
        out = model.embed_input(seq, Tensor(np.zeros((1, 8)))).data
        pe = position_encoding_matrix(3, 8, 1000.0)
        seg = model.params["segment_table"].data
        np.testing.assert_allclose(out[1] - out[2],
                                   (pe[1] - pe[2]) + (seg[1] - seg[2]), atol=1e-12)

    def test_group_index_must_fit_segment_table(self):
        """A group id beyond the segment table is a config error."""
        model = CGTModel(tiny_config(), seed=0)
        seq = TokenSequence([0, 5], [0, 9], [True, True])
        with pytest.raises(ValueError, match="segment table"):
            model.embed_input(seq, Tensor(np.zeros((1, 8))))

    def test_output_shape(self):
        """Embedding returns one d-wide row per sequence position."""
        model = CGTModel(tiny_config(), seed=0)
        seq = graph_token_sequence([5, 6, 7, 8], model.config)
        assert model.embed_input(seq, Tensor(np.zeros((1, 8)))).shape == (5, 8)


class TestEncoder:
    def test_all_visible_matches_dense_reference(self):
        """An all-true mask reproduces a plain transformer encoder to 1e-9."""
        model = CGTModel(tiny_config(encoder_layers=2), seed=6)
        x = np.random.default_rng(8).normal(size=(5, 8))
        out = model.encode(Tensor(x), np.ones((5, 5), dtype=bool))
        np.testing.assert_allclose(out.data, dense_encoder_ref(model, x),
                                   rtol=0, atol=1e-9)

    def test_invisible_tokens_cannot_influence(self):
        """Changing group-2 inputs leaves group-1 outputs bitwise identical."""
        model = CGTModel(tiny_config(), seed=7)
        seq = TokenSequence([0, 5, 6, 7, 8], [0, 1, 1, 2, 2], [True] * 5)
        vis = build_visible_matrix(seq)
        rng = np.random.default_rng(10)
        x = rng.normal(size=(5, 8))
        x2 = x.copy()
        x2[3:] = rng.normal(size=(2, 8))
        a = model.encode(Tensor(x), vis).data
        b = model.encode(Tensor(x2), vis).data
        np.testing.assert_array_equal(a[1:3], b[1:3])
        assert not np.array_equal(a[0], b[0])

    def test_shape_preserved(self):
        """Encoder output shape equals its input shape."""
        model = CGTModel(tiny_config(encoder_layers=2), seed=0)
        out = model.encode(Tensor(np.zeros((5, 8))), np.ones((5, 5), bool))
        assert out.shape == (5, 8)

    def test_group_permutation_equivariance(self):
        """Swapping whole groups (with the mask) permutes the outputs."""
        model = CGTModel(tiny_config(), seed=9)
        seq = TokenSequence([0, 5, 6, 7, 8], [0, 1, 1, 2, 2], [True] * 5)
        vis = build_visible_matrix(seq)
        x = np.random.default_rng(12).normal(size=(5, 8))
        perm = np.array([0, 3, 4, 1, 2])
        a = model.encode(Tensor(x), vis).data
        b = model.encode(Tensor(x[perm]), vis[np.ix_(perm, perm)]).data
        np.testing.assert_allclose(b, a[perm], rtol=0, atol=1e-9)

    def test_nan_abort_names_layer(self):
        """Non-finite activations abort with the offending layer index."""
        model = CGTModel(tiny_config(encoder_layers=2), seed=0)
        model.params["enc0.attn.wq"].data[:] = np.nan
        with pytest.raises(NonFiniteError, match="layer 0"):
            model.encode(Tensor(np.ones((3, 8))), np.ones((3, 3), bool))

    def test_encode_case_composition(self):
        """The full case forward yields consistent slots, sequence, and memory."""
        model = CGTModel(tiny_config(), seed=2)
        enc = model.encode_case(np.random.default_rng(3).normal(size=(4, 6)))
        assert enc.memory.shape == (5, 8)
        assert np.all((enc.slot_ids >= 4) & (enc.slot_ids < 20))
        np.testing.assert_array_equal(enc.sequence.tokens[1:], enc.slot_ids)


class TestDecoder:
    def make(self, **kw):
        model = CGTModel(tiny_config(**kw), seed=5)
        memory = Tensor(np.random.default_rng(6).normal(size=(5, 8)))
        return model, memory

    def test_causality_exact(self):
        """Changing a later prefix token never changes earlier logits."""
        model, memory = self.make()
        a = model.decode(memory, [SOS, 5, 6, 7]).data
        b = model.decode(memory, [SOS, 5, 6, 9]).data
        np.testing.assert_array_equal(a[:3], b[:3])
        assert not np.array_equal(a[3], b[3])

    def test_prefix_must_start_with_sos(self):
        """A prefix without the start id is rejected."""
        model, memory = self.make()
        with pytest.raises(ValueError, match="start"):
            model.decode(memory, [5, 6])

    def test_prefix_length_cap(self):
        """A prefix longer than the report cap plus start is a generation error."""
        model, memory = self.make(max_report_len=3)
        with pytest.raises(ValueError, match="maximum report length"):
            model.decode(memory, [SOS, 5, 6, 7, 8])

    def test_masked_memory_has_no_influence(self):
        """A pad-masked memory row can change without moving any logit."""
        model, memory = self.make()
        mask = np.array([1, 1, 1, 1, 0], dtype=bool)
        memory2 = Tensor(memory.data.copy())
        memory2.data[4] = 99.0
        a = model.decode(memory, [SOS, 5], memory_mask=mask).data
        b = model.decode(memory2, [SOS, 5], memory_mask=mask).data
        np.testing.assert_array_equal(a, b)

    def test_step_returns_last_row(self):
        """decode_step returns the vocabulary logits of the newest position."""
        model, memory = self.make()
        full = model.decode(memory, [SOS, 5, 6]).data
        np.testing.assert_array_equal(model.decode_step(memory, [SOS, 5, 6]), full[-1])
        assert model.decode_step(memory, [SOS]).shape == (20,)

    def test_logits_shape(self):
        """Teacher forcing yields one vocab row per prefix position."""
        model, memory = self.make()
        assert model.decode(memory, [SOS, 5, 6]).shape == (3, 20)


class TestGenerate:
    def test_rigged_end_token_gives_empty_report(self):
        """An output bias spiked on the end id terminates immediately."""
        model = CGTModel(tiny_config(), seed=1)
        model.params["out.bias"].data[EOS] = 1e4
        assert model.generate_greedy(np.zeros((4, 6))) == []

    def test_greedy_is_deterministic(self):
        """Two generations from the same parameters are identical."""
        model = CGTModel(tiny_config(), seed=8)
        x = np.random.default_rng(14).normal(size=(4, 6))
        assert model.generate_greedy(x) == model.generate_greedy(x)

    def test_max_length_truncation_logged(self, caplog):
        """A model that never emits the end id stops at the cap and logs it."""
        model = CGTModel(tiny_config(max_report_len=5), seed=1)
        model.params["out.bias"].data[7] = 1e4
        with caplog.at_level(logging.INFO, logger="kgreport.model"):
            report = model.generate_greedy(np.zeros((4, 6)))
        assert report == [7] * 5
        assert any("max length" in r.message for r in caplog.records)

    def test_return_slots(self):
        """The slot ids behind the generation are exposed on request."""
        model = CGTModel(tiny_config(), seed=2)
        report, slots = model.generate_greedy(np.zeros((4, 6)), return_slots=True)
        assert slots.shape == (4,) and np.all(slots >= 4)


class TestBatchNormMode:
    def test_batchnorm_mode_runs_and_tracks_stats(self):
        """The batchnorm switch wires running stats through every norm site."""
        model = CGTModel(tiny_config(norm="batchnorm"), seed=0)
        x = np.random.default_rng(1).normal(size=(4, 6))
        model.encode_case(x, training=True)
        assert model.bn_states["enc0.attn_norm"].updates == 1
        assert model.bn_states["restore.bn"].updates == 1

    def test_layernorm_mode_has_single_bn_site(self):
        """Layer-norm models keep batch statistics only in the restoration head."""
        model = CGTModel(tiny_config(), seed=0)
        assert set(model.bn_states) == {"restore.bn"}
