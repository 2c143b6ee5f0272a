"""Token fusion, encoder, loss and checkpoint behavior.

Key invariants pinned here: sequence layout per fusion mode, additive
modality embedding only in temporal fusion, permutation equivariance of the
encoder (no positional encoding), padding masks that leave real rows
untouched, the ln(classes) uniform-logit loss values, and exact zero brain
gradients at zero brain loss weight.
"""

import numpy as np
import pytest

from timefuse.autodiff import Tensor, no_grad
from timefuse.model import (
    ModelConfig,
    ModelParams,
    TokenSequence,
    build_batch,
    build_sequence,
    classify,
    classify_batch,
    embed_tokens,
    encoder_forward,
    encoder_stack,
    forward_batch,
    interval_embedding,
    interval_embeddings,
    load_checkpoint,
    save_checkpoint,
    sequence_loss,
)
from timefuse.timeline import QuerySchedule, WindowSchedule
from timefuse.training import backward


def small_config(**overrides) -> ModelConfig:
    base = dict(
        token_dim=4,
        encoder_layers=1,
        attention_heads=2,
        ffn_dim=8,
        query_count=2,
        visual_feature_dim=5,
        brain_feature_dim=3,
        fusion="temporal",
    )
    base.update(overrides)
    return ModelConfig(**base)


def schedules(duration_s=6.0, query_count=2):
    windows = WindowSchedule.create(duration_s, 2.0, 2.0)
    queries = QuerySchedule.create(query_count, duration_s)
    return windows, queries


def features_for(config: ModelConfig, windows: WindowSchedule, seed=0):
    rng = np.random.default_rng(seed)
    visual = rng.normal(size=(windows.count, config.visual_feature_dim))
    brain = rng.normal(size=(windows.count, config.brain_feature_dim))
    return visual, brain


def sequence_for(config: ModelConfig, params: ModelParams, seed=0, duration_s=6.0):
    windows, queries = schedules(duration_s, config.query_count)
    visual, brain = features_for(config, windows, seed)
    tokens_v = embed_tokens(config, params, visual, "visual") if "visual" in config.branches else None
    tokens_b = embed_tokens(config, params, brain, "brain") if "brain" in config.branches else None
    return build_sequence(config, params, tokens_v, tokens_b, windows, queries)


class TestConfig:
    def test_width_by_fusion(self):
        assert small_config().token_width == 8
        assert small_config(fusion="spatial", attention_heads=3).token_width == 12
        assert small_config(fusion="visual_only").token_width == 8

    def test_heads_must_divide_width(self):
        with pytest.raises(ValueError):
            small_config(attention_heads=3)

    def test_identity_embedding_needs_matching_dims(self):
        with pytest.raises(ValueError):
            small_config(use_embedding_layer=False)
        config = small_config(
            use_embedding_layer=False, visual_feature_dim=4, brain_feature_dim=4
        )
        assert not config.use_embedding_layer

    def test_unknown_fusion(self):
        with pytest.raises(ValueError):
            small_config(fusion="late")

    def test_modality_embedding_only_temporal(self):
        assert small_config().has_modality_embedding
        assert not small_config(use_modality_embedding=False).has_modality_embedding
        for fusion in ("spatial", "visual_only", "brain_only"):
            assert not small_config(fusion=fusion).has_modality_embedding


class TestParams:
    def test_groups_follow_toggles(self):
        full = ModelParams.initialize(small_config(), seed=0)
        assert "modality_visual" in full and "embed_brain.weight" in full
        assert "interval_mlp.w1" in full and "cls_brain" in full

        no_m = ModelParams.initialize(small_config(use_modality_embedding=False), seed=0)
        assert "modality_visual" not in no_m

        spatial = ModelParams.initialize(
            small_config(fusion="spatial", attention_heads=2), seed=0
        )
        assert "modality_visual" not in spatial
        assert "cls_visual" in spatial and "cls_brain" in spatial

        visual_only = ModelParams.initialize(small_config(fusion="visual_only"), seed=0)
        assert "embed_brain.weight" not in visual_only
        assert "cls_brain" not in visual_only
        assert "head_brain_verb.weight" not in visual_only

    def test_toggle_does_not_shift_other_groups(self):
        full = ModelParams.initialize(small_config(), seed=3)
        no_mlp = ModelParams.initialize(small_config(use_interval_mlp=False), seed=3)
        for name in no_mlp.names():
            np.testing.assert_array_equal(no_mlp[name].data, full[name].data)

    def test_missing_group_has_helpful_error(self):
        params = ModelParams.initialize(small_config(fusion="visual_only"), seed=0)
        with pytest.raises(KeyError, match="not enabled"):
            params["embed_brain.weight"]

    def test_seed_changes_weights_not_structure(self):
        a = ModelParams.initialize(small_config(), seed=0)
        b = ModelParams.initialize(small_config(), seed=1)
        assert a.names() == b.names()
        assert np.abs(a["embed_visual.weight"].data - b["embed_visual.weight"].data).max() > 1e-9


class TestIntervalMlp:
    def test_shapes_and_validation(self):
        params = ModelParams.initialize(small_config(), seed=0)
        out = interval_embeddings(params, np.array([[0.0, 2.0], [2.0, 4.0]]))
        assert out.shape == (2, 4)
        single = interval_embedding(params, 0.0, 2.0)
        np.testing.assert_array_equal(single.data, out.data[0])
        with pytest.raises(ValueError):
            interval_embeddings(params, np.array([[2.0, 2.0]]))
        with pytest.raises(ValueError):
            interval_embeddings(params, np.array([0.0, 2.0]))

    def test_disabled_mlp_raises(self):
        params = ModelParams.initialize(small_config(use_interval_mlp=False), seed=0)
        with pytest.raises(ValueError):
            interval_embeddings(params, np.array([[0.0, 1.0]]))

    def test_distinct_intervals_distinct_embeddings(self):
        params = ModelParams.initialize(small_config(), seed=0)
        out = interval_embeddings(params, np.array([[0.0, 2.0], [2.0, 4.0], [0.0, 4.0]]))
        assert np.abs(out.data[0] - out.data[1]).max() > 1e-9
        assert np.abs(out.data[0] - out.data[2]).max() > 1e-9


class TestSequenceLayout:
    def test_lengths_and_widths(self):
        cases = [
            ("temporal", 2 * 3 + 2 * 2, 8),
            ("spatial", 3 + 2, 12),
            ("visual_only", 3 + 2, 8),
            ("brain_only", 3 + 2, 8),
        ]
        for fusion, length, width in cases:
            config = small_config(fusion=fusion, attention_heads=2)
            params = ModelParams.initialize(config, seed=0)
            seq = sequence_for(config, params)
            assert (seq.length, seq.width) == (length, width), fusion

    def test_cls_row_indices(self):
        config = small_config()
        params = ModelParams.initialize(config, seed=0)
        seq = sequence_for(config, params)
        np.testing.assert_array_equal(seq.cls_rows["visual"], [6, 7])
        np.testing.assert_array_equal(seq.cls_rows["brain"], [8, 9])
        np.testing.assert_array_equal(seq.feature_rows["visual"], [0, 1, 2])
        np.testing.assert_array_equal(seq.feature_rows["brain"], [3, 4, 5])

        spatial = small_config(fusion="spatial", attention_heads=2)
        params = ModelParams.initialize(spatial, seed=0)
        seq = sequence_for(spatial, params)
        np.testing.assert_array_equal(seq.cls_rows["visual"], [3, 4])
        np.testing.assert_array_equal(seq.cls_rows["brain"], [3, 4])

    def test_row_content_identity_embedding(self):
        # With identity embedding, no interval MLP and no modality embedding,
        # every row is an exact concatenation that can be written down.
        config = small_config(
            use_embedding_layer=False,
            use_interval_mlp=False,
            use_modality_embedding=False,
            visual_feature_dim=4,
            brain_feature_dim=4,
        )
        params = ModelParams.initialize(config, seed=0)
        windows, queries = schedules()
        rng = np.random.default_rng(1)
        visual = rng.normal(size=(3, 4))
        brain = rng.normal(size=(3, 4))
        seq = build_sequence(
            config,
            params,
            embed_tokens(config, params, visual, "visual"),
            embed_tokens(config, params, brain, "brain"),
            windows,
            queries,
        )
        zeros = np.zeros((3, 4))
        np.testing.assert_array_equal(seq.x.data[:3], np.concatenate([visual, zeros], axis=1))
        np.testing.assert_array_equal(seq.x.data[3:6], np.concatenate([brain, zeros], axis=1))
        np.testing.assert_array_equal(
            seq.x.data[6:8], np.concatenate([params["cls_visual"].data, np.zeros((2, 4))], axis=1)
        )
        np.testing.assert_array_equal(
            seq.x.data[8:10], np.concatenate([params["cls_brain"].data, np.zeros((2, 4))], axis=1)
        )

    def test_interval_embeddings_fill_second_half(self):
        config = small_config(use_modality_embedding=False)
        params = ModelParams.initialize(config, seed=0)
        windows, queries = schedules()
        seq = sequence_for(config, params)
        with no_grad():
            expected_windows = interval_embeddings(params, windows.intervals()).data
            expected_queries = interval_embeddings(params, queries.intervals()).data
        np.testing.assert_allclose(seq.x.data[:3, 4:], expected_windows, atol=1e-14)
        np.testing.assert_allclose(seq.x.data[3:6, 4:], expected_windows, atol=1e-14)
        np.testing.assert_allclose(seq.x.data[6:8, 4:], expected_queries, atol=1e-14)

    def test_modality_embedding_is_additive_offset(self):
        with_m = small_config()
        without_m = small_config(use_modality_embedding=False)
        params_m = ModelParams.initialize(with_m, seed=4)
        params_n = ModelParams.initialize(without_m, seed=4)
        seq_m = sequence_for(with_m, params_m, seed=2)
        seq_n = sequence_for(without_m, params_n, seed=2)
        mv = params_m["modality_visual"].data
        mb = params_m["modality_brain"].data
        np.testing.assert_allclose(seq_m.x.data[:3] - seq_n.x.data[:3], np.tile(mv, (3, 1)), atol=1e-12)
        np.testing.assert_allclose(seq_m.x.data[3:6] - seq_n.x.data[3:6], np.tile(mb, (3, 1)), atol=1e-12)
        np.testing.assert_allclose(seq_m.x.data[6:8] - seq_n.x.data[6:8], np.tile(mv, (2, 1)), atol=1e-12)
        np.testing.assert_allclose(seq_m.x.data[8:10] - seq_n.x.data[8:10], np.tile(mb, (2, 1)), atol=1e-12)

    def test_wrong_query_count_rejected(self):
        config = small_config()
        params = ModelParams.initialize(config, seed=0)
        windows, _ = schedules()
        queries = QuerySchedule.create(3, 6.0)
        visual, brain = features_for(config, windows)
        with pytest.raises(ValueError):
            build_sequence(
                config,
                params,
                embed_tokens(config, params, visual, "visual"),
                embed_tokens(config, params, brain, "brain"),
                windows,
                queries,
            )

    def test_missing_modality_rejected(self):
        config = small_config()
        params = ModelParams.initialize(config, seed=0)
        windows, queries = schedules()
        visual, _ = features_for(config, windows)
        with pytest.raises(ValueError):
            build_sequence(
                config, params, embed_tokens(config, params, visual, "visual"), None, windows, queries
            )


class TestEncoder:
    def test_zero_layers_is_identity(self):
        config = small_config(encoder_layers=0)
        params = ModelParams.initialize(config, seed=0)
        seq = sequence_for(config, params)
        out = encoder_forward(config, params, seq)
        np.testing.assert_array_equal(out.x.data, seq.x.data)

    def test_permutation_equivariance(self):
        # No positional encoding: permuting token rows permutes outputs.
        config = small_config()
        params = ModelParams.initialize(config, seed=5)
        seq = sequence_for(config, params, seed=3)
        with no_grad():
            encoded = encoder_stack(config, params, seq.x)
            perm = np.random.default_rng(0).permutation(seq.length)
            permuted = encoder_stack(config, params, Tensor(seq.x.data[perm]))
        np.testing.assert_allclose(permuted.data, encoded.data[perm], rtol=0, atol=1e-8)

    def test_classification_invariant_to_row_order(self):
        config = small_config()
        params = ModelParams.initialize(config, seed=6)
        seq = sequence_for(config, params, seed=7)
        with no_grad():
            base = classify(config, params, encoder_forward(config, params, seq))
            perm = np.random.default_rng(1).permutation(seq.length)
            inverse = np.empty_like(perm)
            inverse[perm] = np.arange(seq.length)
            shuffled = TokenSequence(
                x=Tensor(seq.x.data[perm]),
                fusion=seq.fusion,
                n_windows=seq.n_windows,
                query_count=seq.query_count,
                cls_rows={b: inverse[r] for b, r in seq.cls_rows.items()},
                feature_rows={b: inverse[r] for b, r in seq.feature_rows.items()},
            )
            other = classify(config, params, encoder_forward(config, params, shuffled))
        for branch in config.branches:
            for task in ("verb", "action"):
                np.testing.assert_allclose(
                    other[branch][task]["logits"].data,
                    base[branch][task]["logits"].data,
                    rtol=0,
                    atol=1e-8,
                )

    def test_width_mismatch_rejected(self):
        config = small_config()
        params = ModelParams.initialize(config, seed=0)
        with pytest.raises(ValueError):
            encoder_stack(config, params, Tensor(np.zeros((5, 6))))


class TestBatching:
    def test_padding_does_not_change_logits(self):
        config = small_config()
        params = ModelParams.initialize(config, seed=8)
        windows_a, queries_a = schedules(6.0)
        windows_b, queries_b = schedules(12.0)
        visual_a, brain_a = features_for(config, windows_a, seed=10)
        visual_b, brain_b = features_for(config, windows_b, seed=11)
        with no_grad():
            solo_batch, solo = forward_batch(
                config, params, [(visual_a, brain_a, windows_a, queries_a)]
            )
            _, joint = forward_batch(
                config,
                params,
                [(visual_a, brain_a, windows_a, queries_a), (visual_b, brain_b, windows_b, queries_b)],
            )
        for branch in config.branches:
            for task in ("verb", "action"):
                np.testing.assert_allclose(
                    joint[branch][task]["logits"].data[0],
                    solo[branch][task]["logits"].data[0],
                    rtol=0,
                    atol=1e-8,
                )

    def test_batch_indices_and_masks(self):
        config = small_config()
        params = ModelParams.initialize(config, seed=0)
        seq_short = sequence_for(config, params, duration_s=6.0)
        seq_long = sequence_for(config, params, duration_s=12.0)
        batch = build_batch(config, [seq_short, seq_long])
        assert batch.x.shape == (2, seq_long.length, 8)
        assert batch.valid[0].sum() == seq_short.length
        assert batch.valid[1].all()
        assert batch.mask_bias.shape == (2, 1, 1, seq_long.length)
        assert (batch.mask_bias[0, 0, 0, seq_short.length :] < -1e8).all()
        np.testing.assert_array_equal(batch.cls_index["visual"][0], seq_short.cls_rows["visual"])

    def test_single_sequence_batch_matches_unbatched(self):
        config = small_config()
        params = ModelParams.initialize(config, seed=9)
        seq = sequence_for(config, params, seed=12)
        with no_grad():
            solo = classify(config, params, encoder_forward(config, params, seq))
            batch = build_batch(config, [seq])
            encoded = encoder_stack(config, params, batch.x, batch.mask_bias)
            batched = classify_batch(config, params, encoded, batch)
        for branch in config.branches:
            for task in ("verb", "action"):
                np.testing.assert_allclose(
                    batched[branch][task]["logits"].data[0],
                    solo[branch][task]["logits"].data,
                    rtol=0,
                    atol=1e-10,
                )


def _logits_map(config, fill=0.0, batched=False):
    out = {}
    for branch in config.branches:
        out[branch] = {}
        for task in ("verb", "action"):
            classes = config.class_count(task)
            shape = (1, config.query_count, classes) if batched else (config.query_count, classes)
            out[branch][task] = {"logits": Tensor(np.full(shape, fill), requires_grad=False)}
    return out


class TestLoss:
    def test_uniform_logits_give_log_class_count(self):
        config = small_config()
        labels = {"verb": np.array([0, 3]), "action": np.array([5, 28])}
        result = sequence_loss(config, _logits_map(config), labels, brain_loss_weight=0.5)
        ln10 = 2.302585092994046
        ln29 = 3.367295829986474
        assert abs(result.branch_values["visual"] - (ln10 + ln29)) < 1e-12
        assert abs(result.branch_values["brain"] - (ln10 + ln29)) < 1e-12
        assert abs(float(result.total.data) - 1.5 * (ln10 + ln29)) < 1e-12
        assert abs(result.task_values["visual"]["verb"] - ln10) < 1e-12
        assert abs(result.task_values["visual"]["action"] - ln29) < 1e-12

    def test_background_queries_excluded(self):
        config = small_config()
        # Only the first query counts; the second is background everywhere.
        labels = {"verb": np.array([2, -1]), "action": np.array([7, -1])}
        uniform = sequence_loss(config, _logits_map(config), labels)
        both = sequence_loss(
            config, _logits_map(config), {"verb": np.array([2, 2]), "action": np.array([7, 7])}
        )
        assert abs(float(uniform.total.data) - float(both.total.data)) < 1e-12

    def test_all_background_gives_zero_constant(self):
        config = small_config()
        labels = {"verb": np.array([-1, -1]), "action": np.array([-1, -1])}
        result = sequence_loss(config, _logits_map(config), labels)
        assert float(result.total.data) == 0.0
        assert not result.total.requires_grad

    def test_label_out_of_range(self):
        config = small_config()
        labels = {"verb": np.array([0, 10]), "action": np.array([0, 0])}
        with pytest.raises(ValueError):
            sequence_loss(config, _logits_map(config), labels)

    def test_zero_brain_weight_zeroes_brain_head_grads(self):
        config = small_config()
        params = ModelParams.initialize(config, seed=13)
        windows, queries = schedules()
        visual, brain = features_for(config, windows, seed=14)
        labels = {"verb": np.array([[1, 2]]), "action": np.array([[3, 4]])}

        def run(weight):
            params.zero_grad()
            _, logits_map = forward_batch(config, params, [(visual, brain, windows, queries)])
            result = sequence_loss(config, logits_map, labels, brain_loss_weight=weight)
            return backward(params, result.total)

        grads0 = run(0.0)
        for task in ("verb", "action"):
            np.testing.assert_array_equal(grads0[f"head_brain_{task}.weight"], 0.0)
            np.testing.assert_array_equal(grads0[f"head_brain_{task}.bias"], 0.0)
        assert np.abs(grads0["head_visual_verb.weight"]).max() > 0

        grads1 = run(1.0)
        assert np.abs(grads1["head_brain_verb.weight"]).max() > 0

    def test_doubling_brain_weight_doubles_brain_head_grads(self):
        config = small_config()
        params = ModelParams.initialize(config, seed=15)
        windows, queries = schedules()
        visual, brain = features_for(config, windows, seed=16)
        labels = {"verb": np.array([[1, 2]]), "action": np.array([[3, 4]])}

        def run(weight):
            params.zero_grad()
            _, logits_map = forward_batch(config, params, [(visual, brain, windows, queries)])
            result = sequence_loss(config, logits_map, labels, brain_loss_weight=weight)
            return backward(params, result.total)

        grads_half = run(0.5)
        grads_one = run(1.0)
        for task in ("verb", "action"):
            np.testing.assert_allclose(
                grads_one[f"head_brain_{task}.weight"],
                2.0 * grads_half[f"head_brain_{task}.weight"],
                rtol=1e-12,
                atol=0,
            )


class TestGradientFlow:
    def test_every_enabled_group_receives_gradient(self):
        for fusion in ("temporal", "spatial", "visual_only", "brain_only"):
            config = small_config(fusion=fusion, attention_heads=2)
            params = ModelParams.initialize(config, seed=17)
            windows, queries = schedules()
            visual, brain = features_for(config, windows, seed=18)
            labels = {"verb": np.array([[1, 2]]), "action": np.array([[3, 4]])}
            _, logits_map = forward_batch(config, params, [(visual, brain, windows, queries)])
            result = sequence_loss(config, logits_map, labels)
            grads = backward(params, result.total)
            for name in params.names():
                assert np.abs(grads[name]).max() > 0, f"{fusion}: no gradient reached {name}"

    def test_model_gradients_match_finite_differences(self):
        config = small_config()
        params = ModelParams.initialize(config, seed=19)
        windows, queries = schedules()
        visual, brain = features_for(config, windows, seed=20)
        labels = {"verb": np.array([[1, 2]]), "action": np.array([[3, 4]])}

        def loss_value() -> float:
            with no_grad():
                _, logits_map = forward_batch(config, params, [(visual, brain, windows, queries)])
                return float(
                    sequence_loss(config, logits_map, labels, brain_loss_weight=0.7).total.data
                )

        params.zero_grad()
        _, logits_map = forward_batch(config, params, [(visual, brain, windows, queries)])
        result = sequence_loss(config, logits_map, labels, brain_loss_weight=0.7)
        grads = backward(params, result.total)

        rng = np.random.default_rng(21)
        step = 1e-5
        for name in ("embed_visual.weight", "interval_mlp.w1", "modality_brain",
                     "cls_visual", "encoder.0.attn_query.weight", "head_brain_action.weight"):
            data = params[name].data
            flat = data.ravel()
            for index in rng.choice(flat.size, size=min(4, flat.size), replace=False):
                original = flat[index]
                flat[index] = original + step
                hi = loss_value()
                flat[index] = original - step
                lo = loss_value()
                flat[index] = original
                numeric = (hi - lo) / (2 * step)
                analytic = grads[name].ravel()[index]
                assert abs(numeric - analytic) <= 1e-4 * max(1.0, abs(numeric)), (
                    f"{name}[{index}]: numeric {numeric} vs analytic {analytic}"
                )


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        config = small_config()
        params = ModelParams.initialize(config, seed=22)
        path = tmp_path / "model.ckpt"
        save_checkpoint(params, path)
        loaded = load_checkpoint(path)
        assert loaded.config == config
        assert loaded.names() == params.names()
        for name in params.names():
            np.testing.assert_array_equal(loaded[name].data, params[name].data)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(ValueError):
            load_checkpoint(path)

    def test_tensor_set_must_match_config(self, tmp_path):
        config = small_config()
        params = ModelParams.initialize(config, seed=23)
        del params.tensors["cls_visual"]
        path = tmp_path / "partial.ckpt"
        save_checkpoint(params, path)
        with pytest.raises(ValueError):
            load_checkpoint(path)

    def test_truncated_rejected(self, tmp_path):
        config = small_config()
        params = ModelParams.initialize(config, seed=24)
        path = tmp_path / "model.ckpt"
        save_checkpoint(params, path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) - 16])
        with pytest.raises(ValueError):
            load_checkpoint(path)
