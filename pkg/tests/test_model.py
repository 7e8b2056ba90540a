import numpy as np
import pytest

import qrater.tensor as nk
from qrater.errors import ConfigError, ShapeError
from qrater.model import (
    AttentionRecord,
    ModelConfig,
    ModelParams,
    _param_specs,
    forward_image,
    forward_image_batch,
    forward_sequence,
    init_model,
    load_checkpoint,
    param_count,
    save_checkpoint,
    total_loss,
)
from qrater.tensor import Tape, Tensor, backward, finite_diff_check

from reference_forward import ref_forward_image


def micro_config(**kw):
    base = dict(n_annotators=2, n_classes=3, feature_dim=5, hidden_dim=8,
                n_heads=2, n_blocks=1, classifier_hidden=4)
    base.update(kw)
    return ModelConfig(**base)


def rand_features(rng, n_patches, dim):
    return Tensor(rng.normal(size=(n_patches, dim)).astype(np.float32))


class TestConfig:
    def test_heads_must_divide_hidden(self):
        with pytest.raises(ConfigError):
            micro_config(hidden_dim=10, n_heads=4).validate()

    def test_unknown_variant(self):
        with pytest.raises(ConfigError):
            micro_config(variant="bogus").validate()

    def test_defaults_match_reference_protocol(self):
        cfg = ModelConfig(n_annotators=5, n_classes=4, feature_dim=8)
        assert cfg.n_heads == 12
        assert cfg.n_compression_queries == 32


class TestInit:
    def test_deterministic(self):
        cfg = micro_config()
        a = init_model(cfg, seed=3)
        b = init_model(cfg, seed=3)
        for (n1, t1), (_n2, t2) in zip(a.named(), b.named()):
            assert np.array_equal(t1.data, t2.data), n1

    def test_different_seeds_differ(self):
        cfg = micro_config()
        a = init_model(cfg, seed=3)
        b = init_model(cfg, seed=4)
        assert not np.array_equal(a["queries"].data, b["queries"].data)

    def test_layernorm_affines(self):
        params = init_model(micro_config(), seed=0)
        assert np.all(params["block0.sa.ln_g"].data == 1.0)
        assert np.all(params["block0.sa.ln_b"].data == 0.0)

    def test_truncation_bound(self):
        params = init_model(micro_config(hidden_dim=64, n_blocks=2), seed=1)
        for name, t in params.named():
            assert np.all(np.abs(t.data) <= 2 * 0.02 + 1e-7) or name.endswith("ln_g"), name

    @pytest.mark.parametrize("variant", ["full", "base", "unified_classifier",
                                         "no_self_attn", "pre_mv_pool"])
    @pytest.mark.parametrize("mode", ["image", "sequence"])
    def test_count_matches_independent_enumeration(self, variant, mode):
        cfg = micro_config(n_annotators=3, hidden_dim=32, n_heads=4,
                           n_blocks=2, variant=variant, mode=mode,
                           n_compression_queries=6, max_frames=5)
        params = init_model(cfg, seed=0)
        # enumerate expected shapes by hand, independent of the registry
        d, a, c, ch, f = 32, 3, 3, 4, 5
        ffn = 4 * d
        attn = lambda fin: 2 * d + (d * d + d) + fin * d + (fin * d + d) + (d * d + d)
        per_block = attn(d if mode == "sequence" else f) + \
            (2 * d + d * ffn + ffn + ffn * d + d)
        if variant != "no_self_attn":
            per_block += attn(d)
        if variant == "base":
            expected = a * (f * ch + ch + ch * c + c)
        else:
            expected = a * d + 2 * per_block + 2 * d + d * d + d
            if mode == "sequence":
                expected += 6 * d + attn(f) + 5 * d
            if variant in ("unified_classifier", "pre_mv_pool"):
                expected += d * ch + ch + ch * c + c
            else:
                expected += a * (d * ch + ch + ch * c + c)
        assert params.total_size == expected
        assert param_count(cfg) == expected

    def test_every_parameter_registered_once(self):
        params = init_model(micro_config(), seed=0)
        ids = [id(t) for _n, t in params.named()]
        assert len(ids) == len(set(ids))


class TestForwardImage:
    def test_single_patch_forces_full_attention(self):
        cfg = micro_config()
        params = init_model(cfg, seed=0)
        feats = rand_features(np.random.default_rng(0), 1, cfg.feature_dim)
        _logits, rec = forward_image(feats, params, cfg)
        for block in rec.cross_attn:
            assert np.allclose(block, 1.0)

    def test_attention_rows_sum_to_one(self):
        cfg = micro_config(n_annotators=4, n_blocks=2)
        params = init_model(cfg, seed=1)
        feats = rand_features(np.random.default_rng(1), 7, cfg.feature_dim)
        _logits, rec = forward_image(feats, params, cfg)
        for row in rec.all_rows():
            assert abs(row.sum() - 1.0) < 1e-5

    def test_matches_reference_recomputation(self):
        for variant in ("full", "no_self_attn", "unified_classifier",
                        "pre_mv_pool", "base"):
            cfg = micro_config(n_annotators=2, feature_dim=5, hidden_dim=8,
                               n_heads=2, n_blocks=1, variant=variant)
            params = init_model(cfg, seed=7)
            feats = rand_features(np.random.default_rng(7), 3, cfg.feature_dim)
            logits, _ = forward_image(feats, params, cfg)
            ref = ref_forward_image(feats.data,
                                    {k: t.data for k, t in params.named()}, cfg)
            assert np.allclose(logits.data, ref, atol=1e-5), variant

    def test_annotator_permutation_equivariance(self):
        cfg = micro_config(n_annotators=4, hidden_dim=8, n_heads=2)
        params = init_model(cfg, seed=2)
        feats = rand_features(np.random.default_rng(2), 6, cfg.feature_dim)
        logits, _ = forward_image(feats, params, cfg)
        perm = np.array([2, 0, 3, 1])
        permuted = {k: t.data.copy() for k, t in params.named()}
        permuted["queries"] = permuted["queries"][perm]
        for k in ("cls.w1", "cls.b1", "cls.w2", "cls.b2"):
            permuted[k] = permuted[k][perm]
        params2 = ModelParams(cfg, {k: Tensor(v, requires_grad=True)
                                    for k, v in permuted.items()})
        logits2, _ = forward_image(feats, params2, cfg)
        assert np.allclose(logits2.data, logits.data[perm], atol=1e-5)

    def test_no_self_attn_cross_annotator_independence_bit_exact(self):
        cfg = micro_config(n_annotators=3, variant="no_self_attn")
        params = init_model(cfg, seed=3)
        feats = rand_features(np.random.default_rng(3), 5, cfg.feature_dim)
        logits, _ = forward_image(feats, params, cfg)
        bumped = {k: t.data.copy() for k, t in params.named()}
        bumped["queries"][1] += 0.37  # perturb annotator 1's query only
        params2 = ModelParams(cfg, {k: Tensor(v, requires_grad=True)
                                    for k, v in bumped.items()})
        logits2, _ = forward_image(feats, params2, cfg)
        assert np.array_equal(logits.data[0], logits2.data[0])
        assert np.array_equal(logits.data[2], logits2.data[2])
        assert not np.array_equal(logits.data[1], logits2.data[1])

    def test_full_variant_couples_annotators(self):
        cfg = micro_config(n_annotators=3, variant="full")
        params = init_model(cfg, seed=3)
        feats = rand_features(np.random.default_rng(3), 5, cfg.feature_dim)
        logits, _ = forward_image(feats, params, cfg)
        bumped = {k: t.data.copy() for k, t in params.named()}
        bumped["queries"][1] += 0.37
        params2 = ModelParams(cfg, {k: Tensor(v, requires_grad=True)
                                    for k, v in bumped.items()})
        logits2, _ = forward_image(feats, params2, cfg)
        assert not np.array_equal(logits.data[0], logits2.data[0])

    def test_base_variant_has_no_attention_params(self):
        cfg = micro_config(variant="base")
        params = init_model(cfg, seed=0)
        names = [n for n, _t in params.named()]
        assert names == ["cls.w1", "cls.b1", "cls.w2", "cls.b2"]
        feats = rand_features(np.random.default_rng(5), 4, cfg.feature_dim)
        logits, rec = forward_image(feats, params, cfg)
        assert logits.shape == (2, 3)
        assert rec.cross_attn == []

    def test_pre_mv_pool_emits_single_row(self):
        cfg = micro_config(variant="pre_mv_pool")
        params = init_model(cfg, seed=0)
        feats = rand_features(np.random.default_rng(6), 4, cfg.feature_dim)
        logits, _ = forward_image(feats, params, cfg)
        assert logits.shape == (1, cfg.n_classes)

    def test_batched_matches_single(self):
        cfg = micro_config(n_annotators=3)
        params = init_model(cfg, seed=4)
        rng = np.random.default_rng(8)
        stack = rng.normal(size=(4, 6, cfg.feature_dim)).astype(np.float32)
        batched = forward_image_batch(Tensor(stack), params, cfg)
        for i in range(4):
            single, _ = forward_image(Tensor(stack[i]), params, cfg,
                                      capture_attention=False)
            assert np.allclose(batched.data[i], single.data, atol=1e-6)

    def test_feature_dim_mismatch(self):
        cfg = micro_config()
        params = init_model(cfg, seed=0)
        with pytest.raises(ShapeError):
            forward_image(Tensor(np.zeros((3, cfg.feature_dim + 1),
                                          dtype=np.float32)), params, cfg)


class TestForwardSequence:
    def seq_config(self, **kw):
        return micro_config(mode="sequence", n_compression_queries=3,
                            max_frames=4, **kw)

    def test_frame_limit(self):
        cfg = self.seq_config()
        params = init_model(cfg, seed=0)
        frames = Tensor(np.zeros((5, 3, cfg.feature_dim), dtype=np.float32))
        with pytest.raises(ConfigError):
            forward_sequence(frames, params, cfg)

    def test_single_frame_reduces_to_image_over_compressed_keys(self):
        cfg = self.seq_config()
        params = init_model(cfg, seed=1)
        rng = np.random.default_rng(9)
        frames = Tensor(rng.normal(size=(1, 4, cfg.feature_dim)).astype(np.float32))
        logits, rec = forward_sequence(frames, params, cfg)
        assert logits.shape == (cfg.n_annotators, cfg.n_classes)
        assert rec.n_frames == 1
        assert rec.cross_attn[0].shape == (cfg.n_heads, cfg.n_annotators,
                                           cfg.n_compression_queries)
        # the annotator trunk applied to the compressed keys directly (an
        # image-mode model with feature_dim == hidden_dim and the same
        # trunk weights) must produce identical logits
        from qrater.model import _mha
        import qrater.tensor as nk

        comp_q = nk.expand0(params["comp.queries"], 1)
        compressed = _mha(comp_q, frames, "comp", params, cfg.n_heads, None)
        keys = nk.add_frame_bias(compressed, nk.narrow(params["frame_pos"], 0, 0, 1))
        img_cfg = ModelConfig(n_annotators=cfg.n_annotators,
                              n_classes=cfg.n_classes,
                              feature_dim=cfg.hidden_dim,
                              hidden_dim=cfg.hidden_dim, n_heads=cfg.n_heads,
                              n_blocks=cfg.n_blocks,
                              classifier_hidden=cfg.classifier_hidden)
        trunk = {name: Tensor(t.data.copy(), requires_grad=True)
                 for name, t in params.named()
                 if not name.startswith("comp") and name != "frame_pos"}
        img_params = ModelParams(img_cfg, trunk)
        img_logits, _ = forward_image(
            Tensor(keys.data[0].copy()), img_params, img_cfg)
        assert np.array_equal(img_logits.data, logits.data)

    def test_per_frame_mass_sums_to_one(self):
        cfg = self.seq_config(n_annotators=3)
        params = init_model(cfg, seed=2)
        rng = np.random.default_rng(10)
        frames = Tensor(rng.normal(size=(4, 5, cfg.feature_dim)).astype(np.float32))
        _logits, rec = forward_sequence(frames, params, cfg)
        for b in range(len(rec.cross_attn)):
            for h in range(cfg.n_heads):
                mass = rec.frame_mass(b, h)
                assert mass.shape == (3, 4)
                assert np.allclose(mass.sum(axis=1), 1.0, atol=1e-5)

    def test_frame_shuffle_invariance_with_zero_position_embedding(self):
        cfg = self.seq_config(n_annotators=3)
        params = init_model(cfg, seed=3)  # frame_pos is zero-initialized
        rng = np.random.default_rng(11)
        frames = rng.normal(size=(4, 5, cfg.feature_dim)).astype(np.float32)
        logits1, _ = forward_sequence(Tensor(frames), params, cfg)
        shuffled = frames[[2, 0, 3, 1]]
        logits2, _ = forward_sequence(Tensor(shuffled), params, cfg)
        assert np.allclose(logits1.data, logits2.data, atol=1e-5)

    def test_position_embedding_breaks_shuffle_invariance(self):
        # needs non-degenerate attention, so draw params at a healthy scale
        cfg = self.seq_config(n_annotators=3)
        rng = np.random.default_rng(12)
        tensors = {}
        for name, shape, init, _d in _param_specs(cfg):
            arr = (np.ones(shape) if init == "ones"
                   else 0.4 * rng.normal(size=shape))
            tensors[name] = Tensor(arr.astype(np.float32), requires_grad=True)
        params = ModelParams(cfg, tensors)
        frames = rng.normal(size=(4, 5, cfg.feature_dim)).astype(np.float32)
        logits1, _ = forward_sequence(Tensor(frames), params, cfg)
        logits2, _ = forward_sequence(Tensor(frames[[2, 0, 3, 1]]), params, cfg)
        assert not np.allclose(logits1.data, logits2.data, atol=1e-5)
        # zeroing the embedding restores order invariance
        params["frame_pos"].data[:] = 0.0
        logits3, _ = forward_sequence(Tensor(frames), params, cfg)
        logits4, _ = forward_sequence(Tensor(frames[[2, 0, 3, 1]]), params, cfg)
        assert np.allclose(logits3.data, logits4.data, atol=1e-5)

    def test_gradients_flow_to_sequence_params(self):
        cfg = self.seq_config()
        params = init_model(cfg, seed=4)
        rng = np.random.default_rng(13)
        frames = Tensor(rng.normal(size=(4, 3, cfg.feature_dim)).astype(np.float32))
        nk.reset_grads(params.tensors())
        with Tape() as tape:
            logits, _ = forward_sequence(frames, params, cfg,
                                         capture_attention=False)
            loss = total_loss(logits, [0, 1])
        backward(tape, loss)
        assert np.any(params["comp.queries"].grad != 0)
        assert np.any(params["frame_pos"].grad[:4] != 0)
        assert np.all(params["frame_pos"].grad[4:] == 0)  # unused rows


class TestTotalLoss:
    def test_additivity_uniform_logits(self):
        logits = Tensor(np.zeros((2, 4), dtype=np.float32))
        loss = total_loss(logits, [0, 3])
        assert loss.item() == pytest.approx(2 * np.log(4.0), rel=1e-6)

    def test_masked_annotator_contributes_nothing(self):
        rng = np.random.default_rng(14)
        arr = rng.normal(size=(2, 4)).astype(np.float32)
        both = total_loss(Tensor(arr), [1, None])
        alone = nk.cross_entropy(Tensor(arr[0]), 1)
        assert both.item() == pytest.approx(alone.item(), rel=1e-6)

    def test_sum_of_independent_terms(self):
        rng = np.random.default_rng(15)
        arr = rng.normal(size=(3, 5)).astype(np.float32)
        labels = [4, 0, 2]
        expected = sum(nk.cross_entropy(Tensor(arr[k]), labels[k]).item()
                       for k in range(3))
        assert total_loss(Tensor(arr), labels).item() == pytest.approx(
            expected, rel=1e-6)

    def test_all_missing_rejected(self):
        from qrater.errors import EmptyLossError

        with pytest.raises(EmptyLossError):
            total_loss(Tensor(np.zeros((2, 3), dtype=np.float32)), [None, None])

    def test_label_count_mismatch(self):
        with pytest.raises(ShapeError):
            total_loss(Tensor(np.zeros((2, 3), dtype=np.float32)), [1])


class TestModelGradients:
    def test_micro_instance_full_model_finite_differences(self):
        cfg = micro_config(n_annotators=2, n_classes=2, feature_dim=3,
                           hidden_dim=4, n_heads=2, classifier_hidden=3)
        rng = np.random.default_rng(42)
        params = init_model(cfg, seed=5)
        feats = rand_features(rng, 2, cfg.feature_dim)
        labels = [1, 0]
        worst = 0.0
        for name in [n for n, _t in params.named()]:
            orig = params[name]

            def f(x, name=name, orig=orig):
                params._items[name] = x
                try:
                    logits, _ = forward_image(feats, params, cfg,
                                              capture_attention=False)
                    return total_loss(logits, labels)
                finally:
                    params._items[name] = orig

            worst = max(worst, finite_diff_check(f, Tensor(orig.data.copy()),
                                                 1e-4))
        assert worst < 1e-3

    def test_masked_label_gives_zero_classifier_gradient(self):
        cfg = micro_config(n_annotators=2)
        params = init_model(cfg, seed=6)
        feats = rand_features(np.random.default_rng(16), 3, cfg.feature_dim)
        nk.reset_grads(params.tensors())
        with Tape() as tape:
            logits, _ = forward_image(feats, params, cfg,
                                      capture_attention=False)
            loss = total_loss(logits, [None, 2])
        backward(tape, loss)
        assert np.all(params["cls.w2"].grad[0] == 0)
        assert np.any(params["cls.w2"].grad[1] != 0)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        cfg = micro_config(n_annotators=3, mode="sequence",
                           n_compression_queries=4, max_frames=3)
        params = init_model(cfg, seed=9)
        prefix = str(tmp_path / "ckpt")
        save_checkpoint(params, prefix)
        loaded = load_checkpoint(prefix)
        assert loaded.config == cfg
        for (n1, t1), (_n2, t2) in zip(params.named(), loaded.named()):
            assert np.array_equal(t1.data, t2.data), n1

    def test_save_deterministic_bytes(self, tmp_path):
        cfg = micro_config()
        params = init_model(cfg, seed=10)
        save_checkpoint(params, str(tmp_path / "a"))
        save_checkpoint(params, str(tmp_path / "b"))
        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    def test_forward_identical_after_reload(self, tmp_path):
        cfg = micro_config()
        params = init_model(cfg, seed=11)
        feats = rand_features(np.random.default_rng(17), 4, cfg.feature_dim)
        logits1, _ = forward_image(feats, params, cfg)
        save_checkpoint(params, str(tmp_path / "c"))
        logits2, _ = forward_image(feats, load_checkpoint(str(tmp_path / "c")), cfg)
        assert np.array_equal(logits1.data, logits2.data)
