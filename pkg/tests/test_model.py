import numpy as np
import pytest

from protofed import model as M
from protofed import tensor as T
from protofed.errors import ConfigurationError, ProtocolError

from oracles import naive_conv2d, naive_linear, naive_sliding_sq_l2


def tiny_config(**kw):
    bb = M.BackboneConfig(
        num_blocks=2,
        channels=(4, 8),
        in_channels=1,
        image_hw=(16, 16),
        freeze_mode=kw.pop("freeze_mode", "frozen-random"),
    )
    return M.ModelConfig(backbone=bb, adapter_rank=2, protos_per_class=2, num_classes=2, **kw)


def rand_input(config, batch=2, seed=0):
    rng = np.random.default_rng(seed)
    bb = config.backbone
    return T.Tensor(rng.uniform(size=(batch, bb.in_channels, *bb.image_hw)))


class TestInit:
    def test_same_seed_bitwise_identical(self):
        a = M.init_params(tiny_config(), seed=5)
        b = M.init_params(tiny_config(), seed=5)
        for (ga, na, ta), (gb, nb, tb) in zip(a.named(), b.named()):
            assert (ga, na) == (gb, nb)
            assert np.array_equal(ta.data, tb.data)

    def test_fresh_adapters_are_identity(self):
        model = M.PrototypeModel(tiny_config(), seed=1)
        rng = np.random.default_rng(2)
        h = T.Tensor(rng.uniform(size=(2, 4, 8, 8)))
        out = M.adapter_forward(h, model.adapters[0])
        assert np.array_equal(out.data, h.data)

    def test_head_init_row_sums(self):
        config = tiny_config()
        model = M.PrototypeModel(config, seed=3)
        expect = 1.0 - 0.5 * (config.num_classes - 1)
        assert np.allclose(model.head.weights.data.sum(axis=1), expect)

    def test_groups_disjoint_and_flatten_roundtrip(self):
        params = M.init_params(tiny_config(), seed=7)
        for gname in ("omega", "alpha", "phi"):
            group = params.group(gname)
            vec = M.ParamGroups.flatten(group)
            before = [t.data.copy() for t in group.values()]
            M.ParamGroups.unflatten(group, vec)
            for t, orig in zip(group.values(), before):
                assert np.array_equal(t.data, orig)

    def test_invalid_rank_rejected(self):
        config = tiny_config()
        config.adapter_rank = 4  # equals first block depth
        with pytest.raises(ConfigurationError, match="rank"):
            config.validate()

    def test_prototype_extent_validated(self):
        config = tiny_config()
        config.proto_hw = (9, 9)  # feature map is 4x4
        with pytest.raises(ConfigurationError, match="prototype extent"):
            config.validate()


class TestAdapterForward:
    def test_zero_down_is_identity(self):
        model = M.PrototypeModel(tiny_config(), seed=1)
        ad = model.adapters[0]
        ad.down.data[:] = 0.0
        ad.up.data[:] = 1.0
        h = T.Tensor(np.random.default_rng(0).uniform(size=(1, 4, 8, 8)))
        assert np.array_equal(M.adapter_forward(h, ad).data, h.data)

    def test_zero_up_is_identity(self):
        model = M.PrototypeModel(tiny_config(), seed=1)
        ad = model.adapters[0]
        ad.up.data[:] = 0.0
        h = T.Tensor(np.random.default_rng(0).uniform(size=(1, 4, 8, 8)))
        assert np.array_equal(M.adapter_forward(h, ad).data, h.data)

    def test_matches_composed_oracle(self):
        rng = np.random.default_rng(42)
        h = rng.normal(size=(1, 8, 4, 4))
        down = rng.normal(size=(2, 8, 1, 1)) * 0.3
        up = rng.normal(size=(8, 2, 1, 1)) * 0.3
        ad = M.AdapterModule(down=T.Tensor(down), up=T.Tensor(up))
        out = M.adapter_forward(T.Tensor(h), ad)
        mid = np.maximum(naive_conv2d(h, down, None), 0.0)
        ref = h + naive_conv2d(mid, up, None)
        assert np.max(np.abs(out.data - ref)) < 1e-12

    def test_depth_mismatch(self):
        model = M.PrototypeModel(tiny_config(), seed=1)
        h = T.Tensor(np.ones((1, 3, 8, 8)))
        with pytest.raises(ConfigurationError, match="depth"):
            M.adapter_forward(h, model.adapters[0])


class TestBackboneForward:
    def test_zeroed_adapters_match_adapters_off(self):
        model = M.PrototypeModel(tiny_config(), seed=9)
        x = rand_input(model.config)
        on = model.backbone_forward(x, use_adapters=True)  # fresh adapters: up == 0
        off = model.backbone_forward(x, use_adapters=False)
        assert np.array_equal(on.data, off.data)

    def test_matches_hand_composed_oracle(self):
        config = tiny_config()
        model = M.PrototypeModel(config, seed=11)
        # give adapters non-trivial weights
        rng = np.random.default_rng(1)
        for ad in model.adapters:
            ad.up.data[:] = rng.normal(size=ad.up.data.shape) * 0.2
        x = rand_input(config, batch=1, seed=2)

        h = x.data
        for b in range(config.backbone.num_blocks):
            k = model.params.omega[f"block{b}.kernel"].data
            bias = model.params.omega[f"block{b}.bias"].data
            h = np.maximum(naive_conv2d(h, k, bias, padding=1), 0.0)
            # maxpool 2x2 stride 2
            bh, ch, hh, wh = h.shape
            h = h.reshape(bh, ch, hh // 2, 2, wh // 2, 2).max(axis=(3, 5))
            ad = model.adapters[b]
            mid = np.maximum(naive_conv2d(h, ad.down.data, None), 0.0)
            h = h + naive_conv2d(mid, ad.up.data, None)

        out = model.backbone_forward(x, use_adapters=True)
        assert np.max(np.abs(out.data - h)) < 1e-10

    def test_batch_independence(self):
        model = M.PrototypeModel(tiny_config(), seed=13)
        x = rand_input(model.config, batch=2, seed=3)
        both = model.backbone_forward(x).data
        for i in range(2):
            single = model.backbone_forward(T.Tensor(x.data[i : i + 1])).data
            assert np.array_equal(both[i : i + 1], single)

    def test_wrong_extent_rejected(self):
        model = M.PrototypeModel(tiny_config(), seed=13)
        with pytest.raises(ConfigurationError, match="input shape"):
            model.backbone_forward(T.Tensor(np.ones((1, 1, 8, 8))))


class TestPrototypeSimilarities:
    def test_exact_copy_scores_zero(self):
        model = M.PrototypeModel(tiny_config(), seed=17)
        rng = np.random.default_rng(4)
        z = rng.uniform(size=(1, 8, 4, 4))
        z[0, :, 2, 1] = model.proto_layer.prototypes.data[1, :, 0, 0]
        dmaps, scores = model.prototype_similarities(T.Tensor(z))
        assert scores.data[0, 1] == 0.0
        assert np.all(scores.data <= 0.0)
        assert np.all(dmaps.data >= 0.0)

    def test_identical_prototypes_identical_columns(self):
        model = M.PrototypeModel(tiny_config(), seed=17)
        model.proto_layer.prototypes.data[:] = model.proto_layer.prototypes.data[0]
        z = T.Tensor(np.random.default_rng(5).uniform(size=(2, 8, 4, 4)))
        _, scores = model.prototype_similarities(z)
        assert np.all(scores.data == scores.data[:, :1])

    def test_scores_match_bruteforce_min(self):
        model = M.PrototypeModel(tiny_config(), seed=19)
        rng = np.random.default_rng(6)
        z = rng.normal(size=(3, 8, 4, 4))
        _, scores = model.prototype_similarities(T.Tensor(z))
        for j in range(model.config.num_prototypes):
            ref = naive_sliding_sq_l2(z, model.proto_layer.prototypes.data[j])
            expect = -ref.reshape(3, -1).min(axis=1)
            assert np.max(np.abs(scores.data[:, j] - expect)) < 1e-12


class TestHeadAndForward:
    def test_zero_scores_zero_logits(self):
        model = M.PrototypeModel(tiny_config(), seed=23)
        logits = M.head_logits(T.Tensor(np.zeros((3, 4))), model.head)
        assert np.all(logits.data == 0.0)

    def test_one_hot_score_reads_init_pattern(self):
        model = M.PrototypeModel(tiny_config(), seed=23)
        s = np.zeros((1, 4))
        s[0, 2] = 1.0  # prototype 2 belongs to class 1
        logits = M.head_logits(T.Tensor(s), model.head)
        assert logits.data[0, 1] == 1.0
        assert logits.data[0, 0] == -0.5

    def test_random_head_matches_matrix_oracle(self):
        rng = np.random.default_rng(7)
        s = rng.normal(size=(3, 4))
        w = rng.normal(size=(4, 2))
        logits = M.head_logits(T.Tensor(s), M.ClassificationHead(weights=T.Tensor(w)))
        assert np.array_equal(logits.data, naive_linear(s, w))

    def test_forward_equals_manual_composition(self):
        model = M.PrototypeModel(tiny_config(), seed=0)
        x = rand_input(model.config, batch=2, seed=8)
        logits, dmaps, scores = model.forward(x)
        z = model.backbone_forward(x)
        d2, s2 = model.prototype_similarities(z)
        l2 = M.head_logits(s2, model.head)
        assert np.array_equal(logits.data, l2.data)
        assert np.array_equal(dmaps.data, d2.data)
        assert np.array_equal(scores.data, s2.data)

    def test_identical_rows_for_identical_images(self):
        model = M.PrototypeModel(tiny_config(), seed=0)
        one = rand_input(model.config, batch=1, seed=9)
        x = T.Tensor(np.concatenate([one.data, one.data], axis=0))
        logits, _, _ = model.forward(x)
        assert np.array_equal(logits.data[0], logits.data[1])

    def test_shape_contract(self):
        config = tiny_config()
        model = M.PrototypeModel(config, seed=0)
        x = rand_input(config, batch=3)
        logits, dmaps, scores = model.forward(x)
        fh, fw = config.backbone.feature_hw()
        m = config.num_prototypes
        assert logits.data.shape == (3, config.num_classes)
        assert dmaps.data.shape == (3, m, fh, fw)
        assert scores.data.shape == (3, m)


class TestGradientsThroughModel:
    def test_alpha_phi_gradcheck(self):
        config = tiny_config()
        model = M.PrototypeModel(config, seed=1)
        rng = np.random.default_rng(10)
        for ad in model.adapters:
            ad.up.data[:] = rng.normal(size=ad.up.data.shape) * 0.1
        x = rand_input(config, batch=1, seed=11)
        point = {}
        for name, t in {**model.params.alpha, **model.params.phi}.items():
            point[name] = t

        def fn(_):
            logits, _, _ = model.forward(x)
            return T.sum_all(logits)

        report = T.grad_check(fn, point, step=1e-6, tolerance=1e-5)
        assert report.passed, report.summary()

    def test_frozen_backbone_receives_no_grad(self):
        model = M.PrototypeModel(tiny_config(), seed=1)
        model.freeze_backbone()
        x = rand_input(model.config)
        logits, _, _ = model.forward(x)
        T.sum_all(logits).backward()
        for t in model.params.omega.values():
            assert t.grad is None
        assert model.params.alpha["adapter0.down"].grad is not None


class TestCheckpoint:
    def test_roundtrip_byte_exact(self, tmp_path):
        model = M.PrototypeModel(tiny_config(), seed=29)
        path = tmp_path / "model.ckpt"
        M.save_checkpoint(path, model.params)
        raw = path.read_bytes()
        loaded = M.deserialize_groups(raw)
        fresh = M.PrototypeModel(tiny_config(), seed=30)
        M.apply_checkpoint(fresh, loaded)
        assert M.serialize_groups(fresh.params) == raw
        for gname, tname, t in model.params.named():
            assert np.array_equal(t.data, fresh.params.group(gname)[tname].data)

    def test_bad_magic(self):
        with pytest.raises(ProtocolError, match="magic"):
            M.deserialize_groups(b"XXXX" + b"\x00" * 16)

    def test_truncation_reports_offset(self):
        model = M.PrototypeModel(tiny_config(), seed=29)
        raw = M.serialize_groups(model.params)
        with pytest.raises(ProtocolError, match="offset"):
            M.deserialize_groups(raw[: len(raw) // 2])

    def test_shape_mismatch_rejected(self, tmp_path):
        model = M.PrototypeModel(tiny_config(), seed=29)
        raw = M.serialize_groups(model.params)
        loaded = M.deserialize_groups(raw)
        other_cfg = tiny_config()
        other_cfg.adapter_rank = 3
        other = M.PrototypeModel(other_cfg, seed=29)
        with pytest.raises(ProtocolError):
            M.apply_checkpoint(other, loaded)

    def test_clone_requires_frozen_backbone(self):
        model = M.PrototypeModel(tiny_config(freeze_mode="warmup-pretrained"), seed=1)
        with pytest.raises(ConfigurationError, match="frozen"):
            model.clone()
        model.freeze_backbone()
        twin = model.clone()
        assert twin.params.omega["block0.kernel"] is model.params.omega["block0.kernel"]
        assert twin.params.phi["head"] is not model.params.phi["head"]
