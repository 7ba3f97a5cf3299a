import numpy as np
import pytest

from lusscreen import tensor as K
from lusscreen.architectures import (
    UnetConfig,
    Vgg16Config,
    build_unet,
    build_vgg16,
    classifier_input,
    forward,
    init_weights,
    summarize,
    summary_rows,
    zero_weights,
    ModelGraph,
)
from lusscreen.errors import ShapeError
from lusscreen.weights import WeightArchive

TINY_VGG = Vgg16Config(input_shape=(3, 32, 32), channels=(4, 4, 8, 8, 8), head_width=8)
TINY_UNET = UnetConfig(input_shape=(1, 32, 32), base_channels=4)


@pytest.fixture(scope="module")
def vgg():
    return build_vgg16()


@pytest.fixture(scope="module")
def unet():
    return build_unet()


class TestVgg16:
    def test_layer_counts(self, vgg):
        assert vgg.count("conv") == 13
        assert vgg.count("dense") == 2
        assert vgg.output_spec == (2,)

    def test_pre_flatten_map(self, vgg):
        assert vgg.layer("block5.pool").out_shape == (512, 7, 7)
        assert vgg.layer("head.fc1").slots[0][1] == (64, 25088)

    def test_slot_names(self, vgg):
        slots = vgg.slots()
        assert "block1.conv1.weight" in slots and slots["block1.conv1.weight"] == (64, 3, 3, 3)
        assert "block5.conv3.bias" in slots
        assert [s for s in slots if s.startswith("head.")] == [
            "head.fc1.weight", "head.fc1.bias", "head.fc2.weight", "head.fc2.bias",
        ]

    def test_frozen_trainable_set(self, vgg):
        assert vgg.trainable == {"head.fc1.weight", "head.fc1.bias", "head.fc2.weight", "head.fc2.bias"}
        unfrozen = build_vgg16(Vgg16Config(frozen_backbone=False))
        assert unfrozen.trainable == set(unfrozen.slots())

    def test_invalid_plans(self):
        with pytest.raises(ShapeError):
            build_vgg16(Vgg16Config(blocks=(2, 2), channels=(64,)))
        with pytest.raises(ShapeError):
            build_vgg16(Vgg16Config(input_shape=(3, 100, 100)))

    def test_zero_image_probabilities(self, vgg):
        probs = forward(vgg, init_weights(vgg, 0), np.zeros((1, 3, 224, 224), np.float32))
        assert probs.shape == (1, 2)
        assert abs(probs.sum() - 1) < 1e-6

    def test_zero_weights_uniform(self, vgg):
        x = np.random.default_rng(0).random((1, 3, 224, 224), dtype=np.float32)
        np.testing.assert_array_equal(forward(vgg, zero_weights(vgg), x), [[0.5, 0.5]])

    def test_probability_vector_for_random_inputs(self):
        model = build_vgg16(TINY_VGG)
        w = init_weights(model, 4)
        rng = np.random.default_rng(4)
        for scale in (1e-3, 1.0, 1e3):
            p = forward(model, w, scale * rng.standard_normal((3, 3, 32, 32)).astype(np.float32))
            assert np.all(p >= 0)
            np.testing.assert_allclose(p.sum(axis=1), 1, atol=1e-6)

    def test_freezing_does_not_change_output(self):
        frozen = build_vgg16(TINY_VGG)
        thawed = build_vgg16(Vgg16Config(**{**TINY_VGG.__dict__, "frozen_backbone": False}))
        w = init_weights(frozen, 1)
        x = np.random.default_rng(1).random((1, 3, 32, 32), dtype=np.float32)
        assert forward(frozen, w, x).tobytes() == forward(thawed, w, x).tobytes()


class TestUnet:
    def test_conv_layer_count(self, unet):
        assert unet.count("conv", "upconv") == 23

    def test_final_conv(self, unet):
        final = unet.layer("unet.final")
        assert final.kernel == 1
        assert final.slots[0][1] == (1, 64, 1, 1)

    def test_output_matches_input(self, unet):
        assert unet.output_spec == (1, 224, 224)

    def test_bottleneck_shape(self, unet):
        assert unet.layer("unet.bottleneck.conv2").out_shape == (1024, 14, 14)

    def test_spatial_preserved_within_levels(self, unet):
        for i in range(1, 5):
            a = unet.layer(f"unet.down{i}.conv1").out_shape
            b = unet.layer(f"unet.down{i}.conv2").out_shape
            u = unet.layer(f"unet.up{i}.conv2").out_shape
            assert a[1:] == b[1:] == u[1:] == (224 // 2 ** (i - 1),) * 2

    def test_indivisible_input(self):
        with pytest.raises(ShapeError):
            build_unet(UnetConfig(input_shape=(1, 100, 100)))

    def test_zero_weights_half_mask(self, unet):
        x = np.random.default_rng(0).random((1, 1, 224, 224), dtype=np.float32)
        out = forward(unet, zero_weights(unet), x)
        assert out.shape == (1, 1, 224, 224)
        assert np.all(out == 0.5)

    def test_small_unet_runs(self):
        model = build_unet(TINY_UNET)
        out = forward(model, init_weights(model, 0), np.random.default_rng(0).random((2, 1, 32, 32)))
        assert out.shape == (2, 1, 32, 32)
        assert np.all((out >= 0) & (out <= 1))


class TestForward:
    def test_toy_graph_matches_hand_composition(self):
        cfg = Vgg16Config(input_shape=(3, 4, 4), blocks=(1,), channels=(2,), head_width=3)
        model = build_vgg16(cfg)
        w = init_weights(model, 7)
        x = np.random.default_rng(7).standard_normal((1, 3, 4, 4)).astype(np.float32)

        h = K.relu(K.conv2d(x, K.Conv2dParams(w["block1.conv1.weight"], w["block1.conv1.bias"], 1, 1)))
        h = K.maxpool2x2(h).reshape(1, -1)
        h = K.relu(K.dense(h, w["head.fc1.weight"], w["head.fc1.bias"]))
        expected = K.softmax(K.dense(h, w["head.fc2.weight"], w["head.fc2.bias"]))
        assert forward(model, w, x).tobytes() == expected.tobytes()

    def test_until_and_start_after_compose(self):
        model = build_vgg16(TINY_VGG)
        w = init_weights(model, 2)
        x = np.random.default_rng(2).random((2, 3, 32, 32), dtype=np.float32)
        feats = forward(model, w, x, until="head.flatten")
        assert feats.shape == (2, 8)
        head_only = forward(model, w, feats, start_after="head.flatten")
        assert head_only.tobytes() == forward(model, w, x).tobytes()

    def test_missing_slot_rejected_before_running(self):
        model = build_vgg16(TINY_VGG)
        w = init_weights(model, 0)
        broken = WeightArchive((k, v) for k, v in w.items() if k != "block3.conv2.bias")
        with pytest.raises(ShapeError, match="missing block3.conv2.bias"):
            forward(model, broken, np.zeros((1, 3, 32, 32), np.float32))

    def test_misshaped_slot_rejected(self):
        model = build_vgg16(TINY_VGG)
        w = init_weights(model, 0).updated({"head.fc2.weight": np.zeros((3, 8), np.float32)})
        timings = []
        with pytest.raises(ShapeError, match="head.fc2.weight"):
            forward(model, w, np.zeros((1, 3, 32, 32), np.float32), timings=timings)
        assert timings == []  # nothing executed

    def test_input_mismatch(self):
        model = build_vgg16(TINY_VGG)
        with pytest.raises(ShapeError):
            forward(model, init_weights(model, 0), np.zeros((1, 1, 32, 32), np.float32))

    def test_deterministic(self):
        model = build_unet(TINY_UNET)
        w = init_weights(model, 3)
        x = np.random.default_rng(3).random((1, 1, 32, 32), dtype=np.float32)
        assert forward(model, w, x).tobytes() == forward(model, w, x).tobytes()

    def test_classifier_input_replicates(self):
        g = np.random.default_rng(0).random((1, 1, 4, 4), dtype=np.float32)
        rgb = classifier_input(g)
        assert rgb.shape == (1, 3, 4, 4)
        for c in range(3):
            np.testing.assert_array_equal(rgb[:, c], g[:, 0])


class TestSummary:
    def test_unet_conv_rows(self, unet):
        rows = summary_rows(unet)
        assert sum(1 for _, kind, _, _ in rows if kind in ("conv", "upconv")) == 23

    def test_dense_row_param_count(self, vgg):
        row = next(r for r in summary_rows(vgg) if r[0] == "head.fc1")
        assert row[3] == 25088 * 64 + 64

    def test_total_is_sum_of_rows(self, vgg):
        text = summarize(vgg)
        total = sum(r[3] for r in summary_rows(vgg))
        assert text.splitlines()[-1] == f"total params: {total:,}"
        assert total == vgg.num_params

    def test_empty_graph(self):
        empty = ModelGraph("empty", (1, 4, 4), (), "class-probabilities")
        lines = summarize(empty).splitlines()
        assert lines[0].split() == ["layer", "kind", "output", "params"]
        assert lines[-1] == "total params: 0"
        assert len(lines) == 3  # header, rule, total
