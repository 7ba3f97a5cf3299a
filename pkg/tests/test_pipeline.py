import json

import numpy as np
import pytest

from lusscreen import pipeline as P
from lusscreen.architectures import (
    UnetConfig,
    Vgg16Config,
    build_unet,
    build_vgg16,
    init_weights,
    zero_weights,
)
from lusscreen.dataset import LABELS, load_manifest, make_folds
from lusscreen.errors import DataError, ModelError
from lusscreen.imageio import read_image, write_pgm
from lusscreen.imaging import resize_mask
from lusscreen.synthetic import make_dataset
from lusscreen.training import TrainConfig

SMALL_VGG = Vgg16Config(input_shape=(3, 32, 32), channels=(4, 4, 8, 8, 8), head_width=8)
SMALL_UNET = UnetConfig(input_shape=(1, 32, 32), base_channels=4)
TIMING_KEYS = {"preprocess", "classify", "segment", "overlay", "total"}


def check_sample_schema(d):
    required = {"id", "label_pred", "probs", "overlay_path", "timing_ms"}
    assert required <= set(d) <= required | {"iou", "label_true", "fold"}
    assert isinstance(d["id"], str) and d["label_pred"] in LABELS
    assert set(d["probs"]) == set(LABELS)
    assert abs(sum(d["probs"].values()) - 1) < 1e-5
    assert set(d["timing_ms"]) == TIMING_KEYS
    assert all(v >= 0 for v in d["timing_ms"].values())
    if "iou" in d:
        assert 0.0 <= d["iou"] <= 1.0


class TestOverlay:
    def test_empty_mask_is_gray(self):
        gray = np.arange(12, dtype=np.uint8).reshape(3, 4)
        out = P.render_overlay(gray, np.zeros_like(gray))
        for c in range(3):
            np.testing.assert_array_equal(out[..., c], gray)

    def test_black_pixel(self):
        out = P.render_overlay(np.zeros((1, 1), np.uint8), np.full((1, 1), 255, np.uint8))
        assert tuple(out[0, 0]) == (102, 0, 0)

    def test_mid_gray(self):
        # 0.6 * 100 + 0.4 * 255 = 162 ; 0.6 * 100 = 60
        out = P.render_overlay(np.full((1, 1), 100, np.uint8), np.full((1, 1), 255, np.uint8))
        assert tuple(out[0, 0]) == (162, 60, 60)

    def test_matches_float_formula(self):
        gray = np.arange(256, dtype=np.uint8).reshape(16, 16)
        out = P.render_overlay(gray, np.ones_like(gray))
        g = gray.astype(np.float64)
        np.testing.assert_array_equal(out[..., 0], np.floor(0.6 * g + 0.4 * 255 + 0.5))
        np.testing.assert_array_equal(out[..., 1], np.floor(0.6 * g + 0.5))

    def test_dims_mismatch(self):
        with pytest.raises(DataError):
            P.render_overlay(np.zeros((2, 2), np.uint8), np.zeros((2, 3), np.uint8))


@pytest.fixture(scope="module")
def small_models():
    vgg, unet = build_vgg16(SMALL_VGG), build_unet(SMALL_UNET)
    return vgg, init_weights(vgg, 0), unet, init_weights(unet, 0)


class TestInferSingle:
    def test_zero_weights_full_size(self, tmp_path):
        vgg, unet = build_vgg16(), build_unet()
        frame = np.random.default_rng(0).integers(0, 256, (512, 512), dtype=np.uint8)
        write_pgm(tmp_path / "f.pgm", frame)
        rep = P.infer_single(tmp_path / "f.pgm", vgg, zero_weights(vgg), unet, zero_weights(unet), tmp_path)
        assert rep.probs == {"covid": 0.5, "healthy": 0.5}
        assert rep.label_pred == "covid"  # ties resolve to the first class
        overlay = read_image(rep.overlay_path)
        assert overlay.shape == (224, 224, 3)
        # sigmoid(0) = 0.5 >= threshold, so every pixel is marked
        assert np.all(overlay[..., 0] >= overlay[..., 1])
        check_sample_schema(rep.to_dict())
        assert rep.overlay_path.endswith("f_overlay.ppm")

    def test_deterministic(self, tmp_path, small_models):
        vgg, vw, unet, uw = small_models
        write_pgm(tmp_path / "g.pgm", np.random.default_rng(1).integers(0, 256, (48, 40), dtype=np.uint8))
        a = P.infer_single(tmp_path / "g.pgm", vgg, vw, unet, uw, tmp_path / "a")
        b = P.infer_single(tmp_path / "g.pgm", vgg, vw, unet, uw, tmp_path / "b")
        assert a.probs == b.probs
        assert read_image(a.overlay_path).tobytes() == read_image(b.overlay_path).tobytes()

    def test_iou_with_true_mask(self, tmp_path, small_models):
        vgg, vw, unet, uw = small_models
        write_pgm(tmp_path / "x.pgm", np.zeros((32, 32), np.uint8))
        write_pgm(tmp_path / "m.pgm", np.zeros((32, 32), np.uint8))
        rep = P.infer_single(tmp_path / "x.pgm", vgg, vw, unet, uw, mask_path=tmp_path / "m.pgm", threshold=2.0)
        assert rep.iou == 1.0  # nothing predicted, nothing true
        assert rep.overlay_path is None

    def test_size_disagreement(self, tmp_path, small_models):
        vgg, vw, _, _ = small_models
        unet = build_unet(UnetConfig(input_shape=(1, 64, 64), base_channels=4))
        write_pgm(tmp_path / "x.pgm", np.zeros((8, 8), np.uint8))
        with pytest.raises(ModelError):
            P.infer_single(tmp_path / "x.pgm", vgg, vw, unet, init_weights(unet, 0))


@pytest.fixture(scope="module")
def two_videos(tmp_path_factory):
    root = tmp_path_factory.mktemp("two")
    manifest = load_manifest(make_dataset(root, n_videos=2, frames_per_video=3, size=64, seed=1))
    return manifest, make_folds(manifest, k=2, seed=0)


def oracle(manifest, wrong=False):
    def predict(rec, fold, gray):
        idx = LABELS.index(rec.label)
        if wrong:
            idx = 1 - idx
        probs = np.eye(2)[idx]
        mask = read_image(manifest.resolve(rec.mask_path))
        mask = resize_mask(mask, (gray.shape[1], gray.shape[0])).astype(np.float64) / 255
        return probs, (1 - mask) if wrong else mask
    return predict


class TestEvaluate:
    def test_oracle_predictor(self, two_videos, small_models, tmp_path):
        manifest, folds = two_videos
        vgg, vw, unet, uw = small_models
        res = P.evaluate(manifest, folds, vgg, vw, unet, uw, out_dir=tmp_path, predictor=oracle(manifest))
        agg = res.report.aggregate
        assert agg["accuracy"]["mean"] == 1.0
        # the healthy video has an empty true mask and an empty prediction -> IoU 1
        assert agg["mean_iou"]["mean"] == 1.0
        data = json.loads((tmp_path / "eval_report.json").read_text())
        assert data["k"] == 2 and len(data["samples"]) == len(manifest)
        for s in data["samples"]:
            check_sample_schema(s)
            assert (tmp_path / "overlays" / f"{s['id']}_overlay.ppm").exists()

    def test_anti_oracle(self, two_videos, small_models):
        manifest, folds = two_videos
        vgg, vw, unet, uw = small_models
        res = P.evaluate(manifest, folds, vgg, vw, unet, uw, predictor=oracle(manifest, wrong=True))
        assert res.report.aggregate["accuracy"]["mean"] == 0.0
        assert res.report.aggregate["mean_iou"]["mean"] == 0.0

    def test_each_sample_scored_once(self, two_videos, small_models):
        manifest, folds = two_videos
        vgg, vw, unet, uw = small_models
        res = P.evaluate(manifest, folds, vgg, vw, unet, uw, predictor=oracle(manifest))
        assert sorted(s.id for s in res.samples) == sorted(r.id for r in manifest)
        for s in res.samples:
            assert s.fold == folds.fold_of(next(r for r in manifest if r.id == s.id))
        assert sum(f.confusion.total for f in res.report.folds) == len(manifest)

    def test_trains_inline_and_workers_agree(self, two_videos, small_models, tmp_path):
        manifest, folds = two_videos
        vgg, vw, unet, uw = small_models
        cfg = TrainConfig(epochs=2, augment=False)
        a = P.evaluate(manifest, folds, vgg, vw, unet, uw, train_cfg=cfg)
        b = P.evaluate(manifest, folds, vgg, vw, unet, uw, train_cfg=cfg, workers=2)
        assert a.training is not None and len(a.training.folds) == 2
        assert [s.probs for s in a.samples] == [s.probs for s in b.samples]

    def test_missing_head(self, two_videos, small_models):
        manifest, folds = two_videos
        vgg, vw, unet, uw = small_models
        with pytest.raises(ModelError, match="fold"):
            P.evaluate(manifest, folds, vgg, vw, unet, uw, heads={0: vw.subset("head.")})


class TestBench:
    def test_single_iteration(self, small_models):
        vgg, vw, _, _ = small_models
        rep = P.bench(vgg, vw, iterations=1, warmup=0)
        assert all(len(layer.samples_ms) == 1 for layer in rep.layers)
        assert rep.iterations == 1 and len(rep.total_ms) == 1

    def test_vgg_rows(self):
        vgg = build_vgg16()
        rep = P.bench(vgg, zero_weights(vgg), iterations=2, warmup=1)
        assert len(rep.layers) == 15
        assert [l.name for l in rep.layers][-2:] == ["head.fc1", "head.fc2"]
        d = rep.to_dict()
        assert set(d["end_to_end_ms"]) == {"mean", "p50", "p95"}
        assert len(rep.table().splitlines()) == 17

    def test_unet_rows(self, small_models):
        _, _, unet, uw = small_models
        rep = P.bench(unet, uw, iterations=2, warmup=0)
        assert len(rep.layers) == 23
        assert rep.layer_sum_ms <= rep.mean_ms * 1.1

    def test_bad_iterations(self, small_models):
        vgg, vw, _, _ = small_models
        with pytest.raises(ValueError):
            P.bench(vgg, vw, iterations=0)
