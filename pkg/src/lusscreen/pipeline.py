"""End-to-end screening: frame -> preprocess -> classify -> segment -> overlay.

Also hosts k-fold evaluation over a manifest and the per-layer latency
benchmark used to size the models for Raspberry-Pi-class CPUs.
"""
from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .architectures import PARAM_KINDS, ModelGraph, check_weights, classifier_input, forward
from .dataset import LABELS, FoldPlan
from .errors import DataError, ModelError
from .imageio import read_image, write_image
from .imaging import normalize, preprocess, resize_mask
from .metrics import FoldMetrics, aggregate, classification_metrics, iou, threshold_mask
from .training import FEATURE_LAYER, TrainConfig, train_head

log = logging.getLogger(__name__)

OVERLAY_COLOR = (255, 0, 0)


def render_overlay(gray, mask) -> np.ndarray:
    """Blend red into ``gray`` where ``mask`` is set: round(0.6*gray + 0.4*red)."""
    gray = np.asarray(gray)
    mask = np.asarray(mask)
    if gray.ndim != 2 or gray.shape != mask.shape:
        raise DataError(f"overlay needs equal 2-D dims, got {gray.shape} and {mask.shape}")
    g = gray.astype(np.int64)
    out = np.repeat(gray[..., None], 3, axis=2).astype(np.uint8)
    on = mask != 0
    for ch, color in enumerate(OVERLAY_COLOR):
        # integer form of floor(0.6 g + 0.4 c + 0.5)
        blended = (6 * g + 4 * color + 5) // 10
        out[..., ch] = np.where(on, blended, out[..., ch])
    return out


@dataclass
class InferenceReport:
    id: str
    label_pred: str
    probs: dict
    overlay_path: str | None
    timing_ms: dict
    iou: float | None = None
    label_true: str | None = None
    fold: int | None = None

    def to_dict(self) -> dict:
        d = {
            "id": self.id,
            "label_pred": self.label_pred,
            "probs": dict(self.probs),
            "overlay_path": self.overlay_path,
            "timing_ms": dict(self.timing_ms),
        }
        if self.iou is not None:
            d["iou"] = self.iou
        if self.label_true is not None:
            d["label_true"] = self.label_true
        if self.fold is not None:
            d["fold"] = self.fold
        return d


def _processing_size(classifier: ModelGraph, segmenter: ModelGraph):
    _, h, w = classifier.input_spec
    if segmenter.input_spec[1:] != (h, w):
        raise ModelError(f"classifier input {h}x{w} and segmenter input {segmenter.input_spec[1:]} disagree")
    return w, h


def _ms(seconds):
    return seconds * 1000.0


def _finish(sample_id, gray, probs, mask_probs, out_dir, threshold, true_mask, timing, t_start,
            overlay_format="ppm", **extra):
    probs = np.asarray(probs, dtype=np.float64)
    label = LABELS[int(np.argmax(probs))]
    t0 = time.perf_counter()
    mask = threshold_mask(mask_probs, threshold)
    overlay_path = None
    if out_dir is not None:
        overlay_path = str(Path(out_dir) / f"{sample_id}_overlay.{overlay_format}")
        write_image(overlay_path, render_overlay(gray, mask))
    else:
        render_overlay(gray, mask)
    timing["overlay"] = _ms(time.perf_counter() - t0)
    score = None
    if true_mask is not None:
        score = iou(mask, true_mask)
    timing["total"] = _ms(time.perf_counter() - t_start)
    return InferenceReport(
        sample_id, label, {c: float(p) for c, p in zip(LABELS, probs)}, overlay_path, timing, score, **extra
    )


def load_true_mask(path, size):
    mask = read_image(path)
    if mask.ndim != 2:
        raise DataError(f"{path}: mask must be single-channel")
    return resize_mask(mask, size)


def infer_single(image_path, classifier: ModelGraph, cls_weights, segmenter: ModelGraph, seg_weights,
                 out_dir=None, *, sample_id=None, mask_path=None, threshold: float = 0.5,
                 overlay_format: str = "ppm", features=None, **extra) -> InferenceReport:
    """Screen one frame.

    The overlay is written to ``out_dir/<id>_overlay.<fmt>`` at the
    processing resolution.  ``features`` optionally supplies cached backbone
    features so only the dense head runs for classification.
    """
    check_weights(classifier, cls_weights)
    check_weights(segmenter, seg_weights)
    size = _processing_size(classifier, segmenter)
    sample_id = sample_id or Path(image_path).stem
    timing = {}

    t_start = time.perf_counter()
    gray = preprocess(read_image(image_path), size)
    x = normalize(gray)
    true_mask = load_true_mask(mask_path, size) if mask_path is not None else None
    t1 = time.perf_counter()
    timing["preprocess"] = _ms(t1 - t_start)

    if features is not None:
        probs = forward(classifier, cls_weights, np.asarray(features)[None], start_after=FEATURE_LAYER)[0]
    else:
        probs = forward(classifier, cls_weights, classifier_input(x))[0]
    t2 = time.perf_counter()
    timing["classify"] = _ms(t2 - t1)

    mask_probs = forward(segmenter, seg_weights, x)[0, 0]
    timing["segment"] = _ms(time.perf_counter() - t2)
    return _finish(sample_id, gray, probs, mask_probs, out_dir, threshold, true_mask, timing, t_start,
                   overlay_format, **extra)


@dataclass
class EvaluationResult:
    report: object
    samples: list[InferenceReport]
    training: object = None
    report_path: str | None = None

    def to_dict(self) -> dict:
        return {**self.report.to_dict(), "samples": [s.to_dict() for s in self.samples]}


def evaluate(manifest, folds: FoldPlan, classifier: ModelGraph, cls_weights, segmenter: ModelGraph, seg_weights,
             heads=None, out_dir=None, *, train_cfg: TrainConfig | None = None, threshold: float = 0.5,
             predictor=None, workers: int = 1, overlay_format: str = "ppm") -> EvaluationResult:
    """K-fold evaluation of the screening pipeline.

    ``heads`` maps fold -> trained head archive.  Without it the heads are
    trained inline with ``train_cfg`` and the cached backbone features reused
    for classification.  ``predictor(record, fold, gray)`` replaces both
    networks when given (returns class probabilities and a mask probability
    map); it exists for testing the harness.
    """
    out_dir = Path(out_dir) if out_dir is not None else None
    training = None
    features = None
    if predictor is None:
        size = _processing_size(classifier, segmenter)
        check_weights(segmenter, seg_weights)
        if heads is None:
            training = train_head(manifest, folds, classifier, cls_weights, train_cfg or TrainConfig())
            heads = {tf.fold: tf.head for tf in training.folds}
            features = training.features.features
        missing = [f for f in range(folds.k) if f not in heads]
        if missing:
            raise ModelError(f"no trained head for fold(s) {missing}")
    else:
        _, h, w = classifier.input_spec
        size = (w, h)

    if out_dir is not None:
        (out_dir / "overlays").mkdir(parents=True, exist_ok=True)
    overlay_dir = out_dir / "overlays" if out_dir is not None else None
    records = list(manifest)

    def run(rec):
        fold = folds.fold_of(rec)
        mask_path = manifest.resolve(rec.mask_path) if rec.mask_path else None
        extra = {"label_true": rec.label, "fold": fold}
        if predictor is not None:
            t_start = time.perf_counter()
            gray = preprocess(read_image(manifest.resolve(rec.image_path)), size)
            true_mask = load_true_mask(mask_path, size) if mask_path is not None else None
            probs, mask_probs = predictor(rec, fold, gray)
            timing = {"preprocess": 0.0, "classify": 0.0, "segment": 0.0}
            return _finish(rec.id, gray, probs, mask_probs, overlay_dir, threshold, true_mask, timing, t_start,
                           overlay_format, **extra)
        weights = cls_weights.updated(heads[fold]) if hasattr(cls_weights, "updated") else {**cls_weights, **heads[fold]}
        feats = features[rec.id][0] if features is not None else None
        return infer_single(manifest.resolve(rec.image_path), classifier, weights, segmenter, seg_weights,
                            overlay_dir, sample_id=rec.id, mask_path=mask_path, threshold=threshold,
                            overlay_format=overlay_format, features=feats, **extra)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            samples = list(pool.map(run, records))
    else:
        samples = [run(rec) for rec in records]

    fold_metrics = []
    for fold in range(folds.k):
        fold_samples = [s for s in samples if s.fold == fold]
        if not fold_samples:
            continue
        cm = classification_metrics([s.label_pred for s in fold_samples], [s.label_true for s in fold_samples])
        ious = [s.iou for s in fold_samples if s.iou is not None]
        fold_metrics.append(FoldMetrics(fold, cm, float(np.mean(ious)) if ious else None, len(ious)))
    report = aggregate(fold_metrics)
    result = EvaluationResult(report, samples, training)
    if out_dir is not None:
        path = out_dir / "eval_report.json"
        payload = {"k": folds.k, "seed": folds.seed, **result.to_dict()}
        path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
        result.report_path = str(path)
    return result


@dataclass
class LayerTiming:
    name: str
    kind: str
    samples_ms: list[float] = field(default_factory=list)

    @property
    def mean_ms(self):
        return float(np.mean(self.samples_ms))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "kind": self.kind,
            "mean_ms": self.mean_ms,
            "min_ms": float(np.min(self.samples_ms)),
            "max_ms": float(np.max(self.samples_ms)),
            "n": len(self.samples_ms),
        }


@dataclass
class BenchReport:
    model: str
    iterations: int
    warmup: int
    layers: list[LayerTiming]
    total_ms: list[float]

    @property
    def mean_ms(self):
        return float(np.mean(self.total_ms))

    @property
    def p50_ms(self):
        return float(np.percentile(self.total_ms, 50))

    @property
    def p95_ms(self):
        return float(np.percentile(self.total_ms, 95))

    @property
    def layer_sum_ms(self):
        return sum(layer.mean_ms for layer in self.layers)

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "iterations": self.iterations,
            "warmup": self.warmup,
            "layers": [layer.to_dict() for layer in self.layers],
            "end_to_end_ms": {"mean": self.mean_ms, "p50": self.p50_ms, "p95": self.p95_ms},
            "layer_sum_ms": self.layer_sum_ms,
        }

    def table(self) -> str:
        lines = [f"{'layer':<24} {'kind':<7} {'mean ms':>9} {'min ms':>9} {'max ms':>9}"]
        for layer in self.layers:
            d = layer.to_dict()
            lines.append(f"{d['name']:<24} {d['kind']:<7} {d['mean_ms']:9.2f} {d['min_ms']:9.2f} {d['max_ms']:9.2f}")
        lines.append(
            f"end-to-end: mean {self.mean_ms:.2f} ms, p50 {self.p50_ms:.2f} ms, p95 {self.p95_ms:.2f} ms "
            f"(layer sum {self.layer_sum_ms:.2f} ms, n={self.iterations}, warmup={self.warmup})"
        )
        return "\n".join(lines)


def bench(model: ModelGraph, weights, iterations: int = 10, warmup: int = 2, seed: int = 0) -> BenchReport:
    """Per-layer latency of ``model`` on a fixed random input.

    Only parametric layers (conv, upconv, dense) get rows; the time of a
    pooling, concat or flatten step is charged to the parametric layer
    before it, so the rows still add up to the whole forward pass.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    check_weights(model, weights)
    x = np.random.default_rng(seed).random((1, *model.input_spec), dtype=np.float32)

    owner = {}
    current = None
    for spec in model.layers:
        if spec.kind in PARAM_KINDS:
            current = spec.name
        owner[spec.name] = current
    first_param = next((s.name for s in model.layers if s.kind in PARAM_KINDS), None)
    rows = {s.name: LayerTiming(s.name, s.kind) for s in model.layers if s.kind in PARAM_KINDS}

    for _ in range(warmup):
        forward(model, weights, x)
    totals = []
    for _ in range(iterations):
        timings = []
        t0 = time.perf_counter()
        forward(model, weights, x, timings=timings)
        totals.append(_ms(time.perf_counter() - t0))
        per_row = dict.fromkeys(rows, 0.0)
        for name, seconds in timings:
            key = owner[name] or first_param
            if key is not None:
                per_row[key] += _ms(seconds)
        for key, value in per_row.items():
            rows[key].samples_ms.append(value)
    return BenchReport(model.name, iterations, warmup, list(rows.values()), totals)
