"""Dense-head fine-tuning on frozen VGG-16 features.

The head is ``dense -> relu -> dense -> softmax``.  Gradients are written
out by hand; :func:`head_gradients` is checked against central finite
differences in the test suite.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .architectures import ModelGraph, check_weights, classifier_input, forward
from .dataset import LABELS, FoldPlan
from .errors import DataError, ModelError, ShapeError
from .imageio import read_image
from .imaging import AugmentConfig, augment, normalize, preprocess
from .metrics import EvalReport, FoldMetrics, aggregate, classification_metrics
from .weights import WeightArchive

log = logging.getLogger(__name__)

HEAD_SLOTS = ("head.fc1.weight", "head.fc1.bias", "head.fc2.weight", "head.fc2.bias")
FEATURE_LAYER = "head.flatten"
PROB_CLAMP = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    learning_rate: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 16
    seed: int = 0
    augment: bool = True
    augment_cfg: AugmentConfig = AugmentConfig()

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")


def cross_entropy(probs, true_class: int) -> float:
    """``-log p[true_class]`` with p clamped at 1e-12."""
    probs = np.asarray(probs, dtype=np.float64)
    if not 0 <= true_class < probs.shape[-1]:
        raise IndexError(f"class index {true_class} out of range for {probs.shape[-1]} classes")
    if abs(probs.sum() - 1.0) > 1e-6:
        raise ValueError(f"probabilities sum to {probs.sum()}, not 1")
    return float(-np.log(max(probs[true_class], PROB_CLAMP)))


def _check_head(params, n_features):
    w1, b1, w2, b2 = (np.asarray(params[s]) for s in HEAD_SLOTS)
    if w1.ndim != 2 or w1.shape[1] != n_features or b1.shape != (w1.shape[0],):
        raise ShapeError(f"fc1 {w1.shape}/{b1.shape} does not fit {n_features} features")
    if w2.ndim != 2 or w2.shape[1] != w1.shape[0] or b2.shape != (w2.shape[0],):
        raise ShapeError(f"fc2 {w2.shape}/{b2.shape} does not follow fc1 {w1.shape}")
    return w1, b1, w2, b2


def head_forward(features, params):
    """Class probabilities for a feature vector (F,) or batch (B, F)."""
    x = np.asarray(features)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    w1, b1, w2, b2 = _check_head(params, xb.shape[1])
    hidden = np.maximum(xb @ w1.T + b1, 0)
    logits = hidden @ w2.T + b2
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs = e / e.sum(axis=1, keepdims=True)
    return probs[0] if single else probs


def head_loss(features, params, labels) -> float:
    """Mean cross-entropy over a batch (or the loss of one sample)."""
    probs = np.atleast_2d(head_forward(features, params))
    labels = np.atleast_1d(labels)
    return float(np.mean([cross_entropy(p, int(y)) for p, y in zip(probs, labels)]))


def head_gradients(features, params, true_class):
    """Gradient of the mean cross-entropy w.r.t. every head parameter.

    ``features`` is (F,) with an int ``true_class``, or (B, F) with B labels.
    Returns ``(grads, loss)``; grads are keyed like ``params``.  Computation
    runs in the dtype of ``features`` (pass float64 for gradient checks).
    """
    x = np.asarray(features)
    xb = np.atleast_2d(x)
    labels = np.atleast_1d(np.asarray(true_class, dtype=np.int64))
    if labels.shape[0] != xb.shape[0]:
        raise ShapeError(f"{xb.shape[0]} feature rows for {labels.shape[0]} labels")
    w1, b1, w2, b2 = (a.astype(xb.dtype, copy=False) for a in _check_head(params, xb.shape[1]))
    n_classes = w2.shape[0]
    if labels.min() < 0 or labels.max() >= n_classes:
        raise IndexError(f"labels must be in [0, {n_classes})")

    pre = xb @ w1.T + b1
    hidden = np.maximum(pre, 0)
    logits = hidden @ w2.T + b2
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs = e / e.sum(axis=1, keepdims=True)
    batch = xb.shape[0]
    loss = float(-np.mean(np.log(np.maximum(probs[np.arange(batch), labels], PROB_CLAMP))))

    d_logits = probs.copy()
    d_logits[np.arange(batch), labels] -= 1
    d_logits /= batch
    d_hidden = (d_logits @ w2) * (pre > 0)
    grads = {
        "head.fc1.weight": d_hidden.T @ xb,
        "head.fc1.bias": d_hidden.sum(axis=0),
        "head.fc2.weight": d_logits.T @ hidden,
        "head.fc2.bias": d_logits.sum(axis=0),
    }
    return grads, loss


def sgd_step(params, grads, state, cfg: TrainConfig):
    """Momentum SGD: ``v = momentum*v - lr*g; p += v``. Returns (params, state)."""
    new_params, new_state = dict(params), dict(state)
    for name, g in grads.items():
        p = np.asarray(params[name])
        g = np.asarray(g)
        if p.shape != g.shape:
            raise ShapeError(f"{name}: gradient {g.shape} does not match parameter {p.shape}")
        v = np.asarray(state.get(name, np.zeros_like(p)))
        if v.shape != p.shape:
            raise ShapeError(f"{name}: velocity {v.shape} does not match parameter {p.shape}")
        v = cfg.momentum * v - cfg.learning_rate * g
        new_state[name] = v
        new_params[name] = p + v
    return new_params, new_state


def init_head(model: ModelGraph, seed: int, dtype=np.float64) -> dict:
    """He-uniform head weights, zero biases."""
    rng = np.random.default_rng(seed)
    slots = model.slots()
    params = {}
    for name in HEAD_SLOTS:
        shape = slots[name]
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            limit = np.sqrt(6.0 / shape[1])
            params[name] = rng.uniform(-limit, limit, size=shape).astype(dtype)
    return params


def fit_head(features, labels, params, cfg: TrainConfig, rng=None):
    """Mini-batch training loop. Returns (params, per-epoch mean losses)."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if features.shape[0] == 0:
        raise DataError("empty training set")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    state: dict = {}
    history = []
    n = features.shape[0]
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            grads, loss = head_gradients(features[idx], params, labels[idx])
            total += loss * len(idx)
            params, state = sgd_step(params, grads, state, cfg)
        history.append(total / n)
    return params, history


def extract_features(model: ModelGraph, weights, gray) -> np.ndarray:
    """Frozen backbone features (F,) for one preprocessed gray image."""
    x = classifier_input(normalize(gray))
    return forward(model, weights, x, until=FEATURE_LAYER)[0]


@dataclass
class FeatureTable:
    """Backbone features for every (sample, augmentation variant)."""

    ids: list[str]
    labels: np.ndarray
    features: dict[str, np.ndarray] = field(default_factory=dict)  # id -> (variants, F)


def compute_features(manifest, model: ModelGraph, weights, cfg: TrainConfig, progress=None) -> FeatureTable:
    """Run the frozen backbone once per image variant (frozen => reusable across folds)."""
    table = FeatureTable([r.id for r in manifest], np.array([r.class_index for r in manifest]))
    _, h, w = model.input_spec
    for i, rec in enumerate(manifest):
        gray = preprocess(read_image(manifest.resolve(rec.image_path)), (w, h))
        if cfg.augment:
            variants = [img for img, _ in augment(gray, None, cfg.augment_cfg, cfg.seed, rec.id)]
        else:
            variants = [gray]
        table.features[rec.id] = np.stack([extract_features(model, weights, v) for v in variants])
        if progress:
            progress(i + 1, len(manifest))
    return table


@dataclass
class TrainedFold:
    fold: int
    head: WeightArchive
    loss_history: list[float]
    train_accuracy: float
    trained_on: frozenset[str]
    test_ids: tuple[str, ...]
    test_probs: np.ndarray


@dataclass
class HeadTrainingResult:
    folds: list[TrainedFold]
    report: EvalReport
    features: FeatureTable


def train_head(manifest, folds: FoldPlan, model: ModelGraph, weights, cfg: TrainConfig = TrainConfig(),
               features: FeatureTable | None = None, progress=None) -> HeadTrainingResult:
    """K-fold head training: fit on k-1 folds (augmented), score the held-out originals."""
    if model.head != "class-probabilities":
        raise ModelError(f"{model.name} is not a classifier")
    backbone = {s: shp for s, shp in model.slots().items() if s not in HEAD_SLOTS}
    missing = [s for s in backbone if s not in weights]
    if missing:
        raise ModelError(f"frozen backbone weights missing: {missing[:3]}{'...' if len(missing) > 3 else ''}")
    check_weights(model, _with_placeholder_head(model, weights))
    if features is None:
        features = compute_features(manifest, model, weights, cfg, progress)

    records = list(manifest)
    fold_of = {r.id: folds.fold_of(r) for r in records}
    label_of = {r.id: r.class_index for r in records}
    trained = []
    for fold in range(folds.k):
        train_ids = [r.id for r in records if fold_of[r.id] != fold]
        test_ids = [r.id for r in records if fold_of[r.id] == fold]
        if not train_ids:
            raise DataError(f"fold {fold}: no training samples (all data held out)")
        rows, labels, tags = [], [], []
        for sid in train_ids:
            feats = features.features[sid]
            rows.append(feats)
            labels.extend([label_of[sid]] * len(feats))
            tags.extend([fold_of[sid]] * len(feats))
        # fold-tag bookkeeping: no held-out row may reach a gradient
        if any(t == fold for t in tags):
            raise RuntimeError(f"fold {fold}: held-out samples leaked into the training set")
        x = np.concatenate(rows)
        y = np.asarray(labels)

        params = init_head(model, cfg.seed)
        params, history = fit_head(x, y, params, cfg, np.random.default_rng([cfg.seed, fold]))
        train_acc = float(np.mean(np.argmax(head_forward(x, params), axis=1) == y))
        log.info("fold %d: %d training rows, final loss %.4f, train acc %.3f", fold, len(y), history[-1], train_acc)

        head = WeightArchive({s: params[s].astype(np.float32) for s in HEAD_SLOTS})
        if test_ids:
            test_x = np.stack([features.features[sid][0] for sid in test_ids])
            probs = head_forward(test_x.astype(np.float32), head)
        else:
            probs = np.zeros((0, len(LABELS)))
        trained.append(TrainedFold(fold, head, history, train_acc, frozenset(train_ids), tuple(test_ids), probs))

    fold_metrics = []
    for tf in trained:
        if not tf.test_ids:
            continue
        preds = np.argmax(tf.test_probs, axis=1)
        truths = [label_of[sid] for sid in tf.test_ids]
        fold_metrics.append(FoldMetrics(tf.fold, classification_metrics(preds, truths)))
    report = aggregate(fold_metrics)
    return HeadTrainingResult(trained, report, features)


def _with_placeholder_head(model, weights):
    slots = model.slots()
    return {**{s: np.empty(slots[s], np.float32) for s in HEAD_SLOTS}, **dict(weights.items())}
