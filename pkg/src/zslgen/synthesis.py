"""Test-time feature synthesis and the quality-weighted classifiers.

Synthesis for one class replicates its attribute vector into a
single-class task, derives the modulation parameters, and runs the
generator in inference mode (dropout off, batch norm on running
statistics) with fresh noise per sample.

Every synthetic feature gets a quality score: the cosine similarity
between the class's true attribute vector and the decoder's
reconstruction from that exact feature. Scores weight the downstream
classifiers, instance-wise for the softmax classifier and class-wise
(mean score per class) for the linear SVM.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import networks as nets
from .autodiff import (
    Tape,
    Tensor,
    backward,
    cosine_similarity,
    elementwise_mul,
    reduce_sum,
    scalar_mul,
    softmax_cross_entropy,
    zero_grads,
)
from .datasets import Dataset, FeatureTable, save_binary
from .episodes import STREAM_CLASSIFIER, STREAM_SYNTHESIS, substream
from .networks import ModelState


class SynthesisError(Exception):
    pass


@dataclass(frozen=True)
class SyntheticSet:
    """Row-aligned synthetic features, their class labels, and per-sample
    quality scores in [-1, 1]."""

    features: np.ndarray
    labels: np.ndarray
    quality: np.ndarray

    def __post_init__(self):
        if not (len(self.features) == len(self.labels) == len(self.quality)):
            raise SynthesisError("features, labels and quality must be row-aligned")

    @property
    def class_ids(self) -> np.ndarray:
        return np.unique(self.labels)


@dataclass(frozen=True)
class QualityWeights:
    """Mean quality score per class id."""

    weights: dict[int, float]


def quality_score(attr: np.ndarray, recon: np.ndarray) -> float:
    """Cosine similarity between a true attribute vector and a
    reconstruction; 0 by convention when either vector is zero."""
    score = cosine_similarity(
        Tensor(np.asarray(attr, dtype=np.float64).reshape(1, -1)),
        Tensor(np.asarray(recon, dtype=np.float64).reshape(1, -1)),
    )
    return score.item()


def _quality_of(state: ModelState, features: np.ndarray, attr: np.ndarray) -> np.ndarray:
    recon = nets.reconstruct_attribute(state, features, train=False).values
    attrs = np.broadcast_to(attr.reshape(1, -1), recon.shape)
    return cosine_similarity(Tensor(attrs.copy()), Tensor(recon)).values[:, 0]


def synthesize_for_class(
    state: ModelState,
    class_id: int,
    class_attr: np.ndarray,
    count: int,
    sigma: float,
    n_way: int,
    rng: np.random.Generator,
) -> SyntheticSet:
    """Generate ``count`` features for one class from its attribute vector.

    The attribute is replicated ``n_way`` times to form the single-class
    task that conditions the modulation, matching the training-time task
    shape.
    """
    if sigma <= 0:
        raise SynthesisError(f"noise sigma must be > 0, got {sigma}")
    if count < 1:
        raise SynthesisError(f"count must be >= 1, got {count}")
    attr = np.asarray(class_attr, dtype=np.float64).reshape(1, -1)
    if attr.shape[1] != state.attr_dim:
        raise SynthesisError(f"attribute dim {attr.shape[1]}, model expects {state.attr_dim}")
    task_rows = np.repeat(attr, max(1, n_way), axis=0)
    embedding = nets.project_attributes(state, task_rows)
    mods = nets.compute_modulation(state, embedding)
    z = rng.normal(0.0, sigma, size=(count, state.z_dim))
    attrs = np.repeat(attr, count, axis=0)
    features = nets.generate(state, attrs, z, mods, train=False).values
    quality = _quality_of(state, features, attr)
    return SyntheticSet(
        features=features,
        labels=np.full(count, int(class_id), dtype=np.int64),
        quality=quality,
    )


def concat_sets(parts: list[SyntheticSet]) -> SyntheticSet:
    return SyntheticSet(
        features=np.vstack([p.features for p in parts]),
        labels=np.concatenate([p.labels for p in parts]),
        quality=np.concatenate([p.quality for p in parts]),
    )


def synthesize_classes(
    state: ModelState,
    dataset: Dataset,
    class_ids,
    count: int,
    sigma: float,
    n_way: int,
    seed: int,
) -> SyntheticSet:
    parts = []
    for c in sorted(int(c) for c in class_ids):
        rng = substream(seed, STREAM_SYNTHESIS, c)
        parts.append(
            synthesize_for_class(state, c, dataset.attributes.values[c], count, sigma, n_way, rng)
        )
    return concat_sets(parts)


def build_gzsl_training_set(
    state: ModelState,
    dataset: Dataset,
    count: int,
    sigma: float,
    n_way: int,
    seed: int,
    seen_mode: str = "synthetic",
) -> SyntheticSet:
    """Training pool for the generalized protocol.

    ``seen_mode='synthetic'`` synthesizes ``count`` features for every
    class. ``seen_mode='real'`` uses the real seen-class features instead
    (their quality is scored the same way, from the decoder's
    reconstruction of the real feature).
    """
    if seen_mode not in ("synthetic", "real"):
        raise SynthesisError(f"unknown gzsl seen mode {seen_mode!r}")
    unseen = synthesize_classes(state, dataset, dataset.split.unseen, count, sigma, n_way, seed)
    if seen_mode == "synthetic":
        seen = synthesize_classes(state, dataset, dataset.split.seen, count, sigma, n_way, seed)
        return concat_sets([seen, unseen])
    parts = [unseen]
    for c in sorted(dataset.split.seen):
        mask = dataset.labels == c
        feats = dataset.features.values[mask]
        quality = _quality_of(state, feats, dataset.attributes.values[c])
        parts.append(SyntheticSet(features=feats, labels=dataset.labels[mask], quality=quality))
    return concat_sets(parts)


def class_weights(synthetic: SyntheticSet) -> QualityWeights:
    """Mean quality per class."""
    weights = {}
    for c in synthetic.class_ids:
        mask = synthetic.labels == c
        if not mask.any():
            raise SynthesisError(f"class {c} has no samples")
        weights[int(c)] = float(synthetic.quality[mask].mean())
    if not weights:
        raise SynthesisError("empty synthetic set")
    return QualityWeights(weights)


def export_synthetic(synthetic: SyntheticSet, features_path, labels_path, quality_path=None) -> None:
    save_binary(FeatureTable(synthetic.features), features_path)
    save_binary(synthetic.labels, labels_path)
    if quality_path is not None:
        with open(quality_path, "w", encoding="utf-8") as fh:
            for q in synthetic.quality:
                fh.write(f"{float(q)!r}\n")


# ---------------------------------------------------------------------------
# Quality-weighted softmax classifier: two affine layers and a softmax,
# each sample's cross entropy scaled by its own quality score.
# ---------------------------------------------------------------------------


@dataclass
class SoftmaxClassifier:
    class_ids: tuple[int, ...]
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def logits(self, features: np.ndarray) -> np.ndarray:
        from .autodiff import affine, leaky_relu

        h = leaky_relu(affine(Tensor(features), self.w1, self.b1), 0.5)
        return affine(h, self.w2, self.b2).values


@dataclass
class LinearSvmClassifier:
    class_ids: tuple[int, ...]
    weights: np.ndarray  # n_classes x feat_dim
    bias: np.ndarray     # n_classes

    def scores(self, features: np.ndarray) -> np.ndarray:
        return features @ self.weights.T + self.bias


def _sample_weights(synthetic: SyntheticSet, weighted: bool, allow_negative: bool) -> np.ndarray:
    if not weighted:
        return np.ones(len(synthetic.labels))
    w = synthetic.quality.copy()
    if not allow_negative:
        w = np.maximum(w, 0.0)
    if np.all(w <= 0):
        raise SynthesisError("all sample weights are non-positive; nothing to train on")
    return w


def train_softmax_classifier(
    synthetic: SyntheticSet,
    class_ids,
    epochs: int = 20,
    lr: float = 1e-2,
    hidden: int = 256,
    batch_size: int = 64,
    seed: int = 0,
    weighted: bool = True,
    allow_negative_quality: bool = False,
) -> SoftmaxClassifier:
    """Minibatch-Adam training of the two-layer softmax classifier with
    per-sample quality weighting (weights of 1.0 reproduce the unweighted
    classifier exactly)."""
    class_ids = tuple(sorted(int(c) for c in class_ids))
    index = {c: i for i, c in enumerate(class_ids)}
    try:
        labels = np.array([index[int(c)] for c in synthetic.labels], dtype=np.int64)
    except KeyError as err:
        raise SynthesisError(f"label {err.args[0]} not in classifier label space") from None
    weights = _sample_weights(synthetic, weighted, allow_negative_quality)
    feat_dim = synthetic.features.shape[1]
    rng = substream(seed, STREAM_CLASSIFIER, 0)

    def glorot(fi, fo):
        bound = np.sqrt(6.0 / (fi + fo))
        return rng.uniform(-bound, bound, size=(fi, fo))

    params = [
        Tensor(glorot(feat_dim, hidden), requires_grad=True),
        Tensor(np.zeros((1, hidden)), requires_grad=True),
        Tensor(glorot(hidden, len(class_ids)), requires_grad=True),
        Tensor(np.zeros((1, len(class_ids))), requires_grad=True),
    ]
    clf = SoftmaxClassifier(class_ids, *params)
    n = len(labels)
    slots_m = [np.zeros(p.shape) for p in params]
    slots_v = [np.zeros(p.shape) for p in params]
    t = 0
    from .autodiff import affine, leaky_relu

    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            x = synthetic.features[idx]
            y = labels[idx]
            w = weights[idx].reshape(-1, 1)
            tape = Tape()
            with tape:
                h = leaky_relu(affine(Tensor(x), clf.w1, clf.b1), 0.5)
                logits = affine(h, clf.w2, clf.b2)
                per_sample = softmax_cross_entropy(logits, y, reduction="none")
                loss = scalar_mul(reduce_sum(elementwise_mul(per_sample, Tensor(w))), 1.0 / len(idx))
            backward(tape, loss)
            t += 1
            for p, m, v in zip(params, slots_m, slots_v):
                g = p.grad
                m[:] = 0.9 * m + 0.1 * g
                v[:] = 0.999 * v + 0.001 * g * g
                m_hat = m / (1 - 0.9 ** t)
                v_hat = v / (1 - 0.999 ** t)
                p.values -= lr * m_hat / (np.sqrt(v_hat) + 1e-8)
            zero_grads(params)
    return clf


def weighted_softmax_loss(features, labels, weights, params: list[Tensor]) -> Tensor:
    """The classifier's training objective as a tape expression (exposed
    for gradient checking): mean over samples of quality * cross entropy."""
    from .autodiff import affine, leaky_relu

    w1, b1, w2, b2 = params
    h = leaky_relu(affine(Tensor(features), w1, b1), 0.5)
    logits = affine(h, w2, b2)
    per_sample = softmax_cross_entropy(logits, labels, reduction="none")
    w = np.asarray(weights, dtype=np.float64).reshape(-1, 1)
    return scalar_mul(reduce_sum(elementwise_mul(per_sample, Tensor(w))), 1.0 / len(labels))


# ---------------------------------------------------------------------------
# Class-weighted one-vs-rest linear SVM trained by full-batch subgradient
# descent on the hinge objective.
# ---------------------------------------------------------------------------


def train_svm_classifier(
    synthetic: SyntheticSet,
    weights: QualityWeights | None = None,
    reg_c: float = 1.0,
    epochs: int = 100,
    lr: float = 0.1,
    clip_negative: bool = True,
) -> LinearSvmClassifier:
    """One scorer per class on +-1 hinge loss; a class's positive examples
    are scaled by its weight, negatives count with weight 1. L2
    regularization ``reg_c`` applies to the weight vectors only."""
    class_ids = tuple(sorted(int(c) for c in np.unique(synthetic.labels)))
    if len(class_ids) < 2:
        raise SynthesisError("svm training needs at least two classes")
    feats = synthetic.features
    n, feat_dim = feats.shape
    w_class = np.ones(len(class_ids))
    if weights is not None:
        for i, c in enumerate(class_ids):
            if c not in weights.weights:
                raise SynthesisError(f"missing class weight for class {c}")
            w_class[i] = weights.weights[c]
        if clip_negative:
            w_class = np.maximum(w_class, 0.0)
        if np.all(w_class <= 0):
            raise SynthesisError("all class weights are non-positive")
    W = np.zeros((len(class_ids), feat_dim))
    b = np.zeros(len(class_ids))
    targets = np.where(
        synthetic.labels.reshape(-1, 1) == np.array(class_ids).reshape(1, -1), 1.0, -1.0
    )
    sample_w = np.where(targets > 0, w_class.reshape(1, -1), 1.0)
    for _ in range(epochs):
        scores = feats @ W.T + b
        margin_active = (1.0 - targets * scores) > 0
        coeff = sample_w * targets * margin_active  # n x classes
        grad_W = reg_c * W - (coeff.T @ feats) / n
        grad_b = -coeff.sum(axis=0) / n
        W -= lr * grad_W
        b -= lr * grad_b
    return LinearSvmClassifier(class_ids, W, b)


def predict(classifier, features: np.ndarray) -> np.ndarray:
    """Argmax class id per row; ties resolve to the lowest class id."""
    if isinstance(classifier, SoftmaxClassifier):
        scores = classifier.logits(features)
    elif isinstance(classifier, LinearSvmClassifier):
        scores = classifier.scores(features)
    else:
        raise SynthesisError(f"unknown classifier type {type(classifier).__name__}")
    ids = np.array(classifier.class_ids)
    return ids[np.argmax(scores, axis=1)]
