"""Evaluation protocols: per-class top-1 accuracy, generalized-setting
seen/unseen/harmonic summaries, retrieval precision, and feature export.

Accuracies are per class then averaged over classes (unweighted), which
keeps imbalanced class sizes from dominating. The harmonic mean follows
H = 2*U*S / (U + S) on percent-scale inputs, with H = 0 when both are 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datasets import Dataset, FeatureTable, save_binary
from .episodes import STREAM_SYNTHESIS, substream
from .networks import ModelState


class EvalError(Exception):
    pass


@dataclass(frozen=True)
class EvalReport:
    per_class_acc: dict[int, float]
    mean_acc: float
    seen_acc: float | None = None
    unseen_acc: float | None = None
    harmonic: float | None = None


@dataclass(frozen=True)
class RetrievalReport:
    per_class: dict[int, dict[int, float]]  # class -> {k: precision}
    mean_precision: dict[int, float]        # k -> mean over classes


def per_class_top1(predictions, true_labels, class_set) -> EvalReport:
    """Accuracy within each class of ``class_set``, then the unweighted
    mean over classes."""
    preds = np.asarray(predictions)
    labels = np.asarray(true_labels)
    if preds.shape != labels.shape:
        raise EvalError(f"predictions {preds.shape} vs labels {labels.shape}")
    classes = sorted(int(c) for c in class_set)
    if not classes:
        raise EvalError("empty class set")
    per_class = {}
    for c in classes:
        mask = labels == c
        if not mask.any():
            raise EvalError(f"class {c} has no samples to evaluate")
        per_class[c] = float((preds[mask] == c).mean())
    return EvalReport(per_class_acc=per_class, mean_acc=float(np.mean(list(per_class.values()))))


def gzsl_harmonic(unseen_acc: float, seen_acc: float) -> float:
    """Harmonic mean of the unseen and seen accuracies (percent scale)."""
    if unseen_acc < 0 or seen_acc < 0:
        raise EvalError("accuracies must be non-negative")
    if unseen_acc + seen_acc == 0:
        return 0.0
    return 2.0 * unseen_acc * seen_acc / (unseen_acc + seen_acc)


def gzsl_report(predictions, true_labels, dataset: Dataset, percent: bool = True) -> EvalReport:
    """Combined report over seen and unseen classes of the dataset."""
    scale = 100.0 if percent else 1.0
    seen = per_class_top1(predictions, true_labels, dataset.split.seen)
    unseen = per_class_top1(predictions, true_labels, dataset.split.unseen)
    per_class = {**seen.per_class_acc, **unseen.per_class_acc}
    s, u = scale * seen.mean_acc, scale * unseen.mean_acc
    return EvalReport(
        per_class_acc={c: scale * a for c, a in per_class.items()},
        mean_acc=float(scale * np.mean(list(per_class.values()))),
        seen_acc=s,
        unseen_acc=u,
        harmonic=gzsl_harmonic(u, s),
    )


def retrieval_eval(
    state: ModelState,
    dataset: Dataset,
    ks=(5, 10),
    samples_per_class: int = 100,
    sigma: float = 1.0,
    n_way: int = 10,
    seed: int = 0,
    metric: str = "euclidean",
    pool: str = "unseen",
) -> RetrievalReport:
    """Per unseen class: synthesize features, average them into one
    representative, rank the real image pool by distance to it, and score
    precision@k against the class's ground-truth labels."""
    from .synthesis import synthesize_for_class

    if metric not in ("euclidean", "cosine"):
        raise EvalError(f"unknown retrieval metric {metric!r}")
    if pool == "unseen":
        pool_mask = np.isin(dataset.labels, sorted(dataset.split.unseen))
    elif pool == "all":
        pool_mask = np.ones(dataset.n_images, dtype=bool)
    else:
        raise EvalError(f"unknown retrieval pool {pool!r}")
    pool_feats = dataset.features.values[pool_mask]
    pool_labels = dataset.labels[pool_mask]
    if max(ks) > len(pool_labels):
        raise EvalError(f"k={max(ks)} exceeds pool size {len(pool_labels)}")

    per_class: dict[int, dict[int, float]] = {}
    for c in sorted(dataset.split.unseen):
        rng = substream(seed, STREAM_SYNTHESIS, c)
        synth = synthesize_for_class(
            state, c, dataset.attributes.values[c], samples_per_class, sigma, n_way, rng
        )
        representative = synth.features.mean(axis=0)
        if metric == "euclidean":
            dists = np.linalg.norm(pool_feats - representative, axis=1)
        else:
            denom = np.linalg.norm(pool_feats, axis=1) * np.linalg.norm(representative)
            denom = np.where(denom == 0, 1.0, denom)
            dists = 1.0 - (pool_feats @ representative) / denom
        order = np.argsort(dists, kind="stable")
        per_class[c] = {
            int(k): float((pool_labels[order[:k]] == c).mean()) for k in ks
        }
    mean_precision = {
        int(k): float(np.mean([per_class[c][int(k)] for c in per_class])) for k in ks
    }
    return RetrievalReport(per_class=per_class, mean_precision=mean_precision)


def export_features(features: np.ndarray, labels: np.ndarray, features_path, labels_path) -> None:
    """Feature and label files for external embedding/visualization tools."""
    if len(features) == 0:
        raise EvalError("nothing to export")
    if len(features) != len(labels):
        raise EvalError(f"{len(features)} feature rows vs {len(labels)} labels")
    save_binary(FeatureTable(np.asarray(features, dtype=np.float64)), features_path)
    save_binary(np.asarray(labels), labels_path)


def format_report(report: EvalReport, extra: dict | None = None) -> str:
    """Human-readable per-class rows plus a machine-readable key=value
    summary block."""
    lines = ["class\taccuracy"]
    for c in sorted(report.per_class_acc):
        lines.append(f"{c}\t{report.per_class_acc[c]:.2f}")
    lines.append("")
    lines.append("[summary]")
    lines.append(f"mean_acc = {report.mean_acc:.2f}")
    if report.seen_acc is not None:
        lines.append(f"seen_acc = {report.seen_acc:.2f}")
        lines.append(f"unseen_acc = {report.unseen_acc:.2f}")
        lines.append(f"harmonic = {report.harmonic:.2f}")
    for key, value in (extra or {}).items():
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def format_retrieval_report(report: RetrievalReport, extra: dict | None = None) -> str:
    ks = sorted(report.mean_precision)
    lines = ["class\t" + "\t".join(f"precision@{k}" for k in ks)]
    for c in sorted(report.per_class):
        row = [str(c)] + [f"{report.per_class[c][k]:.4f}" for k in ks]
        lines.append("\t".join(row))
    lines.append("")
    lines.append("[summary]")
    for k in ks:
        lines.append(f"mean_precision_at_{k} = {report.mean_precision[k]:.4f}")
    for key, value in (extra or {}).items():
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
