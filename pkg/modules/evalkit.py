"""
Evaluation utilities: accuracy, confusion matrix, silhouette over semantic
features, pseudo-label diagnostics and embedding export.
"""

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np
from scipy.spatial.distance import cdist

from modules.cvnet import predict_logits
from modules.gradcore import softmax_array

logger = logging.getLogger(__name__)


@dataclass
class EvalResult:
    accuracy: float
    confusion: List[List[int]]
    silhouette: Optional[float]
    per_class_recall: List[float]
    pseudo_label_accuracy: Optional[float] = None
    pseudo_label_coverage: Optional[float] = None

    def to_dict(self):
        return asdict(self)

    def to_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


@dataclass
class PseudoLabelQuality:
    coverage: float
    accuracy: Optional[float]


def predict(logits):
    """argmax per row, ties to the lowest class index."""
    return np.argmax(np.asarray(logits), axis=1)


def confusion_from_logits(logits, labels, num_classes):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("cannot score an empty set")
    matrix = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(matrix, (labels, predict(logits)), 1)
    return matrix


def accuracy_from_logits(logits, labels):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("cannot score an empty set")
    return float(np.mean(predict(logits) == labels))


def accuracy(params, partition, batch_size=256):
    """Eval-mode accuracy on a labeled partition."""
    if len(partition) == 0:
        raise ValueError("cannot score an empty set")
    _, logits = predict_logits(params, partition.samples, batch_size)
    return accuracy_from_logits(logits, partition.labels)


def confusion(params, partition, batch_size=256):
    if len(partition) == 0:
        raise ValueError("cannot score an empty set")
    _, logits = predict_logits(params, partition.samples, batch_size)
    return confusion_from_logits(logits, partition.labels, params.config.num_classes)


def silhouette(features, labels):
    """Mean silhouette coefficient with Euclidean distance; singletons score 0."""
    x = np.asarray(features.data if hasattr(features, 'data') else features, dtype=np.float64)
    labels = np.asarray(labels)
    if x.shape[0] < 2:
        raise ValueError("silhouette needs at least two samples")
    clusters = np.unique(labels)
    if len(clusters) < 2:
        raise ValueError("silhouette needs at least two distinct labels")
    distances = cdist(x, x)
    members = labels[None, :] == clusters[:, None]          # [C, M]
    sizes = members.sum(axis=1)
    # mean distance of every sample to every cluster
    totals = distances @ members.T.astype(np.float64)        # [M, C]
    own = np.searchsorted(clusters, labels)
    rows = np.arange(x.shape[0])
    own_size = sizes[own]
    a = np.where(own_size > 1, totals[rows, own] / np.maximum(own_size - 1, 1), 0.0)
    means = totals / sizes[None, :]
    means[rows, own] = np.inf
    b = means.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where((own_size > 1) & (denom > 0), (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    return float(np.mean(s))


def pseudo_label_quality_from_logits(logits, true_labels, tau):
    q = softmax_array(np.asarray(logits, dtype=np.float64))
    accepted = q.max(axis=1) > tau
    total = len(true_labels)
    coverage = float(accepted.sum() / total) if total else 0.0
    if not accepted.any():
        return PseudoLabelQuality(coverage, None)
    hits = predict(logits)[accepted] == np.asarray(true_labels)[accepted]
    return PseudoLabelQuality(coverage, float(hits.mean()))


def pseudo_label_quality(params, unlabeled, diagnostic_labels, tau, batch_size=256):
    """Coverage of the tau gate and accuracy of the accepted pseudo-labels."""
    if diagnostic_labels is None:
        raise ValueError("pseudo-label quality needs the diagnostic labels of the unlabeled partition")
    if len(unlabeled) == 0:
        return PseudoLabelQuality(0.0, None)
    _, logits = predict_logits(params, unlabeled.samples, batch_size)
    return pseudo_label_quality_from_logits(logits, diagnostic_labels, tau)


def export_embeddings(params, partition, path, batch_size=256):
    """TSV of semantic features: header f0..f{D-1}, label; one row per sample."""
    if len(partition) == 0:
        raise ValueError("cannot export an empty partition")
    features, _ = predict_logits(params, partition.samples, batch_size)
    header = '\t'.join([f"f{i}" for i in range(features.shape[1])] + ['label'])
    table = np.column_stack([features, partition.labels])
    fmt = ['%.9g'] * features.shape[1] + ['%d']
    np.savetxt(path, table, fmt=fmt, delimiter='\t', header=header, comments='')
    logger.info(f"🧭 embeddings exported: {path} ({features.shape[0]} x {features.shape[1]})")
    return Path(path)


def evaluate(params, partition, batch_size=256, with_silhouette=True):
    """Accuracy, confusion, per-class recall and silhouette of one labeled partition."""
    if len(partition) == 0:
        raise ValueError("cannot score an empty set")
    features, logits = predict_logits(params, partition.samples, batch_size)
    matrix = confusion_from_logits(logits, partition.labels, params.config.num_classes)
    row_sums = matrix.sum(axis=1)
    recall = [float(matrix[k, k] / row_sums[k]) if row_sums[k] else 0.0 for k in range(len(matrix))]
    score = None
    if with_silhouette and len(np.unique(partition.labels)) >= 2:
        score = silhouette(features, partition.labels)
    return EvalResult(accuracy=float(np.trace(matrix) / matrix.sum()), confusion=matrix.tolist(),
                      silhouette=score, per_class_recall=recall)
