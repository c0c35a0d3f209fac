"""
Objective components for metric-adversarial semi-supervised training.

Supervised terms (CE, center, proxy-anchor) and their semi-supervised forms
that add confidence-gated pseudo-labeled unlabeled samples, the KL/LDS/VAT
smoothness regularizer, and the learnable-uncertainty weighting that combines
terms without hand-tuned coefficients.

Pseudo-labels and VAT directions are constants: no gradient flows through
their selection.
"""

import logging
from dataclasses import dataclass

import numpy as np

from modules.gradcore import (Tensor, as_tensor, clip_min, dense, exp, log,
                              log1p_sum_exp, log_softmax, log_softmax_array, no_grad,
                              softmax_array, sqrt, tsum)

logger = logging.getLogger(__name__)

COSINE_NORM_FLOOR = 1e-12
KL_Q_FLOOR = 1e-12
DISTRIBUTION_TOL = 1e-6


@dataclass(frozen=True)
class PseudoLabelBatch:
    labels: np.ndarray
    confidence: np.ndarray
    accepted: np.ndarray

    @property
    def size(self):
        return self.labels.shape[0]

    @property
    def accepted_count(self):
        return int(self.accepted.sum())

    @property
    def coverage(self):
        return self.accepted_count / self.size if self.size else 0.0


class LossWeights:
    """Per-term uncertainty weights sigma_i = exp(rho_i), rho initialised at 0."""

    def __init__(self, names, prefix):
        self.names = tuple(names)
        self.prefix = prefix
        self.rho = {name: Tensor(0.0, requires_grad=True, name=f"sigma/{prefix}/{name}")
                    for name in self.names}

    @property
    def params(self):
        return {t.name: t for t in self.rho.values()}

    def sigmas(self):
        return {name: float(np.exp(t.data)) for name, t in self.rho.items()}


def _zero():
    return Tensor(0.0)


def _check_labels(labels, num_classes):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    return labels


def ce_loss(logits_l, labels_l):
    """Mean cross-entropy of labeled logits."""
    logits_l = as_tensor(logits_l)
    count, num_classes = logits_l.shape
    if count < 1:
        raise ValueError("ce_loss needs at least one labeled sample")
    labels = _check_labels(labels_l, num_classes)
    picked = log_softmax(logits_l)[np.arange(count), labels]
    return -picked.sum() / float(count)


def compute_pseudo_labels(logits_ul, tau):
    """argmax pseudo-labels (ties to the lowest class) gated by max(q) > tau."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must be in [0, 1], got {tau}")
    data = logits_ul.data if isinstance(logits_ul, Tensor) else np.asarray(logits_ul, dtype=np.float64)
    if data.shape[0] == 0:
        empty = np.zeros(0)
        return PseudoLabelBatch(empty.astype(np.int64), empty, empty.astype(bool))
    q = softmax_array(data)
    labels = np.argmax(q, axis=1)
    confidence = q.max(axis=1)
    return PseudoLabelBatch(labels.astype(np.int64), confidence, confidence > tau)


def _has_unlabeled(features_ul, pseudo):
    return features_ul is not None and pseudo is not None and pseudo.accepted_count > 0


def ss_ce_loss(logits_l, labels_l, logits_ul, pseudo):
    """CE over labeled plus gated CE of unlabeled against pseudo-labels, divided by the full U."""
    supervised = ce_loss(logits_l, labels_l)
    if not _has_unlabeled(logits_ul, pseudo):
        return supervised
    logits_ul = as_tensor(logits_ul)
    idx = np.flatnonzero(pseudo.accepted)
    picked = log_softmax(logits_ul)[idx, pseudo.labels[idx]]
    return supervised + (-picked.sum()) / float(pseudo.size)


def center_loss(features, labels, centers):
    """(1/2L) sum ||z_i - c_{y_i}||^2."""
    features, centers = as_tensor(features), as_tensor(centers)
    count = features.shape[0]
    if count == 0:
        return _zero()
    labels = _check_labels(labels, centers.shape[0])
    diff = features - centers[labels]
    return (diff * diff).sum() / (2.0 * count)


def ss_center_loss(features_l, labels_l, features_ul, pseudo, centers):
    supervised = center_loss(features_l, labels_l, centers)
    if not _has_unlabeled(features_ul, pseudo):
        return supervised
    centers = as_tensor(centers)
    idx = np.flatnonzero(pseudo.accepted)
    diff = as_tensor(features_ul)[idx] - centers[pseudo.labels[idx]]
    return supervised + (diff * diff).sum() / (2.0 * pseudo.size)


def l2_normalize_rows(x, what):
    x = as_tensor(x)
    norms = np.sqrt((x.data ** 2).sum(axis=1))
    if x.shape[0] and norms.min() < COSINE_NORM_FLOOR:
        raise ValueError(f"cosine similarity undefined: a {what} row has norm {norms.min():.3g}")
    return x / sqrt(tsum(x * x, axis=1, keepdims=True))


def cosine_matrix(features, proxies):
    """s[i, p] = cos(z_i, proxy_p)."""
    return dense(l2_normalize_rows(features, 'feature'), l2_normalize_rows(proxies, 'proxy'))


def proxy_anchor_loss(features_l, labels_l, proxies, alpha, delta):
    """Proxy-anchor loss over cosine similarities.

    Positive term averaged over proxies with at least one positive sample in
    the batch, negative term averaged over all proxies.
    """
    if alpha <= 0 or delta < 0:
        raise ValueError(f"proxy-anchor needs alpha > 0 and delta >= 0, got {alpha}, {delta}")
    features, proxies = as_tensor(features_l), as_tensor(proxies)
    if features.shape[0] == 0:
        return _zero()
    num_proxies = proxies.shape[0]
    labels = _check_labels(labels_l, num_proxies)
    s = cosine_matrix(features, proxies)
    pos_mask = labels[:, None] == np.arange(num_proxies)[None, :]
    with_pos = int(pos_mask.any(axis=0).sum())
    pos = log1p_sum_exp((s - delta) * (-alpha), pos_mask, axis=0).sum() / float(with_pos)
    neg = log1p_sum_exp((s + delta) * alpha, ~pos_mask, axis=0).sum() / float(num_proxies)
    return pos + neg


def ss_proxy_anchor_loss(features_l, labels_l, features_ul, pseudo, proxies, alpha, delta):
    """Labeled proxy-anchor plus the same two terms over accepted unlabeled samples."""
    supervised = proxy_anchor_loss(features_l, labels_l, proxies, alpha, delta)
    if not _has_unlabeled(features_ul, pseudo):
        return supervised
    idx = np.flatnonzero(pseudo.accepted)
    return supervised + proxy_anchor_loss(as_tensor(features_ul)[idx], pseudo.labels[idx],
                                          proxies, alpha, delta)


def _check_distribution(p, what):
    sums = p.sum(axis=1)
    if p.size and (np.any(p < 0) or np.max(np.abs(sums - 1.0)) > DISTRIBUTION_TOL):
        raise ValueError(f"{what} rows are not probability distributions")


def _plogp(p):
    return np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)


def kl_divergence(p, q):
    """Batch mean of sum p log(p / q); p is a constant target, q is clamped at 1e-12."""
    p = p.data if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64)
    q = as_tensor(q)
    if p.shape != q.shape:
        raise ValueError(f"KL operands differ in shape: {p.shape} vs {q.shape}")
    _check_distribution(p, 'p')
    _check_distribution(q.data, 'q')
    count = p.shape[0]
    cross = tsum(log(clip_min(q, KL_Q_FLOOR)) * p)
    return (float(_plogp(p).sum()) - cross) / float(count)


def kl_from_logits(clean_logits, adv_logits):
    """KL(softmax(clean) || softmax(adv)) through log-softmax on both sides; clean is constant."""
    log_p = log_softmax_array(np.asarray(clean_logits, dtype=np.float64))
    p = np.exp(log_p)
    count = p.shape[0]
    cross = tsum(log_softmax(adv_logits) * p)
    return (float((p * log_p).sum()) - cross) / float(count)


def _unit_rows(d):
    flat = d.reshape(d.shape[0], -1)
    norms = np.sqrt((flat ** 2).sum(axis=1))
    return norms, flat


def _normalize_per_sample(d):
    norms, flat = _unit_rows(d)
    return (flat / norms[:, None]).reshape(d.shape)


def vat_perturbation(logits_fn, batch, epsilon, xi, power_iters, rng, stats=None):
    """Virtual adversarial direction of length epsilon per sample.

    ``logits_fn`` maps an input Tensor to logits. The power iteration runs a
    backward pass, so parameter ``.grad`` buffers reachable from ``logits_fn``
    are written to; callers zero them before computing their own loss.
    Samples whose gradient vanished keep their previous direction; their count
    is added to ``stats["vanished"]`` when a dict is passed.
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")
    if power_iters < 1:
        raise ValueError(f"power_iters must be >= 1, got {power_iters}")
    x = np.asarray(batch.data if isinstance(batch, Tensor) else batch, dtype=np.float64)
    with no_grad():
        clean = logits_fn(Tensor(x)).data
    d = _normalize_per_sample(rng.normal(size=x.shape))
    for _ in range(power_iters):
        r = Tensor(xi * d, requires_grad=True)
        divergence = kl_from_logits(clean, logits_fn(Tensor(x) + r))
        divergence.backward()
        grad = r.grad if r.grad is not None else np.zeros_like(d)
        norms, flat = _unit_rows(grad)
        usable = np.isfinite(norms) & (norms > 0)
        if not usable.all():
            vanished = int((~usable).sum())
            logger.debug(f"VAT gradient vanished for {vanished} samples; keeping their current direction")
            if stats is not None:
                stats['vanished'] = stats.get('vanished', 0) + vanished
        safe = np.where(usable, norms, 1.0)
        updated = (flat / safe[:, None]).reshape(x.shape)
        d = np.where(usable.reshape((-1,) + (1,) * (x.ndim - 1)), updated, d)
    return epsilon * d


def lds(logits_fn, batch, perturbation):
    """KL(q(r) || q(r + p)) with q(r) evaluated as a constant at the current weights."""
    x = np.asarray(batch.data if isinstance(batch, Tensor) else batch, dtype=np.float64)
    perturbation = np.asarray(perturbation, dtype=np.float64)
    if perturbation.shape != x.shape:
        raise ValueError(f"perturbation shape {perturbation.shape} does not match batch {x.shape}")
    with no_grad():
        clean = logits_fn(Tensor(x)).data
    return kl_from_logits(clean, logits_fn(Tensor(x + perturbation)))


def vat_loss(logits_fn, labeled_batch, unlabeled_batch, epsilon, xi, power_iters, rng):
    """Mean LDS over the concatenation of both batches."""
    parts = [np.asarray(b, dtype=np.float64) for b in (labeled_batch, unlabeled_batch)
             if b is not None and len(b)]
    if not parts:
        raise ValueError("vat_loss needs at least one sample")
    x = np.concatenate(parts, axis=0)
    perturbation = vat_perturbation(logits_fn, x, epsilon, xi, power_iters, rng)
    return lds(logits_fn, x, perturbation)


def auto_weighted_sum(terms, weights):
    """sum_i L_i / (2 sigma_i^2) + ln(1 + sigma_i^2) with sigma_i = exp(rho_i)."""
    if len(terms) != len(weights.names):
        raise ValueError(f"{len(terms)} loss terms for {len(weights.names)} weights {weights.names}")
    total = None
    for term, name in zip(terms, weights.names):
        sigma_sq = exp(weights.rho[name] * 2.0)
        piece = as_tensor(term) / (sigma_sq * 2.0) + log(sigma_sq + 1.0)
        total = piece if total is None else total + piece
    return total


def metric_term(metric, features_l, labels_l, features_ul, pseudo, metric_params, alpha, delta,
                semi_supervised=True):
    """Center or proxy-anchor term, semi-supervised unless told otherwise.

    Returns (name, loss) where name is the report key of the term.
    """
    if metric == 'center':
        if semi_supervised:
            return 'ss_center', ss_center_loss(features_l, labels_l, features_ul, pseudo, metric_params)
        return 'center', center_loss(features_l, labels_l, metric_params)
    if metric == 'proxy_anchor':
        if semi_supervised:
            return 'ss_proxy_anchor', ss_proxy_anchor_loss(features_l, labels_l, features_ul, pseudo,
                                                           metric_params, alpha, delta)
        return 'proxy_anchor', proxy_anchor_loss(features_l, labels_l, metric_params, alpha, delta)
    raise ValueError(f"unknown metric '{metric}'")


def init_metric_params(metric, num_classes, feature_dim, seed):
    """Centers start at zero; proxies are drawn from N(0, 2/D) (kaiming-normal scale)."""
    if metric == 'center':
        return {'centers': Tensor(np.zeros((num_classes, feature_dim)), requires_grad=True, name='centers')}
    if metric == 'proxy_anchor':
        rng = np.random.default_rng([seed, 0xA4])
        data = rng.normal(0.0, np.sqrt(2.0 / feature_dim), size=(num_classes, feature_dim))
        return {'proxies': Tensor(data, requires_grad=True, name='proxies')}
    if metric == 'none':
        return {}
    raise ValueError(f"unknown metric '{metric}'")
