"""Separability probes on frozen intermediate representations.

``linear_probe`` fits a multinomial logistic regression on features averaged
to 2x2; ``cnn_p_probe`` trains a fresh ``p``-hidden-layer convolutional
head (built like an auxiliary head with ``k = p + 1``).
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .architecture import AuxSpec, init_head
from .errors import NumericError
from .numerics import OptState, adaptive_avg_2x2, softmax_cross_entropy, step_decay_lr

log = logging.getLogger(__name__)


@dataclass
class ProbeReport:
    layer: int | None
    kind: str
    p: int
    width: int | None
    train_acc: float
    test_acc: float | None
    seed: int
    epochs: int = 0
    converged: bool = True
    failed: bool = False
    warnings: list = field(default_factory=list)

    def __post_init__(self):
        for acc in (self.train_acc, self.test_acc):
            if acc is not None and not np.isnan(acc) and not 0 <= acc <= 100:
                raise ValueError(f"accuracy {acc} outside [0, 100]")

    def to_dict(self):
        return asdict(self)

    def record(self):
        """Metrics-stream form; ``kind`` there tags the record type."""
        rec = self.to_dict()
        rec["probe_kind"] = rec.pop("kind")
        return {"kind": "probe", **rec}


def _data(cache):
    return cache if isinstance(cache, np.ndarray) else cache.data


def pooled_features(feats, batch=1000):
    """``A``-average to 2x2 and flatten, in float64."""
    feats = _data(feats)
    parts = [adaptive_avg_2x2(feats[i:i + batch].astype(np.float64)) for i in range(0, len(feats), batch)]
    return np.concatenate(parts).reshape(len(feats), -1)


def _top_eigenvalue(gram, iters=100, seed=0):
    v = np.random.default_rng(seed).standard_normal(gram.shape[0])
    lam = 0.0
    for _ in range(iters):
        w = gram @ v
        norm = np.linalg.norm(w)
        if norm == 0:
            return 0.0
        v = w / norm
        if abs(norm - lam) <= 1e-10 * norm:
            lam = norm
            break
        lam = norm
    return lam


def fit_softmax_regression(x, labels, classes, tol=1e-6, max_epochs=500, momentum=0.9):
    """Full-batch heavy-ball gradient descent on the multinomial logistic loss.

    Returns ``(weight (d+1, classes), epochs, converged)``; the last row of
    ``weight`` is the intercept.
    """
    n = len(x)
    xb = np.hstack([x, np.ones((n, 1))])
    # the softmax loss has curvature at most |x|^2 / 2 along any direction
    lipschitz = _top_eigenvalue(xb.T @ xb / n) / 2
    step = 1.0 / max(lipschitz, 1e-12)
    w = np.zeros((xb.shape[1], classes))
    vel = np.zeros_like(w)
    prev = np.inf
    for epoch in range(1, max_epochs + 1):
        s = xb @ w
        loss, grad_logits = softmax_cross_entropy(s, labels)
        if abs(prev - loss) < tol:
            return w, epoch, True
        prev = loss
        vel = momentum * vel - step * (xb.T @ grad_logits)
        w = w + vel
    return w, max_epochs, False


def linear_probe(train_feats, train_labels, test_feats=None, test_labels=None, layer=None, seed=0,
                 classes=None, tol=1e-6, max_epochs=500):
    """Linear separability of a representation (accuracies in percent)."""
    warnings = []
    xtr = pooled_features(train_feats)
    classes = classes or int(train_labels.max()) + 1
    mean, std = xtr.mean(axis=0), xtr.std(axis=0)
    dead = std == 0
    if dead.all():
        warnings.append("all features constant; probe reduces to the class prior")
    elif dead.any():
        warnings.append(f"{int(dead.sum())} constant feature(s) ignored")
    std[dead] = 1.0
    xtr = (xtr - mean) / std
    w, epochs, converged = fit_softmax_regression(xtr, train_labels, classes, tol, max_epochs)
    if not converged:
        warnings.append(f"no convergence within {max_epochs} epochs")
    for msg in warnings:
        log.warning("linear probe (layer %s): %s", layer, msg)

    def accuracy(x, y):
        scores = np.hstack([x, np.ones((len(x), 1))]) @ w
        return 100.0 * float((scores.argmax(axis=1) == y).mean())

    test_acc = None
    if test_feats is not None:
        test_acc = accuracy((pooled_features(test_feats) - mean) / std, test_labels)
    return ProbeReport(layer, "linear", 0, None, accuracy(xtr, train_labels), test_acc, seed, epochs,
                       converged, warnings=warnings)


def cnn_p_probe(train_feats, train_labels, test_feats=None, test_labels=None, p=1, width=256, layer=None,
                seed=0, epochs=30, lr=0.1, lr_decay=0.2, lr_period=9, batch_size=128, momentum=0.9,
                batchnorm=True, classes=None):
    """CNN-``p`` separability: accuracy of a fresh ``p``-hidden-layer CNN on frozen features."""
    from .trainer import head_accuracy, minibatches, run_epoch

    if p not in (1, 2):
        raise ValueError(f"p must be 1 or 2, got {p}")
    xtr = _data(train_feats)
    classes = classes or int(train_labels.max()) + 1
    spec = AuxSpec(p + 1, xtr.shape[1], width, batchnorm, classes)
    warnings = []
    for attempt, rate in enumerate((lr, lr / 10)):
        rng = np.random.default_rng(seed)
        head = init_head(spec, rng)
        state = OptState(lr=rate)
        try:
            for epoch in range(epochs):
                step = step_decay_lr(epoch, rate, lr_decay, lr_period)
                run_epoch(None, head, minibatches(xtr, train_labels, batch_size, rng), state, step, momentum)
                if not all(np.isfinite(v).all() for v in head.params().values()):
                    raise NumericError("non-finite probe parameters")
        except NumericError as exc:
            warnings.append(f"diverged at lr {rate:g}: {exc}")
            log.warning("cnn-%d probe (layer %s) %s", p, layer, warnings[-1])
            continue
        train_acc = head_accuracy(None, head, xtr, train_labels)
        test_acc = head_accuracy(None, head, _data(test_feats), test_labels) if test_feats is not None else None
        return ProbeReport(layer, "cnn", p, width, train_acc, test_acc, seed, epochs, warnings=warnings)
    return ProbeReport(layer, "cnn", p, width, float("nan"), None, seed, epochs, False, True, warnings)
