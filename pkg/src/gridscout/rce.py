"""Regularized cross-entropy: labeled-pixel cross-entropy blended with an
entropy penalty on unlabeled pixels.

J = rho * mean_{labeled} CE + (1 - rho) * mean_{unlabeled} H(softmax),
where rho is the exact labeled fraction. Both terms are masked means (an
empty mask contributes 0), logs are natural, and softmax goes through
log-sum-exp. Pure numerics only -- no training loop lives here; the
analytic gradient exists so the loss is checkable against finite
differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp


@dataclass
class RceBatch:
    """Per-pixel class logits with a (possibly partial) labeling.

    ``targets`` is read only where ``labeled`` is True; unlabeled pixels are
    exactly the complement, so the two masks are disjoint and cover the
    batch by construction.
    """

    logits: np.ndarray  # (n_pixels, n_classes)
    targets: np.ndarray  # (n_pixels,) class indices, meaningful where labeled
    labeled: np.ndarray  # (n_pixels,) bool

    def __post_init__(self) -> None:
        self.logits = np.asarray(self.logits, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.int64)
        self.labeled = np.asarray(self.labeled, dtype=bool)
        if self.logits.ndim != 2 or self.logits.shape[1] < 2:
            raise ValueError("logits must be (n_pixels, n_classes) with n_classes >= 2")
        n = self.logits.shape[0]
        if n == 0:
            raise ValueError("batch has no pixels at all")
        if self.targets.shape != (n,) or self.labeled.shape != (n,):
            raise ValueError("targets and labeled mask must have one entry per pixel")
        lab = self.targets[self.labeled]
        if lab.size and (lab.min() < 0 or lab.max() >= self.logits.shape[1]):
            raise ValueError("labeled targets outside the class range")

    @property
    def unlabeled(self) -> np.ndarray:
        return ~self.labeled

    @property
    def rho(self) -> float:
        """Exact labeled fraction |Y_L| / N."""
        return float(self.labeled.sum()) / self.labeled.size


@dataclass
class RceValue:
    total: float
    ce_term: float
    entropy_term: float
    rho: float


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    return logits - logsumexp(logits, axis=1, keepdims=True)


def _entropy(log_probs: np.ndarray) -> np.ndarray:
    probs = np.exp(log_probs)
    plogp = np.where(probs > 0, probs * log_probs, 0.0)
    return -plogp.sum(axis=1)


def rce_loss(batch: RceBatch) -> RceValue:
    """Evaluate the blended loss; see module docstring for the formula."""
    log_probs = _log_softmax(batch.logits)
    labeled = batch.labeled
    if labeled.any():
        picked = log_probs[np.flatnonzero(labeled), batch.targets[labeled]]
        ce = float(-picked.mean())
    else:
        ce = 0.0
    unlabeled = batch.unlabeled
    entropy = float(_entropy(log_probs[unlabeled]).mean()) if unlabeled.any() else 0.0
    rho = batch.rho
    return RceValue(
        total=rho * ce + (1.0 - rho) * entropy,
        ce_term=ce,
        entropy_term=entropy,
        rho=rho,
    )


def rce_gradient(batch: RceBatch) -> np.ndarray:
    """Analytic d(total)/d(logits), shape (n_pixels, n_classes).

    Labeled pixel i: (rho / n_labeled) * (softmax - onehot(target)).
    Unlabeled pixel i: -(1 - rho) / n_unlabeled * p_k * (log p_k + H_i),
    the softmax-Jacobian pullback of the entropy term.
    """
    log_probs = _log_softmax(batch.logits)
    probs = np.exp(log_probs)
    grad = np.zeros_like(probs)
    rho = batch.rho

    lab = np.flatnonzero(batch.labeled)
    if lab.size:
        g = probs[lab].copy()
        g[np.arange(lab.size), batch.targets[lab]] -= 1.0
        grad[lab] = (rho / lab.size) * g

    unlab = np.flatnonzero(batch.unlabeled)
    if unlab.size:
        lp = log_probs[unlab]
        p = probs[unlab]
        h = _entropy(lp)[:, None]
        safe_lp = np.where(p > 0, lp, 0.0)  # p=0 rows contribute 0 regardless
        grad[unlab] = -((1.0 - rho) / unlab.size) * p * (safe_lp + h)
    return grad
