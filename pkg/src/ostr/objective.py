"""Class-balanced binary cross-entropy and IoU scoring."""
from dataclasses import dataclass

import numpy as np

EPS = 1e-7


@dataclass
class LossValue:
    """Batch loss (mean over images) with per-image balancing terms.

    ``alpha``, ``n_pos`` and ``n_neg`` are arrays with one entry per image.
    """
    total: float
    alpha: np.ndarray
    n_pos: np.ndarray
    n_neg: np.ndarray
    # unrounded batch loss in the input dtype (kept for extended-precision checks)
    total_exact: object = None


@dataclass
class SegMetrics:
    iou: float
    threshold: float = 0.5


def _check_binary(T):
    if not np.isin(T, (0, 1)).all():
        raise ValueError("target mask must be binary")


def weighted_bce(A, T, eps=EPS):
    """Per-image weighted BCE summed over pixels, averaged over the batch.

    The weight alpha = n_neg / (n_pos + n_neg) is computed separately for
    every image. Returns ``(LossValue, dL/dA)``.
    """
    A = np.asarray(A)
    T = np.asarray(T)
    if A.shape != T.shape:
        raise ValueError(f"prediction {A.shape} and target {T.shape} differ in shape")
    _check_binary(T)
    n = A.shape[0]
    pos = T.reshape(n, -1) > 0.5
    n_pos = pos.sum(axis=1)
    n_neg = pos.shape[1] - n_pos
    if (n_pos == 0).any() or (n_neg == 0).any():
        raise ValueError("every image needs both foreground and background pixels")
    alpha = n_neg / (n_pos + n_neg)

    a = A.reshape(n, -1)
    clipped = np.clip(a, eps, 1 - eps)
    w = np.where(pos, alpha[:, None], 1 - alpha[:, None])
    per_pixel = np.where(pos, -np.log(clipped), -np.log1p(-clipped))
    per_image = (w * per_pixel).sum(axis=1)

    inside = (a >= eps) & (a <= 1 - eps)
    grad = np.where(pos, -w / clipped, w / (1 - clipped)) * inside / n
    exact = per_image.mean()
    loss = LossValue(float(exact), alpha, n_pos, n_neg, exact)
    return loss, grad.reshape(A.shape).astype(A.dtype, copy=False)


def binarize(A, threshold=0.5):
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    return (np.asarray(A) >= threshold).astype(np.uint8)


def iou(pred, T) -> float:
    """Foreground intersection over union; an empty union counts as 1."""
    pred = np.asarray(pred).astype(bool)
    T = np.asarray(T).astype(bool)
    if pred.shape != T.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {T.shape}")
    union = np.logical_or(pred, T).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, T).sum() / union)


def mean_iou(groups):
    """Mean within each subset, then the unweighted mean of subset means.

    `groups` maps subset id to a sequence of per-episode IoUs. Returns
    ``(per_subset_means, overall)``.
    """
    if not groups:
        raise ValueError("no subsets given")
    means = {}
    for key, values in groups.items():
        values = list(values)
        if not values:
            raise ValueError(f"subset {key!r} has no episodes")
        means[key] = float(np.mean(values))
    return means, float(np.mean(list(means.values())))
