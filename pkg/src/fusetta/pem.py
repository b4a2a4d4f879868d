"""Principal entropy minimization: ranks, reliable sets and entropy losses.

Ranks follow "most probable class has rank 1", with ties broken by ascending
class index so ranks always form a permutation of {1..C} and the reliable set
has exactly k members. The top-k membership mask is held fixed within a step;
gradients flow through all of p via the softmax coupling.
"""
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError
from . import tensor as T
from .tensor import Tensor


@dataclass
class Prediction:
    """A probability vector and its class ranks."""

    p: np.ndarray
    ranks: np.ndarray

    @classmethod
    def from_probs(cls, p) -> "Prediction":
        p = np.asarray(p, dtype=np.float64).reshape(-1)
        return cls(p, ranks(p))


def ranks(p) -> np.ndarray:
    """Rank per class, 1 = most probable; ties broken by ascending index."""
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    order = np.argsort(-p, kind="stable")
    r = np.empty(p.size, dtype=np.int64)
    r[order] = np.arange(1, p.size + 1)
    return r


def reliable_set(p, k: int) -> np.ndarray:
    """Class indices with rank <= k (exactly k of them), sorted ascending."""
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    if not (1 <= k <= p.size):
        raise ParameterError(f"k must be in [1, {p.size}], got {k}")
    return np.sort(np.argsort(-p, kind="stable")[:k])


def _reliable_mask(p_values: np.ndarray, k: int) -> np.ndarray:
    mask = np.zeros_like(p_values)
    mask[0, reliable_set(p_values, k)] = 1.0
    return mask


def entropy(p: Tensor) -> Tensor:
    """Shannon entropy (nats) of a 1xC probability row."""
    return T.scale(T.sum_all(T.plogp(p)), -1.0)


def principal_entropy(p: Tensor, k: int, mask: np.ndarray | None = None) -> Tensor:
    """Entropy restricted to the k most probable classes.

    `mask` optionally pins the top-k membership to an externally captured
    mask; the finite-difference oracle uses this since membership is held
    fixed within a step.
    """
    if mask is None:
        mask = _reliable_mask(p.data, k)
    return T.scale(T.sum_all(T.mul_const(T.plogp(p), mask)), -1.0)


def _mean(terms) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return T.scale(total, 1.0 / len(terms))


def pem_loss(probs, k: int, masks=None) -> Tensor:
    """Mean principal entropy over a batch; the reliable set is per sample."""
    if not probs:
        raise ParameterError("pem_loss: empty batch")
    if masks is None:
        masks = [None] * len(probs)
    return _mean([principal_entropy(p, k, m) for p, m in zip(probs, masks)])


def entropy_loss(probs) -> Tensor:
    """Vanilla entropy-minimization objective: mean entropy over the batch."""
    if not probs:
        raise ParameterError("entropy_loss: empty batch")
    return _mean([entropy(p) for p in probs])


def class_balance_loss(probs) -> Tensor:
    """Negative entropy of the batch-mean prediction.

    Stand-in regularizer; minimized when the batch-mean prediction is uniform.
    Disabled (weight 0) by default.
    """
    if not probs:
        raise ParameterError("class_balance_loss: empty batch")
    mean_p = _mean(probs)
    return T.sum_all(T.plogp(mean_p))
