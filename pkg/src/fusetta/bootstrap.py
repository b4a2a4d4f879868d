"""Gaussian modeling of raw attention blocks and the bootstrapping loss.

The raw score matrix splits into four blocks by modality:

    [[A2A, A2V],
     [V2A, V2V]]       (query modality on rows, key modality on columns)

Each block is summarized by the mean and population variance of its entries.
The bootstrapping loss is the KL divergence from each cross-attention block's
Gaussian to the matching self-attention block's Gaussian, with the
self-attention (anchor) statistics excluded from gradient flow.
"""
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateModalityError, NumericError, ShapeError
from . import tensor as T
from .tensor import Tensor

VARIANCE_FLOOR = 1e-6

BLOCK_IDS = ("a2a", "a2v", "v2a", "v2v")


@dataclass
class BlockStats:
    """Mean / variance of one attention block, kept as 1x1 graph tensors."""

    mu: Tensor
    sigma2: Tensor
    block_id: str

    @classmethod
    def from_values(cls, mu: float, sigma2: float, block_id: str = "") -> "BlockStats":
        return cls(Tensor([[float(mu)]]), Tensor([[max(float(sigma2), VARIANCE_FLOOR)]]),
                   block_id)

    @property
    def mu_value(self) -> float:
        return float(self.mu.data[0, 0])

    @property
    def sigma2_value(self) -> float:
        return float(self.sigma2.data[0, 0])


def block_stats(raw: Tensor, t_a: int, t_v: int) -> dict:
    """Per-block Gaussian statistics of one sample's raw score matrix."""
    if t_a < 1 or t_v < 1:
        raise DegenerateModalityError(f"need at least one token per modality, got {t_a}, {t_v}")
    t = t_a + t_v
    if raw.shape != (t, t):
        raise ShapeError(f"raw attention must be {t}x{t}, got {raw.shape}")
    ranges = {
        "a2a": (0, t_a, 0, t_a),
        "a2v": (0, t_a, t_a, t),
        "v2a": (t_a, t, 0, t_a),
        "v2v": (t_a, t, t_a, t),
    }
    stats = {}
    for bid, (r0, r1, c0, c1) in ranges.items():
        mu = T.block_mean(raw, r0, r1, c0, c1)
        sigma2 = T.clamp_min(T.block_var(raw, r0, r1, c0, c1), VARIANCE_FLOOR)
        stats[bid] = BlockStats(mu, sigma2, bid)
    return stats


def gaussian_kl(p: BlockStats, q: BlockStats) -> Tensor:
    """KL(N(p) || N(q)) in closed form; q is the anchor (stop-gradient).

    KL = log(sigma_q / sigma_p) - 1/2 + (sigma_p^2 + (mu_p - mu_q)^2) / (2 sigma_q^2)
    """
    for s in (p, q):
        if not (np.isfinite(s.mu.data).all() and np.isfinite(s.sigma2.data).all()):
            raise NumericError(f"gaussian_kl: non-finite statistics in block {s.block_id!r}")
    q_mu = T.detach(q.mu)
    q_s2 = T.detach(q.sigma2)
    log_ratio = T.scale(T.sub(T.log(q_s2), T.log(p.sigma2)), 0.5)
    diff = T.sub(p.mu, q_mu)
    quad = T.div(T.add(p.sigma2, T.mul(diff, diff)), T.scale(q_s2, 2.0))
    return T.add_scalar(T.add(log_ratio, quad), -0.5)


def anchor_values(stats: dict) -> dict:
    """Snapshot of the anchor (self-attention) statistics as plain floats."""
    return {bid: (stats[bid].mu_value, stats[bid].sigma2_value)
            for bid in ("v2v", "a2a")}


def ab_loss(stats: dict, anchors: dict | None = None) -> Tensor:
    """Bootstrapping loss for one sample: cross blocks pulled to self anchors.

    `anchors` optionally pins the anchor statistics to externally captured
    values; this is what the finite-difference oracle uses so that it
    differentiates the same within-step function as backward() (the anchors
    are a stop-gradient boundary either way).
    """
    if anchors is None:
        q_v2v, q_a2a = stats["v2v"], stats["a2a"]
    else:
        q_v2v = BlockStats.from_values(*anchors["v2v"], block_id="v2v")
        q_a2a = BlockStats.from_values(*anchors["a2a"], block_id="a2a")
    return T.add(gaussian_kl(stats["a2v"], q_v2v),
                 gaussian_kl(stats["v2a"], q_a2a))


def ab_loss_batch(stats_list, anchors_list=None) -> Tensor:
    """Mean bootstrapping loss over per-sample statistics."""
    def one(i):
        anchors = None if anchors_list is None else anchors_list[i]
        return ab_loss(stats_list[i], anchors)

    total = one(0)
    for i in range(1, len(stats_list)):
        total = T.add(total, one(i))
    return T.scale(total, 1.0 / len(stats_list))


def attention_gap(stats: dict):
    """(gap_v, gap_a) = (mu_v2v - mu_a2v, mu_a2a - mu_v2a) for one sample."""
    gap_v = stats["v2v"].mu_value - stats["a2v"].mu_value
    gap_a = stats["a2a"].mu_value - stats["v2a"].mu_value
    return gap_v, gap_a


def batch_gap_record(stats_list) -> dict:
    """Batch-mean gaps and block statistics, as plain floats for logging."""
    gaps = np.array([attention_gap(s) for s in stats_list])
    rec = {
        "gap_v": float(gaps[:, 0].mean()),
        "gap_a": float(gaps[:, 1].mean()),
    }
    for bid in BLOCK_IDS:
        rec[f"mu_{bid}"] = float(np.mean([s[bid].mu_value for s in stats_list]))
        rec[f"sigma2_{bid}"] = float(np.mean([s[bid].sigma2_value for s in stats_list]))
    return rec
