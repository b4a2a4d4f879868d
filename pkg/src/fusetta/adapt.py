"""Online test-time adaptation loop and its Adam optimizer.

One pass over the unlabeled test stream: for each batch, predictions are
recorded first (predict-then-adapt), then the selected objective is
backpropagated and the tunable fusion parameters are updated. The `raw` mode
performs no updates and serves as the un-adapted baseline; `em` is the
Tent-style vanilla entropy baseline.
"""
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ContractError, NumericError
from . import bootstrap, pem
from . import tensor as T
from .model import FusionModel, FusionParams, TokenBatch, encode, predict
from .rng import substream

MODES = ("raw", "em", "abpem", "ab_only", "pem_only")


@dataclass
class AdaptConfig:
    k: int = 3
    lam: float = 1.0
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    batch_size: int = 32
    seed: int = 0
    mode: str = "abpem"
    class_balance_weight: float = 0.0
    grad_clip: float | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractError(f"unknown mode {self.mode!r}, expected one of {MODES}")

    def with_mode(self, mode: str) -> "AdaptConfig":
        return replace(self, mode=mode)


class AdamState:
    """First/second-moment buffers per tunable group plus the step counter."""

    def __init__(self, params: FusionParams):
        self.m = {name: np.zeros_like(params.tensors[name].data)
                  for name in params.tunable_groups()}
        self.v = {name: np.zeros_like(params.tensors[name].data)
                  for name in params.tunable_groups()}
        self.t = 0


def adam_step(params: FusionParams, state: AdamState, config: AdaptConfig):
    """Standard Adam update with bias correction on the tunable groups only."""
    b1, b2 = config.betas
    state.t += 1
    t = state.t
    for name in params.tunable_groups():
        if name not in state.m:
            raise ContractError(f"optimizer state missing group {name!r}")
        p = params.tensors[name]
        g = p.grad
        if config.grad_clip is not None:
            norm = float(np.linalg.norm(g))
            if norm > config.grad_clip:
                g = g * (config.grad_clip / norm)
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = state.m[name] / (1.0 - b1 ** t)
        v_hat = state.v[name] / (1.0 - b2 ** t)
        p.data -= config.lr * m_hat / (np.sqrt(v_hat) + config.adam_eps)


def freeze_context(batch: TokenBatch, params: FusionParams, config: AdaptConfig) -> dict:
    """Capture the quantities a single step treats as constants.

    The anchor (self-attention) statistics are a stop-gradient boundary and
    the top-k membership masks are held fixed within a step; the
    finite-difference oracle re-evaluates the loss with both pinned so it
    differentiates the same function as backward().
    """
    with T.no_grad():
        probs, raws = predict(batch, params)
        stats_list = [bootstrap.block_stats(r, batch.t_a, batch.t_v) for r in raws]
    return {
        "anchors": [bootstrap.anchor_values(s) for s in stats_list],
        "masks": [pem._reliable_mask(p.data, config.k) for p in probs],
    }


def total_loss(batch: TokenBatch, params: FusionParams, config: AdaptConfig,
               frozen: dict | None = None):
    """Forward the batch and build the mode's objective.

    Returns (loss tensor, diagnostics dict). Diagnostics carry per-term loss
    values, batch-mean attention gaps, mean max-probability and the raw
    probability matrix (predictions are those of the pre-update parameters).
    """
    if config.mode == "raw":
        raise ContractError("total_loss: mode 'raw' defines no loss")
    anchors_list = None if frozen is None else frozen["anchors"]
    masks_list = None if frozen is None else frozen["masks"]
    probs, raws = predict(batch, params)
    stats_list = [bootstrap.block_stats(r, batch.t_a, batch.t_v) for r in raws]

    loss_ab = None
    if config.mode in ("abpem", "ab_only"):
        loss_ab = bootstrap.ab_loss_batch(stats_list, anchors_list)
    loss_pem = None
    if config.mode in ("abpem", "pem_only"):
        loss_pem = pem.pem_loss(probs, config.k, masks_list)
    elif config.mode == "em":
        loss_pem = pem.entropy_loss(probs)

    if config.mode == "ab_only":
        loss = T.scale(loss_ab, config.lam)
    elif config.mode in ("pem_only", "em"):
        loss = loss_pem
    else:  # abpem
        loss = T.add(T.scale(loss_ab, config.lam), loss_pem)
    if config.class_balance_weight != 0.0:
        loss = T.add(loss, T.scale(pem.class_balance_loss(probs), config.class_balance_weight))

    p_mat = np.concatenate([p.data for p in probs], axis=0)
    diag = bootstrap.batch_gap_record(stats_list)
    diag.update({
        "loss_total": loss.item(),
        "loss_ab": None if loss_ab is None else loss_ab.item(),
        "loss_pem": None if loss_pem is None else loss_pem.item(),
        "mean_max_prob": float(p_mat.max(axis=1).mean()),
        "probs": p_mat,
    })
    return loss, diag


def _frozen_diagnostics(batch: TokenBatch, params: FusionParams) -> dict:
    with T.no_grad():
        probs, raws = predict(batch, params)
        stats_list = [bootstrap.block_stats(r, batch.t_a, batch.t_v) for r in raws]
        p_mat = np.concatenate([p.data for p in probs], axis=0)
    diag = bootstrap.batch_gap_record(stats_list)
    diag.update({
        "loss_total": None,
        "loss_ab": None,
        "loss_pem": None,
        "mean_max_prob": float(p_mat.max(axis=1).mean()),
        "probs": p_mat,
    })
    return diag


@dataclass
class AdaptResult:
    probs: np.ndarray              # (N, C), in stream order
    labels: np.ndarray | None      # stream-ordered labels when available
    order: np.ndarray              # stream position -> original sample index
    trace: list = field(default_factory=list)


def adapt_stream(stream, model: FusionModel, config: AdaptConfig) -> AdaptResult:
    """Single online pass over `stream` (a raw Split or a TokenBatch).

    Per batch: forward, record predictions and diagnostics, then (unless mode
    is `raw`) backpropagate the objective and apply one Adam step. The stream
    order is a seeded permutation; every sample contributes to exactly one
    update batch.
    """
    if isinstance(stream, TokenBatch):
        tokens_all = stream
    else:
        tokens_all = encode(stream.raw_a, stream.raw_v, model.enc_a, model.enc_v,
                            labels=stream.labels)
    n = tokens_all.n
    if n == 0:
        raise ContractError("adapt_stream: empty test stream")

    order = substream(config.seed, "order").permutation(n)
    state = AdamState(model.params)
    trace = []
    probs_chunks = []
    for bi, start in enumerate(range(0, n, config.batch_size)):
        idx = order[start:start + config.batch_size]
        batch = tokens_all.select(idx)
        t0 = time.perf_counter()
        if config.mode == "raw":
            diag = _frozen_diagnostics(batch, model.params)
        else:
            model.params.zero_grad()
            loss, diag = total_loss(batch, model.params, config)
            if not np.isfinite(loss.item()):
                raise NumericError(f"non-finite loss at batch {bi}")
            T.backward(loss)
            adam_step(model.params, state, config)
        wall_ms = (time.perf_counter() - t0) * 1e3

        p_mat = diag.pop("probs")
        probs_chunks.append(p_mat)
        acc = None
        if batch.labels is not None:
            acc = float((p_mat.argmax(axis=1) == batch.labels).mean())
        trace.append({
            "batch": bi,
            "mode": config.mode,
            "loss_total": diag["loss_total"],
            "loss_ab": diag["loss_ab"],
            "loss_pem": diag["loss_pem"],
            "gap_v": diag["gap_v"],
            "gap_a": diag["gap_a"],
            "acc": acc,
            "wall_ms": wall_ms,
            "mean_max_prob": diag["mean_max_prob"],
            "mu_v2v": diag["mu_v2v"],
            "mu_a2v": diag["mu_a2v"],
            "mu_a2a": diag["mu_a2a"],
            "mu_v2a": diag["mu_v2a"],
        })

    labels = None if tokens_all.labels is None else np.asarray(tokens_all.labels)[order]
    return AdaptResult(np.concatenate(probs_chunks, axis=0), labels, order, trace)


def _flat_tunable_grads(params: FusionParams) -> np.ndarray:
    return np.concatenate([params.tensors[name].grad.reshape(-1)
                           for name in params.tunable_groups()])


def cross_entropy_loss(probs, labels) -> "T.Tensor":
    """Mean negative log-likelihood of the true labels (supervised)."""
    terms = [T.scale(T.log(T.pick(p, 0, int(y))), -1.0) for p, y in zip(probs, labels)]
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return T.scale(total, 1.0 / len(terms))


def grad_alignment(batch: TokenBatch, params: FusionParams, config: AdaptConfig):
    """Cosine similarity of PEM / EM gradients to the supervised CE gradient.

    All three gradients are taken at the same parameter point; nothing is
    updated. Labels are required (diagnostic only).
    """
    if batch.labels is None:
        raise ContractError("grad_alignment: batch labels required")

    def grad_of(loss_builder):
        params.zero_grad()
        probs, _ = predict(batch, params)
        T.backward(loss_builder(probs))
        return _flat_tunable_grads(params)

    g_ce = grad_of(lambda probs: cross_entropy_loss(probs, batch.labels))
    g_pem = grad_of(lambda probs: pem.pem_loss(probs, config.k))
    g_em = grad_of(pem.entropy_loss)
    params.zero_grad()

    def cosine(a, b):
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na == 0.0 or nb == 0.0:
            raise NumericError("grad_alignment: zero-norm gradient, similarity undefined")
        return float(a @ b / (na * nb))

    return cosine(g_ce, g_pem), cosine(g_ce, g_em)
