"""Synthetic two-modality classification benchmark with test-time corruptions.

Samples are drawn from class centroids in a latent space; the latent vector is
split between the two modalities according to the informativeness ratio rho
(the fraction of latent signal routed to modality V), mapped to per-token raw
inputs and jittered. Corruptions perturb one modality's raw inputs with a
magnitude linear in severity; the other modality is bitwise untouched.
"""
import json
import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ContractError, NumericError, ParameterError, ShapeError
from . import tensor as T
from .adapt import cross_entropy_loss
from .model import (DATASET_VERSION, FusionModel, TokenBatch, build_model,
                    encode, predict, predict_probs)
from .pem import ranks
from .rng import substream
from .stats import spearman


@dataclass
class LatentSpec:
    n_classes: int = 10
    latent_dim: int = 12
    t_a: int = 4
    t_v: int = 4
    d: int = 16
    sigma_latent: float = 0.25
    sigma_token: float = 0.10
    rho: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.t_a < 1 or self.t_v < 1:
            raise ParameterError("each modality needs at least one token")
        if not (0.0 <= self.rho <= 1.0):
            raise ParameterError(f"rho must be in [0, 1], got {self.rho}")

    @property
    def latent_dim_v(self) -> int:
        return min(self.latent_dim - 1, max(1, round(self.rho * self.latent_dim)))

    @property
    def latent_dim_a(self) -> int:
        return self.latent_dim - self.latent_dim_v

    def to_dict(self) -> dict:
        return {
            "n_classes": self.n_classes, "latent_dim": self.latent_dim,
            "t_a": self.t_a, "t_v": self.t_v, "d": self.d,
            "sigma_latent": self.sigma_latent, "sigma_token": self.sigma_token,
            "rho": self.rho, "seed": self.seed,
        }


PRESETS = {
    # video-dominant: most of the class signal rides on modality V
    "kin-like": LatentSpec(n_classes=10, latent_dim=12, t_a=4, t_v=4, d=16,
                           rho=0.7, sigma_latent=0.25, sigma_token=0.10),
    # audio-dominant
    "vgg-like": LatentSpec(n_classes=10, latent_dim=12, t_a=4, t_v=4, d=16,
                           rho=0.3, sigma_latent=0.25, sigma_token=0.10),
}


def preset(name: str) -> LatentSpec:
    if name not in PRESETS:
        raise ParameterError(f"unknown preset {name!r}, have {sorted(PRESETS)}")
    return PRESETS[name]


@dataclass
class Split:
    """Raw (pre-encoder) per-sample matrices plus labels."""

    raw_a: np.ndarray  # (n, T_A, d_raw)
    raw_v: np.ndarray  # (n, T_V, d_raw)
    labels: np.ndarray  # (n,)

    @property
    def n(self):
        return self.raw_a.shape[0]

    def copy(self) -> "Split":
        return Split(self.raw_a.copy(), self.raw_v.copy(), self.labels.copy())


def _class_centroids(spec: LatentSpec, rng) -> np.ndarray:
    centroids = rng.standard_normal((spec.n_classes, spec.latent_dim))
    dists = np.linalg.norm(centroids[:, None] - centroids[None, :], axis=-1)
    np.fill_diagonal(dists, np.inf)
    if dists.min() <= 0.0:
        raise NumericError("degenerate class centroids (coincident)")
    return centroids


def _modality_maps(spec: LatentSpec, rng):
    # scale so token RMS stays O(1) regardless of the latent split
    map_a = rng.standard_normal((spec.latent_dim_a, spec.d)) / math.sqrt(spec.latent_dim_a)
    map_v = rng.standard_normal((spec.latent_dim_v, spec.d)) / math.sqrt(spec.latent_dim_v)
    return map_a, map_v


def generate_dataset(spec: LatentSpec, n_train: int, n_test: int):
    """Seeded (train, test) splits of the synthetic benchmark."""
    if n_train < spec.n_classes or n_test < spec.n_classes:
        raise ParameterError("need at least one sample per class in each split")
    rng_world = substream(spec.seed, "data", "world")
    centroids = _class_centroids(spec, rng_world)
    map_a, map_v = _modality_maps(spec, rng_world)

    def draw(n, name):
        rng = substream(spec.seed, "data", name)
        y = rng.integers(0, spec.n_classes, size=n)
        h = centroids[y] + spec.sigma_latent * rng.standard_normal((n, spec.latent_dim))
        h_v, h_a = h[:, :spec.latent_dim_v], h[:, spec.latent_dim_v:]
        base_a = h_a @ map_a  # (n, d)
        base_v = h_v @ map_v
        raw_a = np.repeat(base_a[:, None, :], spec.t_a, axis=1)
        raw_v = np.repeat(base_v[:, None, :], spec.t_v, axis=1)
        raw_a += spec.sigma_token * rng.standard_normal(raw_a.shape)
        raw_v += spec.sigma_token * rng.standard_normal(raw_v.shape)
        return Split(raw_a, raw_v, y)

    return draw(n_train, "train"), draw(n_test, "test")


# ---------------------------------------------------------------------------
# corruptions
# ---------------------------------------------------------------------------

CORRUPTION_KINDS = ("gaussian_noise", "shift", "scale", "dropout_tokens", "blur_smooth")

# per-kind base magnitudes; severity s applies linearly on top of these
DEFAULT_MAGNITUDES = {
    "gaussian_noise": 0.20,   # noise std = base * s * input std
    "shift": 0.40,            # offset norm = base * s * input std
    "scale": 0.30,            # gain = 1 + base * s
    "dropout_tokens": 0.15,   # zeroed token fraction = min(base * s, 0.9)
    "blur_smooth": 0.18,      # mix toward feature-axis moving average
}


@dataclass
class Corruption:
    target: str  # "A" or "V"
    kind: str
    severity: int

    def __post_init__(self):
        if self.target not in ("A", "V"):
            raise ParameterError(f"target must be 'A' or 'V', got {self.target!r}")
        if self.kind not in CORRUPTION_KINDS:
            raise ParameterError(f"unknown corruption kind {self.kind!r}")
        if not (0 <= self.severity <= 5):
            raise ParameterError(f"severity must be in 0..5, got {self.severity}")

    @classmethod
    def parse(cls, text: str) -> "Corruption":
        """Parse the CLI form KIND:MODALITY:SEVERITY."""
        parts = text.split(":")
        if len(parts) != 3:
            raise ParameterError(f"expected KIND:MODALITY:SEVERITY, got {text!r}")
        kind, modality, sev = parts
        try:
            sev = int(sev)
        except ValueError:
            raise ParameterError(f"severity must be an integer, got {parts[2]!r}") from None
        return cls(target=modality.upper(), kind=kind, severity=sev)


def corrupt(split: Split, c: Corruption, seed: int,
            magnitudes: dict | None = None) -> Split:
    """Corrupted copy of the split; the untargeted modality is untouched."""
    mags = DEFAULT_MAGNITUDES if magnitudes is None else magnitudes
    out = split.copy()
    x = out.raw_v if c.target == "V" else out.raw_a
    base = mags[c.kind]
    level = base * c.severity
    rng = substream(seed, "corrupt", c.kind, c.target, c.severity)
    sigma_x = float(x.std())

    if c.kind == "gaussian_noise":
        # one noise field per sample, shared across that sample's tokens
        # (a global sensor disturbance, not per-token speckle)
        n, _, dr = x.shape
        x += level * sigma_x * rng.standard_normal((n, 1, dr))
    elif c.kind == "shift":
        direction = rng.standard_normal(x.shape[-1])
        direction /= np.linalg.norm(direction)
        x += level * sigma_x * direction
    elif c.kind == "scale":
        x *= 1.0 + level
    elif c.kind == "dropout_tokens":
        frac = min(level, 0.9)
        n, t, _ = x.shape
        n_drop = int(round(frac * t))
        if n_drop > 0:
            for i in range(n):
                drop = rng.choice(t, size=n_drop, replace=False)
                x[i, drop, :] = 0.0
    elif c.kind == "blur_smooth":
        width = 1 + 2 * c.severity
        kernel = np.ones(width) / width
        pad = width // 2
        mix = min(level, 1.0)
        padded = np.concatenate([x[..., -pad:], x, x[..., :pad]], axis=-1)
        smoothed = np.apply_along_axis(lambda v: np.convolve(v, kernel, mode="valid"),
                                       -1, padded)
        x[...] = (1.0 - mix) * x + mix * smoothed
    return out


# ---------------------------------------------------------------------------
# supervised pretraining and evaluation
# ---------------------------------------------------------------------------

def build_model_for_spec(spec: LatentSpec, seed: int | None = None,
                         d_ff: int | None = None) -> FusionModel:
    seed = spec.seed if seed is None else seed
    d_ff = 4 * spec.d if d_ff is None else d_ff
    return build_model(spec.d, d_ff, spec.n_classes, raw_dim_a=spec.d,
                       raw_dim_v=spec.d, seed=seed,
                       meta={"t_a": spec.t_a, "t_v": spec.t_v})


def pretrain_fusion(train: Split, model: FusionModel, epochs: int, lr: float,
                    batch_size: int = 32, seed: int = 0, eval_split: Split | None = None):
    """Supervised cross-entropy training of all fusion parameters.

    Encoders stay frozen. Returns a per-epoch history of mean training loss;
    the final clean accuracy (when eval_split is given) lands in model.meta.
    """
    from .adapt import AdamState, AdaptConfig, adam_step  # local to avoid cycle at import

    params = model.params
    params.set_trainable(params.tensors.keys())
    config = AdaptConfig(lr=lr, batch_size=batch_size, seed=seed, mode="em")
    state = AdamState(params)
    tokens_all = encode(train.raw_a, train.raw_v, model.enc_a, model.enc_v,
                        labels=train.labels)
    history = []
    for epoch in range(epochs):
        order = substream(seed, "order", "pretrain", epoch).permutation(train.n)
        losses = []
        for start in range(0, train.n, batch_size):
            idx = order[start:start + batch_size]
            batch = tokens_all.select(idx)
            params.zero_grad()
            probs, _ = predict(batch, params)
            loss = cross_entropy_loss(probs, batch.labels)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(f"pretraining diverged at epoch {epoch}")
            T.backward(loss)
            adam_step(params, state, config)
            losses.append(value)
        history.append(float(np.mean(losses)))
    params.set_trainable(params.tunable_groups())
    params.zero_grad()
    if eval_split is not None:
        tokens = encode(eval_split.raw_a, eval_split.raw_v, model.enc_a, model.enc_v)
        probs = predict_probs(tokens, params)
        model.meta["clean_acc"] = evaluate(probs, eval_split.labels)
    model.meta["pretrain_epochs"] = int(epochs)
    return history


def evaluate(probs, labels) -> float:
    """Fraction of argmax-correct predictions (argmax ties -> lowest index)."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.ndim != 2:
        raise ContractError(f"expected (n, C) probabilities, got shape {probs.shape}")
    if len(probs) != len(labels):
        raise ContractError(f"length mismatch: {len(probs)} predictions vs {len(labels)} labels")
    if len(labels) == 0:
        raise ContractError("evaluate: empty prediction set")
    return float((probs.argmax(axis=1) == labels).mean())


# ---------------------------------------------------------------------------
# frozen-model diagnostics
# ---------------------------------------------------------------------------

def frozen_gap(model: FusionModel, split: Split, batch_size: int = 256):
    """Batch-mean attention gaps of the frozen model over a split."""
    from .bootstrap import batch_gap_record, block_stats

    tokens_all = encode(split.raw_a, split.raw_v, model.enc_a, model.enc_v)
    records = []
    with T.no_grad():
        for start in range(0, split.n, batch_size):
            batch = tokens_all.select(np.arange(start, min(start + batch_size, split.n)))
            _, raws = predict(batch, model.params)
            stats = [block_stats(r, batch.t_a, batch.t_v) for r in raws]
            rec = batch_gap_record(stats)
            rec["batch_index"] = len(records)
            records.append(rec)
    return records


def rank_reliability(model: FusionModel, clean: Split, corrupted: Split) -> dict:
    """Per-rank prediction drift between clean and corrupted inputs.

    Ranks come from the clean prediction. Reports the mean absolute
    probability drift |p_corrupt - p_clean| per rank and, as a companion, the
    mean absolute log-probability drift, each with its Spearman correlation
    against rank.
    """
    tokens_c = encode(clean.raw_a, clean.raw_v, model.enc_a, model.enc_v)
    tokens_x = encode(corrupted.raw_a, corrupted.raw_v, model.enc_a, model.enc_v)
    p_clean = predict_probs(tokens_c, model.params)
    p_corr = predict_probs(tokens_x, model.params)
    n, n_classes = p_clean.shape
    rank_mat = np.vstack([ranks(p_clean[i]) for i in range(n)])
    abs_dp = np.abs(p_corr - p_clean)
    log_dp = np.abs(np.log(np.maximum(p_corr, 1e-300)) - np.log(np.maximum(p_clean, 1e-300)))
    mean_abs = np.array([abs_dp[rank_mat == r].mean() for r in range(1, n_classes + 1)])
    mean_log = np.array([log_dp[rank_mat == r].mean() for r in range(1, n_classes + 1)])
    rs = np.arange(1, n_classes + 1)
    return {
        "rank": rs.tolist(),
        "mean_abs_dp": mean_abs.tolist(),
        "mean_log_dp": mean_log.tolist(),
        "spearman_abs_dp": spearman(rs, mean_abs),
        "spearman_log_dp": spearman(rs, mean_log),
    }


# ---------------------------------------------------------------------------
# dataset container
# ---------------------------------------------------------------------------

def save_split(path, split: Split, spec: LatentSpec, extra: dict | None = None):
    header = {"version": DATASET_VERSION, "spec": spec.to_dict()}
    if extra:
        header.update(extra)
    np.savez(path, raw_a=split.raw_a, raw_v=split.raw_v, labels=split.labels,
             header=np.frombuffer(json.dumps(header, sort_keys=True).encode("utf-8"),
                                  dtype=np.uint8))


def load_split(path):
    with np.load(path) as z:
        header = json.loads(bytes(z["header"]).decode("utf-8"))
        if header.get("version") != DATASET_VERSION:
            raise ContractError(f"unsupported dataset version {header.get('version')}")
        split = Split(np.ascontiguousarray(z["raw_a"]),
                      np.ascontiguousarray(z["raw_v"]),
                      np.ascontiguousarray(z["labels"]))
    spec = LatentSpec(**header["spec"])
    return split, spec, header
