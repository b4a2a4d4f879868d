"""Two-modality fusion model: frozen encoder stubs plus the attention block.

The fusion pipeline (single head, single block) is:

    tokens -> Q,K,V -> raw scores Q K^T -> softmax(./sqrt(d)) @ V
           -> +residual -> layer norm -> FFN (GELU) -> +residual -> layer norm
           -> mean pool over tokens -> linear classifier -> softmax

Only the Q/K/V projections and biases are tunable at test time by default;
everything else is frozen after pretraining, and the encoders are frozen
always.
"""
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ShapeError
from .rng import substream
from . import tensor as T
from .tensor import Tensor

PARAM_GROUPS = (
    "w_q", "w_k", "w_v", "b_q", "b_k", "b_v",
    "ln1_gamma", "ln1_beta", "ln2_gamma", "ln2_beta",
    "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2",
    "clf_w", "clf_b",
)

DEFAULT_TUNABLE = ("w_q", "w_k", "w_v", "b_q", "b_k", "b_v")

CHECKPOINT_VERSION = 1
DATASET_VERSION = 1


@dataclass
class TokenBatch:
    """Per-sample token matrices for both modalities, plus optional labels."""

    tokens_a: np.ndarray  # (n, T_A, d)
    tokens_v: np.ndarray  # (n, T_V, d)
    labels: np.ndarray | None = None

    def __post_init__(self):
        a, v = self.tokens_a, self.tokens_v
        if a.ndim != 3 or v.ndim != 3:
            raise ShapeError(f"token arrays must be (n, T, d), got {a.shape}, {v.shape}")
        if a.shape[0] != v.shape[0]:
            raise ShapeError(f"sample counts differ: {a.shape[0]} vs {v.shape[0]}")
        if a.shape[2] != v.shape[2]:
            raise ShapeError(f"token dims differ: {a.shape[2]} vs {v.shape[2]}")
        if self.labels is not None and len(self.labels) != a.shape[0]:
            raise ShapeError("labels length does not match sample count")

    @property
    def n(self):
        return self.tokens_a.shape[0]

    @property
    def t_a(self):
        return self.tokens_a.shape[1]

    @property
    def t_v(self):
        return self.tokens_v.shape[1]

    @property
    def d(self):
        return self.tokens_a.shape[2]

    def select(self, idx) -> "TokenBatch":
        labels = None if self.labels is None else self.labels[idx]
        return TokenBatch(self.tokens_a[idx], self.tokens_v[idx], labels)


class FusionParams:
    """All fusion-module parameters as named leaf tensors plus a tunable mask."""

    def __init__(self, tensors: dict, tunable: dict):
        missing = set(PARAM_GROUPS) - set(tensors)
        if missing:
            raise ShapeError(f"missing parameter groups: {sorted(missing)}")
        self.tensors = {name: tensors[name] for name in PARAM_GROUPS}
        self.tunable = {name: bool(tunable.get(name, False)) for name in PARAM_GROUPS}
        self.set_trainable(self.tunable_groups())

    #: initial scale of the Q/K/V projections relative to the identity map.
    #: Small enough that softmax attention starts close to uniform (tokens of
    #: both modalities genuinely mix), large enough that raw scores reflect
    #: token geometry instead of init noise.
    QK_INIT_SCALE = 0.5

    @classmethod
    def init(cls, d: int, d_ff: int, n_classes: int, rng) -> "FusionParams":
        def near_identity():
            return cls.QK_INIT_SCALE * np.eye(d) + 0.02 * rng.standard_normal((d, d))

        def xavier(fan_in, fan_out):
            s = math.sqrt(2.0 / (fan_in + fan_out))
            return s * rng.standard_normal((fan_in, fan_out))

        arrays = {
            "w_q": near_identity(),
            "w_k": near_identity(),
            "w_v": near_identity(),
            "b_q": np.zeros((1, d)),
            "b_k": np.zeros((1, d)),
            "b_v": np.zeros((1, d)),
            "ln1_gamma": np.ones((1, d)),
            "ln1_beta": np.zeros((1, d)),
            "ln2_gamma": np.ones((1, d)),
            "ln2_beta": np.zeros((1, d)),
            "ffn_w1": xavier(d, d_ff),
            "ffn_b1": np.zeros((1, d_ff)),
            "ffn_w2": xavier(d_ff, d),
            "ffn_b2": np.zeros((1, d)),
            "clf_w": xavier(d, n_classes),
            "clf_b": np.zeros((1, n_classes)),
        }
        tensors = {name: Tensor(a) for name, a in arrays.items()}
        tunable = {name: name in DEFAULT_TUNABLE for name in PARAM_GROUPS}
        return cls(tensors, tunable)

    def tunable_groups(self):
        return tuple(name for name in PARAM_GROUPS if self.tunable[name])

    def set_trainable(self, groups):
        """Set requires_grad: `groups` trainable, everything else frozen."""
        groups = set(groups)
        for name, t in self.tensors.items():
            t.requires_grad = name in groups

    def zero_grad(self):
        for t in self.tensors.values():
            t.zero_grad()

    def state_arrays(self) -> dict:
        return {name: t.data.copy() for name, t in self.tensors.items()}

    def load_state(self, arrays: dict):
        for name, t in self.tensors.items():
            if arrays[name].shape != t.data.shape:
                raise ShapeError(
                    f"group {name}: shape {arrays[name].shape} vs {t.data.shape}"
                )
            t.data[...] = arrays[name]
            t.zero_grad()

    def copy(self) -> "FusionParams":
        tensors = {name: Tensor(t.data.copy()) for name, t in self.tensors.items()}
        return FusionParams(tensors, dict(self.tunable))

    @property
    def d(self):
        return self.tensors["w_q"].rows

    @property
    def d_ff(self):
        return self.tensors["ffn_w1"].cols

    @property
    def n_classes(self):
        return self.tensors["clf_w"].cols


@dataclass
class EncoderStub:
    """Frozen linear projection standing in for a pretrained encoder."""

    proj: np.ndarray  # (raw_dim, d), never receives gradient
    noise_free: bool = True


@dataclass
class FusionModel:
    enc_a: EncoderStub
    enc_v: EncoderStub
    params: FusionParams
    meta: dict = field(default_factory=dict)

    @property
    def d(self):
        return self.params.d

    @property
    def n_classes(self):
        return self.params.n_classes


def build_model(d: int, d_ff: int, n_classes: int, raw_dim_a: int, raw_dim_v: int,
                seed: int, meta=None) -> FusionModel:
    """Fresh model: orthogonal frozen encoder stubs + initialized fusion params."""
    rng = substream(seed, "init")

    def ortho(rows, cols):
        m = rng.standard_normal((rows, max(rows, cols)))
        q, _ = np.linalg.qr(m.T)
        return np.ascontiguousarray(q[:cols, :rows].T)

    enc_a = EncoderStub(proj=ortho(raw_dim_a, d))
    enc_v = EncoderStub(proj=ortho(raw_dim_v, d))
    params = FusionParams.init(d, d_ff, n_classes, rng)
    info = {"d": d, "d_ff": d_ff, "n_classes": n_classes, "seed": int(seed)}
    if meta:
        info.update(meta)
    return FusionModel(enc_a, enc_v, params, info)


# ---------------------------------------------------------------------------
# forward pipeline
# ---------------------------------------------------------------------------

def encode(raw_a: np.ndarray, raw_v: np.ndarray, enc_a: EncoderStub,
           enc_v: EncoderStub, labels=None) -> TokenBatch:
    """Project raw per-sample matrices through the frozen encoder stubs."""
    if raw_a.shape[-1] != enc_a.proj.shape[0]:
        raise ShapeError(
            f"modality A: raw dim {raw_a.shape[-1]} vs encoder {enc_a.proj.shape[0]}"
        )
    if raw_v.shape[-1] != enc_v.proj.shape[0]:
        raise ShapeError(
            f"modality V: raw dim {raw_v.shape[-1]} vs encoder {enc_v.proj.shape[0]}"
        )
    return TokenBatch(raw_a @ enc_a.proj, raw_v @ enc_v.proj, labels)


def qkv(tokens: np.ndarray, params: FusionParams):
    """Q, K, V for one sample's concatenated token matrix (T_A+T_V) x d."""
    z = Tensor(tokens)
    p = params.tensors
    q = T.add(T.matmul(z, p["w_q"]), p["b_q"])
    k = T.add(T.matmul(z, p["w_k"]), p["b_k"])
    v = T.add(T.matmul(z, p["w_v"]), p["b_v"])
    return q, k, v


def raw_attention(q: Tensor, k: Tensor) -> Tensor:
    """Unnormalized scores Q K^T (no sqrt(d) scaling here)."""
    if q.shape != k.shape:
        raise ShapeError(f"raw_attention: Q {q.shape} vs K {k.shape}")
    return T.matmul(q, T.transpose(k))


def attend(raw: Tensor, v: Tensor, d: int) -> Tensor:
    """Softmax(raw / sqrt(d)) @ V."""
    if d <= 0:
        raise ShapeError(f"attend: d must be positive, got {d}")
    a = T.row_softmax(raw, math.sqrt(d))
    return T.matmul(a, v)


def predict_sample(tokens: np.ndarray, params: FusionParams, eps: float = 1e-5):
    """Forward one sample; returns (p, raw_attention) graph tensors."""
    p = params.tensors
    z = Tensor(tokens)
    q = T.add(T.matmul(z, p["w_q"]), p["b_q"])
    k = T.add(T.matmul(z, p["w_k"]), p["b_k"])
    v = T.add(T.matmul(z, p["w_v"]), p["b_v"])
    raw = raw_attention(q, k)
    attended = attend(raw, v, params.d)
    h = T.layer_norm(T.add(attended, z), p["ln1_gamma"], p["ln1_beta"], eps)
    ff = T.add(T.matmul(T.gelu(T.add(T.matmul(h, p["ffn_w1"]), p["ffn_b1"])),
                        p["ffn_w2"]), p["ffn_b2"])
    h2 = T.layer_norm(T.add(ff, h), p["ln2_gamma"], p["ln2_beta"], eps)
    pooled = T.mean_rows(h2)
    logits = T.add(T.matmul(pooled, p["clf_w"]), p["clf_b"])
    probs = T.row_softmax(logits, 1.0)
    return probs, raw


def predict(batch: TokenBatch, params: FusionParams):
    """Forward every sample; returns (list of p tensors, list of raw-score tensors)."""
    probs, raws = [], []
    for i in range(batch.n):
        tokens = np.concatenate([batch.tokens_a[i], batch.tokens_v[i]], axis=0)
        p, raw = predict_sample(tokens, params)
        probs.append(p)
        raws.append(raw)
    return probs, raws


def predict_probs(batch: TokenBatch, params: FusionParams) -> np.ndarray:
    """Forward-only class probabilities, (n, C), without graph recording."""
    with T.no_grad():
        probs, _ = predict(batch, params)
    return np.concatenate([p.data for p in probs], axis=0)


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

def save_checkpoint(path, model: FusionModel):
    header = {
        "version": CHECKPOINT_VERSION,
        "d": model.params.d,
        "d_ff": model.params.d_ff,
        "n_classes": model.params.n_classes,
        **{k: v for k, v in model.meta.items()},
    }
    arrays = {f"param::{name}": t.data for name, t in model.params.tensors.items()}
    arrays["enc_a_proj"] = model.enc_a.proj
    arrays["enc_v_proj"] = model.enc_v.proj
    arrays["tunable"] = np.array(
        [model.params.tunable[name] for name in PARAM_GROUPS], dtype=bool
    )
    arrays["header"] = np.frombuffer(
        json.dumps(header, sort_keys=True).encode("utf-8"), dtype=np.uint8
    )
    np.savez(path, **arrays)


def load_checkpoint(path) -> FusionModel:
    with np.load(path) as z:
        header = json.loads(bytes(z["header"]).decode("utf-8"))
        if header.get("version") != CHECKPOINT_VERSION:
            raise ContractError(
                f"unsupported checkpoint version {header.get('version')}"
            )
        tensors = {
            name: Tensor(z[f"param::{name}"]) for name in PARAM_GROUPS
        }
        tunable = {
            name: bool(flag) for name, flag in zip(PARAM_GROUPS, z["tunable"])
        }
        params = FusionParams(tensors, tunable)
        enc_a = EncoderStub(proj=np.ascontiguousarray(z["enc_a_proj"]))
        enc_v = EncoderStub(proj=np.ascontiguousarray(z["enc_v_proj"]))
    meta = {k: v for k, v in header.items() if k not in ("version",)}
    return FusionModel(enc_a, enc_v, params, meta)
