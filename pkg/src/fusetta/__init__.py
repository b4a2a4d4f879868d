"""Desk-scale two-modality attention fusion with online test-time adaptation."""

from .adapt import (AdamState, AdaptConfig, AdaptResult, adam_step,
                    adapt_stream, grad_alignment, total_loss)
from .bootstrap import (BlockStats, ab_loss, ab_loss_batch, attention_gap,
                        block_stats, gaussian_kl)
from .gradcheck import check_gradients, finite_diff_grad
from .kernels import active_backend
from .model import (EncoderStub, FusionModel, FusionParams, TokenBatch,
                    attend, build_model, encode, load_checkpoint, predict,
                    predict_probs, qkv, raw_attention, save_checkpoint)
from .pem import (Prediction, class_balance_loss, entropy, entropy_loss,
                  pem_loss, principal_entropy, ranks, reliable_set)
from .synth import (Corruption, LatentSpec, Split, corrupt, evaluate,
                    generate_dataset, load_split, preset, pretrain_fusion,
                    rank_reliability, save_split)
from .tensor import Tensor, backward, no_grad

__version__ = "0.1.0"
