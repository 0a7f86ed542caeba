"""Meta-teacher: encodes [context, response] with the student's context
encoder, refines with transformer layers, and emits softmax-normalized
per-response-token loss weights."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import layers as ly
from .autodiff import ParamSet, Tensor
from .layers import ModelConfig
from .student import Batch, encoder_param_names


def init_teacher(rng: np.random.Generator, cfg: ModelConfig) -> ParamSet:
    p = ParamSet()
    for i in range(cfg.num_teacher_layers):
        p.update(ly.init_transformer_layer(rng, cfg, f"teacher.t{i}"))
    p["teacher.W"] = ly.param(rng, (cfg.hidden_dim, 1))
    return p


def _merged_params(student_params: ParamSet, teacher_params: ParamSet) -> ParamSet:
    """Teacher-side view: shared context-encoder (and embedding) parameters
    are detached so neither the teacher ascent nor the student descent
    propagates through the shared encoder via the weight path."""
    shared = set(encoder_param_names(student_params))
    merged = ParamSet({k: (v.detach() if k in shared else v) for k, v in student_params.items() if k in shared})
    merged.update(teacher_params)
    return merged


def teacher_weights(
    context: np.ndarray,
    context_mask: np.ndarray,
    resp: np.ndarray,
    resp_mask: np.ndarray,
    sep_id: int,
    student_params: ParamSet,
    teacher_params: ParamSet,
    cfg: ModelConfig,
) -> Tensor:
    """Per-token weights over response positions: (B, Lr), rows sum to 1."""
    if resp.shape[1] == 0 or not resp_mask.any():
        raise ValueError("teacher_weights: empty response")
    B, Lc = context.shape
    Lr = resp.shape[1]
    params = _merged_params(student_params, teacher_params)
    cat_ids = np.concatenate([context, np.full((B, 1), sep_id, dtype=np.int64), resp], axis=1)
    cat_mask = np.concatenate([context_mask, np.ones((B, 1)), resp_mask], axis=1)
    resp_pos_mask = np.concatenate([np.zeros((B, Lc + 1)), resp_mask], axis=1)

    h1 = ly.bigru_encode(cat_ids, cat_mask, params["embed.table"], params, cfg, "encC")
    h2 = h1.states
    for i in range(cfg.num_teacher_layers):
        h2 = ly.transformer_encoder_layer(h2, cat_mask, params, f"teacher.t{i}", cfg)
    logits = ad.reshape(ad.matmul(h2, params["teacher.W"]), (B, Lc + 1 + Lr))
    masked = logits + Tensor((1.0 - resp_pos_mask) * ly.NEG_INF)
    probs = ad.softmax_last(masked)
    idx = np.broadcast_to(np.arange(Lc + 1, Lc + 1 + Lr), (B, Lr)).copy()
    return ad.take_along_last(probs, idx)


def batch_teacher_weights(batch: Batch, sep_id: int, student_params: ParamSet, teacher_params: ParamSet, cfg: ModelConfig) -> Tensor:
    return teacher_weights(
        batch.context, batch.context_mask, batch.resp_gold, batch.resp_mask,
        sep_id, student_params, teacher_params, cfg,
    )


def uniform_weights(resp_mask: np.ndarray) -> Tensor:
    return Tensor(resp_mask / resp_mask.sum(axis=-1, keepdims=True))


def weighted_loss(token_losses: Tensor, omega: Tensor) -> Tensor:
    """Dot product of per-token losses and weights (row-wise for batches)."""
    if token_losses.shape != omega.shape:
        raise ad.ShapeError(f"weighted_loss: {token_losses.shape} vs {omega.shape}")
    if token_losses.ndim == 1:
        return ad.dot(token_losses, omega)
    return ad.sum_(token_losses * omega, axis=-1)


def weight_regularizer(omega: Tensor) -> Tensor:
    """Mean squared L2 norm of the weight rows; minimized at uniform, so
    adding it to the teacher's ascent objective pushes weights apart."""
    sq = ad.sum_(omega * omega, axis=-1)
    return ad.mean(sq) if sq.ndim > 0 else sq
