"""Neural building blocks: embeddings, GRU encoders/decoders, additive
attention, gated copy mixture, transformer encoder layers, per-token CE.

Everything operates on autodiff Tensors, batched along the leading axis.
Sequences are padded; masks are float arrays with 1 for real positions.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Tensor

NEG_INF = -1e9
LOSS_FLOOR = 1e-12


@dataclass
class ModelConfig:
    vocab_size: int
    embed_dim: int = 50
    hidden_dim: int = 100
    attn_dim: int = 50
    num_heads: int = 5
    num_teacher_layers: int = 2
    ff_mult: int = 4

    def __post_init__(self):
        if self.hidden_dim % self.num_heads != 0:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by {self.num_heads} heads")


@dataclass
class EncoderOutput:
    states: Tensor  # (B, L, H)
    final: Tensor  # (B, H)
    mask: np.ndarray  # (B, L)
    token_ids: np.ndarray  # (B, L)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


def param(rng, shape, kind="glorot"):
    if kind == "zeros":
        data = np.zeros(shape)
    elif kind == "glorot":
        data = _glorot(rng, shape[0], shape[1]) if len(shape) == 2 else rng.uniform(-0.08, 0.08, size=shape)
    else:
        raise ValueError(kind)
    return Tensor(data, requires_grad=True)


# -------------------------------------------------------------------- embed


def init_embedding(rng, cfg: ModelConfig, prefix: str = "embed") -> ParamSet:
    scale = 0.1
    return ParamSet({f"{prefix}.table": Tensor(rng.normal(0, scale, size=(cfg.vocab_size, cfg.embed_dim)), requires_grad=True)})


def embed_lookup(ids: np.ndarray, table: Tensor) -> Tensor:
    return ad.embedding_gather(table, ids)


# ---------------------------------------------------------------------- GRU


def init_gru(rng, input_dim: int, hidden_dim: int, prefix: str) -> ParamSet:
    p = ParamSet()
    for gate in ("z", "r", "h"):
        p[f"{prefix}.Wx_{gate}"] = param(rng, (input_dim, hidden_dim))
        p[f"{prefix}.Wh_{gate}"] = param(rng, (hidden_dim, hidden_dim))
        p[f"{prefix}.b_{gate}"] = param(rng, (hidden_dim,), "zeros")
    return p


def gru_step(x: Tensor, h: Tensor, p: ParamSet, prefix: str) -> Tensor:
    z = ad.sigmoid(ad.matmul(x, p[f"{prefix}.Wx_z"]) + ad.matmul(h, p[f"{prefix}.Wh_z"]) + p[f"{prefix}.b_z"])
    r = ad.sigmoid(ad.matmul(x, p[f"{prefix}.Wx_r"]) + ad.matmul(h, p[f"{prefix}.Wh_r"]) + p[f"{prefix}.b_r"])
    cand = ad.tanh(ad.matmul(x, p[f"{prefix}.Wx_h"]) + ad.matmul(r * h, p[f"{prefix}.Wh_h"]) + p[f"{prefix}.b_h"])
    return (Tensor(1.0) - z) * h + z * cand


def _gru_scan(xs: list[Tensor], mask: np.ndarray, p: ParamSet, prefix: str, hidden_dim: int, reverse=False):
    batch = xs[0].shape[0]
    h = Tensor(np.zeros((batch, hidden_dim)))
    order = range(len(xs) - 1, -1, -1) if reverse else range(len(xs))
    states: dict[int, Tensor] = {}
    for t in order:
        h_new = gru_step(xs[t], h, p, prefix)
        m = Tensor(mask[:, t : t + 1])
        h = m * h_new + (Tensor(1.0) - m) * h
        states[t] = h
    return [states[t] for t in range(len(xs))], h


def init_bigru_encoder(rng, cfg: ModelConfig, prefix: str) -> ParamSet:
    p = ParamSet()
    p.update(init_gru(rng, cfg.embed_dim, cfg.hidden_dim, f"{prefix}.fw"))
    p.update(init_gru(rng, cfg.embed_dim, cfg.hidden_dim, f"{prefix}.bw"))
    # project 2H concat back to H so downstream widths stay uniform
    p[f"{prefix}.proj"] = param(rng, (2 * cfg.hidden_dim, cfg.hidden_dim))
    return p


def bigru_encode(ids: np.ndarray, mask: np.ndarray, embedding: Tensor, p: ParamSet, cfg: ModelConfig, prefix: str) -> EncoderOutput:
    if ids.shape[1] == 0:
        raise ValueError("bigru_encode: empty sequence")
    emb = embed_lookup(ids, embedding)  # (B, L, E)
    xs = [emb[:, t, :] for t in range(ids.shape[1])]
    fw_states, fw_final = _gru_scan(xs, mask, p, f"{prefix}.fw", cfg.hidden_dim)
    bw_states, bw_final = _gru_scan(xs, mask, p, f"{prefix}.bw", cfg.hidden_dim, reverse=True)
    per_pos = [ad.matmul(ad.concat([f, b], axis=1), p[f"{prefix}.proj"]) for f, b in zip(fw_states, bw_states)]
    states = ad.stack(per_pos, axis=1)  # (B, L, H)
    final = ad.matmul(ad.concat([fw_final, bw_final], axis=1), p[f"{prefix}.proj"])
    return EncoderOutput(states=states, final=final, mask=mask, token_ids=ids)


# ---------------------------------------------------------------- attention


def init_attention(rng, cfg: ModelConfig, prefix: str) -> ParamSet:
    return ParamSet(
        {
            f"{prefix}.Wq": param(rng, (cfg.hidden_dim, cfg.attn_dim)),
            f"{prefix}.Wk": param(rng, (cfg.hidden_dim, cfg.attn_dim)),
            f"{prefix}.v": param(rng, (cfg.attn_dim, 1)),
        }
    )


def attend(query: Tensor, keys: Tensor, mask: np.ndarray, p: ParamSet, prefix: str) -> tuple[Tensor, Tensor]:
    """Additive attention. query (B,H), keys (B,L,H) -> context (B,H), weights (B,L)."""
    B, L, _ = keys.shape
    proj_k = ad.matmul(keys, p[f"{prefix}.Wk"])  # (B, L, A)
    proj_q = ad.reshape(ad.matmul(query, p[f"{prefix}.Wq"]), (B, 1, -1))
    scores = ad.reshape(ad.matmul(ad.tanh(proj_k + proj_q), p[f"{prefix}.v"]), (B, L))
    scores = scores + Tensor((1.0 - mask) * NEG_INF)  # pad -> -1e9
    weights = ad.softmax_last(scores)
    ctx = ad.sum_(keys * ad.reshape(weights, (B, L, 1)), axis=1)
    return ctx, weights


# -------------------------------------------------------- copy-mix decoding


def decode_step_with_copy(
    gen_logits: Tensor,
    copy_scores: Tensor,
    source_ids: np.ndarray,
    source_mask: np.ndarray,
    gate: Tensor,
    vocab_size: int,
) -> Tensor:
    """Mix generation softmax with a copy distribution over source tokens.

    gen_logits (B,V); copy_scores (B,Ls); gate (B,1) in [0,1].
    Returns the final (B,V) distribution: (1-g)*gen + g*copy.
    """
    gen = ad.softmax_last(gen_logits)
    masked = copy_scores + Tensor((1.0 - source_mask) * NEG_INF)
    copy_dist = ad.softmax_last(masked)  # (B, Ls)
    copy_vocab = ad.scatter_add_last(copy_dist, source_ids, vocab_size)
    return (Tensor(1.0) - gate) * gen + gate * copy_vocab


# ------------------------------------------------------ transformer encoder


def init_transformer_layer(rng, cfg: ModelConfig, prefix: str) -> ParamSet:
    H = cfg.hidden_dim
    p = ParamSet()
    for name in ("Wq", "Wk", "Wv", "Wo"):
        p[f"{prefix}.{name}"] = param(rng, (H, H))
    p[f"{prefix}.ff1"] = param(rng, (H, cfg.ff_mult * H))
    p[f"{prefix}.ff1_b"] = param(rng, (cfg.ff_mult * H,), "zeros")
    p[f"{prefix}.ff2"] = param(rng, (cfg.ff_mult * H, H))
    p[f"{prefix}.ff2_b"] = param(rng, (H,), "zeros")
    for ln in ("ln1", "ln2"):
        p[f"{prefix}.{ln}_g"] = Tensor(np.ones(H), requires_grad=True)
        p[f"{prefix}.{ln}_b"] = Tensor(np.zeros(H), requires_grad=True)
    return p


def _split_heads(x: Tensor, num_heads: int) -> Tensor:
    B, L, H = x.shape
    return ad.transpose(ad.reshape(x, (B, L, num_heads, H // num_heads)), (0, 2, 1, 3))


def multi_head_self_attention(x: Tensor, mask: np.ndarray, p: ParamSet, prefix: str, cfg: ModelConfig) -> tuple[Tensor, Tensor]:
    B, L, H = x.shape
    nh, dk = cfg.num_heads, H // cfg.num_heads
    q = _split_heads(ad.matmul(x, p[f"{prefix}.Wq"]), nh)  # (B, nh, L, dk)
    k = _split_heads(ad.matmul(x, p[f"{prefix}.Wk"]), nh)
    v = _split_heads(ad.matmul(x, p[f"{prefix}.Wv"]), nh)
    scores = ad.matmul(q, ad.transpose(k)) * Tensor(1.0 / np.sqrt(dk))  # (B, nh, L, L)
    key_mask = (1.0 - mask)[:, None, None, :] * NEG_INF
    attn = ad.softmax_last(scores + Tensor(key_mask))
    mixed = ad.matmul(attn, v)  # (B, nh, L, dk)
    merged = ad.reshape(ad.transpose(mixed, (0, 2, 1, 3)), (B, L, H))
    return ad.matmul(merged, p[f"{prefix}.Wo"]), attn


def transformer_encoder_layer(x: Tensor, mask: np.ndarray, p: ParamSet, prefix: str, cfg: ModelConfig) -> Tensor:
    attn_out, _ = multi_head_self_attention(x, mask, p, prefix, cfg)
    h = ad.layer_norm(x + attn_out, p[f"{prefix}.ln1_g"], p[f"{prefix}.ln1_b"])
    ff = ad.matmul(ad.relu(ad.matmul(h, p[f"{prefix}.ff1"]) + p[f"{prefix}.ff1_b"]), p[f"{prefix}.ff2"]) + p[f"{prefix}.ff2_b"]
    return ad.layer_norm(h + ff, p[f"{prefix}.ln2_g"], p[f"{prefix}.ln2_b"])


# ------------------------------------------------------------ cross-entropy


def cross_entropy_per_token(dists: Tensor, gold_ids: np.ndarray) -> Tensor:
    """-log p(gold) per position. dists (B, L, V) are probabilities."""
    if dists.shape[:2] != gold_ids.shape:
        raise ValueError(f"cross_entropy_per_token: dists {dists.shape} vs gold {gold_ids.shape}")
    picked = ad.reshape(ad.take_along_last(dists, gold_ids[..., None]), gold_ids.shape)
    if (picked.data < LOSS_FLOOR).any():
        # zero-probability gold: clamp so the loss stays finite
        warnings.warn("gold token probability clamped at loss floor", RuntimeWarning)
        picked = picked + Tensor((picked.data < LOSS_FLOOR) * LOSS_FLOOR)
    return ad.neg(ad.log(picked))
