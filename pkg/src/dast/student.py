"""End-to-end dialog student: two bi-GRU encoders, three attention/copy GRU
decoders, database match vector, and per-token loss emission."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import corpus as cp
from . import layers as ly
from .autodiff import ParamSet, Tensor
from .corpus import EOS, GO, PAD, Corpus, Vocab
from .layers import EncoderOutput, ModelConfig


@dataclass
class StudentConfig:
    model: ModelConfig
    max_belief_len: int = 30
    max_act_len: int = 20
    max_resp_len: int = 60
    use_batch_norm: bool = False


# decoder wiring: (attention sources, init-state inputs)
DECODERS = {
    "decB": 2,  # attends over h_B, h_C
    "decA": 2,  # attends over encoded B_t, h_C
    "decR": 3,  # attends over encoded B_t, encoded A_t, h_C
}


def init_student(rng: np.random.Generator, cfg: StudentConfig) -> ParamSet:
    m = cfg.model
    p = ParamSet()
    p.update(ly.init_embedding(rng, m))
    p.update(ly.init_bigru_encoder(rng, m, "encB"))
    p.update(ly.init_bigru_encoder(rng, m, "encC"))
    p["match.embed"] = ly.param(rng, (cp.MATCH_BUCKETS, m.hidden_dim))
    H, E = m.hidden_dim, m.embed_dim
    init_extra = {"decB": 2 * H, "decA": 3 * H, "decR": 4 * H}
    for dec, n_src in DECODERS.items():
        for i in range(n_src):
            p.update(ly.init_attention(rng, m, f"{dec}.att{i}"))
        p.update(ly.init_gru(rng, E + n_src * H, H, f"{dec}.gru"))
        p[f"{dec}.init"] = ly.param(rng, (init_extra[dec], H))
        p[f"{dec}.out"] = ly.param(rng, ((n_src + 1) * H, m.vocab_size))
        p[f"{dec}.out_b"] = ly.param(rng, (m.vocab_size,), "zeros")
        p[f"{dec}.copy"] = ly.param(rng, (H, H))
        p[f"{dec}.gate"] = ly.param(rng, ((n_src + 1) * H, 1))
        p[f"{dec}.gate_b"] = ly.param(rng, (1,), "zeros")
    return p


def encoder_param_names(params: ParamSet) -> list[str]:
    """Names of the context-encoder (and embedding) parameters the teacher
    shares with the student."""
    return [n for n in params.names() if n.startswith("encC.") or n.startswith("embed.")]


# ------------------------------------------------------------------- batches


@dataclass
class TurnExample:
    domain: str
    prev_belief: list[int]
    context: list[int]
    belief_gold: list[int]  # includes <eos>
    act_gold: list[int]
    resp_gold: list[int]
    match_vec: np.ndarray
    gold_turn: cp.Turn | None = None


@dataclass
class Batch:
    domain: str
    prev_belief: np.ndarray
    prev_belief_mask: np.ndarray
    context: np.ndarray
    context_mask: np.ndarray
    belief_gold: np.ndarray
    belief_mask: np.ndarray
    act_gold: np.ndarray
    act_mask: np.ndarray
    resp_gold: np.ndarray
    resp_mask: np.ndarray
    match_vec: np.ndarray
    examples: list[TurnExample] = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.context.shape[0]


def make_examples(corpus: Corpus, vocab: Vocab, dialog_ids: list[int]) -> list[TurnExample]:
    out = []
    for di in dialog_ids:
        dlg = corpus.dialogs[di]
        schema = corpus.schemas[dlg.domain]
        prev_belief_toks = [schema.marker]
        prev_resp: list[str] = []
        for turn in dlg.turns:
            context_toks = prev_resp + turn.user
            belief_toks = cp.serialize_belief_span(turn.belief, schema)
            act_toks = cp.act_tokens(turn.act)
            _, match_vec = cp.db_query(turn.belief, schema)
            out.append(
                TurnExample(
                    domain=dlg.domain,
                    prev_belief=vocab.encode(prev_belief_toks),
                    context=vocab.encode(context_toks),
                    belief_gold=vocab.encode(belief_toks) + [EOS],
                    act_gold=vocab.encode(act_toks) + [EOS],
                    resp_gold=vocab.encode(turn.response_delex) + [EOS],
                    match_vec=match_vec,
                    gold_turn=turn,
                )
            )
            prev_belief_toks = belief_toks
            prev_resp = list(turn.response_delex)
    return out


def _pad(seqs: list[list[int]]) -> tuple[np.ndarray, np.ndarray]:
    L = max(len(s) for s in seqs)
    ids = np.full((len(seqs), L), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), L))
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = 1.0
    return ids, mask

def make_batch(examples: list[TurnExample]) -> Batch:
    if not examples:
        raise ValueError("empty batch")
    pb, pbm = _pad([e.prev_belief for e in examples])
    ctx, ctxm = _pad([e.context for e in examples])
    bg, bgm = _pad([e.belief_gold for e in examples])
    ag, agm = _pad([e.act_gold for e in examples])
    rg, rgm = _pad([e.resp_gold for e in examples])
    return Batch(
        domain=examples[0].domain,
        prev_belief=pb, prev_belief_mask=pbm,
        context=ctx, context_mask=ctxm,
        belief_gold=bg, belief_mask=bgm,
        act_gold=ag, act_mask=agm,
        resp_gold=rg, resp_mask=rgm,
        match_vec=np.stack([e.match_vec for e in examples]),
        examples=list(examples),
    )


# ------------------------------------------------------------------ forward


def encode_inputs(prev_belief, prev_belief_mask, context, context_mask, params: ParamSet, cfg: StudentConfig):
    if context.shape[1] == 0 or not context_mask.any():
        raise ValueError("empty dialog context")
    emb = params["embed.table"]
    h_B = ly.bigru_encode(prev_belief, prev_belief_mask, emb, params, cfg.model, "encB")
    h_C = ly.bigru_encode(context, context_mask, emb, params, cfg.model, "encC")
    return h_B, h_C


def encode_span(ids, mask, params: ParamSet, cfg: StudentConfig) -> EncoderOutput:
    # gold/generated token spans (belief, act) are re-encoded with Encoder_B
    return ly.bigru_encode(ids, mask, params["embed.table"], params, cfg.model, "encB")


def _decoder_step(params, cfg, dec, h, inp_emb, sources, copy_src):
    ctxs = []
    for i, src in enumerate(sources):
        ctx, _ = ly.attend(h, src.states, src.mask, params, f"{dec}.att{i}")
        ctxs.append(ctx)
    x = ad.concat([inp_emb] + ctxs, axis=1)
    h = ly.gru_step(x, h, params, f"{dec}.gru")
    feat = ad.concat([h] + ctxs, axis=1)
    gen_logits = ad.matmul(feat, params[f"{dec}.out"]) + params[f"{dec}.out_b"]
    if cfg.use_batch_norm and gen_logits.shape[0] > 1:
        mu = Tensor(gen_logits.data.mean(axis=0, keepdims=True))
        sd = Tensor(gen_logits.data.std(axis=0, keepdims=True) + 1e-5)
        gen_logits = (gen_logits - mu) / sd
    src_states, src_ids, src_mask = copy_src
    copy_scores = ad.sum_(ad.matmul(src_states, params[f"{dec}.copy"]) * ad.reshape(h, (h.shape[0], 1, -1)), axis=2)
    gate = ad.sigmoid(ad.matmul(feat, params[f"{dec}.gate"]) + params[f"{dec}.gate_b"])
    dist = ly.decode_step_with_copy(gen_logits, copy_scores, src_ids, src_mask, gate, cfg.model.vocab_size)
    return h, dist


def _decode_forced(params, cfg, dec, init_vec, sources, copy_src, gold_ids, gold_mask):
    B, L = gold_ids.shape
    h = ad.tanh(ad.matmul(init_vec, params[f"{dec}.init"]))
    inputs = np.concatenate([np.full((B, 1), GO, dtype=np.int64), gold_ids[:, :-1]], axis=1)
    emb_all = ly.embed_lookup(inputs, params["embed.table"])
    dists = []
    for t in range(L):
        h, dist = _decoder_step(params, cfg, dec, h, emb_all[:, t, :], sources, copy_src)
        dists.append(dist)
    dist_seq = ad.stack(dists, axis=1)  # (B, L, V)
    losses = ly.cross_entropy_per_token(dist_seq, gold_ids) * Tensor(gold_mask)
    return losses, dist_seq


def _decode_greedy(params, cfg, dec, init_vec, sources, copy_src, max_len: int):
    B = init_vec.shape[0]
    h = ad.tanh(ad.matmul(init_vec, params[f"{dec}.init"]))
    tokens = np.full((B, 0), PAD, dtype=np.int64)
    cur = np.full((B,), GO, dtype=np.int64)
    done = np.zeros(B, dtype=bool)
    outs = []
    with ad.no_grad():
        for _ in range(max_len):
            emb = ly.embed_lookup(cur, params["embed.table"])
            h, dist = _decoder_step(params, cfg, dec, h, emb, sources, copy_src)
            cur = dist.data.argmax(axis=1)
            outs.append(np.where(done, PAD, cur))
            done |= cur == EOS
            if done.all():
                break
    if outs:
        tokens = np.stack(outs, axis=1)
    return tokens


def _strip(ids: np.ndarray) -> list[int]:
    out = []
    for i in ids:
        if i in (EOS, PAD):
            break
        out.append(int(i))
    return out


def _match_feature(match_vec: np.ndarray, params: ParamSet) -> Tensor:
    return ad.matmul(Tensor(match_vec), params["match.embed"])


def decode_belief(h_B, h_C, params, cfg, gold_ids=None, gold_mask=None, copy_src=None):
    init_vec = ad.concat([h_B.final, h_C.final], axis=1)
    sources = [h_B, h_C]
    if gold_ids is not None:
        return _decode_forced(params, cfg, "decB", init_vec, sources, copy_src, gold_ids, gold_mask)
    return _decode_greedy(params, cfg, "decB", init_vec, sources, copy_src, cfg.max_belief_len)


def decode_act(b_enc, match_vec, h_C, params, cfg, gold_ids=None, gold_mask=None, copy_src=None):
    init_vec = ad.concat([h_C.final, b_enc.final, _match_feature(match_vec, params)], axis=1)
    sources = [b_enc, h_C]
    if gold_ids is not None:
        return _decode_forced(params, cfg, "decA", init_vec, sources, copy_src, gold_ids, gold_mask)
    return _decode_greedy(params, cfg, "decA", init_vec, sources, copy_src, cfg.max_act_len)


def decode_response(b_enc, match_vec, a_enc, h_C, params, cfg, gold_ids=None, gold_mask=None, copy_src=None):
    init_vec = ad.concat([h_C.final, b_enc.final, a_enc.final, _match_feature(match_vec, params)], axis=1)
    sources = [b_enc, a_enc, h_C]
    if gold_ids is not None:
        return _decode_forced(params, cfg, "decR", init_vec, sources, copy_src, gold_ids, gold_mask)
    return _decode_greedy(params, cfg, "decR", init_vec, sources, copy_src, cfg.max_resp_len)


@dataclass
class TurnPrediction:
    belief_losses: Tensor  # (B, Lb) masked per-token CE
    act_losses: Tensor
    resp_losses: Tensor


def student_turn_loss(batch: Batch, params: ParamSet, omega: Tensor | None, cfg: StudentConfig):
    """Teacher-forced multi-task loss for one batch of turns.

    loss = mean(L_B) + mean(L_A) + dot(L_R, omega), averaged over the
    batch. `omega=None` means uniform weights over response tokens, which
    reduces the response term to mean(L_R) exactly.
    """
    h_B, h_C = encode_inputs(batch.prev_belief, batch.prev_belief_mask, batch.context, batch.context_mask, params, cfg)
    copy_src = (h_C.states, batch.context, batch.context_mask)
    L_B, _ = decode_belief(h_B, h_C, params, cfg, batch.belief_gold, batch.belief_mask, copy_src)
    b_enc = encode_span(batch.belief_gold, batch.belief_mask, params, cfg)
    L_A, _ = decode_act(b_enc, batch.match_vec, h_C, params, cfg, batch.act_gold, batch.act_mask, copy_src)
    a_enc = encode_span(batch.act_gold, batch.act_mask, params, cfg)
    L_R, _ = decode_response(b_enc, batch.match_vec, a_enc, h_C, params, cfg, batch.resp_gold, batch.resp_mask, copy_src)

    def masked_mean(losses, mask):
        return ad.sum_(losses, axis=1) / Tensor(mask.sum(axis=1))

    if omega is None:
        # uniform weights through the same dot-product path, so a plain
        # mean-CE loss and a uniformly weighted loss are bitwise identical
        omega = Tensor(batch.resp_mask / batch.resp_mask.sum(axis=1, keepdims=True))
    if omega.shape != L_R.shape:
        raise ValueError(f"omega shape {omega.shape} != response loss shape {L_R.shape}")
    resp_term = ad.sum_(L_R * omega, axis=1)
    per_example = masked_mean(L_B, batch.belief_mask) + masked_mean(L_A, batch.act_mask) + resp_term
    loss = ad.mean(per_example)
    return loss, TurnPrediction(belief_losses=L_B, act_losses=L_A, resp_losses=L_R)


# --------------------------------------------------------------- free decode


def predict_turn(params, cfg: StudentConfig, vocab: Vocab, schema: cp.DomainSchema, prev_belief_toks: list[str], context_toks: list[str]):
    """Greedy end-to-end decode of one turn. The generated belief feeds the
    database query; all downstream decoders consume generated outputs."""
    pb = np.array([vocab.encode(prev_belief_toks)], dtype=np.int64)
    ctx = np.array([vocab.encode(context_toks)], dtype=np.int64)
    with ad.no_grad():
        h_B, h_C = encode_inputs(pb, np.ones_like(pb, dtype=float), ctx, np.ones_like(ctx, dtype=float), params, cfg)
        copy_src = (h_C.states, ctx, np.ones_like(ctx, dtype=float))
        belief_ids = decode_belief(h_B, h_C, params, cfg, copy_src=copy_src)
        belief_toks = vocab.decode(_strip(belief_ids[0])) if belief_ids.size else []
        try:
            belief = cp.parse_belief_span(belief_toks, schema)
        except cp.CorpusError:
            belief = cp.BeliefState(domain=schema.name)
        _, match_vec = cp.db_query(belief, schema)
        b_ids = np.array([vocab.encode(belief_toks) + [EOS]]) if belief_toks else np.array([[EOS]])
        b_enc = encode_span(b_ids, np.ones_like(b_ids, dtype=float), params, cfg)
        act_ids = decode_act(b_enc, match_vec[None, :], h_C, params, cfg, copy_src=copy_src)
        act_toks = vocab.decode(_strip(act_ids[0])) if act_ids.size else []
        a_ids = np.array([vocab.encode(act_toks) + [EOS]]) if act_toks else np.array([[EOS]])
        a_enc = encode_span(a_ids, np.ones_like(a_ids, dtype=float), params, cfg)
        resp_ids = decode_response(b_enc, match_vec[None, :], a_enc, h_C, params, cfg, copy_src=copy_src)
        resp_toks = vocab.decode(_strip(resp_ids[0])) if resp_ids.size else []
    return belief, belief_toks, act_toks, resp_toks
