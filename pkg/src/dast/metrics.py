"""Evaluation suite: Inform and Success rates, corpus BLEU-4, Slot F1,
Act F1, and multi-run aggregate reporting.

All rates are computed in [0, 1]; reports render them x100.
"""

from __future__ import annotations

import csv
import io
import json
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import corpus as cp
from . import student as st
from .corpus import BeliefState, Dialog, DialogAct, DomainSchema
from .student import StudentConfig

NAME_PLACEHOLDER = "[value_name]"
METRIC_NAMES = ["inform", "success", "bleu", "slot_f1", "act_f1"]


@dataclass
class DialogPrediction:
    """Free-running per-turn outputs for one dialog."""

    beliefs: list[BeliefState] = field(default_factory=list)
    acts: list[DialogAct] = field(default_factory=list)
    responses: list[list[str]] = field(default_factory=list)


def inform_success(dialog: Dialog, pred: DialogPrediction, schema: DomainSchema) -> tuple[int, int]:
    """Dialog-level task completion.

    inform=1 iff some system response offers an entity placeholder whose
    candidates under the final predicted belief include an entity meeting
    the gold final constraints. Domains with a default entity skip the
    inform check. success=1 iff inform=1 and every requested slot's
    placeholder appears in some response.
    """
    if schema.default_entity:
        inform = 1
    elif not pred.beliefs or not any(NAME_PLACEHOLDER in r for r in pred.responses):
        inform = 0
    else:
        gold_final = dialog.turns[-1].belief.constraints
        informable = set(schema.informable)
        matches, _ = cp.db_query(pred.beliefs[-1], schema)
        inform = int(any(
            all(ent.get(s) == v for s, v in gold_final.items() if s in informable)
            for ent in matches
        ))
    requested = {r for t in dialog.turns for r in t.requested}
    answered = all(any(f"[value_{r}]" in resp for resp in pred.responses) for r in requested)
    return inform, int(inform and answered)


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates: list[list[str]], references: list[list[str]], max_n: int = 4) -> float:
    """Corpus-level BLEU with brevity penalty; add-one smoothing on the
    higher-order n-gram ratios so short perfect matches still score 1."""
    if len(candidates) != len(references):
        raise ValueError("bleu: candidate/reference lists must align")
    clipped = [0] * max_n
    totals = [0] * max_n
    cand_len = ref_len = 0
    for cand, ref in zip(candidates, references):
        cand_len += len(cand)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            counts = _ngrams(cand, n)
            ref_counts = _ngrams(ref, n)
            clipped[n - 1] += sum(min(c, ref_counts[g]) for g, c in counts.items())
            totals[n - 1] += max(len(cand) - n + 1, 0)
    if totals[0] == 0:
        return 0.0
    precisions = [clipped[0] / totals[0]]
    precisions += [(clipped[n] + 1) / (totals[n] + 1) for n in range(1, max_n)]
    if precisions[0] == 0.0:
        return 0.0
    log_mean = sum(math.log(p) for p in precisions) / max_n
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / max(cand_len, 1))
    return bp * math.exp(log_mean)


def _micro_f1(pred_sets: list[set], gold_sets: list[set]) -> float:
    if len(pred_sets) != len(gold_sets):
        raise ValueError("micro F1: prediction/gold lists must align")
    tp = fp = fn = 0
    for p, g in zip(pred_sets, gold_sets):
        tp += len(p & g)
        fp += len(p - g)
        fn += len(g - p)
    if tp + fp + fn == 0:
        return 1.0  # nothing to predict and nothing predicted
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    return 2 * prec * rec / (prec + rec) if prec + rec else 0.0


def slot_f1(pred_beliefs: list[BeliefState], gold_beliefs: list[BeliefState]) -> float:
    """Micro-F1 over (domain, slot, value) triples across aligned turns."""
    return _micro_f1([b.triples() for b in pred_beliefs], [b.triples() for b in gold_beliefs])


def act_f1(pred_acts: list[DialogAct], gold_acts: list[DialogAct]) -> float:
    """Micro-F1 over (domain, act-type, slot) triples across aligned turns."""
    return _micro_f1([set(a.triples) for a in pred_acts], [set(a.triples) for a in gold_acts])


# ------------------------------------------------------------------ running


def predict_dialog(params, cfg: StudentConfig, vocab: cp.Vocab, schema: DomainSchema, dialog: Dialog) -> DialogPrediction:
    """Greedy end-to-end decode of a dialog. The generated belief span is
    carried across turns; the context uses the reference previous response
    (matching how training examples are built)."""
    pred = DialogPrediction()
    prev_belief_toks = [schema.marker]
    prev_resp: list[str] = []
    for turn in dialog.turns:
        context = prev_resp + turn.user
        belief, belief_toks, act_toks, resp_toks = st.predict_turn(
            params, cfg, vocab, schema, prev_belief_toks, context
        )
        pred.beliefs.append(belief)
        pred.acts.append(cp.parse_act_tokens(act_toks, [schema.name]))
        pred.responses.append(resp_toks)
        if belief_toks and belief_toks[0] == schema.marker:
            prev_belief_toks = belief_toks
        else:
            prev_belief_toks = [schema.marker]
        prev_resp = list(turn.response_delex)
    return pred


def evaluate_run(params, cfg: StudentConfig, vocab: cp.Vocab, corpus: cp.Corpus, dialog_ids: list[int]) -> dict[str, float]:
    """All five metrics over a test split, greedy decoding, rates in [0,1]."""
    if not dialog_ids:
        raise ValueError("evaluate_run: empty test split")
    informs, successes = [], []
    cands, refs = [], []
    pred_beliefs, gold_beliefs = [], []
    pred_acts, gold_acts = [], []
    for di in dialog_ids:
        dialog = corpus.dialogs[di]
        schema = corpus.schemas[dialog.domain]
        pred = predict_dialog(params, cfg, vocab, schema, dialog)
        i, s = inform_success(dialog, pred, schema)
        informs.append(i)
        successes.append(s)
        for turn, b, a, r in zip(dialog.turns, pred.beliefs, pred.acts, pred.responses):
            cands.append(r)
            refs.append(list(turn.response_delex))
            pred_beliefs.append(b)
            gold_beliefs.append(turn.belief)
            pred_acts.append(a)
            gold_acts.append(turn.act)
    return {
        "inform": float(np.mean(informs)),
        "success": float(np.mean(successes)),
        "bleu": bleu(cands, refs),
        "slot_f1": slot_f1(pred_beliefs, gold_beliefs),
        "act_f1": act_f1(pred_acts, gold_acts),
    }


# ---------------------------------------------------------------- reporting


@dataclass
class EvalReport:
    """Per-(domain, run) metric rows plus mean/std aggregation."""

    rows: list[dict] = field(default_factory=list)
    config_hash: str = ""

    def add_run(self, domain: str, run: int, metrics: dict[str, float]) -> None:
        row = {"domain": domain, "run": run}
        row.update({m: float(metrics[m]) for m in METRIC_NAMES})
        self.rows.append(row)

    @property
    def run_count(self) -> int:
        return len(self.rows)

    def _select(self, domain: str | None) -> list[dict]:
        rows = [r for r in self.rows if domain is None or r["domain"] == domain]
        if not rows:
            raise ValueError(f"no evaluation rows for domain {domain!r}")
        return rows

    def mean(self, domain: str | None = None) -> dict[str, float]:
        rows = self._select(domain)
        return {m: float(np.mean([r[m] for r in rows])) for m in METRIC_NAMES}

    def std(self, domain: str | None = None) -> dict[str, float]:
        rows = self._select(domain)
        return {m: float(np.std([r[m] for r in rows])) for m in METRIC_NAMES}

    @property
    def domains(self) -> list[str]:
        seen = []
        for r in self.rows:
            if r["domain"] not in seen:
                seen.append(r["domain"])
        return seen

    def to_dict(self) -> dict:
        scale = lambda d: {m: v * 100.0 for m, v in d.items()}
        return {
            "config_hash": self.config_hash,
            "run_count": self.run_count,
            "runs": [
                {**{k: r[k] for k in ("domain", "run")}, **scale({m: r[m] for m in METRIC_NAMES})}
                for r in self.rows
            ],
            "per_domain": {
                d: {"mean": scale(self.mean(d)), "std": scale(self.std(d))} for d in self.domains
            },
            "average": {"mean": scale(self.mean()), "std": scale(self.std())},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["domain", "run"] + METRIC_NAMES)
        for r in self.rows:
            writer.writerow([r["domain"], r["run"]] + [f"{r[m] * 100.0:.2f}" for m in METRIC_NAMES])
        if self.rows:
            avg = self.mean()
            writer.writerow(["average", "mean"] + [f"{avg[m] * 100.0:.2f}" for m in METRIC_NAMES])
        return buf.getvalue()
