"""Command-line interface: corpus generation, meta-training, low-resource
adaptation, evaluation, and token-weight visualization.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Each command takes a single --seed; multi-run commands derive run r's seed
as seed + r.
"""

from __future__ import annotations

import argparse
import glob as globlib
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import corpus as cp
from . import metrics as mx
from . import student as st
from . import teacher as te
from . import trainer as tr
from .autodiff import ParamSet, Tensor
from .layers import ModelConfig
from .student import StudentConfig
from .trainer import TrainerConfig

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -------------------------------------------------------------------- config


def load_configs(config_path: str | None, vocab_size: int, overrides: dict) -> tuple[StudentConfig, TrainerConfig]:
    doc = {}
    if config_path:
        try:
            doc = json.loads(Path(config_path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise cp.CorpusError(f"cannot read config {config_path}: {e}")
    model_doc = dict(doc.get("model", {}))
    model_doc["vocab_size"] = vocab_size
    student_doc = dict(doc.get("student", {}))
    trainer_doc = dict(doc.get("trainer", {}))
    for key, value in overrides.items():
        if value is None:
            continue
        trainer_doc[key] = value
    try:
        student_cfg = StudentConfig(model=ModelConfig(**model_doc), **student_doc)
        trainer_cfg = TrainerConfig(**trainer_doc)
    except (TypeError, ValueError) as e:
        raise UsageError(f"bad configuration: {e}")
    return student_cfg, trainer_cfg


def _load_corpus(path: str) -> cp.Corpus:
    try:
        return cp.load_corpus(path)
    except OSError as e:
        raise cp.CorpusError(f"cannot read corpus {path}: {e}")


# ------------------------------------------------------------------ commands


def cmd_gen_data(args) -> int:
    corpus = cp.synth_corpus(args.seed, args.domains, args.dialogs, overlap=args.overlap)
    cp.save_corpus(corpus, args.out)
    print(f"wrote {args.out}: {len(corpus.domains)} domains, {len(corpus.dialogs)} dialogs")
    return EXIT_OK


def cmd_train(args) -> int:
    corpus = _load_corpus(args.corpus)
    vocab = cp.build_vocab(corpus)
    overrides = {
        "seed": args.seed,
        "max_epochs": args.max_epochs,
        "steps_per_epoch": args.steps_per_epoch,
        "batch_size": args.batch_size,
        "teacher_enabled": None if args.teacher is None else args.teacher == "on",
    }
    student_cfg, trainer_cfg = load_configs(args.config, len(vocab), overrides)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resume_path = out / "model.ckpt"
    state = None
    if args.resume:
        state = tr.load_state(resume_path)
        print(f"resumed from {resume_path} at epoch {state.epoch}")
    state = tr.train(corpus, vocab, args.target, student_cfg, trainer_cfg, state=state, log=print)
    tr.save_state(resume_path, state)
    with open(out / "loss_trace.csv", "w") as f:
        f.write("step,loss\n")
        for i, loss in enumerate(state.loss_trace):
            f.write(f"{i},{loss!r}\n")
    source = [d for d in corpus.domains if d != args.target]
    print(f"trained on {','.join(source)} (target {args.target} held out)")
    print(f"wrote {resume_path} after {state.epoch} epochs")
    return EXIT_OK


def cmd_adapt(args) -> int:
    state = tr.load_state(args.checkpoint)
    corpus = _load_corpus(args.corpus)
    target_ids = corpus.domain_dialog_ids(args.target)
    if not target_ids:
        raise cp.CorpusError(f"no dialogs for target domain '{args.target}'")
    if args.adapt_dialogs > len(target_ids):
        raise cp.CorpusError(
            f"adapt-dialogs {args.adapt_dialogs} exceeds target domain size {len(target_ids)}"
        )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = state.trainer_cfg
    if args.adapt_steps is not None:
        cfg.adapt_steps = args.adapt_steps
    manifest = {"target": args.target, "runs": []}
    for run in range(args.runs):
        run_seed = args.seed + run
        splits = cp.split_corpus(target_ids, {"adapt": args.adapt_dialogs, "test": None}, seed=run_seed)
        rng = np.random.default_rng(run_seed)
        adapted = tr.adapt_to_domain(
            state.student, state.teacher if cfg.teacher_enabled else None,
            corpus, state.vocab, args.target, splits["adapt"],
            state.student_cfg, cfg, rng,
        )
        path = out / f"adapted_run{run}.ckpt"
        meta = {
            "kind": "adapted",
            "domain": args.target,
            "run": run,
            "seed": run_seed,
            "adapt_ids": splits["adapt"],
            "test_ids": splits["test"],
            "student_cfg": asdict(state.student_cfg),
            "vocab": state.vocab.itos,
            "config_hash": tr.config_hash(state.student_cfg, cfg),
        }
        tr.checkpoint_save(path, meta, {n: t.data for n, t in adapted.items()})
        manifest["runs"].append({"run": run, "seed": run_seed, "checkpoint": path.name})
        print(f"run {run}: adapted on {len(splits['adapt'])} dialogs -> {path}")
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return EXIT_OK


def _load_adapted(path: str) -> tuple[dict, ParamSet, StudentConfig, cp.Vocab]:
    meta, arrays = tr.checkpoint_load(path)
    if meta.get("kind") != "adapted":
        raise tr.CheckpointError(f"{path}: not an adapted-model checkpoint")
    params = ParamSet({n: Tensor(a, requires_grad=True) for n, a in arrays.items()})
    scfg_doc = dict(meta["student_cfg"])
    scfg_doc["model"] = ModelConfig(**scfg_doc["model"])
    cfg = StudentConfig(**scfg_doc)
    vocab = cp.Vocab(meta["vocab"][len(cp.RESERVED):])
    return meta, params, cfg, vocab


def cmd_eval(args) -> int:
    paths = sorted(globlib.glob(args.checkpoints))
    if not paths:
        raise cp.CorpusError(f"no checkpoints match '{args.checkpoints}'")
    corpus = _load_corpus(args.corpus)
    report = mx.EvalReport()
    for path in paths:
        meta, params, cfg, vocab = _load_adapted(path)
        report.config_hash = meta.get("config_hash", "")
        test_ids = meta.get("test_ids") or corpus.domain_dialog_ids(meta["domain"])
        metrics = mx.evaluate_run(params, cfg, vocab, corpus, test_ids)
        report.add_run(meta["domain"], meta["run"], metrics)
        print(f"{path}: " + " ".join(f"{m}={metrics[m] * 100:.1f}" for m in mx.METRIC_NAMES))
    Path(args.out + ".json").write_text(report.to_json())
    Path(args.out + ".csv").write_text(report.to_csv())
    avg = report.mean()
    print("average: " + " ".join(f"{m}={avg[m] * 100:.1f}" for m in mx.METRIC_NAMES))
    return EXIT_OK


# ------------------------------------------------------------- visualization


def render_html(rows: list[tuple[list[str], np.ndarray]], title: str = "token weights") -> str:
    """One heatmap line per (tokens, weights) row; background intensity is
    relative to the maximum weight within the same sentence."""
    lines = [
        "<!DOCTYPE html>",
        "<html><head><meta charset='utf-8'>",
        f"<title>{title}</title></head>",
        "<body style='font-family: monospace; line-height: 2.0;'>",
    ]
    for tokens, weights in rows:
        top = float(np.max(weights)) if len(weights) else 1.0
        cells = []
        for tok, w in zip(tokens, weights):
            rel = float(w) / top if top > 0 else 0.0
            cells.append(
                f"<span style='background: rgba(178, 24, 43, {rel:.3f}); "
                f"padding: 2px;' title='{float(w):.4f}'>{tok}</span>"
            )
        lines.append("<div>" + " ".join(cells) + "</div>")
    lines.append("</body></html>")
    return "\n".join(lines) + "\n"


def render_ansi(tokens: list[str], weights: np.ndarray) -> str:
    top = float(np.max(weights)) if len(weights) else 1.0
    parts = []
    for tok, w in zip(tokens, weights):
        rel = float(w) / top if top > 0 else 0.0
        shade = 232 + int(round(rel * 23))  # grayscale ramp
        fg = 30 if rel > 0.5 else 37
        parts.append(f"\x1b[48;5;{shade}m\x1b[{fg}m{tok}\x1b[0m")
    return " ".join(parts)


def _parse_turn_spec(spec: str) -> list[tuple[int, int]]:
    pairs = []
    for chunk in spec.split(","):
        chunk = chunk.strip()
        if not chunk:
            continue
        try:
            d, t = chunk.split(":")
            pairs.append((int(d), int(t)))
        except ValueError:
            raise UsageError(f"bad --turns entry '{chunk}' (expected DIALOG:TURN)")
    if not pairs:
        raise UsageError("--turns selected no turns")
    return pairs


def turn_weights(state: tr.TrainState, corpus: cp.Corpus, dialog_id: int, turn_id: int) -> tuple[list[str], np.ndarray]:
    if not 0 <= dialog_id < len(corpus.dialogs):
        raise cp.CorpusError(f"dialog {dialog_id} out of range")
    dialog = corpus.dialogs[dialog_id]
    if not 0 <= turn_id < len(dialog.turns):
        raise cp.CorpusError(f"turn {turn_id} out of range for dialog {dialog_id}")
    examples = st.make_examples(corpus, state.vocab, [dialog_id])
    batch = st.make_batch([examples[turn_id]])
    with ad.no_grad():
        omega = te.batch_teacher_weights(
            batch, state.vocab.id(cp.SEP_TOKEN), state.student, state.teacher, state.student_cfg.model
        )
    tokens = dialog.turns[turn_id].response_delex + ["<eos>"]
    return tokens, omega.data[0][: len(tokens)]


def cmd_visualize_weights(args) -> int:
    state = tr.load_state(args.checkpoint)
    corpus = _load_corpus(args.corpus)
    rows = [turn_weights(state, corpus, d, t) for d, t in _parse_turn_spec(args.turns)]
    Path(args.out).write_text(render_html(rows))
    for tokens, weights in rows:
        print(render_ansi(tokens, weights))
    print(f"wrote {args.out}")
    return EXIT_OK


# --------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dast", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic multi-domain corpus")
    g.add_argument("--domains", type=int, required=True)
    g.add_argument("--dialogs", type=int, required=True)
    g.add_argument("--overlap", type=float, default=0.5)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="meta-train on all domains except the target")
    t.add_argument("--corpus", required=True)
    t.add_argument("--target", required=True)
    t.add_argument("--config", default=None, help="JSON with model/student/trainer sections")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--max-epochs", type=int, default=None)
    t.add_argument("--steps-per-epoch", type=int, default=None)
    t.add_argument("--batch-size", type=int, default=None)
    t.add_argument("--teacher", choices=["on", "off"], default=None)
    t.add_argument("--resume", action="store_true")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("adapt", help="fine-tune runs on a low-resource target domain")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--corpus", required=True)
    a.add_argument("--target", required=True)
    a.add_argument("--runs", type=int, default=10)
    a.add_argument("--adapt-dialogs", type=int, default=9)
    a.add_argument("--adapt-steps", type=int, default=None)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_adapt)

    e = sub.add_parser("eval", help="evaluate adapted checkpoints, mean and std report")
    e.add_argument("--checkpoints", required=True, help="glob over adapted checkpoints")
    e.add_argument("--corpus", required=True)
    e.add_argument("--out", required=True, help="report path prefix (.json/.csv added)")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("visualize-weights", help="token weight heatmap (HTML + terminal)")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--corpus", required=True)
    v.add_argument("--turns", default="0:0", help="comma-separated DIALOG:TURN pairs")
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_visualize_weights)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (cp.CorpusError, tr.CheckpointError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except ad.NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
