"""Adversarial meta-training loop: inner fast-weight updates, outer student
descent and teacher ascent, validation-stage teacher updates, learning-rate
schedule, early stopping, checkpointing, and target-domain adaptation."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import corpus as cp
from . import student as st
from . import teacher as te
from .autodiff import ParamSet, Tensor
from .layers import ModelConfig
from .student import Batch, StudentConfig


@dataclass
class TrainerConfig:
    inner_lr: float = 0.005  # alpha
    student_lr: float = 0.005  # beta
    teacher_lr: float = 0.005  # gamma
    reg_lambda: float = 0.01
    batch_size: int = 32
    decay_factor: float = 0.5
    decay_patience: int = 3
    stop_patience: int = 5
    max_epochs: int = 30
    steps_per_epoch: int = 25
    second_order: bool = False
    teacher_enabled: bool = True
    force_uniform: bool = False  # ablation: compute weights but use uniform
    reuse_support_batch: bool = False
    optimizer: str = "adam"
    grad_clip: float = 5.0
    val_ratio: float = 0.1
    adapt_steps: int = 50
    adapt_patience: int = 10
    seed: int = 0

    def __post_init__(self):
        if min(self.inner_lr, self.student_lr, self.teacher_lr) <= 0:
            raise ValueError("learning rates must be positive")
        if min(self.decay_patience, self.stop_patience) < 1:
            raise ValueError("patience must be >= 1")

    @property
    def uses_teacher_weights(self) -> bool:
        return self.teacher_enabled and not self.force_uniform


# ----------------------------------------------------------------- optimizers


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: ParamSet, grads: dict[str, np.ndarray], direction: float = -1.0):
        for name, g in grads.items():
            params[name].data += direction * self.lr * g

    def state(self) -> dict:
        return {"kind": "sgd", "lr": self.lr}

    def load_state(self, state: dict, arrays: dict):
        self.lr = state["lr"]

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        return {}


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: ParamSet, grads: dict[str, np.ndarray], direction: float = -1.0):
        self.t += 1
        for name, g in grads.items():
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m += (1 - self.beta1) * (g - m)
            v += (1 - self.beta2) * (g * g - v)
            mhat = m / (1 - self.beta1**self.t)
            vhat = v / (1 - self.beta2**self.t)
            params[name].data += direction * self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def state(self) -> dict:
        return {"kind": "adam", "lr": self.lr, "t": self.t, "names": sorted(self.m)}

    def load_state(self, state: dict, arrays: dict):
        self.lr = state["lr"]
        self.t = state["t"]
        for n in state["names"]:
            self.m[n] = arrays[f"m.{n}"]
            self.v[n] = arrays[f"v.{n}"]

    def state_arrays(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        for n in sorted(self.m):
            out[f"m.{n}"] = self.m[n]
            out[f"v.{n}"] = self.v[n]
        return out


def make_optimizer(kind: str, lr: float):
    if kind == "adam":
        return Adam(lr)
    if kind == "sgd":
        return SGD(lr)
    raise ValueError(f"unknown optimizer '{kind}'")


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    if max_norm <= 0:
        return grads
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        grads = {n: g * scale for n, g in grads.items()}
    return grads


# -------------------------------------------------------------- meta updates


def inner_update(
    params: ParamSet,
    support,
    loss_fn,
    omega,
    alpha: float,
    second_order: bool = False,
) -> ParamSet:
    """One temporary gradient step: M' = M - alpha * grad(loss at M).

    In second-order mode M' tensors stay attached to the graph, so outer
    gradients flow back to M (and the teacher); first-order mode detaches.
    """
    loss, _ = loss_fn(params, support, omega)
    names = params.names()
    grads = ad.grad(loss, params.tensors(), create_graph=second_order)
    fast = ParamSet()
    if second_order:
        a = Tensor(alpha)
        for name, g in zip(names, grads):
            fast[name] = params[name] - a * g
    else:
        for name, g in zip(names, grads):
            fast[name] = Tensor(params[name].data - alpha * g.data, requires_grad=True)
    return fast


def meta_batch_step(
    student_params: ParamSet,
    teacher_params: ParamSet | None,
    tasks: list[tuple],
    cfg: TrainerConfig,
    loss_fn,
    omega_fn,
    opt_student,
    opt_teacher,
    update_student: bool = True,
    update_teacher: bool = True,
) -> float:
    """One adversarial meta-step over sampled source-domain tasks.

    `tasks` is a list of (support_batch, query_batch). Returns the summed
    outer loss. `omega_fn(batch) -> Tensor | None` produces per-token
    weights; None means uniform.
    """
    if not tasks:
        raise ValueError("meta_batch_step: no source domains sampled")
    outer_losses = []
    omegas = []
    fast_sets = []
    for support, query in tasks:
        omega_s = omega_fn(support)
        fast = inner_update(student_params, support, loss_fn, omega_s, cfg.inner_lr, cfg.second_order)
        omega_q = omega_fn(query)
        loss_q, _ = loss_fn(fast, query, omega_q)
        outer_losses.append(loss_q)
        omegas.extend([omega_s, omega_q])
        fast_sets.append(fast)
    total = outer_losses[0]
    for l in outer_losses[1:]:
        total = total + l

    if update_student:
        names = student_params.names()
        if cfg.second_order:
            gs = ad.grad(total, student_params.tensors())
            grads = {n: g.data for n, g in zip(names, gs)}
        else:
            grads = {n: np.zeros_like(student_params[n].data) for n in names}
            for fast in fast_sets:
                gs = ad.grad(total, fast.tensors())
                for n, g in zip(fast.names(), gs):
                    grads[n] += g.data
        opt_student.step(student_params, clip_grads(grads, cfg.grad_clip), direction=-1.0)

    if update_teacher and teacher_params is not None and cfg.uses_teacher_weights:
        obj = total
        if cfg.reg_lambda:
            for om in omegas:
                if om is not None:
                    obj = obj + Tensor(cfg.reg_lambda) * te.weight_regularizer(om)
        gs = ad.grad(obj, teacher_params.tensors())
        tgrads = {n: g.data for n, g in zip(teacher_params.names(), gs)}
        opt_teacher.step(teacher_params, clip_grads(tgrads, cfg.grad_clip), direction=+1.0)

    return float(total.data)


def validation_teacher_step(
    student_params: ParamSet,
    teacher_params: ParamSet | None,
    val_batches: list[Batch],
    val_tasks: list[tuple],
    cfg: TrainerConfig,
    loss_fn,
    omega_fn,
    opt_teacher,
) -> float:
    """Unweighted validation loss at frozen M, then teacher ascent on
    validation tasks. The reported loss never depends on the update."""
    total, count = 0.0, 0
    with ad.no_grad():
        for batch in val_batches:
            loss, _ = loss_fn(student_params, batch, None)
            total += float(loss.data) * batch.size
            count += batch.size
    val_loss = total / max(count, 1)
    if val_tasks and teacher_params is not None and cfg.uses_teacher_weights:
        before = {n: student_params[n].data.copy() for n in student_params.names()}
        meta_batch_step(
            student_params, teacher_params, val_tasks, cfg, loss_fn, omega_fn,
            opt_student=None, opt_teacher=opt_teacher,
            update_student=False, update_teacher=True,
        )
        for n, arr in before.items():
            assert np.array_equal(student_params[n].data, arr)
    return val_loss


def schedule_and_early_stop(history: list[float], cfg: TrainerConfig) -> tuple[float, bool]:
    """Learning-rate multiplier and stop flag from the validation history.

    Improvement means a strictly lower best loss. Each time the
    non-improvement streak reaches a multiple of `decay_patience` the
    multiplier halves; the run stops at `stop_patience`.
    """
    best = float("inf")
    streak = 0
    decays = 0
    stop = False
    for loss in history:
        if loss < best:
            best = loss
            streak = 0
        else:
            streak += 1
            if streak % cfg.decay_patience == 0:
                decays += 1
            if streak >= cfg.stop_patience:
                stop = True
    return cfg.decay_factor**decays, stop


# ------------------------------------------------------------ dialog wiring


@dataclass
class TrainState:
    student_cfg: StudentConfig
    trainer_cfg: TrainerConfig
    vocab: cp.Vocab
    student: ParamSet
    teacher: ParamSet
    opt_student: object
    opt_teacher: object
    rng: np.random.Generator
    epoch: int = 0
    best_val: float = float("inf")
    loss_trace: list[float] = field(default_factory=list)
    val_history: list[float] = field(default_factory=list)


def dialog_loss_fn(cfg: StudentConfig):
    def loss_fn(params: ParamSet, batch: Batch, omega):
        return st.student_turn_loss(batch, params, omega, cfg)

    return loss_fn


def dialog_omega_fn(state_cfg: TrainerConfig, student_cfg: StudentConfig, vocab: cp.Vocab, student: ParamSet, teacher: ParamSet):
    sep_id = vocab.id(cp.SEP_TOKEN)

    def omega_fn(batch: Batch):
        if not state_cfg.teacher_enabled or teacher is None:
            return None
        omega = te.batch_teacher_weights(batch, sep_id, student, teacher, student_cfg.model)
        if state_cfg.force_uniform:
            return None  # weights computed but discarded (ablation mode)
        return omega

    return omega_fn


def init_train_state(corpus: cp.Corpus, vocab: cp.Vocab, student_cfg: StudentConfig, trainer_cfg: TrainerConfig) -> TrainState:
    rng = np.random.default_rng(trainer_cfg.seed)
    student = st.init_student(rng, student_cfg)
    teacher = te.init_teacher(rng, student_cfg.model)
    return TrainState(
        student_cfg=student_cfg,
        trainer_cfg=trainer_cfg,
        vocab=vocab,
        student=student,
        teacher=teacher,
        opt_student=make_optimizer(trainer_cfg.optimizer, trainer_cfg.student_lr),
        opt_teacher=make_optimizer(trainer_cfg.optimizer, trainer_cfg.teacher_lr),
        rng=rng,
    )


def _sample_batch(rng: np.random.Generator, examples: list, size: int) -> Batch:
    idx = rng.integers(len(examples), size=min(size, len(examples)))
    return st.make_batch([examples[i] for i in idx])


def train(
    corpus: cp.Corpus,
    vocab: cp.Vocab,
    target_domain: str,
    student_cfg: StudentConfig,
    trainer_cfg: TrainerConfig,
    state: TrainState | None = None,
    max_meta_steps: int | None = None,
    log=None,
) -> TrainState:
    """Meta-train student and teacher on all domains except the target."""
    if target_domain not in corpus.schemas:
        raise cp.CorpusError(f"unknown target domain '{target_domain}'")
    source_domains = [d for d in corpus.domains if d != target_domain]
    if not source_domains:
        raise cp.CorpusError("no source domains left after excluding target")
    if state is None:
        state = init_train_state(corpus, vocab, student_cfg, trainer_cfg)
    cfg = state.trainer_cfg
    rng = state.rng

    train_ex: dict[str, list] = {}
    val_ex: dict[str, list] = {}
    for d in source_domains:
        ids = corpus.domain_dialog_ids(d)
        splits = cp.split_corpus(ids, {"val": cfg.val_ratio, "train": None}, seed=cfg.seed)
        train_ex[d] = st.make_examples(corpus, vocab, splits["train"])
        val_ex[d] = st.make_examples(corpus, vocab, splits["val"])

    loss_fn = dialog_loss_fn(state.student_cfg)
    omega_fn = dialog_omega_fn(cfg, state.student_cfg, vocab, state.student, state.teacher)
    steps_done = 0

    while state.epoch < cfg.max_epochs:
        for _ in range(cfg.steps_per_epoch):
            tasks = []
            for d in source_domains:
                support = _sample_batch(rng, train_ex[d], cfg.batch_size)
                query = support if cfg.reuse_support_batch else _sample_batch(rng, train_ex[d], cfg.batch_size)
                tasks.append((support, query))
            loss = meta_batch_step(
                state.student, state.teacher, tasks, cfg, loss_fn, omega_fn,
                state.opt_student, state.opt_teacher,
            )
            state.loss_trace.append(loss)
            steps_done += 1
            if max_meta_steps is not None and steps_done >= max_meta_steps:
                return state
        # validation: student early-stop signal first, then teacher ascent
        val_batches = [st.make_batch(v) for v in val_ex.values() if v]
        val_tasks = []
        for d in source_domains:
            if val_ex[d]:
                support = _sample_batch(rng, val_ex[d], cfg.batch_size)
                query = support if cfg.reuse_support_batch else _sample_batch(rng, val_ex[d], cfg.batch_size)
                val_tasks.append((support, query))
        val_loss = validation_teacher_step(
            state.student, state.teacher, val_batches, val_tasks, cfg, loss_fn, omega_fn, state.opt_teacher
        )
        state.val_history.append(val_loss)
        state.best_val = min(state.best_val, val_loss)
        state.epoch += 1
        mult, stop = schedule_and_early_stop(state.val_history, cfg)
        state.opt_student.lr = cfg.student_lr * mult
        state.opt_teacher.lr = cfg.teacher_lr * mult
        if log:
            log(f"epoch {state.epoch}: val_loss={val_loss:.4f} lr_mult={mult:g}")
        if stop:
            break
    return state


def adapt_to_domain(
    student_params: ParamSet,
    teacher_params: ParamSet | None,
    corpus: cp.Corpus,
    vocab: cp.Vocab,
    target_domain: str,
    adapt_dialog_ids: list[int],
    student_cfg: StudentConfig,
    cfg: TrainerConfig,
    rng: np.random.Generator,
) -> ParamSet:
    """Fine-tune a copy of the student on the target adapt split with
    teacher-weighted token losses; the teacher stays frozen throughout."""
    adapted = student_params.clone()
    if cfg.adapt_steps == 0:
        return adapted
    examples = st.make_examples(corpus, vocab, adapt_dialog_ids)
    loss_fn = dialog_loss_fn(student_cfg)
    omega_fn = dialog_omega_fn(cfg, student_cfg, vocab, adapted, teacher_params)
    opt = make_optimizer(cfg.optimizer, cfg.inner_lr)
    full_batch = st.make_batch(examples)

    def split_loss(params):
        with ad.no_grad():
            loss, _ = loss_fn(params, full_batch, omega_fn(full_batch))
        return float(loss.data)

    best_loss = split_loss(adapted)
    best = adapted.clone()
    stale = 0
    teacher_before = None
    if teacher_params is not None:
        teacher_before = {n: teacher_params[n].data.copy() for n in teacher_params.names()}
    for _ in range(cfg.adapt_steps):
        batch = _sample_batch(rng, examples, cfg.batch_size)
        omega = omega_fn(batch)
        loss, _ = loss_fn(adapted, batch, omega)
        gs = ad.grad(loss, adapted.tensors())
        grads = {n: g.data for n, g in zip(adapted.names(), gs)}
        opt.step(adapted, clip_grads(grads, cfg.grad_clip), direction=-1.0)
        cur = split_loss(adapted)
        if cur < best_loss - 1e-12:
            best_loss = cur
            best = adapted.clone()
            stale = 0
        else:
            stale += 1
            if stale >= cfg.adapt_patience:
                break
    if teacher_before is not None:
        for n, arr in teacher_before.items():
            assert np.array_equal(teacher_params[n].data, arr), "teacher must stay frozen during adaptation"
    return best


# --------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"DASTCKPT"
CKPT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serializable: {type(o)}")


def checkpoint_save(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    entries = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype=np.float64)
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"version": CKPT_VERSION, "meta": meta, "arrays": entries}, sort_keys=True, default=_json_default).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack(">Q", len(header)))
        f.write(header)
        for raw in blobs:
            f.write(raw)


def checkpoint_load(path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        with open(path, "rb") as f:
            magic = f.read(len(CKPT_MAGIC))
            if magic != CKPT_MAGIC:
                raise CheckpointError(f"{path}: not a checkpoint file")
            (hlen,) = struct.unpack(">Q", f.read(8))
            header = json.loads(f.read(hlen).decode())
            if header.get("version") != CKPT_VERSION:
                raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
            arrays = {}
            for e in header["arrays"]:
                raw = f.read(e["nbytes"])
                if len(raw) != e["nbytes"]:
                    raise CheckpointError(f"{path}: truncated array data for {e['name']}")
                arrays[e["name"]] = np.frombuffer(raw, dtype=np.float64).reshape(e["shape"]).copy()
    except (struct.error, json.JSONDecodeError, KeyError, OSError) as e:
        raise CheckpointError(f"{path}: corrupt checkpoint ({e})") from e
    return header["meta"], arrays


def config_hash(student_cfg: StudentConfig, trainer_cfg: TrainerConfig) -> str:
    doc = json.dumps({"student": asdict(student_cfg), "trainer": asdict(trainer_cfg)}, sort_keys=True)
    return hashlib.sha256(doc.encode()).hexdigest()[:16]


def vocab_hash(vocab: cp.Vocab) -> str:
    return hashlib.sha256("\x00".join(vocab.itos).encode()).hexdigest()[:16]


def save_state(path, state: TrainState) -> None:
    arrays: dict[str, np.ndarray] = {}
    for n, t in state.student.items():
        arrays[f"student.{n}"] = t.data
    for n, t in state.teacher.items():
        arrays[f"teacher.{n}"] = t.data
    for prefix, opt in (("opt_student", state.opt_student), ("opt_teacher", state.opt_teacher)):
        for n, arr in opt.state_arrays().items():
            arrays[f"{prefix}.{n}"] = arr
    meta = {
        "student_cfg": asdict(state.student_cfg),
        "trainer_cfg": asdict(state.trainer_cfg),
        "vocab": state.vocab.itos,
        "vocab_hash": vocab_hash(state.vocab),
        "config_hash": config_hash(state.student_cfg, state.trainer_cfg),
        "rng_state": json.loads(json.dumps(state.rng.bit_generator.state, default=_json_default)),
        "epoch": state.epoch,
        "best_val": state.best_val,
        "loss_trace": state.loss_trace,
        "val_history": state.val_history,
        "opt_student_state": state.opt_student.state(),
        "opt_teacher_state": state.opt_teacher.state(),
    }
    checkpoint_save(path, meta, arrays)


def load_state(path) -> TrainState:
    meta, arrays = checkpoint_load(path)
    scfg_doc = dict(meta["student_cfg"])
    scfg_doc["model"] = ModelConfig(**scfg_doc["model"])
    student_cfg = StudentConfig(**scfg_doc)
    trainer_cfg = TrainerConfig(**meta["trainer_cfg"])
    vocab = cp.Vocab(meta["vocab"][len(cp.RESERVED):])
    student = ParamSet()
    teacher = ParamSet()
    opt_arrays = {"opt_student": {}, "opt_teacher": {}}
    for name in sorted(arrays):
        if name.startswith("student."):
            student[name[len("student."):]] = Tensor(arrays[name], requires_grad=True)
        elif name.startswith("teacher."):
            teacher[name[len("teacher."):]] = Tensor(arrays[name], requires_grad=True)
        elif name.startswith("opt_student."):
            opt_arrays["opt_student"][name[len("opt_student."):]] = arrays[name]
        elif name.startswith("opt_teacher."):
            opt_arrays["opt_teacher"][name[len("opt_teacher."):]] = arrays[name]
    opt_student = make_optimizer(meta["opt_student_state"]["kind"], trainer_cfg.student_lr)
    opt_student.load_state(meta["opt_student_state"], opt_arrays["opt_student"])
    opt_teacher = make_optimizer(meta["opt_teacher_state"]["kind"], trainer_cfg.teacher_lr)
    opt_teacher.load_state(meta["opt_teacher_state"], opt_arrays["opt_teacher"])
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    return TrainState(
        student_cfg=student_cfg,
        trainer_cfg=trainer_cfg,
        vocab=vocab,
        student=student,
        teacher=teacher,
        opt_student=opt_student,
        opt_teacher=opt_teacher,
        rng=rng,
        epoch=meta["epoch"],
        best_val=meta["best_val"],
        loss_trace=list(meta["loss_trace"]),
        val_history=list(meta["val_history"]),
    )
