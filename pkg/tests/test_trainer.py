import numpy as np
import pytest

from dast import autodiff as ad
from dast import corpus as cp
from dast import student as st
from dast import teacher as te
from dast import trainer as tr
from dast.autodiff import ParamSet, Tensor
from dast.layers import ModelConfig
from dast.student import StudentConfig
from dast.trainer import TrainerConfig


# ------------------------------------------------ scalar quadratic test-bed
#
# Student is a single scalar m with task loss L(m) = (m - 2)^2; "weights"
# play no role (omega=None).  With alpha = outer lr = 0.1, m0 = 0, SGD:
#   inner:  m' = m - 0.1 * 2(m-2)          -> m' = 0.4
#   outer loss (m' - 2)^2
#   first-order grad  d/dm' = 2(0.4-2) = -3.2         -> m1 = 0.32
#   second-order grad -3.2 * (1 - 0.1*2) = -2.56      -> m1 = 0.256
# Frozen closed-form values, matched to 1e-12.


def quad_loss(params, batch, omega):
    d = params["m"] - Tensor(2.0)
    return d * d, None


def no_omega(batch):
    return None


def scalar_cfg(**kw):
    base = dict(inner_lr=0.1, student_lr=0.1, teacher_lr=0.1, optimizer="sgd",
                grad_clip=0.0, reg_lambda=0.0, teacher_enabled=False)
    base.update(kw)
    return TrainerConfig(**base)


def scalar_params(m0=0.0):
    return ParamSet({"m": Tensor(m0, requires_grad=True)})


def test_inner_update_value():
    fast = tr.inner_update(scalar_params(), None, quad_loss, None, alpha=0.1)
    assert fast["m"].item() == pytest.approx(0.4, abs=1e-12)


def test_inner_update_alpha_zero_is_identity():
    fast = tr.inner_update(scalar_params(1.3), None, quad_loss, None, alpha=0.0)
    assert fast["m"].item() == 1.3


def test_meta_step_first_order_oracle():
    cfg = scalar_cfg(second_order=False)
    params = scalar_params()
    opt = tr.make_optimizer("sgd", cfg.student_lr)
    tr.meta_batch_step(params, None, [(None, None)], cfg, quad_loss, no_omega, opt, None)
    assert params["m"].item() == pytest.approx(0.32, abs=1e-12)


def test_meta_step_second_order_oracle():
    cfg = scalar_cfg(second_order=True)
    params = scalar_params()
    opt = tr.make_optimizer("sgd", cfg.student_lr)
    tr.meta_batch_step(params, None, [(None, None)], cfg, quad_loss, no_omega, opt, None)
    assert params["m"].item() == pytest.approx(0.256, abs=1e-12)


def test_meta_step_two_tasks_sums_outer_grads():
    cfg = scalar_cfg(second_order=False)
    params = scalar_params()
    opt = tr.make_optimizer("sgd", cfg.student_lr)
    loss = tr.meta_batch_step(params, None, [(None, None), (None, None)], cfg, quad_loss, no_omega, opt, None)
    assert params["m"].item() == pytest.approx(0.64, abs=1e-12)
    assert loss == pytest.approx(2 * (0.4 - 2.0) ** 2, abs=1e-12)


def test_meta_step_no_tasks_rejected():
    cfg = scalar_cfg()
    with pytest.raises(ValueError):
        tr.meta_batch_step(scalar_params(), None, [], cfg, quad_loss, no_omega, None, None)


# --------------------------------------------------------------- optimizers


def test_sgd_ascent_direction():
    p = ParamSet({"x": Tensor(1.0, requires_grad=True)})
    tr.SGD(0.5).step(p, {"x": np.array(2.0)}, direction=+1.0)
    assert p["x"].item() == pytest.approx(2.0)


def test_adam_first_step_magnitude():
    # regardless of gradient scale, Adam's first step is ~lr in the grad sign
    for g in (0.001, 1.0, 1000.0):
        p = ParamSet({"x": Tensor(0.0, requires_grad=True)})
        tr.Adam(0.1).step(p, {"x": np.array(g)})
        assert p["x"].item() == pytest.approx(-0.1, rel=1e-4)


def test_clip_grads_scales_to_norm():
    grads = {"a": np.array([3.0, 0.0]), "b": np.array([0.0, 4.0])}
    clipped = tr.clip_grads(grads, 2.5)
    total = np.sqrt(sum(np.sum(g * g) for g in clipped.values()))
    assert total == pytest.approx(2.5)
    assert clipped["a"][0] / clipped["b"][1] == pytest.approx(3.0 / 4.0)


def test_clip_grads_no_op_below_threshold():
    grads = {"a": np.array([0.3, 0.4])}
    clipped = tr.clip_grads(grads, 5.0)
    assert np.array_equal(clipped["a"], grads["a"])


# ----------------------------------------------------------------- schedule


def test_schedule_decay_after_three_flat_epochs():
    cfg = TrainerConfig()
    mult, stop = tr.schedule_and_early_stop([1.0, 0.9, 0.91, 0.92, 0.93], cfg)
    assert mult == pytest.approx(0.5)
    assert not stop


def test_schedule_stop_after_five_flat_epochs():
    cfg = TrainerConfig()
    mult, stop = tr.schedule_and_early_stop([1.0, 1.0, 1.0, 1.0, 1.0, 1.0], cfg)
    assert stop


def test_schedule_improvement_resets_streak():
    cfg = TrainerConfig()
    mult, stop = tr.schedule_and_early_stop([1.0, 1.1, 1.2, 0.5, 0.6, 0.7], cfg)
    assert mult == pytest.approx(1.0)
    assert not stop


def test_schedule_two_decays():
    cfg = TrainerConfig()
    hist = [1.0] + [1.0] * 6
    mult, stop = tr.schedule_and_early_stop(hist, cfg)
    assert mult == pytest.approx(0.25)
    assert stop


# --------------------------------------------------- dialog-model smoke rig


@pytest.fixture(scope="module")
def rig():
    corpus = cp.synth_corpus(0, 3, 6, overlap=0.5)
    vocab = cp.build_vocab(corpus)
    scfg = StudentConfig(model=ModelConfig(vocab_size=len(vocab), embed_dim=6, hidden_dim=8, attn_dim=5, num_heads=2, ff_mult=2))
    return corpus, vocab, scfg


def small_trainer_cfg(**kw):
    base = dict(batch_size=4, steps_per_epoch=2, max_epochs=2, val_ratio=0.34, seed=3)
    base.update(kw)
    return TrainerConfig(**base)


def test_train_runs_and_records_trace(rig):
    corpus, vocab, scfg = rig
    state = tr.train(corpus, vocab, corpus.domains[-1], scfg, small_trainer_cfg())
    assert len(state.loss_trace) == 4
    assert len(state.val_history) == 2
    assert all(np.isfinite(state.loss_trace))


def test_train_unknown_target_rejected(rig):
    corpus, vocab, scfg = rig
    with pytest.raises(cp.CorpusError):
        tr.train(corpus, vocab, "no-such-domain", scfg, small_trainer_cfg())


def test_uniform_ablation_matches_disabled_teacher_bitwise(rig):
    # forcing uniform weights must reproduce the teacher-free run exactly
    corpus, vocab, scfg = rig
    target = corpus.domains[-1]
    s_off = tr.train(corpus, vocab, target, scfg, small_trainer_cfg(teacher_enabled=False))
    s_uni = tr.train(corpus, vocab, target, scfg, small_trainer_cfg(teacher_enabled=True, force_uniform=True))
    assert s_off.loss_trace == s_uni.loss_trace
    for n in s_off.student.names():
        assert np.array_equal(s_off.student[n].data, s_uni.student[n].data)


def test_teacher_frozen_when_disabled(rig):
    corpus, vocab, scfg = rig
    cfg = small_trainer_cfg(teacher_enabled=False)
    state = tr.init_train_state(corpus, vocab, scfg, cfg)
    before = {n: state.teacher[n].data.copy() for n in state.teacher.names()}
    tr.train(corpus, vocab, corpus.domains[-1], scfg, cfg, state=state)
    for n, arr in before.items():
        assert np.array_equal(state.teacher[n].data, arr)


def test_teacher_updated_when_enabled(rig):
    corpus, vocab, scfg = rig
    cfg = small_trainer_cfg(teacher_enabled=True)
    state = tr.init_train_state(corpus, vocab, scfg, cfg)
    before = {n: state.teacher[n].data.copy() for n in state.teacher.names()}
    tr.train(corpus, vocab, corpus.domains[-1], scfg, cfg, state=state, max_meta_steps=1)
    assert any(not np.array_equal(state.teacher[n].data, arr) for n, arr in before.items())


@pytest.mark.parametrize("seed", range(10))
def test_adversarial_update_signs(rig, seed):
    # one tiny SGD meta-step: the student step must lower the outer loss and
    # the teacher step must raise it, holding everything else fixed
    corpus, vocab, scfg = rig
    cfg = TrainerConfig(inner_lr=1e-4, student_lr=1e-4, teacher_lr=1e-4,
                        optimizer="sgd", grad_clip=0.0, reg_lambda=0.0,
                        batch_size=4, seed=seed, second_order=True)
    rng = np.random.default_rng(seed)
    student = st.init_student(rng, scfg)
    teacher = te.init_teacher(rng, scfg.model)
    examples = st.make_examples(corpus, vocab, list(range(6)))
    support = st.make_batch(list(rng.choice(examples, size=4)))
    query = st.make_batch(list(rng.choice(examples, size=4)))
    loss_fn = tr.dialog_loss_fn(scfg)
    omega_fn = tr.dialog_omega_fn(cfg, scfg, vocab, student, teacher)

    def outer_loss(omega_s, omega_q):
        with ad.no_grad():
            fast = tr.inner_update(student, support, loss_fn, omega_s, cfg.inner_lr)
            loss, _ = loss_fn(fast, query, omega_q)
        return float(loss.data)

    # the student descends at fixed weights, so freeze omega for its check
    omega_s0 = omega_fn(support).detach()
    omega_q0 = omega_fn(query).detach()
    base = outer_loss(omega_s0, omega_q0)

    s2 = student.clone()
    tr.meta_batch_step(s2, teacher, [(support, query)], cfg, tr.dialog_loss_fn(scfg),
                       lambda b: omega_s0 if b is support else omega_q0,
                       tr.make_optimizer("sgd", cfg.student_lr), None,
                       update_student=True, update_teacher=False)
    saved = {n: student[n].data.copy() for n in student.names()}
    for n in student.names():
        student[n].data = s2[n].data
    after_student = outer_loss(omega_s0, omega_q0)
    for n in student.names():
        student[n].data = saved[n]

    # the teacher ascends at fixed student, with omega recomputed from it
    t_saved = {n: teacher[n].data.copy() for n in teacher.names()}
    tr.meta_batch_step(student, teacher, [(support, query)], cfg, loss_fn, omega_fn,
                       None, tr.make_optimizer("sgd", cfg.teacher_lr),
                       update_student=False, update_teacher=True)
    after_teacher = outer_loss(omega_fn(support), omega_fn(query))
    for n in teacher.names():
        teacher[n].data = t_saved[n]

    assert after_student < base + 1e-9
    assert after_teacher > base - 1e-9


def test_validation_step_keeps_student_fixed(rig):
    corpus, vocab, scfg = rig
    cfg = small_trainer_cfg(teacher_enabled=True)
    state = tr.init_train_state(corpus, vocab, scfg, cfg)
    examples = st.make_examples(corpus, vocab, list(range(4)))
    batch = st.make_batch(examples[:4])
    loss_fn = tr.dialog_loss_fn(scfg)
    omega_fn = tr.dialog_omega_fn(cfg, scfg, vocab, state.student, state.teacher)
    before = {n: state.student[n].data.copy() for n in state.student.names()}
    t_before = {n: state.teacher[n].data.copy() for n in state.teacher.names()}
    val = tr.validation_teacher_step(state.student, state.teacher, [batch], [(batch, batch)],
                                     cfg, loss_fn, omega_fn, state.opt_teacher)
    assert np.isfinite(val)
    for n, arr in before.items():
        assert np.array_equal(state.student[n].data, arr)
    assert any(not np.array_equal(state.teacher[n].data, arr) for n, arr in t_before.items())


# --------------------------------------------------------------- adaptation


def test_adapt_zero_steps_identity(rig):
    corpus, vocab, scfg = rig
    cfg = small_trainer_cfg(adapt_steps=0)
    rng = np.random.default_rng(0)
    student = st.init_student(rng, scfg)
    adapted = tr.adapt_to_domain(student, None, corpus, vocab, corpus.domains[-1],
                                 corpus.domain_dialog_ids(corpus.domains[-1])[:2], scfg, cfg, rng)
    for n in student.names():
        assert np.array_equal(adapted[n].data, student[n].data)
    assert adapted[student.names()[0]] is not student[student.names()[0]]


def test_adapt_improves_split_loss_and_freezes_teacher(rig):
    corpus, vocab, scfg = rig
    cfg = small_trainer_cfg(adapt_steps=10, adapt_patience=10, inner_lr=0.02, teacher_enabled=True)
    rng = np.random.default_rng(0)
    student = st.init_student(rng, scfg)
    teacher = te.init_teacher(rng, scfg.model)
    ids = corpus.domain_dialog_ids(corpus.domains[-1])[:3]
    examples = st.make_examples(corpus, vocab, ids)
    batch = st.make_batch(examples)
    loss_fn = tr.dialog_loss_fn(scfg)

    def split_loss(params):
        with ad.no_grad():
            loss, _ = loss_fn(params, batch, None)
        return float(loss.data)

    before = split_loss(student)
    adapted = tr.adapt_to_domain(student, teacher, corpus, vocab, corpus.domains[-1], ids, scfg, cfg, rng)
    assert split_loss(adapted) < before
    for n in student.names():  # originals untouched
        assert np.array_equal(student[n].data, st.init_student(np.random.default_rng(0), scfg)[n].data)


# -------------------------------------------------------------- checkpoints


def test_checkpoint_roundtrip(tmp_path):
    arrays = {"a": np.arange(6.0).reshape(2, 3), "b": np.array(3.5)}
    path = tmp_path / "ck.bin"
    tr.checkpoint_save(path, {"epoch": 2}, arrays)
    meta, loaded = tr.checkpoint_load(path)
    assert meta == {"epoch": 2}
    assert set(loaded) == {"a", "b"}
    assert np.array_equal(loaded["a"], arrays["a"])
    assert np.array_equal(loaded["b"], arrays["b"])


def test_checkpoint_save_deterministic_bytes(tmp_path):
    arrays = {"z": np.ones(3), "a": np.zeros((2, 2))}
    p1, p2 = tmp_path / "1.bin", tmp_path / "2.bin"
    tr.checkpoint_save(p1, {"k": 1}, arrays)
    tr.checkpoint_save(p2, {"k": 1}, dict(reversed(list(arrays.items()))))
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "bad.bin"
    p.write_bytes(b"NOTACKPT" + b"\x00" * 16)
    with pytest.raises(tr.CheckpointError):
        tr.checkpoint_load(p)


def test_checkpoint_truncated(tmp_path):
    arrays = {"a": np.ones(100)}
    p = tmp_path / "t.bin"
    tr.checkpoint_save(p, {}, arrays)
    p.write_bytes(p.read_bytes()[:-40])
    with pytest.raises(tr.CheckpointError):
        tr.checkpoint_load(p)


def test_checkpoint_version_mismatch(tmp_path):
    import json, struct
    p = tmp_path / "v.bin"
    header = json.dumps({"version": 99, "meta": {}, "arrays": []}).encode()
    p.write_bytes(tr.CKPT_MAGIC + struct.pack(">Q", len(header)) + header)
    with pytest.raises(tr.CheckpointError):
        tr.checkpoint_load(p)


def test_resume_reproduces_training_bitwise(rig, tmp_path):
    # train 2 epochs straight vs. train 1, checkpoint, reload, train 1 more
    corpus, vocab, scfg = rig
    target = corpus.domains[-1]
    cfg_full = small_trainer_cfg(max_epochs=2, teacher_enabled=True)
    full = tr.train(corpus, vocab, target, scfg, cfg_full)

    cfg_half = small_trainer_cfg(max_epochs=1, teacher_enabled=True)
    half = tr.train(corpus, vocab, target, scfg, cfg_half)
    path = tmp_path / "half.ckpt"
    half.trainer_cfg.max_epochs = 2
    tr.save_state(path, half)
    resumed = tr.load_state(path)
    resumed = tr.train(corpus, vocab, target, scfg, resumed.trainer_cfg, state=resumed)

    assert resumed.loss_trace == full.loss_trace
    assert resumed.val_history == full.val_history
    for n in full.student.names():
        assert np.array_equal(full.student[n].data, resumed.student[n].data), n
    for n in full.teacher.names():
        assert np.array_equal(full.teacher[n].data, resumed.teacher[n].data), n


def test_saved_state_hashes_present(rig, tmp_path):
    corpus, vocab, scfg = rig
    state = tr.init_train_state(corpus, vocab, scfg, small_trainer_cfg())
    path = tmp_path / "s.ckpt"
    tr.save_state(path, state)
    meta, _ = tr.checkpoint_load(path)
    assert meta["config_hash"] == tr.config_hash(scfg, state.trainer_cfg)
    assert meta["vocab_hash"] == tr.vocab_hash(vocab)
    loaded = tr.load_state(path)
    assert loaded.vocab.itos == vocab.itos
