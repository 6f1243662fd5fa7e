import math

import numpy as np
import pytest

from hardkd import data as datasets
from hardkd import distill as hd
from hardkd.augmentors import GaussianAugmentor, MixAugmentor
from hardkd.diffcore import Adam, Tensor, make_rng
from hardkd.models import CosTeacher, FlattenStudent, Mlp

MSE_CFG = hd.DistillConfig(distance="mse", ell_min=0.05, ell_max=0.3)
KL_CFG = hd.DistillConfig(distance="kl")


# ---- losses ---------------------------------------------------------------------


def test_ts_loss_zero_for_identical_logits():
    logits = Tensor(make_rng(0).standard_normal((4, 6)))
    for t in (1.0, 2.5, 8.0):
        cfg = KL_CFG.with_(temperature=t)
        assert hd.teacher_student_loss(logits, logits, cfg).item() == pytest.approx(0.0, abs=1e-12)


def test_ts_loss_matches_direct_summation_oracle():
    teacher = np.array([[10.0, 0.0]])
    student = np.array([[0.0, 0.0]])
    p = np.exp(teacher[0]) / np.exp(teacher[0]).sum()
    q = np.array([0.5, 0.5])
    expected = sum(pc * (math.log(pc) - math.log(qc)) for pc, qc in zip(p, q))
    cfg = KL_CFG.with_(temperature=1.0)
    out = hd.teacher_student_loss(Tensor(student), Tensor(teacher), cfg)
    assert out.item() == pytest.approx(expected, abs=1e-10)


def test_ts_loss_regression_constant_offset():
    rng = make_rng(1)
    t = rng.standard_normal((8, 1))
    out = hd.teacher_student_loss(Tensor(t + 1.0), Tensor(t), MSE_CFG)
    assert out.item() == pytest.approx(1.0, abs=1e-12)


def test_ts_loss_temperature_squared_scaling():
    rng = make_rng(2)
    s, t = rng.standard_normal((3, 5)), rng.standard_normal((3, 5))
    for temp in (2.0, 5.0):
        cfg = KL_CFG.with_(temperature=temp)
        raw = hd.teacher_student_loss(Tensor(s), Tensor(t), cfg).item()
        unit = hd.teacher_student_loss(
            Tensor(s / temp), Tensor(t / temp), KL_CFG.with_(temperature=1.0)).item()
        assert raw == pytest.approx(temp * temp * unit, rel=1e-10)


def test_ts_loss_shape_mismatch():
    with pytest.raises(ValueError):
        hd.teacher_student_loss(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3))), MSE_CFG)


def test_ts_loss_teacher_side_is_constant():
    t = Tensor(make_rng(3).standard_normal((4, 2)), requires_grad=True)
    s = Tensor(make_rng(4).standard_normal((4, 2)), requires_grad=True)
    hd.teacher_student_loss(s, t, KL_CFG).backward()
    assert np.array_equal(t.grad, np.zeros((4, 2)))
    assert np.abs(s.grad).max() > 0


def test_tt_loss_examples():
    teacher = CosTeacher()
    x = Tensor(make_rng(5).uniform(-3, 3, size=(16, 1)))
    same = hd.teacher_teacher_loss(teacher(x), teacher(x), MSE_CFG)
    assert same.item() == pytest.approx(0.0, abs=1e-12)
    shifted = hd.teacher_teacher_loss(
        teacher(Tensor(x.data + 2 * np.pi)), teacher(x), MSE_CFG)
    assert shifted.item() < 1e-9
    pi_vs_zero = hd.teacher_teacher_loss(
        teacher(Tensor([[np.pi]])), teacher(Tensor([[0.0]])), MSE_CFG)
    assert pi_vs_zero.item() == pytest.approx(4.0, abs=1e-12)


# ---- objective and metric ----------------------------------------------------------


def test_augmentor_objective_examples():
    l_st, l_tt = Tensor([0.7]).sum(), Tensor([0.2]).sum()
    assert hd.augmentor_objective(l_st, l_tt, 1.0, 1.0).item() == pytest.approx(0.5)
    assert hd.augmentor_objective(l_st, None, 1.3, 0.0).item() == pytest.approx(1.3 * 0.7)
    assert hd.augmentor_objective(l_st, l_tt, 0.0, 2.0).item() == pytest.approx(-0.4)


def test_monitored_metric_examples():
    logits = Tensor(make_rng(6).standard_normal((10, 4)))
    assert hd.monitored_metric(logits, logits, KL_CFG) == 0.0

    teacher = np.zeros((10, 3)); teacher[:, 0] = 1.0
    student = teacher.copy(); student[:3, 1] = 2.0  # flip argmax on 3 of 10
    assert hd.monitored_metric(Tensor(student), Tensor(teacher), KL_CFG) == pytest.approx(0.3)

    t = make_rng(7).standard_normal((6, 1))
    assert hd.monitored_metric(Tensor(t + 0.5), Tensor(t), MSE_CFG) == pytest.approx(0.25)


# ---- phase controller ---------------------------------------------------------------


def test_phase_switch_after_patience_exceedances():
    cfg = KL_CFG.with_(ell_max=0.6, patience=5)
    state = hd.PhaseState()
    for i in range(5):
        state, switched = hd.phase_step(state, 0.7, cfg)
        assert switched == (i == 4)
    assert state.phase is hd.Phase.TRAIN_STUDENT
    assert state.counter == 0


def test_phase_counter_resets_on_condition_break():
    cfg = KL_CFG.with_(ell_max=0.6, patience=5)
    state = hd.PhaseState()
    for metric in (0.7, 0.7, 0.7, 0.5, 0.7, 0.7, 0.7, 0.7):
        state, switched = hd.phase_step(state, metric, cfg)
        assert not switched
    state, switched = hd.phase_step(state, 0.7, cfg)
    assert switched


def test_student_phase_never_switches_above_ell_min():
    cfg = KL_CFG.with_(ell_min=0.1)
    state = hd.PhaseState(phase=hd.Phase.TRAIN_STUDENT)
    for _ in range(100):
        state, switched = hd.phase_step(state, 0.2, cfg)
        assert not switched
    assert state.phase is hd.Phase.TRAIN_STUDENT


def test_phase_step_rejects_non_finite_metric():
    with pytest.raises(ValueError):
        hd.phase_step(hd.PhaseState(), float("nan"), KL_CFG)


def reference_phase_sequence(metrics, ell_min, ell_max, patience):
    """Independent scripted implementation of the threshold/patience rules."""
    phase, count, out = "augmentor", 0, []
    for m in metrics:
        hold = m > ell_max if phase == "augmentor" else m < ell_min
        count = count + 1 if hold else 0
        if count >= patience:
            phase = "student" if phase == "augmentor" else "augmentor"
            count = 0
        out.append(phase)
    return out


def test_controller_matches_scripted_reference():
    rng = make_rng(8)
    cfg = KL_CFG.with_(ell_min=0.1, ell_max=0.6, patience=3)
    for _ in range(50):
        metrics = rng.random(200)
        state = hd.PhaseState()
        got = []
        for m in metrics:
            state, _ = hd.phase_step(state, float(m), cfg)
            got.append(state.phase.value)
        assert got == reference_phase_sequence(metrics, 0.1, 0.6, 3)


# ---- pool ------------------------------------------------------------------------


def test_pool_length_tracks_pushes():
    pool = hd.AugmentorPool()
    a = GaussianAugmentor(2)
    for k in range(4):
        assert len(pool) == k
        pool.push(a)


def test_pool_sampling_is_uniform():
    pool = hd.AugmentorPool()
    for k in range(4):
        a = GaussianAugmentor(1)
        a.mu.data[:] = k
        pool.push(a)
    rng = make_rng(9)
    counts = np.zeros(4)
    for _ in range(10_000):
        counts[int(pool.sample(rng).mu.data[0])] += 1
    assert np.abs(counts - 2500).max() <= 200


def test_pool_snapshot_isolated_from_live_augmentor():
    pool = hd.AugmentorPool()
    a = GaussianAugmentor(2)
    a.mu.data[:] = [1.0, 2.0]
    pool.push(a)
    frozen = pool.snapshots[0].mu.data.tobytes()
    a.mu.data[:] = 9.0
    assert pool.snapshots[0].mu.data.tobytes() == frozen


def test_pool_empty_sample_rejected():
    with pytest.raises(ValueError):
        hd.AugmentorPool().sample(make_rng(10))


# ---- train_hard -------------------------------------------------------------------


def _toy_setup(seed=0, **cfg_kw):
    dataset = datasets.make_toy_dataset(seed=seed, n_train=64)
    teacher = CosTeacher()
    student = Mlp((1, 16, 16, 1), rng=make_rng(seed + 100))
    augmentor = GaussianAugmentor(1)
    cfg_kw = {"batch_size": 16, "iterations": 60, "seed": seed, **cfg_kw}
    cfg = MSE_CFG.with_(**cfg_kw)
    stream = datasets.batch_stream(dataset.train_x, cfg.batch_size, make_rng(seed + 200))
    return cfg, teacher, student, augmentor, stream


def _param_bytes(model):
    return [p.data.tobytes() for p in model.parameters()]


def test_infinite_ell_max_freezes_student():
    cfg, teacher, student, augmentor, stream = _toy_setup(ell_max=float("inf"))
    before = _param_bytes(student)
    _, pool, log = hd.train_hard(cfg, teacher, student, augmentor, stream)
    assert all(r.phase == "augmentor" for r in log.records)
    assert len(pool) == 0
    assert _param_bytes(student) == before


def test_zero_iterations_returns_inputs_unchanged():
    cfg, teacher, student, augmentor, stream = _toy_setup(iterations=0)
    sb, ab = _param_bytes(student), _param_bytes(augmentor)
    out_student, pool, log = hd.train_hard(cfg, teacher, student, augmentor, stream)
    assert out_student is student
    assert len(pool) == 0 and log.records == []
    assert _param_bytes(student) == sb and _param_bytes(augmentor) == ab


def test_train_log_is_reproducible_bitwise(tmp_path):
    csvs = []
    for run in range(2):
        cfg, teacher, student, augmentor, stream = _toy_setup()
        _, _, log = hd.train_hard(cfg, teacher, student, augmentor, stream)
        path = tmp_path / f"log{run}.csv"
        log.write_csv(path)
        csvs.append(path.read_bytes())
    assert csvs[0] == csvs[1]


def test_teacher_parameters_are_immutable():
    # use a parameterized frozen teacher so "unchanged" is checkable bitwise
    teacher = Mlp((1, 8, 8, 1), rng=make_rng(11))
    teacher.freeze()
    tb = _param_bytes(teacher)
    cfg, _, student, augmentor, stream = _toy_setup()
    hd.train_hard(cfg, teacher, student, augmentor, stream)
    assert _param_bytes(teacher) == tb


def test_gradient_routing_between_phases():
    cfg, teacher, student, augmentor, stream = _toy_setup(
        ell_min=0.01, ell_max=0.05, patience=2)
    trace = []

    def hook(iteration, x_aug):
        trace.append((_param_bytes(student), _param_bytes(augmentor)))

    _, _, log = hd.train_hard(cfg, teacher, student, augmentor, stream,
                              sample_hook=hook)
    phases = [r.phase for r in log.records]
    assert "student" in phases and "augmentor" in phases  # both phases ran
    for i in range(1, len(trace)):
        prev_s, prev_a = trace[i - 1]
        cur_s, cur_a = trace[i]
        if phases[i] == "augmentor":
            assert cur_s == prev_s
        else:
            assert cur_a == prev_a


def test_single_augmentor_step_is_first_order_ascent():
    teacher = CosTeacher()
    cfg = MSE_CFG
    for trial in range(10):
        rng = make_rng(300 + trial)
        student = Mlp((1, 16, 16, 1), rng=rng)
        augmentor = GaussianAugmentor(1)
        augmentor.mu.data[:] = rng.uniform(-1, 1)
        augmentor.log_sigma.data[:] = rng.uniform(-2, 0)
        x = Tensor(rng.uniform(-3, 3, size=(16, 1)))

        def objective(noise_seed):
            x_aug = augmentor.augment(x, make_rng(noise_seed))
            l_st = hd.teacher_student_loss(student(x_aug), teacher(x_aug), cfg)
            l_tt = hd.teacher_teacher_loss(teacher(x_aug), teacher(x), cfg)
            return hd.augmentor_objective(l_st, l_tt, cfg.lambda_s, cfg.lambda_t)

        obj = objective(trial)
        before = obj.item()
        opt = Adam(augmentor.parameters(), lr=1e-4)
        opt.zero_grad()
        (-obj).backward()
        opt.step()
        assert objective(trial).item() >= before - 1e-10


def test_joint_mode_updates_both_players_without_controller():
    rng = make_rng(12)
    images = rng.random((32, 1, 8, 8))
    teacher = FlattenStudent(Mlp((64, 16, 16, 10), rng=make_rng(13)))
    teacher.freeze()
    student = FlattenStudent(Mlp((64, 16, 16, 10), rng=make_rng(14)))
    augmentor = MixAugmentor(channels=1, height=8, width=8, patch=4, embed=8,
                             group=2, rng=make_rng(15))
    cfg = hd.DistillConfig(distance="kl", iterations=10, batch_size=8,
                           lambda_t=0.0, joint=True, seed=3)
    sb, ab = _param_bytes(student), _param_bytes(augmentor)
    stream = datasets.batch_stream(images, cfg.batch_size, make_rng(16))
    _, pool, log = hd.train_hard(cfg, teacher, student, augmentor, stream)
    assert all(r.phase == "joint" for r in log.records)
    assert all(r.pool_size == 0 for r in log.records)
    assert len(pool) == 0
    assert _param_bytes(student) != sb and _param_bytes(augmentor) != ab
    assert all(np.isfinite(r.loss_st) for r in log.records)


def test_non_finite_loss_aborts_with_iteration():
    cfg, teacher, student, augmentor, _ = _toy_setup(iterations=3)

    def bad_batches():
        while True:
            yield np.full((16, 1), np.inf)

    with pytest.raises(hd.NonFiniteLossError) as err:
        hd.train_hard(cfg, teacher, student, augmentor, bad_batches())
    assert err.value.iteration == 0


def test_distill_plain_zero_iterations_and_unknown_static():
    cfg, teacher, student, _, stream = _toy_setup(iterations=0)
    before = _param_bytes(student)
    hd.distill_plain(cfg, teacher, student, stream)
    assert _param_bytes(student) == before
    with pytest.raises(ValueError):
        hd.static_augmentation("cutout")


def test_static_mixup_draws_alpha_per_pair():
    fn = hd.static_augmentation("mixup")
    x = Tensor(make_rng(17).random((6, 1, 4, 4)))
    out = fn(x, make_rng(18))
    assert out.shape == x.shape
    # every output row is a convex combination, hence within the data range
    assert out.data.min() >= x.data.min() - 1e-12
    assert out.data.max() <= x.data.max() + 1e-12


def test_train_log_csv_format(tmp_path):
    log = hd.TrainLog()
    log.append(hd.TrainRecord(0, "augmentor", 0.5, 0.25, 0.1, 0))
    log.append(hd.TrainRecord(1, "student", 0.4, None, 0.05, 1))
    path = tmp_path / "log.csv"
    log.write_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "iteration,phase,loss_st,loss_tt,metric,pool_size"
    assert lines[1] == "0,augmentor,0.5,0.25,0.1,0"
    assert lines[2] == "1,student,0.4,,0.05,1"


def test_config_validation():
    with pytest.raises(ValueError):
        hd.DistillConfig(ell_min=0.6, ell_max=0.6)
    with pytest.raises(ValueError):
        hd.DistillConfig(patience=0)
    with pytest.raises(ValueError):
        hd.DistillConfig(lambda_t=-0.1)
    with pytest.raises(ValueError):
        hd.DistillConfig(temperature=0.0)
    with pytest.raises(ValueError):
        hd.DistillConfig(clean_data_fraction=1.5)
    with pytest.raises(ValueError):
        hd.DistillConfig(distance="cosine")
