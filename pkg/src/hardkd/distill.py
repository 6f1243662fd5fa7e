"""The HARD training engine: both distillation losses, the coupled
augmentor objective, the threshold/patience phase controller, the augmentor
pool, and the alternating training loop."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from .diffcore import Adam, Tensor, kl_divergence, make_rng, mse, softmax_with_temperature


class Phase(enum.Enum):
    TRAIN_STUDENT = "student"
    TRAIN_AUGMENTOR = "augmentor"


@dataclass
class DistillConfig:
    iterations: int = 10_000
    batch_size: int = 64
    lambda_s: float = 1.0
    lambda_t: float = 1.0
    ell_min: float = 0.10
    ell_max: float = 0.60
    patience: int = 5
    temperature: float = 5.0
    distance: str = "kl"           # "kl" for classification, "mse" for regression
    student_lr: float = 3e-4
    augmentor_lr: float = 5e-2
    weight_decay: float = 2e-9
    clean_data_fraction: float = 0.0
    joint: bool = False            # Mix mode: no controller, paired steps per batch
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.ell_min < self.ell_max:
            raise ValueError(f"need 0 <= ell_min < ell_max, got {self.ell_min}, {self.ell_max}")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if self.lambda_s < 0 or self.lambda_t < 0:
            raise ValueError("lambda_s and lambda_t must be non-negative")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if not 0.0 <= self.clean_data_fraction <= 1.0:
            raise ValueError(f"clean_data_fraction must be in [0, 1], got {self.clean_data_fraction}")
        if self.distance not in ("kl", "mse"):
            raise ValueError(f"unknown distance kind {self.distance!r}")

    def with_(self, **kw):
        return replace(self, **kw)


@dataclass
class PhaseState:
    phase: Phase = Phase.TRAIN_AUGMENTOR
    counter: int = 0
    last_metric: float = float("nan")


@dataclass
class TrainRecord:
    iteration: int
    phase: str
    loss_st: float
    loss_tt: float | None
    metric: float
    pool_size: int


class NonFiniteLossError(RuntimeError):
    def __init__(self, iteration, name, value):
        super().__init__(f"non-finite {name} ({value}) at iteration {iteration}")
        self.iteration = iteration


class TrainLog:
    """Per-iteration records plus optional evaluation snapshots."""

    CSV_HEADER = "iteration,phase,loss_st,loss_tt,metric,pool_size"

    def __init__(self):
        self.records = []
        self.eval_records = []

    def append(self, record):
        self.records.append(record)

    def append_eval(self, iteration, metrics):
        self.eval_records.append((iteration, dict(metrics)))

    def write_csv(self, path):
        lines = [self.CSV_HEADER]
        for r in self.records:
            tt = "" if r.loss_tt is None else repr(r.loss_tt)
            lines.append(
                f"{r.iteration},{r.phase},{r.loss_st!r},{tt},{r.metric!r},{r.pool_size}"
            )
        with open(path, "w") as f:
            f.write("\n".join(lines) + "\n")


class AugmentorPool:
    """Frozen augmentor snapshots saved at phase switches."""

    def __init__(self):
        self._snapshots = []

    def __len__(self):
        return len(self._snapshots)

    def push(self, augmentor):
        self._snapshots.append(augmentor.snapshot())

    def sample(self, rng):
        if not self._snapshots:
            raise ValueError("cannot sample from an empty augmentor pool")
        return self._snapshots[int(rng.integers(len(self._snapshots)))]

    @property
    def snapshots(self):
        return tuple(self._snapshots)


# ---- losses -----------------------------------------------------------------


def teacher_student_loss(student_out, teacher_out, cfg):
    """Distance between student and teacher outputs; teacher side is constant.

    Classification uses KL(teacher softmax || student softmax) at temperature T,
    scaled by T^2 so the gradient magnitude is temperature-invariant.
    """
    teacher_out = teacher_out.detach()
    if cfg.distance == "mse":
        return mse(student_out, teacher_out)
    t = cfg.temperature
    p = softmax_with_temperature(teacher_out, t)
    q = softmax_with_temperature(student_out, t)
    return kl_divergence(p, q) * (t * t)


def teacher_teacher_loss(teacher_aug_out, teacher_orig_out, cfg):
    """Distance between teacher outputs on augmented vs original inputs.

    Gradient reaches the augmentor only through teacher_aug_out.
    """
    teacher_orig_out = teacher_orig_out.detach()
    if cfg.distance == "mse":
        return mse(teacher_aug_out, teacher_orig_out)
    t = cfg.temperature
    p = softmax_with_temperature(teacher_orig_out, t)
    q = softmax_with_temperature(teacher_aug_out, t)
    return kl_divergence(p, q) * (t * t)


def augmentor_objective(loss_st, loss_tt, lambda_s, lambda_t):
    """lambda_s * L_st - lambda_t * L_tt; the augmentor ascends this."""
    obj = lambda_s * loss_st
    if lambda_t:
        obj = obj - lambda_t * loss_tt
    return obj


def monitored_metric(student_out, teacher_out, cfg):
    """Classification: argmax disagreement rate. Regression: batch MSE."""
    s = student_out.data
    t = teacher_out.data
    if cfg.distance == "mse":
        return float(((s - t) ** 2).mean())
    return float((s.argmax(axis=-1) != t.argmax(axis=-1)).mean())


# ---- phase controller ---------------------------------------------------------


def phase_step(state, metric, cfg):
    """Advance the threshold/patience controller by one observed metric.

    In the augmentor phase the switch condition is metric > ell_max; in the
    student phase it is metric < ell_min. The condition must hold for
    `patience` consecutive iterations to flip the phase.
    """
    if not np.isfinite(metric):
        raise ValueError(f"monitored metric must be finite, got {metric}")
    if state.phase == Phase.TRAIN_AUGMENTOR:
        condition = metric > cfg.ell_max
    else:
        condition = metric < cfg.ell_min
    counter = state.counter + 1 if condition else 0
    if counter >= cfg.patience:
        new_phase = (Phase.TRAIN_STUDENT if state.phase == Phase.TRAIN_AUGMENTOR
                     else Phase.TRAIN_AUGMENTOR)
        return PhaseState(phase=new_phase, counter=0, last_metric=metric), True
    return PhaseState(phase=state.phase, counter=counter, last_metric=metric), False


# ---- training loops -----------------------------------------------------------


def _check_finite(iteration, **losses):
    for name, value in losses.items():
        if value is not None and not np.isfinite(value):
            raise NonFiniteLossError(iteration, name, value)


def _as_tensor(batch):
    return batch if isinstance(batch, Tensor) else Tensor(batch)


def train_hard(cfg, teacher, student, augmentor, batches, sample_hook=None):
    """Alternating min-max training of student and augmentor.

    `batches` yields input arrays; the teacher is never updated. Returns the
    trained student, the pool of frozen augmentor snapshots, and the log.
    In joint mode (Mix) every iteration performs one augmentor ascent and one
    student descent on the same batch, with no phase controller.
    """
    rng = make_rng(cfg.seed)
    student_opt = Adam(student.parameters(), lr=cfg.student_lr,
                       weight_decay=cfg.weight_decay)
    aug_opt = Adam(augmentor.parameters(), lr=cfg.augmentor_lr)
    pool = AugmentorPool()
    log = TrainLog()
    state = PhaseState()
    batch_iter = iter(batches)

    for iteration in range(cfg.iterations):
        x = _as_tensor(next(batch_iter))
        if cfg.joint:
            _joint_iteration(cfg, teacher, student, augmentor, x, rng,
                             student_opt, aug_opt, log, iteration, sample_hook)
            continue

        if state.phase == Phase.TRAIN_AUGMENTOR:
            x_aug = augmentor.augment(x, rng)
            s_out = student(x_aug)
            t_aug = teacher(x_aug)
            t_orig = teacher(x)
            loss_st = teacher_student_loss(s_out, t_aug, cfg)
            loss_tt = teacher_teacher_loss(t_aug, t_orig, cfg)
            _check_finite(iteration, loss_st=loss_st.item(), loss_tt=loss_tt.item())
            objective = augmentor_objective(loss_st, loss_tt, cfg.lambda_s, cfg.lambda_t)
            aug_opt.zero_grad()
            student_opt.zero_grad()
            (-objective).backward()  # ascend by descending the negation
            aug_opt.step()
            metric = monitored_metric(s_out, t_aug, cfg)
            loss_st_val, loss_tt_val = loss_st.item(), loss_tt.item()
        else:
            if rng.random() < cfg.clean_data_fraction:
                x_aug = x
            else:
                x_aug = pool.sample(rng).augment(x, rng)
            s_out = student(x_aug)
            t_aug = teacher(x_aug)
            loss_st = teacher_student_loss(s_out, t_aug, cfg)
            _check_finite(iteration, loss_st=loss_st.item())
            student_opt.zero_grad()
            aug_opt.zero_grad()
            loss_st.backward()
            student_opt.step()
            metric = monitored_metric(s_out, t_aug, cfg)
            loss_st_val, loss_tt_val = loss_st.item(), None

        executed_phase = state.phase.value
        state, switched = phase_step(state, metric, cfg)
        if switched:
            pool.push(augmentor)
        log.append(TrainRecord(iteration, executed_phase,
                               loss_st_val, loss_tt_val, metric, len(pool)))
        if sample_hook is not None:
            sample_hook(iteration, x_aug.data)
    return student, pool, log


def _joint_iteration(cfg, teacher, student, augmentor, x, rng,
                     student_opt, aug_opt, log, iteration, sample_hook):
    x_aug = augmentor.augment(x, rng)
    s_out = student(x_aug)
    t_aug = teacher(x_aug)
    loss_st = teacher_student_loss(s_out, t_aug, cfg)
    loss_tt = None
    if cfg.lambda_t:
        loss_tt = teacher_teacher_loss(t_aug, teacher(x), cfg)
    _check_finite(iteration, loss_st=loss_st.item(),
                  loss_tt=None if loss_tt is None else loss_tt.item())
    objective = augmentor_objective(loss_st, loss_tt, cfg.lambda_s, cfg.lambda_t)
    aug_opt.zero_grad()
    student_opt.zero_grad()
    (-objective).backward()
    aug_opt.step()

    x_aug2 = augmentor.augment(x, rng)
    s2 = student(x_aug2)
    t2 = teacher(x_aug2)
    loss2 = teacher_student_loss(s2, t2, cfg)
    _check_finite(iteration, loss_st=loss2.item())
    student_opt.zero_grad()
    aug_opt.zero_grad()
    loss2.backward()
    student_opt.step()
    metric = monitored_metric(s2, t2, cfg)
    log.append(TrainRecord(iteration, "joint", loss2.item(),
                           None if loss_tt is None else loss_tt.item(),
                           metric, 0))
    if sample_hook is not None:
        sample_hook(iteration, x_aug2.data)


def distill_plain(cfg, teacher, student, batches, augment_fn=None):
    """Classical KD: minimize the teacher-student loss on (optionally
    statically augmented) batches. No augmentor, no controller."""
    rng = make_rng(cfg.seed)
    opt = Adam(student.parameters(), lr=cfg.student_lr, weight_decay=cfg.weight_decay)
    log = TrainLog()
    batch_iter = iter(batches)
    for iteration in range(cfg.iterations):
        x = _as_tensor(next(batch_iter))
        x_aug = augment_fn(x, rng) if augment_fn is not None else x
        s_out = student(x_aug)
        t_out = teacher(x_aug)
        loss = teacher_student_loss(s_out, t_out, cfg)
        _check_finite(iteration, loss_st=loss.item())
        opt.zero_grad()
        loss.backward()
        opt.step()
        log.append(TrainRecord(iteration, "student", loss.item(), None,
                               monitored_metric(s_out, t_out, cfg), 0))
    return student, log


def static_augmentation(name, **kw):
    """Build a static augment_fn(x, rng) for the distill_plain baselines."""
    from . import augmentors as aug

    if name == "none":
        return None
    if name == "mixup":
        def fn(x, rng):
            perm = rng.permutation(x.shape[0])
            alphas = rng.random(x.shape[0]).reshape((-1,) + (1,) * (x.ndim - 1))
            return Tensor((1 - alphas) * x.data + alphas * x.data[perm])
        return fn
    if name == "fixed-gaussian":
        sigma = kw.get("sigma", 1.0)
        mu = kw.get("mu", 0.0)
        def fn(x, rng):
            return Tensor(x.data + rng.normal(mu, sigma, size=x.shape))
        return fn
    if name == "random-affine":
        ranges = kw.get("ranges")
        def fn(x, rng):
            return aug.random_affine_baseline(x, rng, ranges=ranges)
        return fn
    if name == "oracle-shift":
        max_shift = kw.get("max_shift", 6)
        def fn(x, rng):
            return aug.oracle_shift_baseline(x, rng, max_shift)
        return fn
    raise ValueError(f"unknown static augmentation {name!r}")
