"""Optimization loops: Adam, early stopping, teacher/student training.

Reproducibility contract: given (seed, data order, hyperparameters) every
parameter is bitwise identical across reruns. All randomness flows through
named streams derived from the run seed, so the teacher inside a co-train
run consumes exactly the rng draws a standalone teacher run would.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import distill as KD
from . import tensor as T
from .data import Batch, EncodedDataset, batches
from .distill import DistillConfig, HintProjector, TeacherGate
from .metrics import auc, logloss
from .models import Model
from .tensor import Tensor

VAL_AUC_MAX = "val_auc_max"
KD_LOSS_MIN = "kd_loss_min"

# stream tags so independent rng consumers never collide
_BATCH_TAG = 0xB0
_DROPOUT_TAG = 0xD0
_MONITOR_TAG = 0x30
_PROJECTOR_TAG = 0x70

TEACHER_ROLE = 0
STUDENT_ROLE = 1


class TrainingDiverged(RuntimeError):
    pass


def _batch_seed(seed: int, epoch: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([_BATCH_TAG, seed, epoch])


def _dropout_rng(seed: int, role: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([_DROPOUT_TAG, seed, role]))


def _monitor_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([_MONITOR_TAG, seed, epoch]))


@dataclass(frozen=True)
class TrainHyper:
    lr: float = 1e-3
    batch_size: int = 2000
    max_epochs: int = 100
    patience: int | None = 3
    l2_embedding: float = 0.0
    kd_monitor_rows: int = 8192


# Grids mirroring the tuning protocol; exposed for sweep tooling.
GRID_L2 = (0.0, 1e-8, 1e-7, 1e-6, 1e-5)
GRID_DROPOUT = (0.1, 0.2, 0.3, 0.4, 0.5)
GRID_HIDDEN_LAYERS = (2, 3, 4, 5, 6)
GRID_HIDDEN_UNITS = (300, 400, 500, 600)
GRID_CROSS_CIN_DEPTH = (1, 2, 3, 4, 5)
GRID_TAU = (1, 2, 3, 4, 5, 7, 10, 15)
GRID_SOFT_BETA = tuple(round(0.1 * i, 1) for i in range(11))
GRID_HINT_BETA = (0.0, 1e-6, 1e-5, 1e-4, 1e-3)


class Adam:
    """Adam with bias correction; lr=1e-3, betas=(0.9, 0.999), eps=1e-8."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.values) for p in self.params]
        self.v = [np.zeros_like(p.values) for p in self.params]

    def step(self) -> None:
        """Apply one bias-corrected update, then clear the gradients."""
        for p in self.params:
            if p.grad is None:
                raise ValueError(f"parameter {p.name or p} has no gradient")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            p.values -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.grad = None

    def state(self) -> tuple[int, dict[str, np.ndarray], dict[str, np.ndarray]]:
        names = [p.name or f"param{i}" for i, p in enumerate(self.params)]
        return (self.t,
                {n: m.copy() for n, m in zip(names, self.m)},
                {n: v.copy() for n, v in zip(names, self.v)})

    def load_state(self, t: int, m: dict[str, np.ndarray], v: dict[str, np.ndarray]) -> None:
        self.t = int(t)
        for i, p in enumerate(self.params):
            name = p.name or f"param{i}"
            np.copyto(self.m[i], m[name])
            np.copyto(self.v[i], v[name])


def _apply_l2(embedding_params: list[Tensor], lam: float) -> None:
    # gradient of lam * sum ||E||^2, embeddings only
    if lam == 0.0:
        return
    for p in embedding_params:
        p.grad += 2.0 * lam * p.values


@dataclass
class EpochStats:
    epoch: int
    loss: float
    monitor: float
    seconds: float
    stopped: bool


class TrainRecord:
    """Per-epoch training trace, exportable as CSV."""

    def __init__(self):
        self.epochs: list[EpochStats] = []

    def append(self, stats: EpochStats) -> None:
        self.epochs.append(stats)

    def __len__(self) -> int:
        return len(self.epochs)

    @property
    def best_epoch(self) -> int:
        return max((e.epoch for e in self.epochs), default=0)

    @property
    def total_seconds(self) -> float:
        return sum(e.seconds for e in self.epochs)

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write("epoch,loss,monitor_value,seconds,stopped\n")
            for e in self.epochs:
                f.write(f"{e.epoch},{e.loss!r},{e.monitor!r},{e.seconds!r},"
                        f"{str(e.stopped).lower()}\n")


class EarlyStopMonitor:
    """Stop after `patience` consecutive epochs without strict improvement;
    the best-epoch parameter snapshot is restored on stop."""

    def __init__(self, mode: str, patience: int = 3):
        if mode not in (VAL_AUC_MAX, KD_LOSS_MIN):
            raise ValueError(f"unknown early-stop mode {mode!r}")
        self.mode = mode
        self.patience = patience
        self.best_value: float | None = None
        self.best_epoch = 0
        self.epochs_since_best = 0
        self._best_state: list[np.ndarray] | None = None

    def _improved(self, value: float) -> bool:
        if self.best_value is None:
            return True
        if self.mode == VAL_AUC_MAX:
            return value > self.best_value
        return value < self.best_value

    def update(self, value: float, params: list[Tensor], epoch: int) -> bool:
        """Record one epoch's monitored value; True means stop now."""
        if self._improved(value):
            self.best_value = value
            self.best_epoch = epoch
            self.epochs_since_best = 0
            self._best_state = [p.values.copy() for p in params]
        else:
            self.epochs_since_best += 1
        return self.epochs_since_best >= self.patience

    def restore(self, params: list[Tensor]) -> None:
        if self._best_state is None:
            return
        for p, saved in zip(params, self._best_state):
            np.copyto(p.values, saved)


def predict_dataset(model: Model, dataset: EncodedDataset,
                    batch_size: int = 8192) -> np.ndarray:
    """Inference-mode probabilities for a whole split; labels untouched."""
    out = []
    n = len(dataset)
    for start in range(0, n, batch_size):
        stop = min(start + batch_size, n)
        out.append(model.predict_proba(dataset.cat[start:stop], dataset.num[start:stop]))
    return np.concatenate(out)


def evaluate_model(model: Model, dataset: EncodedDataset,
                   batch_size: int = 8192) -> tuple[float, float]:
    """(AUC, logloss) on a labeled split."""
    scores = predict_dataset(model, dataset, batch_size)
    labels = dataset.labels
    return auc(scores, labels), logloss(scores, labels)


def _check_finite(loss_value: float, epoch: int, step: int) -> None:
    if not np.isfinite(loss_value):
        raise TrainingDiverged(
            f"loss became {loss_value} at epoch {epoch}, step {step}; "
            "lower the learning rate or check the input scaling")


def train_teacher(model: Model, train_data: EncodedDataset, hyper: TrainHyper,
                  seed: int, val_data: EncodedDataset | None = None,
                  on_step=None) -> TrainRecord:
    """Minimize BCE (+ L2 on embeddings); early-stop on validation AUC.

    ``on_step(epoch, step)`` fires after each optimizer update, for tracing.
    """
    record = TrainRecord()
    params = model.parameters()
    opt = Adam(params, lr=hyper.lr)
    drop_rng = _dropout_rng(seed, TEACHER_ROLE)
    monitor = (EarlyStopMonitor(VAL_AUC_MAX, hyper.patience)
               if val_data is not None and hyper.patience is not None else None)
    embed_params = model.embedding_parameters()

    for epoch in range(1, hyper.max_epochs + 1):
        t0 = time.perf_counter()
        epoch_loss = 0.0
        n_batches = 0
        for step, batch in enumerate(batches(train_data, hyper.batch_size,
                                             shuffle=True, seed=_batch_seed(seed, epoch))):
            logit, _ = model.forward(batch.cat, batch.num, training=True, rng=drop_rng)
            loss = KD.bce_loss(batch.labels, T.sigmoid(logit))
            value = loss.item()
            _check_finite(value, epoch, step)
            loss.backward()
            _apply_l2(embed_params, hyper.l2_embedding)
            opt.step()
            if on_step is not None:
                on_step(epoch, step)
            epoch_loss += value
            n_batches += 1

        monitor_value = float("nan")
        stop = False
        if val_data is not None:
            monitor_value = auc(predict_dataset(model, val_data), val_data.labels)
            if monitor is not None:
                stop = monitor.update(monitor_value, params, epoch)
        record.append(EpochStats(epoch, epoch_loss / n_batches, monitor_value,
                                 time.perf_counter() - t0, stop))
        if stop:
            break
    if monitor is not None:
        monitor.restore(params)
    return record


def _teacher_outputs(teachers: list[Model], cat, num, need_hints: bool):
    """Detached per-teacher logits (and hints) for one batch."""
    logits, hints = [], []
    for t in teachers:
        if need_hints:
            z, h = t.hint_values(cat, num)
            hints.append(h)
        else:
            z = t.logit_values(cat, num)
        logits.append(z)
    return logits, hints


def _kd_term(dcfg: DistillConfig, teacher_logits, teacher_hints,
             student_logit: Tensor, student_hint: Tensor,
             gate: TeacherGate | None, projectors: list[HintProjector] | None) -> Tensor:
    if dcfg.method == KD.SOFT_LABEL:
        alphas = (KD.gate_weights(teacher_logits, gate) if gate is not None
                  else KD.uniform_weights(teacher_logits))
        ensemble = KD.ensemble_teacher_logit(teacher_logits, alphas)
        return KD.soft_label_loss(ensemble, student_logit, dcfg.tau)
    # hint regression: uniform average of per-teacher hint losses
    total = None
    for hint, proj in zip(teacher_hints, projectors):
        term = KD.hint_loss(hint, student_hint, proj)
        total = term if total is None else T.add(total, term)
    return total if len(teacher_hints) == 1 else T.mul(total, 1.0 / len(teacher_hints))


@dataclass
class DistillResult:
    record: TrainRecord
    gate: TeacherGate | None
    projectors: list[HintProjector] | None


def train_student_pretrain(student: Model, teachers: list[Model],
                           dcfg: DistillConfig, train_data: EncodedDataset,
                           hyper: TrainHyper, seed: int,
                           val_data: EncodedDataset | None = None,
                           stop_mode: str = KD_LOSS_MIN) -> DistillResult:
    """Distill from frozen teachers; by default early-stop on the KD loss
    measured over an unlabeled slice of training inputs, so no validation
    labels are ever read (merge the validation rows into ``train_data`` to
    use them as extra training signal)."""
    if not teachers:
        raise ValueError("pretrain distillation needs at least one trained teacher")
    for t in teachers:
        if t.dims != student.dims:
            raise ValueError("teacher and student were built for different field schemas")
    if stop_mode not in (KD_LOSS_MIN, VAL_AUC_MAX):
        raise ValueError(f"unknown stop mode {stop_mode!r}")
    if stop_mode == VAL_AUC_MAX and val_data is None:
        raise ValueError("val_auc_max stopping requires validation data")

    # beta = 0 skips the KD term, so the gate/projectors would never see a
    # gradient; leave them out to keep the trajectory identical to plain CE
    gate = TeacherGate(len(teachers)) if dcfg.gating and dcfg.beta > 0.0 else None
    projectors = None
    if dcfg.method == KD.HINT and dcfg.beta > 0.0:
        proj_rng = np.random.default_rng(np.random.SeedSequence([_PROJECTOR_TAG, seed]))
        projectors = [HintProjector(t.hint_dim, student.hint_dim, rng=proj_rng,
                                    name=f"hintproj.{i}")
                      for i, t in enumerate(teachers)]

    params = student.parameters()
    if gate is not None:
        params += gate.parameters()
    if projectors is not None:
        for proj in projectors:
            params += proj.parameters()
    opt = Adam(params, lr=hyper.lr)
    drop_rng = _dropout_rng(seed, STUDENT_ROLE)
    monitor = EarlyStopMonitor(stop_mode, hyper.patience) if hyper.patience is not None else None
    embed_params = student.embedding_parameters()
    need_hints = dcfg.method == KD.HINT
    record = TrainRecord()

    def kd_value_on(cat, num) -> float:
        z_list, h_list = _teacher_outputs(teachers, cat, num, need_hints)
        s_logit, s_hint = student.forward(cat, num, training=False)
        return _kd_term(dcfg, z_list, h_list, s_logit, s_hint, gate, projectors).item()

    for epoch in range(1, hyper.max_epochs + 1):
        t0 = time.perf_counter()
        epoch_loss = 0.0
        n_batches = 0
        for step, batch in enumerate(batches(train_data, hyper.batch_size,
                                             shuffle=True, seed=_batch_seed(seed, epoch))):
            s_logit, s_hint = student.forward(batch.cat, batch.num,
                                              training=True, rng=drop_rng)
            if dcfg.beta == 0.0:
                kd = None  # skip teacher inference entirely
            else:
                z_list, h_list = _teacher_outputs(teachers, batch.cat, batch.num, need_hints)
                kd = _kd_term(dcfg, z_list, h_list, s_logit, s_hint, gate, projectors)
            loss = KD.student_loss(batch.labels, T.sigmoid(s_logit), kd,
                                   dcfg.beta, dcfg.gamma)
            value = loss.item()
            _check_finite(value, epoch, step)
            loss.backward()
            _apply_l2(embed_params, hyper.l2_embedding)
            opt.step()
            epoch_loss += value
            n_batches += 1

        if stop_mode == KD_LOSS_MIN:
            # unlabeled monitoring slice of training inputs, refreshed per epoch
            n = len(train_data)
            rows = min(hyper.kd_monitor_rows, n)
            idx = _monitor_rng(seed, epoch).choice(n, size=rows, replace=False)
            monitor_value = kd_value_on(train_data.cat[idx], train_data.num[idx])
        else:
            monitor_value = auc(predict_dataset(student, val_data), val_data.labels)

        stop = monitor.update(monitor_value, params, epoch) if monitor is not None else False
        record.append(EpochStats(epoch, epoch_loss / n_batches, monitor_value,
                                 time.perf_counter() - t0, stop))
        if stop:
            break
    if monitor is not None:
        monitor.restore(params)
    return DistillResult(record, gate, projectors)


def train_student_cotrain(teacher: Model, student: Model, dcfg: DistillConfig,
                          train_data: EncodedDataset, hyper: TrainHyper,
                          seed: int, on_step=None) -> tuple[TrainRecord, TrainRecord]:
    """Joint loop with one teacher: each batch, the teacher steps on its own
    BCE, then the student steps against the freshly updated teacher's
    detached inference outputs. The teacher's trajectory is bit-identical
    to a standalone run at the same seed and batch order.

    ``on_step(epoch, step)`` fires after the teacher's optimizer update,
    before the student half of the batch."""
    if teacher.dims != student.dims:
        raise ValueError("teacher and student were built for different field schemas")
    t_params = teacher.parameters()
    s_params = student.parameters()
    opt_t = Adam(t_params, lr=hyper.lr)
    opt_s = Adam(s_params, lr=hyper.lr)
    rng_t = _dropout_rng(seed, TEACHER_ROLE)
    rng_s = _dropout_rng(seed, STUDENT_ROLE)
    t_embed = teacher.embedding_parameters()
    s_embed = student.embedding_parameters()
    need_hints = dcfg.method == KD.HINT and dcfg.beta > 0.0
    projector = (HintProjector(teacher.hint_dim, student.hint_dim,
                               rng=np.random.default_rng(
                                   np.random.SeedSequence([_PROJECTOR_TAG, seed])))
                 if need_hints else None)
    if projector is not None:
        opt_s = Adam(s_params + projector.parameters(), lr=hyper.lr)

    t_record, s_record = TrainRecord(), TrainRecord()
    for epoch in range(1, hyper.max_epochs + 1):
        t0 = time.perf_counter()
        t_loss_sum = s_loss_sum = 0.0
        n_batches = 0
        for step, batch in enumerate(batches(train_data, hyper.batch_size,
                                             shuffle=True, seed=_batch_seed(seed, epoch))):
            # teacher step on its own supervised loss
            t_logit, _ = teacher.forward(batch.cat, batch.num, training=True, rng=rng_t)
            t_loss = KD.bce_loss(batch.labels, T.sigmoid(t_logit))
            t_value = t_loss.item()
            _check_finite(t_value, epoch, step)
            t_loss.backward()
            _apply_l2(t_embed, hyper.l2_embedding)
            opt_t.step()
            if on_step is not None:
                on_step(epoch, step)

            # student step against the current teacher, outputs detached
            z_list, h_list = _teacher_outputs([teacher], batch.cat, batch.num, need_hints)
            s_logit, s_hint = student.forward(batch.cat, batch.num, training=True, rng=rng_s)
            if dcfg.beta == 0.0:
                kd = None
            else:
                kd = _kd_term(dcfg, z_list, h_list, s_logit, s_hint, None,
                              [projector] if projector is not None else None)
            s_loss = KD.student_loss(batch.labels, T.sigmoid(s_logit), kd,
                                     dcfg.beta, dcfg.gamma)
            s_value = s_loss.item()
            _check_finite(s_value, epoch, step)
            s_loss.backward()
            _apply_l2(s_embed, hyper.l2_embedding)
            opt_s.step()

            t_loss_sum += t_value
            s_loss_sum += s_value
            n_batches += 1
        dt = time.perf_counter() - t0
        t_record.append(EpochStats(epoch, t_loss_sum / n_batches, float("nan"), dt, False))
        s_record.append(EpochStats(epoch, s_loss_sum / n_batches, float("nan"), dt, False))
    return t_record, s_record
