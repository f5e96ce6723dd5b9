"""Training strategies: xe, ls (label smoothing), lc (label confusion), lskd_iter, lskd_syn.

All strategies run plain minibatch SGD. Targets are built per batch:

* ``xe``        one-hot labels, cross-entropy.
* ``ls``        one-hot fused with a uniform distribution, KL.
* ``lc``        one-hot fused with a learned instance-label similarity
                distribution, KL; the label embedding is trained on the same loss.
* ``lskd_iter`` one-hot fused with the output of a frozen snapshot of the model,
                refreshed every ``interval_epochs``; plain XE before the first
                snapshot.
* ``lskd_syn``  a second (teacher) head on the shared encoder learns from
                one-hot labels; its output, fused with the one-hot label, is the
                KL target of the student head.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .distributions import fuse_sld, log_softmax_t, onehot, onehot_batch, softmax_backward, softmax_t
from .metrics import UndefinedMetricError, evaluate
from .model import (
    ConfigurationError,
    Forward,
    HeadLoss,
    RelationModel,
    TeacherSnapshot,
    backward_multi,
    forward,
    sgd_update,
    take_snapshot,
)
from .synthetic_data import DatasetSplit, InstanceSet, RelationInstance

log = logging.getLogger(__name__)

STRATEGIES = ("xe", "ls", "lc", "lskd_iter", "lskd_syn")


@dataclass
class TrainConfig:
    strategy: str = "xe"
    alpha: float = 4.0
    tau: float = 1.0  # temperature of the teacher output and of the soft-label fusion
    batch_size: int = 12
    lr: float = 0.01
    decay_factor: float = 10.0
    max_decays: int = 2
    plateau_patience: int = 2
    interval_epochs: float = 2.0
    max_epochs: int = 20
    seed: int = 0
    # synchronous variant: stop the student's KL gradient at the teacher output
    syn_detach_teacher: bool = True
    # synchronous variant: weight of the teacher-head XE term (student KL has weight 1)
    syn_teacher_weight: float = 1.0
    lc_init_scale: float = 1.0
    eval_every_epoch: bool = True

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.alpha < 0:
            raise ConfigurationError("alpha must be >= 0")
        if self.tau <= 0:
            raise ConfigurationError("tau must be > 0")
        if self.interval_epochs <= 0:
            raise ConfigurationError("interval_epochs must be > 0")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigurationError("lr must be > 0")
        if self.max_epochs < 0:
            raise ConfigurationError("max_epochs must be >= 0")
        if self.max_decays < 0 or self.decay_factor <= 0 or self.plateau_patience < 1:
            raise ConfigurationError("bad learning-rate schedule settings")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> TrainConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    lr: float
    val: dict[str, float | None] = field(default_factory=dict)


@dataclass
class TrainState:
    lr: float
    initial_lr: float
    decay_factor: float = 10.0
    max_decays: int = 2
    plateau_patience: int = 2
    decays_used: int = 0
    last_decay_index: int = -1
    step: int = 0
    steps_per_epoch: int = 1
    teacher: TeacherSnapshot | None = None
    history: list[EpochRecord] = field(default_factory=list)
    label_embedding: np.ndarray | None = None  # label confusion only

    @property
    def epoch(self) -> float:
        return self.step / self.steps_per_epoch


def init_state(cfg: TrainConfig, steps_per_epoch: int = 1) -> TrainState:
    return TrainState(
        lr=cfg.lr, initial_lr=cfg.lr, decay_factor=cfg.decay_factor, max_decays=cfg.max_decays,
        plateau_patience=cfg.plateau_patience, steps_per_epoch=max(1, steps_per_epoch),
    )


def lr_schedule_update(state: TrainState, val_mean_history) -> TrainState:
    """Divide the lr by ``decay_factor`` once the validation Mean has stalled.

    Stalled means no new best for ``plateau_patience`` epochs, counted from the
    later of the best epoch and the previous decay.
    """
    hist = [float("-inf") if v is None else v for v in val_mean_history]
    if not hist or state.decays_used >= state.max_decays:
        return state
    best = int(np.argmax(hist))
    since = len(hist) - 1 - max(best, state.last_decay_index)
    if since >= state.plateau_patience:
        state.decays_used += 1
        state.last_decay_index = len(hist) - 1
        state.lr = state.initial_lr / state.decay_factor ** state.decays_used
    return state


# -- target construction ------------------------------------------------------


def _label(instance) -> int:
    return int(instance.label) if isinstance(instance, RelationInstance) else int(instance)


def make_target_xe(instance, num_classes: int) -> np.ndarray:
    return onehot(_label(instance), num_classes)


def make_target_lskd(instance, teacher_probs, alpha: float, tau: float) -> np.ndarray:
    teacher_probs = np.asarray(teacher_probs, dtype=np.float64)
    return fuse_sld(onehot(_label(instance), teacher_probs.shape[-1]), teacher_probs, alpha, tau)


def make_target_lc(instance_repr, labels: np.ndarray, label_idx: int, alpha: float, tau: float) -> np.ndarray:
    """Fuse the one-hot label with softmax(E @ repr, tau)."""
    instance_repr = np.asarray(instance_repr, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if labels.shape[1] != instance_repr.shape[-1]:
        raise ValueError(f"label embedding width {labels.shape[1]} != repr dim {instance_repr.shape[-1]}")
    confusion = softmax_t(labels @ instance_repr, tau)
    return fuse_sld(onehot(label_idx, labels.shape[0]), confusion, alpha, tau)


def _safe_log(p: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(p, np.finfo(float).tiny))


def _grad_wrt_soft_target(targets: np.ndarray, student_logits: np.ndarray, tau: float) -> np.ndarray:
    """d mean_batch KL(s || q) / d s, dropping the constant that softmax_backward cancels."""
    logq = np.maximum(log_softmax_t(student_logits, tau), np.log(1e-12))
    return (_safe_log(targets) - logq) / targets.shape[0]


# -- per-strategy loss + gradient ---------------------------------------------


@dataclass
class Batch:
    features: np.ndarray
    labels: np.ndarray


def loss_grads_xe(model: RelationModel, batch: Batch, cfg: TrainConfig, state: TrainState):
    y = onehot_batch(batch.labels, model.dims.num_classes)
    grads, loss, _ = backward_multi(model, batch.features, [HeadLoss("student", y, "xe")])
    return grads, loss


def loss_grads_ls(model: RelationModel, batch: Batch, cfg: TrainConfig, state: TrainState):
    c = model.dims.num_classes
    y = onehot_batch(batch.labels, c)
    targets = fuse_sld(y, np.full_like(y, 1.0 / c), cfg.alpha, cfg.tau)
    grads, loss, _ = backward_multi(model, batch.features, [HeadLoss("student", targets, "kl")])
    return grads, loss


def loss_grads_lc(model: RelationModel, batch: Batch, cfg: TrainConfig, state: TrainState):
    E = state.label_embedding
    y = onehot_batch(batch.labels, model.dims.num_classes)
    fwd = forward(model, batch.features)
    confusion = softmax_t(fwd.r @ E.T, cfg.tau)
    targets = fuse_sld(y, confusion, cfg.alpha, cfg.tau)
    # the target depends on E and on the representation
    g_s = _grad_wrt_soft_target(targets, fwd.logits["student"], model.tau)
    g_conf = softmax_backward(targets, g_s, cfg.tau)
    g_v = softmax_backward(confusion, g_conf, cfg.tau)
    grads, loss, _ = backward_multi(model, batch.features, [HeadLoss("student", targets, "kl")],
                                    fwd=fwd, extra_repr_grad=g_v @ E)
    grads["label_embedding"] = g_v.T @ fwd.r
    return grads, loss


def lskd_iter_in_bootstrap(state: TrainState, cfg: TrainConfig) -> bool:
    return state.teacher is None


def loss_grads_lskd_iter(model: RelationModel, batch: Batch, cfg: TrainConfig, state: TrainState):
    if lskd_iter_in_bootstrap(state, cfg):
        return loss_grads_xe(model, batch, cfg, state)
    y = onehot_batch(batch.labels, model.dims.num_classes)
    lsd = state.teacher.probs(batch.features, cfg.tau)
    targets = fuse_sld(y, lsd, cfg.alpha, cfg.tau)
    grads, loss, _ = backward_multi(model, batch.features, [HeadLoss("student", targets, "kl")])
    return grads, loss


def syn_targets(model: RelationModel, fwd: Forward, labels, cfg: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    """(teacher LSD, SLD targets) from the teacher head's current output."""
    y = onehot_batch(labels, model.dims.num_classes)
    lsd = softmax_t(fwd.logits["teacher"], cfg.tau)
    return lsd, fuse_sld(y, lsd, cfg.alpha, cfg.tau)


def loss_grads_lskd_syn(model: RelationModel, batch: Batch, cfg: TrainConfig, state: TrainState,
                        student_weight: float = 1.0):
    if model.teacher_head is None:
        raise ConfigurationError("lskd_syn needs a model with a teacher head")
    y = onehot_batch(batch.labels, model.dims.num_classes)
    fwd = forward(model, batch.features, heads=("student", "teacher"))
    lsd, targets = syn_targets(model, fwd, batch.labels, cfg)
    losses = [HeadLoss("teacher", y, "xe", weight=cfg.syn_teacher_weight)]
    if student_weight:
        losses.append(HeadLoss("student", targets, "kl", weight=student_weight))
    extra = None
    g_zt = None
    if student_weight and not cfg.syn_detach_teacher:
        g_s = student_weight * _grad_wrt_soft_target(targets, fwd.logits["student"], model.tau)
        g_zt = softmax_backward(lsd, softmax_backward(targets, g_s, cfg.tau), cfg.tau)
        extra = g_zt @ model.teacher_head.W.T
    grads, loss, _ = backward_multi(model, batch.features, losses, fwd=fwd, extra_repr_grad=extra)
    if g_zt is not None:
        grads["teacher.W"] += fwd.r.T @ g_zt
        grads["teacher.sigma"] += g_zt.sum(axis=0)
    return grads, loss


LOSS_FNS: dict[str, Callable] = {
    "xe": loss_grads_xe,
    "ls": loss_grads_ls,
    "lc": loss_grads_lc,
    "lskd_iter": loss_grads_lskd_iter,
    "lskd_syn": loss_grads_lskd_syn,
}


def _apply(model: RelationModel, state: TrainState, grads: dict[str, np.ndarray]) -> None:
    emb = grads.pop("label_embedding", None)
    if emb is not None:
        state.label_embedding -= state.lr * emb
    sgd_update(model, grads, state.lr)


def step_xe(state: TrainState, batch: Batch, model: RelationModel, cfg: TrainConfig) -> float:
    grads, loss = loss_grads_xe(model, batch, cfg, state)
    _apply(model, state, grads)
    state.step += 1
    return loss


def maybe_refresh_teacher(state: TrainState, model: RelationModel, cfg: TrainConfig) -> None:
    """Snapshot the live model at every interval boundary (never at step 0)."""
    interval = interval_steps(cfg, state.steps_per_epoch)
    if state.step > 0 and state.step % interval == 0:
        state.teacher = take_snapshot(model, created_at=state.epoch)


def step_lskd_iter(state: TrainState, batch: Batch, model: RelationModel, cfg: TrainConfig) -> float:
    maybe_refresh_teacher(state, model, cfg)
    grads, loss = loss_grads_lskd_iter(model, batch, cfg, state)
    _apply(model, state, grads)
    state.step += 1
    return loss


def step_lskd_syn(state: TrainState, batch: Batch, model: RelationModel, cfg: TrainConfig) -> float:
    grads, loss = loss_grads_lskd_syn(model, batch, cfg, state)
    _apply(model, state, grads)
    state.step += 1
    return loss


def _step_generic(fn):
    def step(state: TrainState, batch: Batch, model: RelationModel, cfg: TrainConfig) -> float:
        grads, loss = fn(model, batch, cfg, state)
        _apply(model, state, grads)
        state.step += 1
        return loss

    return step


STEP_FNS = {
    "xe": step_xe,
    "ls": _step_generic(loss_grads_ls),
    "lc": _step_generic(loss_grads_lc),
    "lskd_iter": step_lskd_iter,
    "lskd_syn": step_lskd_syn,
}


def interval_steps(cfg: TrainConfig, steps_per_epoch: int) -> int:
    return max(1, int(round(cfg.interval_epochs * steps_per_epoch)))


def init_label_embedding(num_classes: int, repr_dim: int, seed: int, scale: float) -> np.ndarray:
    # separate stream so the shuffle order matches the other strategies
    rng = np.random.default_rng([seed, 0x1C])
    return rng.standard_normal((num_classes, repr_dim)) * (scale / np.sqrt(repr_dim))


def check_compatible(cfg: TrainConfig, data: DatasetSplit, model: RelationModel) -> None:
    cfg.validate()
    dims = model.dims
    if dims.feature_dim != data.feature_dim:
        raise ConfigurationError(f"model expects {dims.feature_dim}-d features, dataset has {data.feature_dim}")
    if dims.num_classes != data.num_classes:
        raise ConfigurationError(f"model has {dims.num_classes} classes, dataset has {data.num_classes}")
    if cfg.strategy == "lskd_syn" and model.teacher_head is None:
        raise ConfigurationError("lskd_syn needs a model with a teacher head")


def _val_summary(model: RelationModel, data: DatasetSplit) -> dict[str, float | None]:
    if len(data.val) == 0:
        return {}
    try:
        rep = evaluate(model, data.val, data.vocabulary)
    except UndefinedMetricError:
        return {}
    return {
        "R@50": rep.r_at.get(50), "R@100": rep.r_at.get(100),
        "mR@50": rep.mr_at.get(50), "mR@100": rep.mr_at.get(100),
        "Mean": rep.mean_metric,
    }


def train(cfg: TrainConfig, data: DatasetSplit, model: RelationModel,
          on_epoch: Callable[[EpochRecord], None] | None = None) -> tuple[RelationModel, TrainState]:
    """Train a copy of ``model``; the caller's model is left untouched.

    Only ``data.train``, ``data.val`` and ``data.vocabulary`` are read.
    """
    check_compatible(cfg, data, model)
    model = model.copy()
    train_set: InstanceSet = data.train
    n = len(train_set)
    steps_per_epoch = max(1, math.ceil(n / cfg.batch_size))
    state = init_state(cfg, steps_per_epoch)
    if cfg.strategy == "lc":
        state.label_embedding = init_label_embedding(
            model.dims.num_classes, model.dims.repr_dim, cfg.seed, cfg.lc_init_scale)
    if n == 0 or cfg.max_epochs == 0:
        return model, state

    step_fn = STEP_FNS[cfg.strategy]
    rng = np.random.default_rng(cfg.seed)
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(n)
        total = 0.0
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            batch = Batch(train_set.features[idx], train_set.labels[idx])
            total += step_fn(state, batch, model, cfg) * idx.shape[0]
        record = EpochRecord(epoch=epoch + 1, train_loss=total / n, lr=state.lr)
        if cfg.eval_every_epoch:
            record.val = _val_summary(model, data)
        state.history.append(record)
        if record.val.get("Mean") is not None:
            lr_schedule_update(state, [h.val.get("Mean") for h in state.history])
        log.info("epoch %d loss %.4f lr %g val %s", record.epoch, record.train_loss, record.lr, record.val)
        if on_epoch is not None:
            on_epoch(record)
    return model, state
