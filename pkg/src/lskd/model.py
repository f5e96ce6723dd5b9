"""Relation classifier: tanh MLP encoder + linear softmax heads, closed-form backprop."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .distributions import PROB_FLOOR, log_softmax_t, softmax_backward, softmax_t

CHECKPOINT_VERSION = 1


class ConfigurationError(ValueError):
    pass


def _act(x):
    return np.tanh(x)


def _act_grad_from_output(y):
    return 1.0 - y * y


@dataclass
class HeadParams:
    W: np.ndarray  # (repr_dim, num_classes)
    sigma: np.ndarray  # (num_classes,)


@dataclass
class EncoderParams:
    W1: np.ndarray  # (feature_dim, hidden)
    b1: np.ndarray
    W2: np.ndarray  # (hidden, repr_dim)
    b2: np.ndarray


@dataclass(frozen=True)
class ModelDims:
    feature_dim: int
    hidden_dim: int
    repr_dim: int
    num_classes: int


@dataclass
class RelationModel:
    encoder: EncoderParams
    student_head: HeadParams
    teacher_head: HeadParams | None = None
    tau: float = 1.0

    @property
    def dims(self) -> ModelDims:
        return ModelDims(
            feature_dim=self.encoder.W1.shape[0],
            hidden_dim=self.encoder.W1.shape[1],
            repr_dim=self.encoder.W2.shape[1],
            num_classes=self.student_head.W.shape[1],
        )

    @property
    def variant(self) -> str:
        return "synchronous" if self.teacher_head is not None else "single"

    def named_params(self) -> Iterator[tuple[str, np.ndarray]]:
        """Parameters in checkpoint order."""
        for name in ("W1", "b1", "W2", "b2"):
            yield f"encoder.{name}", getattr(self.encoder, name)
        yield "student.W", self.student_head.W
        yield "student.sigma", self.student_head.sigma
        if self.teacher_head is not None:
            yield "teacher.W", self.teacher_head.W
            yield "teacher.sigma", self.teacher_head.sigma

    def copy(self) -> RelationModel:
        return copy.deepcopy(self)


def param_hash(model) -> str:
    h = hashlib.sha256()
    for name, arr in model.named_params():
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
    h.update(repr(float(model.tau)).encode())
    return h.hexdigest()


def _draw(rng, fan_in: int, shape, scale: float) -> np.ndarray:
    return rng.standard_normal(shape) * (scale / np.sqrt(fan_in))


def _init_head(rng, repr_dim: int, num_classes: int, scale: float) -> HeadParams:
    return HeadParams(W=_draw(rng, repr_dim, (repr_dim, num_classes), scale), sigma=np.zeros(num_classes))


def init_model(dims: ModelDims, seed: int, scale: float = 1.0, teacher_head: bool = False,
               tau: float = 1.0) -> RelationModel:
    """Gaussian(0, scale^2 / fan_in) weights, zero biases."""
    if min(dims.feature_dim, dims.hidden_dim, dims.repr_dim) < 1 or dims.num_classes < 2:
        raise ValueError(f"inconsistent dims {dims}")
    if scale < 0:
        raise ValueError("scale must be non-negative")
    rng = np.random.default_rng(seed)
    enc = EncoderParams(
        W1=_draw(rng, dims.feature_dim, (dims.feature_dim, dims.hidden_dim), scale),
        b1=np.zeros(dims.hidden_dim),
        W2=_draw(rng, dims.hidden_dim, (dims.hidden_dim, dims.repr_dim), scale),
        b2=np.zeros(dims.repr_dim),
    )
    student = _init_head(rng, dims.repr_dim, dims.num_classes, scale)
    teacher = _init_head(rng, dims.repr_dim, dims.num_classes, scale) if teacher_head else None
    return RelationModel(encoder=enc, student_head=student, teacher_head=teacher, tau=tau)


def _check_features(enc: EncoderParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != enc.W1.shape[0]:
        raise ValueError(f"feature dim {x.shape[-1]} does not match encoder input {enc.W1.shape[0]}")
    return x


def encode(enc: EncoderParams, feature) -> np.ndarray:
    x = _check_features(enc, feature)
    return _act(_act(x @ enc.W1 + enc.b1) @ enc.W2 + enc.b2)


def encoder_jacobian(enc: EncoderParams, feature) -> np.ndarray:
    """d repr / d feature for a single feature vector, shape (repr_dim, feature_dim)."""
    x = _check_features(enc, feature)
    h = _act(x @ enc.W1 + enc.b1)
    r = _act(h @ enc.W2 + enc.b2)
    return (_act_grad_from_output(r)[:, None] * enc.W2.T) @ (_act_grad_from_output(h)[:, None] * enc.W1.T)


def head_logits(head: HeadParams, rep) -> np.ndarray:
    rep = np.asarray(rep, dtype=np.float64)
    if rep.shape[-1] != head.W.shape[0]:
        raise ValueError(f"repr dim {rep.shape[-1]} does not match head input {head.W.shape[0]}")
    return rep @ head.W + head.sigma


def head_forward(head: HeadParams, rep, tau: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    logits = head_logits(head, rep)
    return logits, softmax_t(logits, tau)


@dataclass
class Forward:
    x: np.ndarray
    h: np.ndarray
    r: np.ndarray
    logits: dict[str, np.ndarray] = field(default_factory=dict)
    probs: dict[str, np.ndarray] = field(default_factory=dict)


def _head(model: RelationModel, name: str) -> HeadParams:
    if name == "student":
        return model.student_head
    if name == "teacher":
        if model.teacher_head is None:
            raise ConfigurationError("model has no teacher head")
        return model.teacher_head
    raise ValueError(f"unknown head {name!r}")


def forward(model: RelationModel, features, heads: Sequence[str] = ("student",)) -> Forward:
    x = _check_features(model.encoder, np.atleast_2d(features))
    enc = model.encoder
    h = _act(x @ enc.W1 + enc.b1)
    r = _act(h @ enc.W2 + enc.b2)
    out = Forward(x=x, h=h, r=r)
    for name in heads:
        z = head_logits(_head(model, name), r)
        out.logits[name] = z
        out.probs[name] = softmax_t(z, model.tau)
    return out


def predict_proba(model, features, head: str = "student") -> np.ndarray:
    return forward(model, features, heads=(head,)).probs[head]


@dataclass
class HeadLoss:
    """One loss term attached to a head.

    ``kind`` is "xe" or "kl"; both give logit gradient (probs - targets) / tau.
    For "xe" the targets must be one-hot.
    """

    head: str
    targets: np.ndarray
    kind: str = "kl"
    weight: float = 1.0


def per_instance_loss(kind: str, targets: np.ndarray, logits: np.ndarray, tau: float) -> np.ndarray:
    logq = np.maximum(log_softmax_t(logits, tau), np.log(PROB_FLOOR))
    if kind == "xe":
        return -(targets * logq).sum(axis=-1)
    if kind == "kl":
        pos = targets > 0
        plogp = np.zeros_like(targets)
        plogp[pos] = targets[pos] * np.log(targets[pos])
        return (plogp - targets * logq).sum(axis=-1)
    raise ValueError(f"unknown loss kind {kind!r}")


def zero_grads(model: RelationModel) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(arr) for name, arr in model.named_params()}


def backward_multi(model: RelationModel, features, losses: Sequence[HeadLoss],
                   fwd: Forward | None = None, extra_repr_grad: np.ndarray | None = None
                   ) -> tuple[dict[str, np.ndarray], float, Forward]:
    """Gradients of sum_k weight_k * mean_batch(loss_k) for all parameters.

    ``extra_repr_grad`` (already batch-averaged) is added to d loss / d repr
    before the encoder pass, for loss terms that reach the representation
    through some other path.
    """
    if fwd is None:
        fwd = forward(model, features, heads=tuple(dict.fromkeys(l.head for l in losses)))
    n = fwd.x.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    tau = model.tau
    grads = zero_grads(model)
    grad_r = np.zeros_like(fwd.r) if extra_repr_grad is None else extra_repr_grad.copy()
    total = 0.0
    for term in losses:
        head = _head(model, term.head)
        if term.head not in fwd.logits:
            fwd.logits[term.head] = head_logits(head, fwd.r)
            fwd.probs[term.head] = softmax_t(fwd.logits[term.head], tau)
        targets = np.asarray(term.targets, dtype=np.float64)
        if targets.shape != fwd.probs[term.head].shape:
            raise ValueError(f"targets shape {targets.shape} != probs shape {fwd.probs[term.head].shape}")
        total += term.weight * float(per_instance_loss(term.kind, targets, fwd.logits[term.head], tau).mean())
        gz = term.weight * (fwd.probs[term.head] - targets) / (tau * n)
        grads[f"{term.head}.W"] += fwd.r.T @ gz
        grads[f"{term.head}.sigma"] += gz.sum(axis=0)
        grad_r += gz @ head.W.T
    enc = model.encoder
    ga2 = grad_r * _act_grad_from_output(fwd.r)
    grads["encoder.W2"] = fwd.h.T @ ga2
    grads["encoder.b2"] = ga2.sum(axis=0)
    ga1 = (ga2 @ enc.W2.T) * _act_grad_from_output(fwd.h)
    grads["encoder.W1"] = fwd.x.T @ ga1
    grads["encoder.b1"] = ga1.sum(axis=0)
    return grads, total, fwd


def backward(model: RelationModel, features, targets, loss_kind: str = "kl",
             head: str = "student") -> tuple[dict[str, np.ndarray], float]:
    """Mean loss over the batch and its gradient for every parameter."""
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if features.shape[0] == 0:
        raise ValueError("empty batch")
    grads, loss, _ = backward_multi(model, features, [HeadLoss(head, np.atleast_2d(targets), loss_kind)])
    return grads, loss


def get_param(model: RelationModel, name: str) -> np.ndarray:
    part, attr = name.split(".")
    owner = {"encoder": model.encoder, "student": model.student_head, "teacher": model.teacher_head}[part]
    if owner is None:
        raise KeyError(name)
    return getattr(owner, attr)


def sgd_update(model: RelationModel, grads: dict[str, np.ndarray], lr: float) -> None:
    for name, g in grads.items():
        get_param(model, name)[...] -= lr * g


@dataclass(frozen=True)
class TeacherSnapshot:
    """Frozen copy of encoder + student head, used as the iterative teacher."""

    model: RelationModel
    created_at: float
    digest: str

    def probs(self, features, tau: float) -> np.ndarray:
        z = head_logits(self.model.student_head, encode(self.model.encoder, np.atleast_2d(features)))
        return softmax_t(z, tau)

    def verify(self) -> bool:
        return param_hash(self.model) == self.digest


def take_snapshot(model: RelationModel, created_at: float = 0.0) -> TeacherSnapshot:
    frozen = RelationModel(
        encoder=copy.deepcopy(model.encoder),
        student_head=copy.deepcopy(model.student_head),
        teacher_head=None,
        tau=model.tau,
    )
    for _, arr in frozen.named_params():
        arr.setflags(write=False)
    return TeacherSnapshot(model=frozen, created_at=float(created_at), digest=param_hash(frozen))


# -- checkpoints --------------------------------------------------------------


def iter_checkpoint_lines(model: RelationModel) -> Iterator[str]:
    header = {
        "schema_version": CHECKPOINT_VERSION,
        "dims": dataclasses.asdict(model.dims),
        "tau": float(model.tau),
        "variant": model.variant,
        "params": [name for name, _ in model.named_params()],
    }
    yield json.dumps(header, sort_keys=True)
    for name, arr in model.named_params():
        yield json.dumps({"name": name, "shape": list(arr.shape), "values": arr.ravel().tolist()})


def save_checkpoint(model: RelationModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for line in iter_checkpoint_lines(model):
            fh.write(line + "\n")


def load_checkpoint(path) -> RelationModel:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    try:
        header = json.loads(lines[0])
    except (IndexError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path}: bad checkpoint header") from exc
    if header.get("schema_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: checkpoint schema {header.get('schema_version')!r} unsupported")
    arrays = {}
    for lineno, raw in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(raw)
            arrays[rec["name"]] = np.array(rec["values"], dtype=np.float64).reshape(rec["shape"])
        except (json.JSONDecodeError, KeyError, ValueError) as exc:
            raise ValueError(f"{path}: line {lineno}: bad parameter record") from exc
    missing = [n for n in header["params"] if n not in arrays]
    if missing:
        raise ValueError(f"{path}: missing parameters {missing}")
    teacher = None
    if header["variant"] == "synchronous":
        teacher = HeadParams(W=arrays["teacher.W"], sigma=arrays["teacher.sigma"])
    return RelationModel(
        encoder=EncoderParams(arrays["encoder.W1"], arrays["encoder.b1"], arrays["encoder.W2"], arrays["encoder.b2"]),
        student_head=HeadParams(W=arrays["student.W"], sigma=arrays["student.sigma"]),
        teacher_head=teacher,
        tau=float(header["tau"]),
    )


def checkpoint_hash(model: RelationModel) -> str:
    h = hashlib.sha256()
    for line in iter_checkpoint_lines(model):
        h.update(line.encode() + b"\n")
    return h.hexdigest()
