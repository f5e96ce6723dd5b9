"""Per-image triplet recall, per-predicate mean recall, Mean, group recall, calibration.

PredCls convention: subject/object scores are 1, so a triplet's confidence is
its predicate probability. Each instance emits one prediction: its top
foreground predicate, with probabilities renormalized over the foreground
classes. Within an image predictions are ranked by confidence, ties by
ascending instance id. All values are fractions in [0, 1].
"""

from __future__ import annotations

import csv
import io
import json
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .distributions import PROB_FLOOR
from .model import predict_proba
from .synthetic_data import GROUPS, InstanceSet, PredicateVocabulary

REPORT_VERSION = 1
DEFAULT_KS = (50, 100)


class UndefinedMetricError(ValueError):
    pass


@dataclass(frozen=True)
class RankedPrediction:
    image_id: int
    instance_id: int
    predicted_label: int
    confidence: float


# image_id -> [(instance_id, label), ...] for foreground-labeled instances
GroundTruth = Mapping[int, Sequence[tuple[int, int]]]
Rankings = Mapping[int, Sequence[RankedPrediction]]


def foreground_distribution(probs) -> np.ndarray:
    """Zero the background column and renormalize; rows keep length C + 1."""
    probs = np.array(probs, dtype=np.float64, copy=True)
    probs[..., 0] = 0.0
    total = probs.sum(axis=-1, keepdims=True)
    return probs / np.maximum(total, np.finfo(float).tiny)


def rank_from_probs(probs, instance_ids, image_id: int) -> list[RankedPrediction]:
    fg = foreground_distribution(np.atleast_2d(probs))
    labels = fg[:, 1:].argmax(axis=1) + 1
    conf = fg[np.arange(fg.shape[0]), labels]
    preds = [
        RankedPrediction(int(image_id), int(iid), int(lab), float(c))
        for iid, lab, c in zip(instance_ids, labels, conf)
    ]
    preds.sort(key=lambda p: (-p.confidence, p.instance_id))
    return preds


def rank_predictions(model, image: InstanceSet) -> list[RankedPrediction]:
    if len(image) == 0:
        return []
    image_ids = np.unique(image.image_id)
    if image_ids.shape[0] != 1:
        raise ValueError("rank_predictions expects the instances of a single image")
    return rank_from_probs(predict_proba(model, image.features), image.instance_id, int(image_ids[0]))


def rank_all(probs: np.ndarray, instances: InstanceSet) -> dict[int, list[RankedPrediction]]:
    out: dict[int, list[RankedPrediction]] = {}
    for img in np.unique(instances.image_id):
        idx = np.flatnonzero(instances.image_id == img)
        out[int(img)] = rank_from_probs(probs[idx], instances.instance_id[idx], int(img))
    return out


def ground_truth(instances: InstanceSet) -> dict[int, list[tuple[int, int]]]:
    gt: dict[int, list[tuple[int, int]]] = defaultdict(list)
    for img, iid, lab in zip(instances.image_id, instances.instance_id, instances.labels):
        if lab != 0:
            gt[int(img)].append((int(iid), int(lab)))
    return dict(gt)


def _check_k(k: int) -> None:
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")


def _image_hits(ranked: Sequence[RankedPrediction], k: int) -> dict[int, int]:
    return {p.instance_id: p.predicted_label for p in ranked[:k]}


def _recall(ranked: Rankings, gt: GroundTruth, k: int, keep=lambda label: True) -> float | None:
    per_image = []
    for img in sorted(gt):  # fixed order keeps the sum independent of instance order
        positives = [(iid, lab) for iid, lab in gt[img] if keep(lab)]
        if not positives:
            continue
        top = _image_hits(ranked.get(img, ()), k)
        hit = sum(1 for iid, lab in positives if top.get(iid) == lab)
        per_image.append(hit / len(positives))
    if not per_image:
        return None
    return float(np.mean(per_image))


def recall_at_k(ranked: Rankings, gt: GroundTruth, k: int) -> float:
    _check_k(k)
    value = _recall(ranked, gt, k)
    if value is None:
        raise UndefinedMetricError("no image has ground-truth positives")
    return value


def per_predicate_recall(ranked: Rankings, gt: GroundTruth, k: int) -> dict[int, float]:
    """Recall@K per foreground predicate present in the ground truth."""
    _check_k(k)
    present = sorted({lab for positives in gt.values() for _, lab in positives})
    return {c: _recall(ranked, gt, k, keep=lambda lab, c=c: lab == c) for c in present}


def mean_recall_at_k(ranked: Rankings, gt: GroundTruth, k: int,
                     vocab: PredicateVocabulary | None = None,
                     predicates: Sequence[int] | None = None) -> float:
    """Unweighted mean over predicates present in the ground truth.

    ``predicates`` restricts the average to a subset of classes.
    """
    per = per_predicate_recall(ranked, gt, k)
    if predicates is not None:
        wanted = set(predicates)
        per = {c: v for c, v in per.items() if c in wanted}
    if not per:
        raise UndefinedMetricError("no foreground ground truth for the requested predicates")
    return float(np.mean(list(per.values())))


def mean_metric(r_at: Mapping[int, float], mr_at: Mapping[int, float]) -> float:
    """Average of R@50, R@100, mR@50 and mR@100."""
    try:
        values = [r_at[50], r_at[100], mr_at[50], mr_at[100]]
    except KeyError as exc:
        raise ValueError(f"mean metric needs K=50 and K=100 for both R and mR; missing {exc}") from None
    if any(v is None for v in values):
        raise ValueError("mean metric needs all four recalls")
    return float(sum(values) / 4.0)


def group_recall(ranked: Rankings, gt: GroundTruth, vocab: PredicateVocabulary, k: int = 100) -> dict[str, float]:
    """mR@K inside each frequency group, plus "mean" over the three groups.

    A group with no test ground truth maps to NaN and is left out of "mean".
    """
    out: dict[str, float] = {}
    for g in GROUPS:
        members = vocab.members(g)
        if not members:
            raise ValueError(f"group {g!r} is empty")
        try:
            out[g] = mean_recall_at_k(ranked, gt, k, predicates=members)
        except UndefinedMetricError:
            out[g] = float("nan")
    vals = [out[g] for g in GROUPS if not np.isnan(out[g])]
    if not vals:
        raise UndefinedMetricError("no foreground ground truth in any group")
    out["mean"] = float(np.mean(vals))
    return out


def calibration_kl_from_probs(probs: np.ndarray, truth: np.ndarray) -> float:
    """Mean KL(truth || foreground-renormalized prediction) over rows."""
    if probs.shape != truth.shape:
        raise ValueError(f"shape mismatch {probs.shape} vs {truth.shape}")
    if probs.shape[0] == 0:
        return 0.0
    q = np.clip(foreground_distribution(probs), PROB_FLOOR, 1.0)
    pos = truth > 0
    terms = np.zeros_like(truth)
    terms[pos] = truth[pos] * (np.log(truth[pos]) - np.log(q[pos]))
    return float(terms.sum(axis=1).mean())


def calibration_kl(model, instances: InstanceSet, truth: np.ndarray) -> float:
    """``truth`` is the dense (n, C + 1) affinity matrix of ``instances``."""
    pos = instances.labels != 0
    if not pos.any():
        return 0.0
    return calibration_kl_from_probs(predict_proba(model, instances.features[pos]), truth[pos])


@dataclass
class EvalReport:
    r_at: dict[int, float]
    mr_at: dict[int, float]
    mean_metric: float | None
    group_recall: dict[str, float]
    calibration_kl: float | None
    per_predicate: dict[int, float] = field(default_factory=dict)  # recall at max K
    predicate_names: dict[int, str] = field(default_factory=dict)
    predicate_groups: dict[int, str] = field(default_factory=dict)
    config_hash: str = ""

    def to_dict(self) -> dict:
        def pct(d):
            return {str(k): (None if v is None else 100.0 * v) for k, v in d.items()}

        return {
            "schema_version": REPORT_VERSION,
            "config_hash": self.config_hash,
            "r_at": {str(k): v for k, v in self.r_at.items()},
            "mr_at": {str(k): v for k, v in self.mr_at.items()},
            "mean_metric": self.mean_metric,
            "group_recall": dict(self.group_recall),
            "calibration_kl": self.calibration_kl,
            "per_predicate": {str(k): v for k, v in self.per_predicate.items()},
            "predicate_names": {str(k): v for k, v in self.predicate_names.items()},
            "predicate_groups": {str(k): v for k, v in self.predicate_groups.items()},
            "percent": {
                "r_at": pct(self.r_at),
                "mr_at": pct(self.mr_at),
                "mean_metric": None if self.mean_metric is None else 100.0 * self.mean_metric,
                "group_recall": pct(self.group_recall),
            },
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> EvalReport:
        if d.get("schema_version") != REPORT_VERSION:
            raise ValueError(f"report schema {d.get('schema_version')!r} unsupported")
        return cls(
            r_at={int(k): v for k, v in d["r_at"].items()},
            mr_at={int(k): v for k, v in d["mr_at"].items()},
            mean_metric=d["mean_metric"],
            group_recall=dict(d["group_recall"]),
            calibration_kl=d["calibration_kl"],
            per_predicate={int(k): v for k, v in d["per_predicate"].items()},
            predicate_names={int(k): v for k, v in d.get("predicate_names", {}).items()},
            predicate_groups={int(k): v for k, v in d.get("predicate_groups", {}).items()},
            config_hash=d.get("config_hash", ""),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    CSV_FIELDS = ("mR@50", "mR@100", "R@50", "R@100", "Mean", "head", "body", "tail", "calibration_kl")

    def csv_row(self) -> dict[str, float | None]:
        return {
            "mR@50": self.mr_at.get(50), "mR@100": self.mr_at.get(100),
            "R@50": self.r_at.get(50), "R@100": self.r_at.get(100),
            "Mean": self.mean_metric,
            "head": self.group_recall.get("head"), "body": self.group_recall.get("body"),
            "tail": self.group_recall.get("tail"),
            "calibration_kl": self.calibration_kl,
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=self.CSV_FIELDS, lineterminator="\n")
        writer.writeheader()
        writer.writerow(self.csv_row())
        return buf.getvalue()


def evaluate_probs(probs: np.ndarray, instances: InstanceSet, vocab: PredicateVocabulary,
                   truth: np.ndarray | None = None, ks: Sequence[int] = DEFAULT_KS) -> EvalReport:
    ranked = rank_all(probs, instances)
    gt = ground_truth(instances)
    r_at = {k: recall_at_k(ranked, gt, k) for k in ks}
    mr_at = {k: mean_recall_at_k(ranked, gt, k) for k in ks}
    try:
        mean = mean_metric(r_at, mr_at)
    except ValueError:
        mean = None
    k_group = 100 if 100 in ks else max(ks)
    cal = None
    if truth is not None:
        pos = instances.labels != 0
        cal = calibration_kl_from_probs(probs[pos], truth[pos])
    return EvalReport(
        r_at=r_at,
        mr_at=mr_at,
        mean_metric=mean,
        group_recall=group_recall(ranked, gt, vocab, k=k_group),
        calibration_kl=cal,
        per_predicate=per_predicate_recall(ranked, gt, max(ks)),
        predicate_names={c: vocab.names[c] for c in range(1, vocab.num_classes)},
        predicate_groups={c: vocab.group_of(c) for c in range(1, vocab.num_classes)},
    )


def evaluate(model, instances: InstanceSet, vocab: PredicateVocabulary,
             truth: np.ndarray | None = None, ks: Sequence[int] = DEFAULT_KS) -> EvalReport:
    return evaluate_probs(predict_proba(model, instances.features), instances, vocab, truth=truth, ks=ks)
