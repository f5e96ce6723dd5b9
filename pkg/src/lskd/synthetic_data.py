"""Synthetic long-tailed relation data.

Each subject-object *context* has a small support of plausible predicates with
a Dirichlet affinity over them. Instances are annotated with a single label
sampled from that affinity, or collapsed to background (class 0) with
probability ``p_miss``. Features carry the full affinity, so a soft label is
learnable from them. The affinity itself is kept in a side table
(``DatasetSplit.truth``) that only evaluation reads.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

SCHEMA_VERSION = 1
BACKGROUND = "__background__"
GROUPS = ("head", "body", "tail")
SPLITS = ("train", "val", "test")


class DatasetFormatError(ValueError):
    """Malformed dataset file; ``line`` is 1-based."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SchemaVersionError(DatasetFormatError):
    pass


@dataclass
class PredicateVocabulary:
    names: list[str]  # index 0 is background
    frequencies: list[int]  # per class, background included
    groups: list[str]  # per foreground class, groups[c - 1] is class c's group
    target_weights: list[float]  # Zipf sampling weights per foreground class

    @property
    def num_foreground(self) -> int:
        return len(self.names) - 1

    @property
    def num_classes(self) -> int:
        return len(self.names)

    def group_of(self, cls: int) -> str:
        return self.groups[cls - 1]

    def members(self, group: str) -> list[int]:
        return [c for c in range(1, self.num_classes) if self.groups[c - 1] == group]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> PredicateVocabulary:
        return cls(
            names=list(d["names"]),
            frequencies=[int(x) for x in d["frequencies"]],
            groups=list(d["groups"]),
            target_weights=[float(x) for x in d["target_weights"]],
        )


def assign_groups(counts) -> list[str]:
    """Tertiles by frequency rank; ties go to the lower class id first."""
    counts = np.asarray(counts, dtype=np.float64)
    n = counts.shape[0]
    order = sorted(range(n), key=lambda i: (-counts[i], i))
    groups = [""] * n
    for rank, i in enumerate(order):
        groups[i] = GROUPS[min(2, rank * 3 // n)]
    return groups


def build_vocabulary(num_foreground: int, zipf_exponent: float, seed: int) -> PredicateVocabulary:
    """Zipf weights rank**-s, with ranks shuffled onto class ids by ``seed``."""
    if num_foreground < 3:
        raise ValueError(f"need at least 3 foreground predicates, got {num_foreground}")
    if zipf_exponent < 0:
        raise ValueError("zipf_exponent must be non-negative")
    ranks = np.arange(1, num_foreground + 1, dtype=np.float64)
    w = ranks ** (-float(zipf_exponent))
    w /= w.sum()
    perm = np.random.default_rng(seed).permutation(num_foreground)
    weights = np.empty(num_foreground)
    weights[perm] = w  # class perm[r] gets rank r + 1
    names = [BACKGROUND] + [f"pred_{c:02d}" for c in range(1, num_foreground + 1)]
    return PredicateVocabulary(
        names=names,
        frequencies=[0] * (num_foreground + 1),
        groups=assign_groups(weights),
        target_weights=weights.tolist(),
    )


@dataclass
class PairContext:
    context_id: int
    subject_class: int
    object_class: int
    affinity: np.ndarray  # length C + 1, zero on background and off-support
    support: np.ndarray  # predicate ids in 1..C
    prototype: np.ndarray  # length D


def sample_context(
    vocab: PredicateVocabulary,
    rng: np.random.Generator,
    feature_dim: int,
    context_id: int = 0,
    concentration: float = 1.0,
    num_object_classes: int = 150,
    support_range: tuple[int, int] = (2, 5),
) -> PairContext:
    if feature_dim < 4:
        raise ValueError(f"feature_dim must be >= 4, got {feature_dim}")
    lo, hi = support_range
    size = int(rng.integers(lo, hi + 1))
    w = np.asarray(vocab.target_weights)
    support = np.sort(rng.choice(vocab.num_foreground, size=size, replace=False, p=w) + 1)
    aff = np.zeros(vocab.num_classes)
    aff[support] = rng.dirichlet(np.full(size, concentration))
    subj, obj = rng.integers(0, num_object_classes, size=2)
    return PairContext(
        context_id=context_id,
        subject_class=int(subj),
        object_class=int(obj),
        affinity=aff,
        support=support,
        prototype=rng.standard_normal(feature_dim),
    )


def annotate(ctx: PairContext, p_miss: float, rng: np.random.Generator) -> tuple[int, bool]:
    """Single-label annotation of a multi-affinity pair."""
    if not 0.0 <= p_miss <= 1.0:
        raise ValueError(f"p_miss must be in [0, 1], got {p_miss}")
    if rng.random() < p_miss:
        return 0, True
    label = int(rng.choice(ctx.affinity.shape[0], p=ctx.affinity))
    return label, False


def gen_features(
    ctx: PairContext,
    predicate_prototypes: np.ndarray,
    noise_sigma: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """prototype + affinity-weighted predicate prototypes + N(0, sigma^2)."""
    protos = np.asarray(predicate_prototypes, dtype=np.float64)
    num_fg = ctx.affinity.shape[0] - 1
    if protos.shape != (num_fg, ctx.prototype.shape[0]):
        raise ValueError(
            f"predicate prototypes must be {(num_fg, ctx.prototype.shape[0])}, got {protos.shape}"
        )
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")
    feat = ctx.prototype + ctx.affinity[1:] @ protos
    if noise_sigma > 0:
        feat = feat + noise_sigma * rng.standard_normal(feat.shape[0])
    return feat


@dataclass
class GeneratorConfig:
    num_foreground: int = 50
    zipf_exponent: float = 1.0
    num_contexts: int = 28000
    # Total instance count; contexts are drawn uniformly per instance.
    # When None, each context gets uniform[lo, hi] instances instead.
    num_instances: int | None = 28572
    instances_per_context: tuple[int, int] = (4, 10)
    p_miss: float = 0.3
    split_fractions: tuple[float, float, float] = (0.7, 0.1, 0.2)
    feature_dim: int = 64
    noise_sigma: float = 0.3
    predicate_scale: float = 2.0
    context_scale: float = 1.0
    concentration: float = 1.0
    image_size: int = 8
    num_object_classes: int = 150
    seed: int = 0

    def validate(self) -> None:
        fr = self.split_fractions
        if len(fr) != 3 or any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
            raise ValueError(f"split_fractions must be three non-negative numbers summing to 1, got {list(fr)}")
        if self.num_foreground < 3:
            raise ValueError("num_foreground must be >= 3")
        if self.feature_dim < 4:
            raise ValueError("feature_dim must be >= 4")
        if not 0.0 <= self.p_miss <= 1.0:
            raise ValueError("p_miss must be in [0, 1]")
        if self.num_contexts < 1:
            raise ValueError("num_contexts must be >= 1")
        if self.image_size < 1:
            raise ValueError("image_size must be >= 1")
        lo, hi = self.instances_per_context
        if lo < 0 or hi < lo:
            raise ValueError("instances_per_context must be (lo, hi) with 0 <= lo <= hi")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["instances_per_context"] = list(self.instances_per_context)
        d["split_fractions"] = list(self.split_fractions)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> GeneratorConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown generator config keys: {sorted(unknown)}")
        kw = dict(d)
        for key in ("instances_per_context", "split_fractions"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)


@dataclass(frozen=True)
class RelationInstance:
    instance_id: int
    context_id: int
    image_id: int
    feature: np.ndarray
    label: int
    missing_flag: bool


@dataclass
class InstanceSet:
    """Column-oriented instances of one split. No ground-truth affinity here."""

    instance_id: np.ndarray
    context_id: np.ndarray
    image_id: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    missing: np.ndarray

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def __iter__(self) -> Iterator[RelationInstance]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i: int) -> RelationInstance:
        return RelationInstance(
            instance_id=int(self.instance_id[i]),
            context_id=int(self.context_id[i]),
            image_id=int(self.image_id[i]),
            feature=self.features[i],
            label=int(self.labels[i]),
            missing_flag=bool(self.missing[i]),
        )

    def subset(self, idx) -> InstanceSet:
        return InstanceSet(
            instance_id=self.instance_id[idx],
            context_id=self.context_id[idx],
            image_id=self.image_id[idx],
            features=self.features[idx],
            labels=self.labels[idx],
            missing=self.missing[idx],
        )

    @classmethod
    def empty(cls, feature_dim: int) -> InstanceSet:
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z.copy(), z.copy(), np.zeros((0, feature_dim)), z.copy(), np.zeros(0, dtype=bool))

    @classmethod
    def from_records(cls, records: list[RelationInstance], feature_dim: int) -> InstanceSet:
        if not records:
            return cls.empty(feature_dim)
        return cls(
            instance_id=np.array([r.instance_id for r in records], dtype=np.int64),
            context_id=np.array([r.context_id for r in records], dtype=np.int64),
            image_id=np.array([r.image_id for r in records], dtype=np.int64),
            features=np.array([r.feature for r in records], dtype=np.float64).reshape(len(records), feature_dim),
            labels=np.array([r.label for r in records], dtype=np.int64),
            missing=np.array([r.missing_flag for r in records], dtype=bool),
        )

    def equals(self, other: InstanceSet) -> bool:
        return all(
            np.array_equal(getattr(self, f.name), getattr(other, f.name))
            for f in dataclasses.fields(self)
        )


@dataclass
class DatasetSplit:
    train: InstanceSet
    val: InstanceSet
    test: InstanceSet
    vocabulary: PredicateVocabulary
    generation_config: dict
    # instance_id -> {predicate id: probability}; read by evaluation only
    truth: dict[int, dict[int, float]] = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return self.vocabulary.num_classes

    @property
    def feature_dim(self) -> int:
        return int(self.train.features.shape[1])

    def split(self, name: str) -> InstanceSet:
        if name not in SPLITS:
            raise KeyError(name)
        return getattr(self, name)

    def truth_matrix(self, instances: InstanceSet) -> np.ndarray:
        """Dense (n, C + 1) ground-truth affinities for ``instances``."""
        out = np.zeros((len(instances), self.num_classes))
        for row, iid in enumerate(instances.instance_id):
            for c, p in self.truth[int(iid)].items():
                out[row, c] = p
        return out

    def equals(self, other: DatasetSplit) -> bool:
        return (
            all(self.split(s).equals(other.split(s)) for s in SPLITS)
            and self.vocabulary == other.vocabulary
            and self.generation_config == other.generation_config
            and self.truth == other.truth
        )


def _split_sizes(n: int, fractions) -> tuple[int, int, int]:
    """round() for train and val, remainder to test."""
    n_train = int(round(fractions[0] * n))
    n_val = min(int(round(fractions[1] * n)), n - n_train)
    return n_train, n_val, n - n_train - n_val


def generate_dataset(cfg: GeneratorConfig) -> DatasetSplit:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    vocab = build_vocabulary(cfg.num_foreground, cfg.zipf_exponent, seed=int(rng.integers(2**31)))
    predicate_protos = cfg.predicate_scale * rng.standard_normal((cfg.num_foreground, cfg.feature_dim))
    contexts = []
    for cid in range(cfg.num_contexts):
        ctx = sample_context(
            vocab, rng, cfg.feature_dim, context_id=cid,
            concentration=cfg.concentration, num_object_classes=cfg.num_object_classes,
        )
        ctx.prototype *= cfg.context_scale
        contexts.append(ctx)

    if cfg.num_instances is not None:
        ctx_of = rng.integers(0, cfg.num_contexts, size=cfg.num_instances)
    else:
        lo, hi = cfg.instances_per_context
        counts = rng.integers(lo, hi + 1, size=cfg.num_contexts)
        ctx_of = np.repeat(np.arange(cfg.num_contexts), counts)
    n = ctx_of.shape[0]

    features = np.empty((n, cfg.feature_dim))
    labels = np.empty(n, dtype=np.int64)
    missing = np.empty(n, dtype=bool)
    truth: dict[int, dict[int, float]] = {}
    for i, cid in enumerate(ctx_of):
        ctx = contexts[cid]
        labels[i], missing[i] = annotate(ctx, cfg.p_miss, rng)
        features[i] = gen_features(ctx, predicate_protos, cfg.noise_sigma, rng)
        truth[i] = {int(c): float(ctx.affinity[c]) for c in ctx.support}

    order = rng.permutation(n)
    n_train, n_val, _ = _split_sizes(n, cfg.split_fractions)
    bounds = {"train": (0, n_train), "val": (n_train, n_train + n_val), "test": (n_train + n_val, n)}
    parts = {}
    image_base = 0
    for name in SPLITS:
        a, b = bounds[name]
        idx = order[a:b]
        m = idx.shape[0]
        parts[name] = InstanceSet(
            instance_id=idx.astype(np.int64),
            context_id=ctx_of[idx].astype(np.int64),
            image_id=image_base + np.arange(m, dtype=np.int64) // cfg.image_size,
            features=features[idx],
            labels=labels[idx],
            missing=missing[idx],
        )
        image_base += math.ceil(m / cfg.image_size)

    counts = np.bincount(parts["train"].labels, minlength=vocab.num_classes)
    vocab.frequencies = [int(x) for x in counts]
    vocab.groups = assign_groups(counts[1:])
    return DatasetSplit(
        train=parts["train"], val=parts["val"], test=parts["test"],
        vocabulary=vocab, generation_config=cfg.to_dict(), truth=truth,
    )


# -- persistence -------------------------------------------------------------


def _instance_record(split: str, inst: InstanceSet, i: int, truth: Mapping[int, Mapping[int, float]]) -> dict:
    iid = int(inst.instance_id[i])
    return {
        "split": split,
        "instance_id": iid,
        "context_id": int(inst.context_id[i]),
        "image_id": int(inst.image_id[i]),
        "feature": inst.features[i].tolist(),
        "label": int(inst.labels[i]),
        "missing_flag": bool(inst.missing[i]),
        "truth_affinity": {str(c): p for c, p in sorted(truth.get(iid, {}).items())},
    }


def iter_dataset_lines(data: DatasetSplit) -> Iterator[str]:
    header = {
        "schema_version": SCHEMA_VERSION,
        "C": data.vocabulary.num_foreground,
        "D": data.feature_dim,
        "vocabulary": data.vocabulary.to_dict(),
        "generation_config": data.generation_config,
    }
    yield json.dumps(header, sort_keys=True)
    for name in SPLITS:
        inst = data.split(name)
        for i in range(len(inst)):
            yield json.dumps(_instance_record(name, inst, i, data.truth), sort_keys=True)


def save_dataset(data: DatasetSplit, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for line in iter_dataset_lines(data):
            fh.write(line + "\n")


def dataset_hash(data: DatasetSplit) -> str:
    h = hashlib.sha256()
    for line in iter_dataset_lines(data):
        h.update(line.encode("utf-8") + b"\n")
    return h.hexdigest()


def load_dataset(path) -> DatasetSplit:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise DatasetFormatError("empty file: missing header", line=1)
    try:
        header = json.loads(lines[0])
        version = header["schema_version"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DatasetFormatError(f"bad header: {exc}", line=1) from exc
    if version != SCHEMA_VERSION:
        raise SchemaVersionError(f"schema version {version!r}, expected {SCHEMA_VERSION}", line=1)
    try:
        num_fg = int(header["C"])
        dim = int(header["D"])
        vocab = PredicateVocabulary.from_dict(header["vocabulary"])
        gen_cfg = header["generation_config"]
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetFormatError(f"bad header: {exc}", line=1) from exc

    records: dict[str, list[RelationInstance]] = {s: [] for s in SPLITS}
    truth: dict[int, dict[int, float]] = {}
    for lineno, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        try:
            rec = json.loads(raw)
            split = rec["split"]
            if split not in records:
                raise ValueError(f"unknown split {split!r}")
            feature = np.array(rec["feature"], dtype=np.float64)
            if feature.shape != (dim,):
                raise ValueError(f"feature has {feature.size} values, expected {dim}")
            label = int(rec["label"])
            if not 0 <= label <= num_fg:
                raise ValueError(f"label {label} out of range")
            inst = RelationInstance(
                instance_id=int(rec["instance_id"]),
                context_id=int(rec["context_id"]),
                image_id=int(rec["image_id"]),
                feature=feature,
                label=label,
                missing_flag=bool(rec["missing_flag"]),
            )
            aff = {int(c): float(p) for c, p in rec["truth_affinity"].items()}
        except (json.JSONDecodeError, KeyError, TypeError, ValueError, AttributeError) as exc:
            raise DatasetFormatError(f"corrupted record: {exc}", line=lineno) from exc
        records[split].append(inst)
        truth[inst.instance_id] = aff

    sets = {s: InstanceSet.from_records(records[s], dim) for s in SPLITS}
    return DatasetSplit(
        train=sets["train"], val=sets["val"], test=sets["test"],
        vocabulary=vocab, generation_config=gen_cfg, truth=truth,
    )
