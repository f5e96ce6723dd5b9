import json
import tempfile
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lskd.synthetic_data import (
    DatasetFormatError,
    GeneratorConfig,
    InstanceSet,
    PairContext,
    SchemaVersionError,
    annotate,
    assign_groups,
    build_vocabulary,
    dataset_hash,
    gen_features,
    generate_dataset,
    load_dataset,
    sample_context,
    save_dataset,
)


def small_cfg(**kw):
    base = dict(num_foreground=8, num_contexts=60, num_instances=400, feature_dim=6, seed=3)
    base.update(kw)
    return GeneratorConfig(**base)


def ctx_with(affinity, dim=4, proto=None):
    affinity = np.asarray(affinity, dtype=np.float64)
    support = np.flatnonzero(affinity)
    return PairContext(0, 0, 0, affinity, support, np.zeros(dim) if proto is None else proto)


class TestVocabulary:
    def test_three_classes_one_per_group(self):
        v = build_vocabulary(3, 1.7, seed=5)
        assert sorted(v.groups) == ["body", "head", "tail"]

    def test_flat_zipf(self):
        w = np.array(build_vocabulary(20, 0.0, seed=1).target_weights)
        assert np.ptp(w) <= 1e-12

    def test_zipf_ratio(self):
        w = np.array(build_vocabulary(50, 1.0, seed=11).target_weights)
        assert w.max() / w.min() == pytest.approx(50.0, abs=1e-9)

    def test_too_few_classes(self):
        with pytest.raises(ValueError):
            build_vocabulary(2, 1.0, seed=0)

    def test_background_first(self):
        v = build_vocabulary(5, 1.0, seed=0)
        assert v.names[0] == "__background__"
        assert v.num_classes == 6 and len(v.groups) == 5

    @given(st.integers(3, 60), st.floats(0, 3), st.integers(0, 2**16))
    def test_groups_contiguous_in_rank(self, n, s, seed):
        v = build_vocabulary(n, s, seed)
        order = sorted(range(n), key=lambda i: (-v.target_weights[i], i))
        tags = [v.groups[i] for i in order]
        ranks = {"head": 0, "body": 1, "tail": 2}
        assert [ranks[t] for t in tags] == sorted(ranks[t] for t in tags)
        assert set(tags) == {"head", "body", "tail"}

    def test_assign_groups_ties_by_id(self):
        assert assign_groups([5, 5, 5, 5, 5, 5]) == ["head", "head", "body", "body", "tail", "tail"]


class TestContext:
    def test_affinity_on_support(self):
        v = build_vocabulary(30, 1.0, seed=0)
        rng = np.random.default_rng(0)
        for _ in range(200):
            ctx = sample_context(v, rng, 8)
            assert 2 <= ctx.support.size <= 5
            assert ctx.affinity.sum() == pytest.approx(1.0, abs=1e-12)
            off = np.ones(v.num_classes, dtype=bool)
            off[ctx.support] = False
            assert np.all(ctx.affinity[off] == 0)
            assert np.all(ctx.affinity[ctx.support] > 0)

    def test_deterministic(self):
        v = build_vocabulary(30, 1.0, seed=0)
        a = sample_context(v, np.random.default_rng(9), 8)
        b = sample_context(v, np.random.default_rng(9), 8)
        np.testing.assert_array_equal(a.affinity, b.affinity)
        np.testing.assert_array_equal(a.prototype, b.prototype)

    def test_small_feature_dim(self):
        with pytest.raises(ValueError):
            sample_context(build_vocabulary(5, 1.0, 0), np.random.default_rng(0), 3)

    def test_inclusion_follows_zipf(self):
        v = build_vocabulary(50, 1.0, seed=2)
        w = np.array(v.target_weights)
        top, bottom = int(np.argmax(w)) + 1, int(np.argmin(w)) + 1
        rng = np.random.default_rng(4)
        hits = np.zeros(v.num_classes)
        for _ in range(10_000):
            hits[sample_context(v, rng, 4).support] += 1
        assert hits[top] >= 10 * hits[bottom]


class TestAnnotate:
    def test_always_missing(self):
        ctx = ctx_with([0, 0.5, 0.5])
        rng = np.random.default_rng(0)
        assert all(annotate(ctx, 1.0, rng) == (0, True) for _ in range(500))

    def test_onehot_affinity(self):
        ctx = ctx_with([0, 0, 1.0, 0])
        rng = np.random.default_rng(0)
        assert all(annotate(ctx, 0.0, rng) == (2, False) for _ in range(500))

    def test_monte_carlo(self):
        aff = np.array([0, 0.5, 0.3, 0.15, 0.05])
        ctx = ctx_with(aff)
        rng = np.random.default_rng(7)
        draws = [annotate(ctx, 0.3, rng) for _ in range(100_000)]
        labels = np.array([d[0] for d in draws])
        missing = np.array([d[1] for d in draws])
        assert abs(missing.mean() - 0.3) <= 0.01
        freq = np.bincount(labels[~missing], minlength=5) / (~missing).sum()
        assert 0.5 * np.abs(freq - aff).sum() <= 0.02

    def test_bad_probability(self):
        with pytest.raises(ValueError):
            annotate(ctx_with([0, 1.0]), 1.5, np.random.default_rng(0))


class TestFeatures:
    def test_noiseless(self):
        protos = np.arange(12.0).reshape(3, 4)
        proto = np.array([1.0, -1.0, 0.5, 2.0])
        ctx = ctx_with([0, 0, 1.0, 0], proto=proto)
        out = gen_features(ctx, protos, 0.0, np.random.default_rng(0))
        np.testing.assert_array_equal(out, proto + protos[1])
        np.testing.assert_array_equal(out, gen_features(ctx, protos, 0.0, np.random.default_rng(1)))

    def test_encodes_full_affinity(self):
        protos = np.random.default_rng(0).normal(size=(3, 4))
        ctx = ctx_with([0, 0.25, 0.75, 0])
        out = gen_features(ctx, protos, 0.0, np.random.default_rng(0))
        np.testing.assert_allclose(out, 0.25 * protos[0] + 0.75 * protos[1], atol=1e-15)

    def test_noise_distance(self):
        d, sigma = 16, 0.1
        rng = np.random.default_rng(3)
        protos = rng.normal(size=(5, d))
        ctx = ctx_with([0, 0.4, 0.6, 0, 0, 0], dim=d, proto=rng.normal(size=d))
        dist = [np.sum((gen_features(ctx, protos, sigma, rng) - gen_features(ctx, protos, sigma, rng)) ** 2)
                for _ in range(10_000)]
        assert np.mean(dist) == pytest.approx(2 * d * sigma**2, rel=0.10)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            gen_features(ctx_with([0, 0.5, 0.5]), np.zeros((3, 4)), 0.1, np.random.default_rng(0))


class TestGenerate:
    def test_split_sizes(self):
        data = generate_dataset(small_cfg(num_instances=10_000, num_contexts=500))
        assert (len(data.train), len(data.val), len(data.test)) == (7000, 1000, 2000)

    def test_bad_split_fractions(self):
        with pytest.raises(ValueError, match="split_fractions"):
            generate_dataset(small_cfg(split_fractions=(0.5, 0.1, 0.1)))

    def test_no_missing(self):
        data = generate_dataset(small_cfg(p_miss=0.0))
        for s in ("train", "val", "test"):
            assert not data.split(s).missing.any()

    def test_missing_implies_background(self):
        data = generate_dataset(small_cfg(p_miss=0.5))
        for s in ("train", "val", "test"):
            inst = data.split(s)
            assert np.all(inst.labels[inst.missing] == 0)

    def test_deterministic(self):
        assert dataset_hash(generate_dataset(small_cfg())) == dataset_hash(generate_dataset(small_cfg()))
        assert dataset_hash(generate_dataset(small_cfg())) != dataset_hash(generate_dataset(small_cfg(seed=4)))

    def test_disjoint_splits(self):
        data = generate_dataset(small_cfg())
        ids = [set(data.split(s).instance_id.tolist()) for s in ("train", "val", "test")]
        assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])
        assert sum(map(len, ids)) == 400

    def test_frequencies_match_train(self):
        data = generate_dataset(small_cfg())
        counts = np.bincount(data.train.labels, minlength=data.num_classes)
        assert data.vocabulary.frequencies == counts.tolist()

    def test_image_grouping(self):
        data = generate_dataset(small_cfg(image_size=8))
        _, sizes = np.unique(data.test.image_id, return_counts=True)
        assert sizes.max() == 8 and np.all(sizes[:-1] == 8)
        assert not set(data.train.image_id.tolist()) & set(data.test.image_id.tolist())

    def test_label_in_support(self):
        data = generate_dataset(GeneratorConfig(num_instances=5000, seed=1))
        for s in ("train", "val", "test"):
            inst = data.split(s)
            for iid, lab in zip(inst.instance_id, inst.labels):
                if lab:
                    assert data.truth[int(iid)].get(int(lab), 0.0) > 0

    def test_long_tail(self):
        data = generate_dataset(GeneratorConfig())
        assert len(data.train) == 20_000
        fg = np.array(data.vocabulary.frequencies[1:])
        assert fg.max() >= 10 * max(fg.min(), 1)

    def test_instances_per_context_mode(self):
        data = generate_dataset(small_cfg(num_instances=None, instances_per_context=(2, 3), num_contexts=50))
        total = len(data.train) + len(data.val) + len(data.test)
        assert 100 <= total <= 150
        _, per_ctx = np.unique(np.concatenate([data.split(s).context_id for s in ("train", "val", "test")]),
                               return_counts=True)
        assert per_ctx.min() >= 2 and per_ctx.max() <= 3

    def test_no_affinity_on_instances(self):
        names = set(InstanceSet.__dataclass_fields__)
        assert not any("truth" in n or "affinity" in n for n in names)


class TestPersistence:
    def test_round_trip(self, tmp_path):
        data = generate_dataset(small_cfg())
        path = tmp_path / "d.jsonl"
        save_dataset(data, path)
        back = load_dataset(path)
        assert back.equals(data)
        assert dataset_hash(back) == dataset_hash(data)

    def test_bytes_identical(self, tmp_path):
        save_dataset(generate_dataset(small_cfg()), tmp_path / "a.jsonl")
        save_dataset(generate_dataset(small_cfg()), tmp_path / "b.jsonl")
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()

    def test_empty_train(self, tmp_path):
        data = generate_dataset(small_cfg(split_fractions=(0.0, 0.5, 0.5)))
        assert len(data.train) == 0
        save_dataset(data, tmp_path / "e.jsonl")
        back = load_dataset(tmp_path / "e.jsonl")
        assert len(back.train) == 0 and back.train.features.shape == (0, 6)
        assert back.equals(data)

    def test_corrupt_line_seven(self, tmp_path):
        path = tmp_path / "c.jsonl"
        save_dataset(generate_dataset(small_cfg()), path)
        lines = path.read_text().splitlines()
        lines[6] = lines[6][: len(lines[6]) // 2]
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(DatasetFormatError, match="line 7") as info:
            load_dataset(path)
        assert info.value.line == 7

    def test_bad_field_reports_line(self, tmp_path):
        path = tmp_path / "c.jsonl"
        save_dataset(generate_dataset(small_cfg()), path)
        lines = path.read_text().splitlines()
        rec = json.loads(lines[3])
        rec["feature"] = rec["feature"][:-1]
        lines[3] = json.dumps(rec)
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(DatasetFormatError) as info:
            load_dataset(path)
        assert info.value.line == 4

    def test_version_mismatch(self, tmp_path):
        path = tmp_path / "v.jsonl"
        save_dataset(generate_dataset(small_cfg()), path)
        lines = path.read_text().splitlines()
        header = json.loads(lines[0])
        header["schema_version"] = 99
        lines[0] = json.dumps(header)
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(SchemaVersionError):
            load_dataset(path)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0, 1))
    def test_round_trip_property(self, seed, p_miss):
        data = generate_dataset(small_cfg(seed=seed, p_miss=p_miss, num_instances=60, num_contexts=10))
        with tempfile.TemporaryDirectory() as d:
            save_dataset(data, Path(d) / "x.jsonl")
            assert load_dataset(Path(d) / "x.jsonl").equals(data)


class TestConfig:
    def test_dict_round_trip(self):
        cfg = small_cfg()
        assert GeneratorConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_key(self):
        with pytest.raises(ValueError, match="unknown"):
            GeneratorConfig.from_dict({"num_foregound": 5})
