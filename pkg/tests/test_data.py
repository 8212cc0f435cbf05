"""Synthetic task generation, CSV round trips, and batching."""

import numpy as np
import pytest

from osda.data import (
    SOURCE,
    TARGET,
    FeatureDataset,
    LabelSpaceConfig,
    SyntheticTaskSpec,
    generate_synthetic_task,
    load_features_csv,
    make_batches,
    save_features_csv,
    _class_means,
)
from osda.errors import ContractError, ParseError


class TestLabelSpace:
    def test_shared_and_private_derivation(self):
        ls = LabelSpaceConfig((0, 1, 2), (0, 1, 2, 5, 6))
        assert ls.shared == (0, 1, 2)
        assert ls.target_private == (5, 6)
        assert ls.source_private == ()

    def test_partition_is_exact(self):
        ls = LabelSpaceConfig((0, 1), (0, 1, 7, 9))
        assert set(ls.shared) | set(ls.target_private) == set(ls.target_labels)
        assert set(ls.shared) & set(ls.target_private) == set()

    def test_source_private_requires_flag(self):
        with pytest.raises(ContractError, match="subset"):
            LabelSpaceConfig((0, 1, 9), (0, 1, 2))
        ls = LabelSpaceConfig((0, 1, 9), (0, 1, 2), allow_source_private=True)
        assert ls.source_private == (9,)

    def test_json_round_trip(self, tmp_path):
        ls = LabelSpaceConfig((0, 1, 8), (0, 1, 2, 3), allow_source_private=True)
        path = tmp_path / "ls.json"
        ls.to_json(path)
        assert LabelSpaceConfig.from_json(path) == ls


class TestSyntheticTask:
    def test_row_counts(self):
        spec = SyntheticTaskSpec(n_shared=4, n_target_private=4, samples_per_class=100)
        dataset, _ = generate_synthetic_task(spec)
        assert len(dataset.rows(SOURCE)) == 400
        assert len(dataset.rows(TARGET)) == 800

    def test_same_seed_is_byte_identical(self):
        a, _ = generate_synthetic_task(SyntheticTaskSpec(seed=42))
        b, _ = generate_synthetic_task(SyntheticTaskSpec(seed=42))
        assert a == b

    def test_different_seed_differs(self):
        a, _ = generate_synthetic_task(SyntheticTaskSpec(seed=1))
        b, _ = generate_synthetic_task(SyntheticTaskSpec(seed=2))
        assert not np.array_equal(a.features, b.features)

    def test_nearest_centroid_oracle_on_separable_task(self):
        """With no shift the task must be easy for a centroid classifier."""
        spec = SyntheticTaskSpec(
            radius=4.0,
            noise_sigma=0.1,
            shift_angle_deg=0.0,
            shift_translation=(),
            shift_noise_sigma=0.0,
            seed=0,
        )
        dataset, ls = generate_synthetic_task(spec)
        src_x, src_y = dataset.domain_slice(SOURCE)
        tgt_x, tgt_y = dataset.domain_slice(TARGET)
        centroids = {c: src_x[src_y == c].mean(axis=0) for c in ls.source_labels}
        known = np.isin(tgt_y, ls.shared)
        hits = 0
        for x, y in zip(tgt_x[known], tgt_y[known]):
            best = min(centroids, key=lambda c: np.linalg.norm(x - centroids[c]))
            hits += best == y
        assert hits / known.sum() >= 0.95

    def test_empirical_means_near_spec_means(self):
        spec = SyntheticTaskSpec(samples_per_class=400, seed=3)
        dataset, ls = generate_synthetic_task(spec)
        means = _class_means(spec)
        src_x, src_y = dataset.domain_slice(SOURCE)
        bound = 3 * spec.noise_sigma / np.sqrt(spec.samples_per_class)
        for c in ls.source_labels:
            empirical = src_x[src_y == c].mean(axis=0)
            assert np.all(np.abs(empirical - means[c]) <= bound)

    def test_private_means_interleave_with_shared(self):
        spec = SyntheticTaskSpec(n_shared=4, n_target_private=4)
        means = _class_means(spec)
        angles = {c: np.arctan2(m[1], m[0]) % (2 * np.pi) for c, m in means.items()}
        ordered = sorted(angles, key=angles.get)
        kinds = ["shared" if c < 4 else "private" for c in ordered]
        assert kinds == ["shared", "private"] * 4

    def test_feature_dim_below_two_rejected(self):
        with pytest.raises(ContractError, match="rotation"):
            SyntheticTaskSpec(feature_dim=1)


class TestFeatureCsv:
    def _tiny(self) -> FeatureDataset:
        return FeatureDataset(
            ids=["a", "b", "c"],
            domains=np.array([SOURCE, SOURCE, TARGET]),
            features=np.array([[0.1, -2.5], [1e-17, 3.0], [np.pi, -0.0]]),
            labels=np.array([0, 1, 2], dtype=np.int64),
        )

    def test_well_formed_file(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("id,domain,label,f0,f1\na,source,0,1.5,2\nb,target,3,0,-1\n")
        ds = load_features_csv(path)
        assert len(ds.ids) == 2
        assert ds.feature_dim == 2

    def test_unknown_domain_tag_names_line(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("id,domain,label,f0\na,source,0,1.0\nb,tgt,1,2.0\n")
        with pytest.raises(ParseError, match="line 3"):
            load_features_csv(path)

    def test_non_numeric_feature_names_line(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("id,domain,label,f0\na,source,0,oops\n")
        with pytest.raises(ParseError, match="line 2"):
            load_features_csv(path)

    def test_ragged_row_names_line(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("id,domain,label,f0,f1\na,source,0,1.0\n")
        with pytest.raises(ParseError, match="line 2"):
            load_features_csv(path)

    def test_round_trip_is_identity(self, tmp_path):
        ds = self._tiny()
        path = tmp_path / "d.csv"
        save_features_csv(ds, path)
        assert load_features_csv(path) == ds

    def test_round_trip_synthetic_task(self, tmp_path):
        ds, _ = generate_synthetic_task(SyntheticTaskSpec(samples_per_class=5))
        path = tmp_path / "task.csv"
        save_features_csv(ds, path)
        assert load_features_csv(path) == ds


class TestBatching:
    def _dataset(self, n_source=10, n_target=10) -> FeatureDataset:
        n = n_source + n_target
        return FeatureDataset(
            ids=[f"r{i}" for i in range(n)],
            domains=np.array([SOURCE] * n_source + [TARGET] * n_target),
            features=np.arange(n, dtype=np.float64)[:, None],
            labels=np.arange(n, dtype=np.int64) % 3,
        )

    def test_batch_shapes(self):
        stream = make_batches(self._dataset(), batch_per_domain=4, seed=0)
        batch = next(stream)
        assert batch.source_x.shape == (4, 1)
        assert batch.source_y.shape == (4,)
        assert batch.target_x.shape == (4, 1)

    def test_epoch_drops_partial_batches(self):
        """10 rows, batch 4: two full steps per epoch, remainder dropped."""
        stream = make_batches(self._dataset(), batch_per_domain=4, seed=0)
        seen = [next(stream).source_x.ravel() for _ in range(4)]
        first_epoch = np.concatenate(seen[:2])
        assert len(np.unique(first_epoch)) == 8  # no repeats inside an epoch

    def test_without_replacement_bound(self):
        ds = self._dataset()
        stream = make_batches(ds, batch_per_domain=4, seed=0)
        draws = np.concatenate([next(stream).source_x.ravel() for _ in range(6)])
        _, counts = np.unique(draws, return_counts=True)
        # 6 steps = 3 epochs of 8 drawn rows; no row appears more than 3 times
        assert counts.max() <= int(np.ceil(24 / 8))

    def test_same_seed_same_sequence(self):
        ds = self._dataset()
        a = make_batches(ds, batch_per_domain=3, seed=9)
        b = make_batches(ds, batch_per_domain=3, seed=9)
        for _ in range(7):
            x, y = next(a), next(b)
            assert np.array_equal(x.source_x, y.source_x)
            assert np.array_equal(x.target_x, y.target_x)

    def test_oversized_batch_rejected(self):
        with pytest.raises(ContractError, match="exceeds"):
            next(make_batches(self._dataset(), batch_per_domain=11, seed=0))
