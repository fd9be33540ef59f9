from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_manifest
from datspect.labels import Label
from datspect.splits import (
    DatasetManifest,
    ManifestEntry,
    ManifestError,
    fold_datasets,
    holdout_counts,
    manifest_from_tree,
    read_manifest,
    stratified_holdout,
    stratified_kfold,
    write_image_tree,
    write_manifest,
)

C, P = Label.CONTROL, Label.PD


class TestKFold:
    def test_cohort_fold_composition(self, cohort_manifest):
        fa = stratified_kfold(cohort_manifest, 10, seed=0)
        comps = Counter((c[C], c[P]) for c in fa.composition(cohort_manifest))
        assert comps == {(21, 45): 9, (21, 44): 1}

    def test_cohort_train_sizes(self, cohort_manifest):
        fa = stratified_kfold(cohort_manifest, 10, seed=0)
        sizes = set()
        for i in range(10):
            tr, va = fold_datasets(cohort_manifest, fa, i)
            sizes.add((len(tr), len(va)))
        assert sizes == {(593, 66), (594, 65)}

    def test_small_balanced(self):
        m = make_manifest(5, 5)
        fa = stratified_kfold(m, 5, seed=3)
        assert all((c[C], c[P]) == (1, 1) for c in fa.composition(m))

    def test_k2_four_entries(self):
        m = make_manifest(2, 2)
        fa = stratified_kfold(m, 2, seed=0)
        for i in range(2):
            tr, va = fold_datasets(m, fa, i)
            assert len(tr) == len(va) == 2

    def test_deterministic(self, cohort_manifest):
        assert stratified_kfold(cohort_manifest, 10, 7) == stratified_kfold(cohort_manifest, 10, 7)

    def test_seed_changes_membership_not_counts(self, cohort_manifest):
        a = stratified_kfold(cohort_manifest, 10, 1)
        b = stratified_kfold(cohort_manifest, 10, 2)
        assert a.fold_of != b.fold_of
        assert sorted(a.sizes()) == sorted(b.sizes())

    def test_input_order_irrelevant(self, cohort_manifest):
        rev = DatasetManifest(list(reversed(cohort_manifest.entries)))
        assert dict(stratified_kfold(rev, 10, 5).fold_of) == dict(stratified_kfold(cohort_manifest, 10, 5).fold_of)

    def test_too_few_members(self):
        with pytest.raises(ValueError, match="fewer than k"):
            stratified_kfold(make_manifest(3, 20), 5, 0)

    def test_k_below_two(self):
        with pytest.raises(ValueError):
            stratified_kfold(make_manifest(3, 3), 1, 0)

    def test_fold_index_out_of_range(self):
        m = make_manifest(4, 4)
        fa = stratified_kfold(m, 2, 0)
        with pytest.raises(IndexError):
            fold_datasets(m, fa, 2)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(2, 10), st.integers(0, 60), st.integers(0, 60), st.integers(0, 2**32 - 1))
    def test_partition_and_stratification(self, k, extra_c, extra_p, seed):
        m = make_manifest(k + extra_c, k + extra_p)
        fa = stratified_kfold(m, k, seed)
        assert sorted(fa.fold_of) == sorted(m.subject_ids)
        assert all(0 <= f < k for f in fa.fold_of.values())
        comp = fa.composition(m)
        for lab in (C, P):
            counts = [c[lab] for c in comp]
            assert max(counts) - min(counts) <= 1
        assert max(fa.sizes()) - min(fa.sizes()) <= 1
        union = set()
        for i in range(k):
            tr, va = fold_datasets(m, fa, i)
            assert not set(tr.subject_ids) & set(va.subject_ids)
            assert len(tr) + len(va) == len(m)
            union |= set(va.subject_ids)
        assert union == set(m.subject_ids)


class TestHoldout:
    def test_cohort_sizes(self, cohort_manifest):
        hs = stratified_holdout(cohort_manifest, 0.2, seed=0)
        assert (len(hs.train), len(hs.test)) == (527, 132)
        # naive per-class rounding gives 42/90, not the published 43/89
        assert hs.test.counts() == {C: 42, P: 90}

    def test_cohort_composition_via_override(self, cohort_manifest):
        hs = stratified_holdout(cohort_manifest, 0.2, seed=0, class_counts={C: 43, P: 89})
        tn_fp, tp_fn = 42 + 1, 88 + 1
        assert hs.test.counts() == {C: tn_fp, P: tp_fn}
        assert len(hs.train) == 527

    def test_small(self):
        hs = stratified_holdout(make_manifest(5, 5), 0.2, seed=0)
        assert hs.test.counts() == {C: 1, P: 1}

    def test_rounding_repair(self):
        # 0.5 * 3 rounds up to 2 per class, total must repair back to round(0.5 * 6) = 3
        want = holdout_counts({C: 3, P: 3}, 0.5)
        assert sum(want.values()) == 3

    def test_bad_fraction(self):
        with pytest.raises(ValueError):
            stratified_holdout(make_manifest(5, 5), 1.0)

    def test_empty_class(self):
        with pytest.raises(ValueError, match="empty"):
            stratified_holdout(make_manifest(0, 5), 0.2)

    def test_deterministic(self, cohort_manifest):
        a = stratified_holdout(cohort_manifest, 0.2, 11)
        b = stratified_holdout(cohort_manifest, 0.2, 11)
        assert a.test.subject_ids == b.test.subject_ids

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 80), st.integers(1, 80), st.floats(0.05, 0.95), st.integers(0, 1000))
    def test_partition_and_per_class_fraction(self, nc, npd, frac, seed):
        m = make_manifest(nc, npd)
        hs = stratified_holdout(m, frac, seed)
        assert not set(hs.train.subject_ids) & set(hs.test.subject_ids)
        assert set(hs.train.subject_ids) | set(hs.test.subject_ids) == set(m.subject_ids)
        for lab, n in m.counts().items():
            assert abs(hs.test.counts()[lab] - frac * n) <= 1 + 1e-9


class TestManifestFiles:
    def test_duplicate_ids_rejected(self):
        e = ManifestEntry("a", "x.png", C)
        with pytest.raises(ManifestError):
            DatasetManifest([e, e])

    def test_round_trip(self, tmp_path):
        (tmp_path / "img").mkdir()
        m = DatasetManifest([ManifestEntry("a", tmp_path / "img/a.png", C), ManifestEntry("b", tmp_path / "img/b.png", P)])
        write_manifest(m, tmp_path / "manifest.csv")
        text = (tmp_path / "manifest.csv").read_text().splitlines()
        assert text[0] == "subject_id,relative_path,label"
        assert text[1] == "a,img/a.png,CONTROL"
        back = read_manifest(tmp_path / "manifest.csv")
        assert [(e.subject_id, e.image_path.resolve(), e.label) for e in back] == [
            (e.subject_id, e.image_path.resolve(), e.label) for e in m
        ]

    def test_bad_header(self, tmp_path):
        (tmp_path / "m.csv").write_text("id,path,label\n")
        with pytest.raises(ManifestError):
            read_manifest(tmp_path / "m.csv")

    def test_image_tree(self, tmp_path):
        src = tmp_path / "src"
        src.mkdir()
        entries = []
        for sid, lab in (("a", C), ("b", P), ("c", P)):
            (src / f"{sid}.png").write_bytes(sid.encode())
            entries.append(ManifestEntry(sid, src / f"{sid}.png", lab))
        tree = write_image_tree(DatasetManifest(entries), tmp_path / "train")
        assert (tmp_path / "train/CONTROL/a.png").read_bytes() == b"a"
        assert (tmp_path / "train/PD/c.png").exists()
        scanned = manifest_from_tree(tmp_path / "train")
        assert sorted((e.subject_id, e.label) for e in scanned) == [("a", C), ("b", P), ("c", P)]
        assert len(tree) == 3
