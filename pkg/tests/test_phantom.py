import numpy as np
import pytest

from datspect.imaging import load_volume
from datspect.labels import Label
from datspect.phantom import PhantomParams, striatal_masks, synth_dataset, synth_volume
from datspect.splits import read_manifest


def test_deterministic():
    p = PhantomParams(rng_seed=3)
    a = synth_volume(Label.PD, p, "sub-0007")
    b = synth_volume(Label.PD, p, "sub-0007")
    assert a.voxels.tobytes() == b.voxels.tobytes()


def test_subjects_differ():
    p = PhantomParams()
    assert not np.array_equal(synth_volume(Label.CONTROL, p, "a").voxels, synth_volume(Label.CONTROL, p, "b").voxels)


def test_noiseless_background_is_zero():
    v = synth_volume(Label.CONTROL, PhantomParams(noise_sigma=0.0), "sub-0001")
    masks = striatal_masks("sub-0001", level=1e-12)
    support = masks["caudate"] | masks["putamen"]
    assert v.voxels[~support].max() == 0.0
    assert v.voxels[support].min() > 0.0


def test_hotspots_cross_default_slices():
    m = striatal_masks("sub-0001")
    for name in ("caudate", "putamen"):
        assert m[name][:, :, 40:43].any(), name
    # bilateral: both halves of the midline carry uptake
    put = m["putamen"][:, :, 41]
    assert put[:45].any() and put[46:].any()


def test_pd_putamen_mean_below_control():
    p = PhantomParams(pd_uptake_factor=0.4)
    mask = striatal_masks("sub-0005")["putamen"]
    ctrl = synth_volume(Label.CONTROL, p, "sub-0005").voxels[mask].mean()
    pd = synth_volume(Label.PD, p, "sub-0005").voxels[mask].mean()
    assert pd < ctrl


def test_nonnegative():
    v = synth_volume(Label.PD, PhantomParams(noise_sigma=20.0), "x")
    assert v.voxels.min() >= 0.0


def test_separability_over_100_subjects():
    p = PhantomParams(pd_uptake_factor=0.5, noise_sigma=5.0)
    ctrl, pd = [], []
    for i in range(50):
        for lab, out in ((Label.CONTROL, ctrl), (Label.PD, pd)):
            sid = f"sep-{lab.value}-{i}"
            mask = striatal_masks(sid)["putamen"]
            out.append(synth_volume(lab, p, sid).voxels[mask].mean())
    assert max(pd) < min(ctrl)


@pytest.mark.parametrize(
    "kwargs",
    [{"pd_uptake_factor": 1.0}, {"pd_uptake_factor": 0.0}, {"asymmetry_factor": 0.0}, {"noise_sigma": -1.0}],
)
def test_invalid_params(kwargs):
    with pytest.raises(ValueError):
        PhantomParams(**kwargs)


class TestDataset:
    def test_counts_and_files(self, tmp_path):
        m = synth_dataset(3, 4, PhantomParams(), tmp_path)
        assert len(m) == 7 and m.counts() == {Label.CONTROL: 3, Label.PD: 4}
        back = read_manifest(tmp_path / "manifest.csv")
        assert [(e.subject_id, e.label) for e in back] == [(e.subject_id, e.label) for e in m]
        v = load_volume(back.entries[0].image_path)
        assert v.dims == (91, 109, 91) and v.label is back.entries[0].label

    def test_empty(self, tmp_path):
        m = synth_dataset(0, 0, PhantomParams(), tmp_path)
        assert len(m) == 0
        assert not (tmp_path / "volumes").exists()
        assert (tmp_path / "manifest.csv").read_text().strip() == "subject_id,relative_path,label"

    def test_stable_across_runs(self, tmp_path):
        synth_dataset(10, 10, PhantomParams(rng_seed=5), tmp_path / "a")
        synth_dataset(10, 10, PhantomParams(rng_seed=5), tmp_path / "b")
        assert (tmp_path / "a/manifest.csv").read_bytes() == (tmp_path / "b/manifest.csv").read_bytes()
        assert (tmp_path / "a/volumes/sub-0003.raw").read_bytes() == (tmp_path / "b/volumes/sub-0003.raw").read_bytes()

    def test_unwritable(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError):
            synth_dataset(1, 1, PhantomParams(), blocker / "out")


def test_cohort_sized_manifest_counts(tmp_path, monkeypatch):
    # skip writing 659 volumes: the counting logic is what matters here
    import datspect.phantom as ph

    monkeypatch.setattr(ph, "save_volume", lambda v, path: path)
    monkeypatch.setattr(ph, "synth_volume", lambda lab, p, sid, dims=None: None)
    m = synth_dataset(210, 449, PhantomParams(), tmp_path)
    assert len(m) == 659 and len(set(m.subject_ids)) == 659
    assert m.counts() == {Label.CONTROL: 210, Label.PD: 449}
