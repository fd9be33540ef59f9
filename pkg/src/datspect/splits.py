"""Dataset manifests and stratified resampling (k-fold plans and holdout splits).

All randomness comes from numpy's Philox counter-based generator keyed by the
caller's integer seed, so plans are reproducible across platforms.
"""
from __future__ import annotations

import csv
import math
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from datspect.labels import LABELS, Label

MANIFEST_FIELDS = ("subject_id", "relative_path", "label")


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestEntry:
    subject_id: str
    image_path: Path
    label: Label


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.subject_id in seen:
                raise ManifestError(f"duplicate subject_id {e.subject_id!r}")
            seen.add(e.subject_id)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def subject_ids(self) -> list[str]:
        return [e.subject_id for e in self.entries]

    def by_label(self, label: Label) -> list[ManifestEntry]:
        return [e for e in self.entries if e.label is label]

    def counts(self) -> dict[Label, int]:
        return {lab: len(self.by_label(lab)) for lab in LABELS}

    def subset(self, subject_ids) -> "DatasetManifest":
        keep = set(subject_ids)
        return DatasetManifest([e for e in self.entries if e.subject_id in keep])


def read_manifest(path: Path) -> DatasetManifest:
    """Load a manifest CSV; relative paths are resolved against its directory."""
    path = Path(path)
    base = path.parent
    entries = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ManifestError(f"{path}: empty manifest file (header missing)")
        if tuple(h.strip() for h in header) != MANIFEST_FIELDS:
            raise ManifestError(f"{path}: bad header {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ManifestError(f"{path}:{lineno}: expected 3 fields")
            sid, rel, label = (c.strip() for c in row)
            try:
                lab = Label.parse(label)
            except ValueError as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from None
            entries.append(ManifestEntry(sid, base / rel, lab))
    return DatasetManifest(entries)


def write_manifest(m: DatasetManifest, path: Path) -> None:
    path = Path(path)
    base = path.parent.resolve()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_FIELDS)
        for e in m.entries:
            p = Path(e.image_path)
            try:
                rel = p.resolve().relative_to(base)
            except ValueError:
                rel = p.resolve()
            w.writerow([e.subject_id, rel.as_posix(), e.label.value])


def manifest_from_tree(root: Path, suffix: str = ".png") -> DatasetManifest:
    """Build a manifest from a ``<root>/<class>/<subject_id>.png`` tree."""
    root = Path(root)
    entries = []
    for lab in LABELS:
        d = root / lab.value
        if d.is_dir():
            for f in sorted(d.glob(f"*{suffix}")):
                entries.append(ManifestEntry(f.stem, f, lab))
    return DatasetManifest(entries)


def write_image_tree(m: DatasetManifest, root: Path) -> DatasetManifest:
    """Copy each entry's image to ``<root>/<class>/<subject_id><ext>``."""
    root = Path(root)
    out = []
    for lab in LABELS:
        (root / lab.value).mkdir(parents=True, exist_ok=True)
    for e in m.entries:
        dst = root / e.label.value / f"{e.subject_id}{Path(e.image_path).suffix}"
        if Path(e.image_path).resolve() != dst.resolve():
            shutil.copyfile(e.image_path, dst)
        out.append(ManifestEntry(e.subject_id, dst, e.label))
    return DatasetManifest(out)


def rng_for(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed)))


def _shuffled_ids(entries: list[ManifestEntry], rng: np.random.Generator) -> list[str]:
    ids = sorted(e.subject_id for e in entries)
    return [ids[i] for i in rng.permutation(len(ids))]


@dataclass(frozen=True)
class FoldAssignment:
    k: int
    fold_of: Mapping[str, int]

    def members(self, i: int) -> list[str]:
        return [sid for sid, f in self.fold_of.items() if f == i]

    def composition(self, m: DatasetManifest) -> list[dict[Label, int]]:
        comp = [{lab: 0 for lab in LABELS} for _ in range(self.k)]
        for e in m.entries:
            comp[self.fold_of[e.subject_id]][e.label] += 1
        return comp

    def sizes(self) -> list[int]:
        sizes = [0] * self.k
        for f in self.fold_of.values():
            sizes[f] += 1
        return sizes


def stratified_kfold(m: DatasetManifest, k: int = 10, seed: int = 0) -> FoldAssignment:
    """Shuffle each class and deal it round-robin over ``k`` folds.

    Dealing continues from the fold where the previous class stopped, which
    keeps total fold sizes within one of each other as well.
    """
    if k < 2:
        raise ValueError("k must be at least 2")
    counts = m.counts()
    for lab, n in counts.items():
        if n < k:
            raise ValueError(f"class {lab.value} has {n} members, fewer than k={k}")
    rng = rng_for(seed)
    fold_of: dict[str, int] = {}
    cursor = 0
    for lab in LABELS:
        for sid in _shuffled_ids(m.by_label(lab), rng):
            fold_of[sid] = cursor
            cursor = (cursor + 1) % k
    return FoldAssignment(k, {sid: fold_of[sid] for sid in m.subject_ids})


def fold_datasets(m: DatasetManifest, fa: FoldAssignment, i: int) -> tuple[DatasetManifest, DatasetManifest]:
    if not 0 <= i < fa.k:
        raise IndexError(f"fold index {i} outside [0, {fa.k})")
    val = [e for e in m.entries if fa.fold_of[e.subject_id] == i]
    train = [e for e in m.entries if fa.fold_of[e.subject_id] != i]
    return DatasetManifest(train), DatasetManifest(val)


@dataclass(frozen=True)
class HoldoutSplit:
    train: DatasetManifest
    test: DatasetManifest


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def holdout_counts(counts: Mapping[Label, int], test_frac: float) -> dict[Label, int]:
    """Per-class test counts: rounded per class, total repaired on the largest class."""
    want = {lab: _round_half_up(test_frac * n) for lab, n in counts.items()}
    target = _round_half_up(test_frac * sum(counts.values()))
    largest = max(counts, key=lambda lab: (counts[lab], lab.value))
    want[largest] += target - sum(want.values())
    return want


def stratified_holdout(
    m: DatasetManifest,
    test_frac: float = 0.2,
    seed: int = 0,
    class_counts: Mapping[Label, int] | None = None,
) -> HoldoutSplit:
    """Stratified train/test split.

    ``class_counts`` overrides the per-class test sizes, e.g.
    ``{Label.CONTROL: 43, Label.PD: 89}`` to reproduce a published split exactly.
    """
    if not 0.0 < test_frac < 1.0:
        raise ValueError("test_frac must lie strictly between 0 and 1")
    counts = m.counts()
    for lab, n in counts.items():
        if n == 0:
            raise ValueError(f"class {lab.value} is empty")
    n_test = dict(class_counts) if class_counts is not None else holdout_counts(counts, test_frac)
    for lab, n in n_test.items():
        if not 0 <= n <= counts[lab]:
            raise ValueError(f"cannot take {n} test subjects from {counts[lab]} {lab.value}")
    rng = rng_for(seed)
    test_ids: set[str] = set()
    for lab in LABELS:
        test_ids.update(_shuffled_ids(m.by_label(lab), rng)[: n_test.get(lab, 0)])
    train = [e for e in m.entries if e.subject_id not in test_ids]
    test = [e for e in m.entries if e.subject_id in test_ids]
    return HoldoutSplit(DatasetManifest(train), DatasetManifest(test))


def write_folds(fa: FoldAssignment, m: DatasetManifest, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "label", "fold"])
        for e in m.entries:
            w.writerow([e.subject_id, e.label.value, fa.fold_of[e.subject_id]])
