"""Synthetic DaT-SPECT-like phantoms with bilateral comma-shaped striatal uptake.

Each hemisphere gets a caudate-like ellipsoid (anterior) and a putamen-like
tail (posterior-lateral), both with Gaussian falloff truncated at 3 sigma.
PD phantoms have the putamen dimmed and one hemisphere dimmed further.
"""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from datspect.imaging import DEFAULT_DIMS, Volume, save_volume
from datspect.labels import Label
from datspect.splits import DatasetManifest, ManifestEntry, write_manifest

MIDLINE_X = 45.0
STRIATUM_Z = 41.0
TRUNCATE_SIGMAS = 3.0


@dataclass(frozen=True)
class PhantomParams:
    noise_sigma: float = 5.0
    control_uptake: float = 100.0
    pd_uptake_factor: float = 0.4
    asymmetry_factor: float = 0.8
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.pd_uptake_factor < 1.0:
            raise ValueError("pd_uptake_factor must lie in (0, 1)")
        if not 0.0 < self.asymmetry_factor <= 1.0:
            raise ValueError("asymmetry_factor must lie in (0, 1]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        if self.control_uptake <= 0:
            raise ValueError("control_uptake must be positive")

    def as_dict(self) -> dict:
        return asdict(self)


def _subject_key(subject_id: str) -> int:
    return int.from_bytes(hashlib.sha256(subject_id.encode("utf-8")).digest()[:8], "little")


@dataclass(frozen=True)
class _Jitter:
    offset: np.ndarray  # (dx, dy, dz) voxels, each in [-2, 2]
    gain: float  # intensity multiplier in [0.95, 1.05]
    affected_side: int  # -1 or +1, hemisphere hit hardest in PD


def _jitter(subject_id: str) -> _Jitter:
    key = _subject_key(subject_id)
    rng = np.random.Generator(np.random.Philox(key))
    offset = rng.uniform(-2.0, 2.0, size=3)
    gain = float(rng.uniform(0.95, 1.05))
    side = -1 if (key >> 63) & 1 else 1
    return _Jitter(offset, gain, side)


def _grid(dims):
    return np.meshgrid(*(np.arange(d, dtype=np.float32) for d in dims), indexing="ij")


def _ellipsoid(grid, center, sigmas):
    d2 = sum(((g - c) / s) ** 2 for g, c, s in zip(grid, center, sigmas))
    return np.where(d2 <= TRUNCATE_SIGMAS**2, np.exp(-0.5 * d2), 0.0).astype(np.float32)


def _tail(grid, start, end, sigmas):
    """Gaussian tube around the segment start->end, measured in sigma-scaled space."""
    sig = np.asarray(sigmas, dtype=np.float32)
    a = np.asarray(start, dtype=np.float32) / sig
    b = np.asarray(end, dtype=np.float32) / sig
    ab = b - a
    p = [g / s for g, s in zip(grid, sig)]
    t = sum((pi - ai) * abi for pi, ai, abi in zip(p, a, ab)) / float(ab @ ab)
    t = np.clip(t, 0.0, 1.0)
    d2 = sum((pi - (ai + t * abi)) ** 2 for pi, ai, abi in zip(p, a, ab))
    return np.where(d2 <= TRUNCATE_SIGMAS**2, np.exp(-0.5 * d2), 0.0).astype(np.float32)


def striatal_fields(subject_id: str, dims=DEFAULT_DIMS) -> dict[str, dict[int, np.ndarray]]:
    """Unit-peak caudate and putamen fields per hemisphere side (-1 left, +1 right)."""
    j = _jitter(subject_id)
    grid = _grid(dims)
    # scale the anatomy with the grid so small test volumes still work
    sx, sy, sz = (d / ref for d, ref in zip(dims, DEFAULT_DIMS))
    cx, cz = MIDLINE_X * sx + j.offset[0], STRIATUM_Z * sz + j.offset[2]
    oy = j.offset[1]
    caudate, putamen = {}, {}
    for side in (-1, 1):
        caudate[side] = _ellipsoid(
            grid,
            (cx + side * 10 * sx, 70 * sy + oy, cz + 1 * sz),
            (3.5 * sx, 5.0 * sy, 5.0 * sz),
        )
        putamen[side] = _tail(
            grid,
            (cx + side * 15 * sx, 64 * sy + oy, cz),
            (cx + side * 21 * sx, 46 * sy + oy, cz - 1 * sz),
            (3.0 * sx, 3.0 * sy, 4.0 * sz),
        )
    return {"caudate": caudate, "putamen": putamen}


def striatal_masks(subject_id: str, dims=DEFAULT_DIMS, level: float = 0.5) -> dict[str, np.ndarray]:
    """Boolean masks where each structure's unit field reaches ``level`` of its peak."""
    fields = striatal_fields(subject_id, dims)
    return {name: (f[-1] >= level) | (f[1] >= level) for name, f in fields.items()}


def synth_volume(label: Label, params: PhantomParams, subject_id: str, dims=DEFAULT_DIMS) -> Volume:
    label = Label.parse(label)
    j = _jitter(subject_id)
    fields = striatal_fields(subject_id, dims)
    uptake = np.zeros(dims, dtype=np.float32)
    for side in (-1, 1):
        put_gain = 1.0
        side_gain = 1.0
        if label is Label.PD:
            put_gain = params.pd_uptake_factor
            if side == j.affected_side:
                side_gain = params.asymmetry_factor
        hemi = np.maximum(fields["caudate"][side], put_gain * fields["putamen"][side])
        uptake = np.maximum(uptake, side_gain * hemi)
    voxels = (params.control_uptake * j.gain) * uptake
    if params.noise_sigma > 0:
        seq = np.random.SeedSequence([int(params.rng_seed) & 0xFFFFFFFF, _subject_key(subject_id)])
        rng = np.random.Generator(np.random.Philox(seq))
        voxels = voxels + rng.normal(0.0, params.noise_sigma, size=dims).astype(np.float32)
    return Volume(subject_id, np.maximum(voxels, 0.0).astype(np.float32), label)


def subject_ids(n: int, start: int = 0) -> list[str]:
    return [f"sub-{i:04d}" for i in range(start, start + n)]


def synth_dataset(n_control: int, n_pd: int, params: PhantomParams, out_dir: Path, dims=DEFAULT_DIMS) -> DatasetManifest:
    """Write ``n_control + n_pd`` phantom volumes plus ``manifest.csv`` under ``out_dir``.

    Labels are interleaved over subject ids so the id order carries no class signal.
    """
    if n_control < 0 or n_pd < 0:
        raise ValueError("counts must be nonnegative")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.Generator(np.random.Philox(int(params.rng_seed)))
    labels = np.array([Label.CONTROL] * n_control + [Label.PD] * n_pd, dtype=object)
    labels = labels[rng.permutation(labels.size)] if labels.size else labels
    entries = []
    if labels.size:
        vol_dir = out_dir / "volumes"
        vol_dir.mkdir(exist_ok=True)
        for sid, lab in zip(subject_ids(labels.size, start=1), labels):
            hdr = save_volume(synth_volume(lab, params, sid, dims), vol_dir / f"{sid}.json")
            entries.append(ManifestEntry(sid, hdr, lab))
    manifest = DatasetManifest(entries)
    write_manifest(manifest, out_dir / "manifest.csv")
    return manifest
