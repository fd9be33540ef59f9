"""SPECT volume I/O and the slice-triplet to RGB conversion.

Volume files come in pairs: a JSON header (``<stem>.json``) and a raw payload
(``<stem>.raw``) of little-endian float32 voxels, X varying fastest, then Y,
then Z.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from datspect.labels import Label

DEFAULT_DIMS = (91, 109, 91)
FORMAT_NAME = "datspect-volume"
FORMAT_VERSION = 1

# in-plane layout per slicing axis: (slice axis, row axis, column axis)
AXES = {
    "axial": (2, 1, 0),
    "coronal": (1, 2, 0),
    "sagittal": (0, 2, 1),
}


class VolumeError(Exception):
    pass


class VolumeNotFoundError(VolumeError, FileNotFoundError):
    pass


class VolumeHeaderError(VolumeError):
    pass


class VolumeSizeError(VolumeError):
    pass


@dataclass
class Volume:
    subject_id: str
    voxels: np.ndarray
    label: Label | None = None

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float32)
        if self.voxels.ndim != 3:
            raise VolumeError(f"volume must be 3D, got shape {self.voxels.shape}")
        if not np.all(np.isfinite(self.voxels)):
            raise VolumeError(f"volume {self.subject_id} has non-finite voxels")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.voxels.shape)


@dataclass
class TripletImage:
    """H x W x 3 uint8 image whose channels are three consecutive slices."""

    pixels: np.ndarray
    source_slices: tuple[int, int, int]
    subject_id: str

    def __post_init__(self):
        if self.pixels.dtype != np.uint8 or self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"pixels must be HxWx3 uint8, got {self.pixels.dtype} {self.pixels.shape}")
        z0, z1, z2 = self.source_slices
        if (z1, z2) != (z0 + 1, z0 + 2):
            raise ValueError(f"source slices {self.source_slices} are not consecutive")


def header_path(path: Path) -> Path:
    path = Path(path)
    return path if path.suffix == ".json" else path.with_suffix(".json")


def save_volume(v: Volume, path: Path) -> Path:
    """Write header + payload next to each other; returns the header path."""
    hdr = header_path(path)
    raw = hdr.with_suffix(".raw")
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "dims": list(v.dims),
        "dtype": "<f4",
        "axis_order": ["X", "Y", "Z"],
        "payload": raw.name,
        "subject_id": v.subject_id,
        "label": v.label.value if v.label is not None else None,
    }
    raw.write_bytes(np.asarray(v.voxels, dtype="<f4").tobytes(order="F"))
    hdr.write_text(json.dumps(header, indent=1) + "\n")
    return hdr


def load_volume(path: Path, expected_dims: tuple[int, int, int] | None = None) -> Volume:
    hdr = header_path(path)
    if not hdr.exists():
        raise VolumeNotFoundError(f"volume header not found: {hdr}")
    try:
        header = json.loads(hdr.read_text())
        dims = tuple(int(d) for d in header["dims"])
        payload = hdr.parent / header["payload"]
        subject_id = str(header["subject_id"])
        label = Label.parse(header["label"]) if header.get("label") is not None else None
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise VolumeHeaderError(f"{hdr}: malformed header ({exc})") from None
    if header.get("format") != FORMAT_NAME or header.get("dtype", "<f4") != "<f4":
        raise VolumeHeaderError(f"{hdr}: unsupported format/dtype")
    if header.get("axis_order", ["X", "Y", "Z"]) != ["X", "Y", "Z"]:
        raise VolumeHeaderError(f"{hdr}: unsupported axis order {header['axis_order']}")
    if len(dims) != 3 or min(dims) < 1:
        raise VolumeHeaderError(f"{hdr}: bad dims {dims}")
    if not payload.exists():
        raise VolumeNotFoundError(f"volume payload not found: {payload}")
    data = payload.read_bytes()
    expected = 4 * dims[0] * dims[1] * dims[2]
    if len(data) != expected:
        raise VolumeSizeError(f"{payload}: header declares {dims} ({expected} bytes), payload has {len(data)} bytes")
    if expected_dims is not None and dims != tuple(expected_dims):
        raise VolumeSizeError(f"{hdr}: dims {dims}, expected {tuple(expected_dims)}")
    voxels = np.frombuffer(data, dtype="<f4").reshape(dims, order="F")
    try:
        return Volume(subject_id, voxels.astype(np.float32), label)
    except VolumeError as exc:
        raise VolumeHeaderError(f"{hdr}: {exc}") from None


def normalize_to_uint8(stack: np.ndarray) -> np.ndarray:
    """Joint min-max map onto [0, 255], rounding half up. Constant input gives zeros."""
    stack = np.asarray(stack, dtype=np.float64)
    lo, hi = stack.min(), stack.max()
    if hi == lo:
        return np.zeros(stack.shape, dtype=np.uint8)
    scaled = np.floor((stack - lo) / (hi - lo) * 255.0 + 0.5)
    return np.clip(scaled, 0, 255).astype(np.uint8)


def extract_triplet(v: Volume, z0: int = 40, axis: str = "axial") -> TripletImage:
    """Stack slices z0, z0+1, z0+2 of ``axis`` as the R, G, B channels.

    Rows and columns follow ``AXES``; for axial slices rows run along Y and
    columns along X, so the image is 109 x 91 for an MNI-sized volume.
    """
    try:
        slice_ax, row_ax, col_ax = AXES[axis]
    except KeyError:
        raise ValueError(f"unknown axis {axis!r}; choose from {sorted(AXES)}") from None
    extent = v.voxels.shape[slice_ax]
    if z0 < 0 or z0 + 2 >= extent:
        raise IndexError(f"slices {z0}..{z0 + 2} outside axis {axis} of extent {extent}")
    vol = np.transpose(v.voxels, (row_ax, col_ax, slice_ax))
    stack = vol[:, :, z0 : z0 + 3]
    return TripletImage(normalize_to_uint8(stack), (z0, z0 + 1, z0 + 2), v.subject_id)


def write_image(t: TripletImage, path: Path) -> None:
    Image.fromarray(np.ascontiguousarray(t.pixels), mode="RGB").save(path, format="PNG")


def read_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode != "RGB":
            im = im.convert("RGB")
        return np.asarray(im, dtype=np.uint8).copy()
