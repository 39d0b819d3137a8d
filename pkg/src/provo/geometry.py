"""Orientation-indexed slicing and reassembly of 3D volumes.

A volume is a rank-4 array [channels, d0, d1, d2]. The three rectilinear
orientations map onto the grid axes with a fixed convention:

    Axial    -> slices along axis 2, in-plane shape (d0, d1)
    Coronal  -> slices along axis 0, in-plane shape (d1, d2)
    Sagittal -> slices along axis 1, in-plane transposed, shape (d2, d0)

For a (192, 160, 160) volume this yields axial (192, 160), coronal
(160, 160) and sagittal (160, 192) cross-sections. Splitting and stacking
are exact inverses for every orientation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from itertools import permutations

import numpy as np

REAL_DTYPE = np.float32
COMPLEX_DTYPE = np.complex64


class Orientation(Enum):
    AXIAL = "A"
    CORONAL = "C"
    SAGITTAL = "S"

    @property
    def slice_axis(self) -> int:
        """Grid axis (0..2, excluding the channel axis) the slices run along."""
        return {Orientation.AXIAL: 2, Orientation.CORONAL: 0, Orientation.SAGITTAL: 1}[self]

    @property
    def in_plane_transpose(self) -> bool:
        """Whether the two in-plane axes are swapped in the extracted slice."""
        return self is Orientation.SAGITTAL

    @property
    def letter(self) -> str:
        return self.value

    @classmethod
    def from_letter(cls, letter: str) -> "Orientation":
        try:
            return cls(letter.upper())
        except ValueError:
            raise ValueError(f"unknown orientation letter {letter!r}, expected one of A, C, S")

    def slice_shape(self, dims: tuple[int, int, int]) -> tuple[int, int]:
        """In-plane (h, w) of a cross-section of a volume with grid `dims`."""
        d0, d1, d2 = dims
        if self is Orientation.AXIAL:
            return (d0, d1)
        if self is Orientation.CORONAL:
            return (d1, d2)
        return (d2, d0)


@dataclass(frozen=True)
class ProgressionOrder:
    """A permutation of the three orientations defining the stage sequence."""

    orientations: tuple[Orientation, Orientation, Orientation]

    def __post_init__(self):
        if len(self.orientations) != 3 or len(set(self.orientations)) != 3:
            raise ValueError(f"progression order must contain each orientation once, got {self.orientations}")

    @classmethod
    def from_string(cls, text: str) -> "ProgressionOrder":
        """Parse compact forms like 'ACS', 'A-C-S' or 'A->C->S'."""
        letters = [c for c in text.upper() if c in "ACS"]
        if len(letters) != 3:
            raise ValueError(f"cannot parse progression order from {text!r}")
        return cls(tuple(Orientation.from_letter(c) for c in letters))

    @property
    def label(self) -> str:
        return "->".join(o.letter for o in self.orientations)

    @property
    def compact(self) -> str:
        return "".join(o.letter for o in self.orientations)

    def __iter__(self):
        return iter(self.orientations)

    def __getitem__(self, i):
        return self.orientations[i]


def enumerate_orders() -> list[ProgressionOrder]:
    """All 6 progression orders, lexicographic by orientation letter (A < C < S)."""
    base = [Orientation.AXIAL, Orientation.CORONAL, Orientation.SAGITTAL]
    return [ProgressionOrder(p) for p in permutations(base)]


@dataclass(eq=False)
class Volume:
    """A 3D image with a leading channel axis and intensity metadata.

    data is rank-4 [channels, d0, d1, d2], stored as float32 or complex64
    (the canonical on-disk precision). value_range is the declared intensity
    range; for real volumes the data must lie inside it. meta carries
    auxiliary entries such as the normalization scale.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    value_range: tuple[float, float] | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 4:
            raise ValueError(f"volume data must be rank-4 [channels, d0, d1, d2], got shape {arr.shape}")
        if any(d < 1 for d in arr.shape):
            raise ValueError(f"volume dims must all be >= 1, got {arr.shape}")
        if np.iscomplexobj(arr):
            arr = arr.astype(COMPLEX_DTYPE, copy=False)
        else:
            arr = arr.astype(REAL_DTYPE, copy=False)
        self.data = arr
        self.spacing = tuple(float(s) for s in self.spacing)
        if self.value_range is None:
            if self.is_complex:
                self.value_range = (0.0, float(np.max(np.abs(arr))) if arr.size else 0.0)
            else:
                self.value_range = (float(arr.min()), float(arr.max()))
        else:
            lo, hi = (float(self.value_range[0]), float(self.value_range[1]))
            if lo > hi:
                raise ValueError(f"value_range lo > hi: {(lo, hi)}")
            if not self.is_complex:
                dmin, dmax = float(arr.min()), float(arr.max())
                # small float32 slack so round-tripped volumes revalidate
                eps = 1e-6 * max(1.0, abs(lo), abs(hi))
                if dmin < lo - eps or dmax > hi + eps:
                    raise ValueError(
                        f"data range [{dmin}, {dmax}] outside declared value_range [{lo}, {hi}]"
                    )
            self.value_range = (lo, hi)

    @property
    def is_complex(self) -> bool:
        return np.iscomplexobj(self.data)

    @property
    def dtype_tag(self) -> str:
        return "complex" if self.is_complex else "real"

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[1:])

    def magnitude(self) -> "Volume":
        """Magnitude image with the same grid; identity for real volumes."""
        if not self.is_complex:
            return self
        mag = np.abs(self.data)
        return Volume(mag, spacing=self.spacing, meta=dict(self.meta))


@dataclass
class SliceStack:
    """Ordered cross-sections of a volume in one orientation.

    Each slice is rank-3 [channels, h, w]; origin_shape remembers the full
    volume shape so stacking restores it exactly.
    """

    slices: list[np.ndarray]
    orientation: Orientation
    origin_shape: tuple[int, int, int, int]

    def __post_init__(self):
        n_expected = self.origin_shape[1:][self.orientation.slice_axis]
        if len(self.slices) != n_expected:
            raise ValueError(
                f"malformed slice stack: {len(self.slices)} slices for axis length {n_expected}"
            )
        shapes = {s.shape for s in self.slices}
        if len(shapes) != 1:
            raise ValueError(f"malformed slice stack: inconsistent slice shapes {sorted(shapes)}")
        (shape,) = shapes
        if len(shape) != 3:
            raise ValueError(f"slices must be rank-3 [channels, h, w], got {shape}")

    def __len__(self):
        return len(self.slices)

    def __getitem__(self, i):
        return self.slices[i]


def split_volume(vol: Volume, o: Orientation) -> SliceStack:
    """Extract all cross-sections of `vol` along orientation `o`.

    The data is not modified; each slice keeps the channel axis and is
    transposed in-plane when the orientation requires it.
    """
    arr = np.moveaxis(vol.data, o.slice_axis + 1, 1)  # [C, I, a, b]
    if o.in_plane_transpose:
        arr = np.swapaxes(arr, 2, 3)
    slices = [np.ascontiguousarray(arr[:, i]) for i in range(arr.shape[1])]
    return SliceStack(slices=slices, orientation=o, origin_shape=vol.data.shape)


def stack_to_volume(stack: SliceStack, spacing=(1.0, 1.0, 1.0), meta=None) -> Volume:
    """Reassemble a SliceStack into a Volume; exact inverse of split_volume."""
    shapes = {s.shape for s in stack.slices}
    if len(shapes) != 1:
        raise ValueError(f"malformed slice stack: inconsistent slice shapes {sorted(shapes)}")
    arr = np.stack(stack.slices, axis=1)  # [C, I, h, w]
    if stack.orientation.in_plane_transpose:
        arr = np.swapaxes(arr, 2, 3)
    arr = np.moveaxis(arr, 1, stack.orientation.slice_axis + 1)
    if arr.shape != stack.origin_shape:
        raise ValueError(f"stack reassembles to {arr.shape}, expected {stack.origin_shape}")
    return Volume(np.ascontiguousarray(arr), spacing=spacing, meta=dict(meta or {}))


def take_slice(vol: Volume, o: Orientation, index: int) -> np.ndarray:
    """Single cross-section [channels, h, w]; equals split_volume(vol, o)[index]."""
    n = vol.dims[o.slice_axis]
    if not 0 <= index < n:
        raise IndexError(f"slice index {index} out of range for axis length {n}")
    sl = [slice(None)] * 4
    sl[o.slice_axis + 1] = index
    arr = vol.data[tuple(sl)]
    if o.in_plane_transpose:
        arr = np.swapaxes(arr, 1, 2)
    return np.ascontiguousarray(arr)


def extract_neighborhood(vol: Volume, o: Orientation, index: int, n_c: int) -> np.ndarray:
    """n_c consecutive cross-sections centered at `index`, stacked on channels.

    Neighbors beyond the volume ends are edge-replicated. The result is
    rank-3 [n_c * channels, h, w]; n_c = 1 reduces to plain slicing.
    """
    if n_c < 1 or n_c % 2 == 0:
        raise ValueError(f"n_c must be a positive odd integer, got {n_c}")
    n = vol.dims[o.slice_axis]
    if not 0 <= index < n:
        raise IndexError(f"slice index {index} out of range for axis length {n}")
    half = n_c // 2
    parts = []
    for off in range(-half, half + 1):
        j = min(max(index + off, 0), n - 1)
        parts.append(take_slice(vol, o, j))
    return np.concatenate(parts, axis=0)


def normalize_volume(vol: Volume) -> tuple[Volume, float]:
    """Scale intensities into [-1, 1] by the volume's magnitude bound.

    The bound is taken from the declared value_range when available,
    otherwise from the data itself; zero-magnitude volumes pass through
    unchanged. Returns the scaled volume (scale recorded under
    meta['norm_scale']) and the scale factor.
    """
    lo, hi = vol.value_range
    scale = max(abs(lo), abs(hi))
    if scale == 0.0:
        scale = float(np.max(np.abs(vol.data))) if vol.data.size else 0.0
    if scale == 0.0:
        scale = 1.0
    data = vol.data / scale
    meta = dict(vol.meta)
    meta["norm_scale"] = float(scale)
    if vol.is_complex:
        out = Volume(data, spacing=vol.spacing, meta=meta)
    else:
        out = Volume(data, spacing=vol.spacing, value_range=(lo / scale, hi / scale), meta=meta)
    return out, float(scale)


def denormalize_volume(vol: Volume, scale: float | None = None) -> Volume:
    """Undo normalize_volume, defaulting to the recorded meta['norm_scale']."""
    if scale is None:
        scale = vol.meta.get("norm_scale")
    if scale is None:
        raise ValueError("no normalization scale recorded and none supplied")
    meta = {k: v for k, v in vol.meta.items() if k != "norm_scale"}
    return Volume(vol.data * float(scale), spacing=vol.spacing, meta=meta)
