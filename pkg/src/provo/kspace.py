"""Fourier-domain operations: centered FFTs, variable-density undersampling,
data consistency, phase restoration and multi-coil projection.

Sampling patterns are 2D over the two phase-encode axes and broadcast along
the readout axis, matching a Cartesian acquisition that is fully sampled in
the readout direction.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.fft

from provo.geometry import COMPLEX_DTYPE, Volume


def fft3c(x: np.ndarray) -> np.ndarray:
    """Centered orthonormal 3D FFT over the last three axes."""
    axes = (-3, -2, -1)
    k = scipy.fft.fftshift(
        scipy.fft.fftn(scipy.fft.ifftshift(x, axes=axes), axes=axes, norm="ortho"),
        axes=axes,
    )
    return np.ascontiguousarray(k)


def ifft3c(k: np.ndarray) -> np.ndarray:
    """Inverse of fft3c; fft3c then ifft3c returns the input to float precision."""
    axes = (-3, -2, -1)
    x = scipy.fft.fftshift(
        scipy.fft.ifftn(scipy.fft.ifftshift(k, axes=axes), axes=axes, norm="ortho"),
        axes=axes,
    )
    return np.ascontiguousarray(x)


@dataclass
class SamplingMask:
    """Binary 2D phase-encode sampling pattern with its generation parameters."""

    grid: np.ndarray
    R: float
    sigma: float
    seed: int

    def __post_init__(self):
        grid = np.asarray(self.grid)
        if grid.ndim != 2:
            raise ValueError(f"mask grid must be 2D, got shape {grid.shape}")
        self.grid = grid.astype(bool)
        self.R = float(self.R)
        self.sigma = float(self.sigma)
        self.seed = int(self.seed)

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape

    @property
    def rate(self) -> float:
        """Realized sampling rate (fraction of points kept)."""
        return float(self.grid.mean())

    def expand(self, dims: tuple[int, int, int], readout_axis: int) -> np.ndarray:
        """Broadcast the 2D pattern to a full 3D boolean grid.

        The two phase-encode axes are the grid axes other than readout_axis,
        in ascending order; the pattern repeats along the readout axis.
        """
        if readout_axis not in (0, 1, 2):
            raise ValueError(f"readout_axis must be 0, 1 or 2, got {readout_axis}")
        pe_axes = [a for a in range(3) if a != readout_axis]
        expected = (dims[pe_axes[0]], dims[pe_axes[1]])
        if self.grid.shape != expected:
            raise ValueError(
                f"mask shape {self.grid.shape} does not match phase-encode dims {expected} "
                f"for volume dims {dims} with readout_axis {readout_axis}"
            )
        full = np.expand_dims(self.grid, axis=readout_axis)
        return np.broadcast_to(full, dims)


def generate_vd_mask(shape: tuple[int, int], R: float, seed: int) -> SamplingMask:
    """Random variable-density mask with expected rate 1/R.

    Keep probability falls off as a Gaussian of the index-space distance to
    the k-space center (the n//2 point, which is always kept). The Gaussian
    width is solved by bisection so the mean keep probability equals 1/R.
    """
    n1, n2 = int(shape[0]), int(shape[1])
    if n1 < 2 or n2 < 2:
        raise ValueError(f"mask shape must be at least 2x2, got {(n1, n2)}")
    R = float(R)
    if R <= 1.0:
        raise ValueError(f"acceleration R must be > 1, got {R}")
    target = 1.0 / R

    i = np.arange(n1)[:, None] - n1 // 2
    j = np.arange(n2)[None, :] - n2 // 2
    d2 = (i * i + j * j).astype(np.float64)

    def density(sigma):
        return np.minimum(1.0, np.exp(-d2 / (2.0 * sigma**2)))

    lo, hi = 1e-3, float(max(n1, n2))
    while float(density(hi).mean()) < target:
        hi *= 2.0
        if hi > 1e6:
            raise RuntimeError("variable-density solver failed to bracket the target rate")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if float(density(mid).mean()) < target:
            lo = mid
        else:
            hi = mid
        if (hi - lo) / hi < 1e-6:
            break
    sigma = 0.5 * (lo + hi)
    p = density(sigma)
    mean = float(p.mean())
    if abs(mean - target) / target > 1e-4:
        raise RuntimeError(
            f"variable-density solver off target: mean {mean:.6g} vs {target:.6g}"
        )

    rng = np.random.default_rng(int(seed))
    grid = rng.random((n1, n2)) < p
    grid[n1 // 2, n2 // 2] = True
    return SamplingMask(grid=grid, R=R, sigma=sigma, seed=int(seed))


@dataclass
class KSpaceVolume:
    """Acquired k-space samples of one volume plus the pattern that produced them.

    kdata is rank-4 complex [coils, d0, d1, d2] and is identically zero at
    unsampled points (enforced on construction). readout_axis names the
    fully-sampled grid axis.
    """

    kdata: np.ndarray
    mask: SamplingMask
    readout_axis: int = 2
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        arr = np.asarray(self.kdata)
        if arr.ndim != 4:
            raise ValueError(f"kdata must be rank-4 [coils, d0, d1, d2], got shape {arr.shape}")
        self.kdata = arr.astype(COMPLEX_DTYPE, copy=False)
        self.readout_axis = int(self.readout_axis)
        full = self.mask.expand(self.dims, self.readout_axis)
        off = self.kdata[:, ~full]
        if off.size and np.max(np.abs(off)) > 0:
            raise ValueError("kdata holds nonzero values at unsampled points")
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def coils(self) -> int:
        return self.kdata.shape[0]

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.kdata.shape[1:])

    def mask3d(self) -> np.ndarray:
        return self.mask.expand(self.dims, self.readout_axis)

    def zero_filled(self) -> Volume:
        """Inverse FFT of the zero-filled spectrum (complex per-coil volume)."""
        return Volume(ifft3c(self.kdata), spacing=self.spacing, meta=dict(self.meta))


def undersample(vol: Volume, mask: SamplingMask, readout_axis: int = 2) -> KSpaceVolume:
    """Simulate acquisition: transform to k-space and zero the unsampled points."""
    k = fft3c(vol.data.astype(COMPLEX_DTYPE))
    full = mask.expand(vol.dims, readout_axis)
    k = k * full
    return KSpaceVolume(
        kdata=k, mask=mask, readout_axis=readout_axis, spacing=vol.spacing, meta=dict(vol.meta)
    )


def data_consistency(pred: np.ndarray, acquired: KSpaceVolume) -> np.ndarray:
    """Overwrite the predicted spectrum with acquired samples where they exist.

    pred is a complex image-domain array shaped like acquired.kdata. The
    output equals the prediction at unsampled points and the acquisition at
    sampled ones; applying the operation twice changes nothing.
    """
    pred = np.asarray(pred)
    if pred.shape != acquired.kdata.shape:
        raise ValueError(f"prediction shape {pred.shape} != acquired shape {acquired.kdata.shape}")
    full = acquired.mask3d()
    k = fft3c(pred.astype(COMPLEX_DTYPE))
    k = np.where(full, acquired.kdata, k)
    return ifft3c(k)


_phase_clamp_count = 0


def phase_restore(magnitude: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Attach the phase of a complex reference to a real magnitude image.

    Negative magnitudes are clamped to zero first; clamping increments a
    module-level counter surfaced through phase_clamp_count().
    """
    global _phase_clamp_count
    magnitude = np.asarray(magnitude)
    reference = np.asarray(reference)
    if magnitude.shape != reference.shape:
        raise ValueError(f"shape mismatch: magnitude {magnitude.shape} vs reference {reference.shape}")
    n_neg = int(np.count_nonzero(magnitude < 0))
    if n_neg:
        _phase_clamp_count += n_neg
        warnings.warn(f"phase_restore clamped {n_neg} negative magnitude values", stacklevel=2)
        magnitude = np.maximum(magnitude, 0)
    phase = np.angle(reference)
    return (magnitude * np.exp(1j * phase)).astype(COMPLEX_DTYPE)


def phase_clamp_count() -> int:
    """Total negative values clamped by phase_restore since import."""
    return _phase_clamp_count


def check_coil_maps(maps: np.ndarray, tol: float = 1e-3) -> None:
    """Validate sensitivity maps [coils, d0, d1, d2]: sum over coils of |S|^2
    must be 1 everywhere within tol."""
    maps = np.asarray(maps)
    if maps.ndim != 4:
        raise ValueError(f"coil maps must be rank-4 [coils, d0, d1, d2], got {maps.shape}")
    power = np.sum(np.abs(maps.astype(np.complex128)) ** 2, axis=0)
    dev = float(np.max(np.abs(power - 1.0)))
    if dev > tol:
        raise ValueError(f"coil maps not normalized: max |sum|S|^2 - 1| = {dev:.3e} > {tol}")


def coil_project(image: np.ndarray, maps: np.ndarray) -> np.ndarray:
    """Single combined image [1, ...] or [...] -> per-coil images [coils, ...]."""
    maps = np.asarray(maps)
    check_coil_maps(maps)
    image = np.asarray(image)
    if image.ndim == 4:
        if image.shape[0] != 1:
            raise ValueError(f"expected a single-channel image, got {image.shape[0]} channels")
        image = image[0]
    if image.shape != maps.shape[1:]:
        raise ValueError(f"image dims {image.shape} != map dims {maps.shape[1:]}")
    return (maps * image[None]).astype(COMPLEX_DTYPE)


def coil_combine(images: np.ndarray, maps: np.ndarray) -> np.ndarray:
    """Adjoint of coil_project: conjugate-weighted sum over coils, shape [1, ...].

    With normalized maps, coil_combine(coil_project(x)) returns x.
    """
    maps = np.asarray(maps)
    check_coil_maps(maps)
    images = np.asarray(images)
    if images.shape != maps.shape:
        raise ValueError(f"per-coil image shape {images.shape} != map shape {maps.shape}")
    combined = np.sum(np.conj(maps) * images, axis=0)
    return combined[None].astype(COMPLEX_DTYPE)
