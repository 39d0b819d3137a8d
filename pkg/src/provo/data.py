"""Disk formats and synthetic datasets.

Volumes are stored as a raw little-endian payload ("name.vol") next to a
JSON sidecar ("name.vol.json") describing shape, dtype, spacing, intensity
range and free-form metadata. Sampling masks use the same pattern with a
uint8 payload ("name.msk" / "name.msk.json"). A dataset directory holds
one manifest.json listing subjects and their per-contrast volume files.

The phantom generator produces multi-contrast subjects from shared tissue
parameter maps, so the contrasts of one subject are pointwise-coupled:
with density rho and rate tau,

    ca = rho * (1 - exp(-tau))
    cb = rho * exp(-tau / 2)
    cc = rho

which gives the exact identity ca = cc - cb^2 / cc wherever cc > 0. That
makes synthesis between contrasts well-posed by construction. All
intensities lie in [0, 1].
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from provo.geometry import Volume
from provo.kspace import SamplingMask
from provo.seeds import derive_seed

VOLUME_FORMAT_VERSION = 1
MASK_FORMAT_VERSION = 1
DATASET_FORMAT_VERSION = 1

_DTYPES = {"float32": np.dtype("<f4"), "complex64": np.dtype("<c8")}


class FormatError(ValueError):
    """A file does not match the documented layout; the message names the
    offending field."""


def write_volume(path, vol: Volume) -> None:
    path = Path(path)
    dtype = "complex64" if vol.is_complex else "float32"
    payload = np.ascontiguousarray(vol.data, dtype=_DTYPES[dtype])
    sidecar = {
        "version": VOLUME_FORMAT_VERSION,
        "shape": list(vol.data.shape),
        "dtype": dtype,
        "spacing": list(vol.spacing),
        "value_range": list(vol.value_range),
        "meta": vol.meta,
    }
    path.write_bytes(payload.tobytes())
    with open(str(path) + ".json", "w") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)


def _sidecar(path) -> dict:
    spath = str(path) + ".json"
    try:
        with open(spath) as f:
            return json.load(f)
    except FileNotFoundError:
        raise FormatError(f"{path}: missing sidecar {spath}")
    except json.JSONDecodeError as e:
        raise FormatError(f"{spath}: invalid JSON: {e}")


def read_volume(path) -> Volume:
    path = Path(path)
    sidecar = _sidecar(path)
    version = sidecar.get("version")
    if version != VOLUME_FORMAT_VERSION:
        raise FormatError(f"{path}: field 'version' is {version!r}, expected {VOLUME_FORMAT_VERSION}")
    dtype = sidecar.get("dtype")
    if dtype not in _DTYPES:
        raise FormatError(f"{path}: field 'dtype' is {dtype!r}, expected one of {sorted(_DTYPES)}")
    shape = sidecar.get("shape")
    if not (isinstance(shape, list) and len(shape) == 4 and all(isinstance(d, int) and d >= 1 for d in shape)):
        raise FormatError(f"{path}: field 'shape' must be four positive ints, got {shape!r}")
    raw = path.read_bytes()
    expected = int(np.prod(shape)) * _DTYPES[dtype].itemsize
    if len(raw) != expected:
        raise FormatError(f"{path}: payload is {len(raw)} bytes, field 'shape' implies {expected}")
    data = np.frombuffer(raw, dtype=_DTYPES[dtype]).reshape(shape)
    value_range = sidecar.get("value_range")
    if not (isinstance(value_range, list) and len(value_range) == 2):
        raise FormatError(f"{path}: field 'value_range' must be [lo, hi], got {value_range!r}")
    return Volume(
        data.copy(),
        spacing=tuple(sidecar.get("spacing", (1.0, 1.0, 1.0))),
        value_range=tuple(value_range),
        meta=sidecar.get("meta", {}),
    )


def write_mask(path, mask: SamplingMask) -> None:
    path = Path(path)
    payload = mask.grid.astype(np.uint8)
    sidecar = {
        "version": MASK_FORMAT_VERSION,
        "shape": list(mask.grid.shape),
        "R": mask.R,
        "sigma": mask.sigma,
        "seed": mask.seed,
    }
    path.write_bytes(payload.tobytes())
    with open(str(path) + ".json", "w") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)


def read_mask(path) -> SamplingMask:
    path = Path(path)
    sidecar = _sidecar(path)
    if sidecar.get("version") != MASK_FORMAT_VERSION:
        raise FormatError(f"{path}: field 'version' is {sidecar.get('version')!r}, "
                          f"expected {MASK_FORMAT_VERSION}")
    shape = sidecar.get("shape")
    if not (isinstance(shape, list) and len(shape) == 2):
        raise FormatError(f"{path}: field 'shape' must be two ints, got {shape!r}")
    raw = path.read_bytes()
    if len(raw) != shape[0] * shape[1]:
        raise FormatError(f"{path}: payload is {len(raw)} bytes, field 'shape' implies "
                          f"{shape[0] * shape[1]}")
    grid = np.frombuffer(raw, dtype=np.uint8).reshape(shape)
    if np.any(grid > 1):
        raise FormatError(f"{path}: payload holds values other than 0/1")
    for name in ("R", "sigma", "seed"):
        if name not in sidecar:
            raise FormatError(f"{path}: field {name!r} missing from sidecar")
    return SamplingMask(grid=grid.astype(bool), R=sidecar["R"], sigma=sidecar["sigma"],
                        seed=sidecar["seed"])


# ---------------------------------------------------------------------------
# dataset manifests


@dataclass
class DatasetManifest:
    """Index of a dataset directory: subject ids and their contrast files."""

    root: Path
    subjects: list = field(default_factory=list)  # [{"sid": ..., "contrasts": {name: relpath}}]
    meta: dict = field(default_factory=dict)

    @property
    def sids(self) -> list:
        return [s["sid"] for s in self.subjects]

    @property
    def contrast_names(self) -> list:
        names = set()
        for s in self.subjects:
            names.update(s["contrasts"])
        return sorted(names)

    def volume_path(self, sid: str, contrast: str) -> Path:
        for s in self.subjects:
            if s["sid"] == sid:
                if contrast not in s["contrasts"]:
                    raise KeyError(f"subject {sid} has no contrast {contrast!r}")
                return self.root / s["contrasts"][contrast]
        raise KeyError(f"no subject {sid!r} in manifest")

    def load_subject(self, sid: str) -> dict:
        """All of one subject's contrasts as {name: Volume}."""
        for s in self.subjects:
            if s["sid"] == sid:
                return {c: read_volume(self.root / rel) for c, rel in s["contrasts"].items()}
        raise KeyError(f"no subject {sid!r} in manifest")

    def save(self) -> None:
        doc = {"version": DATASET_FORMAT_VERSION, "subjects": self.subjects, "meta": self.meta}
        with open(self.root / "manifest.json", "w") as f:
            json.dump(doc, f, indent=2, sort_keys=True)

    @classmethod
    def load(cls, root) -> "DatasetManifest":
        root = Path(root)
        try:
            with open(root / "manifest.json") as f:
                doc = json.load(f)
        except FileNotFoundError:
            raise FormatError(f"{root}: no manifest.json")
        except json.JSONDecodeError as e:
            raise FormatError(f"{root}/manifest.json: invalid JSON: {e}")
        if doc.get("version") != DATASET_FORMAT_VERSION:
            raise FormatError(f"{root}/manifest.json: field 'version' is {doc.get('version')!r}")
        subjects = doc.get("subjects")
        if not isinstance(subjects, list):
            raise FormatError(f"{root}/manifest.json: field 'subjects' must be a list")
        return cls(root=root, subjects=subjects, meta=doc.get("meta", {}))


def split_subjects(sids, n_train: int, n_val: int, n_test: int, seed: int = 0):
    """Deterministic seeded split into train / val / test id lists."""
    sids = list(sids)
    if n_train < 1 or n_val < 0 or n_test < 0:
        raise ValueError("split sizes must be n_train >= 1, n_val >= 0, n_test >= 0")
    if n_train + n_val + n_test > len(sids):
        raise ValueError(
            f"split {n_train}+{n_val}+{n_test} exceeds {len(sids)} subjects"
        )
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(sids))
    picked = [sids[i] for i in perm]
    train = picked[:n_train]
    val = picked[n_train:n_train + n_val]
    test = picked[n_train + n_val:n_train + n_val + n_test]
    return train, val, test


# ---------------------------------------------------------------------------
# phantoms


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (64, 64, 64)
    n_ellipsoids: int = 8
    smooth_sigma: float = 0.75

    def __post_init__(self):
        if len(self.dims) != 3 or any(d < 8 for d in self.dims):
            raise ValueError(f"dims must be three ints >= 8, got {self.dims}")
        if any(d % 4 for d in self.dims):
            raise ValueError(f"dims must be divisible by 4, got {self.dims}")
        if self.n_ellipsoids < 1:
            raise ValueError("need at least one ellipsoid")
        if self.smooth_sigma < 0:
            raise ValueError("smooth_sigma must be >= 0")


PHANTOM_CONTRASTS = ("ca", "cb", "cc")


def _paint_ellipsoid(field_maps, center, axes, values, grids):
    """Overwrite rho/tau inside one axis-aligned ellipsoid."""
    gx, gy, gz = grids
    m = (((gx - center[0]) / axes[0]) ** 2
         + ((gy - center[1]) / axes[1]) ** 2
         + ((gz - center[2]) / axes[2]) ** 2) <= 1.0
    rho, tau = field_maps
    rho[m] = values[0]
    tau[m] = values[1]


def generate_phantom(spec: PhantomSpec, seed: int) -> dict:
    """One subject's coupled contrasts as {name: Volume}.

    A large centered body plus smaller random ellipsoids define rho and
    tau maps; both are smoothed and then mapped pointwise to the three
    contrasts, so the coupling identity survives the smoothing exactly.
    """
    rng = np.random.default_rng(seed)
    d0, d1, d2 = spec.dims
    gx, gy, gz = np.meshgrid(np.arange(d0), np.arange(d1), np.arange(d2), indexing="ij")
    grids = (gx, gy, gz)
    rho = np.zeros(spec.dims, dtype=np.float64)
    tau = np.zeros(spec.dims, dtype=np.float64)

    body_axes = [rng.uniform(0.32, 0.44) * d for d in spec.dims]
    _paint_ellipsoid((rho, tau), (d0 / 2, d1 / 2, d2 / 2), body_axes,
                     (rng.uniform(0.55, 0.75), rng.uniform(0.8, 1.2)), grids)
    for _ in range(spec.n_ellipsoids - 1):
        center = [rng.uniform(0.25, 0.75) * d for d in spec.dims]
        axes = [max(2.0, rng.uniform(0.06, 0.2) * d) for d in spec.dims]
        values = (rng.uniform(0.4, 1.0), rng.uniform(0.3, 2.0))
        _paint_ellipsoid((rho, tau), center, axes, values, grids)

    if spec.smooth_sigma > 0:
        rho = gaussian_filter(rho, spec.smooth_sigma)
        tau = gaussian_filter(tau, spec.smooth_sigma)

    contrasts = {
        "ca": rho * (1.0 - np.exp(-tau)),
        "cb": rho * np.exp(-tau / 2.0),
        "cc": rho,
    }
    out = {}
    for name, arr in contrasts.items():
        data = np.clip(arr, 0.0, 1.0)[None].astype(np.float32)
        out[name] = Volume(data, value_range=(0.0, 1.0), meta={"contrast": name})
    return out


def generate_phantom_dataset(out_dir, n_subjects: int, spec: PhantomSpec,
                             seed: int = 0) -> DatasetManifest:
    """Write n_subjects phantom subjects plus a manifest under out_dir."""
    if n_subjects < 1:
        raise ValueError("n_subjects must be >= 1")
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest(root=root, meta={
        "dims": list(spec.dims),
        "n_ellipsoids": spec.n_ellipsoids,
        "smooth_sigma": spec.smooth_sigma,
        "seed": seed,
    })
    for i in range(n_subjects):
        sid = f"sub{i:03d}"
        vols = generate_phantom(spec, derive_seed(seed, "phantom", sid))
        entry = {"sid": sid, "contrasts": {}}
        for name, vol in vols.items():
            rel = f"{sid}_{name}.vol"
            write_volume(root / rel, vol)
            entry["contrasts"][name] = rel
        manifest.subjects.append(entry)
    manifest.save()
    return manifest
