"""Synthetic CT/PET phantoms, augmentation and the PVOL volume format."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"PVOL"
VOLUME_VERSION = 1
DTYPE_F32, DTYPE_U8 = 0, 1
HEADER = struct.Struct("<4s6I")  # magic, version, dtype, channels, dz, dy, dx
SPLITS = ("pretrain", "adapt", "task1", "task2")


class VolumeFormatError(ValueError):
    def __init__(self, msg, offset):
        super().__init__(f"{msg} (byte offset {offset})")
        self.offset = offset


class PhantomError(RuntimeError):
    pass


@dataclass
class PhantomSpec:
    seed: int = 0
    dims: tuple = (32, 32, 32)
    tumor_radius: tuple = (3.0, 5.0)
    lymph_radius: tuple = (2.5, 4.0)
    ct_contrast: float = 0.5
    lymph_ct_contrast: float = -0.5
    pet_snr: float = 5.0
    lymph_pet_uptake: float = 0.3
    noise_sigma: tuple = (0.05, 0.05)  # (CT, PET)
    pet_background: float = 0.12
    background_amplitude: float = 0.02

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.tumor_radius = tuple(self.tumor_radius)
        self.lymph_radius = tuple(self.lymph_radius)
        self.noise_sigma = tuple(self.noise_sigma)
        if self.ct_contrast < 0:
            raise ValueError("ct_contrast must be >= 0")
        biggest = 2 * max(self.tumor_radius[1], self.lymph_radius[1]) + 2
        if biggest > min(self.dims):
            raise ValueError(f"radii {self.tumor_radius}/{self.lymph_radius} do not fit in {self.dims}")


def _ellipsoid(grid, center, radii):
    zz, yy, xx = grid
    return ((zz - center[0]) / radii[0]) ** 2 + ((yy - center[1]) / radii[1]) ** 2 + (
        (xx - center[2]) / radii[2]) ** 2 <= 1.0


def _place(rng, grid, dims, rrange):
    radii = rng.uniform(*rrange, size=3)
    # keep objects in the middle half so that centred/random crops usually see them
    lo = np.maximum(np.ceil(radii) + 1, np.array(dims) / 4)
    hi = np.minimum(np.array(dims) - np.ceil(radii) - 2, 3 * np.array(dims) / 4)
    center = rng.uniform(lo, np.maximum(lo, hi))
    return _ellipsoid(grid, center, radii)


def generate_phantom(spec: PhantomSpec):
    """Return ``(ct, pet, labels)``: two (1, Z, Y, X) float32 volumes and a uint8 map.

    CT shows the lymph node (negative contrast) and the tumor with
    ``ct_contrast``; PET shows the tumor as a hotspot ``pet_snr`` times the
    PET background above it. Labels: 0 background, 1 tumor, 2 lymph.
    """
    rng = np.random.default_rng(spec.seed)
    dims = spec.dims
    grid = np.meshgrid(*(np.arange(d, dtype=np.float64) for d in dims), indexing="ij")
    for _ in range(100):
        tumor = _place(rng, grid, dims, spec.tumor_radius)
        lymph = _place(rng, grid, dims, spec.lymph_radius)
        # require a one-voxel gap so the two objects never touch
        grown = tumor.copy()
        for ax in range(3):
            grown |= np.roll(tumor, 1, ax) | np.roll(tumor, -1, ax)
        if tumor.any() and lymph.any() and not (grown & lymph).any():
            break
    else:
        raise PhantomError("could not place non-overlapping ellipsoids in 100 tries")

    phases = rng.uniform(0, 2 * np.pi, size=3)
    freqs = rng.uniform(0.5, 1.5, size=3) * 2 * np.pi / np.array(dims)
    background = spec.background_amplitude * sum(
        np.cos(freqs[i] * grid[i] + phases[i]) for i in range(3)) / 3.0

    sigma_ct, sigma_pet = spec.noise_sigma
    ct = background + spec.ct_contrast * tumor + spec.lymph_ct_contrast * lymph
    ct = ct + rng.normal(0.0, sigma_ct, size=dims)
    bg = spec.pet_background
    pet = bg + bg * spec.pet_snr * tumor + bg * spec.pet_snr * spec.lymph_pet_uptake * lymph
    pet = pet + rng.normal(0.0, sigma_pet, size=dims)

    labels = np.zeros(dims, dtype=np.uint8)
    labels[tumor] = 1
    labels[lymph] = 2
    ct = np.clip(ct, -1.0, 1.0).astype(np.float32)[None]
    pet = np.clip(pet, 0.0, 1.0).astype(np.float32)[None]
    return ct, pet, labels


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentConfig:
    crop_size: int = 16  # 96 at full scale
    p_crop: float = 0.5
    p_flip: float = 0.2
    p_rot90: float = 0.2


@dataclass
class AugmentParams:
    crop_origin: tuple | None
    flips: tuple  # (z, y, x) booleans
    rot_k: int  # 0 = not fired, else quarter turns in the x-y plane


def sample_augment(rng, config: AugmentConfig, dims) -> AugmentParams:
    s = config.crop_size
    if any(s > d for d in dims):
        raise ValueError(f"crop size {s} exceeds volume dims {tuple(dims)}")
    origin = None
    if rng.random() < config.p_crop:
        origin = tuple(int(rng.integers(0, d - s + 1)) for d in dims)
    flips = tuple(bool(rng.random() < config.p_flip) for _ in range(3))
    rot_k = int(rng.integers(1, 4)) if rng.random() < config.p_rot90 else 0
    return AugmentParams(origin, flips, rot_k)


def apply_augment(params: AugmentParams, arrays, crop_size):
    """Apply one spatial transform to every array; the last three axes are (z, y, x)."""
    out = []
    for a in arrays:
        if params.crop_origin is not None:
            z, y, x = params.crop_origin
            a = a[..., z:z + crop_size, y:y + crop_size, x:x + crop_size]
        for ax, flip in enumerate(params.flips):
            if flip:
                a = np.flip(a, axis=a.ndim - 3 + ax)
        if params.rot_k:
            a = np.rot90(a, k=params.rot_k, axes=(a.ndim - 2, a.ndim - 1))
        out.append(np.ascontiguousarray(a))
    return tuple(out)


def augment(ct, pet, labels, rng, config: AugmentConfig | None = None):
    config = config or AugmentConfig()
    params = sample_augment(rng, config, labels.shape)
    return apply_augment(params, (ct, pet, labels), config.crop_size)


def center_crop(arrays, size):
    out = []
    for a in arrays:
        dims = a.shape[-3:]
        if any(size > d for d in dims):
            raise ValueError(f"cannot crop {dims} to {size}")
        o = [(d - size) // 2 for d in dims]
        out.append(np.ascontiguousarray(a[..., o[0]:o[0] + size, o[1]:o[1] + size, o[2]:o[2] + size]))
    return tuple(out)


# ---------------------------------------------------------------------------
# PVOL file format


def write_volume(path, volume) -> None:
    """Write a (C, Z, Y, X) or (Z, Y, X) float32 / uint8 array."""
    v = np.asarray(volume)
    if v.dtype == np.float32:
        tag, payload = DTYPE_F32, v.astype("<f4")
    elif v.dtype == np.uint8:
        tag, payload = DTYPE_U8, v
    else:
        raise TypeError(f"unsupported volume dtype {v.dtype}")
    if v.ndim == 3:
        v = v[None]
    if v.ndim != 4:
        raise ValueError(f"volume must be 3D or 4D, got shape {v.shape}")
    c, dz, dy, dx = v.shape
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, VOLUME_VERSION, tag, c, dz, dy, dx))
        fh.write(np.ascontiguousarray(payload).tobytes())


def read_volume(path) -> np.ndarray:
    """Read a PVOL file into a (C, Z, Y, X) array of its stored dtype."""
    raw = Path(path).read_bytes()
    if len(raw) < HEADER.size:
        raise VolumeFormatError("truncated header", len(raw))
    magic, version, tag, c, dz, dy, dx = HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise VolumeFormatError(f"bad magic {magic!r}", 0)
    if version != VOLUME_VERSION:
        raise VolumeFormatError(f"unsupported version {version}", 4)
    if tag not in (DTYPE_F32, DTYPE_U8):
        raise VolumeFormatError(f"unknown dtype tag {tag}", 8)
    dtype = np.dtype("<f4") if tag == DTYPE_F32 else np.dtype(np.uint8)
    n = c * dz * dy * dx
    expected = HEADER.size + n * dtype.itemsize
    if len(raw) != expected:
        raise VolumeFormatError(f"payload length {len(raw) - HEADER.size} != expected {n * dtype.itemsize}",
                                min(len(raw), expected))
    arr = np.frombuffer(raw, dtype=dtype, offset=HEADER.size).reshape(c, dz, dy, dx)
    return arr.astype(np.float32 if tag == DTYPE_F32 else np.uint8)


def read_labels(path) -> np.ndarray:
    arr = read_volume(path)
    if arr.dtype != np.uint8 or arr.shape[0] != 1:
        raise VolumeFormatError("label files hold a single uint8 channel", 8)
    return arr[0]


# ---------------------------------------------------------------------------
# datasets


@dataclass
class SplitSpec:
    phantom: PhantomSpec
    n_train: int
    n_val: int


def default_splits(dims=(32, 32, 32)) -> dict:
    """Role-structured splits: CT-informative pretraining, PET-necessary adaptation, two shifted tasks."""
    return {
        "pretrain": SplitSpec(PhantomSpec(dims=dims, ct_contrast=0.5), 24, 6),
        "adapt": SplitSpec(PhantomSpec(dims=dims, ct_contrast=0.0, pet_snr=5.0), 16, 6),
        "task1": SplitSpec(PhantomSpec(dims=dims, ct_contrast=0.0, pet_snr=5.0, noise_sigma=(0.08, 0.08),
                                       tumor_radius=(3.5, 5.5)), 8, 4),
        "task2": SplitSpec(PhantomSpec(dims=dims, ct_contrast=0.0, pet_snr=4.0, noise_sigma=(0.04, 0.06),
                                       tumor_radius=(2.5, 4.0), lymph_radius=(3.0, 4.5)), 6, 3),
    }


def split_seed(seed: int, split: str) -> int:
    return int(seed) + 100_000 * (SPLITS.index(split) + 1)


@dataclass
class Sample:
    id: str
    split: str
    subset: str
    ct: np.ndarray = field(repr=False)
    pet: np.ndarray = field(repr=False)
    labels: np.ndarray = field(repr=False)


def generate_split(split: str, spec: SplitSpec, seed: int) -> list[Sample]:
    base = split_seed(seed, split)
    out = []
    for i in range(spec.n_train + spec.n_val):
        ps = PhantomSpec(**{**asdict(spec.phantom), "seed": base + i})
        ct, pet, labels = generate_phantom(ps)
        subset = "train" if i < spec.n_train else "val"
        out.append(Sample(f"{split}_{i:03d}", split, subset, ct, pet, labels))
    return out


def write_dataset(out_dir, splits: dict, seed: int) -> Path:
    """Generate every split, write PVOL files and ``manifest.json``; return the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, spec in splits.items():
        for s in generate_split(name, spec, seed):
            files = {}
            for key, arr in (("ct", s.ct), ("pet", s.pet), ("labels", s.labels)):
                rel = f"{s.id}_{key}.pvol"
                write_volume(out_dir / rel, arr)
                files[key] = rel
            entries.append({"id": s.id, "split": name, "subset": s.subset, **files})
    manifest = {"version": 1, "seed": seed, "splits": {k: asdict(v) for k, v in splits.items()},
                "samples": entries}
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path


def load_dataset(manifest_path, split: str, subset: str | None = None) -> list[Sample]:
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    root = manifest_path.parent
    out = []
    for e in manifest["samples"]:
        if e["split"] != split or (subset is not None and e["subset"] != subset):
            continue
        out.append(Sample(e["id"], e["split"], e["subset"], read_volume(root / e["ct"]),
                          read_volume(root / e["pet"]), read_labels(root / e["labels"])))
    if not out:
        raise KeyError(f"no samples for split={split!r} subset={subset!r} in {manifest_path}")
    return out
