"""Synthetic 3D cases, normalisation, cropping, the native volume format and splits."""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DataError, FormatError, NumericError, ShapeError

HEADER_SIZE = 64
MAGIC = "UGV1"
_DTYPES = {"f4": np.dtype("<f4"), "u1": np.dtype("u1")}


def _f32(values) -> tuple:
    return tuple(float(np.float32(v)) for v in values)


@dataclass
class Case:
    volume: np.ndarray
    label: np.ndarray | None
    id: str
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.spacing = _f32(self.spacing)
        if self.label is not None:
            if self.label.shape != self.volume.shape:
                raise ShapeError(f"{self.id}: label {self.label.shape} vs volume {self.volume.shape}")
            if self.label.size and self.label.max() > 1:
                raise DataError(f"{self.id}: label is not binary")


@dataclass
class SyntheticSpec:
    n_volumes: int = 80
    volume_shape: tuple = (48, 48, 24)
    object: str = "ellipsoid"
    radius_range: tuple = (5.0, 9.0)  # mm
    noise_sigma: float = 0.6
    intensity_fg: float = 1.0
    intensity_bg: float = 0.0
    spacing: tuple = (1.0, 1.0, 1.0)
    seed: int = 0
    id_prefix: str = "case"
    smooth_sigma: float = 1.0  # voxels; blur of the noise field, 0 disables

    def validate(self) -> "SyntheticSpec":
        if self.n_volumes < 1:
            raise ConfigurationError("n_volumes must be >= 1")
        if self.object not in ("sphere", "ellipsoid"):
            raise ConfigurationError(f"unknown object {self.object!r}")
        lo, hi = self.radius_range
        if not 0 < lo <= hi:
            raise ConfigurationError(f"bad radius_range {self.radius_range}")
        for n, s in zip(self.volume_shape, self.spacing):
            if hi / s + 2 > (n - 1) / 2:
                raise ConfigurationError(
                    f"radius {hi} mm does not fit in {n} voxels of {s} mm with a 2-voxel margin")
        return self


def generate_synthetic(spec: SyntheticSpec) -> list[Case]:
    from scipy import ndimage

    spec.validate()
    rng = np.random.default_rng(spec.seed)
    shape = tuple(int(n) for n in spec.volume_shape)
    sp = np.asarray(spec.spacing, dtype=float)
    grids = np.meshgrid(*[np.arange(n) for n in shape], indexing="ij")
    cases = []
    for i in range(spec.n_volumes):
        if spec.object == "sphere":
            radii = np.full(3, rng.uniform(*spec.radius_range))
            rot = np.eye(3)
        else:
            radii = rng.uniform(*spec.radius_range, size=3)
            rot, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        margin = radii.max() / sp + 2
        center = np.array([rng.uniform(m, n - 1 - m) for m, n in zip(margin, shape)])
        offs = np.stack([(g - c) * s for g, c, s in zip(grids, center, sp)], axis=-1)
        local = offs @ rot
        label = ((local / radii) ** 2).sum(-1) <= 1.0
        if not label.any():
            raise ConfigurationError(f"case {i}: object voxelised to nothing")
        vol = np.where(label, spec.intensity_fg, spec.intensity_bg).astype(np.float64)
        if spec.noise_sigma > 0:
            noise = rng.normal(0.0, 1.0, size=shape)
            if spec.smooth_sigma > 0:
                noise = ndimage.gaussian_filter(noise, spec.smooth_sigma)
                noise /= noise.std()
            vol = vol + spec.noise_sigma * noise
        cases.append(Case(vol.astype(np.float32), label.astype(np.uint8),
                          f"{spec.id_prefix}_{i:03d}", spec.spacing))
    return cases


def normalize(v: np.ndarray) -> np.ndarray:
    v64 = np.asarray(v, dtype=np.float64)
    std = v64.std()
    if not np.isfinite(std) or std < 1e-12:
        raise NumericError("cannot normalise a constant volume")
    return ((v64 - v64.mean()) / std).astype(np.float32)


def crop_slices(shape, patch, rng: np.random.Generator, label=None, fg_bias: float = 0.0):
    shape, patch = tuple(shape), tuple(int(p) for p in patch)
    if any(p > s for p, s in zip(patch, shape)):
        raise ShapeError(f"patch {patch} larger than volume {shape}")
    want_fg = rng.random() < fg_bias
    if want_fg and label is not None and label.any():
        fg = np.argwhere(label)
        anchor = fg[rng.integers(len(fg))]
        starts = [rng.integers(max(0, a - p + 1), min(a, s - p) + 1) for a, p, s in zip(anchor, patch, shape)]
    else:
        starts = [rng.integers(0, s - p + 1) for p, s in zip(patch, shape)]
    return tuple(slice(int(st), int(st) + p) for st, p in zip(starts, patch))


def random_crop(case: Case, patch, seed: int, fg_bias: float = 0.5) -> Case:
    rng = np.random.default_rng(seed)
    sl = crop_slices(case.volume.shape, patch, rng, case.label, fg_bias)
    label = None if case.label is None else case.label[sl]
    return Case(case.volume[sl], label, case.id, case.spacing)


def split_labeled(ids, labeled_fraction: float, seed: int):
    """Seeded permutation split -> (labeled_ids, unlabeled_ids), each in original id order."""
    if not 0 < labeled_fraction <= 1:
        raise ConfigurationError(f"labeled_fraction must lie in (0, 1], got {labeled_fraction}")
    ids = list(ids)
    n_lab = max(1, int(round(labeled_fraction * len(ids))))
    perm = np.random.default_rng(seed).permutation(len(ids))
    chosen = set(perm[:n_lab].tolist())
    lab = [x for i, x in enumerate(ids) if i in chosen]
    unl = [x for i, x in enumerate(ids) if i not in chosen]
    return lab, unl


# -- native volume format --------------------------------------------------
#
# A file is one or two blocks. Each block is a 64-byte ASCII header
#   "UGV1 <dtype> <D> <H> <W> <sx> <sy> <sz> <more>"
# space padded and terminated by "\n", followed by the little-endian payload
# (C order). dtype is f4 (image) or u1 (label); <more> is "L" when a label
# block follows the image block, else "-". Spacing is stored with 9
# significant digits, which round-trips float32 exactly. The case id is the
# file stem.


def _header(dtype: str, shape, spacing, more: str) -> bytes:
    text = " ".join([MAGIC, dtype, *map(str, shape), *(f"{s:.9g}" for s in spacing), more])
    if len(text) > HEADER_SIZE - 1:
        raise FormatError("header too long")
    return (text.ljust(HEADER_SIZE - 1) + "\n").encode("ascii")


def _write_block(fh, arr: np.ndarray, dtype: str, spacing, more: str):
    fh.write(_header(dtype, arr.shape, spacing, more))
    fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes())


def save_volume(case: Case, path) -> None:
    if case.volume.ndim != 3:
        raise ShapeError("volume must be 3D")
    with open(path, "wb") as fh:
        _write_block(fh, case.volume, "f4", case.spacing, "L" if case.label is not None else "-")
        if case.label is not None:
            _write_block(fh, case.label, "u1", case.spacing, "-")


def _read_block(buf: bytes, offset: int):
    raw = buf[offset:offset + HEADER_SIZE]
    if len(raw) < HEADER_SIZE:
        raise FormatError("truncated header", offset)
    try:
        parts = raw.decode("ascii").split()
    except UnicodeDecodeError:
        raise FormatError("header is not ASCII", offset) from None
    if len(parts) != 9 or parts[0] != MAGIC or parts[1] not in _DTYPES or parts[8] not in ("L", "-"):
        raise FormatError(f"malformed header {raw!r}", offset)
    try:
        shape = tuple(int(p) for p in parts[2:5])
        spacing = tuple(float(p) for p in parts[5:8])
    except ValueError:
        raise FormatError(f"malformed header fields {parts}", offset) from None
    dt = _DTYPES[parts[1]]
    nbytes = int(np.prod(shape)) * dt.itemsize
    start = offset + HEADER_SIZE
    if len(buf) < start + nbytes:
        raise FormatError(f"payload needs {nbytes} bytes, only {len(buf) - start} present", start)
    arr = np.frombuffer(buf, dtype=dt, count=int(np.prod(shape)), offset=start).reshape(shape).copy()
    return arr, spacing, parts[8] == "L", start + nbytes


def load_volume(path) -> Case:
    with open(path, "rb") as fh:
        buf = fh.read()
    vol, spacing, more, off = _read_block(buf, 0)
    label = None
    if more:
        label, sp2, _, off = _read_block(buf, off)
        if label.shape != vol.shape or sp2 != spacing:
            raise FormatError("label block does not match image block", HEADER_SIZE + vol.nbytes)
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes", off)
    cid = os.path.splitext(os.path.basename(path))[0]
    return Case(vol, label, cid, spacing)


@dataclass
class Dataset:
    labeled: list = field(default_factory=list)
    unlabeled: list = field(default_factory=list)
    test: list = field(default_factory=list)


def write_dataset(directory, train: list, test: list = ()) -> None:
    os.makedirs(directory, exist_ok=True)
    lines = []
    for tag, cases in (("train", train), ("test", test)):
        for c in cases:
            save_volume(c, os.path.join(directory, f"{c.id}.vol"))
            lines.append(f"{c.id} {tag}")
    with open(os.path.join(directory, "manifest.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_manifest(path) -> list[tuple[str, str]]:
    rows = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise FormatError(f"{path}:{n}: expected '<id> <tag>'")
            rows.append((parts[0], parts[1]))
    return rows


def read_dataset(directory) -> tuple[list, list]:
    """Returns (train_cases, test_cases) from a directory written by ``write_dataset``."""
    train, test = [], []
    for cid, tag in read_manifest(os.path.join(directory, "manifest.txt")):
        path = os.path.join(directory, f"{cid}.vol")
        if not os.path.exists(path):
            raise DataError(f"manifest lists {cid} but {path} is missing")
        (test if tag == "test" else train).append(load_volume(path))
    return train, test


def write_split_manifest(path, labeled_ids, unlabeled_ids, test_ids=()) -> None:
    with open(path, "w") as fh:
        for tag, ids in (("labeled", labeled_ids), ("unlabeled", unlabeled_ids), ("test", test_ids)):
            for i in ids:
                fh.write(f"{i} {tag}\n")


def prepare(train: list, test: list, labeled_fraction: float, split_seed: int) -> Dataset:
    """Normalise every volume and split the training cases."""
    norm = lambda c: Case(normalize(c.volume), c.label, c.id, c.spacing)
    lab_ids, _ = split_labeled([c.id for c in train], labeled_fraction, split_seed)
    lab_ids = set(lab_ids)
    ds = Dataset()
    for c in train:
        (ds.labeled if c.id in lab_ids else ds.unlabeled).append(norm(c))
    ds.test = [norm(c) for c in test]
    return ds
