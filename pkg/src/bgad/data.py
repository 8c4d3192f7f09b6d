"""Feature files, manifests and synthetic datasets.

FBT layout (little-endian throughout)::

    b"FBT1" | u32 rank | rank x u32 dims | prod(dims) x f32, row-major
"""

from __future__ import annotations

import csv
import hashlib
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .flow import f32_snap

MAGIC = b"FBT1"
MAX_RANK = 8
MAX_ELEMENTS = 1 << 32

LEVEL_PREFIX = "feat_"
BASE_COLUMNS = ["id", "label", "image_path", "mask_path"]
LABELS = {"normal": 0, "abnormal": 1}


class FBTError(ValueError):
    code = "fbt"


class BadMagicError(FBTError):
    code = "bad-magic"


class TruncatedError(FBTError):
    code = "truncated"


class DimOverflowError(FBTError):
    code = "dim-overflow"


class TrailingDataError(FBTError):
    code = "trailing-data"


class ManifestError(ValueError):
    """Carries every problem found, one string per item."""

    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = problems


def atomic_write_bytes(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_fbt(array) -> bytes:
    arr = np.asarray(array)
    if arr.ndim > MAX_RANK:
        raise DimOverflowError(f"rank {arr.ndim} exceeds {MAX_RANK}")
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode_fbt(buf: bytes) -> np.ndarray:
    if buf[:4] != MAGIC[: len(buf)] or not buf:
        raise BadMagicError(f"bad magic {bytes(buf[:4])!r}")
    if len(buf) < 8:
        raise TruncatedError("header truncated")
    (rank,) = struct.unpack_from("<I", buf, 4)
    if rank > MAX_RANK:
        raise DimOverflowError(f"rank {rank} exceeds {MAX_RANK}")
    if len(buf) < 8 + 4 * rank:
        raise TruncatedError("dims truncated")
    dims = struct.unpack_from(f"<{rank}I", buf, 8)
    count = 1
    for dim in dims:
        count *= dim
        if count > MAX_ELEMENTS:
            raise DimOverflowError(f"dims {dims} overflow the element limit")
    offset = 8 + 4 * rank
    need = offset + 4 * count
    if len(buf) < need:
        raise TruncatedError(f"header declares {count} values, payload holds {(len(buf) - offset) // 4}")
    if len(buf) > need:
        raise TrailingDataError(f"{len(buf) - need} unexpected trailing bytes")
    return np.frombuffer(buf, dtype="<f4", count=count, offset=offset).reshape(dims).astype(np.float32)


def write_fbt(path, array) -> None:
    atomic_write_bytes(path, encode_fbt(array))


def read_fbt(path) -> np.ndarray:
    return decode_fbt(Path(path).read_bytes())


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im)
    return arr.copy()


def write_png(path, array) -> None:
    arr = np.asarray(array, dtype=np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    Image.fromarray(arr).save(tmp, format="PNG", optimize=False)
    os.replace(tmp, path)


def read_mask(path) -> np.ndarray:
    arr = read_png(path)
    if arr.ndim == 3:
        arr = arr[..., 0]
    return arr > 127


def write_mask(path, mask) -> None:
    write_png(path, np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8))


@dataclass
class SampleRecord:
    id: str
    label: str
    feature_paths: dict[str, str] = field(default_factory=dict)
    image_path: str | None = None
    mask_path: str | None = None

    @property
    def is_abnormal(self) -> bool:
        return self.label == "abnormal"


@dataclass
class Manifest:
    records: list[SampleRecord]
    split: str = "train"
    root: Path | None = None
    levels: list[str] = field(default_factory=list)

    def resolve(self, rel: str | None) -> Path | None:
        if not rel:
            return None
        p = Path(rel)
        return p if p.is_absolute() or self.root is None else self.root / p


def load_manifest(path, split: str = "train") -> Manifest:
    """Parse a manifest CSV; paths are relative to the manifest's directory."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [col for col in ("id", "label") if col not in header]
        if missing:
            raise ManifestError([f"missing column {col!r}" for col in missing])
        levels = [h[len(LEVEL_PREFIX):] for h in header if h.startswith(LEVEL_PREFIX)]
        records = []
        for row in reader:
            feats = {lvl: row[LEVEL_PREFIX + lvl] for lvl in levels if row.get(LEVEL_PREFIX + lvl)}
            records.append(SampleRecord(
                id=row["id"], label=row["label"], feature_paths=feats,
                image_path=row.get("image_path") or None, mask_path=row.get("mask_path") or None,
            ))
    return Manifest(records, split, path.parent, levels)


def write_manifest(path, manifest: Manifest) -> None:
    levels = manifest.levels or sorted({lvl for r in manifest.records for lvl in r.feature_paths})
    header = BASE_COLUMNS + [LEVEL_PREFIX + lvl for lvl in levels]
    lines = [",".join(header)]
    for r in manifest.records:
        cells = [r.id, r.label, r.image_path or "", r.mask_path or ""]
        cells += [r.feature_paths.get(lvl, "") for lvl in levels]
        lines.append(",".join(cells))
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))


def validate_manifest(manifest: Manifest, *, localization: bool = False,
                      need_features: bool = True, need_images: bool = False) -> None:
    """Raise :class:`ManifestError` listing every structural problem."""
    problems = []
    seen = set()
    for r in manifest.records:
        if r.id in seen:
            problems.append(f"duplicate id {r.id!r}")
        seen.add(r.id)
        if r.label not in LABELS:
            problems.append(f"record {r.id!r}: label {r.label!r} is not normal/abnormal")
        if need_features:
            for lvl in manifest.levels:
                if lvl not in r.feature_paths:
                    problems.append(f"record {r.id!r}: no feature file for level {lvl}")
            for lvl, rel in r.feature_paths.items():
                p = manifest.resolve(rel)
                if not p.is_file():
                    problems.append(f"record {r.id!r}: feature file {rel!r} not found")
        if need_images and not r.image_path:
            problems.append(f"record {r.id!r}: image_path required")
        for what in ("image_path", "mask_path"):
            rel = getattr(r, what)
            if rel and not manifest.resolve(rel).is_file():
                problems.append(f"record {r.id!r}: {what} {rel!r} not found")
        if localization and r.is_abnormal and not r.mask_path:
            problems.append(f"record {r.id!r}: abnormal record has no mask")
    if need_features and not manifest.levels:
        problems.append("manifest has no feat_* columns")
    if problems:
        raise ManifestError(problems)


@dataclass
class Sample:
    """One image's worth of features: ``features[level]`` is ``(C, H, W)``."""

    id: str
    label: int
    features: dict[str, np.ndarray]
    mask: np.ndarray | None = None  # (H_img, W_img) bool

    def image_shape(self) -> tuple[int, int]:
        if self.mask is not None:
            return tuple(self.mask.shape)
        finest = max(self.features.values(), key=lambda f: f.shape[1] * f.shape[2])
        return finest.shape[1], finest.shape[2]


@dataclass
class FeatureDataset:
    samples: list[Sample]

    @property
    def levels(self) -> list[str]:
        return list(self.samples[0].features) if self.samples else []

    def dims(self) -> dict[str, int]:
        return {lvl: f.shape[0] for lvl, f in self.samples[0].features.items()}

    def subset(self, label: int) -> "FeatureDataset":
        return FeatureDataset([s for s in self.samples if s.label == label])


def _as_chw(arr: np.ndarray) -> np.ndarray:
    if arr.ndim == 1:
        return arr.reshape(-1, 1, 1)
    if arr.ndim != 3:
        raise ValueError(f"feature tensor must be rank 1 or 3, got shape {arr.shape}")
    return arr


def load_dataset(manifest: Manifest, *, localization: bool = False) -> FeatureDataset:
    validate_manifest(manifest, localization=localization)
    samples = []
    for r in manifest.records:
        feats = {lvl: _as_chw(read_fbt(manifest.resolve(r.feature_paths[lvl])).astype(np.float64))
                 for lvl in manifest.levels}
        mask = read_mask(manifest.resolve(r.mask_path)) if r.mask_path else None
        samples.append(Sample(r.id, LABELS[r.label], feats, mask))
    return FeatureDataset(samples)


# -- synthetic data ---------------------------------------------------------

SYNTH_KINDS = ("gaussian-cluster", "ring", "two-moons")


def _draw_normal(kind: str, n: int, d: int, rng: np.random.Generator) -> np.ndarray:
    x = rng.standard_normal((n, d))
    if kind == "ring":
        theta = rng.uniform(0, 2 * np.pi, n)
        radius = 3.0 + 0.2 * rng.standard_normal(n)
        x[:, 0] = radius * np.cos(theta)
        x[:, 1] = radius * np.sin(theta)
    elif kind == "two-moons":
        t = rng.uniform(0, np.pi, n)
        upper = rng.random(n) < 0.5
        x[:, 0] = np.where(upper, np.cos(t), 1.0 - np.cos(t)) + 0.1 * rng.standard_normal(n)
        x[:, 1] = np.where(upper, np.sin(t), 0.5 - np.sin(t)) + 0.1 * rng.standard_normal(n)
    return x


def _draw_abnormal(kind: str, n: int, d: int, rng: np.random.Generator, shift: float) -> np.ndarray:
    x = rng.standard_normal((n, d))
    if kind == "gaussian-cluster":
        x[:, 0] += shift
    elif kind == "ring":
        # the hole of the ring
        x[:, :2] *= 0.3
    else:
        x[:, 0] = 0.5 + 0.1 * rng.standard_normal(n)
        x[:, 1] = 2.0 + 0.1 * rng.standard_normal(n)
    return x


def synth_dataset(kind: str, n_normal: int, n_abnormal: int, d: int, seed: int, *,
                  grid: tuple[int, int] | None = None, patch: int = 2, image_scale: int = 4,
                  level: str = "l0", shift: float = 6.0, prefix: str = "s") -> FeatureDataset:
    """Deterministic toy data standing in for extracted features.

    Without ``grid`` every sample is one ``d``-vector (a 1x1 map).  With
    ``grid=(H, W)`` every sample is a ``d x H x W`` map of normal draws;
    abnormal samples get a ``patch x patch`` block of abnormal draws and a
    mask at ``image_scale`` times the grid resolution.
    """
    if kind not in SYNTH_KINDS:
        raise ValueError(f"unknown kind {kind!r}; choose from {SYNTH_KINDS}")
    if d < 2:
        raise ValueError("d must be at least 2")
    if n_normal < 0 or n_abnormal < 0:
        raise ValueError("counts must be non-negative")
    rng = np.random.default_rng(seed)
    samples = []
    if grid is None:
        # f32-exact so in-memory data equals what FBT files reload
        xn = f32_snap(_draw_normal(kind, n_normal, d, rng))
        xa = f32_snap(_draw_abnormal(kind, n_abnormal, d, rng, shift))
        for i, v in enumerate(xn):
            samples.append(Sample(f"{prefix}n{i:05d}", 0, {level: v.reshape(d, 1, 1)}))
        for i, v in enumerate(xa):
            samples.append(Sample(f"{prefix}a{i:05d}", 1, {level: v.reshape(d, 1, 1)}))
        return FeatureDataset(samples)

    H, W = grid
    if patch > min(H, W):
        raise ValueError("patch larger than grid")
    for i in range(n_normal + n_abnormal):
        abnormal = i >= n_normal
        fmap = _draw_normal(kind, H * W, d, rng).T.reshape(d, H, W)
        mask = np.zeros((H * image_scale, W * image_scale), dtype=bool)
        if abnormal:
            r0 = int(rng.integers(0, H - patch + 1))
            c0 = int(rng.integers(0, W - patch + 1))
            fmap[:, r0:r0 + patch, c0:c0 + patch] = (
                _draw_abnormal(kind, patch * patch, d, rng, shift).T.reshape(d, patch, patch))
            mask[r0 * image_scale:(r0 + patch) * image_scale,
                 c0 * image_scale:(c0 + patch) * image_scale] = True
        sid = f"{prefix}{'a' if abnormal else 'n'}{i:05d}"
        samples.append(Sample(sid, int(abnormal), {level: f32_snap(fmap)}, mask))
    return FeatureDataset(samples)


def save_dataset(dataset: FeatureDataset, out_dir) -> Path:
    """Write FBT features, PNG masks and ``manifest.csv`` under ``out_dir``."""
    out_dir = Path(out_dir)
    records = []
    for s in dataset.samples:
        feats = {}
        for lvl, arr in s.features.items():
            rel = f"features/{s.id}_{lvl}.fbt"
            write_fbt(out_dir / rel, arr)
            feats[lvl] = rel
        mask_rel = None
        if s.mask is not None:
            mask_rel = f"masks/{s.id}.png"
            write_mask(out_dir / mask_rel, s.mask)
        records.append(SampleRecord(s.id, "abnormal" if s.label else "normal", feats, None, mask_rel))
    path = out_dir / "manifest.csv"
    write_manifest(path, Manifest(records, levels=dataset.levels))
    return path


def dataset_digest(dataset: FeatureDataset) -> str:
    h = hashlib.sha256()
    for s in dataset.samples:
        h.update(f"{s.id}:{s.label}".encode())
        for lvl, arr in s.features.items():
            h.update(lvl.encode())
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        if s.mask is not None:
            h.update(np.packbits(s.mask).tobytes())
    return h.hexdigest()
