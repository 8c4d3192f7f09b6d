"""RandAugmented CutPaste: synthetic defects from a few real ones.

A random subset of image transforms is applied to a real abnormal image
and its mask; the transformed defect region is cut along its bounding
box and hard-pasted into a normal image at a random offset.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from PIL import Image, ImageEnhance, ImageOps
from scipy import ndimage

# name -> (low, high) magnitude range; None for parameter-free transforms
TRANSFORM_RANGES: dict[str, tuple[float, float] | None] = {
    "AutoContrast": None,
    "Equalize": None,
    "Rotate": (-30.0, 30.0),  # degrees
    "Posterize": (4, 8),  # bits kept
    "Solarize": (0.0, 255.0),  # threshold
    "Brightness": (0.1, 1.9),  # enhancement factor
    "Sharpness": (0.1, 1.9),
    "Translate": (-0.1, 0.1),  # fraction of side, per axis (rows, cols)
    "Shear": (-0.3, 0.3),
}
TRANSFORMS = tuple(TRANSFORM_RANGES)
GEOMETRIC = {"Rotate", "Translate", "Shear"}
MAX_PASTE_ATTEMPTS = 10


class AugmentError(RuntimeError):
    pass


@dataclass
class RasterImage:
    pixels: np.ndarray  # (H, W, C) uint8, C in {1, 3}
    id: str = ""

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[2] not in (1, 3) or min(px.shape[:2]) < 1:
            raise ValueError(f"expected H x W x C image with C in (1, 3), got {px.shape}")
        if px.dtype != np.uint8:
            raise ValueError("pixels must be uint8")
        self.pixels = px


@dataclass
class AnomalyRegion:
    mask: np.ndarray  # (H, W) bool

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)

    @property
    def boxes(self) -> list[tuple[int, int, int, int]]:
        """``(r0, c0, r1, c1)`` half-open boxes, one per 8-connected component."""
        lab, _ = ndimage.label(self.mask, structure=np.ones((3, 3), dtype=bool))
        return [(s[0].start, s[1].start, s[0].stop, s[1].stop) for s in ndimage.find_objects(lab)]


@dataclass
class TransformSpec:
    name: str
    magnitude: float | tuple[float, float] = 0.0
    probability: float = 1.0

    def __post_init__(self):
        if self.name not in TRANSFORM_RANGES:
            raise ValueError(f"unknown transform {self.name!r}")
        if not 0 <= self.probability <= 1:
            raise ValueError("probability must lie in [0, 1]")
        rng_ = TRANSFORM_RANGES[self.name]
        if rng_ is None:
            return
        lo, hi = rng_
        mags = self.magnitude if isinstance(self.magnitude, tuple) else (self.magnitude,)
        for m in mags:
            if not lo <= m <= hi:
                raise ValueError(f"{self.name} magnitude {m} outside [{lo}, {hi}]")


@dataclass
class AugmentPlan:
    subset: list[TransformSpec]
    seed: int
    paste_location: tuple[int, int] | str = "random"


def sample_spec(name: str, rng: np.random.Generator, probability: float = 1.0) -> TransformSpec:
    r = TRANSFORM_RANGES[name]
    if r is None:
        mag: float | tuple[float, float] = 0.0
    elif name == "Translate":
        mag = (float(rng.uniform(*r)), float(rng.uniform(*r)))
    elif name == "Posterize":
        mag = float(rng.integers(int(r[0]), int(r[1]) + 1))
    else:
        mag = float(rng.uniform(*r))
    return TransformSpec(name, mag, probability)


def _to_pil(px: np.ndarray) -> Image.Image:
    return Image.fromarray(px[:, :, 0] if px.shape[2] == 1 else px)


def _from_pil(im: Image.Image, channels: int) -> np.ndarray:
    arr = np.asarray(im, dtype=np.uint8)
    return arr[:, :, None].copy() if channels == 1 else arr.copy()


def _affine_matrix(t: TransformSpec, H: int, W: int) -> np.ndarray:
    """Output->input homogeneous map in (row, col) coordinates."""
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    if t.name == "Rotate":
        a = math.radians(float(t.magnitude))
        ca, sa = math.cos(a), math.sin(a)
        lin = np.array([[ca, -sa], [sa, ca]])
        off = np.zeros(2)
    elif t.name == "Shear":
        lin = np.array([[1.0, 0.0], [float(t.magnitude), 1.0]])  # col' = col + k*row
        off = np.zeros(2)
    else:
        dr, dc = t.magnitude if isinstance(t.magnitude, tuple) else (t.magnitude, 0.0)
        lin = np.eye(2)
        off = np.array([dr * H, dc * W])
    # forward: p' = lin (p - ctr) + ctr + off  =>  p = lin^-1 (p' - ctr - off) + ctr
    inv = np.linalg.inv(lin)
    ctr = np.array([cy, cx])
    mat = np.eye(3)
    mat[:2, :2] = inv
    mat[:2, 2] = ctr - inv @ (ctr + off)
    return mat


def apply_transform(img: RasterImage, region: AnomalyRegion, t: TransformSpec,
                    rng: np.random.Generator | None = None):
    """Apply one transform; geometric ones move the mask with the pixels."""
    px = img.pixels
    H, W, C = px.shape
    if t.name not in TRANSFORM_RANGES:
        raise ValueError(f"unknown transform {t.name!r}")
    if t.name in GEOMETRIC:
        mat = _affine_matrix(t, H, W)
        if np.allclose(mat, np.eye(3)):
            return RasterImage(px.copy(), img.id), AnomalyRegion(region.mask.copy())
        out = np.empty_like(px)
        for ch in range(C):
            warped = ndimage.affine_transform(px[:, :, ch].astype(np.float64), mat, order=1,
                                              mode="nearest")
            out[:, :, ch] = np.clip(np.rint(warped), 0, 255).astype(np.uint8)
        mask = ndimage.affine_transform(region.mask.astype(np.uint8), mat, order=0,
                                        mode="nearest").astype(bool)
        return RasterImage(out, img.id), AnomalyRegion(mask)

    pil = _to_pil(px)
    if t.name == "AutoContrast":
        pil = ImageOps.autocontrast(pil)
    elif t.name == "Equalize":
        pil = ImageOps.equalize(pil)
    elif t.name == "Posterize":
        pil = ImageOps.posterize(pil, int(t.magnitude))
    elif t.name == "Solarize":
        pil = ImageOps.solarize(pil, int(round(float(t.magnitude))))
    elif t.name == "Brightness":
        pil = ImageEnhance.Brightness(pil).enhance(float(t.magnitude))
    elif t.name == "Sharpness":
        pil = ImageEnhance.Sharpness(pil).enhance(float(t.magnitude))
    return RasterImage(_from_pil(pil, C), img.id), AnomalyRegion(region.mask.copy())


def _bbox(mask: np.ndarray):
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return None
    return rows[0], cols[0], rows[-1] + 1, cols[-1] + 1


def paste(normal: RasterImage, source: RasterImage, region: AnomalyRegion, at: tuple[int, int]):
    """Hard-paste the bounding box of ``region`` from ``source`` into ``normal`` at ``at``."""
    box = _bbox(region.mask)
    if box is None:
        raise AugmentError("anomaly region is empty")
    r0, c0, r1, c1 = box
    h, w = r1 - r0, c1 - c0
    H, W = normal.pixels.shape[:2]
    r, c = at
    if r < 0 or c < 0 or r + h > H or c + w > W:
        raise AugmentError(f"region {h}x{w} does not fit at {at} in {H}x{W}")
    patch_mask = region.mask[r0:r1, c0:c1]
    out = normal.pixels.copy()
    view = out[r:r + h, c:c + w]
    view[patch_mask] = source.pixels[r0:r1, c0:c1][patch_mask]
    mask = np.zeros((H, W), dtype=bool)
    mask[r:r + h, c:c + w] = patch_mask
    return RasterImage(out, normal.id), AnomalyRegion(mask)


def racp_generate(normal: RasterImage, abnormal: RasterImage, region: AnomalyRegion,
                  S: int = 3, seed: int = 0, *, paste_at: tuple[int, int] | None = None,
                  probabilities: dict[str, float] | None = None, trace: dict | None = None):
    """One synthetic anomaly: transform, cut, paste.  Pure function of its arguments.

    ``trace``, when given, receives the applied transforms, the transformed
    abnormal image and region, and the paste offset.
    """
    if normal.pixels.shape != abnormal.pixels.shape:
        raise ValueError("normal and abnormal images must share dimensions")
    if region.mask.shape != abnormal.pixels.shape[:2]:
        raise ValueError("mask and abnormal image differ in size")
    if not region.mask.any():
        raise ValueError("anomaly region is empty")
    if not 0 <= S <= len(TRANSFORMS):
        raise ValueError(f"S must be in [0, {len(TRANSFORMS)}]")
    probabilities = probabilities or {}
    rng = np.random.default_rng(seed)
    H, W = normal.pixels.shape[:2]
    for _ in range(MAX_PASTE_ATTEMPTS):
        names = [TRANSFORMS[i] for i in rng.choice(len(TRANSFORMS), size=S, replace=False)]
        img, reg = abnormal, region
        applied = []
        for name in names:
            spec = sample_spec(name, rng, probabilities.get(name, 1.0))
            if rng.random() < spec.probability:
                img, reg = apply_transform(img, reg, spec, rng)
                applied.append(spec)
        box = _bbox(reg.mask)
        if box is None:
            continue
        h, w = box[2] - box[0], box[3] - box[1]
        if h > H or w > W:
            continue
        at = paste_at if paste_at is not None else (int(rng.integers(0, H - h + 1)),
                                                     int(rng.integers(0, W - w + 1)))
        composite, mask = paste(normal, img, reg, at)
        if trace is not None:
            trace.update(transforms=applied, transformed=img, region=reg, at=at)
        composite.id = f"{normal.id}+{abnormal.id}#{seed}"
        return composite, mask
    raise AugmentError(f"could not place a transformed region after {MAX_PASTE_ATTEMPTS} attempts")
