"""Synthetic tampered-image data.

Images are procedural multi-octave value-noise textures. A forged sample
pastes an irregular region (rectangle, ellipse, or star polygon) either
from a second texture (splice) or from a shifted copy of the same image
(copy-move), alpha-blended at the boundary; the binary mask marks the
pasted pixels. Also: the augmentation set (flips, blur, blockwise-DCT
compression, noise), PNG image/mask I/O, and the dataset manifest.
"""

from __future__ import annotations

import dataclasses
import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image

from . import tensor as T
from .tensor import Tensor

KINDS = ("splice", "copy_move", "pristine")
KIND_WEIGHTS = (0.6, 0.3, 0.1)
AUG_OPS = ("hflip", "vflip", "gaussian_blur", "jpeg_like_compression", "gaussian_noise")

# foreground fraction band for generated masks
FG_MIN = 0.02
FG_MAX = 0.40


@dataclasses.dataclass
class SampleRecord:
    """One image with its tamper mask and provenance metadata."""

    image: np.ndarray  # (H, W, 3) in [0, 1]
    mask: np.ndarray   # (H, W) binary
    meta: dict

    def __post_init__(self):
        if self.image.shape[:2] != self.mask.shape:
            raise ValueError(
                f"sample: image {self.image.shape} vs mask {self.mask.shape}"
            )


# ---------------------------------------------------------------------------
# texture and region synthesis


def _texture(rng: np.random.Generator, h: int, w: int,
             scale: float = 1.0) -> np.ndarray:
    """Smooth random RGB field: bilinearly upsampled noise octaves.

    ``scale`` multiplies the octave frequencies, so two textures with
    different scales differ in graininess, not just color.
    """
    field = np.zeros((h, w, 3))
    total = 0.0
    for cells, amp in ((3, 1.0), (7, 0.5), (15, 0.25), (31, 0.18)):
        cells = max(1, round(cells * scale))
        grid = rng.uniform(size=(1, cells + 1, cells + 1, 3))
        field += amp * T.upsample_bilinear(Tensor(grid), size=(h, w)).data[0]
        total += amp
    field /= total
    lo, hi = field.min(), field.max()
    field = (field - lo) / max(hi - lo, 1e-6)
    dark = rng.uniform(0.05, 0.3, size=3)
    bright = rng.uniform(0.7, 0.95, size=3)
    base = dark + (bright - dark) * field
    # pixel-level sensor grain; resampled pastes lose part of it
    grain = rng.uniform(0.06, 0.10)
    return np.clip(base + rng.normal(0.0, grain, (h, w, 3)), 0.0, 1.0)


def _region_mask(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Binary region with foreground fraction inside the configured band."""
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(50):
        frac = rng.uniform(0.08, 0.35)
        area = frac * h * w
        shape = rng.choice(("rectangle", "ellipse", "polygon"))
        cy = rng.uniform(0.2 * h, 0.8 * h)
        cx = rng.uniform(0.2 * w, 0.8 * w)
        if shape == "rectangle":
            aspect = rng.uniform(0.5, 2.0)
            rh = np.sqrt(area * aspect) / 2.0
            rw = np.sqrt(area / aspect) / 2.0
            mask = (np.abs(yy - cy) <= rh) & (np.abs(xx - cx) <= rw)
        elif shape == "ellipse":
            aspect = rng.uniform(0.5, 2.0)
            ry = np.sqrt(area * aspect / np.pi)
            rx = np.sqrt(area / (aspect * np.pi))
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        else:
            k = rng.integers(5, 9)
            angles = np.sort(rng.uniform(0.0, 2.0 * np.pi, k))
            radii = np.sqrt(area / np.pi) * rng.uniform(0.6, 1.4, k)
            theta = np.arctan2(yy - cy, xx - cx) % (2.0 * np.pi)
            # wrap the boundary so the radius interpolates across 0/2pi
            ang = np.concatenate([angles - 2.0 * np.pi, angles, angles + 2.0 * np.pi])
            rad = np.concatenate([radii, radii, radii])
            bound = np.interp(theta, ang, rad)
            mask = np.hypot(yy - cy, xx - cx) <= bound
        got = mask.mean()
        if FG_MIN <= got <= FG_MAX:
            return mask.astype(np.float64)
    raise RuntimeError("region sampling failed to land in the foreground band")


def _gauss_kernel(sigma: float) -> np.ndarray:
    r = max(1, int(np.ceil(3.0 * sigma)))
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _blur_axis(x: np.ndarray, k: np.ndarray, axis: int) -> np.ndarray:
    r = len(k) // 2
    moved = np.moveaxis(x, axis, -1)
    pad = [(0, 0)] * (moved.ndim - 1) + [(r, r)]
    padded = np.pad(moved, pad, mode="reflect")
    out = sliding_window_view(padded, len(k), axis=-1) @ k
    return np.moveaxis(out, -1, axis)


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable gaussian filter with reflective borders."""
    k = _gauss_kernel(sigma)
    return _blur_axis(_blur_axis(image, k, 0), k, 1)


def _feather(mask: np.ndarray) -> np.ndarray:
    """Blend weights: soft inside the region edge, exactly zero outside."""
    return gaussian_blur(mask, 0.5) * mask


def synth_generate(seed: int, count: int, size: int) -> list:
    """Deterministic stream of synthetic samples at ``size`` x ``size``."""
    if size % 32:
        raise ValueError(f"synth_generate: size {size} must be divisible by 32")
    if count < 1:
        raise ValueError(f"synth_generate: count must be >= 1, got {count}")
    records = []
    for index in range(count):
        rng = np.random.default_rng(np.random.SeedSequence((seed, index)))
        kind = rng.choice(KINDS, p=KIND_WEIGHTS)
        image = _texture(rng, size, size)
        meta = {"seed": seed, "index": index, "kind": str(kind)}
        if kind == "pristine":
            mask = np.zeros((size, size))
        else:
            mask = _region_mask(rng, size, size)
            # pasted content never matches the scene exposure exactly
            tone = 1.0 + float(rng.choice((-1.0, 1.0))) * rng.uniform(0.15, 0.35)
            if kind == "splice":
                # donor comes from other imagery, so its graininess differs
                donor_scale = float(rng.choice((0.45, 2.2)))
                donor = _texture(rng, size, size, scale=donor_scale)
                meta["source"] = "donor_texture"
                meta["donor_scale"] = donor_scale
            else:
                dy = int(rng.integers(size // 4, 3 * size // 4))
                dx = int(rng.integers(size // 4, 3 * size // 4))
                donor = np.roll(image, (dy, dx), axis=(0, 1))
                meta["source"] = f"self_shift_{dy}_{dx}"
            # pasting resamples the donor, which softens its fine texture
            donor = np.clip(gaussian_blur(donor, 1.2) * tone, 0.0, 1.0)
            meta["tone"] = tone
            alpha = _feather(mask)[..., None]
            image = (1.0 - alpha) * image + alpha * donor
        records.append(SampleRecord(image=image, mask=mask, meta=meta))
    return records


# ---------------------------------------------------------------------------
# augmentations


def hflip(image: np.ndarray, mask: np.ndarray):
    return image[:, ::-1].copy(), mask[:, ::-1].copy()


def vflip(image: np.ndarray, mask: np.ndarray):
    return image[::-1].copy(), mask[::-1].copy()


def gaussian_noise(image: np.ndarray, sigma: float, rng: np.random.Generator):
    return np.clip(image + rng.normal(0.0, sigma, image.shape), 0.0, 1.0)


def _dct_matrix() -> np.ndarray:
    n = np.arange(8)
    m = np.cos(np.pi * (2.0 * n[None, :] + 1.0) * n[:, None] / 16.0)
    m *= np.sqrt(2.0 / 8.0)
    m[0] = np.sqrt(1.0 / 8.0)
    return m

_DCT8 = _dct_matrix()

# standard luminance quantization steps, applied to every channel
_QUANT = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)


def jpeg_like_compression(image: np.ndarray, quality: int) -> np.ndarray:
    """8x8 blockwise DCT quantization at an integer quality in [1, 100]."""
    if not 1 <= quality <= 100:
        raise ValueError(f"jpeg_like_compression: quality {quality} out of [1, 100]")
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    steps = np.clip(np.floor((_QUANT * scale + 50.0) / 100.0), 1.0, None)
    h, w = image.shape[:2]
    ph, pw = (-h) % 8, (-w) % 8
    x = np.pad(image, ((0, ph), (0, pw), (0, 0)), mode="edge")
    x = x * 255.0 - 128.0
    blocks = x.reshape((h + ph) // 8, 8, (w + pw) // 8, 8, 3)
    coef = np.einsum("ab,ibjcC,dc->iajdC", _DCT8, blocks, _DCT8)
    coef = np.round(coef / steps[:, None, :, None]) * steps[:, None, :, None]
    back = np.einsum("ba,ibjcC,cd->iajdC", _DCT8, coef, _DCT8)
    out = (back.reshape(h + ph, w + pw, 3) + 128.0) / 255.0
    return np.clip(out[:h, :w], 0.0, 1.0)


def augment(record: SampleRecord, ops, seed: int) -> SampleRecord:
    """Apply each listed op with probability 1/2, deterministically from
    ``seed``. Flips move image and mask together; the photometric ops touch
    the image only."""
    ops = tuple(ops)
    for op in ops:
        if op not in AUG_OPS:
            raise ValueError(f"augment: unknown op {op!r} (choose from {AUG_OPS})")
    rng = np.random.default_rng(np.random.SeedSequence((seed, record.meta.get("index", 0))))
    image, mask = record.image.copy(), record.mask.copy()
    applied = []
    for op in ops:
        if rng.uniform() >= 0.5:
            continue
        applied.append(op)
        if op == "hflip":
            image, mask = hflip(image, mask)
        elif op == "vflip":
            image, mask = vflip(image, mask)
        elif op == "gaussian_blur":
            image = gaussian_blur(image, sigma=float(rng.uniform(0.5, 1.5)))
        elif op == "jpeg_like_compression":
            image = jpeg_like_compression(image, quality=int(rng.integers(30, 91)))
        else:
            image = gaussian_noise(image, sigma=float(rng.uniform(0.005, 0.02)), rng=rng)
    meta = dict(record.meta, augmented=tuple(applied))
    return SampleRecord(image=image, mask=mask, meta=meta)


# ---------------------------------------------------------------------------
# file I/O and the manifest


def save_image(path: str, image: np.ndarray):
    arr = np.clip(image * 255.0, 0.0, 255.0).round().astype(np.uint8)
    Image.fromarray(arr, "RGB").save(path)


def load_image(path: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except Exception as e:
        raise OSError(f"cannot decode image {path}: {e}") from None
    return arr / 255.0


def save_mask(path: str, mask: np.ndarray):
    arr = (np.asarray(mask) > 0.5).astype(np.uint8) * 255
    Image.fromarray(arr, "L").save(path)


def load_mask(path: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"))
    except Exception as e:
        raise OSError(f"cannot decode mask {path}: {e}") from None
    return (arr > 127).astype(np.float64)


@dataclasses.dataclass
class Manifest:
    """Ordered (image path, mask path, split) entries, one tab-separated
    line per sample, paths relative to the dataset root."""

    entries: list

    def split(self, tag: str) -> list:
        return [e for e in self.entries if e[2] == tag]

    def save(self, path: str):
        with open(path, "w", encoding="utf-8") as f:
            for img, mask, tag in self.entries:
                f.write(f"{img}\t{mask}\t{tag}\n")

    @classmethod
    def load(cls, path: str) -> "Manifest":
        entries = []
        with open(path, encoding="utf-8") as f:
            for line_no, line in enumerate(f, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 3:
                    raise ValueError(f"{path}:{line_no}: expected 3 tab-separated fields")
                entries.append(tuple(parts))
        return cls(entries=entries)

    def validate(self, root: str):
        """Referenced files must exist; no image may sit in two splits."""
        seen = {}
        for img, mask, tag in self.entries:
            for rel in (img, mask):
                if not os.path.exists(os.path.join(root, rel)):
                    raise FileNotFoundError(os.path.join(root, rel))
            if seen.setdefault(img, tag) != tag:
                raise ValueError(f"manifest: {img} appears in splits "
                                 f"{seen[img]!r} and {tag!r}")


def write_dataset(records, root: str, tag: str) -> Manifest:
    """Write samples under ``root`` as PNG pairs and return their manifest."""
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    os.makedirs(os.path.join(root, "masks"), exist_ok=True)
    entries = []
    for i, rec in enumerate(records):
        img_rel = os.path.join("images", f"{tag}_{i:05d}.png")
        mask_rel = os.path.join("masks", f"{tag}_{i:05d}.png")
        save_image(os.path.join(root, img_rel), rec.image)
        save_mask(os.path.join(root, mask_rel), rec.mask)
        entries.append((img_rel, mask_rel, tag))
    return Manifest(entries=entries)


def load_pairs(manifest: Manifest, root: str, tag: str) -> list:
    """Decode one split back into (image, mask) arrays, manifest order."""
    out = []
    for img_rel, mask_rel, _ in manifest.split(tag):
        out.append((load_image(os.path.join(root, img_rel)),
                    load_mask(os.path.join(root, mask_rel))))
    return out
