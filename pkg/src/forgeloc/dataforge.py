"""Synthetic forgery data: procedural base images, three tamper generators
(splice, copy-move, removal), the resize conventions, PNG I/O, and a TSV
dataset manifest.

Base images are gradients plus smooth color blobs plus per-image sensor-style
noise whose strength differs from image to image; splicing therefore moves
content with a *different* high-frequency signature into the base, which is
exactly the inconsistency noise-residual features pick up.

Masks are single-channel float rasters with values in {0, 1}, 1 = tampered.
Images are channel-first (3, h, w) floats in [0, 1].
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Optional, Sequence

import cv2
import numpy as np
from PIL import Image

KINDS = ("splice", "copy_move", "removal")
FRACTION_MIN = 0.005
FRACTION_MAX = 0.5
MAX_ATTEMPTS = 10


@dataclass
class ForgerySample:
    image: np.ndarray      # (3, h, w) float32 in [0, 1]
    mask: np.ndarray       # (h, w) float32 in {0, 1}
    kind: str
    meta: Optional[dict] = None    # generator-specific placement details


# ---------------------------------------------------------------------------
# procedural bases

def generate_base(rng: np.random.Generator, size=(64, 64)) -> np.ndarray:
    """Random smooth image: linear gradients, soft blobs, additive noise."""
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    yy /= max(h - 1, 1)
    xx /= max(w - 1, 1)
    img = np.empty((3, h, w), dtype=np.float32)
    for c in range(3):
        gx, gy = rng.uniform(-0.5, 0.5, 2)
        img[c] = gx * xx + gy * yy + rng.uniform(0.2, 0.8)
    for _ in range(int(rng.integers(2, 5))):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        sig = rng.uniform(0.10, 0.30) * min(h, w)
        bump = np.exp(-((yy * (h - 1) - cy) ** 2 + (xx * (w - 1) - cx) ** 2)
                      / (2.0 * sig * sig))
        img += rng.uniform(-0.4, 0.4, (3, 1, 1)).astype(np.float32) * bump
    # per-image noise level: the camera-signature stand-in
    sigma = rng.uniform(0.01, 0.06)
    img += rng.normal(0.0, sigma, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# region sampling

def _fill_polygon(verts, h, w):
    """Rasterize a polygon by the crossing-number rule at pixel centers."""
    py, px = np.mgrid[0:h, 0:w].astype(np.float64)
    py += 0.5
    px += 0.5
    inside = np.zeros((h, w), dtype=bool)
    n = len(verts)
    for i in range(n):
        y1, x1 = verts[i]
        y2, x2 = verts[(i + 1) % n]
        if y1 == y2:
            continue
        crosses = ((y1 <= py) != (y2 <= py)) & \
            (px < x1 + (py - y1) * (x2 - x1) / (y2 - y1))
        inside ^= crosses
    return inside


def _star_polygon(rng, h, w):
    cy = rng.uniform(0.3, 0.7) * h
    cx = rng.uniform(0.3, 0.7) * w
    nverts = int(rng.integers(5, 10))
    angles = np.sort(rng.uniform(0.0, 2 * np.pi, nverts))
    radii = rng.uniform(0.08, 0.30, nverts) * min(h, w)
    ys = np.clip(cy + radii * np.sin(angles), 1, h - 2)
    xs = np.clip(cx + radii * np.cos(angles), 1, w - 2)
    return list(zip(ys, xs))


def _ellipse_mask(rng, h, w):
    cy = rng.uniform(0.3, 0.7) * h
    cx = rng.uniform(0.3, 0.7) * w
    a = rng.uniform(0.06, 0.32) * min(h, w)
    b = rng.uniform(0.06, 0.32) * min(h, w)
    theta = rng.uniform(0.0, np.pi)
    py, px = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = py + 0.5 - cy, px + 0.5 - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def random_region(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Binary region with tampered fraction in (0.005, 0.5); the one-pixel
    image border is always clear.  Raises after 10 degenerate attempts."""
    for _ in range(MAX_ATTEMPTS):
        if rng.random() < 0.5:
            mask = _fill_polygon(_star_polygon(rng, h, w), h, w)
        else:
            mask = _ellipse_mask(rng, h, w)
        mask[0, :] = mask[-1, :] = False
        mask[:, 0] = mask[:, -1] = False
        frac = mask.mean()
        if FRACTION_MIN < frac < FRACTION_MAX:
            return mask.astype(np.float32)
    raise ValueError(f"no usable tamper region after {MAX_ATTEMPTS} attempts")


# ---------------------------------------------------------------------------
# generators

def generate_splice(base: np.ndarray, donor: np.ndarray,
                    rng: np.random.Generator, feather: bool = False) -> ForgerySample:
    """Paste a random region of the donor onto the base."""
    if base.shape != donor.shape:
        raise ValueError(f"base {base.shape} and donor {donor.shape} differ")
    h, w = base.shape[1:]
    mask = random_region(rng, h, w)
    if feather:
        alpha = cv2.GaussianBlur(mask, (5, 5), 0)
        np.maximum(alpha, mask, out=alpha)     # keep the core fully donor
        image = alpha[None] * donor + (1.0 - alpha[None]) * base
    else:
        image = np.where(mask[None] > 0, donor, base)
    return ForgerySample(image.astype(np.float32), mask, "splice")


def generate_copy_move(base: np.ndarray, rng: np.random.Generator) -> ForgerySample:
    """Copy a region of the base to a non-overlapping shifted destination.

    The mask marks only the destination: that is where pixel content no
    longer matches the scene.  Zero shift is impossible because it would
    fully overlap the source.
    """
    h, w = base.shape[1:]
    for _ in range(MAX_ATTEMPTS):
        region = random_region(rng, h, w) > 0
        ys, xs = np.nonzero(region)
        y0, y1, x0, x1 = ys.min(), ys.max(), xs.min(), xs.max()
        dy = int(rng.integers(-y0, h - 1 - y1 + 1))
        dx = int(rng.integers(-x0, w - 1 - x1 + 1))
        dest_ys, dest_xs = ys + dy, xs + dx
        if region[dest_ys, dest_xs].any():
            continue        # overlaps the source (includes the zero shift)
        image = base.copy()
        image[:, dest_ys, dest_xs] = base[:, ys, xs]
        mask = np.zeros((h, w), dtype=np.float32)
        mask[dest_ys, dest_xs] = 1.0
        meta = {"source_mask": region.astype(np.float32), "shift": (dy, dx)}
        return ForgerySample(image, mask, "copy_move", meta)
    raise ValueError(f"no valid copy-move placement after {MAX_ATTEMPTS} attempts")


def diffusion_fill(image: np.ndarray, region: np.ndarray, tol: float = 1e-4,
                   max_sweeps: int = 200) -> np.ndarray:
    """Fill ``region`` by iterative 4-neighbor averaging, initialized at the
    mean of the boundary ring.  Each sweep updates the region in two
    checkerboard half-steps (so fresh values propagate within the sweep) and
    stops when the largest change drops below ``tol``.  Every update is a
    convex combination of neighbors, so filled values stay inside the
    [min, max] range of the boundary ring."""
    filled = image.copy().astype(np.float64)
    reg = region.astype(bool)
    if not reg.any():
        return image.copy()
    ring = np.zeros_like(reg)
    ring[1:-1, 1:-1] = (reg[:-2, 1:-1] | reg[2:, 1:-1]
                        | reg[1:-1, :-2] | reg[1:-1, 2:])
    ring &= ~reg
    if ring.any():
        filled[:, reg] = filled[:, ring].mean(axis=1, keepdims=True)
    yy, xx = np.mgrid[0:reg.shape[0], 0:reg.shape[1]]
    colors = [reg & ((yy + xx) % 2 == 0), reg & ((yy + xx) % 2 == 1)]
    for _ in range(max_sweeps):
        delta = 0.0
        for color in colors:
            avg = np.empty_like(filled)
            avg[:, 1:-1, 1:-1] = (filled[:, :-2, 1:-1] + filled[:, 2:, 1:-1]
                                  + filled[:, 1:-1, :-2]
                                  + filled[:, 1:-1, 2:]) / 4.0
            delta = max(delta, np.abs(avg[:, color] - filled[:, color]).max())
            filled[:, color] = avg[:, color]
        if delta < tol:
            break
    return filled.astype(image.dtype)


def generate_removal(base: np.ndarray, rng: np.random.Generator) -> ForgerySample:
    """Erase a region by diffusing the surrounding content inward."""
    h, w = base.shape[1:]
    mask = random_region(rng, h, w)
    image = diffusion_fill(base, mask > 0)
    return ForgerySample(image.astype(np.float32), mask, "removal")


def generate_sample(kind: str, seed: int, size=(64, 64)) -> ForgerySample:
    """One reproducible sample: the seed alone determines every byte."""
    rng = np.random.default_rng(seed)
    base = generate_base(rng, size)
    if kind == "splice":
        return generate_splice(base, generate_base(rng, size), rng)
    if kind == "copy_move":
        return generate_copy_move(base, rng)
    if kind == "removal":
        return generate_removal(base, rng)
    raise ValueError(f"unknown forgery kind {kind!r}, expected one of {KINDS}")


# ---------------------------------------------------------------------------
# resizing

def resize_image(img: np.ndarray, target) -> np.ndarray:
    """Area-averaging resize of a (3, h, w) image to (3, th, tw)."""
    th, tw = target
    if th <= 0 or tw <= 0:
        raise ValueError(f"target dims must be positive, got {target}")
    hwc = np.ascontiguousarray(img.transpose(1, 2, 0))
    out = cv2.resize(hwc, (tw, th), interpolation=cv2.INTER_AREA)
    return np.ascontiguousarray(out.transpose(2, 0, 1)).astype(np.float32)


def resize_mask(mask: np.ndarray, target) -> np.ndarray:
    """Nearest-neighbor resize of an (h, w) binary mask; stays binary."""
    th, tw = target
    if th <= 0 or tw <= 0:
        raise ValueError(f"target dims must be positive, got {target}")
    out = cv2.resize(mask.astype(np.float32), (tw, th),
                     interpolation=cv2.INTER_NEAREST)
    return out.astype(np.float32)


# ---------------------------------------------------------------------------
# PNG I/O

def write_png(raster: np.ndarray, path) -> None:
    """8-bit PNG: (3, h, w) -> RGB, (h, w) -> grayscale; input range [0,1]."""
    arr = np.clip(np.round(np.asarray(raster, dtype=np.float64) * 255.0),
                  0, 255).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[0] == 3:
        Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path)
    elif arr.ndim == 2:
        Image.fromarray(arr, mode="L").save(path)
    else:
        raise ValueError(f"expected (3, h, w) or (h, w) raster, got {raster.shape}")


def read_png(path) -> np.ndarray:
    """Read an 8-bit PNG back into [0, 1]; RGB -> (3, h, w), gray -> (h, w)."""
    with Image.open(path) as im:
        if im.mode == "RGB":
            arr = np.asarray(im, dtype=np.float32) / 255.0
            return np.ascontiguousarray(arr.transpose(2, 0, 1))
        if im.mode == "L":
            return np.asarray(im, dtype=np.float32) / 255.0
        raise ValueError(f"{path}: unsupported PNG mode {im.mode!r} "
                         f"(expected 8-bit RGB or grayscale)")


def load_image_folder(folder, size=None) -> list:
    """All PNGs in a folder as (3, h, w) rasters, optionally resized."""
    out = []
    for name in sorted(os.listdir(folder)):
        if name.lower().endswith(".png"):
            img = read_png(os.path.join(folder, name))
            if img.ndim == 2:
                img = np.repeat(img[None], 3, axis=0)
            if size is not None:
                img = resize_image(img, size)
            out.append(img)
    return out


# ---------------------------------------------------------------------------
# dataset + manifest

@dataclass
class ManifestEntry:
    image_path: str
    mask_path: str
    kind: str
    seed: int
    split: str


def _sample_seed(master_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([master_seed, index]).generate_state(1)[0])


def sample_paths(out_dir, split: str, index: int):
    """(image_path, mask_path) used for sample ``index`` of ``split``."""
    stem = os.path.join(out_dir, f"{split}_{index:05d}")
    return f"{stem}.png", f"{stem}_mask.png"


def generate_dataset(out_dir, n_train: int, n_test: int, size=(64, 64),
                     seed: int = 0, kinds: Sequence[str] = KINDS) -> str:
    """Write PNGs and a manifest.tsv under ``out_dir``; returns the manifest
    path.  Sample i is generated from its own recorded integer seed, cycling
    through the requested forgery kinds."""
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    counts = [("train", n_train), ("test", n_test)]
    index = 0
    for split, count in counts:
        for _ in range(count):
            kind = kinds[index % len(kinds)]
            sseed = _sample_seed(seed, index)
            sample = generate_sample(kind, sseed, size)
            image_path, mask_path = sample_paths(out_dir, split, index)
            write_png(sample.image, image_path)
            write_png(sample.mask, mask_path)
            entries.append(ManifestEntry(image_path, mask_path, kind,
                                         sseed, split))
            index += 1
    manifest_path = os.path.join(out_dir, "manifest.tsv")
    with open(manifest_path, "w") as f:
        for e in entries:
            f.write(f"{e.image_path}\t{e.mask_path}\t{e.kind}\t{e.seed}\t{e.split}\n")
    return manifest_path


def load_manifest(path, strict: bool = True) -> list:
    """Parse and validate a manifest: 5 tab-separated fields per line,
    existing paths (unless strict=False, for callers that handle missing
    files themselves), and disjoint splits."""
    entries = []
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise ValueError(f"{path}:{ln}: expected 5 tab-separated "
                                 f"fields, got {len(parts)}")
            image_path, mask_path, kind, seed, split = parts
            if kind not in KINDS:
                raise ValueError(f"{path}:{ln}: unknown kind {kind!r}")
            if strict:
                for p in (image_path, mask_path):
                    if not os.path.exists(p):
                        raise ValueError(f"{path}:{ln}: missing file {p}")
            entries.append(ManifestEntry(image_path, mask_path, kind,
                                         int(seed), split))
    by_split = {}
    for e in entries:
        by_split.setdefault(e.split, set()).add(e.image_path)
    splits = list(by_split)
    for i, a in enumerate(splits):
        for b in splits[i + 1:]:
            common = by_split[a] & by_split[b]
            if common:
                raise ValueError(f"{path}: samples appear in both {a!r} and "
                                 f"{b!r}: {sorted(common)[:3]}")
    return entries


def load_split(entries, split: str):
    """Stack one split into arrays: images (N, 3, h, w), masks (N, 1, h, w)."""
    chosen = [e for e in entries if e.split == split]
    if not chosen:
        raise ValueError(f"manifest has no {split!r} samples")
    images, masks = [], []
    for e in chosen:
        images.append(read_png(e.image_path))
        mask = read_png(e.mask_path)
        masks.append((mask > 0.5).astype(np.float32)[None])
    return np.stack(images), np.stack(masks)
