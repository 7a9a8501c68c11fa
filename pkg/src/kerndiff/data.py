"""Synthetic multispectral scenes, reduced-resolution degradation, and
triplet dataset IO.

Degradation follows the usual protocol for reference-based evaluation: the
multispectral reference is blurred with a Gaussian matched to the resolution
ratio, decimated, and bicubically re-upsampled to the panchromatic grid; the
panchromatic image is a nonnegative band-weighted sum of the reference.
Blurring uses periodic boundary handling, which keeps the kernel exactly
mass-preserving, so band energy can only shrink.
"""

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import cv2
import numpy as np
from scipy import ndimage

from .errors import DataError, ShapeError


@dataclass
class Triplet:
    """One sample: pan (H,W,1), upsampled lrms (H,W,C), optional gt (H,W,C)."""

    pan: np.ndarray
    lrms: np.ndarray
    gt: Optional[np.ndarray] = None


def _smooth_field(rng, h, w, sigma):
    f = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma, mode="wrap")
    f -= f.mean()
    s = f.std()
    return f / s if s > 0 else f


def synth_hrms(seed, h=64, w=64, c=8):
    """Procedural reference scene: band-correlated smooth fields plus
    rectangles with sharp edges, clipped to [0, 1]."""
    rng = np.random.default_rng(seed)
    base = _smooth_field(rng, h, w, sigma=max(h, w) / 8)
    mid = _smooth_field(rng, h, w, sigma=max(h, w) / 16)
    img = np.empty((h, w, c), dtype=np.float64)
    phase = rng.uniform(0, 2 * math.pi)
    for b in range(c):
        ramp = math.cos(math.pi * b / max(c - 1, 1) + phase)
        img[..., b] = 0.5 + 0.18 * base + 0.08 * ramp * mid

    n_rect = rng.integers(6, 12)
    for _ in range(n_rect):
        rh = int(rng.integers(h // 8, h // 2))
        rw = int(rng.integers(w // 8, w // 2))
        r0 = int(rng.integers(0, h - rh))
        c0 = int(rng.integers(0, w - rw))
        amp = rng.uniform(-0.25, 0.25)
        tilt = rng.uniform(-0.05, 0.05)
        band_amp = amp + tilt * np.arange(c) / max(c - 1, 1)
        img[r0:r0 + rh, c0:c0 + rw, :] += band_amp

    return np.clip(img, 0.0, 1.0).astype(np.float32)


def gaussian_kernel(sigma):
    """Normalized 2D Gaussian, truncated at 3 sigma."""
    radius = max(int(math.ceil(3 * sigma)), 1)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k1 = np.exp(-0.5 * (x / sigma) ** 2)
    k2 = np.outer(k1, k1)
    return k2 / k2.sum()


def mtf_blur(hrms, ratio):
    """Per-band Gaussian blur with sigma = ratio / 2, periodic boundaries."""
    kernel = gaussian_kernel(0.5 * ratio)
    out = np.empty_like(hrms, dtype=np.float64)
    for b in range(hrms.shape[2]):
        out[..., b] = ndimage.convolve(hrms[..., b].astype(np.float64), kernel, mode="wrap")
    return out


def _bicubic_resize(img, h, w):
    out = np.empty((h, w, img.shape[2]), dtype=np.float64)
    for b in range(img.shape[2]):
        out[..., b] = cv2.resize(img[..., b], (w, h), interpolation=cv2.INTER_CUBIC)
    return out


def wald_degrade(hrms, ratio=4, pan_weights=None):
    """Turn a reference scene into a (pan, upsampled lrms, gt) training triplet."""
    if hrms.ndim != 3:
        raise ShapeError("reference scene must be (H, W, C)")
    h, w, c = hrms.shape
    if h % ratio or w % ratio:
        raise ShapeError(f"spatial size {(h, w)} not divisible by ratio {ratio}")
    if pan_weights is None:
        pan_weights = np.full(c, 1.0 / c)
    pan_weights = np.asarray(pan_weights, dtype=np.float64)
    if pan_weights.shape != (c,) or (pan_weights < 0).any() or pan_weights.sum() <= 0:
        raise ShapeError("pan weights must be nonnegative with positive sum, one per band")
    pan_weights = pan_weights / pan_weights.sum()

    blurred = mtf_blur(hrms, ratio)
    lr = blurred[::ratio, ::ratio, :]
    lrms_up = _bicubic_resize(lr, h, w)
    pan = (hrms.astype(np.float64) @ pan_weights)[..., None]
    return Triplet(pan=pan.astype(np.float32),
                   lrms=lrms_up.astype(np.float32),
                   gt=hrms.astype(np.float32))


def synth_triplets(seed, count, h=64, w=64, c=8, ratio=4, pan_weights=None):
    return [wald_degrade(synth_hrms(seed + i, h, w, c), ratio, pan_weights)
            for i in range(count)]


# --- on-disk format: one .npz per split plus a JSON manifest -----------------


def save_split(root, split, triplets, divisor=1.0):
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    pan = np.stack([t.pan for t in triplets])
    lrms = np.stack([t.lrms for t in triplets])
    has_gt = triplets[0].gt is not None
    arrays = {"pan": pan, "lrms": lrms}
    if has_gt:
        arrays["gt"] = np.stack([t.gt for t in triplets])
    np.savez_compressed(root / f"{split}.npz", **arrays)
    manifest = {
        "split": split,
        "count": len(triplets),
        "patch_size": [int(pan.shape[1]), int(pan.shape[2])],
        "bands": int(lrms.shape[3]),
        "divisor": float(divisor),
        "has_gt": has_gt,
        "dtype": str(pan.dtype),
    }
    with open(root / f"{split}.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
    return manifest


class TripletDataset:
    """Normalized in-memory split with deterministic seeded batch iteration."""

    def __init__(self, pan, lrms, gt, manifest):
        self.pan = pan
        self.lrms = lrms
        self.gt = gt
        self.manifest = manifest

    def __len__(self):
        return self.pan.shape[0]

    def __getitem__(self, i):
        return Triplet(self.pan[i], self.lrms[i], None if self.gt is None else self.gt[i])

    def epoch_order(self, seed, epoch):
        """Sample order for one epoch; a pure function of (seed, epoch)."""
        return np.random.default_rng([seed, epoch]).permutation(len(self))

    def iter_batches(self, batch_size, seed=0, epoch=0, shuffle=True):
        order = self.epoch_order(seed, epoch) if shuffle else np.arange(len(self))
        for start in range(0, len(self), batch_size):
            idx = order[start:start + batch_size]
            yield (self.pan[idx], self.lrms[idx],
                   None if self.gt is None else self.gt[idx])


def load_split(root, split):
    root = Path(root)
    npz_path = root / f"{split}.npz"
    man_path = root / f"{split}.json"
    if not npz_path.exists() or not man_path.exists():
        raise DataError(f"split {split!r} not found under {root}")
    with open(man_path) as fh:
        manifest = json.load(fh)
    with np.load(npz_path) as data:
        pan = data["pan"]
        lrms = data["lrms"]
        gt = data["gt"] if "gt" in data.files else None
    if pan.shape[0] != manifest["count"] or lrms.shape[0] != manifest["count"]:
        raise DataError(f"sample count on disk does not match manifest for {split!r}")
    if list(pan.shape[1:3]) != manifest["patch_size"] or lrms.shape[3] != manifest["bands"]:
        raise DataError(f"array shapes do not match manifest for {split!r}")
    if manifest.get("has_gt", False) != (gt is not None):
        raise DataError(f"ground-truth presence does not match manifest for {split!r}")
    div = float(manifest.get("divisor", 1.0))
    pan = pan.astype(np.float32) / div
    lrms = lrms.astype(np.float32) / div
    gt = None if gt is None else gt.astype(np.float32) / div
    return TripletDataset(pan, lrms, gt, manifest)
