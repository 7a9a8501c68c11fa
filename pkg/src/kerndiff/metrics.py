"""Fusion quality metrics.

Reduced resolution (reference available): spectral angle, relative global
error, spatial correlation of high-pass detail, and the hypercomplex quality
index. Full resolution (no reference): spectral and spatial distortion from
Q-index consistency, combined into their hybrid product.

Q statistics run on non-overlapping 32x32 blocks; images are expected in
(H, W, C) layout with nonnegative values.
"""

import json
from dataclasses import dataclass, field

import cv2
import numpy as np
from scipy import ndimage

from .errors import ShapeError

IDEALS = {"sam": 0.0, "ergas": 0.0, "scc": 1.0, "q2n": 1.0,
          "d_lambda": 0.0, "d_s": 0.0, "hqnr": 1.0}

_LAPLACIAN = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])


def _check_same(x, y):
    if x.shape != y.shape:
        raise ShapeError(f"shapes differ: {x.shape} vs {y.shape}")


def sam(x, y):
    """Mean spectral angle between per-pixel band vectors, in degrees.

    Pixels where either vector is zero are skipped. The angle is computed as
    2 atan2(|u - v|, |u + v|) on unit vectors, which is exact at 0 and stable
    for nearly parallel spectra where arccos loses precision.
    """
    _check_same(x, y)
    x = x.astype(np.float64).reshape(-1, x.shape[-1])
    y = y.astype(np.float64).reshape(-1, y.shape[-1])
    nx = np.linalg.norm(x, axis=1)
    ny = np.linalg.norm(y, axis=1)
    valid = (nx > 0) & (ny > 0)
    if not valid.any():
        return 0.0
    u = x[valid] / nx[valid, None]
    v = y[valid] / ny[valid, None]
    angles = 2.0 * np.arctan2(np.linalg.norm(u - v, axis=1), np.linalg.norm(u + v, axis=1))
    return float(np.degrees(angles).mean())


def ergas(fused, ref, ratio=4):
    """Relative dimensionless global error: 100/ratio * RMS of per-band
    RMSE over reference band mean."""
    _check_same(fused, ref)
    f = fused.astype(np.float64)
    r = ref.astype(np.float64)
    rmse = np.sqrt(((f - r) ** 2).mean(axis=(0, 1)))
    mu = r.mean(axis=(0, 1))
    mu = np.where(mu == 0, np.finfo(np.float64).eps, mu)
    return float(100.0 / ratio * np.sqrt(((rmse / mu) ** 2).mean()))


def scc(x, y):
    """Mean per-band Pearson correlation of Laplacian high-pass detail."""
    _check_same(x, y)
    vals = []
    for b in range(x.shape[-1]):
        hx = ndimage.convolve(x[..., b].astype(np.float64), _LAPLACIAN, mode="reflect").ravel()
        hy = ndimage.convolve(y[..., b].astype(np.float64), _LAPLACIAN, mode="reflect").ravel()
        sx = hx.std()
        sy = hy.std()
        if sx == 0 or sy == 0:
            vals.append(1.0 if np.allclose(hx, hy) else 0.0)
            continue
        vals.append(float(((hx - hx.mean()) * (hy - hy.mean())).mean() / (sx * sy)))
    return float(np.mean(vals))


def _blocks(band, block):
    h, w = band.shape
    nh, nw = h // block, w // block
    if nh < 1 or nw < 1:
        raise ShapeError(f"image {band.shape} smaller than the {block}x{block} Q block")
    a = band[: nh * block, : nw * block]
    return a.reshape(nh, block, nw, block).transpose(0, 2, 1, 3).reshape(-1, block * block)


def q_index(a, b, block=32):
    """Universal quality index between two bands over non-overlapping blocks."""
    _check_same(a, b)
    xa = _blocks(a.astype(np.float64), block)
    xb = _blocks(b.astype(np.float64), block)
    mu1 = xa.mean(axis=1)
    mu2 = xb.mean(axis=1)
    s1 = xa.var(axis=1)
    s2 = xb.var(axis=1)
    s12 = ((xa - mu1[:, None]) * (xb - mu2[:, None])).mean(axis=1)
    qmap = np.ones(mu1.shape)
    den_s = s1 + s2
    den_m = mu1**2 + mu2**2
    only_mean = (den_s == 0) & (den_m != 0)
    qmap[only_mean] = 2 * mu1[only_mean] * mu2[only_mean] / den_m[only_mean]
    only_var = (den_s != 0) & (den_m == 0)
    qmap[only_var] = 2 * s12[only_var] / den_s[only_var]
    both = (den_s != 0) & (den_m != 0)
    qmap[both] = (4 * s12[both] * mu1[both] * mu2[both]) / (den_s[both] * den_m[both])
    return float(qmap.mean())


# --- hypercomplex quality index ----------------------------------------------


def _conj_tail(v):
    return np.concatenate([v[..., :1], -v[..., 1:]], axis=-1)


def _onion_mult(o1, o2):
    # Cayley-Dickson product over the last axis (length a power of two)
    n = o1.shape[-1]
    if n == 1:
        return o1 * o2
    half = n // 2
    a = o1[..., :half]
    b = _conj_tail(o1[..., half:])
    c = o2[..., :half]
    d = _conj_tail(o2[..., half:])
    if n == 2:
        return np.concatenate([a * c - d * b, a * d + c * b], axis=-1)
    r1 = _onion_mult(a, c)
    r2 = _onion_mult(d, _conj_tail(b))
    r3 = _onion_mult(_conj_tail(a), d)
    r4 = _onion_mult(c, b)
    return np.concatenate([r1 - r2, r3 + r4], axis=-1)


def _onion_block_quality(ref, fus, block):
    eps = np.finfo(np.float64).eps
    dat1 = ref.astype(np.float64).copy()
    dat2 = fus.astype(np.float64).copy()
    dat2[..., 1:] = -dat2[..., 1:]
    nb = dat1.shape[-1]
    for i in range(nb):
        s = dat1[..., i].mean()
        t = dat1[..., i].std()
        if t == 0:
            t = eps
        dat1[..., i] = (dat1[..., i] - s) / t + 1.0
        if i == 0:
            dat2[..., i] = (dat2[..., i] - s) / t + 1.0
        else:
            dat2[..., i] = -((-dat2[..., i] - s) / t + 1.0)

    m1 = dat1.reshape(-1, nb).mean(axis=0)
    m2 = dat2.reshape(-1, nb).mean(axis=0)
    mod1m = np.sqrt((m1**2).sum())
    mod2m = np.sqrt((m2**2).sum())
    mod1 = (dat1**2).sum(axis=-1)
    mod2 = (dat2**2).sum(axis=-1)

    area = block * block
    unbias = area / (area - 1.0)
    int1 = unbias * mod1.mean()
    int2 = unbias * mod2.mean()
    var_total = int1 + int2 - unbias * (mod1m**2 + mod2m**2)
    mean_bias = 2 * mod1m * mod2m / (mod1m**2 + mod2m**2 + eps)
    if var_total <= eps:
        out = np.zeros(nb)
        out[0] = mean_bias
        return out
    qu = _onion_mult(dat1, dat2)
    qv = unbias * qu.reshape(-1, nb).mean(axis=0)
    qm = _onion_mult(m1[None], m2[None])[0]
    q = qv - unbias * qm
    return q * mean_bias * (2.0 / var_total)


def q2n(ref, fused, block=32, stride=32):
    """Hypercomplex quality index on tiled blocks; bands are zero-padded to
    the next power of two before embedding."""
    _check_same(ref, fused)
    h, w, c = ref.shape
    pad_h = (-h) % stride
    pad_w = (-w) % stride
    if pad_h or pad_w:
        ref = np.pad(ref, ((0, pad_h), (0, pad_w), (0, 0)), mode="reflect")
        fused = np.pad(fused, ((0, pad_h), (0, pad_w), (0, 0)), mode="reflect")
    c_pad = 1 << (c - 1).bit_length()
    if c_pad != c:
        zeros = np.zeros(ref.shape[:2] + (c_pad - c,))
        ref = np.concatenate([ref, zeros], axis=-1)
        fused = np.concatenate([fused, zeros], axis=-1)

    hh, ww = ref.shape[:2]
    values = []
    for r0 in range(0, hh - block + 1, stride):
        for c0 in range(0, ww - block + 1, stride):
            q = _onion_block_quality(ref[r0:r0 + block, c0:c0 + block],
                                     fused[r0:r0 + block, c0:c0 + block], block)
            values.append(np.sqrt((q[:c] ** 2).sum()))
    return float(np.mean(values))


# --- full-resolution (no-reference) indices -----------------------------------


def d_lambda(fused, lrms, block=32, p=1):
    """Spectral distortion: disagreement of inter-band Q indices between the
    fused image and the upsampled multispectral input."""
    _check_same(fused, lrms)
    c = fused.shape[-1]
    diffs = []
    for i in range(c):
        for j in range(c):
            if i == j:
                continue
            qf = q_index(fused[..., i], fused[..., j], block)
            ql = q_index(lrms[..., i], lrms[..., j], block)
            diffs.append(abs(qf - ql) ** p)
    return float(np.mean(diffs) ** (1.0 / p))


def d_s(fused, lrms, pan, ratio=4, block=32, q=1):
    """Spatial distortion: disagreement between band-to-PAN Q indices at full
    scale and at the degraded scale (bicubic resampling, scale-matched blocks)."""
    _check_same(fused, lrms)
    pan2d = pan[..., 0] if pan.ndim == 3 else pan
    if pan2d.shape != fused.shape[:2]:
        raise ShapeError("panchromatic image must share the fused spatial size")
    h, w, c = fused.shape
    pan_lr = cv2.resize(pan2d.astype(np.float64), (w // ratio, h // ratio),
                        interpolation=cv2.INTER_CUBIC)
    block_lr = max(2, block // ratio)
    diffs = []
    for b in range(c):
        q_hr = q_index(fused[..., b], pan2d, block)
        lr_band = cv2.resize(lrms[..., b].astype(np.float64), (w // ratio, h // ratio),
                             interpolation=cv2.INTER_CUBIC)
        q_lr = q_index(lr_band, pan_lr, block_lr)
        diffs.append(abs(q_hr - q_lr) ** q)
    return float(np.mean(diffs) ** (1.0 / q))


def hqnr(d_lambda_value, d_s_value):
    """Hybrid no-reference index: (1 - Dl)(1 - Ds); 1 is ideal."""
    return float((1.0 - d_lambda_value) * (1.0 - d_s_value))


def error_map(fused, gt, normalize=True):
    """Per-pixel mean absolute error across bands, optionally scaled to [0, 1]."""
    _check_same(fused, gt)
    m = np.abs(fused.astype(np.float64) - gt.astype(np.float64)).mean(axis=-1)
    if normalize and m.max() > 0:
        m = m / m.max()
    return m


# --- per-split reporting ------------------------------------------------------


@dataclass
class MetricsReport:
    ratio: int = 4
    values: dict = field(default_factory=dict)

    def add(self, name, value):
        self.values.setdefault(name, []).append(float(value))

    def add_sample(self, fused, triplet, block=32):
        """Score one sample; reference metrics only when gt is present."""
        if triplet.gt is not None:
            self.add("sam", sam(fused, triplet.gt))
            self.add("ergas", ergas(fused, triplet.gt, self.ratio))
            self.add("scc", scc(fused, triplet.gt))
            self.add("q2n", q2n(triplet.gt, fused, block=block, stride=block))
        dl = d_lambda(fused, triplet.lrms, block=block)
        ds = d_s(fused, triplet.lrms, triplet.pan, ratio=self.ratio, block=block)
        self.add("d_lambda", dl)
        self.add("d_s", ds)
        self.add("hqnr", hqnr(dl, ds))

    def summary(self):
        out = {}
        for name, vals in self.values.items():
            arr = np.asarray(vals)
            out[name] = {"mean": float(arr.mean()),
                         "std": float(arr.std(ddof=1)) if arr.size > 1 else 0.0,
                         "ideal": IDEALS.get(name)}
        return out

    def to_json_dict(self):
        return {"ratio": self.ratio, "per_sample": self.values, "summary": self.summary()}

    def to_text(self):
        lines = [f"{'metric':<10} {'mean':>12} {'std':>12} {'ideal':>8}"]
        for name, s in self.summary().items():
            ideal = "-" if s["ideal"] is None else f"{s['ideal']:g}"
            lines.append(f"{name:<10} {s['mean']:>12.6f} {s['std']:>12.6f} {ideal:>8}")
        return "\n".join(lines)

    def save(self, json_path, text_path):
        with open(json_path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2)
        with open(text_path, "w") as fh:
            fh.write(self.to_text() + "\n")
