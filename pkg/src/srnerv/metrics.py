"""Quality and rate metrics: PSNR, single-scale SSIM, bpp, BD-rate.

Everything here is plain numpy on raw arrays, independent of the autodiff
engine; the differentiable SSIM inside the training loss is checked
against this module's implementation in the tests.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import PchipInterpolator

PSNR_CAP_DB = 100.0


@dataclass(frozen=True)
class RDPoint:
    bpp: float
    psnr: float


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10*log10(1/MSE) with peak 1.0, capped at 100 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(1.0 / mse))


def _gauss_kernel(sigma: float, K: int) -> np.ndarray:
    t = np.arange(K, dtype=np.float64) - K // 2
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def _blur2d(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    # separable, reflect padding, matches tensor.gaussian_blur
    half = len(k) // 2
    xp = np.pad(x, ((half, half), (0, 0)), mode="reflect")
    x = sum(xp[i:i + x.shape[0]] * k[i] for i in range(len(k)))
    xp = np.pad(x, ((0, 0), (half, half)), mode="reflect")
    return sum(xp[:, i:i + x.shape[1]] * k[i] for i in range(len(k)))


def ssim(a: np.ndarray, b: np.ndarray, sigma: float = 1.5, K: int = 11,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Standard single-scale SSIM with Gaussian windows, per channel, averaged."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim != 3:
        raise ValueError("expected a single (H, W, C) frame")
    if a.shape[0] < K or a.shape[1] < K:
        raise ValueError(f"frame {a.shape[:2]} smaller than the {K}x{K} window")
    c1, c2 = k1 * k1, k2 * k2
    kern = _gauss_kernel(sigma, K)
    vals = []
    for c in range(a.shape[2]):
        x, y = a[:, :, c], b[:, :, c]
        mx, my = _blur2d(x, kern), _blur2d(y, kern)
        vx = _blur2d(x * x, kern) - mx * mx
        vy = _blur2d(y * y, kern) - my * my
        cov = _blur2d(x * y, kern) - mx * my
        num = (2 * mx * my + c1) * (2 * cov + c2)
        den = (mx * mx + my * my + c1) * (vx + vy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


def bpp(total_bits: float, T: int, H: int, W: int) -> float:
    if T < 1 or H < 1 or W < 1:
        raise ValueError("dimensions must be positive")
    return total_bits / (T * H * W)


def _curve(points: list[RDPoint], label: str) -> tuple[np.ndarray, np.ndarray]:
    pts = sorted(points, key=lambda p: p.bpp)
    ps = np.array([p.psnr for p in pts], dtype=np.float64)
    rs = np.log10([p.bpp for p in pts])
    if not np.all(np.isfinite(ps)) or not np.all(np.isfinite(rs)):
        raise ValueError(f"{label} curve contains non-finite points")
    if np.any(np.diff(ps) <= 0):
        warnings.warn(f"{label} RD curve is not strictly increasing in PSNR", stacklevel=3)
        order = np.argsort(ps, kind="stable")
        ps, rs = ps[order], rs[order]
        uniq, inv = np.unique(ps, return_inverse=True)
        rs = np.array([rs[inv == i].mean() for i in range(len(uniq))])
        ps = uniq
    return ps, rs


def bd_rate(anchor: list[RDPoint], test: list[RDPoint]) -> float:
    """Bjontegaard delta bitrate of ``test`` against ``anchor``, in percent.

    Monotone piecewise-cubic (PCHIP) interpolation of log10(bpp) over PSNR,
    integrated across the shared PSNR span. Negative means the test curve
    needs fewer bits for the same quality.
    """
    if len(anchor) < 4 or len(test) < 4:
        raise ValueError("bd_rate needs at least 4 points per curve")
    pa, ra = _curve(anchor, "anchor")
    pt, rt = _curve(test, "test")
    lo = max(pa.min(), pt.min())
    hi = min(pa.max(), pt.max())
    if hi <= lo:
        raise ValueError("RD curves share no PSNR range")
    fa = PchipInterpolator(pa, ra)
    ft = PchipInterpolator(pt, rt)
    delta = (ft.integrate(lo, hi) - fa.integrate(lo, hi)) / (hi - lo)
    return float(100.0 * (10.0 ** delta - 1.0))


def write_rd_csv(path, points: list[RDPoint]) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["bpp", "psnr"])
        for p in points:
            out.writerow([repr(p.bpp), repr(p.psnr)])


def read_rd_csv(path) -> list[RDPoint]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["bpp", "psnr"]:
        raise ValueError(f"{path}: expected header 'bpp,psnr'")
    return [RDPoint(float(r[0]), float(r[1])) for r in rows[1:]]
