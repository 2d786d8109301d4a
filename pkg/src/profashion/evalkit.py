"""Image metrics for generated clips: SSIM, PSNR and view-grouped masked error."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from .numcore import DTYPE, DimensionError

SSIM_WIN = 11
SSIM_SIGMA = 1.5
K1, K2 = 0.01, 0.03


def gaussian_window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-r ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def _filter(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable 'valid' filtering over the first two axes
    k = len(g)
    y = correlate1d(x, g, axis=0, mode="constant")
    y = correlate1d(y, g, axis=1, mode="constant")
    lo = k // 2
    return y[lo:x.shape[0] - (k - 1 - lo), lo:x.shape[1] - (k - 1 - lo)]


def _check_pair(a, b):
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.shape != b.shape:
        raise DimensionError(f"images differ in shape: {a.shape} vs {b.shape}")
    return a, b


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Mean SSIM over valid 11x11 Gaussian windows and channels.

    Images are ``[H, W]`` or ``[H, W, C]`` with H, W >= 11.
    """
    a, b = _check_pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.shape[0] < SSIM_WIN or a.shape[1] < SSIM_WIN:
        raise DimensionError(f"ssim needs at least {SSIM_WIN}x{SSIM_WIN} pixels, got {a.shape[:2]}")
    g = gaussian_window()
    c1, c2 = (K1 * data_range) ** 2, (K2 * data_range) ** 2
    mu_a, mu_b = _filter(a, g), _filter(b, g)
    saa = _filter(a * a, g) - mu_a ** 2
    sbb = _filter(b * b, g) - mu_b ** 2
    sab = _filter(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))


def psnr(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> tuple[float, bool]:
    """``(dB, infinite)``; identical inputs give ``(inf, True)``."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf"), True
    return float(10.0 * np.log10(data_range ** 2 / mse)), False


def view_masked_error(pred: np.ndarray, gt: np.ndarray, labels, mask: np.ndarray | None = None) -> dict:
    """Masked per-pixel MSE (mean over channels) grouped by per-frame view label.

    ``pred``/``gt`` are ``[N, H, W, C]``; ``mask`` is ``[N, H, W]`` (True on the
    character), default all pixels.  Groups without frames are left out.
    """
    pred, gt = _check_pair(pred, gt)
    if len(labels) != pred.shape[0]:
        raise DimensionError(f"{len(labels)} labels for {pred.shape[0]} frames")
    mask = np.ones(pred.shape[:3], bool) if mask is None else np.asarray(mask, bool)
    err = ((pred - gt) ** 2).mean(axis=-1)
    out = {}
    names = [str(getattr(l, "value", l)) for l in labels]
    for name in sorted(set(names)):
        idx = [i for i, n in enumerate(names) if n == name]
        m = mask[idx]
        out[name] = float(err[idx][m].mean()) if m.any() else 0.0
    return out


def config_hash(config: dict) -> str:
    text = json.dumps(config, sort_keys=True, default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass
class MetricReport:
    ssim: list = field(default_factory=list)
    psnr: list = field(default_factory=list)
    psnr_infinite: list = field(default_factory=list)
    view_mse: dict = field(default_factory=dict)
    seed: int = 0
    config_hash: str = ""

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim)) if self.ssim else float("nan")

    @property
    def mean_psnr(self) -> float:
        finite = [p for p, inf in zip(self.psnr, self.psnr_infinite) if not inf]
        return float(np.mean(finite)) if finite else float("inf")

    def to_json(self) -> str:
        doc = {
            "aggregate": {"mean_psnr": _num(self.mean_psnr), "mean_ssim": _num(self.mean_ssim)},
            "config_hash": self.config_hash,
            "per_frame": [{"frame": i, "psnr": _num(p), "psnr_infinite": bool(f), "ssim": _num(s)}
                          for i, (s, p, f) in enumerate(zip(self.ssim, self.psnr, self.psnr_infinite))],
            "seed": int(self.seed),
            "view_mse": {k: _num(v) for k, v in sorted(self.view_mse.items())},
        }
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def _num(x: float):
    # JSON has no inf/nan
    x = float(x)
    return x if np.isfinite(x) else str(x)


def evaluate_clip(pred: np.ndarray, gt: np.ndarray, labels, mask=None, seed: int = 0,
                  config: dict | None = None) -> MetricReport:
    rep = MetricReport(seed=seed, config_hash=config_hash(config or {}))
    for p, g in zip(pred, gt):
        rep.ssim.append(ssim(p, g))
        db, inf = psnr(p, g)
        rep.psnr.append(db)
        rep.psnr_infinite.append(inf)
    rep.view_mse = view_masked_error(pred, gt, labels, mask)
    return rep
