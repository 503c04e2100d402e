"""Evaluation metrics over predicted frame sequences.

All functions take ``[batch, time, H, W, C]`` arrays (numpy or torch) and
return floats.  MSE/MAE support two reporting conventions: ``per_pixel_mean``
(mean over every element) and ``per_frame_sum`` (error summed over a frame's
pixels and channels, then averaged over frames and batch) — the latter is
the convention behind Moving-MNIST-scale scores.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError

__all__ = [
    "CONVENTIONS",
    "mse",
    "mae",
    "ssim",
    "psnr",
    "FrameMetrics",
    "MetricReport",
    "compute_report",
]

CONVENTIONS = ("per_pixel_mean", "per_frame_sum")
PSNR_CAP_DB = 100.0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _as_array(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 5:
        raise ConfigError(f"expected [batch, time, H, W, C] frames, got shape {x.shape}")
    return x


def _pair(pred, target):
    p, t = _as_array(pred), _as_array(target)
    if p.shape != t.shape:
        raise ConfigError(f"shape mismatch: pred {p.shape} vs target {t.shape}")
    return p, t


def _check_convention(convention: str):
    if convention not in CONVENTIONS:
        raise ConfigError(f"convention must be one of {CONVENTIONS}, got {convention!r}")


def _per_frame_err(pred, target, power: int, convention: str) -> np.ndarray:
    """[batch, time] error per frame under the given convention."""
    err = np.abs(pred - target) ** power
    frame = err.sum(axis=(2, 3, 4)) if convention == "per_frame_sum" else err.mean(axis=(2, 3, 4))
    return frame


def mse(pred, target, convention: str = "per_pixel_mean") -> float:
    _check_convention(convention)
    p, t = _pair(pred, target)
    return float(_per_frame_err(p, t, 2, convention).mean())


def mae(pred, target, convention: str = "per_pixel_mean") -> float:
    _check_convention(convention)
    p, t = _pair(pred, target)
    return float(_per_frame_err(p, t, 1, convention).mean())


def _gaussian_kernel(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> torch.Tensor:
    half = size // 2
    coords = torch.arange(-half, half + 1, dtype=torch.float64)
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    kernel = torch.outer(g, g)
    return (kernel / kernel.sum()).reshape(1, 1, size, size)


def _ssim_frames(pred: np.ndarray, target: np.ndarray, data_range: float) -> np.ndarray:
    """[batch, time] SSIM per frame (windowed mean, channels averaged)."""
    b, t_len, h, w, c = pred.shape
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    a = torch.from_numpy(pred).permute(0, 1, 4, 2, 3).reshape(-1, 1, h, w)
    bb = torch.from_numpy(target).permute(0, 1, 4, 2, 3).reshape(-1, 1, h, w)
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        # too small for windows: single global-statistics comparison
        mu_a = a.mean(dim=(2, 3))
        mu_b = bb.mean(dim=(2, 3))
        va = a.var(dim=(2, 3), unbiased=False)
        vb = bb.var(dim=(2, 3), unbiased=False)
        cov = (a * bb).mean(dim=(2, 3)) - mu_a * mu_b
        val = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
            (mu_a**2 + mu_b**2 + c1) * (va + vb + c2)
        )
        per_image = val.squeeze(1)
    else:
        kernel = _gaussian_kernel()
        mu_a = F.conv2d(a, kernel)
        mu_b = F.conv2d(bb, kernel)
        va = F.conv2d(a * a, kernel) - mu_a**2
        vb = F.conv2d(bb * bb, kernel) - mu_b**2
        cov = F.conv2d(a * bb, kernel) - mu_a * mu_b
        ssim_map = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
            (mu_a**2 + mu_b**2 + c1) * (va + vb + c2)
        )
        per_image = ssim_map.mean(dim=(1, 2, 3))
    return per_image.reshape(b, t_len, c).mean(dim=-1).numpy()


def ssim(pred, target, data_range: float = 1.0) -> float:
    if data_range <= 0:
        raise ConfigError(f"data_range must be positive, got {data_range}")
    p, t = _pair(pred, target)
    return float(_ssim_frames(p, t, data_range).mean())


def _psnr_frames(pred: np.ndarray, target: np.ndarray, data_range: float) -> np.ndarray:
    err = ((pred - target) ** 2).mean(axis=(2, 3, 4))
    out = np.full_like(err, PSNR_CAP_DB)
    nz = err > 0
    out[nz] = np.minimum(10.0 * np.log10(data_range**2 / err[nz]), PSNR_CAP_DB)
    return out


def psnr(pred, target, data_range: float = 1.0) -> float:
    if data_range <= 0:
        raise ConfigError(f"data_range must be positive, got {data_range}")
    p, t = _pair(pred, target)
    return float(_psnr_frames(p, t, data_range).mean())


@dataclass(frozen=True)
class FrameMetrics:
    mse: float
    mae: float
    ssim: float
    psnr: float


@dataclass
class MetricReport:
    """Aggregate metrics plus the per-predicted-frame breakdown.

    Scalar fields are the uniform mean of ``per_frame`` values, so the
    aggregates always reproduce under the declared convention.
    """

    mse: float
    mae: float
    ssim: float
    psnr: float
    convention: str
    data_range: float = 1.0
    per_frame: list[FrameMetrics] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"mse": self.mse, "mae": self.mae, "ssim": self.ssim, "psnr": self.psnr}

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["frame", "mse", "mae", "ssim", "psnr"])
        for i, fm in enumerate(self.per_frame):
            writer.writerow([i, f"{fm.mse:.10g}", f"{fm.mae:.10g}", f"{fm.ssim:.10g}", f"{fm.psnr:.10g}"])
        writer.writerow(["summary", f"{self.mse:.10g}", f"{self.mae:.10g}", f"{self.ssim:.10g}", f"{self.psnr:.10g}"])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    def summary(self) -> str:
        return "\n".join(
            [
                f"convention: {self.convention} (data_range {self.data_range:g})",
                f"MSE : {self.mse:.6g}",
                f"MAE : {self.mae:.6g}",
                f"SSIM: {self.ssim:.6g}",
                f"PSNR: {self.psnr:.4f} dB",
            ]
        )


def compute_report(pred, target, convention: str = "per_pixel_mean", data_range: float = 1.0) -> MetricReport:
    """Full report over predictions ``[batch, horizon, H, W, C]``."""
    _check_convention(convention)
    if data_range <= 0:
        raise ConfigError(f"data_range must be positive, got {data_range}")
    p, t = _pair(pred, target)
    mse_f = _per_frame_err(p, t, 2, convention).mean(axis=0)
    mae_f = _per_frame_err(p, t, 1, convention).mean(axis=0)
    ssim_f = _ssim_frames(p, t, data_range).mean(axis=0)
    psnr_f = _psnr_frames(p, t, data_range).mean(axis=0)
    frames = [
        FrameMetrics(float(a), float(b), float(c), float(d))
        for a, b, c, d in zip(mse_f, mae_f, ssim_f, psnr_f)
    ]
    return MetricReport(
        mse=float(mse_f.mean()),
        mae=float(mae_f.mean()),
        ssim=float(ssim_f.mean()),
        psnr=float(psnr_f.mean()),
        convention=convention,
        data_range=data_range,
        per_frame=frames,
    )
