"""Evaluation metrics and the evaluation report."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .losses import ssim as _ssim

PSNR_CAP = 99.0


def psnr(a, b) -> float:
    """``10 log10(1 / MSE)`` over all channels, capped at 99 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def ssim(a, b) -> float:
    return _ssim(a, b)[0]


def mask_iou(pred_binary, gt_binary) -> float:
    """Intersection over union of two binary masks; 1.0 when both are empty."""
    p = np.asarray(pred_binary).astype(bool)
    g = np.asarray(gt_binary).astype(bool)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    union = np.count_nonzero(p | g)
    if union == 0:
        return 1.0
    return np.count_nonzero(p & g) / union


@dataclass
class EvalReport:
    test_psnr: list[float] = field(default_factory=list)
    test_ssim: list[float] = field(default_factory=list)
    train_mask_iou: list[float] = field(default_factory=list)
    runtimes: dict[str, float] = field(default_factory=dict)

    @property
    def mean_psnr(self):
        return float(np.mean(self.test_psnr)) if self.test_psnr else float("nan")

    @property
    def mean_ssim(self):
        return float(np.mean(self.test_ssim)) if self.test_ssim else float("nan")

    @property
    def mean_iou(self):
        return float(np.mean(self.train_mask_iou)) if self.train_mask_iou else float("nan")

    def to_dict(self, with_runtimes=True):
        d = asdict(self)
        d["mean_psnr"], d["mean_ssim"], d["mean_mask_iou"] = self.mean_psnr, self.mean_ssim, self.mean_iou
        if not with_runtimes:
            d.pop("runtimes")
        return d

    def metrics_equal(self, other: "EvalReport") -> bool:
        """Equality on every metric; wall-clock runtimes are excluded."""
        return self.to_dict(with_runtimes=False) == other.to_dict(with_runtimes=False)

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            d = json.load(f)
        return cls(test_psnr=d["test_psnr"], test_ssim=d["test_ssim"], train_mask_iou=d["train_mask_iou"],
                   runtimes=d.get("runtimes", {}))
