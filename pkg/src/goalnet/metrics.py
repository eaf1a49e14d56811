"""Training objectives and the evaluation protocol (best-of-K, MSE family, KDE-NLL).

Distance metrics use a per-coordinate mean: squared errors are averaged over
timesteps *and* coordinates, in original-frame pixels.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy.special import logsumexp

from .core import FPS
from .heatmap import unwrap

REPORT_VERSION = 1
DENSITY_FLOOR = 1e-300


@dataclass(frozen=True)
class LossBreakdown:
    traj: float
    bbox: float
    total: float


def traj_loss(pred_logits, target) -> torch.Tensor:
    """Per-cell binary cross-entropy with logits, averaged over every cell and timestep."""
    x = unwrap(pred_logits)
    y = unwrap(target)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    if (y < 0).any() or (y > 1).any():
        raise ValueError("targets must lie in [0, 1]")
    return F.binary_cross_entropy_with_logits(x, y.to(x.dtype))


def bbox_loss(pred_wh: torch.Tensor, gt_wh: torch.Tensor) -> torch.Tensor:
    if pred_wh.shape != gt_wh.shape:
        raise ValueError(f"shape mismatch {tuple(pred_wh.shape)} vs {tuple(gt_wh.shape)}")
    return F.smooth_l1_loss(pred_wh, gt_wh, beta=1.0)


def total_loss(traj, bbox) -> LossBreakdown:
    traj, bbox = float(traj), float(bbox)
    return LossBreakdown(traj, bbox, traj + bbox)


def _as_corners(boxes) -> np.ndarray:
    if len(boxes) and hasattr(boxes[0], "as_tuple"):
        return np.array([b.as_tuple() for b in boxes], dtype=np.float64)
    return np.asarray(boxes, dtype=np.float64).reshape(-1, 4)


def mse_bbox(pred_boxes, gt_boxes, horizon_frames: int) -> float:
    """Mean squared corner error over the first ``horizon_frames`` steps."""
    p, g = _as_corners(pred_boxes), _as_corners(gt_boxes)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    if not 1 <= horizon_frames <= len(g):
        raise ValueError(f"horizon {horizon_frames} outside [1, {len(g)}]")
    return float(np.mean((p[:horizon_frames] - g[:horizon_frames]) ** 2))


def cmse(pred_centers, gt_centers, final_only: bool = False) -> float:
    p = np.asarray(pred_centers, dtype=np.float64)
    g = np.asarray(gt_centers, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    if final_only:
        p, g = p[-1:], g[-1:]
    return float(np.mean((p - g) ** 2))


def cfmse(pred_centers, gt_centers) -> float:
    return cmse(pred_centers, gt_centers, final_only=True)


def best_of_k(modes, gt_centers) -> int:
    """Index of the mode with the lowest full-horizon CMSE; ties go to the lowest index."""
    modes = np.asarray(getattr(modes, "modes", modes), dtype=np.float64)
    g = np.asarray(gt_centers, dtype=np.float64)
    if modes.ndim != 3 or len(modes) == 0:
        raise ValueError("modes must be a nonempty (K, T, 2) array")
    errs = ((modes - g[None]) ** 2).mean(axis=(1, 2))
    return int(np.argmin(errs))


def scott_bandwidth(points: np.ndarray) -> np.ndarray:
    """Scott's-rule kernel covariance for ``(N, 2)`` points."""
    n, d = points.shape
    cov = np.atleast_2d(np.cov(points, rowvar=False))
    factor = n ** (-1.0 / (d + 4))
    bw = cov * factor**2
    if np.linalg.eigvalsh(bw).min() <= 1e-12 * max(1.0, np.trace(bw)):
        # collapsed cloud; keep the kernel proper
        bw = bw + 1e-6 * np.eye(d)
    return bw


def gaussian_kde_logpdf(points: np.ndarray, query: np.ndarray, bandwidth: np.ndarray) -> float:
    """log of the mean Gaussian-kernel density of ``points`` at ``query``."""
    d = points.shape[1]
    inv = np.linalg.inv(bandwidth)
    _, logdet = np.linalg.slogdet(bandwidth)
    diff = points - query[None]
    maha = np.einsum("ni,ij,nj->n", diff, inv, diff)
    log_k = -0.5 * maha - 0.5 * (d * math.log(2 * math.pi) + logdet)
    return float(logsumexp(log_k) - math.log(len(points)))


def kde_nll(samples, gt, bandwidth="scott") -> float:
    """Mean over timesteps of -log KDE density of the ground truth.

    ``samples`` is ``(N, T, 2)``; ``bandwidth`` is ``"scott"`` or a fixed
    isotropic kernel standard deviation ``h`` (float).  Densities are floored
    at 1e-300 before the log.
    """
    s = np.asarray(samples, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if s.ndim != 3 or s.shape[1:] != g.shape:
        raise ValueError(f"samples {s.shape} incompatible with gt {g.shape}")
    n = s.shape[0]
    if bandwidth == "scott":
        if n < 2:
            raise ValueError("Scott's rule needs at least 2 samples")
    else:
        h = float(bandwidth)
        if not h > 0:
            raise ValueError("fixed bandwidth must be > 0")
        fixed = np.eye(2) * h**2
    floor = math.log(DENSITY_FLOOR)
    nll = []
    for t in range(g.shape[0]):
        bw = scott_bandwidth(s[:, t]) if bandwidth == "scott" else fixed
        nll.append(-max(gaussian_kde_logpdf(s[:, t], g[t], bw), floor))
    return float(np.mean(nll))


@dataclass(frozen=True)
class MetricsReport:
    mse_05: float
    mse_10: float
    mse_15: float
    cmse: float
    cfmse: float
    kde_nll: float
    n_samples: int

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")

    def to_dict(self) -> dict:
        return {"format_version": REPORT_VERSION, **asdict(self)}

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path) -> "MetricsReport":
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        if d.pop("format_version", None) != REPORT_VERSION:
            raise ValueError(f"{path}: unsupported report version")
        return cls(**{f.name: d[f.name] for f in fields(cls)})


HORIZONS = {"mse_05": FPS // 2, "mse_10": FPS, "mse_15": FPS * 3 // 2}


def evaluate_predictions(bundles, samples, nll_trajectories=None, bandwidth="scott") -> MetricsReport:
    """Best-of-K metric suite over a split.

    ``nll_trajectories`` optionally holds one ``(N, T, 2)`` pixel-space
    sample cloud per sample for KDE-NLL; without it the NLL is NaN.
    """
    rows = []
    nlls = []
    for i, (bundle, sample) in enumerate(zip(bundles, samples, strict=True)):
        gt_boxes = sample.future.as_array()
        gt_centers = sample.future.centers()
        k = best_of_k(bundle.modes, gt_centers)
        pred_centers = bundle.modes[k]
        if bundle.per_mode_bbox is not None:
            pred_boxes = bundle.per_mode_bbox[k]
        else:
            # no size head output: keep the last observed size
            wh = np.asarray(sample.observed.as_array()[-1, 2:] - sample.observed.as_array()[-1, :2])
            pred_boxes = np.concatenate([pred_centers - wh / 2, pred_centers + wh / 2], axis=1)
        row = {name: mse_bbox(pred_boxes, gt_boxes, min(h, len(gt_boxes))) for name, h in HORIZONS.items()}
        row["cmse"] = cmse(pred_centers, gt_centers)
        row["cfmse"] = cmse(pred_centers, gt_centers, final_only=True)
        rows.append(row)
        if nll_trajectories is not None:
            nlls.append(kde_nll(nll_trajectories[i], gt_centers, bandwidth))
    means = {key: float(np.mean([r[key] for r in rows])) for key in rows[0]}
    return MetricsReport(kde_nll=float(np.mean(nlls)) if nlls else float("nan"),
                         n_samples=len(rows), **means)
