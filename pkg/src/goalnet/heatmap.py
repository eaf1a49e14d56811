"""Trajectory <-> heatmap conversion and goal extraction from probability maps."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .core import GridSpec, NumericError

HEATMAP_KINDS = ("target", "probability", "logits")


@dataclass
class HeatmapStack:
    data: torch.Tensor  # (T, H, W)
    grid: GridSpec
    kind: str
    out_of_bounds: tuple[bool, ...] = ()

    def __post_init__(self):
        if self.kind not in HEATMAP_KINDS:
            raise ValueError(f"unknown heatmap kind {self.kind!r}")
        if self.data.ndim != 3:
            raise ValueError(f"heatmap data must be (T, H, W), got {tuple(self.data.shape)}")
        if tuple(self.data.shape[1:]) != (self.grid.grid_h, self.grid.grid_w):
            raise ValueError(
                f"heatmap {tuple(self.data.shape[1:])} does not match grid {(self.grid.grid_h, self.grid.grid_w)}"
            )


@dataclass
class GoalSet:
    main: tuple[float, float]
    secondary: list[tuple[float, float]] = field(default_factory=list)
    masses: list[float] = field(default_factory=list)
    degenerate: bool = False

    def all_goals(self) -> list[tuple[float, float]]:
        return [tuple(self.main)] + [tuple(g) for g in self.secondary]


def render_gaussians(points: torch.Tensor, height: int, width: int, sigma: float) -> torch.Tensor:
    """Peak-1 Gaussians for ``(..., 2)`` grid points -> ``(..., H, W)``.

    Points outside the grid give all-zero maps.
    """
    if not sigma > 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    dtype = points.dtype if points.is_floating_point() else torch.float32
    xs = torch.arange(width, dtype=dtype, device=points.device)
    ys = torch.arange(height, dtype=dtype, device=points.device)
    u = points[..., 0:1]
    v = points[..., 1:2]
    gx = torch.exp(-((xs - u) ** 2) / (2 * sigma**2))  # (..., W)
    gy = torch.exp(-((ys - v) ** 2) / (2 * sigma**2))  # (..., H)
    maps = gy.unsqueeze(-1) * gx.unsqueeze(-2)
    inside = (u >= -0.5) & (u < width - 0.5) & (v >= -0.5) & (v < height - 0.5)
    return maps * inside.unsqueeze(-1).to(dtype)


def encode_track(points, grid: GridSpec, sigma: float) -> HeatmapStack:
    pts = torch.as_tensor(np.asarray(points, dtype=np.float64)).reshape(-1, 2)
    if len(pts) == 0:
        raise ValueError("need at least one point")
    data = render_gaussians(pts, grid.grid_h, grid.grid_w, sigma)
    oob = tuple(bool(not ok) for ok in grid.in_bounds(pts.numpy()))
    return HeatmapStack(data, grid, "target", out_of_bounds=oob)


def unwrap(x):
    """Tensor payload of a HeatmapStack-like wrapper; tensors pass through.

    (``torch.Tensor.data`` is the detached view, so ``getattr(x, "data")``
    must never be used on a tensor that needs gradients.)
    """
    return x if isinstance(x, torch.Tensor) else x.data


def normalize_target(heatmap: HeatmapStack) -> HeatmapStack:
    """Target stack -> probability stack (each in-bounds channel divided by its sum)."""
    total = heatmap.data.sum(dim=(-2, -1), keepdim=True)
    data = torch.where(total > 0, heatmap.data / total.clamp_min(1e-300), heatmap.data)
    return HeatmapStack(data, heatmap.grid, "probability", heatmap.out_of_bounds)


def spatial_soft_argmax(x: torch.Tensor, temperature: float = 1.0, is_logits: bool = True) -> torch.Tensor:
    """Expected (x, y) cell coordinates of ``(..., H, W)`` maps -> ``(..., 2)``."""
    if not temperature > 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    if not torch.isfinite(x).all():
        raise NumericError("soft_argmax got non-finite input")
    h, w = x.shape[-2:]
    flat = x.reshape(*x.shape[:-2], h * w)
    p = torch.softmax(flat / temperature, dim=-1) if is_logits else flat
    p = p.reshape(x.shape)
    xs = torch.arange(w, dtype=x.dtype, device=x.device)
    ys = torch.arange(h, dtype=x.dtype, device=x.device)
    ex = (p.sum(-2) * xs).sum(-1)
    ey = (p.sum(-1) * ys).sum(-1)
    return torch.stack([ex, ey], dim=-1)


def soft_argmax(heatmap: HeatmapStack, temperature: float = 1.0) -> torch.Tensor:
    if heatmap.kind == "target":
        raise ValueError("soft_argmax needs a logits or probability map")
    return spatial_soft_argmax(heatmap.data, temperature, is_logits=heatmap.kind == "logits")


def hard_argmax(heatmap) -> list[tuple[int, int]]:
    """Per-channel (x, y) of the maximum; ties go to the first cell in row-major order."""
    data = heatmap.data if isinstance(heatmap, HeatmapStack) else heatmap
    arr = data.detach().cpu().numpy() if isinstance(data, torch.Tensor) else np.asarray(data)
    h, w = arr.shape[-2:]
    idx = np.argmax(arr.reshape(-1, h * w), axis=1)
    return [(int(i % w), int(i // w)) for i in idx]


def _kmeans_pp_init(points, weights, k, rng) -> np.ndarray:
    n = len(points)
    first = rng.choice(n, p=weights / weights.sum())
    centers = [points[first]]
    closest = ((points - points[first]) ** 2).sum(1)
    for _ in range(1, k):
        pot = closest * weights
        total = pot.sum()
        if total <= 0:
            idx = rng.choice(n, p=weights / weights.sum())
        else:
            idx = rng.choice(n, p=pot / total)
        centers.append(points[idx])
        closest = np.minimum(closest, ((points - points[idx]) ** 2).sum(1))
    return np.array(centers)


def weighted_kmeans(points: np.ndarray, weights: np.ndarray, k: int, seed: int,
                    max_iter: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's algorithm with weighted k-means++ seeding.

    Returns ``(centers (k, 2), labels (n,))``.  Empty clusters are re-seeded
    at the point contributing the most weighted inertia.
    """
    points = np.asarray(points, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if k < 1 or k > len(points):
        raise ValueError(f"need 1 <= k <= {len(points)}, got {k}")
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp_init(points, weights, k, rng)
    labels = np.full(len(points), -1)
    sq = (points ** 2).sum(1)
    for _ in range(max_iter):
        d2 = np.maximum(sq[:, None] - 2.0 * points @ centers.T + (centers ** 2).sum(1)[None], 0.0)
        new_labels = d2.argmin(1)
        mass = np.bincount(new_labels, weights=weights, minlength=k)
        empty = np.flatnonzero(mass <= 0)
        if len(empty):
            cost = d2[np.arange(len(points)), new_labels] * weights
            for j in empty:
                far = int(np.argmax(cost))
                new_labels[far] = j
                centers[j] = points[far]
                cost[far] = -1.0
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        mass = np.bincount(labels, weights=weights, minlength=k)
        for d in range(points.shape[1]):
            centers[:, d] = np.bincount(labels, weights=weights * points[:, d], minlength=k) / mass
    return centers, labels


@dataclass
class SecondaryGoals:
    centroids: list[tuple[float, float]]
    masses: list[float]
    degenerate: bool
    labels: np.ndarray | None = None
    cells: np.ndarray | None = None
    cell_weights: np.ndarray | None = None


def sample_secondary_goals(goal_map, k: int, seed: int, mass_threshold: float = 0.05,
                           main: Sequence[float] | None = None) -> SecondaryGoals:
    """Cluster a single-channel probability map into ``k`` goal centroids.

    Cells below ``mass_threshold * max`` are ignored.  Centroids come back
    ordered by descending cluster mass.  When fewer than ``k`` cells survive,
    the list is padded with ``main`` (default: the map's weighted mean).
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    data = goal_map.data if isinstance(goal_map, HeatmapStack) else goal_map
    arr = data.detach().cpu().double().numpy() if isinstance(data, torch.Tensor) else np.asarray(data, float)
    arr = arr.reshape(-1, *arr.shape[-2:])
    if arr.shape[0] != 1:
        raise ValueError("goal map must have exactly one channel")
    p = arr[0]
    if not np.isfinite(p).all() or (p < 0).any():
        raise NumericError("goal map must be finite and nonnegative")
    ys, xs = np.nonzero(p >= mass_threshold * p.max())
    cells = np.stack([xs, ys], axis=1).astype(np.float64)
    w = p[ys, xs]
    if main is None:
        main = tuple((cells * w[:, None]).sum(0) / w.sum())
    n_clusters = min(k, len(cells))
    centers, labels = weighted_kmeans(cells, w, n_clusters, seed)
    masses = np.bincount(labels, weights=w, minlength=n_clusters)
    order = sorted(range(n_clusters), key=lambda j: -masses[j])
    remap = np.empty(n_clusters, dtype=int)
    remap[order] = np.arange(n_clusters)
    centroids = [tuple(map(float, centers[j])) for j in order]
    out_masses = [float(masses[j]) for j in order]
    degenerate = n_clusters < k
    while len(centroids) < k:
        centroids.append((float(main[0]), float(main[1])))
        out_masses.append(0.0)
    return SecondaryGoals(centroids, out_masses, degenerate, remap[labels], cells, w)
