"""Shared fixtures-as-functions for the test suite."""
import math

import numpy as np
import torch

from goalnet.core import BoxTrack, ModelConfig, Sample
from goalnet.metrics import DENSITY_FLOOR


def tiny_config(**kw) -> ModelConfig:
    base = dict(encoder_channels=(4, 4, 8), obs_len=3, pred_len=4, scene_feature_channels=2,
                K_modes=3, heatmap_sigma=1.5, aspp_rates=(1, 2), bbox_hidden=8, bbox_blocks=2)
    base.update(kw)
    return ModelConfig(**base)


def make_sample(centers, obs_len, image_size=(640, 384), wh=(20.0, 50.0), ref="scenes/a.png",
                start=0) -> Sample:
    """Window from a centre path with a constant box size."""
    c = np.asarray(centers, dtype=np.float64)
    half = np.asarray(wh) / 2
    boxes = np.concatenate([c - half, c + half], axis=1)
    obs = BoxTrack.from_array(boxes[:obs_len], start, "p", "v")
    fut = BoxTrack.from_array(boxes[obs_len:], start + obs_len, "p", "v")
    return Sample(obs, fut, ref, image_size)


def fd_relative_error(f, tensors, n_probe=None, eps=1e-6, seed=0) -> float:
    """Max |analytic - central difference| / max |central difference| over probed entries.

    ``f`` maps nothing to a scalar float64 tensor and reads ``tensors``
    (leaf tensors with ``requires_grad``).  ``n_probe`` entries per tensor are
    checked (all when ``None``).
    """
    grads = torch.autograd.grad(f(), tensors)
    rng = np.random.default_rng(seed)
    ana, num = [], []
    with torch.no_grad():
        for t, g in zip(tensors, grads):
            flat = t.view(-1)
            idx = np.arange(flat.numel())
            if n_probe is not None and n_probe < flat.numel():
                idx = rng.choice(flat.numel(), n_probe, replace=False)
            for i in idx:
                old = flat[i].item()
                flat[i] = old + eps
                up = f().item()
                flat[i] = old - eps
                down = f().item()
                flat[i] = old
                num.append((up - down) / (2 * eps))
                ana.append(g.reshape(-1)[i].item())
    ana, num = np.array(ana), np.array(num)
    return float(np.abs(ana - num).max() / max(np.abs(num).max(), 1e-12))


def tiny_run_config(**kw):
    from goalnet.core import RunConfig

    model = kw.pop("model", None) or tiny_config()
    base = dict(model=model, scene_w=64, scene_h=64, downsample_factor=4, batch_size=4, epochs=2,
                stride=1, nll_samples=16, seed=0)
    base.update(kw)
    return RunConfig(**base)


def write_tiny_dataset(root, n_train=24, n_test=6, seed=0):
    """Small synthetic dataset matching ``tiny_config`` windows (3 observed + 4 future frames)."""
    from goalnet.data import SyntheticSceneSpec, generate_synthetic, write_synthetic

    spec = SyntheticSceneSpec(image_size=(64, 64), speed_range=(0.5, 1.5), goal_jitter=1.0, track_len=7,
                              agent_count=4)
    train, ti = generate_synthetic(spec, n_train, seed, "train", video_prefix="tr")
    test, si = generate_synthetic(spec, n_test, seed + 1, "test", video_prefix="te")
    write_synthetic(root, train, ti)
    write_synthetic(root, test, si)
    return root / "train.jsonl", root / "test.jsonl"


def brute_force_kde_nll(samples, gt, cov):
    """Independent double loop: explicit kernel sum per timestep."""
    n, t_len, _ = samples.shape
    inv = np.linalg.inv(cov)
    norm = 1.0 / (2 * math.pi * math.sqrt(np.linalg.det(cov)))
    total = 0.0
    for t in range(t_len):
        dens = 0.0
        for i in range(n):
            d = gt[t] - samples[i, t]
            dens += norm * math.exp(-0.5 * float(d @ inv @ d))
        total += -math.log(max(dens / n, DENSITY_FLOOR))
    return total / t_len
