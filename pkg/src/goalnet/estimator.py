"""scikit-learn style wrapper: ``fit`` on samples, ``predict`` multi-modal futures."""
from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .checkpoint import CheckpointError, config_diff, load_checkpoint, save_checkpoint
from .core import RunConfig, Sample, center_wh_to_corners, make_grid_spec
from .heatmap import render_gaussians
from .metrics import MetricsReport, cfmse, evaluate_predictions
from .model import EncodedSample, GoalNet, SceneImageLoader, encode_sample, sub_seed
from .trajectory import PredictionBundle, predict_multimodal, sample_trajectories
from .training import Trainer
from .validation import check_k, check_samples

log = logging.getLogger(__name__)


class GoalNetForecaster(BaseEstimator):
    """Goal-area trajectory and box forecaster.

    Parameters
    ----------
    run_config : RunConfig, optional
        Model architecture and training recipe; defaults to ``RunConfig()``.
    image_root : path, optional
        Directory that relative ``scene_image_ref`` paths are resolved against.
    k : int
        Default number of predicted modes.
    device : str
        Torch device for training and inference.
    max_steps : int, optional
        Stop training after this many optimizer steps (checkpoint kept for resume).
    out_dir : path, optional
        Where checkpoints and the training log are written.
    """

    def __init__(self, run_config: RunConfig | None = None, image_root=None, k: int = 20,
                 device: str = "cpu", max_steps: int | None = None, out_dir=None):
        self.run_config = run_config
        self.image_root = image_root
        self.k = k
        self.device = device
        self.max_steps = max_steps
        self.out_dir = out_dir

    # -- helpers ---------------------------------------------------------
    @property
    def config_(self) -> RunConfig:
        return self.run_config if self.run_config is not None else RunConfig()

    def _scene_size(self) -> tuple[int, int]:
        cfg = self.config_
        return (cfg.scene_w, cfg.scene_h)

    def _encode(self, samples: list[Sample]) -> list[EncodedSample]:
        cfg = self.config_
        items = [encode_sample(s, self._scene_size(), cfg.downsample_factor) for s in samples]
        grids = {(it.grid.grid_w, it.grid.grid_h) for it in items}
        if len(grids) != 1:
            raise ValueError(f"samples map to different grids {sorted(grids)}")
        return items

    def _check_fitted(self) -> None:
        if not hasattr(self, "model_"):
            raise NotFittedError("GoalNetForecaster is not fitted; call fit() or load() first")

    def _build(self, grid) -> None:
        cfg = self.config_
        cfg.model.validate()
        torch.manual_seed(sub_seed(cfg.seed, "init"))
        self.model_ = GoalNet(cfg.model, grid).to(self.device)
        self.loader_ = SceneImageLoader(self.image_root, self._scene_size())

    # -- training --------------------------------------------------------
    def fit(self, X, y=None, X_val=None, resume_from=None) -> "GoalNetForecaster":
        """Train on a sequence of :class:`Sample`.  ``y`` is ignored (futures live in the samples)."""
        cfg = self.config_
        samples = check_samples(X, cfg.model.obs_len, cfg.model.pred_len)
        items = self._encode(samples)
        self._build(items[0].grid)
        validate = None
        if X_val is not None:
            val = check_samples(X_val, cfg.model.obs_len, cfg.model.pred_len)
            validate = lambda: self._val_cfmse(val)  # noqa: E731
        trainer = Trainer(self.model_, cfg, items, self.loader_, validate, self.out_dir, self.device)
        if resume_from is not None:
            ckpt = load_checkpoint(resume_from)
            # only the epoch budget may change on resume (to extend a run)
            diff = {k: v for k, v in config_diff(cfg, ckpt.run_config, model_only=False).items() if k != "epochs"}
            if diff:
                fields = ", ".join(f"{k} (given {a!r}, checkpoint {b!r})" for k, (a, b) in diff.items())
                raise CheckpointError(f"config mismatch: {fields}")
            trainer.load_state(ckpt)
        self.train_state_ = trainer.run(self.max_steps)
        self.history_ = trainer.history
        self.trainer_ = trainer
        self.model_.eval()
        return self

    def _val_cfmse(self, samples: list[Sample]) -> float:
        bundles = self.predict(samples, k=1)
        return float(np.mean([cfmse(b.modes[0], s.future.centers()) for b, s in zip(bundles, samples)]))

    # -- inference -------------------------------------------------------
    def _inputs(self, sample: Sample, cache: dict):
        cfg = self.config_
        it = encode_sample(sample, self._scene_size(), cfg.downsample_factor)
        if it.image_ref not in cache:
            img = self.loader_(it.image_ref).to(self.device)[None]
            cache[it.image_ref] = self.model_.scene_input(img)[0]
        g = it.grid
        obs = render_gaussians(torch.as_tensor(it.obs_grid, dtype=torch.float32), g.grid_h, g.grid_w,
                               cfg.model.heatmap_sigma).to(self.device)
        return it, obs, cache[it.image_ref]

    @torch.no_grad()
    def _boxes(self, it: EncodedSample, modes: np.ndarray) -> np.ndarray:
        """Per-mode pixel corner boxes ``(K, T, 4)`` from the size head."""
        scale = np.array([it.grid.image_w, it.grid.image_h], dtype=np.float64)
        k = len(modes)
        obs = torch.as_tensor(it.obs_norm, dtype=torch.float32, device=self.device)[None].expand(k, -1, -1)
        fut = torch.as_tensor(modes / scale, dtype=torch.float32, device=self.device)
        wh = self.model_.bbox_net(obs, fut).double().cpu().numpy() * scale
        return center_wh_to_corners(np.concatenate([modes, wh], axis=-1))

    @torch.no_grad()
    def predict(self, X, k: int | None = None, seed: int | None = None) -> list[PredictionBundle]:
        """One :class:`PredictionBundle` of ``k`` modes (pixel centres and boxes) per sample."""
        self._check_fitted()
        cfg = self.config_
        samples = check_samples(X, cfg.model.obs_len, None, require_future=False)
        k = check_k(k, self.k)
        seed = cfg.seed if seed is None else seed
        self.model_.eval()
        cache: dict = {}
        out = []
        for i, s in enumerate(samples):
            it, obs, scene = self._inputs(s, cache)
            bundle = predict_multimodal(self.model_.traj_net, obs, scene, k, sub_seed(seed, "goals", i), it.grid)
            bundle.per_mode_bbox = self._boxes(it, bundle.modes)
            out.append(bundle)
        return out

    @torch.no_grad()
    def sample_trajectories(self, X, n: int | None = None, seed: int | None = None) -> list[np.ndarray]:
        """``(n, T, 2)`` pixel trajectories per sample, goals drawn from the goal map."""
        self._check_fitted()
        cfg = self.config_
        samples = check_samples(X, cfg.model.obs_len, None, require_future=False)
        n = check_k(n, cfg.nll_samples)
        seed = cfg.seed if seed is None else seed
        self.model_.eval()
        cache: dict = {}
        out = []
        for i, s in enumerate(samples):
            it, obs, scene = self._inputs(s, cache)
            out.append(sample_trajectories(self.model_.traj_net, obs, scene, n, sub_seed(seed, "nll", i), it.grid))
        return out

    def evaluate(self, X, k: int | None = None, seed: int | None = None, nll_samples: int | None = None,
                 bandwidth="scott") -> MetricsReport:
        """Best-of-K metric suite; ``nll_samples=0`` skips KDE-NLL (reported as NaN)."""
        cfg = self.config_
        samples = check_samples(X, cfg.model.obs_len, cfg.model.pred_len)
        bundles = self.predict(samples, k, seed)
        n = cfg.nll_samples if nll_samples is None else nll_samples
        clouds = self.sample_trajectories(samples, n, seed) if n > 0 else None
        return evaluate_predictions(bundles, samples, clouds, bandwidth)

    def score(self, X, y=None) -> float:
        """Negative CFMSE of the best of ``k`` modes (higher is better)."""
        return -self.evaluate(X, nll_samples=0).cfmse

    # -- persistence -----------------------------------------------------
    def save(self, path) -> Path:
        self._check_fitted()
        trainer = getattr(self, "trainer_", None)
        state = self.train_state_
        return save_checkpoint(path, self.model_.namespaced_modules(), self.config_, state,
                               trainer.optimizer if trainer else None, trainer.scheduler if trainer else None)

    @classmethod
    def load(cls, path, image_root=None, image_size=None, device: str = "cpu", k: int = 20,
             run_config: RunConfig | None = None) -> "GoalNetForecaster":
        """Rebuild a fitted forecaster from a checkpoint.

        ``image_size`` (source frame size) fixes the grid; it defaults to the
        scene size, which only affects the grid's pixel scale, not the network.
        ``run_config`` if given must match the checkpoint's model fields.
        """
        ckpt = load_checkpoint(path)
        cfg = ckpt.run_config
        if run_config is not None:
            diff = config_diff(run_config, cfg)
            if diff:
                raise CheckpointError("config mismatch: " + ", ".join(
                    f"{k} (given {a!r}, checkpoint {b!r})" for k, (a, b) in diff.items()))
        est = cls(cfg, image_root=image_root, k=k, device=device)
        size = image_size or (cfg.scene_w, cfg.scene_h)
        est._build(make_grid_spec(size, (cfg.scene_w, cfg.scene_h), cfg.downsample_factor))
        for ns, mod in est.model_.namespaced_modules().items():
            mod.load_state_dict(ckpt.module_state(ns))
        est.model_.eval()
        est.train_state_ = ckpt.train_state
        return est
