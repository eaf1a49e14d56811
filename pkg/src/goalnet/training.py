"""Training loop: Adam, plateau LR reduction, early stopping, step-deterministic resume."""
from __future__ import annotations

import json
import logging
import math
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .checkpoint import TrainState, save_checkpoint
from .core import RunConfig
from .heatmap import render_gaussians
from .metrics import LossBreakdown, bbox_loss, traj_loss
from .model import EncodedSample, GoalNet, SceneImageLoader, make_batch, sub_seed

log = logging.getLogger(__name__)


class Trainer:
    """Runs the training recipe on pre-encoded samples.

    Every random draw in a step (data order, goal-hint coin flips, dropout) is
    derived from ``(seed, epoch)`` or ``(seed, step)``, so a run resumed from a
    checkpoint retraces the uninterrupted run exactly.
    """

    def __init__(self, model: GoalNet, run_config: RunConfig, items: list[EncodedSample],
                 loader: SceneImageLoader, validate: Callable[[], float] | None = None,
                 out_dir=None, device="cpu"):
        self.model = model
        self.cfg = run_config
        self.items = items
        self.loader = loader
        self.validate = validate
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.device = device
        self.optimizer = torch.optim.Adam(model.parameters(), lr=run_config.lr)
        self.scheduler = torch.optim.lr_scheduler.ReduceLROnPlateau(
            self.optimizer, mode="min", factor=run_config.plateau_factor, patience=run_config.plateau_patience)
        self.steps_per_epoch = math.ceil(len(items) / run_config.batch_size)
        seed = run_config.seed
        self.state = TrainState(
            lr=run_config.lr,
            total_steps=run_config.epochs * self.steps_per_epoch,
            seeds={"master": seed, "data_order": sub_seed(seed, "order"),
                   "step": sub_seed(seed, "step"), "goal_hint": sub_seed(seed, "hint")},
        )
        self.history: list[dict] = []
        model.bbox_net.configure_schedule(self.state.total_steps)

    def load_state(self, ckpt) -> None:
        for ns, mod in self.model.namespaced_modules().items():
            mod.load_state_dict(ckpt.module_state(ns))
        opt = ckpt.optimizer_state()
        if opt is not None:
            self.optimizer.load_state_dict(opt)
        if "scheduler" in ckpt.meta:
            self.scheduler.load_state_dict(ckpt.meta["scheduler"])
        self.state = ckpt.train_state
        if "rng.torch" in ckpt.tensors:
            torch.set_rng_state(ckpt.tensors["rng.torch"])
        self.model.bbox_net.configure_schedule(self.state.total_steps)

    def epoch_order(self, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.state.seeds["data_order"], epoch]).permutation(len(self.items))

    def train_step(self, batch_items: list[EncodedSample], step: int) -> LossBreakdown:
        cfg = self.cfg.model
        torch.manual_seed(sub_seed(self.state.seeds["step"], step))
        rng = np.random.default_rng([self.state.seeds["goal_hint"], step])
        model = self.model
        model.train()
        model.bbox_net.set_step(step)
        batch = make_batch(batch_items, self.loader, cfg.heatmap_sigma, self.device)
        h, w = batch.obs_heatmaps.shape[-2:]
        scene = model.scene_input(batch.images)
        hint = torch.as_tensor(rng.random(len(batch_items)) < self.cfg.goal_hint_prob,
                               dtype=torch.float32, device=self.device)
        goal = render_gaussians(batch.fut_grid[:, -1], h, w, cfg.heatmap_sigma) * hint[:, None, None]
        logits = model.traj_net(batch.obs_heatmaps, scene, goal[:, None])
        target = render_gaussians(batch.fut_grid, h, w, cfg.heatmap_sigma)
        l_traj = traj_loss(logits, target)
        wh = model.bbox_net(batch.obs_norm, batch.fut_centers_norm)
        l_bbox = bbox_loss(wh, batch.fut_wh_norm)
        loss = l_traj + l_bbox
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer.step()
        lt, lb = l_traj.item(), l_bbox.item()
        return LossBreakdown(lt, lb, lt + lb)

    def _checkpoint(self, name: str) -> None:
        if self.out_dir is None:
            return
        save_checkpoint(self.out_dir / name, self.model.namespaced_modules(), self.cfg, self.state,
                        self.optimizer, self.scheduler)

    def _log(self, record: dict) -> None:
        self.history.append(record)
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            with (self.out_dir / "train_log.jsonl").open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    def _end_epoch(self) -> bool:
        """Scheduler/early-stop bookkeeping; returns True when training should stop."""
        st = self.state
        train_loss = st.epoch_loss_sum / max(st.epoch_loss_count, 1)
        metric = self.validate() if self.validate is not None else train_loss
        self.scheduler.step(metric)
        st.lr = float(self.optimizer.param_groups[0]["lr"])
        improved = metric < st.best_val_cfmse
        if improved:
            st.best_val_cfmse = float(metric)
            st.bad_epochs = 0
        else:
            st.bad_epochs += 1
        self._log({"epoch": st.epoch, "step": st.step, "train_loss": train_loss,
                   "monitor": float(metric), "lr": st.lr})
        log.info("epoch %d: train loss %.5f, monitor %.3f, lr %.2e", st.epoch, train_loss, metric, st.lr)
        st.epoch += 1
        st.epoch_loss_sum, st.epoch_loss_count = 0.0, 0
        if improved:
            self._checkpoint("best.safetensors")
        return st.bad_epochs >= self.cfg.early_stop_patience

    def run(self, max_steps: int | None = None) -> TrainState:
        st = self.state
        bs = self.cfg.batch_size
        while not st.finished and st.epoch < self.cfg.epochs:
            order = self.epoch_order(st.epoch)
            first = st.step - st.epoch * self.steps_per_epoch
            for b in range(first, self.steps_per_epoch):
                if max_steps is not None and st.step >= max_steps:
                    self._checkpoint("last.safetensors")
                    return st
                idx = order[b * bs:(b + 1) * bs]
                losses = self.train_step([self.items[i] for i in idx], st.step)
                self._log({"step": st.step, "traj": losses.traj, "bbox": losses.bbox, "total": losses.total})
                st.epoch_loss_sum += losses.total
                st.epoch_loss_count += 1
                st.step += 1
            if self._end_epoch():
                st.finished = True
            self._checkpoint("last.safetensors")
        st.finished = True
        self._checkpoint("last.safetensors")
        return st
