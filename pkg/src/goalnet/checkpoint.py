"""Single-file checkpoints: namespaced tensors plus a JSON metadata header.

Layout (safetensors container):

* tensors ``scene.*``, ``traj.*``, ``bbox.*`` - module state dicts
* tensors ``optim.<param index>.<key>`` - optimizer per-parameter state
* tensor ``rng.torch`` - torch CPU generator state
* metadata key ``goalnet`` - JSON with ``format_version``, the flat run
  config, ``config_hash``, ``train_state``, optimizer hyper-parameters and
  scheduler state
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
from safetensors.torch import load as st_load
from safetensors.torch import save as st_save

from .core import RunConfig

FORMAT_VERSION = 1


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    lr: float = 1e-4
    best_val_cfmse: float = float("inf")
    bad_epochs: int = 0
    total_steps: int = 0
    epoch_loss_sum: float = 0.0
    epoch_loss_count: int = 0
    seeds: dict = field(default_factory=dict)
    finished: bool = False


class CheckpointError(RuntimeError):
    pass


def checkpoint_bytes(modules: dict, run_config: RunConfig, state: TrainState,
                     optimizer: torch.optim.Optimizer | None = None, scheduler=None) -> bytes:
    tensors = {}
    for ns, mod in modules.items():
        for k, v in mod.state_dict().items():
            tensors[f"{ns}.{k}"] = v.detach().cpu().contiguous()
    meta = {
        "format_version": FORMAT_VERSION,
        "config": run_config.to_flat(),
        "config_hash": run_config.model.digest(),
        "train_state": asdict(state),
        "modules": sorted(modules),
    }
    if optimizer is not None:
        sd = optimizer.state_dict()
        for idx, st in sd["state"].items():
            for k, v in st.items():
                tensors[f"optim.{idx}.{k}"] = v.detach().cpu().contiguous() if torch.is_tensor(v) else torch.tensor(v)
        meta["optimizer_groups"] = [{k: (list(v) if isinstance(v, tuple) else v) for k, v in g.items()}
                                    for g in sd["param_groups"]]
    if scheduler is not None:
        meta["scheduler"] = scheduler.state_dict()
    tensors["rng.torch"] = torch.get_rng_state()
    return st_save(tensors, metadata={"goalnet": json.dumps(meta, sort_keys=True)})


def save_checkpoint(path, modules, run_config, state, optimizer=None, scheduler=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = checkpoint_bytes(modules, run_config, state, optimizer, scheduler)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)
    return path


@dataclass
class LoadedCheckpoint:
    tensors: dict
    meta: dict

    @property
    def run_config(self) -> RunConfig:
        return RunConfig.from_flat(self.meta["config"])

    @property
    def train_state(self) -> TrainState:
        return TrainState(**self.meta["train_state"])

    def module_state(self, ns: str) -> dict:
        prefix = ns + "."
        return {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}

    def optimizer_state(self) -> dict | None:
        if "optimizer_groups" not in self.meta:
            return None
        state: dict = {}
        for k, v in self.tensors.items():
            if k.startswith("optim."):
                _, idx, key = k.split(".", 2)
                state.setdefault(int(idx), {})[key] = v
        groups = [dict(g) for g in self.meta["optimizer_groups"]]
        for g in groups:
            if "betas" in g:
                g["betas"] = tuple(g["betas"])
        return {"state": state, "param_groups": groups}


def load_checkpoint(path) -> LoadedCheckpoint:
    path = Path(path)
    with path.open("rb") as fh:  # read-only: evaluation never rewrites checkpoints
        blob = fh.read()
    try:
        tensors = st_load(blob)
        header_len = int.from_bytes(blob[:8], "little")
        header = json.loads(blob[8:8 + header_len])
        meta = json.loads(header["__metadata__"]["goalnet"])
    except Exception as exc:  # noqa: BLE001
        raise CheckpointError(f"{path}: not a goalnet checkpoint ({exc})") from exc
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {meta.get('format_version')}")
    return LoadedCheckpoint(tensors, meta)


def config_diff(a: RunConfig, b: RunConfig, model_only: bool = True) -> dict:
    """Fields whose values differ, as ``{name: (a, b)}``."""
    da = a.model.to_dict() if model_only else a.to_flat()
    db = b.model.to_dict() if model_only else b.to_flat()
    return {k: (da[k], db[k]) for k in sorted(da) if da[k] != db.get(k)}
