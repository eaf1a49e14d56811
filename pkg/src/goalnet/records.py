"""Serialized prediction bundles.

A bundle file is one JSON object (``format_version`` 1)::

    {
      "format_version": 1,
      "sample": {"observed": [[x1, y1, x2, y2], ...], "future": [[...], ...],
                 "start_frame": int, "track_id": str, "video_id": str,
                 "scene_image_ref": str, "image_size": [w, h]},
      "modes": [[[x, y], ...], ...],            # K x pred_len pixel centres
      "per_mode_bbox": [[[x1, y1, x2, y2], ...], ...] | null,
      "goal_set": {"main": [u, v], "secondary": [[u, v], ...],
                   "masses": [...], "degenerate": bool},   # grid coordinates
      "degenerate": bool
    }

Mode 0 is the main-goal trajectory.  Floats are written with ``repr``
precision so a read-back bundle is identical to the written one.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .core import BoxTrack, Sample
from .heatmap import GoalSet
from .trajectory import PredictionBundle

BUNDLE_VERSION = 1


def sample_to_dict(sample: Sample) -> dict:
    return {
        "observed": sample.observed.as_array().tolist(),
        "future": sample.future.as_array().tolist(),
        "start_frame": sample.observed.frame_ids[0],
        "track_id": sample.observed.track_id,
        "video_id": sample.observed.video_id,
        "scene_image_ref": sample.scene_image_ref,
        "image_size": list(sample.image_size),
    }


def sample_from_dict(d: dict) -> Sample:
    obs = BoxTrack.from_array(d["observed"], d["start_frame"], d.get("track_id", ""), d.get("video_id", ""))
    fut = BoxTrack.from_array(d["future"], d["start_frame"] + len(obs), obs.track_id, obs.video_id)
    return Sample(obs, fut, d["scene_image_ref"], tuple(d["image_size"]))


def bundle_to_dict(bundle: PredictionBundle, sample: Sample) -> dict:
    gs = bundle.goal_set
    return {
        "format_version": BUNDLE_VERSION,
        "sample": sample_to_dict(sample),
        "modes": bundle.modes.tolist(),
        "per_mode_bbox": None if bundle.per_mode_bbox is None else bundle.per_mode_bbox.tolist(),
        "goal_set": {"main": list(gs.main), "secondary": [list(g) for g in gs.secondary],
                     "masses": list(gs.masses), "degenerate": bool(gs.degenerate)},
        "degenerate": bool(bundle.degenerate),
    }


def bundle_from_dict(d: dict) -> tuple[PredictionBundle, Sample]:
    if d.get("format_version") != BUNDLE_VERSION:
        raise ValueError(f"unsupported bundle version {d.get('format_version')!r}")
    g = d["goal_set"]
    goal_set = GoalSet(tuple(g["main"]), [tuple(x) for x in g["secondary"]], list(g["masses"]), g["degenerate"])
    sample = sample_from_dict(d["sample"])
    modes = np.asarray(d["modes"], dtype=np.float64).reshape(-1, sample.pred_len, 2)
    boxes = d["per_mode_bbox"]
    if boxes is not None:
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, sample.pred_len, 4)
    return PredictionBundle(modes, goal_set, boxes, d["degenerate"]), sample


def write_bundle(path, bundle: PredictionBundle, sample: Sample) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(bundle_to_dict(bundle, sample), sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_bundle(path) -> tuple[PredictionBundle, Sample]:
    return bundle_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
